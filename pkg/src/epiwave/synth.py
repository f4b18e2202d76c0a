"""Synthetic multichannel recordings with planted traveling-wave events.

Events start at a seed channel and spread along a known directed weighted
graph: each edge transmits with probability equal to its weight and adds a
random per-edge delay, earliest arrival wins (single spread pass, no
re-infection). Affected spans carry a waveform template added onto the noise
background and are labeled positive, which gives exact per-channel arrival
ground truth for structure-recovery checks.

Waveform templates, with dt the time since that channel's arrival and f the
per-event jittered frequency:

    spike_train:  a * max(0, cos(2*pi*f*dt))**6
    spike_wave:   a * (max(0, cos(2*pi*f*dt))**6 - 0.4*sin(2*pi*f*dt))
    hf_burst:     a * sin(2*pi*f*dt) * sin(pi*dt/duration)**2
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import Recording, SegmentationConfig, trivial_channel_map
from .errors import ConfigError, SaturationError, UndefinedScoreError

WAVEFORM_FAMILIES = ("spike_train", "spike_wave", "hf_burst")
NOISE_SPECTRA = ("white", "pink")

_FREQ_BANDS = {"spike_train": (2.0, 6.0), "spike_wave": (2.5, 4.0), "hf_burst": (60.0, 120.0)}


@dataclass(frozen=True)
class ScenarioConfig:
    n_channels: int = 8
    n_regions: int = 3
    planted_graph: tuple = ()  # row-major |C| x |C| weights in [0, 1]
    event_rate: float = 12.0  # events per hour
    event_duration_range: tuple[float, float] = (4.0, 8.0)  # seconds
    propagation_delay_range: tuple[float, float] = (0.2, 0.8)  # seconds per edge
    waveform_family: str = "spike_wave"
    noise_spectrum: str = "pink"
    noise_amplitude: float = 1.0
    event_amplitude: float = 3.0
    sample_rate: float = 128.0
    duration_seconds: float = 600.0
    seed: int = 0

    def __post_init__(self):
        if self.n_channels < 1 or not 1 <= self.n_regions <= self.n_channels:
            raise ConfigError("need n_channels >= 1 and 1 <= n_regions <= n_channels")
        if self.waveform_family not in WAVEFORM_FAMILIES:
            raise ConfigError(f"waveform_family must be one of {WAVEFORM_FAMILIES}")
        if self.noise_spectrum not in NOISE_SPECTRA:
            raise ConfigError(f"noise_spectrum must be one of {NOISE_SPECTRA}")
        g = self.graph_matrix()
        if g.shape != (self.n_channels, self.n_channels):
            raise ConfigError("planted_graph must be |C| x |C|")
        if (g < 0).any() or (g > 1).any():
            raise ConfigError("planted_graph weights must lie in [0, 1]")
        lo, hi = self.event_duration_range
        if not 0 < lo <= hi:
            raise ConfigError("event durations must be positive")
        dlo, dhi = self.propagation_delay_range
        if dlo < 0 or dhi < dlo:
            raise ConfigError("propagation delays must be >= 0")
        if self.event_rate < 0 or self.noise_amplitude < 0:
            raise ConfigError("event_rate and noise_amplitude must be >= 0")
        if self.sample_rate <= 0 or self.duration_seconds <= 0:
            raise ConfigError("sample_rate and duration_seconds must be positive")

    def graph_matrix(self) -> np.ndarray:
        g = np.asarray(self.planted_graph, dtype=np.float64)
        if g.size == 0:
            g = np.zeros((self.n_channels, self.n_channels))
        return g.reshape(self.n_channels, self.n_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["planted_graph"] = self.graph_matrix().tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key in ("event_duration_range", "propagation_delay_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "planted_graph" in d:
            d["planted_graph"] = tuple(np.asarray(d["planted_graph"]).ravel().tolist())
        return cls(**d)


@dataclass(frozen=True)
class PlantedEvent:
    onset_channel: int
    onset_time: float  # seconds from recording start
    duration: float  # seconds of activity per affected channel
    waveform: str
    frequency: float
    arrivals: dict[int, float]  # channel -> arrival time in seconds


@dataclass(frozen=True)
class PlantedTruth:
    events: list[PlantedEvent]
    planted_graph: np.ndarray
    sample_rate: float
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "sample_rate": self.sample_rate,
            "planted_graph": np.asarray(self.planted_graph).tolist(),
            "config": self.config,
            "events": [
                {**asdict(e), "arrivals": {str(k): v for k, v in e.arrivals.items()}}
                for e in self.events
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PlantedTruth":
        payload = json.loads(text)
        events = [
            PlantedEvent(
                onset_channel=e["onset_channel"],
                onset_time=e["onset_time"],
                duration=e["duration"],
                waveform=e["waveform"],
                frequency=e["frequency"],
                arrivals={int(k): v for k, v in e["arrivals"].items()},
            )
            for e in payload["events"]
        ]
        return cls(
            events=events,
            planted_graph=np.asarray(payload["planted_graph"]),
            sample_rate=payload["sample_rate"],
            config=payload.get("config", {}),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PlantedTruth":
        return cls.from_json(Path(path).read_text())


def _noise(rng: np.random.Generator, spectrum: str, amplitude: float,
           n_points: int, n_channels: int) -> np.ndarray:
    white = rng.standard_normal((n_points, n_channels))
    if spectrum == "white" or amplitude == 0:
        return amplitude * white
    # pink: shape the spectrum by 1/sqrt(f) so power falls as 1/f
    spec = np.fft.rfft(white, axis=0)
    freqs = np.fft.rfftfreq(n_points)
    scale = np.ones_like(freqs)
    scale[1:] = 1.0 / np.sqrt(freqs[1:])
    scale[0] = 0.0  # drop DC so the mean stays centered
    shaped = np.fft.irfft(spec * scale[:, None], n=n_points, axis=0)
    std = shaped.std(axis=0, keepdims=True)
    std[std == 0] = 1.0
    return amplitude * shaped / std


def _waveform(family: str, freq: float, dt: np.ndarray, duration: float,
              amplitude: float) -> np.ndarray:
    phase = 2.0 * np.pi * freq * dt
    if family == "spike_train":
        return amplitude * np.maximum(0.0, np.cos(phase)) ** 6
    if family == "spike_wave":
        return amplitude * (np.maximum(0.0, np.cos(phase)) ** 6 - 0.4 * np.sin(phase))
    # hf_burst: tone under a squared-sine envelope spanning the event
    return amplitude * np.sin(phase) * np.sin(np.pi * dt / duration) ** 2


def _spread_event(rng, graph: np.ndarray, seed_channel: int,
                  delay_range: tuple[float, float]) -> dict[int, float]:
    """Earliest-arrival spread from the seed; one transmission try per edge."""
    arrivals: dict[int, float] = {}
    heap = [(0.0, seed_channel)]
    while heap:
        t_arr, ch = heapq.heappop(heap)
        if ch in arrivals:
            continue
        arrivals[ch] = t_arr
        for j in range(graph.shape[1]):
            w = graph[ch, j]
            if j in arrivals or w <= 0:
                continue
            if rng.random() <= w:
                delay = rng.uniform(*delay_range)
                heapq.heappush(heap, (t_arr + delay, j))
    return arrivals


def generate(config: ScenarioConfig) -> tuple[Recording, PlantedTruth]:
    """Simulate a recording plus its ground truth; deterministic given seed."""
    rng = np.random.default_rng(config.seed)
    fs = config.sample_rate
    n_points = int(round(config.duration_seconds * fs))
    n_ch = config.n_channels
    graph = config.graph_matrix()

    samples = _noise(rng, config.noise_spectrum, config.noise_amplitude, n_points, n_ch)
    labels = np.zeros((n_points, n_ch), dtype=np.uint8)

    hours = config.duration_seconds / 3600.0
    n_events = int(rng.poisson(config.event_rate * hours)) if config.event_rate > 0 else 0
    dur_lo, dur_hi = config.event_duration_range

    events: list[PlantedEvent] = []
    for _ in range(n_events):
        duration = rng.uniform(dur_lo, dur_hi)
        latest_onset = max(0.0, config.duration_seconds - duration)
        onset = rng.uniform(0.0, latest_onset)
        seed_channel = int(rng.integers(n_ch))
        f_lo, f_hi = _FREQ_BANDS[config.waveform_family]
        f_hi = min(f_hi, 0.4 * fs)  # keep the tone below Nyquist with margin
        freq = rng.uniform(min(f_lo, f_hi), f_hi)
        spread = _spread_event(rng, graph, seed_channel, config.propagation_delay_range)
        arrivals = {}
        for ch, rel in sorted(spread.items()):
            t0 = onset + rel
            i0 = int(round(t0 * fs))
            i1 = min(n_points, int(round((t0 + duration) * fs)))
            if i0 >= i1 or i0 >= n_points:
                continue  # clipped to nothing at the recording edge
            dt = (np.arange(i0, i1) - t0 * fs) / fs
            samples[i0:i1, ch] += _waveform(
                config.waveform_family, freq, dt, duration, config.event_amplitude)
            labels[i0:i1, ch] = 1
            arrivals[ch] = t0
        if arrivals:
            events.append(PlantedEvent(
                onset_channel=seed_channel, onset_time=onset, duration=duration,
                waveform=config.waveform_family, frequency=freq, arrivals=arrivals))

    positive_rate = float(labels.mean())
    if positive_rate > 0.5:
        raise SaturationError(
            f"scenario saturates at positive rate {positive_rate:.3f} > 0.5; "
            "reduce event_rate or durations")

    recording = Recording(
        samples=samples.astype(np.float32),
        labels=labels,
        sample_rate=fs,
        channel_map=trivial_channel_map(n_ch, config.n_regions),
        provenance={"generator": "epiwave.synth", "scenario": config.to_dict()},
    )
    truth = PlantedTruth(
        events=events, planted_graph=graph.copy(), sample_rate=fs,
        config=config.to_dict())
    return recording, truth


def event_segment_windows(truth: PlantedTruth, seg: SegmentationConfig,
                          n_segments: int) -> np.ndarray:
    """Sorted indices of segments overlapping any event arrival window."""
    hit = np.zeros(n_segments, dtype=bool)
    fs = truth.sample_rate
    for ev in truth.events:
        for t0 in ev.arrivals.values():
            i0 = int(round(t0 * fs))
            i1 = int(round((t0 + ev.duration) * fs))
            # segment t covers points [l*t, l*t + k)
            first = max(0, (i0 - seg.window_k) // seg.stride_l + 1)
            last = min(n_segments - 1, (i1 - 1) // seg.stride_l)
            if first <= last:
                hit[first:last + 1] = True
    return np.flatnonzero(hit)


def truth_alignment_score(learned_graphs, truth: PlantedTruth, windows) -> float:
    """Contrast between learned weight mass on planted edges vs non-edges.

    Per event-window graph the score is
    (mean weight on planted edges - mean on non-edges) / (sum of the two
    means), a scale-free value in [-1, 1]; the result averages over windows.
    Diagonal entries are ignored on both sides (self-continuity is not part
    of the planted structure).
    """
    windows = list(windows)
    if not windows:
        raise UndefinedScoreError("no event windows to score")
    planted = np.asarray(truth.planted_graph)
    n = planted.shape[0]
    off_diag = ~np.eye(n, dtype=bool)
    on_mask = (planted > 0) & off_diag
    off_mask = (planted <= 0) & off_diag
    if not on_mask.any() or not off_mask.any():
        raise UndefinedScoreError("planted graph has no edge/non-edge contrast")

    scores = []
    for t in windows:
        g = learned_graphs[t]
        adj = np.asarray(getattr(g, "adjacency", g), dtype=np.float64)
        if adj.shape != (n, n):
            raise UndefinedScoreError(
                f"learned graph at window {t} has shape {adj.shape}, expected {(n, n)}")
        mean_on = adj[on_mask].mean()
        mean_off = adj[off_mask].mean()
        denom = mean_on + mean_off
        scores.append(0.0 if denom == 0 else (mean_on - mean_off) / denom)
    return float(np.mean(scores))
