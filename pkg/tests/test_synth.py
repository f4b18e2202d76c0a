import numpy as np
import pytest
from scipy import signal

from epiwave.data import SegmentationConfig, segment
from epiwave.errors import SaturationError, UndefinedScoreError
from epiwave.synth import (
    PlantedTruth,
    ScenarioConfig,
    event_segment_windows,
    generate,
    truth_alignment_score,
)


def chain_config(**overrides):
    # 2-channel chain A -> B with weight 1
    base = dict(
        n_channels=2, n_regions=1,
        planted_graph=(0.0, 1.0, 0.0, 0.0),
        event_rate=30.0, event_duration_range=(2.0, 3.0),
        propagation_delay_range=(0.5, 0.5),
        sample_rate=64.0, duration_seconds=600.0, seed=5,
    )
    base.update(overrides)
    return ScenarioConfig(**base)


class TestGenerate:
    def test_zero_rate_pure_noise(self):
        rec, truth = generate(chain_config(event_rate=0.0))
        assert rec.labels.sum() == 0
        assert truth.events == []
        assert rec.samples.std() > 0

    def test_zero_graph_confines_events(self):
        cfg = chain_config(planted_graph=(0.0,) * 4, seed=9)
        rec, truth = generate(cfg)
        assert len(truth.events) > 0
        for ev in truth.events:
            assert set(ev.arrivals) == {ev.onset_channel}

    def test_chain_propagates_with_exact_delay(self):
        rec, truth = generate(chain_config())
        spread = [ev for ev in truth.events if ev.onset_channel == 0]
        assert spread, "expected at least one event seeded at channel 0"
        for ev in spread:
            assert 1 in ev.arrivals  # weight-1 edge always transmits
            assert ev.arrivals[1] == pytest.approx(ev.arrivals[0] + 0.5)
            # labels of channel 1 start exactly at the delayed arrival
            i0 = int(round(ev.arrivals[1] * rec.sample_rate))
            if i0 < rec.n_points:
                assert rec.labels[i0, 1] == 1
                if i0 > 0 and rec.labels[i0 - 1, 1] == 1:
                    # only from an overlapping earlier event
                    assert sum(1 for e in truth.events
                               if 1 in e.arrivals and e.arrivals[1] < ev.arrivals[1]
                               and e.arrivals[1] + e.duration > ev.arrivals[1]) > 0

    def test_deterministic_given_seed(self):
        rec_a, truth_a = generate(chain_config())
        rec_b, truth_b = generate(chain_config())
        np.testing.assert_array_equal(rec_a.samples, rec_b.samples)
        np.testing.assert_array_equal(rec_a.labels, rec_b.labels)
        assert truth_a.to_json() == truth_b.to_json()

    def test_label_soundness(self):
        rec, truth = generate(chain_config(seed=11))
        fs = rec.sample_rate
        covered = np.zeros_like(rec.labels, dtype=bool)
        for ev in truth.events:
            for ch, t0 in ev.arrivals.items():
                i0 = int(round(t0 * fs))
                i1 = min(rec.n_points, int(round((t0 + ev.duration) * fs)))
                assert rec.labels[i0:i1, ch].sum() >= 1  # window holds a positive
                covered[i0:i1, ch] = True
        # every positive lies inside some arrival window
        assert not (rec.labels.astype(bool) & ~covered).any()

    def test_saturation_refused(self):
        cfg = chain_config(event_rate=4000.0, event_duration_range=(30.0, 40.0),
                           duration_seconds=60.0)
        with pytest.raises(SaturationError):
            generate(cfg)

    def test_pink_noise_slope(self):
        cfg = ScenarioConfig(n_channels=1, n_regions=1, planted_graph=(0.0,),
                             event_rate=0.0, noise_spectrum="pink",
                             sample_rate=256.0, duration_seconds=240.0, seed=3)
        rec, _ = generate(cfg)
        freqs, psd = signal.welch(rec.samples[:, 0], fs=256.0, nperseg=4096)
        band = (freqs >= 1.0) & (freqs <= 10.0)  # one decade
        slope = np.polyfit(np.log10(freqs[band]), np.log10(psd[band]), 1)[0]
        assert abs(slope - (-1.0)) < 0.3

    def test_truth_json_round_trip(self, tmp_path):
        _, truth = generate(chain_config())
        path = truth.save(tmp_path / "truth.json")
        loaded = PlantedTruth.load(path)
        assert loaded.to_json() == truth.to_json()
        np.testing.assert_array_equal(loaded.planted_graph, truth.planted_graph)


def _truth_with_graph(graph):
    from epiwave.synth import PlantedEvent

    ev = PlantedEvent(onset_channel=0, onset_time=1.0, duration=2.0,
                      waveform="spike_wave", frequency=3.0,
                      arrivals={0: 1.0, 1: 1.5})
    return PlantedTruth(events=[ev], planted_graph=np.asarray(graph), sample_rate=64.0)


class TestAlignmentScore:
    def setup_method(self):
        self.planted = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=float)
        self.truth = _truth_with_graph(self.planted)

    def test_perfect_recovery_scores_one(self):
        learned = [(self.planted > 0).astype(float)] * 4
        assert truth_alignment_score(learned, self.truth, [0, 2]) == pytest.approx(1.0)

    def test_uniform_scores_zero(self):
        learned = [np.full((3, 3), 0.37)] * 4
        assert truth_alignment_score(learned, self.truth, [1]) == pytest.approx(0.0)

    def test_random_graphs_center_on_zero(self, rng):
        scores = []
        for _ in range(100):
            learned = [rng.random((3, 3))]
            scores.append(truth_alignment_score(learned, self.truth, [0]))
        assert abs(np.mean(scores)) < 0.1

    def test_empty_windows_rejected(self):
        with pytest.raises(UndefinedScoreError):
            truth_alignment_score([np.eye(3)], self.truth, [])

    def test_diagonal_ignored(self):
        learned = [np.eye(3)]  # only self-weights
        assert truth_alignment_score(learned, self.truth, [0]) == pytest.approx(0.0)


def test_event_segment_windows_cover_labels():
    rec, truth = generate(chain_config(seed=21))
    cfg = SegmentationConfig(window_k=64, stride_l=64)
    seg = segment(rec, cfg)
    windows = set(event_segment_windows(truth, cfg, seg.n_segments))
    positive_segments = set(np.flatnonzero(seg.patient_labels))
    assert positive_segments <= windows
