"""Data model: multichannel recordings, sliding-window segmentation,
hierarchical labels and ratio-controlled evaluation subsets.

Index conventions: the math writes segment indices 1-based (segment t covers
raw points l*(t-1)+1 .. l*(t-1)+k); arrays here are 0-based, so segment t
(0-based) starts at raw index l*t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataValidationError,
    MappingError,
    SamplingInfeasibleError,
)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ChannelMap:
    """Ordered channel identifiers and their assignment to brain regions.

    Channel order is fixed at construction and shared by every array derived
    from the same recording.
    """

    channels: tuple[str, ...]
    regions: tuple[str, ...]
    assignment: dict[str, str]

    def __init__(self, channels: Sequence[str], regions: Sequence[str],
                 assignment: dict[str, str]):
        object.__setattr__(self, "channels", tuple(channels))
        object.__setattr__(self, "regions", tuple(regions))
        object.__setattr__(self, "assignment", dict(assignment))
        self._validate()

    def _validate(self) -> None:
        if len(set(self.channels)) != len(self.channels):
            raise MappingError("duplicate channel identifiers")
        if len(set(self.regions)) != len(self.regions):
            raise MappingError("duplicate region identifiers")
        for c in self.channels:
            region = self.assignment.get(c)
            if region is None:
                raise MappingError(f"channel {c!r} has no region assignment")
            if region not in self.regions:
                raise MappingError(f"channel {c!r} mapped to unknown region {region!r}")
        extra = set(self.assignment) - set(self.channels)
        if extra:
            raise MappingError(f"assignment covers unknown channels: {sorted(extra)}")
        for r in self.regions:
            if not any(self.assignment[c] == r for c in self.channels):
                raise MappingError(f"region {r!r} has no channels")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def region_index(self) -> np.ndarray:
        """Region index of each channel, aligned with channel order."""
        lookup = {r: i for i, r in enumerate(self.regions)}
        return np.array([lookup[self.assignment[c]] for c in self.channels])

    def region_members(self) -> list[np.ndarray]:
        """Channel indices grouped per region, aligned with region order."""
        idx = self.region_index()
        return [np.flatnonzero(idx == b) for b in range(self.n_regions)]

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "regions": list(self.regions),
            "assignment": dict(self.assignment),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelMap":
        return cls(d["channels"], d["regions"], d["assignment"])


def trivial_channel_map(n_channels: int, n_regions: int) -> ChannelMap:
    """Evenly partition ch0..chN-1 into n_regions contiguous regions."""
    if not 1 <= n_regions <= n_channels:
        raise MappingError("need 1 <= n_regions <= n_channels")
    channels = [f"ch{i}" for i in range(n_channels)]
    regions = [f"rg{i}" for i in range(n_regions)]
    # spread remainder over the first regions so every region is nonempty
    sizes = [n_channels // n_regions + (1 if i < n_channels % n_regions else 0)
             for i in range(n_regions)]
    assignment = {}
    c = 0
    for r, size in zip(regions, sizes):
        for _ in range(size):
            assignment[channels[c]] = r
            c += 1
    return ChannelMap(channels, regions, assignment)


@dataclass(frozen=True)
class Recording:
    """Raw multichannel time series with per-point binary labels.

    samples: |T| x |C| float32, labels: |T| x |C| uint8 in {0,1}.
    """

    samples: np.ndarray
    labels: np.ndarray
    sample_rate: float
    channel_map: ChannelMap
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        labels = np.asarray(self.labels)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise DataValidationError("samples must be a |T| x |C| matrix with |T| >= 1")
        if samples.shape[1] != self.channel_map.n_channels:
            raise DataValidationError(
                f"samples have {samples.shape[1]} columns, channel map has "
                f"{self.channel_map.n_channels} channels")
        if labels.shape != samples.shape:
            raise DataValidationError("labels must have the same shape as samples")
        if not np.isfinite(samples).all():
            raise DataValidationError("samples contain NaN or Inf")
        if not np.isin(labels, (0, 1)).all():
            raise DataValidationError("labels must be binary")
        if self.sample_rate <= 0:
            raise DataValidationError("sample_rate must be positive")
        object.__setattr__(self, "samples", _freeze(samples))
        object.__setattr__(self, "labels", _freeze(labels.astype(np.uint8)))

    @property
    def n_points(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.n_points / self.sample_rate


@dataclass(frozen=True)
class SegmentationConfig:
    """Sliding-window parameters: window length and stride, both in points."""

    window_k: int
    stride_l: int

    def __post_init__(self):
        if self.window_k < 1 or self.stride_l < 1:
            raise ConfigError("window_k and stride_l must be >= 1")

    def n_segments(self, n_points: int) -> int:
        if self.window_k > n_points:
            raise ConfigError(
                f"window_k={self.window_k} larger than recording length {n_points}")
        return (n_points - self.window_k) // self.stride_l + 1


@dataclass(frozen=True)
class SegmentSet:
    """Windowed view of a recording with labels at all three hierarchy levels.

    data: |S| x |C| x k, channel_labels: |S| x |C|, region_labels: |S| x |B|,
    patient_labels: |S|.
    """

    data: np.ndarray
    channel_labels: np.ndarray
    region_labels: np.ndarray
    patient_labels: np.ndarray
    config: SegmentationConfig
    channel_map: ChannelMap
    sample_rate: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        n_s, n_c, k = data.shape
        if n_c != self.channel_map.n_channels or k != self.config.window_k:
            raise DataValidationError("data shape inconsistent with map/config")
        if self.channel_labels.shape != (n_s, n_c):
            raise DataValidationError("channel_labels shape mismatch")
        if self.region_labels.shape != (n_s, self.channel_map.n_regions):
            raise DataValidationError("region_labels shape mismatch")
        if self.patient_labels.shape != (n_s,):
            raise DataValidationError("patient_labels shape mismatch")
        object.__setattr__(self, "data", _freeze(data))
        for name in ("channel_labels", "region_labels", "patient_labels"):
            object.__setattr__(self, name, _freeze(getattr(self, name).astype(np.uint8)))

    @property
    def n_segments(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    def take(self, indices: np.ndarray) -> "SegmentSet":
        """Subset of segments, preserving the given (temporal) order."""
        indices = np.asarray(indices)
        return SegmentSet(
            data=self.data[indices],
            channel_labels=self.channel_labels[indices],
            region_labels=self.region_labels[indices],
            patient_labels=self.patient_labels[indices],
            config=self.config,
            channel_map=self.channel_map,
            sample_rate=self.sample_rate,
            provenance=dict(self.provenance),
        )

    def positive_ratio(self) -> float:
        return float(self.channel_labels.mean())


def build_hierarchy_labels(channel_labels: np.ndarray,
                           channel_map: ChannelMap) -> tuple[np.ndarray, np.ndarray]:
    """Region and patient labels by logical OR (max) over members.

    channel_labels: |S| x |C| binary. Returns (|S| x |B| region labels,
    |S| patient labels).
    """
    channel_labels = np.asarray(channel_labels)
    if channel_labels.ndim != 2:
        raise DataValidationError("channel_labels must be 2-D")
    if not np.isin(channel_labels, (0, 1)).all():
        raise DataValidationError("channel_labels must be binary")
    if channel_labels.shape[1] != channel_map.n_channels:
        raise MappingError(
            f"labels have {channel_labels.shape[1]} channels, map has "
            f"{channel_map.n_channels}")
    members = channel_map.region_members()
    region = np.stack(
        [channel_labels[:, m].max(axis=1) for m in members], axis=1)
    patient = region.max(axis=1)
    return region.astype(np.uint8), patient.astype(np.uint8)


def segment(recording: Recording, config: SegmentationConfig) -> SegmentSet:
    """Cut a recording into |S| = floor((|T|-k)/l)+1 windows of length k.

    Per-channel segment label is the max of the covered point labels;
    trailing points not covered by any full window are dropped.
    """
    n_s = config.n_segments(recording.n_points)
    k, l = config.window_k, config.stride_l
    starts = np.arange(n_s) * l
    # (|S|, k) gather indices, then move channels before time: |S| x |C| x k
    idx = starts[:, None] + np.arange(k)[None, :]
    data = recording.samples[idx].transpose(0, 2, 1)
    channel_labels = recording.labels[idx].max(axis=1)
    region_labels, patient_labels = build_hierarchy_labels(
        channel_labels, recording.channel_map)
    return SegmentSet(
        data=data,
        channel_labels=channel_labels,
        region_labels=region_labels,
        patient_labels=patient_labels,
        config=config,
        channel_map=recording.channel_map,
        sample_rate=recording.sample_rate,
        provenance=dict(recording.provenance),
    )


@dataclass(frozen=True)
class EvalSet:
    """A ratio-controlled evaluation sample drawn from a SegmentSet.

    The unit of the ratio is the (segment, channel) pair, i.e. the
    channel-level sample. `segment_indices` are the touched segments of the
    source set in temporal order; `pair_mask` marks, per touched segment and
    channel, the pairs that belong to the sample. Region/patient metrics are
    computed over the masks induced by OR-ing member channels.
    """

    source_n_segments: int
    segment_indices: np.ndarray
    pair_mask: np.ndarray
    ratio: tuple[int, int]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "segment_indices", _freeze(np.asarray(self.segment_indices)))
        object.__setattr__(self, "pair_mask", _freeze(np.asarray(self.pair_mask, dtype=bool)))

    @property
    def n_pairs(self) -> int:
        return int(self.pair_mask.sum())

    def subset(self, segments: SegmentSet) -> SegmentSet:
        """Materialize the touched segments as a SegmentSet subset."""
        return segments.take(self.segment_indices)

    def region_mask(self, channel_map: ChannelMap) -> np.ndarray:
        """(len(segment_indices), |B|) mask: region pair included iff any member pair is."""
        members = channel_map.region_members()
        return np.stack([self.pair_mask[:, m].any(axis=1) for m in members], axis=1)

    def segment_mask(self) -> np.ndarray:
        """Every touched segment contributes one patient-level sample."""
        return self.pair_mask.any(axis=1)


def sample_eval_set(segments: SegmentSet, ratio: tuple[int, int],
                    count_positive: int, seed: int) -> EvalSet:
    """Draw an evaluation sample with exactly `count_positive` positive
    channel-level pairs and `count_positive * ratio_denominator` negatives.

    Positives and negatives are drawn uniformly without replacement from the
    (segment, channel) pairs of `segments`; temporal order is preserved.
    Raises SamplingInfeasibleError naming the shortfall when the source set
    cannot supply the request.
    """
    num, den = ratio
    if num != 1 or den < 1:
        raise ConfigError(f"ratio must be 1:n with n >= 1, got {num}:{den}")
    if count_positive < 1:
        raise ConfigError("count_positive must be >= 1")
    labels = segments.channel_labels
    pos_t, pos_c = np.nonzero(labels == 1)
    neg_t, neg_c = np.nonzero(labels == 0)
    need_neg = count_positive * den
    if len(pos_t) < count_positive:
        raise SamplingInfeasibleError(
            f"need {count_positive} positive pairs, only {len(pos_t)} available")
    if len(neg_t) < need_neg:
        raise SamplingInfeasibleError(
            f"need {need_neg} negative pairs, only {len(neg_t)} available")
    rng = np.random.default_rng(seed)
    pick_pos = rng.choice(len(pos_t), size=count_positive, replace=False)
    pick_neg = rng.choice(len(neg_t), size=need_neg, replace=False)
    t_idx = np.concatenate([pos_t[pick_pos], neg_t[pick_neg]])
    c_idx = np.concatenate([pos_c[pick_pos], neg_c[pick_neg]])
    touched = np.unique(t_idx)  # sorted -> temporal order
    row_of = {t: i for i, t in enumerate(touched)}
    mask = np.zeros((len(touched), segments.n_channels), dtype=bool)
    for t, c in zip(t_idx, c_idx):
        mask[row_of[t], c] = True
    return EvalSet(
        source_n_segments=segments.n_segments,
        segment_indices=touched,
        pair_mask=mask,
        ratio=(num, den),
        seed=seed,
    )
