"""Three-level detection model: channel representations are max-pooled up to
regions and the patient, each level runs the same (shared-parameter) graph
diffusion in both time directions, and one shared discriminator turns
[h_forward || h_reverse || r] into a seizure probability per node.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import ChannelMap
from .errors import DataValidationError, MappingError
from .graphdiff import SequenceDiffuser, run_sequence, graphs_from_tensors
from .pretraining import ContrastiveConfig, RepresentationModel

LEVELS = ("channel", "region", "patient")

_EPS = 1e-7  # probability clamp before the BCE logs


@dataclass(frozen=True)
class AblationFlags:
    """Component switches mirroring the ablation study's model variants."""

    no_bcpc: bool = False  # skip pretraining; encoder starts from random init
    no_graph: bool = False  # bypass diffusion, discriminator sees r directly
    no_inner: bool = False
    no_cross: bool = False
    no_hierarchy: bool = False  # train on the channel objective only

    def tag(self) -> str:
        on = [name for name, v in asdict(self).items() if v]
        return "+".join(on) if on else "full"

    def to_dict(self) -> dict:
        return asdict(self)


def pool_to_region(r_channel: torch.Tensor, channel_map: ChannelMap) -> torch.Tensor:
    """Element-wise max over each region's member channels.

    r_channel: (..., |C|, d) -> (..., |B|, d).
    """
    if r_channel.shape[-2] != channel_map.n_channels:
        raise MappingError(
            f"representations cover {r_channel.shape[-2]} channels, map has "
            f"{channel_map.n_channels}")
    pooled = []
    for members in channel_map.region_members():
        if len(members) == 0:
            raise MappingError("region with no member channels")
        idx = torch.as_tensor(members, device=r_channel.device)
        pooled.append(r_channel.index_select(-2, idx).max(dim=-2).values)
    return torch.stack(pooled, dim=-2)


def pool_to_patient(r_region: torch.Tensor) -> torch.Tensor:
    """Element-wise max over regions: (..., |B|, d) -> (..., 1, d)."""
    return r_region.max(dim=-2, keepdim=True).values


class Discriminator(nn.Module):
    """Two-layer MLP head shared by all hierarchy levels."""

    def __init__(self, in_dim: int, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.in_dim = in_dim

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.in_dim:
            raise DataValidationError(
                f"discriminator expects {self.in_dim} features, got {h.shape[-1]}")
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(h)))).squeeze(-1)


def predict(h_fwd: torch.Tensor, h_rev: torch.Tensor, r: torch.Tensor,
            discriminator: Discriminator) -> torch.Tensor:
    """Per-node probability from the concatenated diffusion and base features."""
    if not (h_fwd.shape == h_rev.shape == r.shape):
        raise DataValidationError("h_fwd, h_rev and r must share shapes")
    return discriminator(torch.cat([h_fwd, h_rev, r], dim=-1))


def binary_cross_entropy_sum(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """BCE summed over every (segment, node) element; probabilities are
    clamped to [1e-7, 1 - 1e-7] before the logs."""
    p = probs.clamp(_EPS, 1.0 - _EPS)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).sum()


def joint_loss(predictions: dict, labels: dict,
               level_weights: dict | None = None) -> torch.Tensor:
    """Weighted sum of the per-level summed BCE terms."""
    weights = {"channel": 1.0, "region": 1.0, "patient": 1.0}
    if level_weights:
        weights.update(level_weights)
    total = None
    for level, probs in predictions.items():
        term = weights.get(level, 1.0) * binary_cross_entropy_sum(probs, labels[level])
        total = term if total is None else total + term
    if total is None:
        raise DataValidationError("joint_loss needs at least one level")
    return total


class DetectionModel(nn.Module):
    """Full detector.  The diffusers and the discriminator are single shared
    instances applied at every hierarchy level."""

    def __init__(self, repr_model: RepresentationModel, channel_map: ChannelMap,
                 cross_threshold: float = 0.05, inner_threshold: float = 0.1,
                 discriminator_hidden: int = 32,
                 ablation: AblationFlags | None = None,
                 share_reverse_params: bool = False):
        super().__init__()
        self.repr_model = repr_model
        self.channel_map = channel_map
        self.ablation = ablation or AblationFlags()
        self.cross_threshold = cross_threshold
        self.inner_threshold = inner_threshold
        self.discriminator_hidden = discriminator_hidden
        self.share_reverse_params = share_reverse_params
        d = repr_model.config.d_repr
        use_cross = not self.ablation.no_cross
        use_inner = not self.ablation.no_inner
        self.forward_diffuser = SequenceDiffuser(
            d, cross_threshold, inner_threshold, use_cross=use_cross,
            use_inner=use_inner)
        self.reverse_diffuser = (
            self.forward_diffuser if share_reverse_params else SequenceDiffuser(
                d, cross_threshold, inner_threshold, use_cross=use_cross,
                use_inner=use_inner))
        disc_in = d if self.ablation.no_graph else 3 * d
        self.discriminator = Discriminator(disc_in, discriminator_hidden)

    def representations(self, data: torch.Tensor) -> torch.Tensor:
        """(..., S, C, k) raw segments -> (..., S, C, d) representations."""
        flat = data.reshape(-1, data.shape[-1])
        r = self.repr_model.represent(flat)
        return r.reshape(*data.shape[:-1], r.shape[-1])

    def level_inputs(self, r_channel: torch.Tensor) -> dict:
        r_region = pool_to_region(r_channel, self.channel_map)
        return {
            "channel": r_channel,
            "region": r_region,
            "patient": pool_to_patient(r_region),
        }

    def _level_probs(self, r_level: torch.Tensor, collect_graphs: bool = False):
        if self.ablation.no_graph:
            return self.discriminator(r_level), {"forward": []}
        h_fwd, g_fwd = run_sequence(r_level, self.forward_diffuser, "forward",
                                    collect_graphs=collect_graphs)
        h_rev, _ = run_sequence(r_level, self.reverse_diffuser, "reverse")
        probs = predict(h_fwd, h_rev, r_level, self.discriminator)
        return probs, {"forward": g_fwd}

    def forward(self, data: torch.Tensor, collect_graphs: bool = False):
        """data: (..., S, C, k) -> per-level probabilities
        channel (..., S, C), region (..., S, |B|), patient (..., S);
        optionally also per-level forward-direction graph tensors."""
        r = self.representations(data)
        inputs = self.level_inputs(r)
        probs, graphs = {}, {}
        for level in LEVELS:
            p, g = self._level_probs(inputs[level], collect_graphs=collect_graphs)
            probs[level] = p.squeeze(-1) if level == "patient" else p
            graphs[level] = g
        if collect_graphs:
            return probs, graphs
        return probs

    @torch.no_grad()
    def score_segments(self, data: np.ndarray, chunk: int = 512) -> dict:
        """Score a full (S, C, k) span; the representation step is chunked,
        the diffusion recurrence then runs over the whole sequence once."""
        was_training = self.training
        self.eval()
        tensor = torch.from_numpy(np.array(data, dtype=np.float32))
        s, c, k = tensor.shape
        flat = tensor.reshape(s * c, k)
        parts = [self.repr_model.represent(flat[i:i + chunk])
                 for i in range(0, s * c, chunk)]
        r = torch.cat(parts).reshape(s, c, -1)
        inputs = self.level_inputs(r)
        out = {}
        for level in LEVELS:
            p, _ = self._level_probs(inputs[level])
            out[level] = (p.squeeze(-1) if level == "patient" else p).cpu().numpy()
        if was_training:
            self.train()
        return out

    @torch.no_grad()
    def trace_graphs(self, data: np.ndarray) -> dict:
        """Forward-direction cross/inner DiffusionGraphs per level per step
        for an (S, C, k) span."""
        was_training = self.training
        self.eval()
        tensor = torch.from_numpy(np.array(data, dtype=np.float32))
        r = self.representations(tensor)
        inputs = self.level_inputs(r)
        node_labels = {
            "channel": self.channel_map.channels,
            "region": self.channel_map.regions,
            "patient": ("patient",),
        }
        traced = {}
        for level in LEVELS:
            _, graphs = self._level_probs(inputs[level], collect_graphs=True)
            steps = graphs["forward"]
            labels = node_labels[level]
            traced[level] = {
                "cross": graphs_from_tensors((g[0] for g in steps), labels, labels),
                "inner": graphs_from_tensors((g[1] for g in steps), labels, labels),
            }
        if was_training:
            self.train()
        return traced

    def shared_parameter_manifest(self) -> dict:
        """Names of the modules shared across hierarchy levels (embedded in
        checkpoints for inspection)."""
        return {
            "shared_across_levels": ["forward_diffuser", "reverse_diffuser",
                                     "discriminator", "repr_model.project"],
            "reverse_shares_forward_params": self.share_reverse_params,
        }


DETECTION_CHECKPOINT_VERSION = 1


def save_detection_checkpoint(model: DetectionModel, path, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": DETECTION_CHECKPOINT_VERSION,
        "kind": "detection",
        "repr_config": model.repr_model.config.to_dict(),
        "channel_map": model.channel_map.to_dict(),
        "cross_threshold": model.cross_threshold,
        "inner_threshold": model.inner_threshold,
        "discriminator_hidden": model.discriminator_hidden,
        "share_reverse_params": model.share_reverse_params,
        "ablation": model.ablation.to_dict(),
        "shared_manifest": model.shared_parameter_manifest(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)
    return path


def load_detection_checkpoint(path) -> tuple[DetectionModel, dict]:
    from .errors import FormatVersionError, StorageError

    path = Path(path)
    if not path.exists():
        raise StorageError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "detection":
        raise StorageError(f"{path}: not a detection checkpoint")
    if payload["format_version"] > DETECTION_CHECKPOINT_VERSION:
        raise FormatVersionError(f"{path}: checkpoint from a newer format version")
    repr_model = RepresentationModel(ContrastiveConfig(**payload["repr_config"]))
    model = DetectionModel(
        repr_model,
        ChannelMap.from_dict(payload["channel_map"]),
        cross_threshold=payload["cross_threshold"],
        inner_threshold=payload["inner_threshold"],
        discriminator_hidden=payload["discriminator_hidden"],
        ablation=AblationFlags(**payload["ablation"]),
        share_reverse_params=payload["share_reverse_params"],
    )
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
