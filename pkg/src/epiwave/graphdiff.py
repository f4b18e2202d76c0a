"""Learned sparse directed diffusion graphs and propagation along them.

Structure learning scores every (source i, target j) pair by the cosine of
the feature-reweighted node vectors, then a hard threshold keeps only scores
>= theta (gradients flow through surviving edges only). Propagation averages
each target with its weighted in-neighborhood and applies a linear map plus
ReLU. A sequence alternates a cross-time step (previous inner state ->
current representations) with an inner-time step (current nodes among
themselves, self-pairs excluded); the first cross-time step starts from an
all-zero virtual state whose cosine scores vanish, giving an empty bootstrap
graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataValidationError

_TINY = 1e-12


class StructureLearner(nn.Module):
    """Source/target feature reweighting vectors plus the edge threshold."""

    def __init__(self, dim: int, threshold: float):
        super().__init__()
        if not 0 < threshold <= 1:
            raise ConfigError("threshold must lie in (0, 1]")
        self.w_source = nn.Parameter(torch.ones(dim))
        self.w_target = nn.Parameter(torch.ones(dim))
        self.threshold = float(threshold)


def learn_structure(h_source: torch.Tensor, h_target: torch.Tensor,
                    params: StructureLearner,
                    exclude_diagonal: bool = False) -> torch.Tensor:
    """Thresholded cosine adjacency, shape (..., n_source, n_target).

    Pairs where either reweighted vector has zero norm score 0 (never NaN),
    which is what makes the all-zero virtual state produce an empty graph.
    """
    if h_source.shape[-1] != h_target.shape[-1]:
        raise DataValidationError("source/target feature dims differ")
    a = h_source * params.w_source
    b = h_target * params.w_target
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    dots = a @ b.transpose(-1, -2)
    denom = na * nb.transpose(-1, -2)
    scores = torch.where(denom > 0, dots / denom.clamp_min(_TINY),
                         torch.zeros((), dtype=dots.dtype, device=dots.device))
    scores = scores.clamp(-1.0, 1.0)
    adjacency = scores * (scores >= params.threshold)
    if exclude_diagonal:
        n1, n2 = adjacency.shape[-2:]
        if n1 != n2:
            raise DataValidationError("diagonal exclusion needs square node sets")
        eye = torch.eye(n1, dtype=torch.bool, device=adjacency.device)
        adjacency = adjacency.masked_fill(eye, 0.0)
    return adjacency


def diffuse(adjacency: torch.Tensor, h_source: torch.Tensor,
            h_target: torch.Tensor, transform: torch.Tensor) -> torch.Tensor:
    """One directed propagation step.

    h'(j) = relu( [ (h_target(j) + sum_i A(i,j) h_source(i))
                    / (1 + sum_i A(i,j)) ] @ transform )
    """
    if adjacency.shape[-2] != h_source.shape[-2] or adjacency.shape[-1] != h_target.shape[-2]:
        raise DataValidationError("adjacency shape inconsistent with node features")
    agg = adjacency.transpose(-1, -2) @ h_source
    denom = 1.0 + adjacency.sum(dim=-2).unsqueeze(-1)
    return torch.relu(((h_target + agg) / denom) @ transform)


class DiffusionStep(nn.Module):
    """Structure learning followed by propagation, with its own parameters."""

    def __init__(self, dim: int, threshold: float, exclude_diagonal: bool):
        super().__init__()
        self.learner = StructureLearner(dim, threshold)
        self.transform = nn.Parameter(torch.empty(dim, dim))
        nn.init.xavier_uniform_(self.transform)
        self.exclude_diagonal = exclude_diagonal

    def forward(self, h_source: torch.Tensor,
                h_target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        adjacency = learn_structure(h_source, h_target, self.learner,
                                    self.exclude_diagonal)
        return diffuse(adjacency, h_source, h_target, self.transform), adjacency


def cross_time_step(h_prev: torch.Tensor, r_t: torch.Tensor,
                    step: DiffusionStep) -> tuple[torch.Tensor, torch.Tensor]:
    """Diffusion from the previous segment's state into the current one."""
    return step(h_prev, r_t)


def inner_time_step(h_cr: torch.Tensor,
                    step: DiffusionStep) -> tuple[torch.Tensor, torch.Tensor]:
    """Diffusion among the nodes of one segment (self-pairs excluded)."""
    return step(h_cr, h_cr)


class SequenceDiffuser(nn.Module):
    """Alternating cross-time / inner-time recurrence for one time direction."""

    def __init__(self, dim: int, cross_threshold: float = 0.05,
                 inner_threshold: float = 0.1, use_cross: bool = True,
                 use_inner: bool = True):
        super().__init__()
        self.cross = DiffusionStep(dim, cross_threshold, exclude_diagonal=False)
        self.inner = DiffusionStep(dim, inner_threshold, exclude_diagonal=True)
        self.use_cross = use_cross
        self.use_inner = use_inner

    def forward(self, r_seq: torch.Tensor, collect_graphs: bool = False):
        """r_seq: (..., S, n, d) -> states (..., S, n, d) after the inner step
        of each time index, plus per-step (cross, inner) adjacencies."""
        n_steps = r_seq.shape[-3]
        h_prev = torch.zeros_like(r_seq.select(-3, 0))
        states, graphs = [], []
        for t in range(n_steps):
            r_t = r_seq.select(-3, t)
            if self.use_cross:
                h_cr, g_cr = self.cross(h_prev, r_t)
            else:
                h_cr, g_cr = r_t, None
            if self.use_inner:
                h_in, g_in = self.inner(h_cr, h_cr)
            else:
                h_in, g_in = h_cr, None
            states.append(h_in)
            if collect_graphs:
                graphs.append((g_cr, g_in))
            h_prev = h_in
        return torch.stack(states, dim=-3), graphs


def run_sequence(r_seq: torch.Tensor, diffuser: SequenceDiffuser,
                 direction: str = "forward", collect_graphs: bool = False):
    """Run the recurrence forward or over the reversed segment order.

    Reverse-direction outputs (and graphs) are re-aligned to the original
    time indices before returning.
    """
    if direction not in ("forward", "reverse"):
        raise ConfigError(f"direction must be forward or reverse, got {direction!r}")
    if direction == "reverse":
        r_seq = r_seq.flip(-3)
    states, graphs = diffuser(r_seq, collect_graphs=collect_graphs)
    if direction == "reverse":
        states = states.flip(-3)
        graphs = graphs[::-1]
    return states, graphs


@dataclass(frozen=True)
class DiffusionGraph:
    """Adjacency between labeled node sets, for export and inspection."""

    source_nodes: tuple[str, ...]
    target_nodes: tuple[str, ...]
    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency)
        if adj.shape != (len(self.source_nodes), len(self.target_nodes)):
            raise DataValidationError("adjacency shape does not match node labels")
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "source_nodes", tuple(self.source_nodes))
        object.__setattr__(self, "target_nodes", tuple(self.target_nodes))

    def to_json(self) -> str:
        return json.dumps({
            "source_nodes": list(self.source_nodes),
            "target_nodes": list(self.target_nodes),
            "dtype": str(self.adjacency.dtype),
            "adjacency": self.adjacency.astype(np.float64).tolist(),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DiffusionGraph":
        payload = json.loads(text)
        adj = np.asarray(payload["adjacency"], dtype=np.float64)
        return cls(
            source_nodes=tuple(payload["source_nodes"]),
            target_nodes=tuple(payload["target_nodes"]),
            adjacency=adj.astype(payload.get("dtype", "float64")),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DiffusionGraph":
        return cls.from_json(Path(path).read_text())


def graphs_from_tensors(adjacencies: Iterable[Optional[torch.Tensor]],
                        source_nodes, target_nodes) -> list[Optional[DiffusionGraph]]:
    """Wrap raw per-step adjacency tensors as labeled DiffusionGraphs."""
    out = []
    for adj in adjacencies:
        if adj is None:
            out.append(None)
            continue
        arr = adj.detach().cpu().numpy()
        if arr.ndim != 2:
            raise DataValidationError("graph export expects unbatched adjacencies")
        out.append(DiffusionGraph(source_nodes, target_nodes, arr))
    return out
