"""Self-supervised segment pretraining: a strided conv encoder turns a
one-channel segment into L local features, a masked transformer builds
context features that see both temporal directions, and per-step bilinear
scorers drive an InfoNCE objective predicting local features outward from
the center.

Positions carry signed indices -L/2..-1, 1..L/2 (no zero): the left half of
the segment is the backward branch, the right half the forward branch, and
context row t may attend exactly to positions j with |j| <= |t|. From
position t the step-p prediction target is position t + sgn(t)*p.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataValidationError, TrainingDivergedError


@dataclass(frozen=True)
class ContrastiveConfig:
    local_window: int = 8  # raw points per local-feature position
    n_positions: int = 16  # L, even
    d_local: int = 32
    d_context: int = 32
    d_repr: int = 32
    prediction_steps: int = 4  # P
    n_negatives: int = 8
    encoder_depth: int = 2  # pointwise conv blocks after the patchify conv
    context_layers: int = 2
    context_heads: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        L = self.n_positions
        if L < 4 or L % 2 != 0:
            raise ConfigError("n_positions must be even and >= 4")
        if not 1 <= self.prediction_steps <= L // 2 - 1:
            raise ConfigError("prediction_steps must satisfy 1 <= P <= L/2 - 1")
        if self.n_negatives < 1:
            raise ConfigError("n_negatives must be >= 1")
        if self.local_window < 1:
            raise ConfigError("local_window must be >= 1")
        if self.d_context % self.context_heads != 0:
            raise ConfigError("d_context must be divisible by context_heads")

    @property
    def segment_points(self) -> int:
        return self.local_window * self.n_positions

    def to_dict(self) -> dict:
        return asdict(self)


def signed_positions(n_positions: int) -> np.ndarray:
    """Signed index of each array slot: [-L/2 .. -1, 1 .. L/2]."""
    half = n_positions // 2
    return np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)])


def build_mask(n_positions: int) -> np.ndarray:
    """L x L binary matrix; entry (t, j) = 1 iff |j| <= |t| in signed indices."""
    if n_positions < 4 or n_positions % 2 != 0:
        raise ConfigError("mask needs an even position count >= 4")
    s = np.abs(signed_positions(n_positions))
    return (s[None, :] <= s[:, None]).astype(np.uint8)


class LocalEncoder(nn.Module):
    """Strided conv stack; stride equals the local window, so position i sees
    exactly the raw points of its own window and shifting the input by one
    window shifts the features by one position."""

    def __init__(self, config: ContrastiveConfig):
        super().__init__()
        w, d = config.local_window, config.d_local
        layers: list[nn.Module] = [nn.Conv1d(1, d, kernel_size=w, stride=w)]
        for _ in range(config.encoder_depth):
            layers += [nn.ReLU(), nn.Conv1d(d, d, kernel_size=1)]
        self.net = nn.Sequential(*layers)
        self.config = config

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, n*w) -> (B, n, d_local); n need not equal L (used by the
        # shift-equivariance checks), only divisibility is required
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.shape[-1] % self.config.local_window != 0:
            raise DataValidationError(
                f"segment length {x.shape[-1]} not a multiple of "
                f"local_window {self.config.local_window}")
        out = self.net(x.unsqueeze(1))
        return out.transpose(1, 2)


class MaskedContext(nn.Module):
    """Transformer over the L positions under the signed-visibility mask."""

    def __init__(self, config: ContrastiveConfig):
        super().__init__()
        self.config = config
        L = config.n_positions
        self.input_proj = nn.Linear(config.d_local, config.d_context)
        self.pos_embed = nn.Parameter(torch.zeros(L, config.d_context))
        nn.init.normal_(self.pos_embed, std=0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=config.d_context, nhead=config.context_heads,
            dim_feedforward=2 * config.d_context, dropout=config.dropout,
            batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=config.context_layers)
        mask = torch.from_numpy(build_mask(L))
        # additive attention mask: 0 where visible, -inf where banned
        attn = torch.zeros(L, L)
        attn[mask == 0] = float("-inf")
        self.register_buffer("attn_mask", attn)

    def forward(self, locals_: torch.Tensor) -> torch.Tensor:
        if locals_.dim() == 2:
            locals_ = locals_.unsqueeze(0)
        if locals_.shape[1] != self.config.n_positions:
            raise DataValidationError(
                f"expected {self.config.n_positions} positions, got {locals_.shape[1]}")
        h = self.input_proj(locals_) + self.pos_embed
        return self.encoder(h, mask=self.attn_mask)


class RepresentationModel(nn.Module):
    """Encoder + masked context + per-step bilinear scorers + the linear
    projection that turns mean-pooled context into the segment representation."""

    def __init__(self, config: ContrastiveConfig):
        super().__init__()
        self.config = config
        self.encoder = LocalEncoder(config)
        self.context = MaskedContext(config)
        # zero init makes every score exp(0)=1, so the untrained loss is
        # exactly ln(n_negatives + 1)
        self.scorers = nn.ParameterList([
            nn.Parameter(torch.zeros(config.d_local, config.d_context))
            for _ in range(config.prediction_steps)
        ])
        self.project = nn.Linear(config.d_context, config.d_repr)

    def encode_local(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def contextualize(self, locals_: torch.Tensor) -> torch.Tensor:
        return self.context(locals_)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        locals_ = self.encoder(x)
        if locals_.shape[1] != self.config.n_positions:
            raise DataValidationError(
                f"segment yields {locals_.shape[1]} positions, config expects "
                f"{self.config.n_positions}")
        return locals_, self.context(locals_)

    def represent(self, x: torch.Tensor) -> torch.Tensor:
        """Segment representation: linear projection of the position-mean of
        the context features. x: (B, k) -> (B, d_repr)."""
        _, contexts = self.forward(x)
        return self.project(contexts.mean(dim=1))

    def represent_channels(self, data: torch.Tensor) -> torch.Tensor:
        """(S, C, k) -> (S, C, d_repr), channels encoded independently."""
        s, c, k = data.shape
        return self.represent(data.reshape(s * c, k)).reshape(s, c, -1)


@dataclass
class LossDetails:
    """Bookkeeping for independent recomputation of the loss: per prediction
    step, the contributing slots with their target and negative indices into
    the flattened (B*L) local-feature pool."""

    steps: list[dict]
    n_terms: int


def _contributing(config: ContrastiveConfig, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Array slots contributing a step-p term and their target slots."""
    signed = signed_positions(config.n_positions)
    half = config.n_positions // 2
    valid = np.abs(signed) + p <= half
    slots = np.flatnonzero(valid)
    targets_signed = signed[slots] + np.sign(signed[slots]) * p
    signed_to_slot = {s: i for i, s in enumerate(signed)}
    targets = np.array([signed_to_slot[s] for s in targets_signed])
    return slots, targets


def per_slot_term_counts(config: ContrastiveConfig) -> np.ndarray:
    """Number of in-range prediction steps per array slot (0 at the edges)."""
    signed = signed_positions(config.n_positions)
    half = config.n_positions // 2
    return np.minimum(config.prediction_steps, half - np.abs(signed))


def contrastive_loss(locals_: torch.Tensor, contexts: torch.Tensor,
                     model: RepresentationModel,
                     generator: torch.Generator,
                     return_details: bool = False):
    """InfoNCE loss over both directions.

    For every slot t with q = min(P, L/2 - |t|) >= 1 in-range steps the term is
    -(1/q) * sum_p log( Score_p(pos, z_t) / sum_{n in N_t} Score_p(n, z_t) )
    with Score_p(a, z) = exp(a^T W_p z) and N_t = the step target plus
    n_negatives local features drawn uniformly from the batch pool excluding
    that target. The total is the mean over contributing (batch, slot) pairs.
    """
    config = model.config
    B, L, _ = locals_.shape
    pool = locals_.reshape(B * L, -1)
    counts = torch.from_numpy(per_slot_term_counts(config)).to(locals_.device)

    total = locals_.new_zeros(())
    details: list[dict] = []
    for p in range(1, config.prediction_steps + 1):
        slots, targets = _contributing(config, p)
        if len(slots) == 0:
            continue
        w_p = model.scorers[p - 1]
        z = contexts[:, slots, :]  # (B, m, d_ctx)
        wz = torch.einsum("lc,bmc->bml", w_p, z)  # (B, m, d_local)

        tgt = torch.from_numpy(targets).to(locals_.device)
        pos_flat = (torch.arange(B, device=locals_.device)[:, None] * L + tgt[None, :])
        pos_feat = pool[pos_flat]  # (B, m, d_local)
        pos_logit = (pos_feat * wz).sum(-1)  # (B, m)

        # uniform over the pool minus the positive: draw in [0, B*L-1) and
        # skip past the excluded index
        draw = torch.randint(0, B * L - 1, (B, len(slots), config.n_negatives),
                             generator=generator, device=locals_.device)
        neg_flat = draw + (draw >= pos_flat.unsqueeze(-1)).long()
        neg_feat = pool[neg_flat]  # (B, m, n_neg, d_local)
        neg_logit = torch.einsum("bmnl,bml->bmn", neg_feat, wz)

        logits = torch.cat([pos_logit.unsqueeze(-1), neg_logit], dim=-1)
        log_den = torch.logsumexp(logits, dim=-1)
        term = -(pos_logit - log_den)  # (B, m)
        total = total + (term / counts[slots][None, :]).sum()
        if return_details:
            details.append({
                "p": p,
                "slots": slots,
                "targets": targets,
                "neg_flat": neg_flat.detach().cpu().numpy(),
            })

    n_terms = B * int((per_slot_term_counts(config) > 0).sum())
    loss = total / n_terms
    if return_details:
        return loss, LossDetails(steps=details, n_terms=n_terms)
    return loss


@dataclass
class PretrainSettings:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    val_fraction: float = 0.1
    val_every: int = 100
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def validation_loss(model: RepresentationModel, segments: torch.Tensor,
                    seed: int = 0, batch_size: int = 64) -> float:
    """Mean InfoNCE loss over a held-out set with a fixed negative stream."""
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    losses, weights = [], []
    with torch.no_grad():
        for i in range(0, len(segments), batch_size):
            batch = segments[i:i + batch_size]
            locals_, contexts = model(batch)
            losses.append(contrastive_loss(locals_, contexts, model, gen).item())
            weights.append(len(batch))
    model.train()
    if not losses:
        raise DataValidationError("validation set too small")
    return float(np.average(losses, weights=weights))


def pretrain(segments: np.ndarray, config: ContrastiveConfig,
             settings: PretrainSettings) -> tuple[RepresentationModel, dict]:
    """Train a representation model on normal (label-0) one-channel segments.

    segments: (N, k) float array with k = local_window * n_positions.
    Returns the model plus a history dict with the logged training curve.
    """
    segments = np.asarray(segments, dtype=np.float32)
    if segments.ndim != 2 or segments.shape[1] != config.segment_points:
        raise DataValidationError(
            f"expected (N, {config.segment_points}) segments, got {segments.shape}")
    if len(segments) < 4:
        raise DataValidationError("need at least 4 segments to pretrain")

    torch.manual_seed(settings.seed)
    model = RepresentationModel(config)
    rng = np.random.default_rng(settings.seed)
    order = rng.permutation(len(segments))
    n_val = max(1, int(len(segments) * settings.val_fraction))
    val = torch.from_numpy(segments[order[:n_val]])
    train = torch.from_numpy(segments[order[n_val:]])

    gen = torch.Generator().manual_seed(settings.seed)
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr)
    history = {"step": [], "train_loss": [], "val_loss": []}

    def log(step: int, train_loss: float) -> None:
        history["step"].append(step)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(validation_loss(model, val, seed=settings.seed))

    log(0, float("nan"))
    for step in range(1, settings.steps + 1):
        idx = rng.choice(len(train), size=min(settings.batch_size, len(train)),
                         replace=False)
        batch = train[np.sort(idx)]
        locals_, contexts = model(batch)
        loss = contrastive_loss(locals_, contexts, model, gen)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite pretraining loss at step {step}",
                last_good_state=model.state_dict())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % settings.val_every == 0 or step == settings.steps:
            log(step, loss.item())
    return model, history


CHECKPOINT_VERSION = 1


def save_checkpoint(model: RepresentationModel, path, extra: Optional[dict] = None):
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "representation",
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path) -> tuple[RepresentationModel, dict]:
    from pathlib import Path

    from .errors import FormatVersionError, StorageError

    path = Path(path)
    if not path.exists():
        raise StorageError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "representation":
        raise StorageError(f"{path}: not a representation checkpoint")
    if payload["format_version"] > CHECKPOINT_VERSION:
        raise FormatVersionError(f"{path}: checkpoint from a newer format version")
    model = RepresentationModel(ContrastiveConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
