"""Decoupled feature-matching guidance for the sampling trajectory.

Two matching losses are computed between stored inversion-pass features
and the current denoising-pass features: one on temporal attention maps
(motion), one on self-attention keys (appearance). Each is split by a
foreground/background mask, and the gradients of the four variants with
respect to the current latent are combined linearly into an additive
guidance term for the noise prediction.

Stored reference features and the top-k map mask are constants: gradients
flow only through the current pass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .core_io import MaskSet, ValidationError
from .denoiser import AttentionRecord, _split_heads  # noqa: F401  (head layout shared)

GUIDANCE_SOURCES = ("temporal_fg", "temporal_bg", "spatial_fg", "spatial_bg", "combined")


@dataclass
class GuidanceConfig:
    """Coefficients of the four guidance variants plus the top-k map
    selection. Defaults are the foreground-editing setting; call
    ``for_background_edit`` to swap the roles."""

    temporal_fg: float = 0.5
    temporal_bg: float = 0.5
    spatial_fg: float = 0.0
    spatial_bg: float = 0.5
    top_k: int = 2
    blocks: Optional[list[int]] = None  # None: every recorded block

    def __post_init__(self):
        if min(self.temporal_fg, self.temporal_bg, self.spatial_fg, self.spatial_bg) < 0:
            raise ValidationError("guidance coefficients must be nonnegative")
        if self.top_k < 1:
            raise ValidationError("top_k must be positive")

    def for_background_edit(self) -> "GuidanceConfig":
        return GuidanceConfig(
            temporal_fg=self.temporal_bg,
            temporal_bg=self.temporal_fg,
            spatial_fg=self.spatial_bg,
            spatial_bg=self.spatial_fg,
            top_k=self.top_k,
            blocks=self.blocks,
        )


@dataclass
class GuidanceTerm:
    value: torch.Tensor
    source: str

    def __post_init__(self):
        if self.source not in GUIDANCE_SOURCES:
            raise ValidationError(f"unknown guidance source {self.source!r}")
        if not torch.isfinite(self.value).all():
            raise ValidationError("guidance term contains non-finite entries")

    @property
    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.value))


@dataclass
class GuidancePair:
    """Foreground/background losses and gradient terms of one feature site."""

    loss_fg: float
    loss_bg: float
    fg: GuidanceTerm
    bg: GuidanceTerm


def topk_mask(maps: torch.Tensor, k: int) -> torch.Tensor:
    """Binary mask marking the k largest entries along the last dimension
    of each (batch, row). Ties resolve by index order; no gradient flows
    through the result."""
    if maps.ndim < 1:
        raise ValidationError("maps must have a last dimension to select over")
    if not 1 <= k <= maps.shape[-1]:
        raise ValidationError(f"top_k={k} outside 1..{maps.shape[-1]}")
    idx = torch.topk(maps.detach(), k, dim=-1).indices
    mask = torch.zeros_like(maps, dtype=torch.float64)
    return mask.scatter_(-1, idx, 1.0)


def _enabled_blocks(num_blocks: int, cfg: GuidanceConfig) -> list[int]:
    blocks = list(range(num_blocks)) if cfg.blocks is None else list(cfg.blocks)
    if any(not 0 <= b < num_blocks for b in blocks):
        raise ValidationError(f"guidance blocks {blocks} outside 0..{num_blocks - 1}")
    if not blocks:
        raise ValidationError("at least one block must contribute to guidance")
    return blocks


def _location_mask(mask_fhw: torch.Tensor, heads: int) -> torch.Tensor:
    """Collapse a per-frame (F, H, W) mask to per-location coverage: a
    location counts as masked-in if it is masked in any frame. Returned
    flat over (H*W*heads), matching the temporal-map batch layout."""
    loc = mask_fhw.amax(dim=0).reshape(-1)
    return loc.repeat_interleave(heads)


def _masked_mse_and_cotangent(
    diff: torch.Tensor, weight: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sum of weighted squared differences normalized by the number of
    selected elements, plus d(loss)/d(current features)."""
    count = weight.sum()
    if count == 0:
        return torch.zeros(()), torch.zeros_like(diff)
    loss = (weight * diff**2).sum() / count
    return loss, 2.0 * weight * diff / count


def temporal_loss_and_grads(
    model,
    rec_plus: AttentionRecord,
    z_t: torch.Tensor,
    t: int,
    text,
    masks: MaskSet,
    cfg: GuidanceConfig,
) -> GuidancePair:
    """Match current temporal attention maps against the stored inversion
    maps on their top-k entries, split by the fg/bg location masks, and
    return both losses with their latent gradients."""
    ref = [m.detach() for m in rec_plus.temporal_maps]
    blocks = _enabled_blocks(len(ref), cfg)
    heads = ref[0].shape[0] // masks.foreground[0].numel()
    _, rec_now = model.denoise(z_t, t, text, record=True)
    cur = rec_now.temporal_maps

    loc_fg = _location_mask(masks.foreground, heads)[:, None, None]
    loc_bg = _location_mask(masks.background, heads)[:, None, None]
    cot_fg = torch.zeros(len(ref), *ref[0].shape, dtype=torch.float64)
    cot_bg = torch.zeros_like(cot_fg)
    loss_fg = loss_bg = 0.0
    for b in blocks:
        selected = topk_mask(ref[b], cfg.top_k)
        diff = cur[b] - ref[b]
        lf, cf = _masked_mse_and_cotangent(diff, loc_fg * selected)
        lb, cb = _masked_mse_and_cotangent(diff, loc_bg * selected)
        loss_fg += float(lf) / len(blocks)
        loss_bg += float(lb) / len(blocks)
        cot_fg[b] = cf / len(blocks)
        cot_bg[b] = cb / len(blocks)

    g_fg, g_bg = model.grad_wrt_latent(z_t, t, text, "temporal_maps", [cot_fg, cot_bg])
    return GuidancePair(
        loss_fg,
        loss_bg,
        GuidanceTerm(g_fg, "temporal_fg"),
        GuidanceTerm(g_bg, "temporal_bg"),
    )


def spatial_loss_and_grads(
    model,
    rec_plus: AttentionRecord,
    z_t: torch.Tensor,
    t: int,
    text,
    masks: MaskSet,
    cfg: GuidanceConfig,
) -> GuidancePair:
    """Appearance counterpart of ``temporal_loss_and_grads``: match the
    self-attention keys, with per-frame masks broadcast over channels."""
    ref = [k.detach() for k in rec_plus.self_keys]
    blocks = _enabled_blocks(len(ref), cfg)
    _, rec_now = model.denoise(z_t, t, text, record=True)
    cur = rec_now.self_keys

    frames = masks.foreground.shape[0]
    key_fg = masks.foreground.reshape(frames, -1)[:, :, None]
    key_bg = masks.background.reshape(frames, -1)[:, :, None]
    cot_fg = torch.zeros(len(ref), *ref[0].shape, dtype=torch.float64)
    cot_bg = torch.zeros_like(cot_fg)
    loss_fg = loss_bg = 0.0
    for b in blocks:
        diff = cur[b] - ref[b]
        lf, cf = _masked_mse_and_cotangent(diff, key_fg.expand_as(diff))
        lb, cb = _masked_mse_and_cotangent(diff, key_bg.expand_as(diff))
        loss_fg += float(lf) / len(blocks)
        loss_bg += float(lb) / len(blocks)
        cot_fg[b] = cf / len(blocks)
        cot_bg[b] = cb / len(blocks)

    g_fg, g_bg = model.grad_wrt_latent(z_t, t, text, "self_keys", [cot_fg, cot_bg])
    return GuidancePair(
        loss_fg,
        loss_bg,
        GuidanceTerm(g_fg, "spatial_fg"),
        GuidanceTerm(g_bg, "spatial_bg"),
    )


def combine_guidance(terms: list[GuidanceTerm], cfg: GuidanceConfig) -> GuidanceTerm:
    """Linear combination of the four variant gradients into the additive
    guidance applied to the noise prediction."""
    weights = {
        "temporal_fg": cfg.temporal_fg,
        "temporal_bg": cfg.temporal_bg,
        "spatial_fg": cfg.spatial_fg,
        "spatial_bg": cfg.spatial_bg,
    }
    seen = [term.source for term in terms]
    if sorted(seen) != sorted(weights):
        raise ValidationError(f"expected one term per source, got {seen}")
    shape = terms[0].value.shape
    if any(term.value.shape != shape for term in terms):
        raise ValidationError("guidance term shapes differ")
    total = torch.zeros(shape, dtype=torch.float64)
    for term in terms:
        total = total + weights[term.source] * term.value
    return GuidanceTerm(total, "combined")


@dataclass
class GuidanceLog:
    """Per-step guidance norms, serializable as CSV (one row per step)."""

    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("t", "temporal_fg", "temporal_bg", "spatial_fg", "spatial_bg")

    def add(self, t: int, terms: list[GuidanceTerm]) -> None:
        row = {"t": t}
        row.update({term.source: term.norm for term in terms})
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def compute_guidance(
    model,
    rec_plus: AttentionRecord,
    z_t: torch.Tensor,
    t: int,
    text,
    masks: Optional[MaskSet],
    cfg: GuidanceConfig,
    log: Optional[GuidanceLog] = None,
) -> torch.Tensor:
    """Full guidance for one sampling step: both feature sites, four
    variants, combined per the configured coefficients."""
    if masks is None:
        raise ValidationError("guidance with fg/bg decoupling requires masks")
    temporal = temporal_loss_and_grads(model, rec_plus, z_t, t, text, masks, cfg)
    spatial = spatial_loss_and_grads(model, rec_plus, z_t, t, text, masks, cfg)
    terms = [temporal.fg, temporal.bg, spatial.fg, spatial.bg]
    if log is not None:
        log.add(t, terms)
    return combine_guidance(terms, cfg).value
