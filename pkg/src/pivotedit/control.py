"""Dual-path attention control for editing.

The editing pass replays against records stored by a prior reconstruction
pass. Early denoising steps replace the editing path's self-attention maps
with the stored ones outright ("replace" phase); later steps attend over
the concatenation of both paths' keys/values with stored-path foreground
keys excluded ("mutual" phase). Cross-attention maps are mixed word-wise:
common words take the stored maps, novel words keep the editing maps, and
a per-word re-weighting scales the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .core_io import ValidationError
from .denoiser import AttentionRecord, _split_heads, tokenize


class ControlError(ValueError):
    """Raised when a control operation receives inconsistent inputs."""


@dataclass
class PromptAlignment:
    """Word-level correspondence between a source and an edit prompt.

    ``mapping`` sends edit-token positions to source-token positions for
    words appearing in both prompts (padding maps to itself); ``novel``
    is 1 exactly at edit-only word positions; ``reweight`` scales each
    edit word's attention column (all ones by default).
    """

    source_tokens: list[str]
    edit_tokens: list[str]
    mapping: dict[int, int]
    novel: torch.Tensor
    reweight: torch.Tensor

    def __post_init__(self):
        if not (self.reweight > 0).all():
            raise ValidationError("re-weighting coefficients must be positive")

    def set_word_weight(self, word: str, weight: float) -> None:
        if weight <= 0:
            raise ValidationError("re-weighting coefficients must be positive")
        hits = [i for i, tok in enumerate(self.edit_tokens) if tok == word.lower()]
        if not hits:
            raise ValidationError(f"word {word!r} not in the edit prompt")
        for i in hits:
            self.reweight[i] = weight

    def report(self) -> str:
        """Human-readable token table for debugging prompt edits."""
        lines = [f"{'pos':>3}  {'edit token':<16} {'novel':<6} {'maps to':<16} weight"]
        for i, tok in enumerate(self.edit_tokens):
            src = self.mapping.get(i)
            src_tok = self.source_tokens[src] if src is not None else ""
            target = f"{src}:{src_tok or '<pad>'}" if src is not None else "-"
            lines.append(
                f"{i:>3}  {tok or '<pad>':<16} {int(self.novel[i]):<6} "
                f"{target:<16} {float(self.reweight[i]):g}"
            )
        return "\n".join(lines)


def _lcs_pairs(a: list[str], b: list[str]) -> list[tuple[int, int]]:
    """Longest common subsequence as (index_a, index_b) pairs, earliest
    match preferred on ties."""
    n, m = len(a), len(b)
    length = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                length[i][j] = 1 + length[i + 1][j + 1]
            else:
                length[i][j] = max(length[i + 1][j], length[i][j + 1])
    pairs = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            pairs.append((i, j))
            i, j = i + 1, j + 1
        elif length[i + 1][j] >= length[i][j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def align_prompts(source: str, edit: str, text_len: int) -> PromptAlignment:
    """Align two prompts by longest common subsequence over normalized
    tokens. Edit words without a source counterpart are marked novel;
    padding positions map to themselves and are never novel."""
    src = tokenize(source)[:text_len]
    dst = tokenize(edit)[:text_len]
    mapping = {j: i for i, j in _lcs_pairs(src, dst)}
    novel = torch.zeros(text_len, dtype=torch.float64)
    for j in range(len(dst)):
        if j not in mapping:
            novel[j] = 1.0
    for j in range(len(dst), text_len):
        mapping[j] = j
    return PromptAlignment(
        source_tokens=src + [""] * (text_len - len(src)),
        edit_tokens=dst + [""] * (text_len - len(dst)),
        mapping=mapping,
        novel=novel,
        reweight=torch.ones(text_len, dtype=torch.float64),
    )


@dataclass
class ControlSchedule:
    """Phase thresholds as fractions of the denoising iteration count
    (step 0 is the noisiest)."""

    tau_s: float = 0.3
    tau_c: float = 0.8
    steps: int = 20

    def __post_init__(self):
        if not (0 <= self.tau_s <= 1 and 0 <= self.tau_c <= 1):
            raise ValidationError("phase thresholds must lie in [0, 1]")
        if self.steps < 1:
            raise ValidationError("steps must be positive")


def control_phase(step_index: int, sched: ControlSchedule) -> tuple[str, bool]:
    """Self-attention phase ("replace" then "mutual") and whether
    cross-attention control is still active at this step."""
    if not 0 <= step_index < sched.steps:
        raise ValidationError(f"step index {step_index} outside 0..{sched.steps - 1}")
    sa = "replace" if step_index < math.ceil(sched.tau_s * sched.steps) else "mutual"
    ca_on = step_index < math.ceil(sched.tau_c * sched.steps)
    return sa, ca_on


def attend_with_stored_maps(
    stored_maps: torch.Tensor, values: torch.Tensor
) -> torch.Tensor:
    """Aggregate current values with previously stored attention rows:
    stored_maps (B, N, N) @ values (B, N, dv)."""
    if stored_maps.ndim != 3 or values.ndim != 3:
        raise ValidationError("expected batched (B, N, ·) tensors")
    if stored_maps.shape[:2] != values.shape[:2] or stored_maps.shape[2] != values.shape[1]:
        raise ValidationError(
            f"map shape {tuple(stored_maps.shape)} incompatible with values "
            f"{tuple(values.shape)}"
        )
    return stored_maps @ values


def masked_mutual_attention(
    q_edit: torch.Tensor,
    k_edit: torch.Tensor,
    k_stored: torch.Tensor,
    v_edit: torch.Tensor,
    v_stored: torch.Tensor,
    fg_mask: torch.Tensor,
    scale_dim: Optional[int] = None,
) -> torch.Tensor:
    """Attention over the concatenated [editing | stored] key axis, with
    stored keys at foreground positions excluded from the softmax so the
    edited region cannot pull in original content.

    All of q/k/v are (B, N, d); ``fg_mask`` is binary (B, N_stored). The
    exclusion is additive (-inf on logits), not multiplicative.
    """
    if k_edit.shape[-1] != q_edit.shape[-1] or k_stored.shape[-1] != q_edit.shape[-1]:
        raise ValidationError("query/key widths differ")
    if v_edit.shape[:2] != k_edit.shape[:2] or v_stored.shape[:2] != k_stored.shape[:2]:
        raise ValidationError("key/value token counts differ")
    if fg_mask.shape != k_stored.shape[:2]:
        raise ValidationError(
            f"mask shape {tuple(fg_mask.shape)} must match stored keys "
            f"{tuple(k_stored.shape[:2])}"
        )
    d = scale_dim or q_edit.shape[-1]
    keys = torch.cat([k_edit, k_stored], dim=1)
    vals = torch.cat([v_edit, v_stored], dim=1)
    logits = q_edit @ keys.transpose(-2, -1) / math.sqrt(d)
    never = torch.zeros(fg_mask.shape[0], k_edit.shape[1], dtype=fg_mask.dtype)
    blocked = torch.cat([never, fg_mask], dim=1)
    logits = logits.masked_fill(blocked[:, None, :].bool(), float("-inf"))
    if bool(torch.isinf(logits).all(dim=-1).any()):
        raise ControlError("a query row has every key masked out")
    weights = torch.softmax(logits, dim=-1)
    return weights @ vals


def combine_cross_maps(
    edit_maps: torch.Tensor,
    stored_maps: torch.Tensor,
    align: PromptAlignment,
    step_index: int,
    sched: ControlSchedule,
    renormalize: bool = False,
) -> torch.Tensor:
    """Word-wise mix of editing-path and stored-path cross-attention maps.

    While cross control is active, common-word columns are gathered from
    the stored maps through the position mapping, novel-word columns keep
    the editing maps, and each column is scaled by its re-weighting
    coefficient. Afterwards the editing maps pass through untouched.
    """
    _, ca_on = control_phase(step_index, sched)
    if not ca_on:
        return edit_maps
    l_edit, l_src = edit_maps.shape[-1], stored_maps.shape[-1]
    if edit_maps.shape[:2] != stored_maps.shape[:2]:
        raise ValidationError("map batch/query dims differ between paths")
    index = torch.arange(l_edit)
    have = torch.zeros(l_edit, dtype=torch.bool)
    for j, i in align.mapping.items():
        if j < l_edit:
            if not 0 <= i < l_src:
                raise ValidationError(f"mapping {j}->{i} outside source length {l_src}")
            index[j] = i
            have[j] = True
    gathered = stored_maps[..., index]
    novel = align.novel[: l_edit]
    keep_edit = torch.logical_or(novel.bool(), ~have).to(torch.float64)
    mixed = keep_edit * edit_maps + (1.0 - keep_edit) * gathered
    out = align.reweight[: l_edit] * mixed
    if renormalize:
        out = out / out.sum(dim=-1, keepdim=True).clamp_min(1e-12)
    return out


@dataclass
class EditController:
    """Per-session hook object the denoiser consults at every attention
    site during the editing pass. ``begin_step`` installs the matching
    reconstruction-pass record before each denoiser call."""

    align: PromptAlignment
    sched: ControlSchedule
    heads: int
    fg_mask: Optional[torch.Tensor] = None  # (F, H*W) binary
    enable_sa: bool = True
    enable_ca: bool = True
    renormalize: bool = False
    step_index: int = 0
    record: Optional[AttentionRecord] = field(default=None, repr=False)

    def begin_step(self, step_index: int, record: AttentionRecord) -> None:
        self.step_index = step_index
        self.record = record

    def spatial_attention(self, block: int, qh, kh, vh):
        if not self.enable_sa:
            return None
        if self.record is None:
            raise ControlError("controller used before begin_step")
        phase, _ = control_phase(self.step_index, self.sched)
        if phase == "replace":
            return attend_with_stored_maps(self.record.self_maps[block], vh)
        if self.fg_mask is None:
            raise ControlError("mutual attention phase requires a foreground mask")
        k_rec = _split_heads(self.record.self_keys[block], self.heads)
        v_rec = _split_heads(self.record.self_values[block], self.heads)
        mask = self.fg_mask.repeat_interleave(self.heads, dim=0)
        return masked_mutual_attention(qh, kh, k_rec, vh, v_rec, mask)

    def cross_maps(self, block: int, maps):
        if not self.enable_ca:
            return maps
        if self.record is None:
            raise ControlError("controller used before begin_step")
        return combine_cross_maps(
            maps,
            self.record.cross_maps[block],
            self.align,
            self.step_index,
            self.sched,
            renormalize=self.renormalize,
        )
