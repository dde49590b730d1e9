"""Reconstruction/preservation metrics.

PSNR is computed after mapping the reference video's value range onto
[0, 1] and applying the same affine map to the comparison video; the map
is recorded in the result so reported numbers are reproducible. The
masked variant restricts the error to mask==1 pixels (the preservation
score when handed a background mask).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import torch

from .core_io import ValidationError

PSNR_CAP_DB = 99.0


@dataclass
class Metrics:
    psnr: float
    mse: float
    masked_psnr: Optional[float] = None
    masked_mse: Optional[float] = None
    norm_lo: float = 0.0
    norm_hi: float = 1.0
    trajectory_deviation: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _psnr(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def compute_metrics(
    a: torch.Tensor, b: torch.Tensor, mask: Optional[torch.Tensor] = None
) -> Metrics:
    """PSNR / masked PSNR of ``b`` against reference ``a``.

    ``mask`` is a per-frame (F, H, W) binary array broadcast over channels;
    identical inputs report the capped value rather than infinity.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    lo, hi = float(a.min()), float(a.max())
    scale = 1.0 / (hi - lo) if hi > lo else 1.0
    an, bn = (a - lo) * scale, (b - lo) * scale
    sq = (an - bn) ** 2
    mse = float(sq.mean())
    result = Metrics(psnr=_psnr(mse), mse=mse, norm_lo=lo, norm_hi=hi)
    if mask is not None:
        m = torch.as_tensor(mask, dtype=torch.float64)
        if a.ndim == 4:
            if m.shape != (a.shape[0], a.shape[2], a.shape[3]):
                raise ValidationError("mask must be (F, H, W) matching the video")
            m = m[:, None, :, :].expand_as(a)
        elif m.shape != a.shape:
            raise ValidationError("mask shape must match the array")
        selected = m.sum()
        if selected == 0:
            raise ValidationError("mask selects no pixels")
        masked_mse = float((sq * m).sum() / selected)
        result.masked_mse = masked_mse
        result.masked_psnr = _psnr(masked_mse)
    return result
