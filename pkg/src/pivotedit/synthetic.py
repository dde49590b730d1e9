"""Deterministic moving-shape clips with exact foreground masks.

Clips are rendered on an (F, H, W) canvas and expanded to C latent
channels by fixed per-channel gains. Unspecified object positions and
velocities are drawn from the provided random stream within bounds that
keep every object in-canvas for the whole clip.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Union

import numpy as np
import torch

from .core_io import MaskSet, Rng, ValidationError


@dataclass
class ObjectSpec:
    shape: str = "square"
    size: int = 2
    velocity: Optional[tuple[float, float]] = None  # (dx right, dy down) px/frame
    intensity: float = 1.0
    position: Optional[tuple[int, int]] = None  # (row, col) of top-left

    def __post_init__(self):
        if self.shape not in ("square", "disk"):
            raise ValidationError(f"unknown shape {self.shape!r}")
        if self.size < 1:
            raise ValidationError("object size must be positive")


@dataclass
class SyntheticSpec:
    frames: int = 8
    height: int = 8
    width: int = 8
    channels: int = 4
    objects: list[ObjectSpec] = field(default_factory=lambda: [ObjectSpec()])
    background: Union[float, str] = 0.1  # constant level or "gradient"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        objects = [ObjectSpec(**{**o, "velocity": _tup(o.get("velocity")),
                                 "position": _tup(o.get("position"))})
                   for o in data.pop("objects", [{}])]
        return cls(objects=objects, **data)


def _tup(v):
    return tuple(v) if v is not None else None


CHANNEL_GAINS = 0.85  # geometric falloff per latent channel


def _stamp(canvas: np.ndarray, mask: np.ndarray, obj: ObjectSpec, r: int, c: int):
    h, w = canvas.shape
    s = obj.size
    if r < 0 or c < 0 or r + s > h or c + s > w:
        raise ValidationError(
            f"object leaves the canvas (top-left ({r},{c}), size {s}, canvas {h}x{w})"
        )
    if obj.shape == "square":
        canvas[r : r + s, c : c + s] = obj.intensity
        mask[r : r + s, c : c + s] = 1.0
    else:  # disk
        yy, xx = np.mgrid[0:s, 0:s]
        center = (s - 1) / 2.0
        inside = (yy - center) ** 2 + (xx - center) ** 2 <= (s / 2.0) ** 2
        canvas[r : r + s, c : c + s][inside] = obj.intensity
        mask[r : r + s, c : c + s][inside] = 1.0


def _offsets(v: float, frames: int) -> list[int]:
    return [round(v * k) for k in range(frames)]


def _start_range(v: float, frames: int, size: int, extent: int) -> tuple[int, int]:
    offs = _offsets(v, frames)
    return max(0, -min(offs)), extent - size - max(offs)


def _resolve_motion(
    obj: ObjectSpec, spec: SyntheticSpec, rng: Optional[Rng]
) -> tuple[tuple[float, float], tuple[int, int]]:
    """Fill in missing velocity/position so the trajectory stays in-canvas."""
    vel = obj.velocity
    if vel is None:
        candidates = (0.0, 0.5, -0.5, 1.0, -1.0)
        ok_x = [v for v in candidates
                if _start_range(v, spec.frames, obj.size, spec.width)[1]
                >= _start_range(v, spec.frames, obj.size, spec.width)[0]]
        ok_y = [v for v in candidates
                if _start_range(v, spec.frames, obj.size, spec.height)[1]
                >= _start_range(v, spec.frames, obj.size, spec.height)[0]]
        if not ok_x or not ok_y:
            raise ValidationError(f"object of size {obj.size} cannot fit the canvas")
        if rng is None:
            vel = (0.0, 0.0)
        else:
            vel = (
                ok_x[int(rng.integers(0, len(ok_x)))],
                ok_y[int(rng.integers(0, len(ok_y)))],
            )
    dx, dy = float(vel[0]), float(vel[1])
    pos = obj.position
    if pos is None:
        lo_c, hi_c = _start_range(dx, spec.frames, obj.size, spec.width)
        lo_r, hi_r = _start_range(dy, spec.frames, obj.size, spec.height)
        if hi_c < lo_c or hi_r < lo_r:
            raise ValidationError(
                f"no in-canvas start for velocity {vel}, size {obj.size}"
            )
        if rng is None:
            pos = (lo_r, lo_c)
        else:
            pos = (
                int(rng.integers(lo_r, hi_r + 1)),
                int(rng.integers(lo_c, hi_c + 1)),
            )
    return (dx, dy), pos


def gen_synthetic(spec: SyntheticSpec, rng: Optional[Rng] = None) -> tuple[torch.Tensor, MaskSet]:
    """Render the clip and its exact per-frame foreground mask."""
    F_, H, W, C = spec.frames, spec.height, spec.width, spec.channels
    if isinstance(spec.background, str):
        if spec.background != "gradient":
            raise ValidationError(f"unknown background {spec.background!r}")
        base = np.tile(np.linspace(0.0, 0.3, W, dtype=np.float64), (H, 1))
    else:
        base = np.full((H, W), float(spec.background))
    video = np.zeros((F_, H, W))
    fg = np.zeros((F_, H, W))
    motions = [_resolve_motion(obj, spec, rng) for obj in spec.objects]
    for k in range(F_):
        frame = base.copy()
        mask = np.zeros((H, W))
        for obj, ((dx, dy), (r0, c0)) in zip(spec.objects, motions):
            _stamp(frame, mask, obj, r0 + round(dy * k), c0 + round(dx * k))
        video[k] = frame
        fg[k] = mask
    gains = CHANNEL_GAINS ** np.arange(C)
    latent = torch.from_numpy(video[:, None, :, :] * gains[None, :, None, None])
    return latent.to(torch.float64), MaskSet(torch.from_numpy(fg))


_DIRECTIONS = {
    (0, 0): "stays still",
    (1, 0): "moves right",
    (-1, 0): "moves left",
    (0, 1): "moves down",
    (0, -1): "moves up",
}


def describe(spec: SyntheticSpec) -> str:
    """Deterministic prompt for a clip, built from its object list."""
    parts = []
    for obj in spec.objects:
        vel = obj.velocity or (0, 0)
        direction = _DIRECTIONS.get(
            (int(np.sign(vel[0])), int(np.sign(vel[1]))), "drifts"
        )
        tone = "bright" if obj.intensity >= 0.7 else "dim"
        parts.append(f"a {tone} {obj.shape} {direction}")
    return " and ".join(parts)
