"""Portable numeric containers and bit-exact file formats.

Every array that crosses a process boundary goes through the ``VDT1``
format: little-endian, float32, row-major, so golden files compare equal
across platforms and languages. Masks can additionally be ingested from
binary PGM (P5) images.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch

MAGIC = b"VDT1"

PathLike = Union[str, Path]
ArrayLike = Union[np.ndarray, torch.Tensor]


class FormatError(ValueError):
    """Raised when a file does not conform to the expected layout."""


class ValidationError(ValueError):
    """Raised when array contents violate a precondition."""


def _to_numpy(array: ArrayLike) -> np.ndarray:
    if isinstance(array, torch.Tensor):
        return array.detach().cpu().numpy()
    return np.asarray(array)


def write_array(path: PathLike, array: ArrayLike) -> None:
    """Write ``array`` to ``path`` in the VDT1 layout.

    Header: magic ``VDT1``, ndim as u32-LE, then one u32-LE per dimension.
    Payload: float32-LE values in row-major order.
    """
    data = _to_numpy(array)
    if data.ndim < 1:
        data = data.reshape(1)
    if not np.isfinite(data).all():
        raise ValidationError(f"refusing to write non-finite values to {path}")
    payload = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", payload.ndim))
        fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
        fh.write(payload.tobytes())


def read_array(path: PathLike) -> np.ndarray:
    """Read a VDT1 file back into a float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (ndim,) = struct.unpack("<I", raw[4:8])
    if ndim < 1 or len(raw) < 8 + 4 * ndim:
        raise FormatError(f"{path}: truncated dims (ndim={ndim})")
    dims = struct.unpack(f"<{ndim}I", raw[8 : 8 + 4 * ndim])
    count = int(np.prod(dims, dtype=np.uint64))
    payload = raw[8 + 4 * ndim :]
    if len(payload) != 4 * count:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _read_pgm_tokens(raw: bytes, n: int) -> tuple[list[bytes], int]:
    """Return the first ``n`` whitespace-separated header tokens and the
    offset of the byte following the single whitespace after the last one.
    ``#`` comments run to end of line."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < n:
        if i >= len(raw):
            raise FormatError("unexpected end of PGM header")
        c = raw[i : i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(raw) and raw[j : j + 1] not in b" \t\r\n":
                j += 1
            tokens.append(raw[i:j])
            i = j
    return tokens, i + 1  # skip the single whitespace after maxval


def import_pgm_mask(path: PathLike, threshold: int = 128) -> np.ndarray:
    """Load a binary PGM (P5) image as a {0,1} mask of shape (H, W).

    Pixels >= ``threshold`` map to 1, the rest to 0. Only single-byte
    (maxval < 256) images are supported.
    """
    raw = Path(path).read_bytes()
    tokens, offset = _read_pgm_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pixels = raw[offset : offset + width * height]
    if len(pixels) != width * height:
        raise FormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
    return (img >= threshold).astype(np.float32)


def write_pgm(path: PathLike, image: ArrayLike) -> None:
    """Write a 2-D array as an 8-bit binary PGM, rescaled to [0, 255]."""
    img = _to_numpy(image).astype(np.float64)
    if img.ndim != 2:
        raise ValidationError("PGM export expects a 2-D array")
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.clip((img - lo) * scale, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


class Rng:
    """Counter-based deterministic random stream (Philox).

    The same seed yields the same stream on every platform. ``child``
    derives independent substreams from string labels, so unrelated
    consumers (weight init, noise draws, data synthesis) never interleave.
    """

    def __init__(self, seed: int, _subkey: int = 0):
        self.seed = int(seed)
        self._subkey = int(_subkey)
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self._subkey], dtype=np.uint64))
        )

    def child(self, label: str) -> "Rng":
        digest = 0
        for byte in label.encode():
            digest = (digest * 131 + byte) % (2**64)
        return Rng(self.seed, self._subkey ^ digest)

    def normal(self, shape: tuple[int, ...] = ()) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def uniform(self, shape: tuple[int, ...] = ()) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, shape: tuple[int, ...] = ()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def normal_tensor(self, shape: tuple[int, ...]) -> torch.Tensor:
        return torch.from_numpy(self.normal(shape)).to(torch.float64)


def as_latent(array: ArrayLike) -> torch.Tensor:
    """Coerce to the canonical latent representation: float64 torch tensor
    of shape (F, C, H, W) with finite entries."""
    z = torch.as_tensor(_to_numpy(array), dtype=torch.float64)
    if z.ndim != 4:
        raise ValidationError(f"latent video must be 4-D (F,C,H,W), got {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise ValidationError("latent video contains non-finite entries")
    return z


@dataclass
class MaskSet:
    """Per-frame foreground/background split of the latent spatial grid.

    ``foreground`` is a binary (F, H, W) tensor; ``background`` is its
    complement and is derived, never stored separately.
    """

    foreground: torch.Tensor

    def __post_init__(self):
        fg = torch.as_tensor(_to_numpy(self.foreground), dtype=torch.float64)
        if fg.ndim != 3:
            raise ValidationError(f"mask must be (F,H,W), got {tuple(fg.shape)}")
        if not torch.logical_or(fg == 0, fg == 1).all():
            raise ValidationError("mask entries must be 0 or 1")
        self.foreground = fg

    @property
    def background(self) -> torch.Tensor:
        return 1.0 - self.foreground

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.foreground.shape)  # type: ignore[return-value]

    def save(self, path: PathLike) -> None:
        write_array(path, self.foreground)

    @classmethod
    def load(cls, path: PathLike) -> "MaskSet":
        return cls(foreground=read_array(path))
