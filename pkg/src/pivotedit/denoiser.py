"""A small deterministic text-conditioned video denoiser.

The network is deliberately minimal: a linear patch embedding, then
``num_blocks`` repetitions of [spatial self-attention per frame ->
cross-attention to text tokens -> temporal attention across frames per
spatial location], each pre-normalized with a residual connection, and a
linear projection back to latent channels. Everything an external
controller or guidance computation needs (temporal maps, self-attention
queries/keys/values/maps, cross-attention maps) is captured through an
AttentionRecord, and exact reverse-mode gradients of those features with
respect to the input latent are available via ``grad_wrt_latent``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .core_io import Rng, ValidationError, read_array, write_array
from .scheduler import NoiseSchedule, add_noise

TextLike = Union["TextEmbedding", torch.Tensor]

FEATURE_SELECTORS = ("temporal_maps", "self_keys", "self_maps", "cross_maps")


@dataclass
class DenoiserConfig:
    frames: int = 8
    channels: int = 4
    height: int = 8
    width: int = 8
    model_width: int = 32
    attention_heads: int = 2
    text_len: int = 8
    text_dim: int = 16
    num_blocks: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.frames, self.channels, self.height, self.width,
               self.model_width, self.attention_heads, self.text_len,
               self.text_dim, self.num_blocks) < 1:
            raise ValidationError("all config dimensions must be positive")
        if self.model_width % self.attention_heads:
            raise ValidationError("model_width must be divisible by attention_heads")
        if self.model_width % 4:
            raise ValidationError("model_width must be divisible by 4")

    @property
    def head_dim(self) -> int:
        return self.model_width // self.attention_heads

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width


@dataclass
class TextEmbedding:
    """Prompt tokens padded/truncated to the configured length, with one
    deterministic vector per token (zero vectors on padding positions)."""

    tokens: list[str]
    vectors: torch.Tensor


def tokenize(prompt: str) -> list[str]:
    return prompt.lower().split()


def _token_vector(token: str, seed: int, dim: int) -> np.ndarray:
    digest = int.from_bytes(hashlib.sha256(token.encode()).digest()[:8], "little")
    gen = np.random.Generator(
        np.random.Philox(key=np.array([seed % 2**64, digest], dtype=np.uint64))
    )
    return gen.standard_normal(dim) / math.sqrt(dim)


def encode_text(prompt: str, cfg: DenoiserConfig) -> TextEmbedding:
    """Hash-embed a prompt: lowercase whitespace tokens, each mapped to a
    fixed seeded vector; zero-padded (or truncated) to ``cfg.text_len``."""
    tokens = tokenize(prompt)[: cfg.text_len]
    vectors = torch.zeros(cfg.text_len, cfg.text_dim, dtype=torch.float64)
    for i, tok in enumerate(tokens):
        vectors[i] = torch.from_numpy(_token_vector(tok, cfg.seed, cfg.text_dim))
    padded = tokens + [""] * (cfg.text_len - len(tokens))
    return TextEmbedding(tokens=padded, vectors=vectors)


@dataclass
class AttentionRecord:
    """Per-block attention internals captured during one denoiser call.

    Layouts (location-major over heads for temporal, frame-major for the
    per-frame sites):
      temporal_maps[b]: (H*W*heads, F, F), rows softmax-normalized
      self_queries/keys/values[b]: (F, H*W, model_width), pre head-split
      self_maps[b]: (F*heads, H*W, H*W)
      cross_maps[b]: (F*heads, H*W, text_len)
    """

    temporal_maps: list[torch.Tensor] = field(default_factory=list)
    self_queries: list[torch.Tensor] = field(default_factory=list)
    self_keys: list[torch.Tensor] = field(default_factory=list)
    self_values: list[torch.Tensor] = field(default_factory=list)
    self_maps: list[torch.Tensor] = field(default_factory=list)
    cross_maps: list[torch.Tensor] = field(default_factory=list)

    def detach(self) -> "AttentionRecord":
        return AttentionRecord(
            **{
                name: [t.detach().clone() for t in getattr(self, name)]
                for name in self.__dataclass_fields__
            }
        )


def sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sin/cos features of shape (len(positions), dim); dim even."""
    half = dim // 2
    freq = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    ang = positions.to(torch.float64)[:, None] * freq[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """(B, N, d) -> (B*heads, N, d/heads), head index minor in the batch."""
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).permute(0, 2, 1, 3).reshape(b * heads, n, -1)


def _merge_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    bh, n, dh = x.shape
    return x.view(bh // heads, heads, n, dh).permute(0, 2, 1, 3).reshape(bh // heads, n, -1)


class _Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d, c_txt = cfg.model_width, cfg.text_dim
        kw = dict(dtype=torch.float64)
        self.ln_spatial = nn.LayerNorm(d, **kw)
        self.wq_s = nn.Linear(d, d, **kw)
        self.wk_s = nn.Linear(d, d, **kw)
        self.wv_s = nn.Linear(d, d, **kw)
        self.wo_s = nn.Linear(d, d, **kw)
        self.ln_cross = nn.LayerNorm(d, **kw)
        self.wq_c = nn.Linear(d, d, **kw)
        self.wk_c = nn.Linear(c_txt, d, **kw)
        self.wv_c = nn.Linear(c_txt, d, **kw)
        self.wo_c = nn.Linear(d, d, **kw)
        self.ln_temporal = nn.LayerNorm(d, **kw)
        self.wq_t = nn.Linear(d, d, **kw)
        self.wk_t = nn.Linear(d, d, **kw)
        self.wv_t = nn.Linear(d, d, **kw)
        self.wo_t = nn.Linear(d, d, **kw)


class VideoDenoiser(nn.Module):
    """Noise predictor over (F, C, H, W) latent videos.

    ``forward`` is plain differentiable torch; callers own the grad
    context. ``denoise`` is the no-grad convenience wrapper returning a
    detached AttentionRecord.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_width
        kw = dict(dtype=torch.float64)
        self.patch_in = nn.Linear(cfg.channels, d, **kw)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.num_blocks))
        self.ln_out = nn.LayerNorm(d, **kw)
        self.patch_out = nn.Linear(d, cfg.channels, **kw)
        self._init_weights(Rng(cfg.seed).child("weights-init"))

        rows = torch.arange(cfg.height).repeat_interleave(cfg.width)
        cols = torch.arange(cfg.width).repeat(cfg.height)
        pos = torch.cat([sinusoid(rows, d // 2), sinusoid(cols, d // 2)], dim=-1)
        self.register_buffer("pos_spatial", pos)
        self.register_buffer("pos_frame", sinusoid(torch.arange(cfg.frames), d))

    def _init_weights(self, rng: Rng) -> None:
        for name, param in sorted(self.named_parameters()):
            stream = rng.child(name)
            if param.ndim == 2:
                fan_in = param.shape[1]
                values = stream.normal(tuple(param.shape)) / math.sqrt(fan_in)
                param.data.copy_(torch.from_numpy(values))
            elif "weight" in name:  # LayerNorm scale
                param.data.fill_(1.0)
            else:
                param.data.zero_()

    def encode(self, prompt: str) -> TextEmbedding:
        return encode_text(prompt, self.cfg)

    def _text_tensor(self, text: Optional[TextLike]) -> torch.Tensor:
        cfg = self.cfg
        if text is None:
            vec = torch.zeros(cfg.text_len, cfg.text_dim, dtype=torch.float64)
        elif isinstance(text, TextEmbedding):
            vec = text.vectors
        else:
            vec = torch.as_tensor(text, dtype=torch.float64)
        if vec.ndim == 2:
            vec = vec[None].expand(cfg.frames, -1, -1)
        if vec.shape != (cfg.frames, cfg.text_len, cfg.text_dim):
            raise ValidationError(
                f"text embedding must be (l, c) or (F, l, c); got {tuple(vec.shape)}"
            )
        return vec

    def forward(
        self,
        z_t: torch.Tensor,
        t: int,
        text: Optional[TextLike] = None,
        record: Optional[AttentionRecord] = None,
        control=None,
    ) -> torch.Tensor:
        cfg = self.cfg
        if z_t.shape != (cfg.frames, cfg.channels, cfg.height, cfg.width):
            raise ValidationError(
                f"latent shape {tuple(z_t.shape)} does not match config "
                f"{(cfg.frames, cfg.channels, cfg.height, cfg.width)}"
            )
        if record is not None and control is not None:
            raise ValidationError("recording a controlled call is not supported")
        F_, hw, d, h = cfg.frames, cfg.tokens_per_frame, cfg.model_width, cfg.attention_heads
        scale = 1.0 / math.sqrt(cfg.head_dim)
        txt = self._text_tensor(text)

        x = self.patch_in(z_t.permute(0, 2, 3, 1).reshape(F_, hw, cfg.channels))
        t_emb = sinusoid(torch.tensor([float(t)]), d)[0]
        x = x + self.pos_spatial[None] + self.pos_frame[:, None, :] + t_emb

        for b, blk in enumerate(self.blocks):
            # spatial self-attention, one frame at a time
            y = blk.ln_spatial(x)
            q, k, v = blk.wq_s(y), blk.wk_s(y), blk.wv_s(y)
            if record is not None:
                record.self_queries.append(q)
                record.self_keys.append(k)
                record.self_values.append(v)
            qh, kh, vh = (_split_heads(u, h) for u in (q, k, v))
            out = control.spatial_attention(b, qh, kh, vh) if control else None
            if out is None:
                maps = torch.softmax(qh @ kh.transpose(-2, -1) * scale, dim=-1)
                if record is not None:
                    record.self_maps.append(maps)
                out = maps @ vh
            x = x + blk.wo_s(_merge_heads(out, h))

            # cross-attention to the (per-frame) text tokens
            y = blk.ln_cross(x)
            qh = _split_heads(blk.wq_c(y), h)
            kh = _split_heads(blk.wk_c(txt), h)
            vh = _split_heads(blk.wv_c(txt), h)
            maps = torch.softmax(qh @ kh.transpose(-2, -1) * scale, dim=-1)
            if record is not None:
                record.cross_maps.append(maps)
            if control is not None:
                maps = control.cross_maps(b, maps)
            x = x + blk.wo_c(_merge_heads(maps @ vh, h))

            # temporal attention across frames per (location, head)
            y = blk.ln_temporal(x)
            q, k, v = blk.wq_t(y), blk.wk_t(y), blk.wv_t(y)
            qt, kt, vt = (
                u.view(F_, hw, h, -1).permute(1, 2, 0, 3).reshape(hw * h, F_, -1)
                for u in (q, k, v)
            )
            maps = torch.softmax(qt @ kt.transpose(-2, -1) * scale, dim=-1)
            if record is not None:
                record.temporal_maps.append(maps)
            out = maps @ vt
            out = out.view(hw, h, F_, -1).permute(2, 0, 1, 3).reshape(F_, hw, d)
            x = x + blk.wo_t(out)

        eps = self.patch_out(self.ln_out(x))
        return eps.reshape(F_, cfg.height, cfg.width, cfg.channels).permute(0, 3, 1, 2)

    def denoise(
        self,
        z_t: torch.Tensor,
        t: int,
        text: Optional[TextLike] = None,
        record: bool = False,
        control=None,
    ) -> tuple[torch.Tensor, Optional[AttentionRecord]]:
        """No-grad noise prediction; with ``record`` the returned
        AttentionRecord holds detached copies of every attention feature."""
        rec = AttentionRecord() if record else None
        with torch.no_grad():
            eps = self.forward(z_t, t, text, record=rec, control=control)
        return eps, rec.detach() if rec is not None else None

    def grad_wrt_latent(
        self,
        z_t: torch.Tensor,
        t: int,
        text: Optional[TextLike],
        feature_selector: str,
        cotangent: Union[torch.Tensor, Sequence[torch.Tensor]],
    ) -> Union[torch.Tensor, list[torch.Tensor]]:
        """Vector-Jacobian product of the map z_t -> selected features.

        Features are the block-stacked tensors of one recorded family, so a
        cotangent has shape (num_blocks, *feature_shape). A sequence of
        cotangents is pulled back through a single forward pass; the result
        then is a list of gradients, one per cotangent.
        """
        if feature_selector not in FEATURE_SELECTORS:
            raise ValidationError(
                f"unknown feature selector {feature_selector!r}; "
                f"expected one of {FEATURE_SELECTORS}"
            )
        single = isinstance(cotangent, torch.Tensor)
        cotangents = [cotangent] if single else list(cotangent)
        z = z_t.detach().clone().requires_grad_(True)
        rec = AttentionRecord()
        self.forward(z, t, text, record=rec)
        features = torch.stack(getattr(rec, feature_selector))
        grads = []
        for i, cot in enumerate(cotangents):
            cot = torch.as_tensor(cot, dtype=torch.float64)
            if cot.shape != features.shape:
                raise ValidationError(
                    f"cotangent shape {tuple(cot.shape)} does not match "
                    f"features {tuple(features.shape)}"
                )
            (g,) = torch.autograd.grad(
                features, z, grad_outputs=cot, retain_graph=i < len(cotangents) - 1
            )
            grads.append(g)
        return grads[0] if single else grads


@dataclass
class GaussianOracle:
    """Closed-form noise predictor for data drawn from N(mean, variance*I);
    the exact minimizer of the denoising objective on that distribution."""

    mean: torch.Tensor
    variance: float = 1.0

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean, dtype=torch.float64)
        if self.variance <= 0:
            raise ValidationError("oracle variance must be positive")


def oracle_epsilon(
    z_t: torch.Tensor, t: int, oracle: GaussianOracle, sched: NoiseSchedule
) -> torch.Tensor:
    """Posterior-mean noise prediction under the Gaussian data model."""
    ab = sched.alpha_bar_at(t)
    if ab == 1.0:
        raise ValidationError("noise prediction undefined at the clean endpoint (abar=1)")
    s2 = oracle.variance
    shrink = math.sqrt(ab) * s2 / (ab * s2 + 1.0 - ab)
    posterior_mean = oracle.mean + shrink * (z_t - math.sqrt(ab) * oracle.mean)
    return (z_t - math.sqrt(ab) * posterior_mean) / math.sqrt(1.0 - ab)


class GaussianOracleModel:
    """Adapter giving the analytic oracle the same calling surface as the
    learned denoiser (text is ignored; records stay empty)."""

    def __init__(self, oracle: GaussianOracle, sched: NoiseSchedule, cfg: DenoiserConfig):
        self.oracle = oracle
        self.sched = sched
        self.cfg = cfg

    def encode(self, prompt: str) -> TextEmbedding:
        return encode_text(prompt, self.cfg)

    def denoise(self, z_t, t, text=None, record=False, control=None):
        eps = oracle_epsilon(z_t, t, self.oracle, self.sched)
        return eps, AttentionRecord() if record else None


def train_toy(
    dataset: Sequence[torch.Tensor],
    steps: int,
    sched: NoiseSchedule,
    rng: Rng,
    cfg: Optional[DenoiserConfig] = None,
    prompts: Optional[Sequence[str]] = None,
    lr: float = 1e-2,
) -> tuple[VideoDenoiser, list[float]]:
    """Fit the denoiser by stochastic descent on the noise-prediction MSE.

    Each step draws one clip, one train-step index, and one noise array
    from ``rng``, so a fixed seed reproduces the final weights exactly.
    Returns the model together with the per-step loss trace.
    """
    if not dataset:
        raise ValidationError("training dataset must be nonempty")
    cfg = cfg or DenoiserConfig()
    model = VideoDenoiser(cfg)
    texts = [
        model.encode(prompts[i] if prompts else "").vectors
        for i in range(len(dataset))
    ]
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses: list[float] = []
    for _ in range(int(steps)):
        i = int(rng.integers(0, len(dataset)))
        t = int(rng.integers(1, sched.num_train_steps + 1))
        z0 = torch.as_tensor(dataset[i], dtype=torch.float64)
        eps = rng.normal_tensor(tuple(z0.shape))
        z_t = add_noise(z0, t, eps, sched)
        pred = model.forward(z_t, t, texts[i])
        loss = ((pred - eps) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.detach().item())
    return model, losses


def save_weights(model: VideoDenoiser, out_dir) -> None:
    """One VDT1 file per parameter plus a manifest with names and shapes
    in deterministic (registration) order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, param in model.named_parameters():
        write_array(out / f"{name}.vdt", param.detach())
        entries.append({"name": name, "shape": list(param.shape)})
    manifest = {"config": asdict(model.cfg), "params": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_weights(weights_dir) -> VideoDenoiser:
    src = Path(weights_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    model = VideoDenoiser(DenoiserConfig(**manifest["config"]))
    params = dict(model.named_parameters())
    for entry in manifest["params"]:
        data = read_array(src / f"{entry['name']}.vdt")
        params[entry["name"]].data.copy_(torch.from_numpy(data).to(torch.float64))
    return model
