"""Inversion trajectory capture and per-step null-embedding tuning.

The inversion pass walks the sampling indices upward, storing every
intermediate latent and the attention record of each noise-prediction
call. Tuning then walks back down: at each step the unconditional text
embedding (one row per frame) is optimized so the guided transition lands
on the stored latent, and the corrected latent becomes the pivot for the
next step. Reconstruction replays the tuned embeddings and reports how far
the trajectory drifts from the stored one.

Noise predictions along the inversion pass are evaluated at each
segment's upper step index, so a record exists at exactly the step values
the denoising pass visits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .core_io import MaskSet, ValidationError, as_latent, read_array, write_array
from .denoiser import AttentionRecord, VideoDenoiser, load_weights, save_weights
from .guidance import GuidanceConfig, GuidanceLog, compute_guidance
from .scheduler import (
    GuidanceInputs,
    NoiseSchedule,
    ddim_invert_step,
    ddim_step,
    guided_epsilon,
    make_schedule,
)

RECORD_FIELDS = (
    "temporal_maps",
    "self_queries",
    "self_keys",
    "self_values",
    "self_maps",
    "cross_maps",
)


class DivergenceError(RuntimeError):
    """Tuning loss blew past the abort threshold; carries diagnostics."""


@dataclass
class Trajectory:
    """Latents z*_0 .. z*_N along the sampling indices plus the attention
    record captured at each segment's noise prediction."""

    latents: list[torch.Tensor]
    records: list[AttentionRecord]
    prompt: str

    def __post_init__(self):
        if len(self.latents) != len(self.records) + 1:
            raise ValidationError("expected one more latent than records")

    @property
    def num_steps(self) -> int:
        return len(self.records)

    def record_for_sampling_step(self, step_index: int) -> AttentionRecord:
        """Inversion record whose noise prediction used the same step value
        as denoising step ``step_index`` (0 = noisiest)."""
        return self.records[self.num_steps - 1 - step_index]

    def target_for_sampling_step(self, step_index: int) -> torch.Tensor:
        return self.latents[self.num_steps - 1 - step_index]


@dataclass
class NullTextBank:
    """Tuned unconditional embeddings, one (F, l, c) array per denoising
    step, ordered from the noisiest step down. In ``shared`` mode all F
    rows of each step are identical."""

    embeddings: list[torch.Tensor]
    mode: str = "multi_frame"

    def __post_init__(self):
        if self.mode not in ("multi_frame", "shared"):
            raise ValidationError(f"unknown bank mode {self.mode!r}")
        if self.mode == "shared":
            for i, emb in enumerate(self.embeddings):
                if not torch.allclose(emb, emb[:1].expand_as(emb)):
                    raise ValidationError(f"shared-mode rows differ at step {i}")


@dataclass
class TuneConfig:
    # step_size is the plain-gradient-descent rate on the squared-norm
    # pinning loss; the halving rule makes the large default safe.
    inner_iters: int = 10
    step_size: float = 0.1
    early_stop_loss: float = 1e-5
    omega: float = 1.0
    stdg: Optional[GuidanceConfig] = field(default_factory=GuidanceConfig)
    masks: Optional[MaskSet] = None
    mode: str = "multi_frame"
    abort_loss: float = 1e6

    def __post_init__(self):
        if self.inner_iters < 1:
            raise ValidationError("inner_iters must be >= 1")
        if self.step_size <= 0:
            raise ValidationError("step_size must be positive")
        if self.mode not in ("multi_frame", "shared"):
            raise ValidationError(f"unknown tuning mode {self.mode!r}")


def run_ddim_inversion(
    z0: torch.Tensor, prompt: str, sched: NoiseSchedule, model
) -> Trajectory:
    """Walk the latent from clean to noisy with unguided (conditional-only)
    noise predictions, storing every latent and attention record."""
    z = as_latent(z0)
    text = model.encode(prompt)
    latents = [z]
    records = []
    for t_from, t_to in sched.inversion_pairs():
        eps, rec = model.denoise(z, t_to, text, record=True)
        z = ddim_invert_step(z, eps, t_from, t_to, sched)
        latents.append(z)
        records.append(rec)
    return Trajectory(latents=latents, records=records, prompt=prompt)


def initial_bank(model, num_steps: int, mode: str = "multi_frame") -> NullTextBank:
    """Bank holding the untouched null embedding at every step."""
    cfg = model.cfg
    phi = model.encode("").vectors[None].expand(cfg.frames, -1, -1).clone()
    return NullTextBank([phi.clone() for _ in range(num_steps)], mode=mode)


def _step_guidance(
    model, traj, step_index, z, t, text, cfg: TuneConfig, log=None
) -> Optional[torch.Tensor]:
    if cfg.stdg is None:
        return None
    return compute_guidance(
        model,
        traj.record_for_sampling_step(step_index),
        z,
        t,
        text,
        cfg.masks,
        cfg.stdg,
        log=log,
    )


def optimize_null_text(
    traj: Trajectory,
    sched: NoiseSchedule,
    model,
    cfg: TuneConfig,
    log: Optional[GuidanceLog] = None,
) -> tuple[NullTextBank, list[list[float]]]:
    """Per-step gradient descent on the pinned-trajectory loss.

    Each denoising step runs up to ``inner_iters`` descent iterations on
    the mean squared deviation between the guided transition and the
    stored latent; a step that would increase the loss is retried at half
    the rate (five halvings, then the step is abandoned). The accepted
    loss sequence per step is returned alongside the bank.
    """
    if traj.num_steps != sched.num_sampling_steps:
        raise ValidationError("trajectory length does not match the schedule")
    text_c = model.encode(traj.prompt)
    frames = model.cfg.frames
    phi = model.encode("").vectors[None].expand(frames, -1, -1).clone()
    z = traj.latents[-1]
    bank: list[torch.Tensor] = []
    traces: list[list[float]] = []

    for j, (t, t_prev) in enumerate(sched.sampling_pairs()):
        target = traj.target_for_sampling_step(j)
        with torch.no_grad():
            eps_c = model.forward(z, t, text_c)
        stdg = _step_guidance(model, traj, j, z, t, text_c, cfg, log)

        def transition_loss(phi_var: torch.Tensor) -> torch.Tensor:
            eps_u = model.forward(z, t, phi_var)
            eps_hat = guided_epsilon(GuidanceInputs(eps_c, eps_u, cfg.omega, stdg))
            z_prev = ddim_step(z, eps_hat, t, t_prev, sched)
            return ((z_prev - target) ** 2).sum()  # squared L2 norm

        with torch.no_grad():
            loss = float(transition_loss(phi))
        trace = [loss]
        for _ in range(cfg.inner_iters):
            if loss < cfg.early_stop_loss:
                break
            phi_var = phi.clone().requires_grad_(True)
            (grad,) = torch.autograd.grad(transition_loss(phi_var), phi_var)
            if cfg.mode == "shared":
                grad = grad.mean(dim=0, keepdim=True).expand_as(grad)
            rate, accepted = cfg.step_size, False
            for _ in range(6):  # first try plus five halvings
                candidate = phi - rate * grad
                with torch.no_grad():
                    cand_loss = float(transition_loss(candidate))
                if cand_loss <= loss:
                    phi, loss, accepted = candidate.detach(), cand_loss, True
                    break
                rate /= 2.0
            if not accepted:
                break
            trace.append(loss)
        if loss > cfg.abort_loss:
            raise DivergenceError(
                f"tuning diverged at step {j} (t={t}): loss {loss:.3e} "
                f"exceeds {cfg.abort_loss:.0e}"
            )
        with torch.no_grad():
            eps_u = model.forward(z, t, phi)
            eps_hat = guided_epsilon(GuidanceInputs(eps_c, eps_u, cfg.omega, stdg))
            z = ddim_step(z, eps_hat, t, t_prev, sched)  # pivot update
        bank.append(phi.clone())
        traces.append(trace)
    return NullTextBank(bank, mode=cfg.mode), traces


def reconstruct(
    traj: Trajectory,
    bank: NullTextBank,
    sched: NoiseSchedule,
    model,
    cfg: TuneConfig,
    log: Optional[GuidanceLog] = None,
) -> tuple[torch.Tensor, list[AttentionRecord], list[float]]:
    """Sample from the noisiest stored latent with the tuned embeddings,
    returning the final latent, the per-step attention records of the
    conditional pass, and the per-step drift from the stored trajectory."""
    if len(bank.embeddings) != traj.num_steps:
        raise ValidationError(
            f"bank holds {len(bank.embeddings)} steps, trajectory {traj.num_steps}"
        )
    if traj.num_steps != sched.num_sampling_steps:
        raise ValidationError("trajectory length does not match the schedule")
    text_c = model.encode(traj.prompt)
    z = traj.latents[-1]
    records: list[AttentionRecord] = []
    deviations: list[float] = []
    for j, (t, t_prev) in enumerate(sched.sampling_pairs()):
        eps_c, rec = model.denoise(z, t, text_c, record=True)
        eps_u, _ = model.denoise(z, t, bank.embeddings[j])
        stdg = _step_guidance(model, traj, j, z, t, text_c, cfg, log)
        eps_hat = guided_epsilon(GuidanceInputs(eps_c, eps_u, cfg.omega, stdg))
        z = ddim_step(z, eps_hat, t, t_prev, sched)
        records.append(rec)
        deviations.append(
            float(torch.linalg.vector_norm(z - traj.target_for_sampling_step(j)))
        )
    return z, records, deviations


# ---------------------------------------------------------------------------
# directory serialization


def save_trajectory(
    traj: Trajectory,
    sched: NoiseSchedule,
    model: VideoDenoiser,
    out_dir,
    schedule_params: Optional[dict] = None,
) -> None:
    """Self-contained trajectory directory: latents, records, prompt,
    schedule parameters, and a copy of the denoiser weights."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, z in enumerate(traj.latents):
        write_array(out / f"latent_{i:03d}.vdt", z)
    for i, rec in enumerate(traj.records):
        for name in RECORD_FIELDS:
            for b, tensor in enumerate(getattr(rec, name)):
                write_array(out / f"record_{i:03d}_b{b}_{name}.vdt", tensor)
    save_weights(model, out / "weights")
    manifest = {
        "prompt": traj.prompt,
        "num_steps": traj.num_steps,
        "num_blocks": model.cfg.num_blocks,
        "schedule": schedule_params
        or {
            "num_train_steps": sched.num_train_steps,
            "sampling_indices": sched.sampling_indices,
        },
    }
    if "beta_start" not in manifest["schedule"]:
        manifest["schedule"]["alpha_bar"] = [float(a) for a in sched.alpha_bar]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_trajectory(traj_dir) -> tuple[Trajectory, NoiseSchedule, VideoDenoiser]:
    src = Path(traj_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    n = manifest["num_steps"]
    nb = manifest["num_blocks"]
    latents = [
        torch.from_numpy(read_array(src / f"latent_{i:03d}.vdt")).to(torch.float64)
        for i in range(n + 1)
    ]
    records = []
    for i in range(n):
        rec = AttentionRecord()
        for name in RECORD_FIELDS:
            getattr(rec, name).extend(
                torch.from_numpy(
                    read_array(src / f"record_{i:03d}_b{b}_{name}.vdt")
                ).to(torch.float64)
                for b in range(nb)
            )
        records.append(rec)
    sp = manifest["schedule"]
    if "beta_start" in sp:
        sched = make_schedule(
            sp["num_train_steps"], sp["beta_start"], sp["beta_end"], sp["num_sampling_steps"]
        )
    else:
        sched = NoiseSchedule(
            sp["num_train_steps"],
            torch.tensor(sp["alpha_bar"], dtype=torch.float64),
            sp["sampling_indices"],
        )
    model = load_weights(src / "weights")
    return Trajectory(latents, records, manifest["prompt"]), sched, model


def save_bank(bank: NullTextBank, out_dir, settings: Optional[dict] = None) -> None:
    """Bank directory: one embedding file per step plus the tuning
    settings needed to replay reconstruction coherently."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, emb in enumerate(bank.embeddings):
        write_array(out / f"null_{i:03d}.vdt", emb)
    manifest = {"mode": bank.mode, "num_steps": len(bank.embeddings)}
    if settings:
        manifest["settings"] = settings
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_bank(bank_dir) -> tuple[NullTextBank, dict]:
    src = Path(bank_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    embeddings = [
        torch.from_numpy(read_array(src / f"null_{i:03d}.vdt")).to(torch.float64)
        for i in range(manifest["num_steps"])
    ]
    return (
        NullTextBank(embeddings, mode=manifest["mode"]),
        manifest.get("settings", {}),
    )
