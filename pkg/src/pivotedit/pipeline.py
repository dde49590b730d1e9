"""End-to-end session orchestration.

``edit_video`` runs two lockstep denoising passes from the same inverted
noise: a reconstruction pass pinned to the source video (recording every
attention site), then an editing pass conditioned on the edit prompt that
replays those records through the attention controller while the tuned
null embeddings and (optionally) feature guidance keep it on trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .control import (
    ControlSchedule,
    EditController,
    align_prompts,
    control_phase,
)
from .core_io import MaskSet, ValidationError
from .guidance import GuidanceConfig, GuidanceLog, compute_guidance
from .inversion import NullTextBank, Trajectory, TuneConfig, reconstruct
from .metrics import Metrics, compute_metrics
from .scheduler import GuidanceInputs, NoiseSchedule, ddim_step, guided_epsilon


@dataclass
class EditSession:
    """Everything one edit needs; component shapes must be mutually
    consistent and masks must be present whenever the mutual-attention
    phase or fg/bg-decoupled guidance can run."""

    source_prompt: str
    edit_prompt: str
    trajectory: Trajectory
    bank: NullTextBank
    masks: Optional[MaskSet]
    schedule: ControlSchedule
    stdg: Optional[GuidanceConfig] = field(default_factory=GuidanceConfig)
    omega: float = 1.0
    seed: int = 0
    reweight: dict[str, float] = field(default_factory=dict)
    enable_sa: bool = True
    enable_ca: bool = True
    stdg_on_edit_path: bool = True
    renormalize_cross: bool = False

    def __post_init__(self):
        if self.source_prompt != self.trajectory.prompt:
            raise ValidationError(
                "session source prompt differs from the trajectory prompt"
            )
        if self.schedule.steps != self.trajectory.num_steps:
            raise ValidationError("control schedule steps differ from trajectory")
        mutual_runs = self.enable_sa and math.ceil(
            self.schedule.tau_s * self.schedule.steps
        ) < self.schedule.steps
        if mutual_runs and self.masks is None:
            raise ValidationError("mutual-attention phase requires masks")
        if self.stdg is not None and self.masks is None:
            raise ValidationError("decoupled guidance requires masks")


def edit_video(
    session: EditSession,
    model,
    sched: NoiseSchedule,
    guidance_log_recon: Optional[GuidanceLog] = None,
    guidance_log_edit: Optional[GuidanceLog] = None,
) -> tuple[torch.Tensor, torch.Tensor, Metrics]:
    """Run both passes and score preservation of the unedited region.

    Returns (edited video, reconstruction video, metrics); metrics compare
    the edited video against the original input, masked by the background
    when masks are available, and carry the reconstruction pass's
    trajectory-deviation trace.
    """
    traj = session.trajectory
    recon_cfg = TuneConfig(
        omega=session.omega,
        stdg=session.stdg,
        masks=session.masks,
        mode=session.bank.mode,
    )
    recon, recon_records, deviations = reconstruct(
        traj, session.bank, sched, model, recon_cfg, log=guidance_log_recon
    )

    align = align_prompts(session.source_prompt, session.edit_prompt, model.cfg.text_len)
    for word, weight in session.reweight.items():
        align.set_word_weight(word, weight)
    fg_flat = (
        session.masks.foreground.reshape(model.cfg.frames, -1)
        if session.masks is not None
        else None
    )
    controller = EditController(
        align=align,
        sched=session.schedule,
        heads=model.cfg.attention_heads,
        fg_mask=fg_flat,
        enable_sa=session.enable_sa,
        enable_ca=session.enable_ca,
        renormalize=session.renormalize_cross,
    )

    edit_text = model.encode(session.edit_prompt)
    z = traj.latents[-1]
    for j, (t, t_prev) in enumerate(sched.sampling_pairs()):
        controller.begin_step(j, recon_records[j])
        eps_c, _ = model.denoise(z, t, edit_text, control=controller)
        eps_u, _ = model.denoise(z, t, session.bank.embeddings[j])
        stdg = None
        if session.stdg is not None and session.stdg_on_edit_path:
            stdg = compute_guidance(
                model,
                traj.record_for_sampling_step(j),
                z,
                t,
                edit_text,
                session.masks,
                session.stdg,
                log=guidance_log_edit,
            )
        eps_hat = guided_epsilon(GuidanceInputs(eps_c, eps_u, session.omega, stdg))
        z = ddim_step(z, eps_hat, t, t_prev, sched)

    mask = session.masks.background if session.masks is not None else None
    metrics = compute_metrics(traj.latents[0], z, mask=mask)
    metrics.trajectory_deviation = deviations
    return z, recon, metrics
