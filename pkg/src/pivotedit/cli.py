"""Command-line interface.

Subcommands mirror the pipeline stages: gen-data, train, invert, tune,
reconstruct, edit, metrics. Every array crossing the CLI boundary is a
VDT1 file; reports are CSV; metrics print as JSON.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .core_io import MaskSet, Rng, import_pgm_mask, read_array, write_array, write_pgm
from .denoiser import DenoiserConfig, load_weights, save_weights, train_toy
from .guidance import GuidanceLog
from .inversion import (
    Trajectory,
    initial_bank,
    load_bank,
    load_trajectory,
    optimize_null_text,
    reconstruct,
    run_ddim_inversion,
    save_bank,
    save_trajectory,
)
from .metrics import compute_metrics
from .pipeline import EditSession, edit_video
from .synthetic import SyntheticSpec, describe, gen_synthetic


def _load_settings(path: str | None) -> config_mod.Settings:
    return config_mod.load_settings(path) if path else config_mod.Settings()


def _dump_frames(video: torch.Tensor, out_dir: Path) -> None:
    """One PGM per frame: the frame's channels laid out side by side."""
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(video.detach().cpu(), dtype=np.float64)
    for k in range(arr.shape[0]):
        strip = np.concatenate(list(arr[k]), axis=1)
        write_pgm(out_dir / f"frame_{k:03d}.pgm", strip)


def _load_masks(path: str) -> MaskSet:
    """Masks come either as a foreground VDT1 file, a directory holding
    foreground.vdt, or a directory of per-frame PGM files."""
    p = Path(path)
    if p.is_file():
        if p.suffix == ".pgm":
            return MaskSet(import_pgm_mask(p)[None])
        return MaskSet(read_array(p))
    vdt = p / "foreground.vdt"
    if vdt.exists():
        return MaskSet(read_array(vdt))
    pgms = sorted(p.glob("*.pgm"))
    if not pgms:
        raise FileNotFoundError(f"no mask files under {path}")
    return MaskSet(np.stack([import_pgm_mask(f) for f in pgms]))


def cmd_gen_data(args) -> int:
    raw = json.loads(Path(args.spec).read_text())
    count = int(raw.pop("count", 1))
    seed = int(raw.pop("seed", 0))
    spec = SyntheticSpec.from_dict(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed).child("gen-data")
    prompts = []
    for i in range(count):
        video, masks = gen_synthetic(spec, rng)
        write_array(out / f"video_{i:03d}.vdt", video)
        masks.save(out / f"masks_{i:03d}.vdt")
        prompts.append(describe(spec))
        if args.dump_frames:
            _dump_frames(video, out / f"frames_{i:03d}")
    (out / "prompts.txt").write_text("\n".join(prompts) + "\n")
    (out / "spec.json").write_text(json.dumps({**spec.to_dict(), "count": count, "seed": seed}, indent=1))
    print(f"wrote {count} clip(s) to {out}")
    return 0


def cmd_train(args) -> int:
    settings = _load_settings(args.config)
    data_dir = Path(args.data)
    videos = [read_array(f) for f in sorted(data_dir.glob("video_*.vdt"))]
    if not videos:
        raise FileNotFoundError(f"no video_*.vdt files under {data_dir}")
    prompts_file = data_dir / "prompts.txt"
    prompts = (
        prompts_file.read_text().splitlines() if prompts_file.exists() else None
    )
    f, c, h, w = videos[0].shape
    cfg = DenoiserConfig(frames=f, channels=c, height=h, width=w, seed=settings.seed)
    sched = settings.make_noise_schedule()
    model, losses = train_toy(
        [torch.from_numpy(v) for v in videos],
        args.steps,
        sched,
        Rng(settings.seed).child("train"),
        cfg=cfg,
        prompts=prompts,
    )
    out = Path(args.out)
    save_weights(model, out)
    (out / "schedule.json").write_text(json.dumps(settings.to_dict(), indent=1))
    with open(out / "train_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(enumerate(losses))
    tail = sum(losses[-50:]) / max(1, len(losses[-50:])) if losses else float("nan")
    print(f"trained {args.steps} steps; smoothed final loss {tail:.4f}")
    return 0


def cmd_invert(args) -> int:
    model = load_weights(args.weights)
    stored = Path(args.weights) / "schedule.json"
    if args.config:
        settings = _load_settings(args.config)
    elif stored.exists():
        settings = config_mod.settings_from_dict(json.loads(stored.read_text()))
    else:
        settings = config_mod.Settings()
    sched = settings.make_noise_schedule()
    video = torch.from_numpy(read_array(args.video)).to(torch.float64)
    traj = run_ddim_inversion(video, args.prompt, sched, model)
    save_trajectory(traj, sched, model, args.out, schedule_params=settings.schedule)
    print(f"inverted {args.video} over {traj.num_steps} steps into {args.out}")
    return 0


def cmd_tune(args) -> int:
    settings = _load_settings(args.config)
    traj, sched, model = load_trajectory(args.traj)
    masks = _load_masks(settings.stdg["masks"]) if settings.stdg.get("masks") else None
    tune_cfg = settings.tune_config(masks=masks)
    log = GuidanceLog()
    bank, traces = optimize_null_text(traj, sched, model, tune_cfg, log=log)
    out = Path(args.out)
    save_bank(bank, out, settings=settings.to_dict())
    if masks is not None:
        masks.save(out / "masks.vdt")
    if log.rows:
        log.write_csv(out / "guidance.csv")
    with open(out / "loss_traces.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "iteration", "loss"])
        for j, trace in enumerate(traces):
            writer.writerows((j, k, loss) for k, loss in enumerate(trace))
    final = [trace[-1] for trace in traces]
    print(f"tuned {len(traces)} steps; mean final step loss {sum(final)/len(final):.3e}")
    return 0


def _bank_runtime(args):
    """Shared reconstruct/edit plumbing: trajectory, model, schedule, bank,
    and the settings the bank was tuned with."""
    traj, sched, model = load_trajectory(args.traj)
    bank, stored = load_bank(args.bank)
    settings = (
        config_mod.settings_from_dict(stored) if stored else config_mod.Settings()
    )
    masks = None
    bank_masks = Path(args.bank) / "masks.vdt"
    if bank_masks.exists():
        masks = MaskSet(read_array(bank_masks))
    return traj, sched, model, bank, settings, masks


def cmd_reconstruct(args) -> int:
    traj, sched, model, bank, settings, masks = _bank_runtime(args)
    cfg = settings.tune_config(masks=masks)
    log = GuidanceLog()
    video, _, deviations = reconstruct(traj, bank, sched, model, cfg, log=log)
    write_array(args.out, video)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "t", "deviation"])
            for j, ((t, _), dev) in enumerate(zip(sched.sampling_pairs(), deviations)):
                writer.writerow([j, t, dev])
    if log.rows:
        log.write_csv(Path(args.out).with_suffix(".guidance.csv"))
    if args.dump_frames:
        _dump_frames(video, Path(args.out).parent / "frames_reconstruction")
    m = compute_metrics(traj.latents[0], video)
    print(f"reconstruction psnr {m.psnr:.2f} dB; final deviation {deviations[-1]:.3e}")
    return 0


def cmd_edit(args) -> int:
    traj, sched, model, bank, settings, bank_masks = _bank_runtime(args)
    if args.config:
        settings = _load_settings(args.config)
    masks = _load_masks(args.masks) if args.masks else bank_masks
    session = EditSession(
        source_prompt=args.source_prompt,
        edit_prompt=args.edit_prompt,
        trajectory=traj,
        bank=bank,
        masks=masks,
        schedule=settings.control_schedule(traj.num_steps),
        stdg=settings.guidance_config(),
        omega=settings.omega,
        seed=settings.seed,
        reweight=settings.control["reweight"],
        enable_sa=settings.control["enable_sa"],
        enable_ca=settings.control["enable_ca"],
        stdg_on_edit_path=settings.stdg["edit_path"],
        renormalize_cross=settings.control["renormalize"],
    )
    log_recon, log_edit = GuidanceLog(), GuidanceLog()
    edited, recon, metrics = edit_video(
        session, model, sched, guidance_log_recon=log_recon, guidance_log_edit=log_edit
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "edited.vdt", edited)
    write_array(out / "reconstruction.vdt", recon)
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=1))
    if log_recon.rows:
        log_recon.write_csv(out / "guidance_reconstruction.csv")
    if log_edit.rows:
        log_edit.write_csv(out / "guidance_editing.csv")
    if args.dump_frames:
        _dump_frames(edited, out / "frames_edited")
        _dump_frames(recon, out / "frames_reconstruction")
    shown = metrics.masked_psnr if metrics.masked_psnr is not None else metrics.psnr
    print(f"edited; preserved-region psnr {shown:.2f} dB -> {out}")
    return 0


def cmd_metrics(args) -> int:
    a = torch.from_numpy(read_array(args.a)).to(torch.float64)
    b = torch.from_numpy(read_array(args.b)).to(torch.float64)
    mask = None
    if args.mask:
        mask = torch.from_numpy(read_array(args.mask)).to(torch.float64)
    result = compute_metrics(a, b, mask=mask)
    print(json.dumps(result.to_dict(), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pivotedit",
        description="Desk-scale video editing via inversion, null-embedding "
        "tuning, feature guidance, and attention control.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic clips with exact masks")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-frames", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit the toy denoiser on a clip directory")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("invert", help="capture the inversion trajectory of a clip")
    p.add_argument("--video", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("tune", help="optimize per-step null embeddings")
    p.add_argument("--traj", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("reconstruct", help="resample the clip with tuned embeddings")
    p.add_argument("--traj", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--dump-frames", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("edit", help="dual-path prompt edit")
    p.add_argument("--traj", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--source-prompt", required=True)
    p.add_argument("--edit-prompt", required=True)
    p.add_argument("--masks")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-frames", action="store_true")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("metrics", help="PSNR / masked PSNR between two arrays")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mask")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
