"""Command line entry point: ``mvb <command> ...``.

Models are read from checkpoints with a ``run.cfg`` beside them (written by
``mvb train``); ``--config`` overrides that lookup. Latent clips are
``.mvbclip`` files; prompts are words (``"red circle translate right"``) or
integer token ids.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import ConfigError, FormatError, InputError, ShapeError
from .config import RunConfig, load_config
from .data import gen_synthetic_dataset, parse_prompt
from .formats import load_checkpoint, load_clip, save_checkpoint, save_clip
from .unet import VARIANTS, MvbUNet, gradcheck_variant

log = logging.getLogger("mvb")


def _config_for(ckpt: str, config: str | None) -> RunConfig:
    path = Path(config) if config else Path(ckpt).with_name("run.cfg")
    if not path.exists():
        raise FileNotFoundError(f"no config at {path}; pass --config")
    return load_config(path)


def _load_model(args) -> tuple[MvbUNet, RunConfig]:
    cfg = _config_for(args.ckpt, args.config)
    model = MvbUNet(**cfg.model_kwargs())
    load_checkpoint(model, args.ckpt)
    model.eval()
    return model, cfg


def _frame(path: str | None) -> torch.Tensor | None:
    """First frame of a clip file, or None."""
    return None if path is None else load_clip(path)[0]


def _write(frames: torch.Tensor, out: str, preview: str | None) -> None:
    save_clip(frames, out)
    if preview:
        from .plotting import plot_clip_grid
        plot_clip_grid({Path(out).stem: frames.numpy()}, preview)
    print(out)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gendata(args) -> int:
    from .train import save_dataset
    clips = gen_synthetic_dataset(args.count, args.frames, args.size, args.size, args.seed)
    save_dataset(clips, args.out)
    print(f"{len(clips)} clips -> {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import run_train
    cfg = load_config(args.config)
    if args.out_dir:
        cfg = cfg.replace(out_dir=args.out_dir)
    result = run_train(cfg)
    for phase in (1, 2, 3):
        lp = result.phase_losses(phase)
        if len(lp):
            print(f"phase {phase}: first {lp[0]:.4f} last50 {lp[-50:].mean():.4f}")
    if args.plot and cfg.out_dir:
        from .plotting import plot_losses
        plot_losses(result.losses, Path(cfg.out_dir) / "loss.png")
    return 0


def cmd_train_control(args) -> int:
    from .control import ControlBranch, train_control_branch
    from .diffusion import make_schedule
    from .train import dataset_for
    model, cfg = _load_model(args)
    frames, captions = dataset_for(cfg)
    torch.manual_seed(cfg.seed)
    branch = ControlBranch(model)
    losses = train_control_branch(model, branch, frames, captions, make_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
                                  steps=args.steps, lr=cfg.lr, seed=cfg.seed)
    save_checkpoint(branch, args.out)
    print(f"control branch loss {np.mean(losses[:10]):.4f} -> {np.mean(losses[-50:]):.4f}; {args.out}")
    return 0


def cmd_sample(args) -> int:
    from .apps import sample_video
    model, cfg = _load_model(args)
    ids = parse_prompt(args.prompt, cfg.text_len)
    control = branch = None
    if args.control:
        from .control import ControlBranch
        if not args.branch:
            raise ConfigError("--control needs --branch")
        control = load_clip(args.control)
        branch = ControlBranch(model)
        load_checkpoint(branch, args.branch)
    out = sample_video(model, ids, _frame(args.image), args.frames, args.steps, args.seed, args.guidance,
                       control=control, branch=branch)
    _write(out, args.out, args.preview)
    return 0


def cmd_animate(args) -> int:
    from .apps import AnimationRequest, animate_image
    model, cfg = _load_model(args)
    req = AnimationRequest(_frame(args.first_frame), parse_prompt(args.prompt, cfg.text_len), frames=args.frames,
                           steps=args.steps, seed=args.seed, guidance_scale=args.guidance)
    _write(animate_image(model, req), args.out, args.preview)
    return 0


def cmd_edit(args) -> int:
    from .apps import EditRequest, edit_video
    model, cfg = _load_model(args)
    req = EditRequest(load_clip(args.source), args.strength, parse_prompt(args.prompt, cfg.text_len),
                      _frame(args.image), steps=args.steps, seed=args.seed, guidance_scale=args.guidance)
    _write(edit_video(model, req), args.out, args.preview)
    return 0


def cmd_ablate(args) -> int:
    from . import ablation, plotting
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {VARIANTS}")
    s = ablation.BenchSettings(
        num_clips=args.clips, image_steps=args.image_steps, image_cond_steps=args.video_steps,
        video_steps=args.video_steps, branch_steps=args.branch_steps, test_clips=args.test_clips,
        sample_steps=args.sample_steps, seeds=args.seeds, seed=args.seed,
    )
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    stem = report.with_suffix("")
    stage = ablation.train_image_stage(s)
    rows = []
    if args.study in ("control", "all"):
        res = ablation.control_benchmark(variants, s, stage, baseline=True)
        for v, k, a, base, drift in res.rows():
            rows.append(("control", v, k, "adherence", a))
            rows.append(("control", v, k, "adherence_no_control", base))
        for v in variants:
            rows.append(("control", v, "", "feature_drift", res.drift[v]))
        means = {v: res.mean(v) for v in variants}
        spreads = {v: float(np.std(res.adherence[v])) for v in variants}
        plotting.plot_adherence(means, spreads, f"{stem}_adherence.png",
                                {v: float(np.mean(res.baseline[v])) for v in variants})
        clips = {"control map": res.signal[0].expand(-1, 4, -1, -1).numpy() * 2 - 1}
        clips.update({v: res.samples[v][0].numpy() for v in variants})
        plotting.plot_clip_grid(clips, f"{stem}_control_samples.png")
    if args.study in ("conditioning", "all"):
        res = ablation.conditioning_ablation(s, stage)
        for arm, k, f, a in res.rows():
            rows.append(("conditioning", arm, k, "first_frame_mse", f))
            rows.append(("conditioning", arm, k, "avg_frame_mse", a))
        for name, n in ablation.conditioning_votes(res).items():
            rows.append(("conditioning", "checks", "", name, n))
        plotting.plot_conditioning({a: float(np.mean(v)) for a, v in res.first.items()},
                                   {a: float(np.mean(v)) for a, v in res.avg.items()}, f"{stem}_conditioning.png")
        plotting.plot_clip_grid({a: v[0].numpy() for a, v in res.samples.items()}, f"{stem}_conditioning_samples.png")
    with open(report, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("study", "arm", "seed", "metric", "value"))
        w.writerows(rows)
    print(report.read_text(encoding="utf-8"), end="")
    return 0


def cmd_gradcheck(args) -> int:
    err = gradcheck_variant(args.variant, masked=args.masked, max_coords=args.coords)
    ok = err < 1e-3
    print(f"{args.variant}\tmax_rel_err={err:.3e}\t{'ok' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------

def _add_model_args(p, out=True):
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--config", help="run config (default: run.cfg beside the checkpoint)")
    p.add_argument("--prompt", required=True, help="caption words or token ids")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--steps", type=int, default=20, help="DDIM steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guidance", type=float, default=1.0, help="classifier-free guidance scale")
    if out:
        p.add_argument("--out", required=True, help="output .mvbclip")
        p.add_argument("--preview", help="also render the frames to this PNG")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="write a synthetic clip dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="three-phase training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", help="override out_dir from the config")
    p.add_argument("--plot", action="store_true", help="write loss.png next to loss.tsv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-control", help="fit a control branch on single frames of a model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_control)

    p = sub.add_parser("sample", help="text (+ image) to video")
    _add_model_args(p)
    p.add_argument("--image", help="clip file whose first frame is the image condition")
    p.add_argument("--control", help="clip file of [N, 1, H, W] edge maps")
    p.add_argument("--branch", help="control branch checkpoint")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("animate", help="animate a first frame (9-channel model)")
    _add_model_args(p)
    p.add_argument("--first-frame", required=True, help="clip file; its frame 0 is animated")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("edit", help="re-generate a clip under new conditions")
    _add_model_args(p)
    p.add_argument("--source", required=True)
    p.add_argument("--strength", type=float, default=0.6)
    p.add_argument("--image", help="clip file whose first frame is the new image condition")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("ablate", help="block-variant control benchmark and conditioning ablation")
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--report", required=True, help="TSV report; PNG figures are written beside it")
    p.add_argument("--study", choices=("control", "conditioning", "all"), default="control")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=256, help="training clips")
    p.add_argument("--test-clips", type=int, default=8)
    p.add_argument("--image-steps", type=int, default=500)
    p.add_argument("--video-steps", type=int, default=300)
    p.add_argument("--branch-steps", type=int, default=300)
    p.add_argument("--sample-steps", type=int, default=20)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of a tiny model")
    p.add_argument("--variant", choices=VARIANTS, default="mvb")
    p.add_argument("--masked", action="store_true")
    p.add_argument("--coords", type=int, default=16, help="coordinates probed per parameter tensor")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, InputError, ShapeError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"mvb {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
