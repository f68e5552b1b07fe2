"""Command-line surface tying the pipeline together.

Subcommands: gen-data, train-teacher, distill, sample, eval, schedule,
cost. Every command resolves a RunConfig (preset + optional config file
+ flags), writes its artifacts into the run directory, and leaves a
config copy and manifest behind. All randomness derives from the single
root seed, so rerunning a command with the same config reproduces its
outputs byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import cascade, config as cfgmod, data, diffusion, distill, evalsuite, net as nets
from .grid import SeededRng, write_pgm
from .schedule import build_partition, inference_schedule, sigma_to_logsnr


class PrerequisiteError(RuntimeError):
    pass


def _resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.preset(args.preset)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise PrerequisiteError(f"config file not found: {path}")
        cfg = cfgmod.apply_overrides(cfg, cfgmod.parse_overrides(path.read_text()))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    cfgmod.validate_config(cfg)
    return cfg


def _root_rng(cfg: cfgmod.RunConfig) -> SeededRng:
    return SeededRng(cfg.seed)


def _dataset_path(cfg: cfgmod.RunConfig) -> Path:
    return Path(cfg.out_dir) / "dataset.bin"


def _teacher_path(cfg: cfgmod.RunConfig) -> Path:
    return Path(cfg.out_dir) / "teacher.ckpt"


def _generator_path(cfg: cfgmod.RunConfig) -> Path:
    return Path(cfg.out_dir) / "distill" / "generator-final.ckpt"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"missing prerequisite: {path} (run `crossres {hint}` first)")
    return path


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    run = cfgmod.RunDirectory(cfg.out_dir, cfg)
    data.gen_dataset(cfg.data, _root_rng(cfg).derive("dataset"), run.file("dataset.bin"))
    run.record_time("gen-data")
    run.finalize()
    print(f"dataset written to {run.file('dataset.bin')}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _resolve_config(args)
    ds = data.load_dataset(_require(_dataset_path(cfg), "gen-data"))
    run = cfgmod.RunDirectory(cfg.out_dir, cfg)
    model = diffusion.train_teacher(ds, cfg.teacher, _root_rng(cfg).derive("teacher"))
    nets.save_checkpoint(run.file("teacher.ckpt"), model.net)
    with open(run.file("teacher-log.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["phase", "step", "loss"])
        for row in model.log:
            writer.writerow([row["phase"], row["step"], repr(row["loss"])])
    run.record_time("train-teacher")
    run.finalize()
    print(f"teacher checkpoint at {run.file('teacher.ckpt')}")
    return 0


def cmd_distill(args) -> int:
    cfg = _resolve_config(args)
    teacher_net = nets.load_checkpoint(_require(_teacher_path(cfg), "train-teacher"))
    teacher = diffusion.TeacherModel(net=teacher_net, trained_resolutions=list(cfg.distill.resolutions))
    run = cfgmod.RunDirectory(cfg.out_dir, cfg)
    ckpt_dir = run.file("distill")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    arm = "rm-disabled" if args.rm_disabled else "final"
    dcfg = cfg.distill if not args.rm_disabled else distill.rm_disabled_config(cfg.distill)
    state, _ = distill.train(
        teacher, dcfg, _root_rng(cfg).derive("distill"),
        n_classes=cfg.data.n_classes,
        log_path=run.file(f"distill-log-{arm}.csv"),
    )
    nets.save_checkpoint(ckpt_dir / f"generator-{arm}.ckpt", state.generator)
    nets.save_checkpoint(ckpt_dir / f"fake-{arm}.ckpt", state.fake)
    run.record_time("distill")
    run.finalize()
    print(f"distilled checkpoints in {ckpt_dir}")
    return 0


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else _generator_path(cfg)
    net = nets.load_checkpoint(_require(ckpt, "distill"))
    out_dir = Path(args.out or cfg.out_dir) / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(args.seed if args.seed is not None else cfg.seed)
    stats_rows = []
    if args.many_step:
        res = cfg.distill.resolutions[-1]
        for i in range(args.count):
            class_id = args.class_id if args.class_id is not None else i % cfg.data.n_classes
            img = diffusion.euler_sample(net, class_id, res, args.many_step, rng.derive(f"euler:{i}"))
            write_pgm(out_dir / f"sample-{i:03d}.pgm", img, lo=-0.25, hi=1.25)
            stats_rows.append((i, class_id, float(img.mean()), float(img.var())))
    else:
        partition = cfg.distill.partition()
        for i in range(args.count):
            class_id = args.class_id if args.class_id is not None else i % cfg.data.n_classes
            params = cascade.CascadeParams(
                partition=partition,
                n_steps=args.steps or cfg.distill.n_steps,
                alpha_inference=args.alpha if args.alpha is not None else cfg.distill.alpha_inference,
                class_id=class_id,
                seed=rng.derive(f"cascade:{i}").seed,
            )
            img, trace = cascade.infer(net, params)
            write_pgm(out_dir / f"sample-{i:03d}.pgm", img, lo=-0.25, hi=1.25)
            trace.write_csv(out_dir / f"trace-{i:03d}.csv")
            stats_rows.append((i, class_id, float(img.mean()), float(img.var())))
    with open(out_dir / "stats.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "class_id", "mean", "variance"])
        for row in stats_rows:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
    print(f"{args.count} samples in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    teacher = nets.load_checkpoint(_require(_teacher_path(cfg), "train-teacher"))
    student = nets.load_checkpoint(_require(_generator_path(cfg), "distill"))
    rm_path = Path(cfg.out_dir) / "distill" / "generator-rm-disabled.ckpt"
    rm_net = nets.load_checkpoint(rm_path) if rm_path.exists() else None
    ds_path = _dataset_path(cfg)
    ds = data.load_dataset(ds_path) if ds_path.exists() else None
    report = evalsuite.evaluate_run(
        student=student,
        teacher=teacher,
        naive=teacher,
        rm_disabled=rm_net,
        dataset=ds,
        partition=cfg.distill.partition(),
        n_steps=cfg.distill.n_steps,
        alpha_inference=cfg.distill.alpha_inference,
        cfg=cfg.eval,
        rng=_root_rng(cfg).derive("eval"),
        out_dir=Path(cfg.out_dir) / "eval",
    )
    for method in ("student-cascade", "naive-cascade"):
        print(f"{method}: mmd_to_reference = {report.value(method, 'mmd_to_reference'):.6f}")
    print(f"null width = {report.null_width:.6f}")
    print(f"report at {Path(cfg.out_dir) / 'eval' / 'report.csv'}")
    return 0


def _schedule_partition(args, cfg: cfgmod.RunConfig):
    d = cfg.distill
    thresholds = [float(v) for v in args.thresholds.split(",")] if args.thresholds else list(d.thresholds)
    resolutions = [int(v) for v in args.resolutions.split(",")] if args.resolutions else list(d.resolutions)
    flow_shift = args.flow_shift if args.flow_shift is not None else d.flow_shift
    t_max = args.t_max if args.t_max is not None else d.t_max
    return build_partition(thresholds, resolutions, flow_shift, t_max)


def cmd_schedule(args) -> int:
    cfg = _resolve_config(args)
    partition = _schedule_partition(args, cfg)
    n = args.steps or cfg.distill.n_steps
    rows = inference_schedule(n, partition)
    header = f"{'step':>4} {'stage':>5} {'res':>5} {'timestep':>9} {'sigma':>8} {'logsnr':>9}"
    print(header)
    for r in rows:
        logsnr = sigma_to_logsnr(r.shifted_sigma) if 0 < r.shifted_sigma < 1 else float("-inf")
        print(
            f"{r.step:>4} {r.stage:>5} {r.resolution:>5} {r.shifted_t:>9.1f} "
            f"{r.shifted_sigma:>8.4f} {logsnr:>9.3f}"
        )
    print("timesteps:", "[" + ", ".join(str(round(r.shifted_t)) for r in rows) + "]")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["step", "stage", "resolution", "teacher_t", "teacher_sigma", "shifted_t", "shifted_sigma"]
            )
            for r in rows:
                writer.writerow(
                    [r.step, r.stage, r.resolution, repr(r.teacher_t), repr(r.teacher_sigma),
                     repr(r.shifted_t), repr(r.shifted_sigma)]
                )
        print(f"csv written to {args.csv}")
    return 0


COST_CONFIGS = [
    # (label, base steps, base res, cfg multiplier, method stages)
    ("sdxl-like", 40, 1024, 2.0, [(2, 512), (2, 1024)]),
    ("sd35-like", 40, 1024, 2.0, [(2, 512), (2, 1024)]),
    ("wan-like", 50, (1280, 720), 2.0, [(3, (832, 480)), (3, (1280, 720))]),
]


def cmd_cost(args) -> int:
    print(f"{'config':<12} {'gamma=1':>9} {'gamma=2':>9}")
    for label, steps, res, cfg_mult, method in COST_CONFIGS:
        g1 = evalsuite.cost_model_speedup((steps, res, cfg_mult), method, gamma=1.0)
        g2 = evalsuite.cost_model_speedup((steps, res, cfg_mult), method, gamma=2.0)
        print(f"{label:<12} {g1:>8.1f}x {g2:>8.1f}x")
    print("per-step cost = pixels^gamma; gamma=1 token-linear, gamma=2 attention-quadratic")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossres",
        description="Desk-scale cross-resolution few-step diffusion distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--preset", default="toy-default", choices=sorted(cfgmod.PRESETS))
        p.add_argument("--config", help="key-path = value override file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="run directory")

    p = sub.add_parser("gen-data", help="generate the two-tier shape dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="curriculum-train the multi-step teacher")
    common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill the teacher into a few-step cascaded generator")
    common(p)
    p.add_argument("--rm-disabled", action="store_true",
                   help="ablation arm: single-resolution matching only")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sample", help="sample from a checkpoint (cascade or many-step)")
    common(p)
    p.add_argument("--checkpoint", help="net checkpoint (default: distilled generator)")
    p.add_argument("--class-id", type=int, default=None)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--steps", type=int, default=None, help="cascade steps (default from config)")
    p.add_argument("--alpha", type=float, default=None, help="transition noise-mix weight")
    p.add_argument("--many-step", type=int, default=None,
                   help="plain Euler sampling with this many steps instead of the cascade")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score the distilled cascade against baselines")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", help="print a timestep/resolution schedule table")
    common(p)
    p.add_argument("--thresholds", help="comma-separated logSNR thresholds")
    p.add_argument("--resolutions", help="comma-separated per-stage resolutions")
    p.add_argument("--flow-shift", type=float, default=None)
    p.add_argument("--t-max", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--csv", help="also write the table to this CSV path")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("cost", help="analytic speedup table of the cascade schedules")
    p.set_defaults(func=cmd_cost)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PrerequisiteError, cfgmod.ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RuntimeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
