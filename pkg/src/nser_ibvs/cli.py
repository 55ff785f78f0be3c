"""Command-line entry point: ``nser-ibvs <teacher|distill|student|bench|label> ...``.

Every subcommand writes only below ``--out`` and leaves a ``manifest.json``
there. Exit codes: 0 success, 2 configuration or input error, 3 campaign
failure, 4 weights incompatible with the configured architecture.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from . import evalkit as E
from . import perception as P
from . import simkit as S
from .config import Config, config_from_dict, load_config
from .errors import ConfigError, DegenerateHint, EmptyDataset, EmptyMask, WeightsMismatch

log = logging.getLogger("nser_ibvs")

EXIT_OK, EXIT_CONFIG, EXIT_CAMPAIGN, EXIT_WEIGHTS = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers


def _parse_value(text: str):
    return yaml.safe_load(text)


def resolve_config(path, overrides) -> Config:
    """Config file plus ``section.key=value`` overrides (overrides win)."""
    cfg = load_config(path)
    if not overrides:
        return cfg
    data = cfg.to_dict()
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        data.setdefault(section, {})[name] = _parse_value(value)
    return config_from_dict(data)


def write_manifest(out: Path, command: str, args, cfg: Config, extra: dict | None = None) -> dict:
    manifest = {
        "command": command,
        "config_path": str(args.config) if args.config else None,
        "config_hash": cfg.content_hash(),
        "overrides": list(args.set or []),
        "seed": args.seed,
        "out": str(out),
        "version": __version__,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _poses(args) -> list:
    if not args.pose:
        return list(S.POSE_ORDER)
    poses = [p for chunk in args.pose for p in chunk.split(",") if p]
    bad = [p for p in poses if p not in S.POSE_ORDER]
    if bad:
        raise ConfigError(f"unknown pose(s) {bad}; choose from {list(S.POSE_ORDER)}")
    return [p for p in S.POSE_ORDER if p in poses]


def _write_campaign(out: Path, cfg: Config, logs: list) -> E.MetricReport:
    logs_dir = out / "logs"
    for lg in logs:
        lg.save(logs_dir)
    scene = S.Scene.from_config(cfg)
    desired = S.capture_reference(S.goal_pose(scene, cfg.world.altitude), scene)
    report = E.build_report(logs, desired, S.POSE_ORDER)
    (out / "report.csv").write_text(report.to_csv())
    corners = scene.car.world_corners(scene.car_pose)
    (out / "trajectories.svg").write_text(E.trajectory_svg(logs, corners))
    outcomes = {}
    for lg in logs:
        outcomes[lg.outcome] = outcomes.get(lg.outcome, 0) + 1
    summary = {"episodes": len(logs), "outcomes": dict(sorted(outcomes.items()))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return report


def _check_campaign(logs: list) -> None:
    failed = [lg for lg in logs if lg.outcome == "error"]
    if failed:
        first = failed[0]
        raise CliError(EXIT_CAMPAIGN, f"{len(failed)} episode(s) failed, e.g. {first.pose_label} run {first.run_index}: {first.message}")


def load_logs(directory) -> list:
    d = Path(directory)
    if (d / "logs").is_dir():
        d = d / "logs"
    paths = sorted(d.glob("*.csv"))
    if not paths:
        raise CliError(EXIT_CONFIG, f"no episode logs in {directory}")
    logs = [S.EpisodeLog.load(p) for p in paths]
    order = {p: i for i, p in enumerate(S.POSE_ORDER)}
    return sorted(logs, key=lambda lg: (order.get(lg.pose_label, len(order)), lg.pose_label, lg.run_index))


def _load_student(path, cfg: Config):
    from .student.net import StudentNet, arch_from_config

    try:
        return StudentNet.load(path, arch=arch_from_config(cfg))
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read weights: {exc}") from exc


# --------------------------------------------------------------------------
# subcommands


def cmd_teacher(args) -> int:
    cfg = resolve_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logs = S.run_campaign(cfg, S.make_teacher, runs_per_pose=args.runs, seed=args.seed, poses=_poses(args))
    _write_campaign(out, cfg, logs)
    write_manifest(out, "teacher", args, cfg, {"runs": args.runs, "poses": _poses(args)})
    _check_campaign(logs)
    return EXIT_OK


def cmd_student(args) -> int:
    cfg = resolve_config(args.config, args.set)
    out = Path(args.out)
    _load_student(args.weights, cfg)  # validates before any episode runs
    out.mkdir(parents=True, exist_ok=True)
    logs = S.run_campaign(cfg, S.student_factory(str(args.weights)), runs_per_pose=args.runs, seed=args.seed, poses=_poses(args))
    _write_campaign(out, cfg, logs)
    write_manifest(out, "student", args, cfg, {"runs": args.runs, "poses": _poses(args), "weights": str(args.weights)})
    _check_campaign(logs)
    return EXIT_OK


def cmd_distill(args) -> int:
    from .student.data import distill
    from .student.net import StudentNet, arch_from_config
    from .student.train import TrainConfig, train

    cfg = resolve_config(args.config, args.set)
    logs = load_logs(args.logs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = distill(logs, cfg)
    ds.save(out / "dataset")
    arch = arch_from_config(cfg)
    net = _load_student(args.init_weights, cfg) if args.init_weights else StudentNet(arch, seed=args.seed)
    try:
        net, hist = train(ds, TrainConfig.from_config(cfg, args.seed), net=net)
    except EmptyDataset as exc:
        raise CliError(EXIT_CAMPAIGN, str(exc)) from exc
    net.save(out / "student.nserw")
    h = hist.to_dict()
    seconds = h.pop("seconds")
    (out / "history.json").write_text(json.dumps(h, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps({"train_seconds": seconds}, indent=2) + "\n")
    write_manifest(
        out,
        "distill",
        args,
        cfg,
        {"logs": str(args.logs), "episodes": len(logs), "samples": len(ds), "init_weights": str(args.init_weights) if args.init_weights else None},
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    from .student.net import StudentNet, arch_from_config

    cfg = resolve_config(args.config, args.set)
    net = _load_student(args.weights, cfg) if args.weights else StudentNet(arch_from_config(cfg), seed=args.seed)
    if args.trials < 1 or args.frames < 1:
        raise ConfigError("--trials and --frames must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = E.bench_frames(cfg, args.frames, args.seed)
    evaluators = {"teacher": E.teacher_evaluator(cfg), "student": E.student_evaluator(cfg, net)}
    report = E.timing_benchmark(evaluators, frames, trials=args.trials, warmup=args.warmup)
    (out / "timing.csv").write_text(report.to_csv())
    write_manifest(out, "bench", args, cfg, {"trials": args.trials, "frames": args.frames, "warmup": args.warmup, "weights": str(args.weights) if args.weights else None})
    for r in report.rows:
        print(f"{r.evaluator:8s} avg {r.avg_ms:8.3f} ms  median {r.median_ms:8.3f}  fps {r.fps:9.1f}")
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = resolve_config(args.config, args.set)
    try:
        mask = P.read_pgm(args.mask)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot read mask: {exc}") from exc
    u, v = args.click
    try:
        c = P.centroid(mask)
        split = P.split_mask(mask, c, P.ImagePoint(float(u), float(v)))
    except (EmptyMask, DegenerateHint) as exc:
        raise CliError(EXIT_CONFIG, f"{type(exc).__name__}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    P.write_pgm(out / "front.pgm", split.front)
    P.write_pgm(out / "back.pgm", split.back)
    write_manifest(out, "label", args, cfg, {"mask": str(args.mask), "image": str(args.image) if args.image else None, "click": [u, v]})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML config file (defaults built in)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value; repeatable")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, required=True, help="output directory; nothing is written elsewhere")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nser-ibvs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def campaign_flags(p):
        p.add_argument("--runs", type=int, default=1, help="runs per start pose")
        p.add_argument("--pose", action="append", help="restrict to pose(s); repeatable or comma separated")

    p = sub.add_parser("teacher", parents=[common], help="run a teacher campaign")
    campaign_flags(p)
    p.set_defaults(func=cmd_teacher)

    p = sub.add_parser("distill", parents=[common], help="build a dataset from teacher logs and train a student")
    p.add_argument("logs", type=Path, help="teacher output directory (or its logs/ folder)")
    p.add_argument("--init-weights", type=Path, default=None, help="start from an existing checkpoint")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("student", parents=[common], help="run a student campaign")
    campaign_flags(p)
    p.add_argument("--weights", type=Path, required=True)
    p.set_defaults(func=cmd_student)

    p = sub.add_parser("bench", parents=[common], help="time the teacher pipeline against the student forward pass")
    p.add_argument("--weights", type=Path, default=None, help="student weights (random init when omitted)")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("label", parents=[common], help="split a car mask into front/back given a front click")
    p.add_argument("mask", type=Path, help="binary mask as P5 PGM")
    p.add_argument("--image", type=Path, default=None, help="companion image (recorded, not read)")
    p.add_argument("--click", type=float, nargs=2, metavar=("U", "V"), required=True, help="a pixel on the front part")
    p.set_defaults(func=cmd_label)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "runs", 1) is not None and getattr(args, "runs", 1) < 1:
        print("error: --runs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WeightsMismatch as exc:
        print(f"weights error: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS


if __name__ == "__main__":
    sys.exit(main())
