"""Command-line entry point: ``nesylab {wmc,train,check,report}``.

Exit codes: 0 success, 1 a check failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import data, logic, models
from .lab import analysis, checks
from .lab.training import RunConfig, run_experiment

DATA_DIR_ENV = "NESYLAB_DATA_DIR"
IMAGE_FILES = ("train-images-idx3-ubyte", "train-images.idx3-ubyte", "images-idx3-ubyte")
LABEL_FILES = ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte", "labels-idx1-ubyte")
SYNTHETIC_PER_DIGIT = 500

log = logging.getLogger("nesylab")


class UsageError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def config_text(config: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())


def _find(directory: Path, names) -> Path | None:
    for name in names:
        if (directory / name).exists():
            return directory / name
    return None


def load_digit_pools(args, seed: int):
    if args.synthetic:
        return data.synth_digits(SYNTHETIC_PER_DIGIT, seed)
    images, labels = args.images, args.labels
    if images is None or labels is None:
        directory = args.data_dir or os.environ.get(DATA_DIR_ENV)
        if directory is None:
            raise UsageError(f"train needs --images/--labels, --data-dir, ${DATA_DIR_ENV} or --synthetic")
        directory = Path(directory)
        images = images or _find(directory, IMAGE_FILES)
        labels = labels or _find(directory, LABEL_FILES)
        if images is None or labels is None:
            raise UsageError(f"no IDX image/label files found in {directory}")
    try:
        return data.digit_pools(*data.load_idx_arrays(images, labels))
    except (OSError, data.IdxFormatError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_wmc(args) -> int:
    try:
        formula = logic.parse(args.formula)
        probs = [float(p) for p in args.probs.split(",")] if args.probs.strip() else []
        value = logic.wmc(formula, probs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(format(value, ".12g"))
    return 0


_FLAG_KEYS = {
    "loss": "loss_kind", "lr": "lr", "batch_size": "batch_size", "epochs": "epochs", "runs": "runs",
    "eval_every": "eval_every", "seed": "seed", "binary_head": "binary_head",
}


def build_run_config(args) -> RunConfig:
    values: dict = read_config_file(args.config) if args.config else {}
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    if args.separate_encoders:
        values["shared_encoder"] = False
    if args.share_light_nets:
        values["share_light_nets"] = True
    try:
        return RunConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def cmd_train(args) -> int:
    config = build_run_config(args)
    zeros, ones = load_digit_pools(args, config.seed)
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    trained, trajectories = run_experiment(config, zeros, ones, jobs=args.jobs)

    for r, (model, traj) in enumerate(zip(trained, trajectories)):
        models.save_checkpoint(model, out / "checkpoints" / f"run{r:02d}.ckpt",
                               extra={"run": r, "run_seed": traj.seed, "loss_kind": config.loss_kind})
        if args.manifests:
            dataset = data.build_traffic_dataset(zeros, ones, traj.seed, config.n_train, config.n_test_per_config)
            (out / "manifests").mkdir(exist_ok=True)
            analysis.atomic_write(out / "manifests" / f"run{r:02d}.csv", data.manifest_csv(dataset))
    analysis.atomic_write(out / "config.txt", config_text(config))
    analysis.atomic_write(out / "trajectory.csv", analysis.trajectory_csv(trajectories))
    analysis.atomic_write(out / "runs.csv", analysis.runs_csv(trajectories))
    summary = write_report(out, trajectories)
    print(summary)
    return 0


def write_report(out: Path, trajectories) -> str:
    agg = analysis.aggregate_experiment(trajectories)
    analysis.atomic_write(out / "aggregate.csv", analysis.aggregate_csv(agg))
    lines = [f"loss: {trajectories[0].loss_kind or 'unknown'}  runs: {len(trajectories)}  updates: {int(agg.steps[-1])}"]
    lines.append("mean over runs, final record:")
    lines += ["  " + s for s in analysis.detect_deterministic_bias(agg).lines()]
    for r, t in enumerate(trajectories):
        report = analysis.detect_deterministic_bias(t)
        world = f" towards {analysis.WORLD_NAMES[report.world]}" if report.biased else ""
        acc = "" if t.digit_accuracy is None else f" digit_accuracy={t.digit_accuracy:.4f}"
        lines.append(f"run {r} seed {t.seed}: {'biased' if report.biased else 'not biased'}{world}{acc}")
    text = "\n".join(lines) + "\n"
    analysis.atomic_write(out / "report.txt", text)
    return text.rstrip("\n")


def cmd_report(args) -> int:
    directory = Path(args.dir)
    path = directory / "trajectory.csv"
    if not path.exists():
        raise UsageError(f"{path} not found")
    try:
        trajectories = analysis.read_trajectory_csv(path, directory / "runs.csv")
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    if args.loss:
        kind = RunConfig(loss_kind=args.loss).loss_kind
        for t in trajectories:
            t.loss_kind = kind
    if not trajectories:
        raise UsageError(f"{path} holds no runs")
    print(write_report(directory, trajectories))
    return 0


def cmd_check(args) -> int:
    names = list(checks.SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        runner, default_trials = checks.SUITES[name]
        report = runner(args.trials or default_trials, args.seed)
        print(report.text())
        ok = ok and report.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nesylab", description="Semantic loss vs disjunctive supervision laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("wmc", help="probability of a formula under independent Bernoulli variables")
    p.add_argument("--formula", required=True)
    p.add_argument("--probs", required=True, help="comma-separated, in first-occurrence variable order")
    p.set_defaults(func=cmd_wmc)

    p = sub.add_parser("train", help="run a traffic-light experiment")
    p.add_argument("--loss", choices=["semantic", "truncated", "truncated_semantic", "disjunctive"])
    p.add_argument("--config", help="key = value file with RunConfig fields")
    p.add_argument("--out", default="results")
    p.add_argument("--runs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--binary-head", choices=models.BINARY_HEADS)
    p.add_argument("--separate-encoders", action="store_true", help="joint net: one encoder per image")
    p.add_argument("--share-light-nets", action="store_true", help="semantic nets: one net for both lights")
    p.add_argument("--synthetic", action="store_true", help="use synthetic digits instead of MNIST")
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--data-dir", help=f"directory with MNIST IDX files (default ${DATA_DIR_ENV})")
    p.add_argument("--jobs", type=int, default=1, help="runs trained in parallel processes")
    p.add_argument("--manifests", action="store_true", help="also write per-run dataset manifests")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("check", help="run a verification suite")
    p.add_argument("--suite", required=True, choices=[*checks.SUITES, "all"])
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("report", help="recompute aggregates and bias reports from a train directory")
    p.add_argument("--dir", default="results")
    p.add_argument("--loss", choices=["semantic", "truncated", "truncated_semantic", "disjunctive"])
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nesylab: error: {exc}", file=sys.stderr)
        return 2


def run_cli(argv) -> int:
    """Like :func:`main` but turns argparse's ``SystemExit`` into a return code."""
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
