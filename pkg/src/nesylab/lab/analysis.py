"""Ranking, aggregation, bias detection and the CSV contracts."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..data import CONFIG_NAMES
from .training import Trajectory

WORLD_NAMES = tuple(f"w{i}" for i in range(4))
SATISFYING = (0, 1, 2)
VIOLATING = 3
Z95 = 1.96


def rank_ds_outputs(trajectory: Trajectory) -> tuple[int, int, int]:
    """Order of the three satisfying outputs by total probability over the run.

    Totals run over all records and the satisfying partitions; ties keep index order.
    """
    if trajectory.loss_kind and trajectory.loss_kind != "disjunctive":
        raise ValueError(f"ranking applies to disjunctive runs, not {trajectory.loss_kind!r}")
    totals = trajectory.probs[:, list(SATISFYING), :][:, :, list(SATISFYING)].sum(axis=(0, 1))
    return rank_by_totals(totals)


def rank_by_totals(totals: Sequence[float]) -> tuple[int, int, int]:
    return tuple(sorted(range(len(totals)), key=lambda i: (-totals[i], i)))


def apply_ranking(trajectory: Trajectory) -> Trajectory:
    """Copy of a disjunctive trajectory with outputs 0..2 reordered by rank."""
    order = list(rank_ds_outputs(trajectory)) + [VIOLATING]
    return Trajectory(
        trajectory.steps, trajectory.probs[:, :, order], trajectory.seed, trajectory.loss_kind,
        trajectory.digit_accuracy, trajectory.final_loss,
    )


@dataclass
class AggregateTrajectory:
    steps: np.ndarray
    mean: np.ndarray  # (T, partition, world)
    ci95: np.ndarray
    n_runs: int

    @property
    def probs(self) -> np.ndarray:
        return self.mean


def aggregate_runs(trajectories: Sequence[Trajectory]) -> AggregateTrajectory:
    """Pointwise mean and normal-approximation 95% half-width ``1.96 s / sqrt(R)``."""
    if not trajectories:
        raise ValueError("no trajectories to aggregate")
    first = trajectories[0]
    for t in trajectories[1:]:
        if t.probs.shape != first.probs.shape or not np.array_equal(t.steps, first.steps):
            raise ValueError("trajectories differ in length or evaluation steps")
    stacked = np.stack([t.probs for t in trajectories])
    r = len(trajectories)
    mean = stacked.mean(axis=0)
    if r == 1:
        ci = np.zeros_like(mean)
    else:
        ci = Z95 * stacked.std(axis=0, ddof=1) / math.sqrt(r)
    return AggregateTrajectory(first.steps.copy(), mean, ci, r)


def aggregate_experiment(trajectories: Sequence[Trajectory]) -> AggregateTrajectory:
    """Aggregate, ranking disjunctive outputs per run first."""
    if trajectories and trajectories[0].loss_kind == "disjunctive":
        trajectories = [apply_ranking(t) for t in trajectories]
    return aggregate_runs(trajectories)


@dataclass
class BiasReport:
    collapsed: dict[tuple[int, int], int] = field(default_factory=dict)  # (partition, world) -> C
    tail_means: Optional[np.ndarray] = None
    biased: bool = False
    world: Optional[int] = None

    def lines(self) -> list[str]:
        out = []
        for part in range(4):
            cells = []
            for w in range(4):
                mark = self.collapsed.get((part, w))
                tag = f"->{mark}" if mark is not None else ""
                cells.append(f"{WORLD_NAMES[w]}={self.tail_means[part, w]:.4f}{tag}")
            out.append(f"{CONFIG_NAMES[part]}: " + " ".join(cells))
        verdict = f"BIASED towards {WORLD_NAMES[self.world]} ({CONFIG_NAMES[self.world]})" if self.biased else "not biased"
        out.append(f"deterministic bias: {verdict}")
        return out


def detect_deterministic_bias(trajectory, tail_fraction: float = 0.1, tol: float = 0.05) -> BiasReport:
    """Flag cells whose tail mean sits within ``tol`` of 0 or 1.

    The run counts as biased when one world is collapsed to 1 on every partition.
    """
    probs = np.asarray(trajectory.probs)
    if len(probs) == 0:
        raise ValueError("empty trajectory")
    tail = max(1, math.ceil(tail_fraction * len(probs)))
    tail_means = probs[-tail:].mean(axis=0)
    report = BiasReport(tail_means=tail_means)
    for part in range(tail_means.shape[0]):
        for w in range(tail_means.shape[1]):
            for c in (0, 1):
                if abs(tail_means[part, w] - c) <= tol:
                    report.collapsed[(part, w)] = c
    for w in range(tail_means.shape[1]):
        if all(report.collapsed.get((part, w)) == 1 for part in range(tail_means.shape[0])):
            report.biased = True
            report.world = w
            break
    return report


# ---------------------------------------------------------------------------
# CSV files
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def trajectory_csv(trajectories: Sequence[Trajectory]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "step", "partition", "world", "prob"])
    for r, t in enumerate(trajectories):
        for i, step in enumerate(t.steps):
            for part in range(4):
                for world in range(4):
                    w.writerow([r, int(step), CONFIG_NAMES[part], WORLD_NAMES[world], _fmt(t.probs[i, part, world])])
    return buf.getvalue()


def aggregate_csv(agg: AggregateTrajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "partition", "world", "mean", "ci95"])
    for i, step in enumerate(agg.steps):
        for part in range(4):
            for world in range(4):
                w.writerow([int(step), CONFIG_NAMES[part], WORLD_NAMES[world],
                            _fmt(agg.mean[i, part, world]), _fmt(agg.ci95[i, part, world])])
    return buf.getvalue()


def runs_csv(trajectories: Sequence[Trajectory]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "seed", "loss_kind", "digit_accuracy", "final_loss"])
    for r, t in enumerate(trajectories):
        acc = "" if t.digit_accuracy is None else _fmt(t.digit_accuracy)
        loss = "" if t.final_loss is None else _fmt(t.final_loss)
        w.writerow([r, t.seed, t.loss_kind, acc, loss])
    return buf.getvalue()


def read_trajectory_csv(path: str | Path, runs_path: str | Path | None = None) -> list[Trajectory]:
    """Inverse of :func:`trajectory_csv`; run metadata comes from ``runs.csv`` when given."""
    part_index = {name: i for i, name in enumerate(CONFIG_NAMES)}
    world_index = {name: i for i, name in enumerate(WORLD_NAMES)}
    cells: dict[int, dict[int, np.ndarray]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["run", "step", "partition", "world", "prob"]:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            run, step = int(row["run"]), int(row["step"])
            grid = cells.setdefault(run, {}).setdefault(step, np.full((4, 4), np.nan))
            grid[part_index[row["partition"]], world_index[row["world"]]] = float(row["prob"])
    meta: dict[int, dict] = {}
    if runs_path is not None and Path(runs_path).exists():
        with open(runs_path, newline="") as fh:
            for row in csv.DictReader(fh):
                meta[int(row["run"])] = row
    out = []
    for run in sorted(cells):
        steps = sorted(cells[run])
        probs = np.stack([cells[run][s] for s in steps])
        if np.isnan(probs).any():
            raise ValueError(f"{path}: run {run} has missing cells")
        m = meta.get(run, {})
        out.append(Trajectory(
            np.asarray(steps, dtype=np.int64), probs,
            seed=int(m.get("seed", 0) or 0),
            loss_kind=m.get("loss_kind", ""),
            digit_accuracy=float(m["digit_accuracy"]) if m.get("digit_accuracy") else None,
            final_loss=float(m["final_loss"]) if m.get("final_loss") else None,
        ))
    return out
