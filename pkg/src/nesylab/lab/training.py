"""Minibatch training with per-update evaluation on the four test partitions."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .. import models
from ..autodiff import AdamState, Tape, adam_step, backward
from ..data import TrafficDataset, build_traffic_dataset

log = logging.getLogger(__name__)

LOSS_KINDS = ("semantic", "truncated_semantic", "disjunctive")
LOSS_ALIASES = {"truncated": "truncated_semantic"}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class RunConfig:
    loss_kind: str = "semantic"
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 5
    runs: int = 20
    eval_every: int = 1
    seed: int = 0
    binary_head: str = "two-unit-normalized"
    shared_encoder: bool = True
    share_light_nets: bool = False
    n_train: int = 3200
    n_test_per_config: int = 50

    def __post_init__(self):
        self.loss_kind = LOSS_ALIASES.get(self.loss_kind, self.loss_kind)
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.binary_head not in models.BINARY_HEADS:
            raise ValueError(f"binary_head must be one of {models.BINARY_HEADS}, got {self.binary_head!r}")
        for name in ("batch_size", "runs", "eval_every", "n_train", "n_test_per_config"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and lr must be non-negative")

    @property
    def architecture(self) -> str:
        return "joint" if self.loss_kind == "disjunctive" else "light_pair"

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from string or typed values; unknown keys are errors."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, types[key], key)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(raw, type_name, key):
    if not isinstance(raw, str):
        return raw
    try:
        if type_name == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot read {raw!r} as {type_name}") from None
    return raw.strip()


@dataclass
class Trajectory:
    """Mean world probabilities per evaluation, shape ``(T, partition, world)``."""

    steps: np.ndarray
    probs: np.ndarray
    seed: int = 0
    loss_kind: str = ""
    digit_accuracy: Optional[float] = None
    final_loss: Optional[float] = None

    def __len__(self) -> int:
        return len(self.steps)


def make_model(config: RunConfig, seed: int):
    if config.architecture == "joint":
        return models.JointModel(seed, shared_encoder=config.shared_encoder)
    return models.LightPairModel(seed, binary_head=config.binary_head, share_light_nets=config.share_light_nets)


def batch_loss(config: RunConfig, model, spec: models.ClassSpec, x_r, x_g, y):
    q = model.world_probs(x_r, x_g)
    if config.loss_kind == "semantic":
        return models.semantic_loss_batch(spec, y, q)
    if config.loss_kind == "truncated_semantic":
        return models.truncated_semantic_loss_batch(spec, y, q)
    return models.disjunctive_loss_batch(q, models.TRAFFIC_YTILDE[np.asarray(y)])


def evaluate_partitions(model, dataset: TrafficDataset, chunk: int = 200) -> np.ndarray:
    """``(4, 4)`` array: mean world probability per test partition."""
    test = dataset.test
    q = np.concatenate([
        model.world_probs(test.x_r[i:i + chunk], test.x_g[i:i + chunk]).data
        for i in range(0, len(test), chunk)
    ])
    return np.stack([q[test.config == c].mean(axis=0) for c in range(4)])


def digit_accuracy(model, dataset: TrafficDataset) -> Optional[float]:
    """Accuracy of thresholding each light's p_on at 0.5 on held-out digits."""
    if not isinstance(model, models.LightPairModel):
        return None
    test = dataset.test
    red = model.red(test.x_r).data > 0.5
    green = model.green(test.x_g).data > 0.5
    hits = np.concatenate([red == ((test.config >> 1) & 1).astype(bool), green == (test.config & 1).astype(bool)])
    return float(hits.mean())


def train_run(
    config: RunConfig,
    dataset: TrafficDataset,
    run_seed: int,
    on_eval: Callable[[int, np.ndarray], None] | None = None,
):
    """Train one model; returns ``(model, trajectory)``."""
    init_seq, order_seq = np.random.SeedSequence(run_seed).spawn(2)
    model = make_model(config, int(init_seq.generate_state(1)[0]))
    order_rng = np.random.default_rng(order_seq)
    spec = models.traffic_light_spec()
    params = models.parameters(model)
    state = AdamState.for_params([p.data for p in params], lr=config.lr)

    steps = [0]
    records = [evaluate_partitions(model, dataset)]
    train = dataset.train
    n = len(train)
    update = 0
    loss_value = None
    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            with Tape() as tape:
                loss = batch_loss(config, model, spec, train.x_r[idx], train.x_g[idx], train.y[idx])
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss {loss_value} at update {update} (epoch {epoch}, run seed {run_seed}, "
                    f"loss {config.loss_kind})"
                )
            grads = backward(loss, tape, params)
            for p, new in zip(params, adam_step([p.data for p in params], grads, state)):
                p.data = new
            update += 1
            if update % config.eval_every == 0:
                steps.append(update)
                records.append(evaluate_partitions(model, dataset))
                if on_eval is not None:
                    on_eval(update, records[-1])
    if steps[-1] != update:
        steps.append(update)
        records.append(evaluate_partitions(model, dataset))
    traj = Trajectory(
        np.asarray(steps, dtype=np.int64),
        np.stack(records),
        seed=int(run_seed),
        loss_kind=config.loss_kind,
        digit_accuracy=digit_accuracy(model, dataset),
        final_loss=loss_value,
    )
    return model, traj


def run_seeds(config: RunConfig) -> list[int]:
    """Per-run seeds derived from the experiment seed."""
    children = np.random.SeedSequence(config.seed).spawn(config.runs)
    return [int(c.generate_state(1)[0]) for c in children]


def _one_run(args):
    config, zeros, ones, seed = args
    dataset = build_traffic_dataset(zeros, ones, seed, config.n_train, config.n_test_per_config)
    model, traj = train_run(config, dataset, seed)
    return model, traj


def run_experiment(config: RunConfig, zeros, ones, jobs: int = 1):
    """All runs of an experiment; the dataset is rebuilt per run from its seed.

    Returns ``(models, trajectories)`` in run order.
    """
    tasks = [(config, zeros, ones, seed) for seed in run_seeds(config)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_run, tasks))
    else:
        results = []
        for r, task in enumerate(tasks):
            log.info("run %d/%d (seed %d)", r + 1, len(tasks), task[3])
            results.append(_one_run(task))
    return [m for m, _ in results], [t for _, t in results]
