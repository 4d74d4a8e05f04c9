"""Mechanical checks: SL/DS equivalence, the WTA step property, gradients, WMC."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import logic, models
from ..autodiff import Tape, Tensor, backward, ops


@dataclass
class CheckReport:
    name: str
    passed: bool = True
    trials: int = 0
    failures: list[str] = field(default_factory=list)
    stats: dict[str, float] = field(default_factory=dict)
    details: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    def fail(self, message: str) -> None:
        self.passed = False
        self.failures.append(message)

    def text(self, max_failures: int = 20) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        stats = " ".join(f"{k}={v:.3g}" for k, v in self.stats.items())
        lines = [f"{verdict} {self.name}: {self.trials} trials in {self.seconds:.2f}s {stats}".rstrip()]
        for msg in self.failures[:max_failures]:
            lines.append(f"  counterexample: {msg}")
        if len(self.failures) > max_failures:
            lines.append(f"  ... {len(self.failures) - max_failures} more")
        return "\n".join(lines)


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        report = fn(*args, **kwargs)
        report.seconds = time.perf_counter() - start
        return report

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# Semantic loss as disjunctive supervision
# ---------------------------------------------------------------------------


def random_partition_spec(rng: np.random.Generator, n_vars: int, n_classes: int) -> models.ClassSpec:
    """Classes from a random total labelling of the worlds, each written as a DNF."""
    variables = tuple(f"v{i}" for i in range(n_vars))
    labels = rng.integers(0, n_classes, size=2**n_vars)
    formulas = tuple(logic.dnf_over_worlds(np.flatnonzero(labels == k), variables) for k in range(n_classes))
    return models.ClassSpec(formulas, variables)


@_timed
def sl_ds_equivalence_check(n_trials: int = 1000, max_vars: int = 8, seed: int = 0, tol: float = 1e-9) -> CheckReport:
    rng = np.random.default_rng(seed)
    report = CheckReport("semantic loss == disjunctive supervision loss")
    worst = 0.0
    compared = 0
    for trial in range(n_trials):
        n_vars = int(rng.integers(1, max_vars + 1))
        n_classes = int(rng.integers(1, min(2**n_vars, 6) + 1))
        spec = random_partition_spec(rng, n_vars, n_classes)
        p = rng.uniform(0.0, 1.0, size=n_vars)
        q = logic.world_distribution(p)
        for y in range(n_classes):
            if logic.wmc(spec.formulas[y], p) <= 0.0:
                continue
            sl = models.semantic_loss(spec, y, p)
            ds = models.disjunctive_supervision_loss(q, spec.beta(y))
            gap = abs(sl - ds)
            worst = max(worst, gap)
            compared += 1
            if not gap < tol:
                report.fail(f"trial {trial}: N={n_vars} K={n_classes} y={y} p={p.tolist()} SL={sl!r} DS={ds!r}")
        betas = spec.table.class_betas.astype(np.int64)
        gram = betas @ betas.T
        if np.any(gram - np.diag(np.diag(gram))) or np.any(betas.sum(axis=0) != 1):
            report.fail(f"trial {trial}: class bit vectors not orthogonal and complete")
    report.trials = n_trials
    report.stats = {"max_abs_diff": worst, "comparisons": compared}
    return report


# ---------------------------------------------------------------------------
# Winner-take-all single step
# ---------------------------------------------------------------------------


def wta_single_step(weight: np.ndarray, bias: np.ndarray, x: np.ndarray, y_tilde: np.ndarray, lr: float = 0.01):
    """One gradient-descent step of a linear softmax layer on the disjunctive loss.

    Returns the output distributions before and after the step.
    """
    w = Tensor(weight, requires_grad=True)
    b = Tensor(bias, requires_grad=True)
    with Tape() as tape:
        probs = ops.softmax(ops.add(ops.matmul(Tensor(x[None, :]), w), b))
        loss = models.disjunctive_loss_batch(probs, y_tilde[None, :])
    gw, gb = backward(loss, tape, [w, b])
    after = ops.softmax(ops.add(ops.matmul(Tensor(x[None, :]), Tensor(weight - lr * gw)), Tensor(bias - lr * gb)))
    return probs.data[0], after.data[0]


@_timed
def wta_step_check(n_trials: int = 1000, seed: int = 0, lr: float = 0.01, tie_tol: float = 1e-9) -> CheckReport:
    """Ratio of two acceptable outputs grows exactly when the first is more probable.

    Acceptable sets have two or three of the four outputs; with all four the
    loss is identically zero and no output moves.
    """
    rng = np.random.default_rng(seed)
    report = CheckReport("winner-take-all single step")
    pairs = ties = 0
    for trial in range(n_trials):
        d = int(rng.integers(2, 11))
        weight = rng.normal(0.0, 1.0, size=(d, 4))
        bias = rng.normal(0.0, 1.0, size=4)
        x = rng.normal(0.0, 1.0, size=d)
        k = int(rng.integers(2, 4))
        y_tilde = np.zeros(4, dtype=np.int8)
        y_tilde[rng.choice(4, size=k, replace=False)] = 1
        before, after = wta_single_step(weight, bias, x, y_tilde, lr)
        acceptable = np.flatnonzero(y_tilde)
        for i, m in enumerate(acceptable):
            for n in acceptable[i + 1:]:
                if abs(before[m] - before[n]) <= tie_tol:
                    ties += 1
                    continue
                pairs += 1
                change = after[m] / after[n] - before[m] / before[n]
                if np.sign(change) != np.sign(before[m] - before[n]):
                    report.fail(
                        f"trial {trial}: outputs ({m},{n}) p_t=({before[m]!r},{before[n]!r}) "
                        f"ratio {before[m] / before[n]!r} -> {after[m] / after[n]!r}"
                    )
    report.trials = n_trials
    report.stats = {"pairs": pairs, "ties_skipped": ties, "violations": len(report.failures)}
    return report


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative difference; 0 when both vanish."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - n) / scale)


def finite_difference(f: Callable[[], float], array: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` in the listed flat coordinates of ``array`` (perturbed in place)."""
    flat = array.reshape(-1)
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = f()
        flat[c] = orig - h
        down = f()
        flat[c] = orig
        out[j] = (up - down) / (2 * h)
    return out


def _primitive_cases(rng: np.random.Generator):
    """(name, input arrays, function of tensors) for one random instance per primitive."""
    b = int(rng.integers(1, 4))
    n = int(rng.integers(2, 6))
    m = int(rng.integers(2, 6))
    a1 = rng.normal(size=(b, n))
    a2 = rng.normal(size=(b, n))
    pos = rng.uniform(0.5, 2.0, size=(b, n))
    # inputs for relu/clamp kept away from the kink
    kinked = rng.choice([-1.0, 1.0], size=(b, n)) * rng.uniform(0.1, 1.0, size=(b, n))
    c = int(rng.integers(1, 3))
    hw = 2 * int(rng.integers(3, 5))
    img = rng.normal(size=(b, c, hw, hw))
    kern = rng.normal(size=(int(rng.integers(1, 4)), c, 5, 5))
    kbias = rng.normal(size=(kern.shape[0],))
    return [
        ("add", [a1, a2], lambda x, y: ops.add(x, y)),
        ("add_bias", [a1, a2[0]], lambda x, y: ops.add(x, y)),
        ("sub", [a1, a2], lambda x, y: ops.sub(x, y)),
        ("mul", [a1, a2], lambda x, y: ops.mul(x, y)),
        ("div", [a1, pos], lambda x, y: ops.div(x, y)),
        ("scale", [a1], lambda x: ops.scale(x, 2.5)),
        ("matmul", [a1, rng.normal(size=(n, m))], lambda x, y: ops.matmul(x, y)),
        ("conv2d", [img, kern, kbias], lambda x, w, bb: ops.conv2d(x, w, bb)),
        ("maxpool2x2", [rng.normal(size=(b, c, hw, hw))], lambda x: ops.maxpool2x2(x)),
        ("relu", [kinked], lambda x: ops.relu(x)),
        ("sigmoid", [a1 * 3], lambda x: ops.sigmoid(x)),
        ("softmax", [a1 * 2], lambda x: ops.softmax(x)),
        ("log", [pos], lambda x: ops.log(x)),
        ("clamp_min", [kinked], lambda x: ops.clamp_min(x, 0.0)),
        ("sum", [a1], lambda x: ops.sum(x, axis=-1)),
        ("concat", [a1, rng.normal(size=(b, m))], lambda x, y: ops.concat([x, y])),
        ("take", [a1], lambda x: ops.take(x, [n - 1, 0, n - 1])),
        ("reshape", [img], lambda x: ops.flatten(x)),
    ]


def _check_function(arrays, fn, rng, h=1e-5, max_coords=40):
    """Gradient of ``sum(R * fn(inputs))`` against finite differences for every input."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    proj = rng.normal(size=fn(*[Tensor(a) for a in arrays]).shape)

    def scalar_of(ts):
        return ops.sum(ops.mul(fn(*ts), proj))

    with Tape() as tape:
        root = scalar_of(tensors)
    grads = backward(root, tape, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        size = t.data.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        numeric = finite_difference(lambda: scalar_of(tensors).item(), t.data, coords, h)
        worst = max(worst, relative_error(g.reshape(-1)[coords], numeric))
    return worst


def _pipeline_error(kind: str, rng: np.random.Generator, batch: int = 3, coords_per_tensor: int = 2) -> float:
    seed = int(rng.integers(0, 2**31))
    spec = models.traffic_light_spec()
    x_r = rng.uniform(0, 1, size=(batch, 1, 28, 28))
    x_g = rng.uniform(0, 1, size=(batch, 1, 28, 28))
    y = rng.integers(0, 2, size=batch)
    if kind == "disjunctive":
        model = models.JointModel(seed)

        def loss_fn():
            return models.disjunctive_loss_batch(model.world_probs(x_r, x_g), models.TRAFFIC_YTILDE[y])
    else:
        model = models.LightPairModel(seed)
        batch_fn = models.semantic_loss_batch if kind == "semantic" else models.truncated_semantic_loss_batch
        if kind == "truncated_semantic":
            y[0] = 1

        def loss_fn():
            return batch_fn(spec, y, model.world_probs(x_r, x_g))

    params = models.parameters(model)
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape, params)
    analytic, numeric = [], []
    for p, g in zip(params, grads):
        coords = rng.choice(p.data.size, min(coords_per_tensor, p.data.size), replace=False)
        analytic.append(g.reshape(-1)[coords])
        numeric.append(finite_difference(lambda: loss_fn().item(), p.data, coords))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


@_timed
def gradient_check(instances: int = 10, seed: int = 0, tol: float = 1e-3, pipelines: bool = True) -> CheckReport:
    rng = np.random.default_rng(seed)
    report = CheckReport("gradients vs central finite differences")
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, arrays, fn in _primitive_cases(rng):
            err = _check_function(arrays, fn, rng)
            worst[name] = max(worst.get(name, 0.0), err)
            report.trials += 1
    if pipelines:
        for kind in ("semantic", "truncated_semantic", "disjunctive"):
            for _ in range(instances):
                worst[f"pipeline:{kind}"] = max(worst.get(f"pipeline:{kind}", 0.0), _pipeline_error(kind, rng))
                report.trials += 1
    for name, err in worst.items():
        if not err < tol:
            report.fail(f"{name}: relative error {err:.3g} >= {tol}")
    report.stats = {"max_rel_err": max(worst.values())}
    report.details = worst
    return report


# ---------------------------------------------------------------------------
# WMC oracle
# ---------------------------------------------------------------------------


def random_formula(rng: np.random.Generator, variables, depth: int = 4) -> logic.Node:
    if depth == 0 or rng.random() < 0.2:
        r = rng.random()
        if r < 0.05:
            return logic.ConstTrue()
        if r < 0.1:
            return logic.ConstFalse()
        return logic.Var(variables[int(rng.integers(len(variables)))])
    kind = int(rng.integers(5))
    if kind == 0:
        return logic.Not(random_formula(rng, variables, depth - 1))
    cls = (logic.And, logic.Or, logic.Implies, logic.Iff)[kind - 1]
    return cls(random_formula(rng, variables, depth - 1), random_formula(rng, variables, depth - 1))


@_timed
def wmc_oracle_check(n_formulas: int = 500, max_vars: int = 10, seed: int = 0) -> CheckReport:
    """wmc equals the beta-weighted world sum exactly and complements to one."""
    rng = np.random.default_rng(seed)
    report = CheckReport("wmc oracle")
    worst_complement = 0.0
    for trial in range(n_formulas):
        n_vars = int(rng.integers(1, max_vars + 1))
        variables = tuple(f"x{i}" for i in range(n_vars))
        f = logic.Formula(random_formula(rng, variables, int(rng.integers(1, 7))), variables)
        p = rng.uniform(0, 1, size=n_vars)
        value = logic.wmc(f, p)
        beta = logic.build_world_table([f], variables).class_betas[0]
        q = logic.world_distribution(p)
        total = 0.0
        for m in range(len(q)):
            total += beta[m] * q[m]
        if value != total:
            report.fail(f"trial {trial}: wmc={value!r} beta.q={total!r} for {f}")
        gap = abs(value + logic.wmc(f.negate(), p) - 1.0)
        worst_complement = max(worst_complement, gap)
        if gap > 1e-12:
            report.fail(f"trial {trial}: wmc(f)+wmc(!f)-1 = {gap:.3g} for {f}")
        if n_vars <= 6:
            for m in range(2**n_vars):
                if logic.evaluate(f, logic.world_from_index(m, n_vars)) != bool(beta[m]):
                    report.fail(f"trial {trial}: evaluate disagrees with table at world {m} for {f}")
                    break
    report.trials = n_formulas
    report.stats = {"max_complement_gap": worst_complement}
    return report


# name -> (runner(trials, seed), default trial count)
SUITES = {
    "theorem1": (lambda trials, seed: sl_ds_equivalence_check(trials, seed=seed), 1000),
    "theorem2": (lambda trials, seed: wta_step_check(trials, seed=seed), 1000),
    "gradients": (lambda trials, seed: gradient_check(trials, seed=seed), 10),
    "oracle": (lambda trials, seed: wmc_oracle_check(trials, seed=seed), 500),
}
