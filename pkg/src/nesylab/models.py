"""LeNet-style digit networks and the three traffic-light losses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import logic
from .autodiff import Tensor, ops
from .logic import Formula, WorldTable

BINARY_HEADS = ("two-unit-normalized", "single-logit")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Tensor(_uniform(rng, (n_in, n_out), n_in), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (n_out,), n_in), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class Conv5x5:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        fan_in = c_in * 25
        self.weight = Tensor(_uniform(rng, (c_out, c_in, 5, 5), fan_in), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c_out,), fan_in), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def _as_batch(image) -> Tensor:
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or x.shape[1:] != (1, 28, 28):
        raise ValueError(f"expected image(s) of shape (1, 28, 28), got {x.shape}")
    return x


class DigitEncoder:
    """conv(6) -> relu -> pool -> conv(16) -> relu -> pool -> 256 features."""

    def __init__(self, rng: np.random.Generator):
        self.conv1 = Conv5x5(1, 6, rng)
        self.conv2 = Conv5x5(6, 16, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.maxpool2x2(ops.relu(self.conv1(x)))
        h = ops.maxpool2x2(ops.relu(self.conv2(h)))
        return ops.flatten(h)

    def named_parameters(self, prefix: str):
        return self.conv1.named_parameters(f"{prefix}.conv1") + self.conv2.named_parameters(f"{prefix}.conv2")


class BinaryDigitNet:
    """Probability that a single light is on, from its digit image."""

    def __init__(self, rng: np.random.Generator, binary_head: str = "two-unit-normalized"):
        if binary_head not in BINARY_HEADS:
            raise ValueError(f"binary_head must be one of {BINARY_HEADS}, got {binary_head!r}")
        self.binary_head = binary_head
        self.encoder = DigitEncoder(rng)
        self.fc1 = Linear(256, 120, rng)
        self.fc2 = Linear(120, 84, rng)
        self.fc3 = Linear(84, 2 if binary_head == "two-unit-normalized" else 1, rng)

    def logits(self, image) -> Tensor:
        h = self.encoder(_as_batch(image))
        h = ops.relu(self.fc1(h))
        h = ops.relu(self.fc2(h))
        return self.fc3(h)

    def __call__(self, image) -> Tensor:
        return readout(self.logits(image), self.binary_head)

    def named_parameters(self, prefix: str = "net"):
        return (
            self.encoder.named_parameters(f"{prefix}.encoder")
            + self.fc1.named_parameters(f"{prefix}.fc1")
            + self.fc2.named_parameters(f"{prefix}.fc2")
            + self.fc3.named_parameters(f"{prefix}.fc3")
        )


def readout(logits: Tensor, binary_head: str = "two-unit-normalized") -> Tensor:
    """p_on from the final pre-sigmoid units, shape ``(B,)``.

    Two-unit head: ``s1 / (s0 + s1)`` with ``s = sigmoid(z)``.
    """
    s = ops.sigmoid(logits)
    if binary_head == "single-logit":
        return ops.reshape(s, (s.shape[0],))
    s0 = ops.reshape(ops.take(s, [0]), (s.shape[0],))
    s1 = ops.reshape(ops.take(s, [1]), (s.shape[0],))
    return ops.div(s1, ops.add(s0, s1))


def binary_digit_forward(net: BinaryDigitNet, image) -> Tensor:
    return net(image)


class JointWorldNet:
    """Softmax over the four traffic-light worlds from both images."""

    def __init__(self, rng: np.random.Generator, shared_encoder: bool = True):
        self.shared_encoder = shared_encoder
        self.encoder_r = DigitEncoder(rng)
        self.encoder_g = self.encoder_r if shared_encoder else DigitEncoder(rng)
        self.fc1 = Linear(512, 120, rng)
        self.fc2 = Linear(120, 84, rng)
        self.fc3 = Linear(84, 4, rng)

    def logits(self, x_r, x_g) -> Tensor:
        h = ops.concat([self.encoder_r(_as_batch(x_r)), self.encoder_g(_as_batch(x_g))], axis=-1)
        h = ops.relu(self.fc1(h))
        h = ops.relu(self.fc2(h))
        return self.fc3(h)

    def __call__(self, x_r, x_g) -> Tensor:
        return ops.softmax(self.logits(x_r, x_g))

    def named_parameters(self, prefix: str = "joint"):
        named = self.encoder_r.named_parameters(f"{prefix}.encoder_r")
        if not self.shared_encoder:
            named += self.encoder_g.named_parameters(f"{prefix}.encoder_g")
        return (
            named
            + self.fc1.named_parameters(f"{prefix}.fc1")
            + self.fc2.named_parameters(f"{prefix}.fc2")
            + self.fc3.named_parameters(f"{prefix}.fc3")
        )


def joint_world_forward(net: JointWorldNet, x_r, x_g) -> Tensor:
    return net(x_r, x_g)


# ---------------------------------------------------------------------------
# World probabilities
# ---------------------------------------------------------------------------


def factorized_world_probs(p_red: float, p_green: float) -> np.ndarray:
    return logic.world_distribution([p_red, p_green])


def world_probs_tensor(p: Tensor) -> Tensor:
    """Differentiable world distribution for a batch ``(B, N)`` of Bernoulli vectors.

    Same world order as :func:`nesylab.logic.world_distribution`.
    """
    B, N = p.shape
    q = Tensor(np.ones((B, 1)))
    # prepend variables from last to first so variable 0 ends up most significant
    for i in reversed(range(N)):
        pi = ops.take(p, [i])
        q = ops.concat([ops.mul(ops.sub(1.0, pi), q), ops.mul(pi, q)], axis=-1)
    return q


# ---------------------------------------------------------------------------
# Class specifications and losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClassSpec:
    """Class formulas indexed by label, over shared variables."""

    formulas: tuple[Formula, ...]
    variables: tuple[str, ...]
    table: WorldTable = field(init=False)

    def __post_init__(self):
        table = logic.build_world_table(self.formulas, self.variables)
        if not table.is_partition:
            raise ValueError("class formulas must be mutually exclusive and exhaustive")
        object.__setattr__(self, "table", table)

    @classmethod
    def from_texts(cls, texts: Sequence[str], variables: Sequence[str] | None = None) -> "ClassSpec":
        formulas = [logic.parse(t) for t in texts]
        if variables is None:
            variables = logic.build_world_table(formulas).variables
        return cls(tuple(f.over(variables) for f in formulas), tuple(variables))

    @property
    def n_classes(self) -> int:
        return len(self.formulas)

    def beta(self, y: int) -> np.ndarray:
        self.check_label(y)
        return self.table.class_betas[y]

    def check_label(self, y) -> int:
        if isinstance(y, bool) or int(y) != y or not 0 <= int(y) < self.n_classes:
            raise ValueError(f"label {y!r} not in 0..{self.n_classes - 1}")
        return int(y)


def traffic_light_spec() -> ClassSpec:
    """Label 1: at most one light on; label 0: both on."""
    return ClassSpec.from_texts(["red & green", logic.TRAFFIC_LIGHT], logic.TRAFFIC_VARS)


TRAFFIC_YTILDE = np.array([[0, 0, 0, 1], [1, 1, 1, 0]], dtype=np.int8)  # rows indexed by y


def _neg_log(x: float) -> float:
    return -math.log(max(x, ops.LOG_FLOOR))


def semantic_loss(spec: ClassSpec, y: int, p: Iterable[float]) -> float:
    """Cross-entropy of the class formula probability: ``-log p(phi_y)``."""
    y = spec.check_label(y)
    return _neg_log(logic.wmc(spec.formulas[y], p))


def truncated_semantic_loss(spec: ClassSpec, y: int, p: Iterable[float]) -> float:
    """Semantic loss keeping only the positive (label 1) term."""
    y = spec.check_label(y)
    if y != 1:
        return 0.0
    return _neg_log(logic.wmc(spec.formulas[1], p))


def disjunctive_supervision_loss(q: Iterable[float], y_tilde: Iterable[int]) -> float:
    """``-log`` of the probability mass on the acceptable outputs."""
    q = np.asarray(q, dtype=np.float64)
    mask = np.asarray(y_tilde)
    if q.shape != mask.shape or q.ndim != 1:
        raise ValueError(f"q has shape {q.shape}, y_tilde {mask.shape}")
    if not np.any(mask):
        raise ValueError("y_tilde has no acceptable output; the loss is undefined")
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError(f"q is not a probability vector (sum {q.sum()!r})")
    return _neg_log(float(np.cumsum(np.where(mask != 0, q, 0.0))[-1]))


def classify(spec: ClassSpec, p: Iterable[float]) -> int:
    """Most probable class; ties go to the lowest label."""
    probs = [logic.wmc(f, p) for f in spec.formulas]
    return int(np.argmax(probs))


# batched tensor losses used in training (mean over the batch)


def semantic_loss_batch(spec: ClassSpec, y: np.ndarray, q: Tensor) -> Tensor:
    labels = np.asarray(y, dtype=np.intp)
    class_probs = ops.matmul(q, Tensor(spec.table.class_betas.T.astype(np.float64)))
    onehot = np.eye(spec.n_classes)[labels]
    p_y = ops.sum(ops.mul(class_probs, onehot), axis=-1)
    return ops.scale(ops.mean(ops.safe_log(p_y)), -1.0)


def truncated_semantic_loss_batch(spec: ClassSpec, y: np.ndarray, q: Tensor) -> Tensor:
    positive = (np.asarray(y) == 1).astype(np.float64)
    p1 = ops.matmul(q, Tensor(spec.table.class_betas[1][:, None].astype(np.float64)))
    per_example = ops.mul(ops.reshape(ops.safe_log(p1), (len(positive),)), positive)
    return ops.scale(ops.mean(per_example), -1.0)


def disjunctive_loss_batch(q: Tensor, y_tilde: np.ndarray) -> Tensor:
    mass = ops.sum(ops.mul(q, np.asarray(y_tilde, dtype=np.float64)), axis=-1)
    return ops.scale(ops.mean(ops.safe_log(mass)), -1.0)


# ---------------------------------------------------------------------------
# Traffic-light models
# ---------------------------------------------------------------------------


class LightPairModel:
    """Two Bernoulli digit nets (red, green) combined by the factorized product."""

    kind = "light_pair"

    def __init__(self, seed: int, binary_head: str = "two-unit-normalized", share_light_nets: bool = False):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.binary_head = binary_head
        self.share_light_nets = share_light_nets
        self.red = BinaryDigitNet(rng, binary_head)
        self.green = self.red if share_light_nets else BinaryDigitNet(rng, binary_head)

    @property
    def config(self) -> dict:
        return {"binary_head": self.binary_head, "share_light_nets": self.share_light_nets}

    def light_probs(self, x_r, x_g) -> Tensor:
        pr = ops.reshape(self.red(x_r), (-1, 1))
        pg = ops.reshape(self.green(x_g), (-1, 1))
        return ops.concat([pr, pg], axis=-1)

    def world_probs(self, x_r, x_g) -> Tensor:
        return world_probs_tensor(self.light_probs(x_r, x_g))

    def named_parameters(self):
        named = self.red.named_parameters("red")
        if not self.share_light_nets:
            named += self.green.named_parameters("green")
        return named


class JointModel:
    kind = "joint"

    def __init__(self, seed: int, shared_encoder: bool = True):
        self.seed = seed
        self.net = JointWorldNet(np.random.default_rng(seed), shared_encoder)

    @property
    def config(self) -> dict:
        return {"shared_encoder": self.net.shared_encoder}

    def world_probs(self, x_r, x_g) -> Tensor:
        return self.net(x_r, x_g)

    def named_parameters(self):
        return self.net.named_parameters("joint")


def parameters(model) -> list[Tensor]:
    return [t for _, t in model.named_parameters()]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NESYLAB-CHECKPOINT 1\n"


def save_checkpoint(model, path: str | Path, extra: dict | None = None) -> None:
    """Header line of sorted JSON, then every tensor as little-endian float64."""
    named = model.named_parameters()
    header = {
        "kind": model.kind,
        "seed": int(model.seed),
        "config": model.config,
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(CHECKPOINT_MAGIC + blob + payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path):
    """Rebuild the model stored by :func:`save_checkpoint`; returns ``(model, header)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a nesylab checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    line, _, payload = rest.partition(b"\n")
    header = json.loads(line)
    if header["kind"] == LightPairModel.kind:
        model = LightPairModel(header["seed"], **header["config"])
    elif header["kind"] == JointModel.kind:
        model = JointModel(header["seed"], **header["config"])
    else:
        raise ValueError(f"{path}: unknown model kind {header['kind']!r}")
    named = dict(model.named_parameters())
    offset = 0
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        chunk = payload[offset: offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"{path}: truncated tensor {spec['name']}")
        target = named[spec["name"]]
        if target.shape != shape:
            raise ValueError(f"{path}: tensor {spec['name']} has shape {shape}, model expects {target.shape}")
        target.data = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes")
    return model, header
