import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nesylab import logic, models
from nesylab.autodiff import Tape, Tensor, backward, ops

SPEC = models.traffic_light_spec()
unit = st.floats(0.0, 1.0)


def _images(n, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 1, 28, 28))


def _set_final_logits(layer, z):
    layer.weight.data[...] = 0.0
    layer.bias.data[...] = np.asarray(z, dtype=float)


class TestReadout:
    def test_equal_logits_give_half(self):
        net = models.BinaryDigitNet(np.random.default_rng(0))
        _set_final_logits(net.fc3, [1.3, 1.3])
        np.testing.assert_allclose(net(_images(3)).data, 0.5, atol=1e-15)

    def test_extreme_logits(self):
        net = models.BinaryDigitNet(np.random.default_rng(0))
        _set_final_logits(net.fc3, [-10.0, 10.0])
        s = lambda z: 1 / (1 + math.exp(-z))  # noqa: E731
        expected = s(10) / (s(-10) + s(10))
        p = models.binary_digit_forward(net, _images(1)[0])
        assert p.shape == (1,)
        assert p.data[0] == pytest.approx(expected, rel=1e-12)
        assert p.data[0] == pytest.approx(0.99995, abs=1e-5)

    def test_single_logit_head(self):
        net = models.BinaryDigitNet(np.random.default_rng(0), "single-logit")
        _set_final_logits(net.fc3, [0.0])
        np.testing.assert_allclose(net(_images(2)).data, [0.5, 0.5])

    def test_output_in_open_interval(self):
        net = models.BinaryDigitNet(np.random.default_rng(5))
        p = net(_images(8)).data
        assert np.all((p > 0) & (p < 1))

    def test_unknown_head(self):
        with pytest.raises(ValueError):
            models.BinaryDigitNet(np.random.default_rng(0), "three-unit")


class TestJointNet:
    def test_equal_logits_uniform(self):
        net = models.JointWorldNet(np.random.default_rng(0))
        _set_final_logits(net.fc3, [0.0] * 4)
        q = models.joint_world_forward(net, _images(2), _images(2, 1)).data
        np.testing.assert_allclose(q, 0.25, atol=1e-15)

    def test_peaked_logits(self):
        net = models.JointWorldNet(np.random.default_rng(0))
        _set_final_logits(net.fc3, [10.0, 0.0, 0.0, 0.0])
        q = net(_images(1), _images(1, 1)).data[0]
        assert q[0] == pytest.approx(math.exp(10) / (math.exp(10) + 3), rel=1e-12)
        assert q[0] == pytest.approx(0.99986, abs=1e-5)

    def test_encoder_sharing(self):
        shared = models.JointModel(0, shared_encoder=True)
        separate = models.JointModel(0, shared_encoder=False)
        assert len(separate.named_parameters()) == len(shared.named_parameters()) + 4


class TestWorldProbabilities:
    def test_examples(self):
        np.testing.assert_allclose(models.factorized_world_probs(0.3, 0.6), [0.28, 0.42, 0.12, 0.18], atol=1e-15)
        np.testing.assert_array_equal(models.factorized_world_probs(0, 1), [0, 1, 0, 0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(unit, min_size=1, max_size=5))
    def test_tensor_matches_logic(self, p):
        q = models.world_probs_tensor(Tensor(np.array([p]))).data[0]
        np.testing.assert_allclose(q, logic.world_distribution(p), atol=1e-15)

    def test_light_pair_uses_factorized_product(self):
        model = models.LightPairModel(3)
        xr, xg = _images(4), _images(4, 1)
        lights = model.light_probs(xr, xg).data
        q = model.world_probs(xr, xg).data
        for row, (pr, pg) in zip(q, lights):
            np.testing.assert_allclose(row, models.factorized_world_probs(pr, pg), atol=1e-15)


class TestLosses:
    def test_semantic_examples(self):
        assert models.semantic_loss(SPEC, 1, [0.3, 0.6]) == pytest.approx(-math.log(0.82), abs=1e-12)
        assert models.semantic_loss(SPEC, 1, [0.3, 0.6]) == pytest.approx(0.19845, abs=1e-5)
        assert models.semantic_loss(SPEC, 0, [0.3, 0.6]) == pytest.approx(1.71480, abs=1e-5)
        assert models.semantic_loss(SPEC, 1, [0.0, 0.0]) == 0.0

    def test_truncated_examples(self):
        assert models.truncated_semantic_loss(SPEC, 1, [0.3, 0.6]) == pytest.approx(0.19845, abs=1e-5)
        assert models.truncated_semantic_loss(SPEC, 0, [0.3, 0.6]) == 0.0
        assert models.truncated_semantic_loss(SPEC, 0, [1.0, 1.0]) == 0.0
        assert models.truncated_semantic_loss(SPEC, 1, [0.0, 1.0]) == 0.0

    def test_disjunctive_examples(self):
        q = [0.25] * 4
        assert models.disjunctive_supervision_loss(q, [1, 1, 1, 0]) == pytest.approx(0.28768, abs=1e-5)
        assert models.disjunctive_supervision_loss(q, [0, 0, 0, 1]) == pytest.approx(1.38629, abs=1e-5)
        assert models.disjunctive_supervision_loss([0.1, 0.2, 0.3, 0.4], [1, 1, 1, 1]) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            models.semantic_loss(SPEC, 2, [0.3, 0.6])
        with pytest.raises(ValueError):
            models.disjunctive_supervision_loss([0.25] * 4, [0, 0, 0, 0])
        with pytest.raises(ValueError):
            models.disjunctive_supervision_loss([0.5, 0.6], [1, 0])
        with pytest.raises(ValueError):
            models.ClassSpec.from_texts(["a", "a | b"])

    def test_log_floor_keeps_loss_finite(self):
        assert math.isfinite(models.semantic_loss(SPEC, 0, [0.0, 0.0]))

    @settings(max_examples=200, deadline=None)
    @given(unit, unit, st.integers(0, 1))
    def test_semantic_equals_disjunctive_with_class_bits(self, pr, pg, y):
        q = models.factorized_world_probs(pr, pg)
        sl = models.semantic_loss(SPEC, y, [pr, pg])
        ds = models.disjunctive_supervision_loss(q, SPEC.beta(y))
        assert abs(sl - ds) < 1e-9

    @settings(max_examples=100, deadline=None)
    @given(unit, unit)
    def test_binary_cross_entropy_form(self, pr, pg):
        # two classes: -y log P(phi_1) - (1-y) log(1 - P(phi_1))
        p1 = logic.wmc(SPEC.formulas[1], [pr, pg])
        floor = lambda v: -math.log(max(v, 1e-12))  # noqa: E731
        assert models.semantic_loss(SPEC, 1, [pr, pg]) == pytest.approx(floor(p1), abs=1e-12)
        # compare in probability space: 1 - p1 cancels badly when p1 is near 1
        assert math.exp(-models.semantic_loss(SPEC, 0, [pr, pg])) == pytest.approx(max(1 - p1, 1e-12), abs=1e-12)

    def test_batch_losses_match_scalar(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.05, 0.95, size=(6, 2))
        y = np.array([0, 1, 1, 0, 1, 1])
        q = models.world_probs_tensor(Tensor(p))
        sl = models.semantic_loss_batch(SPEC, y, q).item()
        tr = models.truncated_semantic_loss_batch(SPEC, y, q).item()
        ds = models.disjunctive_loss_batch(q, models.TRAFFIC_YTILDE[y]).item()
        assert sl == pytest.approx(np.mean([models.semantic_loss(SPEC, t, r) for t, r in zip(y, p)]), abs=1e-12)
        assert tr == pytest.approx(np.mean([models.truncated_semantic_loss(SPEC, t, r) for t, r in zip(y, p)]), abs=1e-12)
        assert ds == pytest.approx(sl, abs=1e-12)

    def test_semantic_gradient_closed_form(self):
        p0 = np.array([[0.3, 0.6]])
        x = Tensor(p0, requires_grad=True)
        with Tape() as tape:
            loss = models.semantic_loss_batch(SPEC, np.array([1]), models.world_probs_tensor(x))
        (g,) = backward(loss, tape, [x])
        # d/dp -log(1 - pr*pg) = (pg, pr) / (1 - pr*pg)
        np.testing.assert_allclose(g[0], np.array([0.6, 0.3]) / 0.82, rtol=1e-12)


class TestClassify:
    @pytest.mark.parametrize("p, label", [((0.3, 0.6), 1), ((1.0, 1.0), 0), ((0.5, 0.5), 1)])
    def test_examples(self, p, label):
        assert models.classify(SPEC, p) == label

    @settings(max_examples=100, deadline=None)
    @given(unit, unit)
    def test_argmax_of_class_probabilities(self, pr, pg):
        probs = [logic.wmc(f, [pr, pg]) for f in SPEC.formulas]
        label = models.classify(SPEC, [pr, pg])
        assert probs[label] == max(probs)


class TestCheckpoints:
    @pytest.mark.parametrize(
        "model",
        [
            models.LightPairModel(7),
            models.LightPairModel(7, "single-logit", share_light_nets=True),
            models.JointModel(7),
            models.JointModel(7, shared_encoder=False),
        ],
        ids=["pair", "pair-shared-single", "joint", "joint-separate"],
    )
    def test_round_trip_is_byte_identical(self, tmp_path, model):
        for t in models.parameters(model):
            t.data += 0.125  # differ from a fresh init
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        models.save_checkpoint(model, first, extra={"run": 3})
        loaded, header = models.load_checkpoint(first)
        assert header["extra"] == {"run": 3}
        models.save_checkpoint(loaded, second, extra=header["extra"])
        assert first.read_bytes() == second.read_bytes()
        xr, xg = _images(2), _images(2, 1)
        np.testing.assert_array_equal(loaded.world_probs(xr, xg).data, model.world_probs(xr, xg).data)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello")
        with pytest.raises(ValueError, match="checkpoint"):
            models.load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.ckpt"
        models.save_checkpoint(models.JointModel(0), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            models.load_checkpoint(path)


def test_same_seed_same_initialisation():
    a, b = models.LightPairModel(11), models.LightPairModel(11)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()
    assert not np.array_equal(a.red.fc1.weight.data, a.green.fc1.weight.data)
    assert ops.LOG_FLOOR == 1e-12
