import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nesylab import logic
from nesylab.logic import And, ConstTrue, Formula, FormulaSyntaxError, Not, Or, Var

TRAFFIC = logic.TRAFFIC_LIGHT


# formula text paired with an independent Python predicate over an env dict
NAMES = ["a", "b", "c", "d", "e", "f"]


def _leaf():
    return st.sampled_from(NAMES).map(lambda n: (n, lambda env, n=n: env[n])) | st.sampled_from(
        [("true", lambda env: True), ("false", lambda env: False)]
    )


def _extend(children):
    def unary(child):
        text, fn = child
        return f"!({text})", lambda env: not fn(env)

    def binary(args):
        (lt, lf), op, (rt, rf) = args
        table = {
            "&": lambda env: lf(env) and rf(env),
            "|": lambda env: lf(env) or rf(env),
            "->": lambda env: (not lf(env)) or rf(env),
            "<->": lambda env: lf(env) == rf(env),
        }
        return f"({lt}) {op} ({rt})", table[op]

    return children.map(unary) | st.tuples(children, st.sampled_from(["&", "|", "->", "<->"]), children).map(binary)


formulas = st.recursive(_leaf(), _extend, max_leaves=12)


class TestParse:
    def test_negation_binds_tighter_than_and(self):
        f = logic.parse("!red & green")
        assert f.root == And(Not(Var("red")), Var("green"))
        assert f.variables == ("red", "green")

    def test_traffic_light_body(self):
        f = logic.parse(TRAFFIC)
        nr, ng = Not(Var("red")), Not(Var("green"))
        expected = Or(Or(And(nr, Var("green")), And(Var("red"), ng)), And(nr, ng))
        assert f.root == expected
        assert f.variables == ("red", "green")

    def test_unbalanced_parenthesis(self):
        with pytest.raises(FormulaSyntaxError) as err:
            logic.parse("a & (b")
        assert err.value.offset == 6

    @pytest.mark.parametrize("text", ["", "   "])
    def test_empty_input(self, text):
        with pytest.raises(FormulaSyntaxError):
            logic.parse(text)

    @pytest.mark.parametrize("text, offset", [("a &", 3), ("a $ b", 2), ("a b", 2), (")", 0), ("a -> ", 5)])
    def test_syntax_error_offsets(self, text, offset):
        with pytest.raises(FormulaSyntaxError) as err:
            logic.parse(text)
        assert err.value.offset == offset

    def test_precedence_chain(self):
        f = logic.parse("a <-> b -> c | d & !e")
        assert f.root == logic.Iff(Var("a"), logic.Implies(Var("b"), Or(Var("c"), And(Var("d"), Not(Var("e"))))))

    def test_implication_is_right_associative(self):
        assert logic.parse("a -> b -> c").root == logic.Implies(Var("a"), logic.Implies(Var("b"), Var("c")))

    def test_and_or_iff_are_left_associative(self):
        assert logic.parse("a & b & c").root == And(And(Var("a"), Var("b")), Var("c"))
        assert logic.parse("a | b | c").root == Or(Or(Var("a"), Var("b")), Var("c"))
        assert logic.parse("a <-> b <-> c").root == logic.Iff(logic.Iff(Var("a"), Var("b")), Var("c"))

    def test_first_occurrence_order_and_literals(self):
        f = logic.parse("(z | true) & a & !z & false")
        assert f.variables == ("z", "a")

    def test_render_roundtrip(self):
        f = logic.parse("!(a -> b) <-> c & d")
        assert logic.parse(str(f)).root == f.root


class TestEvaluate:
    def test_traffic_light_examples(self):
        f = logic.parse(TRAFFIC)
        assert logic.evaluate(f, (False, False)) is True
        assert logic.evaluate(f, (True, True)) is False

    def test_const_true(self):
        f = Formula(ConstTrue(), ("a", "b"))
        for w in itertools.product([False, True], repeat=2):
            assert logic.evaluate(f, w)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            logic.evaluate(logic.parse("a & b"), (True,))

    @settings(max_examples=200, deadline=None)
    @given(formulas)
    def test_matches_independent_truth_table(self, pair):
        text, oracle = pair
        f = logic.parse(text)
        assert f.n_vars <= 6
        beta = logic.models_vector(f)
        for m, world in enumerate(itertools.product([False, True], repeat=f.n_vars)):
            env = dict(zip(f.variables, world))
            assert logic.evaluate(f, world) == oracle(env)
            assert bool(beta[m]) == oracle(env)


class TestWorlds:
    def test_index_bijection_is_big_endian(self):
        assert logic.world_from_index(1, 2) == (False, True)
        assert logic.world_from_index(2, 2) == (True, False)
        for m in range(16):
            assert logic.world_index(logic.world_from_index(m, 4)) == m

    def test_traffic_world_table(self):
        body = logic.parse(TRAFFIC)
        table = logic.build_world_table([body, logic.parse("red & green")], ("red", "green"))
        np.testing.assert_array_equal(table.class_betas[0], [1, 1, 1, 0])
        np.testing.assert_array_equal(table.class_betas[1], [0, 0, 0, 1])
        assert table.is_partition

    def test_tautology_table(self):
        table = logic.build_world_table([Formula(ConstTrue(), ("a", "b", "c"))])
        np.testing.assert_array_equal(table.class_betas[0], np.ones(8))
        assert table.is_partition

    def test_overlapping_classes_are_not_a_partition(self):
        a = logic.parse("a")
        table = logic.build_world_table([a, a])
        assert not table.is_partition and not table.mutually_exclusive

    def test_variable_outside_shared_order(self):
        with pytest.raises(ValueError, match="outside"):
            logic.build_world_table([logic.parse("a & b")], ("a",))

    def test_enumeration_guard(self):
        names = [f"x{i}" for i in range(21)]
        f = logic.parse(" & ".join(names))
        with pytest.raises(ValueError, match="limit"):
            logic.build_world_table([f])
        with pytest.raises(ValueError, match="limit"):
            logic.wmc(f, [0.5] * 21)


class TestProbabilities:
    def test_world_distribution_products(self):
        # direct products, world order (!r!g, !rg, r!g, rg)
        pr, pg = 0.3, 0.6
        expected = [(1 - pr) * (1 - pg), (1 - pr) * pg, pr * (1 - pg), pr * pg]
        np.testing.assert_allclose(logic.world_distribution([pr, pg]), expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(expected, [0.28, 0.42, 0.12, 0.18], atol=1e-15)

    def test_world_distribution_degenerate_and_uniform(self):
        np.testing.assert_array_equal(logic.world_distribution([0, 0]), [1, 0, 0, 0])
        np.testing.assert_array_equal(logic.world_distribution([0.5, 0.5]), [0.25] * 4)

    def test_wmc_traffic_light(self):
        f = logic.parse(TRAFFIC)
        assert logic.wmc(f, [0.3, 0.6]) == pytest.approx(0.28 + 0.42 + 0.12, abs=1e-15)
        assert logic.wmc(f, [0.3, 0.6]) == pytest.approx(0.82, abs=1e-15)
        assert logic.wmc(f, [1.0, 1.0]) == 0.0

    def test_wmc_tautology(self):
        assert logic.wmc(Formula(ConstTrue(), ("a",)), [0.37]) == 1.0

    def test_wmc_errors(self):
        f = logic.parse("a & b")
        with pytest.raises(ValueError):
            logic.wmc(f, [0.5])
        with pytest.raises(ValueError):
            logic.wmc(f, [0.5, 1.5])

    @settings(max_examples=150, deadline=None)
    @given(formulas, st.lists(st.floats(0, 1), min_size=6, max_size=6))
    def test_invariants(self, pair, probs):
        f = logic.parse(pair[0])
        p = probs[: f.n_vars]
        q = logic.world_distribution(p)
        beta = logic.models_vector(f)
        assert abs(q.sum() - 1.0) <= 1e-12
        assert abs(logic.wmc(f, p) + logic.wmc(f.negate(), p) - 1.0) <= 1e-12
        total = 0.0
        for m in range(len(q)):
            total += beta[m] * q[m]
        assert logic.wmc(f, p) == total

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_partition_probabilities_sum_to_one(self, n_vars, n_classes, seed):
        rng = np.random.default_rng(seed)
        variables = tuple(f"v{i}" for i in range(n_vars))
        labels = rng.integers(0, n_classes, size=2**n_vars)
        classes = [logic.dnf_over_worlds(np.flatnonzero(labels == k), variables) for k in range(n_classes)]
        p = rng.uniform(size=n_vars)
        assert logic.build_world_table(classes, variables).is_partition
        assert math.fsum(logic.wmc(c, p) for c in classes) == pytest.approx(1.0, abs=1e-12)
