import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmtl import tensor as T
from stmtl.ops import OperationKind
from stmtl.search import (
    ArchitectureError,
    ArchitectureSpec,
    LayerArch,
    OpSelector,
    anneal_temperature,
    deserialize_architecture,
    fuse,
    fuse_many,
    gumbel_from_uniform,
    gumbel_softmax,
    hard_select,
    sample_gumbel,
    serialize_architecture,
    straight_through_mix,
)
from stmtl.tensor import ShapeError, Tape, Tensor, backward, finite_difference_check


def rng(seed=0):
    return np.random.default_rng(seed)


def selector(logits, tau=1.0):
    s = OpSelector(n_ops=len(logits), temperature=tau)
    s.logits.data[:] = logits
    return s


class TestSampleGumbel:
    def test_fixed_point_at_one_over_e(self):
        assert gumbel_from_uniform(1.0 / math.e) == pytest.approx(0.0, abs=1e-12)

    def test_half(self):
        # g = -log(log 2), direct evaluation
        assert gumbel_from_uniform(0.5) == pytest.approx(0.36651292058166435, abs=1e-12)

    def test_seeded_stream_is_deterministic(self):
        a = sample_gumbel(5, rng(3))
        b = sample_gumbel(5, rng(3))
        np.testing.assert_array_equal(a, b)

    def test_endpoints_rejected(self):
        with pytest.raises(ValueError):
            gumbel_from_uniform(0.0)
        with pytest.raises(ValueError):
            gumbel_from_uniform(1.0)
        with pytest.raises(ValueError):
            sample_gumbel(0, rng(0))


class TestGumbelSoftmax:
    def test_symmetric_inputs_give_uniform(self):
        p = gumbel_softmax(selector(np.zeros(5), tau=0.7), np.zeros(5))
        np.testing.assert_allclose(p.data, 0.2, atol=1e-12)

    def test_two_way_formula(self):
        p = gumbel_softmax(selector([math.log(2.0), 0.0], tau=1.0), np.zeros(2))
        np.testing.assert_allclose(p.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_low_temperature_approaches_one_hot(self):
        p = gumbel_softmax(selector([1.0, 0, 0, 0, 0], tau=0.01), np.zeros(5))
        assert np.max(np.abs(p.data - np.array([1.0, 0, 0, 0, 0]))) < 1e-6

    def test_nonpositive_temperature_rejected(self):
        s = selector(np.zeros(5), tau=1.0)
        s.temperature = 0.0
        with pytest.raises(ValueError, match="temperature"):
            gumbel_softmax(s, np.zeros(5))
        with pytest.raises(ValueError, match="temperature"):
            OpSelector(temperature=-1.0)

    def test_differentiable_wrt_logits(self):
        s = selector(rng(4).normal(size=5), tau=0.8)
        g = sample_gumbel(5, rng(5))
        coeff = Tensor(rng(6).normal(size=5))

        def f(_t):
            return T.reduce_sum(T.mul(gumbel_softmax(s, g), coeff))

        assert finite_difference_check(f, s.logits, eps=1e-6) < 1e-4

    def test_noise_shape_checked(self):
        with pytest.raises(ShapeError):
            gumbel_softmax(selector(np.zeros(5)), np.zeros(3))


class TestHardSelect:
    def test_dominant_logit_wins(self):
        onehot, idx = hard_select(selector([5.0, 0, 0, 0, 0]), rng(7).uniform(-1, 1, 5))
        assert idx == 0
        np.testing.assert_array_equal(onehot, [1, 0, 0, 0, 0])

    def test_noise_decides_under_symmetry(self):
        onehot, idx = hard_select(selector(np.zeros(5)), np.array([0.0, 1.0, 0, 0, 0]))
        assert idx == 1 and onehot[1] == 1.0

    def test_tie_breaks_to_lowest_index(self):
        _, idx = hard_select(selector(np.zeros(5)), np.zeros(5))
        assert idx == 0

    def test_matches_categorical_sampling(self):
        # Gumbel-max over theta is categorical(softmax(theta)): Monte Carlo check.
        theta = np.array([math.log(2.0), 0.0, -1e9, -1e9, -1e9])
        s = selector(theta)
        r = rng(8)
        n = 100_000
        g = -np.log(-np.log(np.clip(r.random((n, 5)), 1e-12, 1 - 1e-12)))
        counts = np.bincount(np.argmax(theta + g, axis=1), minlength=5)
        freqs = counts / n
        np.testing.assert_allclose(freqs[:2], [2.0 / 3.0, 1.0 / 3.0], atol=0.01)
        assert freqs[2:].sum() == 0.0

    def test_argmax_invariant_to_constant_shift(self):
        r = rng(9)
        for _ in range(20):
            theta = r.normal(size=5)
            g = sample_gumbel(5, r)
            _, idx = hard_select(selector(theta), g)
            _, idx_shifted = hard_select(selector(theta + 13.7), g)
            assert idx == idx_shifted


class TestStraightThrough:
    def _candidates(self, seed, shape=(2, 3)):
        r = rng(seed)
        return [Tensor(r.normal(size=shape)) for _ in range(5)]

    def test_forward_is_bit_exact(self):
        outs = self._candidates(10)
        s = selector(rng(11).normal(size=5), tau=0.5)
        g = sample_gumbel(5, rng(12))
        onehot, idx = hard_select(s, g)
        with Tape():
            p = gumbel_softmax(s, g)
            mixed = straight_through_mix(p, onehot, outs)
        assert np.array_equal(mixed.data, outs[idx].data)

    def test_identical_candidates_give_zero_logit_grad(self):
        base = rng(13).normal(size=(2, 2))
        outs = [Tensor(base.copy()) for _ in range(5)]
        s = selector(rng(14).normal(size=5), tau=0.7)
        g = sample_gumbel(5, rng(15))
        onehot, _ = hard_select(s, g)
        with Tape():
            p = gumbel_softmax(s, g)
            loss = T.reduce_sum(straight_through_mix(p, onehot, outs))
        backward(loss)
        np.testing.assert_allclose(s.logits.grad, 0.0, atol=1e-12)

    def test_logit_gradient_matches_soft_mix_finite_differences(self):
        outs = self._candidates(16)
        s = selector(rng(17).normal(size=5), tau=0.6)
        g = sample_gumbel(5, rng(18))
        onehot, _ = hard_select(s, g)
        coeff = Tensor(rng(19).normal(size=(2, 3)))

        def hard_loss(_t):
            p = gumbel_softmax(s, g)
            return T.reduce_sum(T.mul(straight_through_mix(p, onehot, outs), coeff))

        def soft_loss(_t):
            p = gumbel_softmax(s, g)
            mixed = None
            for j, o in enumerate(outs):
                term = T.mul(o, T.reshape(T.slice_axis(p, 0, j, j + 1), (1, 1)))
                mixed = term if mixed is None else T.add(mixed, term)
            return T.reduce_sum(T.mul(mixed, coeff))

        with Tape():
            loss = hard_loss(None)
        backward(loss)
        analytic = s.logits.grad.copy()
        s.logits.grad = None

        eps = 1e-6
        numeric = np.zeros(5)
        for j in range(5):
            orig = s.logits.data[j]
            s.logits.data[j] = orig + eps
            fp = soft_loss(None).item()
            s.logits.data[j] = orig - eps
            fm = soft_loss(None).item()
            s.logits.data[j] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        np.testing.assert_allclose(analytic, numeric, atol=1e-6)

    def test_wrong_candidate_count_rejected(self):
        s = selector(np.zeros(5))
        with pytest.raises(ShapeError, match="candidates"):
            straight_through_mix(gumbel_softmax(s, np.zeros(5)), np.array([1, 0, 0, 0, 0]),
                                 self._candidates(20)[:3])


class TestFuse:
    def test_uniform_beta_averages(self):
        a, b = Tensor(np.full((2, 2), 3.0)), Tensor(np.full((2, 2), 1.0))
        out = fuse(Tensor(np.zeros(2)), a, b)
        np.testing.assert_allclose(out.data, 2.0, atol=1e-12)

    def test_saturated_beta_selects_one_input(self):
        r = rng(21)
        a, b = Tensor(r.normal(size=(3, 4))), Tensor(r.normal(size=(3, 4)))
        out = fuse(Tensor(np.array([20.0, -20.0])), a, b)
        np.testing.assert_allclose(out.data, a.data, rtol=1e-6)

    def test_equal_inputs_invariant_to_beta(self):
        x = rng(22).normal(size=(2, 3))
        for beta in ([0.0, 0.0], [5.0, -1.0], [-3.0, 3.0]):
            out = fuse(Tensor(np.array(beta)), Tensor(x.copy()), Tensor(x.copy()))
            np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="fuse"):
            fuse(Tensor(np.zeros(2)), Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))))

    def test_differentiable_wrt_beta(self):
        r = rng(23)
        outs = [Tensor(r.normal(size=(2, 2))) for _ in range(3)]
        beta = Tensor(r.normal(size=3), requires_grad=True)
        coeff = Tensor(r.normal(size=(2, 2)))

        def f(t):
            return T.reduce_sum(T.mul(fuse_many(t, outs), coeff))

        assert finite_difference_check(f, beta, eps=1e-6) < 1e-4

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=2))
    def test_output_in_convex_hull(self, beta):
        a = np.array([[1.0, -2.0], [0.5, 4.0]])
        b = np.array([[3.0, 0.0], [-1.5, 4.0]])
        out = fuse(Tensor(np.array(beta)), Tensor(a), Tensor(b)).data
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)


def _toy_spec(shared_ops=(OperationKind.GCN, OperationKind.GCN, OperationKind.RNN)):
    layers = []
    for op in shared_ops:
        layers.append(LayerArch(
            modules=[("task:0", OperationKind.CNN), ("task:1", OperationKind.TX), ("shared", op)],
            fusion={"task:0": [0.25, 0.75], "task:1": [0.6, 0.4]},
        ))
    return ArchitectureSpec(n_layers=len(shared_ops), hidden_dim=32, n_tasks=2, layers=layers)


class TestArchitectureSpec:
    def test_round_trip_identity(self):
        spec = _toy_spec()
        text = serialize_architecture(spec)
        again = deserialize_architecture(text)
        assert again == spec
        assert serialize_architecture(again) == text

    def test_shared_ops_bottom_to_top_preserved(self):
        spec = _toy_spec((OperationKind.GCN, OperationKind.GCN, OperationKind.RNN))
        again = deserialize_architecture(serialize_architecture(spec))
        shared = [op for layer in again.layers for role, op in layer.modules if role == "shared"]
        assert shared == [OperationKind.GCN, OperationKind.GCN, OperationKind.RNN]

    def test_serialization_is_byte_deterministic(self):
        a = serialize_architecture(_toy_spec()).encode()
        b = serialize_architecture(_toy_spec()).encode()
        assert a == b

    def test_empty_layer_list_rejected(self):
        with pytest.raises(ArchitectureError, match="layer"):
            ArchitectureSpec(n_layers=0, hidden_dim=8, n_tasks=1, layers=[])

    def test_malformed_text_reports_position(self):
        with pytest.raises(ArchitectureError, match="line 1"):
            deserialize_architecture('{"version": 1, !!}')

    def test_unknown_operation_name_rejected(self):
        text = serialize_architecture(_toy_spec()).replace("CNN", "MLP")
        with pytest.raises(ArchitectureError, match="MLP"):
            deserialize_architecture(text)

    def test_unknown_keys_rejected(self):
        text = serialize_architecture(_toy_spec())[:-2] + ',"extra":1}\n'
        with pytest.raises(ArchitectureError, match="extra"):
            deserialize_architecture(text)


class TestAnnealing:
    def test_endpoints(self):
        assert anneal_temperature(0, 30) == pytest.approx(5.0)
        assert anneal_temperature(29, 30) == pytest.approx(0.5)

    def test_monotone_decreasing(self):
        taus = [anneal_temperature(e, 10) for e in range(10)]
        assert all(a > b for a, b in zip(taus, taus[1:]))
