"""Tensor core: forward semantics, adjoint rules, tape mechanics."""
import math

import numpy as np
import pytest

from uncertain.errors import DomainError, ShapeError, TapeError
from uncertain.tensor import (
    ELEMENTWISE_BINARY,
    ELEMENTWISE_UNARY,
    Tape,
    Tensor,
    add,
    concat,
    conv2d,
    diag_part,
    exp,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mul,
    reshape,
    slice_last,
    softplus,
    softplus_inverse,
    square,
    take_last,
    tensor_mean,
    tensor_sum,
    transpose,
    where,
)

from conftest import finite_diff_grad, max_rel_err


def grad_of(f, x0, h=1e-5):
    """Analytic and FD gradients of scalar f wrt a single array input."""
    with Tape() as tape:
        x = tape.watch(Tensor(x0))
        loss = f(x)
        analytic = tape.backward(loss)[x.node_id].data
    numeric = finite_diff_grad(lambda v: f(Tensor(v)).item(), x0, h=h)
    return analytic, numeric


class TestForward:
    def test_add(self):
        assert np.array_equal(add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])

    def test_softplus_at_zero(self):
        assert softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-7)

    def test_softplus_overflow_safe(self):
        out = softplus(Tensor([-1e4, 0.0, 1e4])).data
        assert out[0] == 0.0
        assert out[2] == 1e4
        assert np.all(np.isfinite(out))

    def test_softplus_inverse_roundtrip(self):
        y = np.array([1e-6, 0.1, 1.0, 35.0])
        x = softplus_inverse(y)
        assert np.allclose(softplus(Tensor(x)).data, y, rtol=1e-12)

    def test_broadcasting(self):
        out = add(Tensor(np.ones((2, 3))), Tensor([1.0, 2.0, 3.0]))
        assert np.array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\[2\].*\[3\]"):
            add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_log_negative_raises(self):
        with pytest.raises(DomainError):
            log(Tensor([-1.0]))

    def test_sqrt_negative_raises(self):
        from uncertain.tensor import sqrt

        with pytest.raises(DomainError):
            sqrt(Tensor([-0.5]))

    def test_scalar_coercion(self):
        assert mul(Tensor([2.0, 4.0]), 0.5).data.tolist() == [1.0, 2.0]
        assert (1.0 - Tensor([0.25])).data.tolist() == [0.75]


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(Tensor(a), Tensor(np.eye(2))).data, a)

    def test_annihilation(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[0.0], [5.0]])
        assert np.array_equal(matmul(a, b).data, [[0.0], [0.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match="inner dimensions"):
            matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))

    def test_gradient_vs_central_differences(self):
        rng = np.random.default_rng(7)
        a0 = rng.uniform(-2, 2, (3, 4))
        b0 = rng.uniform(-2, 2, (4, 2))

        def loss_np(a, b):
            return float(np.sum((a @ b) ** 2))

        with Tape() as tape:
            a = tape.watch(Tensor(a0))
            b = tape.watch(Tensor(b0))
            grads = tape.backward(tensor_sum(square(matmul(a, b))))
        fa = finite_diff_grad(lambda v: loss_np(v, b0), a0)
        fb = finite_diff_grad(lambda v: loss_np(a0, v), b0)
        assert max_rel_err(grads[a.node_id].data, fa) < 1e-6
        assert max_rel_err(grads[b.node_id].data, fb) < 1e-6


def conv_oracle(x, k, stride, padding):
    """Direct loop-nest cross-correlation, independent of the backend."""
    b, h, w, ci = x.shape
    kh, kw, _, co = k.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        pt = max((ho - 1) * stride + kh - h, 0) // 2
        pl = max((wo - 1) * stride + kw - w, 0) // 2
        total_h = max((ho - 1) * stride + kh - h, 0)
        total_w = max((wo - 1) * stride + kw - w, 0)
        xp = np.pad(x, ((0, 0), (pt, total_h - pt), (pl, total_w - pl), (0, 0)))
    else:
        xp = x
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
    out = np.zeros((b, ho, wo, co))
    for n in range(b):
        for oi in range(ho):
            for oj in range(wo):
                for f in range(co):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(ci):
                                acc += xp[n, oi * stride + di, oj * stride + dj, c] * k[di, dj, c, f]
                    out[n, oi, oj, f] = acc
    return out


class TestConv2d:
    def test_one_by_one_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4, 1)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        assert np.array_equal(conv2d(x, k).data, x.data)

    def test_zero_kernel(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 3, 2)))
        k = Tensor(np.zeros((2, 2, 2, 3)))
        assert np.all(conv2d(x, k, padding="valid").data == 0.0)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (1, "valid"), (2, "same"), (2, "valid")])
    def test_matches_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(1, 5, 5, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        got = conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
        want = conv_oracle(x, k, stride, padding)
        assert got.shape == want.shape
        # forward kernels accumulate in the oracle's (di, dj, c) order
        np.testing.assert_allclose(got, want, rtol=1e-13, atol=0)

    def test_output_extents(self):
        x = Tensor(np.zeros((1, 7, 7, 1)))
        k = Tensor(np.zeros((3, 3, 1, 1)))
        assert conv2d(x, k, stride=2, padding="same").shape == (1, 4, 4, 1)
        assert conv2d(x, k, stride=2, padding="valid").shape == (1, 3, 3, 1)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="larger than padded input"):
            conv2d(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))),
                   padding="valid")

    def test_gradients_vs_central_differences(self):
        rng = np.random.default_rng(3)
        x0 = rng.uniform(-1, 1, (1, 4, 4, 2))
        k0 = rng.uniform(-1, 1, (3, 3, 2, 2))

        def loss_np(x, k):
            return float(np.sum(conv_oracle(x, k, 1, "same") ** 2))

        with Tape() as tape:
            x = tape.watch(Tensor(x0))
            k = tape.watch(Tensor(k0))
            grads = tape.backward(tensor_sum(square(conv2d(x, k))))
        fx = finite_diff_grad(lambda v: loss_np(v, k0), x0)
        fk = finite_diff_grad(lambda v: loss_np(x0, v), k0)
        assert max_rel_err(grads[x.node_id].data, fx) < 1e-5
        assert max_rel_err(grads[k.node_id].data, fk) < 1e-5


class TestBackward:
    def test_constant_root_gives_zero_gradients(self):
        with Tape() as tape:
            x = tape.watch(Tensor([1.0, 2.0]))
            root = tape.watch(Tensor(5.0))
            grads = tape.backward(root)
        assert x.node_id not in grads  # missing id means zero
        assert grads[root.node_id].item() == 1.0

    def test_sum_gradient_is_ones(self):
        with Tape() as tape:
            x = tape.watch(Tensor([1.0, -2.0, 3.0]))
            grads = tape.backward(tensor_sum(x))
        assert np.array_equal(grads[x.node_id].data, [1.0, 1.0, 1.0])

    def test_fanout_accumulates(self):
        with Tape() as tape:
            x = tape.watch(Tensor(3.0))
            y = add(mul(x, x), mul(x, 2.0))  # x^2 + 2x
            grads = tape.backward(y)
        assert grads[x.node_id].item() == pytest.approx(8.0)

    def test_non_scalar_root_rejected(self):
        with Tape() as tape:
            x = tape.watch(Tensor([1.0, 2.0]))
            with pytest.raises(TapeError, match="scalar"):
                tape.backward(square(x))

    def test_detached_root_rejected(self):
        with Tape() as tape:
            with pytest.raises(TapeError, match="detached"):
                tape.backward(Tensor(1.0))

    def test_ops_off_tape_stay_constant(self):
        with Tape() as tape:
            c = mul(Tensor([2.0]), Tensor([3.0]))
            assert c.node_id is None
            x = tape.watch(Tensor([1.0]))
            grads = tape.backward(tensor_sum(mul(x, c)))
        assert np.array_equal(grads[x.node_id].data, [6.0])

    def test_broadcast_gradient_restores_shape(self):
        rng = np.random.default_rng(5)
        a0 = rng.normal(size=(4, 3))
        b0 = rng.normal(size=(3,))
        with Tape() as tape:
            a = tape.watch(Tensor(a0))
            b = tape.watch(Tensor(b0))
            grads = tape.backward(tensor_sum(square(add(a, b))))
        assert grads[a.node_id].shape == (4, 3)
        assert grads[b.node_id].shape == (3,)
        fb = finite_diff_grad(lambda v: float(np.sum((a0 + v) ** 2)), b0)
        assert max_rel_err(grads[b.node_id].data, fb) < 1e-6


# domains keeping each op away from singularities under FD probing
_UNARY_DOMAIN = {
    "log": (0.1, 2.0),
    "sqrt": (0.1, 2.0),
    "relu": (0.05, 2.0),  # kink at 0 breaks FD, positive side suffices
}


class TestGradientProperty:
    """Analytic gradients match h=1e-5 central differences on random inputs."""

    @pytest.mark.parametrize("name", sorted(ELEMENTWISE_UNARY))
    def test_unary(self, name):
        op = ELEMENTWISE_UNARY[name]
        lo, hi = _UNARY_DOMAIN.get(name, (-2.0, 2.0))
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x0 = rng.uniform(lo, hi, size=(5,))
            weights = Tensor(rng.uniform(1.0, 2.0, size=(5,)))
            analytic, numeric = grad_of(lambda t: tensor_sum(mul(op(t), weights)), x0)
            worst = max(worst, max_rel_err(analytic, numeric))
        assert worst < 1e-5

    @pytest.mark.parametrize("name", sorted(ELEMENTWISE_BINARY))
    def test_binary(self, name):
        op = ELEMENTWISE_BINARY[name]
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            x0 = rng.uniform(-2, 2, size=(4,))
            y0 = rng.uniform(0.5, 2, size=(4,))  # keep div well away from 0
            weights = Tensor(rng.uniform(1.0, 2.0, size=(4,)))
            analytic, numeric = grad_of(
                lambda t: tensor_sum(mul(op(t, Tensor(y0)), weights)), x0)
            worst = max(worst, max_rel_err(analytic, numeric))
        assert worst < 1e-5

    def test_composite_chain(self):
        from uncertain.tensor import sigmoid, tanh

        for seed in range(20):
            rng = np.random.default_rng(2000 + seed)
            x0 = rng.uniform(-2, 2, size=(6,))

            def f(t):
                return tensor_sum(mul(tanh(t), sigmoid(add(t, 0.5))))

            analytic, numeric = grad_of(f, x0)
            assert max_rel_err(analytic, numeric) < 1e-5


class TestStructuralOps:
    def test_reshape_transpose_roundtrip_gradient(self):
        x0 = np.arange(6.0).reshape(2, 3)
        with Tape() as tape:
            x = tape.watch(Tensor(x0))
            y = transpose(reshape(x, (3, 2)))
            grads = tape.backward(tensor_sum(square(y)))
        assert np.array_equal(grads[x.node_id].data, 2 * x0)

    def test_slice_and_concat_inverse(self):
        x0 = np.arange(8.0).reshape(2, 4)
        with Tape() as tape:
            x = tape.watch(Tensor(x0))
            left = slice_last(x, 0, 2)
            right = slice_last(x, 2, 4)
            back = concat([left, right], axis=-1)
            grads = tape.backward(tensor_sum(mul(back, back)))
        assert np.array_equal(back.data, x0)
        assert np.array_equal(grads[x.node_id].data, 2 * x0)

    def test_take_last_gradient_scatters(self):
        x0 = np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]])
        idx = np.array([2, 0])
        with Tape() as tape:
            x = tape.watch(Tensor(x0))
            got = take_last(x, idx)
            grads = tape.backward(tensor_sum(got))
        assert np.array_equal(got.data, [2.0, 3.0])
        want = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        assert np.array_equal(grads[x.node_id].data, want)

    def test_where_routes_gradients(self):
        mask = np.array([True, False, True])
        with Tape() as tape:
            a = tape.watch(Tensor([1.0, 2.0, 3.0]))
            b = tape.watch(Tensor([10.0, 20.0, 30.0]))
            grads = tape.backward(tensor_sum(where(mask, a, b)))
        assert np.array_equal(grads[a.node_id].data, [1.0, 0.0, 1.0])
        assert np.array_equal(grads[b.node_id].data, [0.0, 1.0, 0.0])

    def test_logsumexp_matches_numpy(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=(3, 5))
        got = logsumexp(Tensor(x0), axis=-1).data
        want = np.log(np.sum(np.exp(x0), axis=-1))
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_log_softmax_gradient(self):
        rng = np.random.default_rng(12)
        x0 = rng.normal(size=(4,))

        def f(t):
            return tensor_sum(mul(log_softmax(t), Tensor([1.0, 0.0, 0.0, 0.0])))

        analytic, numeric = grad_of(f, x0)
        assert max_rel_err(analytic, numeric) < 1e-6

    def test_diag_part(self):
        a0 = np.arange(9.0).reshape(3, 3)
        with Tape() as tape:
            a = tape.watch(Tensor(a0))
            grads = tape.backward(tensor_sum(square(diag_part(a))))
        want = np.zeros((3, 3))
        np.fill_diagonal(want, 2 * np.diag(a0))
        assert np.array_equal(grads[a.node_id].data, want)

    def test_mean(self):
        x = Tensor([[1.0, 3.0], [5.0, 7.0]])
        assert tensor_mean(x).item() == 4.0
        assert np.array_equal(tensor_mean(x, axis=0).data, [3.0, 5.0])


class TestTapeStructure:
    def test_parents_precede_children(self):
        with Tape() as tape:
            x = tape.watch(Tensor([1.0, 2.0]))
            y = tape.watch(Tensor([3.0, 4.0]))
            z = tensor_sum(square(add(mul(x, y), exp(x))))
            assert z.node_id == len(tape.nodes) - 1
        for nid, node in enumerate(tape.nodes):
            for pid in node.parents:
                assert pid is None or pid < nid

    def test_storage_is_row_major(self):
        t = transpose(Tensor(np.arange(6.0).reshape(2, 3)))
        assert t.data.flags["C_CONTIGUOUS"]
        assert np.array_equal(t.data.ravel(),
                              np.arange(6.0).reshape(2, 3).T.ravel())
        assert t.size == len(t.data.ravel())


class TestTapeDeterminism:
    def test_replay_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(123)
            x0 = rng.normal(size=(3, 3))
            with Tape() as tape:
                x = tape.watch(Tensor(x0))
                y = tensor_sum(square(exp(mul(x, 0.3))))
                g = tape.backward(y)[x.node_id].data
            return y.item(), g

        first_val, first_grad = run()
        second_val, second_grad = run()
        assert first_val == second_val
        assert np.array_equal(first_grad, second_grad)

    def test_every_reachable_adjoint_is_finite(self):
        rng = np.random.default_rng(9)
        with Tape() as tape:
            x = tape.watch(Tensor(rng.uniform(0.5, 1.5, size=(4,))))
            y = tensor_sum(mul(log(x), exp(x)))
            all_adj = tape.backward(y, leaves_only=False)
        assert all_adj[y.node_id].item() == 1.0
        for adj in all_adj.values():
            assert np.all(np.isfinite(adj.data))


class TestAsTensor:
    def test_random_variable_duck_typing(self):
        class FakeRV:
            def __init__(self):
                self.value = Tensor([1.0, 2.0])
                self.distribution = object()

        out = add(FakeRV(), Tensor([1.0, 1.0]))
        assert np.array_equal(out.data, [2.0, 3.0])
