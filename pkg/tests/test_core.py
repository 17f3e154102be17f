import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitleak.core import (Adam, AdamState, DimensionCapError, GradTape, NonFiniteError, Rng,
                            TapeError, Tensor, adam_step, backward, forward_op, gradient_error,
                            jacobi_eigh, jacobian, row_jacobians, spectral_norm, sym_eig,
                            top_singular)
from splitleak.core import tensor as T


# ---------------------------------------------------------------- forward values

def test_matmul_identity():
    out = forward_op("matmul", [[1.0, 2.0], [3.0, 4.0]], np.eye(2))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_sigmoid_at_zero():
    assert T.sigmoid(np.array(0.0)).item() == 0.5


def test_rms_norm_hand_value():
    out = T.rms_norm(np.array([3.0, 4.0]), np.ones(2)).data
    np.testing.assert_allclose(out, [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], rtol=1e-6)


def test_rms_norm_unit_rms():
    x = Rng(1).normal(size=(5, 7))
    y = T.rms_norm(x, np.ones(7), eps=0.0).data
    np.testing.assert_allclose(np.sqrt((y ** 2).mean(axis=-1)), 1.0, atol=1e-10)


def test_causal_softmax_rows_and_future_independence():
    rng = Rng(2)
    s = rng.normal(size=(3, 6, 6))
    p = T.causal_softmax(s).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(np.triu(p, 1) == 0)
    s2 = s.copy()
    s2[..., :, 4:] += 10.0         # perturb keys of future positions only
    p2 = T.causal_softmax(s2).data
    np.testing.assert_array_equal(p[..., :4, :], p2[..., :4, :])


def test_unknown_primitive():
    with pytest.raises(ValueError):
        forward_op("conv2d", np.ones(2))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_rejected():
    with pytest.raises(NonFiniteError):
        T.scale(np.array([1e308]), 1e10)


# ---------------------------------------------------------------- tape

def test_square_gradient():
    x = Tensor(np.array(3.0))
    with GradTape() as tape:
        tape.watch(x)
        y = T.mul(x, x)
    assert backward(tape, y)[0] == pytest.approx(6.0)


def test_sum_sigmoid_gradient():
    x = Tensor(np.zeros(4))
    with GradTape() as tape:
        tape.watch(x)
        y = T.sum(T.sigmoid(x))
    np.testing.assert_allclose(tape.gradient(y, [x])[0], 0.25)


def test_unmarked_leaf_gets_nothing():
    x, w = Tensor(np.ones(3)), Tensor(np.arange(3.0))
    with GradTape() as tape:
        tape.watch(x)
        y = T.sum(T.mul(x, w))
    gx, gw = tape.gradient(y, [x, w])
    np.testing.assert_array_equal(gx, [0, 1, 2])
    assert gw is None


def test_output_not_on_tape():
    with GradTape() as tape:
        y = T.sum(Tensor(np.ones(2)))
    with pytest.raises(TapeError):
        tape.gradient(y, [])


def test_non_scalar_output():
    x = Tensor(np.ones(2))
    with GradTape() as tape:
        tape.watch(x)
        y = T.scale(x, 2.0)
    with pytest.raises(ValueError):
        tape.gradient(y, [x])


def _weights(rng, *shape):
    return rng.normal(size=shape)


# every differentiable primitive, as a scalar function of one tracked input
def _cases(rng):
    A = _weights(rng, 4, 3)
    B = _weights(rng, 3, 5)
    R = _weights(rng, 2, 3, 4)
    g = rng.uniform(0.5, 1.5, size=4)
    ids = rng.integers(0, 6, size=5)
    tgt = rng.integers(0, 5, size=(2, 3))
    ref = _weights(rng, 2, 3, 4)
    C = _weights(rng, 3, 4)
    yield "matmul-left", lambda x: T.sum(T.sigmoid(T.matmul(x, B))), A
    yield "matmul-right", lambda x: T.sum(T.sigmoid(T.matmul(A, x))), B
    yield "add", lambda x: T.sum(T.sigmoid(T.add(x, A))), _weights(rng, 4, 3)
    yield "sub", lambda x: T.sum(T.sigmoid(T.sub(A, x))), _weights(rng, 4, 3)
    yield "mul", lambda x: T.sum(T.mul(x, T.sigmoid(x))), A
    yield "scale", lambda x: T.sum(T.sigmoid(T.scale(x, -1.7))), A
    yield "sigmoid", lambda x: T.sum(T.mul(T.sigmoid(x), A)), A
    yield "causal_softmax", lambda x: T.sum(T.mul(T.causal_softmax(x), _W44)), _weights(rng, 4, 4)
    yield "rms_norm", lambda x: T.sum(T.mul(T.rms_norm(x, g), R)), _weights(rng, 2, 3, 4)
    yield "rms_norm-gain", lambda x: T.sum(T.mul(T.rms_norm(R, x), R)), g
    yield "take_rows", lambda x: T.sum(T.sigmoid(T.take_rows(x, ids))), _weights(rng, 6, 3)
    yield "reshape", lambda x: T.sum(T.mul(T.reshape(x, (3, 4)), C)), A
    yield "transpose", lambda x: T.sum(T.sigmoid(T.transpose(x, (1, 0)))), A
    yield "sum-axis", lambda x: T.sum(T.sigmoid(T.sum(x, axis=0))), A
    yield "cosine_distance", lambda x: T.sum(T.cosine_distance(x, ref)), _weights(rng, 2, 3, 4)
    yield "euclidean_distance", lambda x: T.sum(T.euclidean_distance(x, ref)), R
    yield "cross_entropy", lambda x: T.cross_entropy(x, tgt), _weights(rng, 2, 3, 5)


_W44 = Rng(99).normal(size=(4, 4))


@pytest.mark.parametrize("name", [c[0] for c in _cases(Rng(0))])
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for k in range(20):
        for nm, f, x in _cases(Rng(1000 + k)):
            if nm == name:
                worst = max(worst, gradient_error(f, x))
    assert worst < 1e-6, (name, worst)


# ---------------------------------------------------------------- jacobians

def test_jacobian_linear_map():
    A = Rng(3).normal(size=(4, 6))
    J = jacobian(lambda z: T.matmul(z, A), np.ones((1, 4)))
    np.testing.assert_allclose(J, A, atol=1e-14)


def test_jacobian_identity_and_sigmoid():
    np.testing.assert_array_equal(jacobian(lambda z: z, np.ones(5)), np.eye(5))
    np.testing.assert_allclose(jacobian(T.sigmoid, np.zeros(3)), 0.25 * np.eye(3))


def test_jacobian_matches_finite_differences():
    rng = Rng(4)
    W = rng.normal(size=(3, 3))
    f = lambda z: T.rms_norm(T.matmul(T.sigmoid(z), W), np.ones(3))  # noqa: E731
    z = rng.normal(size=(2, 3))
    J = jacobian(f, z)
    h = 1e-6
    fd = np.zeros_like(J)
    for i in range(z.size):
        e = np.zeros(z.size)
        e[i] = h
        fd[i] = (f(Tensor(z + e.reshape(z.shape))).data - f(Tensor(z - e.reshape(z.shape))).data).reshape(-1) / (2 * h)
    assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-5


def test_jacobian_cap():
    with pytest.raises(DimensionCapError):
        jacobian(lambda z: z, np.ones(10), cap=8)


def test_row_jacobians_block_structure():
    W = Rng(5).normal(size=(3, 4))
    Js = row_jacobians(lambda z: T.matmul(z, W), np.ones((6, 3)))
    assert Js.shape == (6, 3, 4)
    np.testing.assert_allclose(Js, np.broadcast_to(W, Js.shape))


# ---------------------------------------------------------------- eigen / SVD

def test_sym_eig_trivial_cases():
    vals, vecs = sym_eig(np.eye(3))
    np.testing.assert_allclose(vals, 1.0)
    vals, vecs = sym_eig(np.diag([1.0, 4.0]))
    np.testing.assert_allclose(vals, [4, 1])
    np.testing.assert_allclose(np.abs(vecs), [[0, 1], [1, 0]], atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 5, 16, 33])
def test_sym_eig_reconstruction_and_orthonormality(n):
    B = Rng(n).normal(size=(n + 2, n))
    S = B.T @ B
    vals, V = sym_eig(S, method="jacobi")
    recon = (V * vals) @ V.T
    assert np.linalg.norm(recon - S) / np.linalg.norm(S) < 1e-8
    assert np.abs(V.T @ V - np.eye(n)).max() < 1e-10
    np.testing.assert_allclose(vals, np.sort(np.linalg.eigvalsh(S))[::-1], rtol=1e-9, atol=1e-9)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(ValueError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_jacobi_batched():
    B = Rng(7).normal(size=(4, 6, 6))
    S = B @ np.swapaxes(B, 1, 2)
    vals, V = jacobi_eigh(S)
    np.testing.assert_allclose(V @ (vals[..., None] * np.swapaxes(V, 1, 2)), S, atol=1e-10)


def test_top_singular_trivial():
    s, u, v = top_singular(np.diag([3.0, 1.0]))
    assert s == pytest.approx(3.0, rel=1e-12)
    np.testing.assert_allclose(v, [1, 0], atol=1e-15)
    assert spectral_norm(2 * np.eye(4)) == pytest.approx(2.0, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 10_000))
def test_top_singular_vs_lapack(r, c, seed):
    M = Rng(seed).normal(size=(r, c))
    s, u, v = top_singular(M)
    assert s == pytest.approx(np.linalg.svd(M, compute_uv=False)[0], rel=1e-8)
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(M @ v, s * u, atol=1e-9)


# ---------------------------------------------------------------- adam / rng

def test_adam_zero_gradient_keeps_param():
    st_ = AdamState.zeros_like(np.ones(3))
    np.testing.assert_array_equal(adam_step(np.ones(3), np.zeros(3), st_), np.ones(3))


def test_adam_first_step_magnitude_is_lr():
    st_ = AdamState.zeros_like(np.zeros(2), lr=0.01)
    p = adam_step(np.zeros(2), np.array([5.0, -0.3]), st_)
    np.testing.assert_allclose(p, [-0.01, 0.01], rtol=1e-6)
    assert st_.step == 1


def test_adam_solves_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    opt = Adam(lr=0.05)
    p = {"x": np.zeros(3)}
    for _ in range(500):
        p = opt.update(p, {"x": 2 * (p["x"] - target)})
    assert np.sum((p["x"] - target) ** 2) < 1e-6


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.ones(3), np.ones(2), AdamState.zeros_like(np.ones(3)))


def test_rng_determinism_and_streams():
    a = Rng(42).derive(3).normal(size=10)
    b = Rng(42).derive(3).normal(size=10)
    c = Rng(42).derive(4).normal(size=10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
