import itertools
import math
import time

import numpy as np
import pytest

from splitleak.core import Rng, Tensor
from splitleak.core import tensor as T
from splitleak.defense import (GAUSSIAN_LEVELS, RATIO_LEVELS, DefenseContext, DefenseError,
                               DefenseSpec, apply_defense, element_sparsify, gaussian_noise,
                               inverse_jacobian_bundle, l0_scores, pripert_l0, pripert_l2,
                               regularized_inverse, theorem2_verify, token_sparsify)
from splitleak.model import ModelConfig, init_model


def linear(A):
    return lambda z: T.matmul(z, A)


def bundle_for(G):
    """A bundle wrapping an explicit map, for single-row activations."""
    from splitleak.defense import InverseJacobianBundle
    return InverseJacobianBundle(G=np.asarray(G, float), epsilon=1.0, endpoints=1, rows=(0,),
                                 shape=(1, np.shape(G)[0]))


# ------------------------------------------------------------------ spec

def test_spec_validation_and_levels():
    with pytest.raises(DefenseError):
        DefenseSpec(kind="blur")
    with pytest.raises(DefenseError):
        DefenseSpec(kind="element-sparsify", ratio=1.5)
    assert [DefenseSpec.at_level("gaussian", i).variance for i in range(1, 6)] == \
        [1e-4, 1e-3, 1e-2, 1e-1, 1.0]
    assert [DefenseSpec.at_level("pripert-l0", i).ratio for i in range(1, 6)] == \
        [0.1, 0.3, 0.5, 0.7, 0.9]
    assert GAUSSIAN_LEVELS == (1e-4, 1e-3, 1e-2, 1e-1, 1.0) and RATIO_LEVELS[2] == 0.5


# ------------------------------------------------------------------ baselines

def test_gaussian_zero_variance_is_identity():
    h = Rng(1).normal(size=(3, 4))
    np.testing.assert_array_equal(gaussian_noise(h, 0.0, Rng(0)), h)


def test_gaussian_moments():
    d = gaussian_noise(np.zeros(1_000_000), 1.0, Rng(2))
    assert abs(d.mean()) < 0.01
    assert d.var() == pytest.approx(1.0, rel=0.01)


def test_element_sparsify_hand_case():
    np.testing.assert_array_equal(element_sparsify([3.0, -1.0, 0.5, -4.0], 0.5), [3, 0, 0, -4])
    h = np.array([[1.0, -2.0], [3.0, 0.5]])
    np.testing.assert_array_equal(element_sparsify(h, 0.0), h)
    np.testing.assert_array_equal(element_sparsify(h, 1.0), 0)


def test_element_sparsify_ties_by_index():
    np.testing.assert_array_equal(element_sparsify([1.0, -1.0, 1.0, 2.0], 0.5), [0, 0, 1, 2])


def test_token_sparsify_hand_case():
    h = np.array([[5.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    np.testing.assert_array_equal(token_sparsify(h, 1 / 3), [[5, 0], [0, 0], [3, 0]])
    np.testing.assert_array_equal(token_sparsify(h, 0.0), h)


@pytest.mark.parametrize("ratio", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_sparsify_counts(ratio):
    h = Rng(3).normal(size=(10, 6))
    e = element_sparsify(h, ratio)
    assert np.sum(e == 0) == math.floor(ratio * h.size)
    np.testing.assert_array_equal(e[e != 0], h[e != 0])
    t = token_sparsify(h, ratio)
    assert np.sum(np.all(t == 0, axis=1)) == math.floor(ratio * 10)


# ------------------------------------------------------------------ inverse Jacobian

def test_regularized_inverse_push_through():
    J = Rng(4).normal(size=(3, 7))
    a = J.T @ np.linalg.inv(J @ J.T + 0.3 * np.eye(3))
    np.testing.assert_allclose(regularized_inverse(J, 0.3), a, atol=1e-12)
    np.testing.assert_allclose(regularized_inverse(J.T, 0.3), J @ np.linalg.inv(J.T @ J + 0.3 * np.eye(7)),
                               atol=1e-12)


def test_bundle_linear_small_epsilon_is_inverse():
    A = Rng(5).normal(size=(4, 4)) + 3 * np.eye(4)
    b = inverse_jacobian_bundle(linear(A), np.ones((1, 4)), steps=1, epsilon=1e-8)
    assert np.abs(b.G - np.linalg.inv(A)).max() < 1e-4


def test_bundle_identity():
    b = inverse_jacobian_bundle(lambda z: z, np.ones((2, 3)), steps=1, epsilon=1.0)
    np.testing.assert_allclose(b.G, 0.5 * np.eye(6), atol=1e-15)


def test_bundle_two_steps_differ_on_nonlinear_map():
    m = init_model(ModelConfig(vocab_size=8, hidden_dim=4, num_blocks=2, split_point=1,
                               num_heads=1, ffn_dim=4, max_seq_len=4, seed=1))
    z = m.embed([1, 2, 3]).data
    one = inverse_jacobian_bundle(m.client_forward, z, steps=1)
    propose = lambda b: 0.5 * np.ones(b.G.shape[0])  # noqa: E731
    two = inverse_jacobian_bundle(m.client_forward, z, steps=2, propose=propose)
    three = inverse_jacobian_bundle(m.client_forward, z, steps=3, propose=propose)
    assert two.endpoints == 2 and not np.allclose(one.G, two.G)
    assert not np.allclose(two.G, three.G)
    # the trapezoid over a linear map is exact at every step count
    A = Rng(6).normal(size=(4, 4))
    b1 = inverse_jacobian_bundle(linear(A), np.ones((1, 4)), steps=1)
    b3 = inverse_jacobian_bundle(linear(A), np.ones((1, 4)), steps=3, propose=propose)
    np.testing.assert_allclose(b1.G, b3.G, atol=1e-12)


# ------------------------------------------------------------------ PriPert

def test_pripert_l2_diagonal():
    h = np.zeros((1, 2))
    out = pripert_l2(h, bundle_for(np.diag([3.0, 1.0])), 0.7)
    np.testing.assert_allclose(out, [[0.7, 0.0]], atol=1e-15)


def test_pripert_l2_norm_and_optimality():
    rng = Rng(7)
    G = rng.normal(size=(5, 5))
    h = rng.normal(size=(1, 5))
    mu = 0.8
    out = pripert_l2(h, bundle_for(G), mu)
    delta = (out - h).reshape(-1)
    assert np.linalg.norm(delta) == pytest.approx(mu, abs=1e-12)
    best = np.linalg.norm(delta @ G)
    for _ in range(1000):
        d = rng.normal(size=5)
        assert np.linalg.norm(mu * d / np.linalg.norm(d) @ G) <= best + 1e-12


def test_pripert_l0_identity_zeroes_largest():
    h = np.array([[0.5, -3.0, 1.0, 2.0]])
    out = pripert_l0(h, bundle_for(np.eye(4)), 0.5)
    np.testing.assert_array_equal(out, [[0.5, 0.0, 1.0, 0.0]])
    alt = pripert_l0(h, bundle_for(np.eye(4)), 0.5, order="min-impact-zeroed")
    np.testing.assert_array_equal(alt, element_sparsify(h, 0.5))


def test_pripert_l0_exhaustive_two_coordinates():
    rng = Rng(8)
    for _ in range(50):
        A = rng.normal(size=(2, 2)) + 2 * np.eye(2)
        z = rng.normal(size=(1, 2))
        h = z @ A
        b = inverse_jacobian_bundle(linear(A), z, steps=1)
        out = pripert_l0(h, b, 0.5)
        devs = []
        for j in range(2):
            d = np.zeros(2)
            d[j] = -h[0, j]
            devs.append(np.linalg.norm(d @ b.G))
        chosen = int(np.flatnonzero(out[0] == 0)[0])
        assert devs[chosen] == pytest.approx(max(devs))


def test_pripert_l0_support_and_ratio0():
    h = Rng(9).normal(size=(1, 6))
    h[0, 2] = 0.0
    b = bundle_for(Rng(10).normal(size=(6, 6)))
    out = pripert_l0(h, b, 0.5)
    assert set(np.flatnonzero(out)) <= set(np.flatnonzero(h))
    np.testing.assert_array_equal(pripert_l0(h, b, 0.0), h)
    assert l0_scores(h, b)[2] == 0.0


# ------------------------------------------------------------------ dispatcher

@pytest.fixture(scope="module")
def desk():
    m = init_model(ModelConfig(seed=2))
    ids = list(Rng(3).integers(2, 64, size=16))
    h0 = m.embed(ids).data
    return m, h0, m.client_forward(h0).data


def test_apply_none_and_errors(desk):
    m, h0, h = desk
    np.testing.assert_array_equal(apply_defense(h, DefenseSpec()), h)
    with pytest.raises(DefenseError):
        apply_defense(h, DefenseSpec(kind="pripert-l0", ratio=0.5))
    with pytest.raises(DefenseError):
        apply_defense(h, DefenseSpec(kind="gaussian", variance=1.0))


def test_selective_empty_set_passes_through(desk):
    m, h0, h = desk
    ctx = DefenseContext(m.client_forward, h0)
    for kind in ("pripert-l0", "pripert-l2"):
        out = apply_defense(h, DefenseSpec(kind=kind, ratio=0.5, protected=()), ctx)
        np.testing.assert_array_equal(out, h)


def test_selective_touches_only_protected_rows(desk):
    m, h0, h = desk
    ctx = DefenseContext(m.client_forward, h0)
    for spec in (DefenseSpec(kind="pripert-l0", ratio=0.5, protected=(1, 5)),
                 DefenseSpec(kind="pripert-l2", budget=1.0, protected=(1, 5))):
        out = apply_defense(h, spec, ctx)
        others = [i for i in range(16) if i not in (1, 5)]
        np.testing.assert_array_equal(out[others], h[others])
        assert not np.array_equal(out[[1, 5]], h[[1, 5]])


def test_selective_quarter_is_cheaper(desk):
    m, h0, h = desk
    ctx = DefenseContext(m.client_forward, h0)

    def best_time(spec):
        ts = []
        for _ in range(3):
            t0 = time.perf_counter()
            apply_defense(h, spec, ctx)
            ts.append(time.perf_counter() - t0)
        return min(ts)

    full = best_time(DefenseSpec(kind="pripert-l0", ratio=0.5))
    quarter = best_time(DefenseSpec(kind="pripert-l0", ratio=0.5, protected=(0, 5, 10, 15)))
    assert quarter < 0.6 * full


# ------------------------------------------------------------------ linear guarantee

def test_linear_guarantee_isotropic():
    rep = theorem2_verify(2 * np.eye(3), np.eye(3), np.zeros(3), 1.0,
                          delta=np.array([1.0, 0.0, 0.0]))
    assert rep.deviation_norm == pytest.approx(0.5) and rep.bound == pytest.approx(0.5)
    assert rep.bound_holds


def test_linear_guarantee_hand_geometry():
    E = np.array([[0.0, 0.0], [1.0, 0.0]])
    rep = theorem2_verify(np.eye(2), E, E[0], 0.6)
    assert rep.nn_condition and rep.nn_fails and rep.recovered == 1
    rep = theorem2_verify(np.eye(2), E, E[0], 0.4)
    assert not rep.nn_condition and not rep.nn_fails and rep.recovered == 0


def test_linear_guarantee_random_sweep():
    rng = Rng(11)
    for i in range(200):
        n = int(rng.integers(2, 7))
        A = rng.normal(size=(n, n))
        d = rng.normal(size=n)
        mu = float(rng.uniform(0.1, 2.0))
        d = mu * rng.uniform(0.1, 1.0) * d / np.linalg.norm(d)
        assert theorem2_verify(A, rng.normal(size=(4, n)), np.zeros(n), mu, delta=d).bound_holds


def test_linear_guarantee_rejects_singular_and_overbudget():
    with pytest.raises(DefenseError):
        theorem2_verify(np.zeros((2, 2)), np.eye(2), np.zeros(2), 1.0)
    with pytest.raises(DefenseError):
        theorem2_verify(np.eye(2), np.eye(2), np.zeros(2), 1.0, delta=np.array([2.0, 0.0]))
