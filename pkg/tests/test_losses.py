import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from geoseg.errors import EmptyBatch, EmptyRegion, SizeMismatch
from geoseg.losses import (
    final_loss,
    geometric_loss,
    iic_loss,
    joint_distribution,
    mutual_information,
    probability_vectors,
    sample_logits,
    scatter_logit_grad,
)
from geoseg.weakmask import PartialMask

LN2 = math.log(2.0)


def random_mask(r, h=8, w=8):
    labels = r.choice(np.array([0, 128, 255], np.uint8), size=(h, w))
    labels.flat[0], labels.flat[1] = 0, 255
    return PartialMask(labels)


def test_geometric_at_zero_logits():
    m = random_mask(np.random.default_rng(0))
    value, _ = geometric_loss(np.zeros((8, 8)), m)
    assert value == pytest.approx(2 * LN2, abs=1e-12)


def test_geometric_saturated():
    m = random_mask(np.random.default_rng(1))
    y = np.where(m.road, 20.0, np.where(m.nonroad, -20.0, 0.0))
    value, grad = geometric_loss(y, m)
    assert value < 1e-8 and np.max(np.abs(grad)) < 1e-8


def test_geometric_stable_for_huge_logits():
    m = random_mask(np.random.default_rng(2))
    y = np.where(m.road, -800.0, 800.0)
    value, grad = geometric_loss(y, m)
    assert np.isfinite(value) and np.isfinite(grad).all()
    assert value == pytest.approx(1600.0)


@pytest.mark.parametrize("seed", range(5))
def test_geometric_gradient(seed):
    r = np.random.default_rng(seed)
    m = random_mask(r)
    y = r.normal(0, 2, (8, 8))
    _, g = geometric_loss(y, m)
    fd = oracles.finite_difference(lambda z: geometric_loss(z, m)[0], y)
    assert oracles.rel_error(g, fd) < 1e-5
    assert (g[m.ignore] == 0).all()


def test_geometric_ignores_ignore_pixels():
    r = np.random.default_rng(3)
    m = random_mask(r)
    y = r.normal(size=(8, 8))
    y2 = y.copy()
    y2[m.ignore] += r.normal(0, 50, m.ignore.sum())
    assert geometric_loss(y, m)[0] == geometric_loss(y2, m)[0]


def test_geometric_errors():
    with pytest.raises(EmptyRegion):
        geometric_loss(np.zeros((2, 2)), PartialMask(np.full((2, 2), 255, np.uint8)))
    with pytest.raises(SizeMismatch):
        geometric_loss(np.zeros((3, 2)), PartialMask(np.array([[0, 255]], np.uint8)))


def test_joint_examples():
    one = np.array([[1.0, 0.0]])
    assert np.array_equal(joint_distribution(one, one).P, [[1, 0], [0, 0]])
    s = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(joint_distribution(s, s).P, [[0.5, 0], [0, 0.5]])
    u = np.full((5, 2), 0.5)
    assert np.allclose(joint_distribution(u, u).P, 0.25)
    with pytest.raises(EmptyBatch):
        joint_distribution(np.zeros((0, 2)), np.zeros((0, 2)))


@given(st.integers(0, 2**31), st.integers(1, 50))
def test_joint_sums_to_one(seed, n):
    r = np.random.default_rng(seed)
    s, sp = probability_vectors(r.normal(0, 5, n)), probability_vectors(r.normal(0, 5, n))
    j = joint_distribution(s, sp)
    assert abs(j.P.sum() - 1) < 1e-9
    assert np.allclose(j.p, j.P.sum(axis=1)) and np.allclose(j.p_prime, j.P.sum(axis=0))
    assert np.allclose(s.sum(axis=1), 1, atol=1e-12)


def test_iic_anchors():
    value, _, _ = iic_loss([40.0, -40.0], [40.0, -40.0])
    assert abs(value + LN2) < 1e-9
    value, gy, gyp = iic_loss(np.zeros(6), np.zeros(6))
    assert abs(value) < 1e-9
    with pytest.raises(EmptyBatch):
        iic_loss([], [])


@given(st.integers(0, 2**31), st.integers(1, 40), st.floats(0.1, 30))
def test_iic_bounds_and_bruteforce(seed, n, scale):
    r = np.random.default_rng(seed)
    y, yp = r.normal(0, scale, n), r.normal(0, scale, n)
    value, _, _ = iic_loss(y, yp)
    assert -LN2 - 1e-12 <= value <= 1e-12
    P = joint_distribution(probability_vectors(y), probability_vectors(yp)).P
    assert value == pytest.approx(-oracles.mi_bruteforce(P), abs=1e-9)


@given(st.integers(0, 2**31), st.integers(2, 30))
def test_iic_permutation_invariant(seed, n):
    r = np.random.default_rng(seed)
    y, yp = r.normal(0, 3, n), r.normal(0, 3, n)
    order = np.lexsort((yp, y))
    assert iic_loss(y, yp)[0] == pytest.approx(iic_loss(y[order], yp[order])[0], abs=1e-15)


@pytest.mark.parametrize("symmetrize", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_iic_gradient(seed, symmetrize):
    r = np.random.default_rng(seed)
    y, yp = r.normal(0, 2, 16), r.normal(0, 2, 16)
    _, gy, gyp = iic_loss(y, yp, symmetrize)
    fd = oracles.finite_difference(lambda z: iic_loss(z, yp, symmetrize)[0], y)
    fdp = oracles.finite_difference(lambda z: iic_loss(y, z, symmetrize)[0], yp)
    assert oracles.rel_error(gy, fd) < 1e-4
    assert oracles.rel_error(gyp, fdp) < 1e-4


def test_mutual_information_clamp_keeps_gradient_finite():
    value, grad = mutual_information(np.array([[0.5, 0.0], [0.0, 0.5]]))
    assert value == pytest.approx(LN2)
    assert np.isfinite(grad).all()


def test_sampling_and_scatter_are_adjoint():
    r = np.random.default_rng(4)
    y = r.normal(size=(6, 9))
    pts = r.uniform(0, [9, 6], (11, 2))
    g = r.normal(size=11)
    lhs = np.dot(sample_logits(y, pts), g)
    rhs = np.sum(y * scatter_logit_grad(g, pts, y.shape))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_sampling_at_pixel_centre_is_exact():
    y = np.arange(12.0).reshape(3, 4)
    assert sample_logits(y, [[2.5, 1.5]])[0] == y[1, 2]
    assert sample_logits(y, [[2.0, 1.5]])[0] == pytest.approx(0.5 * (y[1, 1] + y[1, 2]))


def test_final_without_pairs_is_geometric():
    r = np.random.default_rng(5)
    m, mp = random_mask(r), random_mask(r)
    y, yp = r.normal(size=(8, 8)), r.normal(size=(8, 8))
    res = final_loss(y, yp, m, mp)
    geo = 0.5 * (geometric_loss(y, m)[0] + geometric_loss(yp, mp)[0])
    assert res.value == geo and res.consistency == 0.0
    assert final_loss(y, yp, m, mp, np.zeros((0, 2)), np.zeros((0, 2))).value == geo


def test_final_perfect_case():
    m = PartialMask(np.array([[0, 0, 0, 0], [128, 128, 128, 128], [255, 255, 255, 255]], np.uint8))
    y = np.where(m.road, 40.0, -40.0)
    pts = np.array([[0.5, 0.5], [1.5, 2.5]])   # one non-road, one road point
    res = final_loss(y, y, m, m, pts, pts)
    assert res.value == pytest.approx(-LN2, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_final_gradient(seed):
    r = np.random.default_rng(seed)
    m, mp = random_mask(r), random_mask(r)
    y, yp = r.normal(0, 2, (8, 8)), r.normal(0, 2, (8, 8))
    pts, ptsp = r.uniform(0, 8, (4, 2)), r.uniform(0, 8, (4, 2))
    res = final_loss(y, yp, m, mp, pts, ptsp, weight=0.7)
    fd = oracles.finite_difference(lambda z: final_loss(z, yp, m, mp, pts, ptsp, weight=0.7).value, y)
    fdp = oracles.finite_difference(lambda z: final_loss(y, z, m, mp, pts, ptsp, weight=0.7).value, yp)
    assert oracles.rel_error(res.grad, fd) < 1e-4
    assert oracles.rel_error(res.grad_prime, fdp) < 1e-4
