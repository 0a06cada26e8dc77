import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfalab.linalg import (
    batch_cross_entropy,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    make_rng,
    pinv,
    project_rows_to_nullspace,
    random_orthonormal,
    row_space_basis,
    softmax_cross_entropy,
    svd_compact,
    sym_psd_sqrt_factor,
)
from conftest import central_diff, rel_err

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_ce_uniform_logits():
    loss, _ = softmax_cross_entropy([0.0, 0.0], 0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_ce_closed_form():
    loss, _ = softmax_cross_entropy([1.0, 0.0], 0)
    assert loss == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)
    assert loss == pytest.approx(0.313262, abs=1e-6)


def test_ce_gradient_matches_finite_differences():
    x = np.array([0.3, -0.7, 1.1])
    _, g = softmax_cross_entropy(x, 1)
    fd = central_diff(lambda v: softmax_cross_entropy(v, 1)[0], x)
    assert rel_err(g, fd) < 1e-6


@given(arrays(np.float64, st.integers(2, 6), elements=finite), st.floats(-100, 100), st.data())
def test_ce_shift_invariance(logits, c, data):
    t = data.draw(st.integers(0, logits.size - 1))
    a, ga = softmax_cross_entropy(logits, t)
    b, gb = softmax_cross_entropy(logits + c, t)
    assert abs(a - b) < 1e-12 * max(1.0, abs(a))
    assert np.allclose(ga, gb, atol=1e-12)


def test_ce_rejects_bad_target():
    with pytest.raises(ValueError):
        softmax_cross_entropy([0.0, 1.0], 2)


def test_batch_ce_matches_single(rng):
    logits = rng.standard_normal((7, 4))
    labels = rng.integers(0, 4, 7)
    losses, grads = batch_cross_entropy(logits, labels)
    for i in range(7):
        l, g = softmax_cross_entropy(logits[i], labels[i])
        assert losses[i] == pytest.approx(l, abs=1e-14)
        assert np.allclose(grads[i], g, atol=1e-15)


def test_normalize_examples():
    out = l2_normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0]]))
    assert np.allclose(out[0], [0.6, 0.8], atol=1e-15)
    assert np.array_equal(out[1], [0.0, 0.0])


@given(arrays(np.float64, (5, 3), elements=finite))
def test_normalize_unit_norm(m):
    norms = np.linalg.norm(m, axis=1)
    out = l2_normalize_rows(m)
    ok = norms > 1e-6
    assert np.all(np.abs(np.linalg.norm(out[ok], axis=1) - 1) < 1e-12)


def test_normalize_backward_finite_differences(rng):
    u = rng.standard_normal((3, 4))
    up = rng.standard_normal((3, 4))
    g = l2_normalize_rows_backward(u, up)
    fd = central_diff(lambda v: float(np.sum(l2_normalize_rows(v) * up)), u)
    assert rel_err(g, fd) < 1e-8


def test_nullspace_examples():
    a = np.array([[1.0, 1.0]]) / np.sqrt(2)
    out = project_rows_to_nullspace(a, np.array([[1.0, 0.0]]))
    assert abs(out[0, 0]) < 1e-15 and out[0, 1] > 0
    same = np.array([[0.0, 2.0]])
    assert np.allclose(project_rows_to_nullspace(same, np.array([[1.0, 0.0]])), same, atol=1e-15)


def test_nullspace_random(rng):
    a = rng.standard_normal((3, 8))
    b = rng.standard_normal((2, 8))
    out = project_rows_to_nullspace(a, b)
    assert np.linalg.norm(out @ b.T) < 1e-10


def test_svd_examples():
    _, s, _ = svd_compact(np.diag([3.0, 1.0]))
    assert np.allclose(s, [3.0, 1.0], atol=1e-14)
    u = np.array([1.0, 2.0, 2.0])
    v = np.array([3.0, 4.0])
    _, s, _ = svd_compact(np.outer(u, v))
    assert s.shape == (1,)
    assert s[0] == pytest.approx(15.0, abs=1e-12)


def test_svd_random_against_numpy_oracle(rng):
    m = rng.standard_normal((5, 7))
    u, s, v = svd_compact(m)
    assert np.linalg.norm(u @ np.diag(s) @ v.T - m) < 1e-9
    assert np.linalg.norm(u.T @ u - np.eye(u.shape[1])) < 1e-10
    assert np.linalg.norm(v.T @ v - np.eye(v.shape[1])) < 1e-10
    assert np.allclose(s, np.linalg.svd(m, compute_uv=False), atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-5, 5)))
def test_svd_sorted_and_reconstructs(m):
    if np.abs(m).max() < 1e-3:
        return
    u, s, v = svd_compact(m)
    assert np.all(np.diff(s) <= 0)
    assert np.all(s > 0)
    assert np.linalg.norm(u @ np.diag(s) @ v.T - m) < 1e-9 * max(1.0, np.abs(m).max())


def test_pinv_matches_numpy(rng):
    m = rng.standard_normal((4, 6))
    assert np.allclose(pinv(m), np.linalg.pinv(m), atol=1e-11)


def test_row_space_basis_shape(rng):
    b = rng.standard_normal((2, 5))
    basis = row_space_basis(b)
    assert basis.shape == (5, 2)
    assert np.allclose(b @ basis @ basis.T, b, atol=1e-12)


def test_random_orthonormal():
    r1 = random_orthonormal(1, make_rng(3))
    assert r1.shape == (1, 1) and abs(abs(r1[0, 0]) - 1) < 1e-15
    r4 = random_orthonormal(4, make_rng(3))
    assert np.linalg.norm(r4 @ r4.T - np.eye(4)) < 1e-10
    assert np.array_equal(r4, random_orthonormal(4, make_rng(3)))


def test_rng_streams_differ():
    a = make_rng(5, 0).random(4)
    b = make_rng(5, 1).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, make_rng(5, 0).random(4))


def test_psd_factor():
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    f = sym_psd_sqrt_factor(cov)
    assert np.allclose(f @ f.T, cov)
    singular = np.array([[1.0, 1.0], [1.0, 1.0]])
    f = sym_psd_sqrt_factor(singular)
    assert np.allclose(f @ f.T, singular, atol=1e-12)
    with pytest.raises(ValueError):
        sym_psd_sqrt_factor(np.array([[1.0, 0.0], [0.0, -1.0]]))
