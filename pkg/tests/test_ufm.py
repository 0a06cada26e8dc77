import numpy as np
import pytest

from cfalab.errors import ConvergenceError
from cfalab.heads import HeadPair, symmetric_heads
from cfalab.linalg import l2_normalize_rows, make_rng
from cfalab.ufm import (
    UFMProblem,
    balanced_labels,
    column_losses,
    domain_projection_norm,
    lemma_gamma,
    random_sphere_columns,
    solve_ufm,
    verify_lemma_alignment,
    verify_theorem1,
)
from conftest import central_diff, rel_err


@pytest.fixture(scope="module")
def optimum():
    heads = symmetric_heads(3, 2, 8, make_rng(0))
    y, e = balanced_labels(3, 2, 60)
    problem = UFMProblem(heads, y, e, 1.0)
    return problem, solve_ufm(problem, rng=make_rng(1))


def test_problem_validation():
    heads = symmetric_heads(2, 2, 4, make_rng(0))
    with pytest.raises(ValueError):
        UFMProblem(heads, [0, 0], [0, 1])  # class 1 missing
    with pytest.raises(ValueError):
        UFMProblem(HeadPair(np.eye(2, 3), np.eye(3)[1:]), [0, 1], [0, 1])  # d < K + E
    bad = HeadPair(np.eye(2, 4), l2_normalize_rows(np.array([[1.0, 0, 1, 0], [0, 0, 0, 1]])))
    with pytest.raises(ValueError):
        UFMProblem(bad, [0, 1], [0, 1])


def test_single_column_descends_to_class_direction():
    # columns are independent, so column 0 behaves as a one-sample problem
    w1 = np.eye(2, 4)
    heads = HeadPair(w1, np.eye(4)[2:3])
    problem = UFMProblem(heads, [0, 1], [0, 0], lam=0.0)
    z0 = random_sphere_columns(4, 2, make_rng(3))
    z = solve_ufm(problem, z0=z0)
    assert problem.objective(z) < problem.objective(z0)
    # maximizer of (w1_0 - w1_1) . z on the sphere
    target = (w1[0] - w1[1]) / np.sqrt(2)
    assert np.allclose(z[:, 0], target, atol=1e-3)


def test_column_gradient_matches_finite_differences():
    heads = symmetric_heads(3, 2, 6, make_rng(0), beta1=3.0, beta2=2.0)
    zt = random_sphere_columns(6, 4, make_rng(1)).T
    y, e = np.array([0, 1, 2, 0]), np.array([0, 1, 1, 0])
    _, g = column_losses(heads, zt, y, e, 0.5)
    fd = central_diff(lambda v: float(column_losses(heads, v, y, e, 0.5)[0].sum()), zt)
    assert rel_err(g, fd) < 1e-6


def test_determinism():
    heads = symmetric_heads(2, 2, 5, make_rng(0))
    problem = UFMProblem(heads, *balanced_labels(2, 2, 8), 1.0)
    a = solve_ufm(problem, rng=make_rng(4))
    b = solve_ufm(problem, rng=make_rng(4))
    assert np.array_equal(a, b)


def test_non_convergence_carries_trace():
    heads = symmetric_heads(2, 2, 5, make_rng(0))
    problem = UFMProblem(heads, *balanced_labels(2, 2, 8), 1.0)
    with pytest.raises(ConvergenceError) as info:
        solve_ufm(problem, steps=5, rng=make_rng(0))
    assert len(info.value.trace) == 5


def test_alignment_scale_formula():
    assert lemma_gamma(2) == 2.0
    assert lemma_gamma(4) == pytest.approx(4 / 3)


def test_alignment_fit_example():
    heads = symmetric_heads(3, 2, 8, make_rng(1), class_geometry="etf")
    y, e = balanced_labels(3, 2, 60)
    z = solve_ufm(UFMProblem(heads, y, e, 0.0), rng=make_rng(2))
    gamma, resid = verify_lemma_alignment(z, heads, y)
    assert resid < 0.05
    assert abs(gamma - 1.5) < 0.1


def test_decomposition_at_optimum(optimum):
    problem, z = optimum
    report = verify_theorem1(z, problem.heads, problem.y, problem.e)
    assert report.residual_fraction < 1e-2
    assert report.within_class_spread < 1e-2
    assert report.within_domain_spread < 1e-2
    assert 0.0 <= report.residual_fraction <= 1.0


def test_class_coefficients_agree_across_domains(optimum):
    problem, z = optimum
    report = verify_theorem1(z, problem.heads, problem.y, problem.e)
    a = np.linalg.pinv(problem.heads.w1.T) @ z
    for k in range(3):
        per_domain = [a[:, (problem.y == k) & (problem.e == j)].mean(axis=1) for j in range(2)]
        assert np.linalg.norm(per_domain[0] - per_domain[1]) <= report.within_class_spread + 1e-12


def test_optimum_beats_random_features(optimum):
    problem, z = optimum
    rng = make_rng(7)
    best = min(problem.objective(random_sphere_columns(problem.d, problem.N, rng)) for _ in range(100))
    assert problem.objective(z) <= best


def test_decomposition_trivial_cases():
    heads = symmetric_heads(3, 2, 8, make_rng(0))
    y, e = balanced_labels(3, 2, 12)
    a = np.array([[0.5, -0.2, 0.1], [0.0, 0.4, 0.3], [-0.3, 0.1, 0.6]])
    b = np.array([[0.2, -0.1], [-0.3, 0.5]])
    z = heads.w1.T @ a[:, y] + heads.w2.T @ b[:, e]
    report = verify_theorem1(z, heads, y, e)
    assert report.residual_fraction < 1e-12
    assert report.within_class_spread < 1e-12 and report.within_domain_spread < 1e-12
    assert np.allclose(report.a_coeffs, a.T, atol=1e-12)
    # noise orthogonal to both row spaces
    basis = np.linalg.svd(np.vstack([heads.w1, heads.w2]))[2][5:]
    noise = basis.T @ make_rng(1).standard_normal((3, 12))
    assert verify_theorem1(noise, heads, y, e).residual_fraction == pytest.approx(1.0, abs=1e-12)


def test_domain_projection_grows_with_lambda():
    heads = symmetric_heads(3, 2, 8, make_rng(0))
    y, e = balanced_labels(3, 2, 60)
    norms = [domain_projection_norm(solve_ufm(UFMProblem(heads, y, e, lam), rng=make_rng(3)), heads)
             for lam in (0.1, 1.0, 10.0)]
    assert norms[0] < norms[1] < norms[2]


def test_doubling_beta_lowers_class_ce():
    heads = symmetric_heads(3, 2, 8, make_rng(1), class_geometry="etf")
    y, e = balanced_labels(3, 2, 24)
    problem = UFMProblem(heads, y, e, 0.0)
    z = solve_ufm(problem, rng=make_rng(2))
    doubled = UFMProblem(HeadPair(heads.w1, heads.w2, beta1=40.0, beta2=20.0), y, e, 0.0)
    assert doubled.parts(z)["class"] < problem.parts(z)["class"]


def test_annealing_mode_runs():
    heads = symmetric_heads(2, 2, 5, make_rng(0), class_geometry="etf")
    y, e = balanced_labels(2, 2, 8)
    z = solve_ufm(UFMProblem(heads, y, e, 0.0), rng=make_rng(1), anneal_every=300, max_beta=80.0)
    gamma, resid = verify_lemma_alignment(z, heads, y)
    assert abs(gamma - 2.0) < 0.2 and resid < 0.05


def test_balanced_labels():
    y, e = balanced_labels(3, 2, 12)
    counts = np.zeros((2, 3), int)
    np.add.at(counts, (e, y), 1)
    assert (counts == 2).all()
    with pytest.raises(ValueError):
        balanced_labels(3, 2, 10)


def test_report_json(optimum):
    problem, z = optimum
    text = verify_theorem1(z, problem.heads, problem.y, problem.e).dumps()
    assert '"residual_fraction"' in text
