"""Unconstrained feature model: optimize free unit-norm features against fixed heads.

Each sample's feature is a free variable on the unit sphere. With the heads
held fixed the objective separates over samples, so the optimum for a sample
depends only on its (class, domain) pair. The routines here solve that
problem numerically and check the predicted geometry of the optimum.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConvergenceError
from .heads import HeadPair, build_sel, cfa_loss
from .linalg import l2_normalize_rows, pinv, row_space_basis, svd_compact

FEASIBILITY_TOL = 1e-8


@dataclass
class UFMProblem:
    heads: HeadPair
    y: np.ndarray
    e: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.e = np.asarray(self.e, dtype=np.int64)
        h = self.heads
        if self.y.shape != self.e.shape or self.y.ndim != 1 or self.y.size == 0:
            raise ValueError("y and e must be equal-length, nonempty label vectors")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if h.d < h.K + h.E:
            raise ValueError(f"feature dimension {h.d} is smaller than K + E = {h.K + h.E}")
        if set(np.unique(self.y).tolist()) != set(range(h.K)):
            raise ValueError("every class must appear at least once")
        if set(np.unique(self.e).tolist()) != set(range(h.E)):
            raise ValueError("every domain must appear at least once")
        check_feasible(h)

    @property
    def d(self) -> int:
        return self.heads.d

    @property
    def N(self) -> int:
        return self.y.size

    def objective(self, z: np.ndarray) -> float:
        """Objective at features ``z`` given as a d x N matrix (one column per sample)."""
        loss, _, _ = cfa_loss(self.heads, np.asarray(z).T, self.y, self.e, None, self.lam)
        return loss

    def parts(self, z: np.ndarray) -> dict:
        """Mean class and domain cross-entropies, accurate even when they are far below 1e-16."""
        zt = np.asarray(z, dtype=np.float64).T
        ce1, _ = _tail_accurate_ce(self.heads.class_logits(zt), self.y)
        ce2, _ = _tail_accurate_ce(self.heads.domain_logits(zt), self.e)
        return {"class": float(ce1.mean()), "domain": float(ce2.mean())}


def check_feasible(heads: HeadPair, tol: float = FEASIBILITY_TOL) -> None:
    """Raise ``ValueError`` unless rows are unit-norm and the two heads are orthogonal."""
    if heads.b1 is not None:
        raise ValueError("UFM heads must be bias-free")
    for name, w in (("w1", heads.w1), ("w2", heads.w2)):
        if np.max(np.abs(np.linalg.norm(w, axis=1) - 1.0)) > tol:
            raise ValueError(f"{name} rows are not unit-norm")
    if np.abs(heads.w1 @ heads.w2.T).max(initial=0.0) > tol:
        raise ValueError("heads are not orthogonal")


def random_sphere_columns(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    return l2_normalize_rows(rng.standard_normal((n, d))).T


def solve_ufm(
    problem: UFMProblem,
    steps: int = 20000,
    lr: float = 0.1,
    rng: np.random.Generator | None = None,
    z0: np.ndarray | None = None,
    tol: float = 1e-6,
    window: int = 100,
    anneal_every: int | None = None,
    max_beta: float | None = None,
) -> np.ndarray:
    """Projected gradient descent on the sphere; returns ``Z*`` as a d x N matrix.

    The objective separates over columns, so each column i takes its own
    gradient step on its loss ``f_i`` followed by renormalization. The first
    trial step moves the column by an arc of about ``lr`` radians and is
    halved until the Armijo condition holds. Near the optimum at large logit
    scales the losses and gradients are tiny and the curvature is sharp, so no
    single fixed step size works across scales.

    The run stops once the mean objective changed by at most ``tol`` relative
    to its current value over the last ``window`` steps, and raises
    ``ConvergenceError`` with the objective trace if that never happens.

    With ``anneal_every`` both logit scales double every that many steps (up
    to ``max_beta``); convergence is then only checked at the final scale.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if z0 is None:
        if rng is None:
            raise ValueError("rng or z0 required")
        z0 = random_sphere_columns(problem.d, problem.N, rng)
    zt = l2_normalize_rows(np.array(z0, dtype=np.float64).T)
    if zt.shape != (problem.N, problem.d):
        raise ValueError("z0 must be d x N")
    heads = problem.heads
    y, e, lam = problem.y, problem.e, problem.lam
    trace = []
    last_change = 0
    for t in range(steps):
        if anneal_every and t and t % anneal_every == 0 and (max_beta is None or heads.beta1 * 2 <= max_beta):
            heads = HeadPair(w1=heads.w1, w2=heads.w2, beta1=2 * heads.beta1, beta2=2 * heads.beta2)
            last_change = t
        f, g = column_losses(heads, zt, y, e, lam)
        loss = float(f.mean())
        trace.append(loss)
        if t - last_change >= window and abs(trace[-1 - window] - loss) <= tol * loss:
            return zt.T.copy()
        g = g - np.sum(g * zt, axis=1)[:, None] * zt  # tangent component
        gg = np.sum(g * g, axis=1)
        # first try an arc of ``lr`` radians, whatever the gradient's scale
        trial = lr / np.sqrt(np.where(gg > 0, gg, 1.0))
        accepted = gg == 0
        cand = zt
        for _ in range(_MAX_BACKTRACK):
            cand = l2_normalize_rows(zt - trial[:, None] * g)
            fc, _ = column_losses(heads, cand, y, e, lam)
            accepted = accepted | (fc <= f - _ARMIJO_C * trial * gg)
            if accepted.all():
                break
            trial = np.where(accepted, trial, 0.5 * trial)
        zt = np.where(accepted[:, None], cand, zt)
    raise ConvergenceError(f"objective still moving after {steps} steps", trace)


_ARMIJO_C = 1e-4
_MAX_BACKTRACK = 60


def _tail_accurate_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cross-entropy and logit gradient, accurate down to tiny losses.

    ``logsumexp - logit_y`` rounds to zero once the loss drops below machine
    epsilon while the gradient is still representable; writing the loss as
    ``log1p(sum_{k != y} exp(l_k - l_y))`` keeps the two consistent.
    """
    rows = np.arange(len(labels))
    diff = logits - logits[rows, labels][:, None]
    diff[rows, labels] = -np.inf
    m = np.maximum(diff.max(axis=1), 0.0)
    others = np.exp(diff - m[:, None])
    own = np.exp(-m)
    total = own + others.sum(axis=1)
    ce = np.where(m > 0, m + np.log(total), np.log1p(others.sum(axis=1)))
    grad = others / total[:, None]
    grad[rows, labels] = -grad.sum(axis=1)
    return ce, grad


def column_losses(heads: HeadPair, zt: np.ndarray, y, e, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses ``f_i`` (N,) and their gradients (N x d) for row-stacked features."""
    ce1, g1 = _tail_accurate_ce(heads.class_logits(zt), y)
    f = ce1 / heads.K
    g = (heads.beta1 / heads.K) * g1 @ heads.w1
    if lam > 0:
        ce2, g2 = _tail_accurate_ce(heads.domain_logits(zt), e)
        f = f + lam * ce2 / heads.E
        g = g + (lam * heads.beta2 / heads.E) * g2 @ heads.w2
    return f, g


def lemma_gamma(K: int, a: float = 1.0) -> float:
    """Predicted alignment scale ``a / (1 - 1/K)``."""
    return a / (1.0 - 1.0 / K)


def verify_lemma_alignment(z_star: np.ndarray, heads: HeadPair, y_labels) -> tuple[float, float]:
    """Fit ``w1 Z* ~ gamma * S1`` by least squares; return ``(gamma_hat, rel_residual)``."""
    s1 = build_sel(y_labels, heads.K)
    logits = heads.w1 @ np.asarray(z_star)
    gamma = float(np.sum(logits * s1) / np.sum(s1 * s1))
    resid = np.linalg.norm(logits - gamma * s1)
    denom = abs(gamma) * np.linalg.norm(s1)
    return gamma, float(resid / denom) if denom > 0 else float("inf")


@dataclass
class DecompositionReport:
    a_coeffs: list  # per-class mean coefficient vector on w1's rows
    b_coeffs: list  # per-domain mean coefficient vector on w2's rows
    residual_fraction: float
    gamma1_hat: float
    gamma2_hat: float
    within_class_spread: float
    within_domain_spread: float
    class_energy: float = 0.0
    domain_energy: float = 0.0
    exponent_fit: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


def _max_pairwise(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    diff = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=-1)).max())


def _exponent_fit(w1: np.ndarray, a_mean: np.ndarray, gamma: float) -> dict:
    """Compare class coefficients with ``gamma * U diag(s)^p U^T (e_y - 1/K)`` for p = +2 and -2."""
    K = w1.shape[0]
    u, s, _ = svd_compact(w1)
    target = build_sel(np.arange(K), K)  # column y is e_y - 1/K
    out = {}
    for p in (2, -2):
        pred = gamma * (u * s**p) @ u.T @ target
        out[f"residual_p{p:+d}"] = float(np.linalg.norm(a_mean - pred) / max(np.linalg.norm(pred), 1e-300))
    r_pos, r_neg = out["residual_p+2"], out["residual_p-2"]
    if abs(r_pos - r_neg) <= 1e-8 * max(1.0, r_pos, r_neg):
        out["best"] = "tie"
    else:
        out["best"] = "+2" if r_pos < r_neg else "-2"
    return out


def verify_theorem1(z_star: np.ndarray, heads: HeadPair, y_labels, e_labels) -> DecompositionReport:
    """Decompose each feature onto the two head row spaces and summarize the fit.

    ``a_i = pinv(w1^T) z_i`` and ``b_i = pinv(w2^T) z_i``; the report holds
    their per-group means and worst within-group spread, plus the share of
    feature energy outside both row spaces.
    """
    z = np.asarray(z_star, dtype=np.float64)
    y = np.asarray(y_labels, dtype=np.int64)
    e = np.asarray(e_labels, dtype=np.int64)
    a = pinv(heads.w1.T) @ z  # K x N
    b = pinv(heads.w2.T) @ z  # E x N
    basis = row_space_basis(np.vstack([heads.w1, heads.w2])).T  # r x d, orthonormal rows
    total = float(np.sum(z * z))
    inside = float(np.sum((basis @ z) ** 2))
    residual = min(max(1.0 - inside / total, 0.0), 1.0) if total > 0 else 0.0
    class_energy = float(np.sum((row_space_basis(heads.w1).T @ z) ** 2)) / total if total > 0 else 0.0
    domain_energy = float(np.sum((row_space_basis(heads.w2).T @ z) ** 2)) / total if total > 0 else 0.0

    a_means, spread_a = [], 0.0
    for k in range(heads.K):
        cols = a[:, y == k].T
        a_means.append(cols.mean(axis=0) if len(cols) else np.full(heads.K, np.nan))
        spread_a = max(spread_a, _max_pairwise(cols))
    b_means, spread_b = [], 0.0
    for j in range(heads.E):
        cols = b[:, e == j].T
        b_means.append(cols.mean(axis=0) if len(cols) else np.full(heads.E, np.nan))
        spread_b = max(spread_b, _max_pairwise(cols))

    gamma1, _ = verify_lemma_alignment(z, heads, y)
    s2 = build_sel(e, heads.E)
    gamma2 = float(np.sum((heads.w2 @ z) * s2) / np.sum(s2 * s2))
    a_mat = np.stack(a_means, axis=1)  # K x K, column y
    fit = _exponent_fit(heads.w1, a_mat, gamma1) if np.isfinite(a_mat).all() else {}
    return DecompositionReport(
        a_coeffs=[v.tolist() for v in a_means],
        b_coeffs=[v.tolist() for v in b_means],
        residual_fraction=residual,
        gamma1_hat=gamma1,
        gamma2_hat=gamma2,
        within_class_spread=spread_a,
        within_domain_spread=spread_b,
        class_energy=class_energy,
        domain_energy=domain_energy,
        exponent_fit=fit,
    )


def domain_projection_norm(z_star: np.ndarray, heads: HeadPair) -> float:
    """``||P_{W2} Z*||_F`` with ``P_{W2}`` the orthogonal projector onto span(w2 rows)."""
    return float(np.linalg.norm(row_space_basis(heads.w2).T @ np.asarray(z_star)))


def balanced_labels(K: int, E: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Cycle through every (domain, class) cell so each appears ``N / (K E)`` times (N divisible)."""
    if N % (K * E):
        raise ValueError("N must be a multiple of K * E")
    cell = np.arange(N) % (K * E)
    return cell % K, cell // K
