"""Class/domain linear heads and the two-head cross-entropy objective."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .data import simplex_vertices
from .errors import DegenerateRowError
from .linalg import (
    batch_cross_entropy,
    l2_normalize_rows,
    project_rows_to_nullspace,
    random_orthonormal,
)

NORMALIZED = "normalized_no_bias"
UNCONSTRAINED = "unconstrained_with_bias"
HEAD_MODES = (NORMALIZED, UNCONSTRAINED)


@dataclass
class HeadPair:
    w1: np.ndarray  # K x d class head
    w2: np.ndarray  # E x d domain head
    beta1: float = 20.0
    beta2: float = 20.0
    mode: str = NORMALIZED
    b1: np.ndarray | None = None
    b2: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in HEAD_MODES:
            raise ValueError(f"unknown head mode {self.mode!r}")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("logit scales must be positive")
        self.w1 = np.array(self.w1, dtype=np.float64)
        self.w2 = np.array(self.w2, dtype=np.float64)
        if self.w1.shape[1] != self.w2.shape[1]:
            raise ValueError("heads must share the feature dimension")
        if self.mode == UNCONSTRAINED:
            self.b1 = np.zeros(self.K) if self.b1 is None else np.array(self.b1, dtype=np.float64)
            self.b2 = np.zeros(self.E) if self.b2 is None else np.array(self.b2, dtype=np.float64)
        else:
            self.b1 = self.b2 = None

    @property
    def K(self) -> int:
        return self.w1.shape[0]

    @property
    def E(self) -> int:
        return self.w2.shape[0]

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    def class_logits(self, z: np.ndarray) -> np.ndarray:
        out = self.beta1 * (z @ self.w1.T)
        return out + self.b1 if self.b1 is not None else out

    def domain_logits(self, z: np.ndarray) -> np.ndarray:
        out = self.beta2 * (z @ self.w2.T)
        return out + self.b2 if self.b2 is not None else out

    def predict(self, z: np.ndarray) -> np.ndarray:
        return np.argmax(self.class_logits(z), axis=1)

    def params(self) -> dict[str, np.ndarray]:
        out = {"w1": self.w1, "w2": self.w2}
        if self.b1 is not None:
            out["b1"] = self.b1
            out["b2"] = self.b2
        return out

    def with_params(self, params: dict) -> "HeadPair":
        return replace(self, **{k: np.array(v) for k, v in params.items()})

    def copy(self) -> "HeadPair":
        return self.with_params(self.params())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.params().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(np.array([self.beta1, self.beta2], dtype="<f8").tobytes())
        return h.hexdigest()


def build_sel(labels, C: int) -> np.ndarray:
    """Simplex-encoding label matrix: column i is onehot(labels[i]) - 1/C."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError("label out of range")
    out = np.full((C, labels.size), -1.0 / C)
    out[labels, np.arange(labels.size)] += 1.0
    return out


def ortho_penalty(w1: np.ndarray, w2: np.ndarray) -> tuple[float, np.ndarray]:
    """``||w1 w2^T||_F^2`` and its gradient with respect to ``w1``."""
    cross = w1 @ w2.T
    return float(np.sum(cross**2)), 2.0 * cross @ w2


def _weighted_mean_coeffs(n: int, weights, active=None) -> np.ndarray:
    """Per-sample coefficients c_i with sum_i c_i * l_i equal to the (weighted) mean over active samples."""
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if active is not None:
        w = np.where(active, w, 0.0)
    total = w.sum()
    return w / total if total > 0 else np.zeros(n)


def cfa_loss(
    heads: HeadPair,
    z: np.ndarray,
    y,
    e,
    present=None,
    lam: float = 1.0,
    class_weights=None,
    domain_weights=None,
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Two-head objective ``(1/K) CE_class + lam * (1/E) CE_domain``.

    The class term averages over all N samples; the domain term averages over
    samples whose domain label is present. Optional per-sample weights turn
    either average into a weighted mean (used for reweighted probing).

    Returns ``(loss, grads, parts)`` where ``grads`` has keys ``z``, ``w1``,
    ``w2`` (plus ``b1``/``b2`` for biased heads) and ``parts`` holds the two
    unscaled mean cross-entropies.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    y = np.asarray(y, dtype=np.int64)
    e = np.asarray(e, dtype=np.int64)
    present = np.ones(n, dtype=bool) if present is None else np.asarray(present, dtype=bool)
    K, E = heads.K, heads.E

    ce1, g1 = batch_cross_entropy(heads.class_logits(z), y)
    c1 = _weighted_mean_coeffs(n, class_weights)
    mean_ce1 = float(c1 @ ce1)
    dlog1 = (c1 / K)[:, None] * g1

    loss = mean_ce1 / K
    grads = {
        "z": heads.beta1 * dlog1 @ heads.w1,
        "w1": heads.beta1 * dlog1.T @ z,
        "w2": np.zeros_like(heads.w2),
    }
    if heads.b1 is not None:
        grads["b1"] = dlog1.sum(axis=0)
        grads["b2"] = np.zeros(E)

    mean_ce2 = 0.0
    if lam > 0 and present.any():
        active = np.flatnonzero(present)
        ce2, g2 = batch_cross_entropy(heads.domain_logits(z[active]), e[active])
        c2 = _weighted_mean_coeffs(n, domain_weights, present)[active]
        mean_ce2 = float(c2 @ ce2)
        dlog2 = (lam * c2 / E)[:, None] * g2
        loss += lam * mean_ce2 / E
        grads["z"][active] += heads.beta2 * dlog2 @ heads.w2
        grads["w2"] = heads.beta2 * dlog2.T @ z[active]
        if heads.b2 is not None:
            grads["b2"] = dlog2.sum(axis=0)
    return float(loss), grads, {"class": mean_ce1, "domain": mean_ce2}


def retract_heads(
    heads: HeadPair,
    ortho_mode: str = "penalty",
    rng: np.random.Generator | None = None,
    degenerate_tol: float = 1e-8,
) -> HeadPair:
    """Pull normalized heads back onto the constraint set.

    Rows are rescaled to unit norm. With ``ortho_mode="projection"`` the class
    rows are also projected off the domain row space first, so
    ``w1 @ w2.T == 0``. A class row that vanishes under the projection is
    redrawn at random in the orthogonal complement when ``rng`` is given and
    raises :class:`DegenerateRowError` otherwise.
    """
    if heads.mode != NORMALIZED:
        raise ValueError("retraction applies to normalized heads only")
    if ortho_mode not in ("penalty", "projection"):
        raise ValueError(f"unknown ortho_mode {ortho_mode!r}")
    w2 = l2_normalize_rows(heads.w2)
    w1 = heads.w1
    if ortho_mode == "projection":
        w1 = project_rows_to_nullspace(w1, w2)
        bad = np.flatnonzero(np.linalg.norm(w1, axis=1) < degenerate_tol)
        if bad.size:
            if rng is None:
                raise DegenerateRowError(f"class rows {bad.tolist()} lie in the domain head span", bad)
            w1 = w1.copy()
            w1[bad] = project_rows_to_nullspace(rng.standard_normal((bad.size, heads.d)), w2)
    w1 = l2_normalize_rows(w1)
    return replace(heads, w1=w1, w2=w2)


def symmetric_heads(
    K: int,
    E: int,
    d: int,
    rng: np.random.Generator,
    class_geometry: str = "orthonormal",
    domain_geometry: str = "orthonormal",
    beta1: float = 20.0,
    beta2: float = 20.0,
) -> HeadPair:
    """Feasible heads whose Gram matrices are invariant under label permutations.

    Each head is either a set of orthonormal rows or a simplex (equiangular
    tight frame, rows summing to zero), placed in mutually orthogonal
    coordinate blocks of a random rotation of R^d.
    """
    if d < K + E:
        raise ValueError("need d >= K + E")

    def block(n, geometry):
        if geometry == "orthonormal":
            return np.eye(n)
        if geometry == "etf":
            return simplex_vertices(n, n)
        raise ValueError(f"unknown geometry {geometry!r}")

    q = random_orthonormal(d, rng)
    w1 = block(K, class_geometry) @ q[:K]
    w2 = block(E, domain_geometry) @ q[K : K + E]
    return HeadPair(w1=l2_normalize_rows(w1), w2=l2_normalize_rows(w2), beta1=beta1, beta2=beta2)


def class_mean_rows(features: np.ndarray, labels, C: int) -> np.ndarray:
    """Unit-normalized per-label mean of ``features``; labels with no samples get a zero row."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((C, features.shape[1]))
    for c in range(C):
        sel = labels == c
        if sel.any():
            out[c] = features[sel].mean(axis=0)
    return l2_normalize_rows(out)
