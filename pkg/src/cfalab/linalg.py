"""Dense linear algebra, seeding, and loss primitives shared by every module.

Everything works on float64 numpy arrays. Matrices are plain ``np.ndarray``;
no wrapper type is introduced.
"""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-12


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator; ``stream`` splits one seed into independent streams."""
    return np.random.Generator(np.random.PCG64([int(seed) & (2**64 - 1), int(stream)]))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def softmax_cross_entropy(logits, true_index: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of one logit vector against an integer target.

    Returns the loss and its gradient with respect to the logits,
    ``softmax(logits) - onehot(true_index)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise ValueError("logits must be a vector with at least 2 entries")
    if not 0 <= true_index < logits.size:
        raise ValueError(f"true_index {true_index} out of range for {logits.size} logits")
    shifted = logits - logits.max()
    lse = np.log(np.sum(np.exp(shifted)))
    loss = float(lse - shifted[true_index])
    grad = np.exp(shifted - lse)
    grad[true_index] -= 1.0
    return max(loss, 0.0), grad


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise version of :func:`softmax_cross_entropy`.

    ``logits`` is N x C, ``labels`` length N. Returns per-row losses (N,) and
    per-row gradients (N x C).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must have one entry per logit row")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(n)
    losses = np.maximum(lse - shifted[rows, labels], 0.0)
    grads = np.exp(shifted - lse[:, None])
    grads[rows, labels] -= 1.0
    return losses, grads


def l2_normalize_rows(m: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Scale each row to unit L2 norm; rows shorter than ``eps`` are divided by ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.maximum(norms, eps)


def l2_normalize_rows_backward(u: np.ndarray, upstream: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Pull ``upstream`` (gradient w.r.t. normalized rows) back to the raw rows ``u``.

    Applies (I - z z^T) / ||u|| per row; clamped rows (||u|| < eps) see a
    plain 1/eps scaling, matching the forward clamp.
    """
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    clamped = norms < eps
    denom = np.maximum(norms, eps)
    z = u / denom
    radial = np.where(clamped, 0.0, np.sum(upstream * z, axis=-1, keepdims=True))
    return (upstream - radial * z) / denom


def svd_compact(m: np.ndarray, tol: float | None = None, max_sweeps: int = 100):
    """Compact SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, S, V)`` with ``m = U @ diag(S) @ V.T``, ``S`` strictly
    positive and non-increasing, and ``U``/``V`` with orthonormal columns.
    Singular values below ``tol`` (default ``max(shape) * eps * S_max``) are
    dropped.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("svd_compact expects a 2-D matrix")
    if not np.any(m):
        raise ValueError("svd_compact requires a nonzero matrix")
    transpose = m.shape[0] < m.shape[1]
    a = (m.T if transpose else m).copy()
    ncols = a.shape[1]
    v = np.eye(ncols)
    rot_eps = np.finfo(np.float64).eps

    for _ in range(max_sweeps):
        rotated = False
        for i in range(ncols - 1):
            for j in range(i + 1, ncols):
                ai = a[:, i]
                aj = a[:, j]
                alpha = ai @ ai
                beta = aj @ aj
                gamma = ai @ aj
                if abs(gamma) <= rot_eps * np.sqrt(alpha) * np.sqrt(beta) or gamma == 0.0:
                    continue
                rotated = True
                diff = beta - alpha
                if abs(diff) > 1e150 * abs(gamma):
                    # tiny angle: tan ~ gamma / (beta - alpha); avoids overflow in zeta
                    t = gamma / diff
                else:
                    zeta = diff / (2.0 * gamma)
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ai_new = c * ai - s * aj
                aj_new = s * ai + c * aj
                a[:, i] = ai_new
                a[:, j] = aj_new
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if not rotated:
            break

    sing = np.linalg.norm(a, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    a = a[:, order]
    v = v[:, order]
    if tol is None:
        tol = max(m.shape) * rot_eps * sing[0]
    keep = sing > tol
    sing = sing[keep]
    u = a[:, keep] / sing
    v = v[:, keep]
    if transpose:
        u, v = v, u
    return u, sing, v


def pinv(m: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse built on :func:`svd_compact`."""
    u, s, v = svd_compact(m)
    return (v / s) @ u.T


def row_space_basis(b: np.ndarray) -> np.ndarray:
    """Orthonormal basis (d x r) of the row space of ``b``; rank-deficient rows are dropped."""
    _, _, v = svd_compact(b)
    return v


def project_rows_to_nullspace(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Remove from each row of ``a`` its component in the row space of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("a and b must have the same number of columns")
    basis = row_space_basis(b)
    out = a - (a @ basis) @ basis.T
    # second pass removes round-off left by the first
    return out - (out @ basis) @ basis.T


def random_orthonormal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed d x d orthonormal matrix (QR of a Gaussian, sign-fixed)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    g = rng.standard_normal((d, d))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def sym_psd_sqrt_factor(cov: np.ndarray) -> np.ndarray:
    """Factor L with L L^T = cov for a symmetric PSD matrix (Cholesky, eigen fallback)."""
    cov = np.asarray(cov, dtype=np.float64)
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, q = np.linalg.eigh(cov)
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise ValueError("covariance must be positive semidefinite") from None
        return q * np.sqrt(np.clip(w, 0.0, None))
