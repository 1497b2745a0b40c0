"""Training objectives and their analytic gradients.

Everything here is plain numpy in float64. Each loss returns both its value
and the gradients needed by the optimizer, so the training loop never
differentiates numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import sigmoid, softmax_rows, softplus

_EPS_GUARD = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Scalar multipliers for the composite objective, plus the PCA
    keep-ratio used by the decorrelation term."""

    l2: float = 1e-5
    dcorr: float = 1e-2
    cross_system: float = 0.1
    pca_keep: float = 0.5

    def validate(self) -> None:
        if min(self.l2, self.dcorr, self.cross_system) < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0.0 <= self.pca_keep <= 1.0):
            raise ValueError(f"pca_keep must be in [0, 1], got {self.pca_keep}")


# ---------------------------------------------------------------------------
# pairwise ranking
# ---------------------------------------------------------------------------


def bpr_loss(pos_scores: np.ndarray, neg_scores: np.ndarray):
    """Pairwise ranking loss sum(softplus(neg - pos)) with score gradients.

    Returns (value, d_pos, d_neg).
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError("pos/neg score shapes differ")
    value = float(softplus(neg - pos).sum())
    s = sigmoid(neg - pos)
    return value, -s, s


def l2_reg(*rows: np.ndarray):
    """0.5 * sum of squared entries over all given arrays.

    Returns (value, grads) with grads matching the inputs positionally.
    """
    value = 0.0
    grads = []
    for r in rows:
        r = np.asarray(r, dtype=np.float64)
        value += 0.5 * float((r * r).sum())
        grads.append(r.copy())
    return value, grads


# ---------------------------------------------------------------------------
# PCA projection (for the decorrelation loss)
# ---------------------------------------------------------------------------


def pca_project(pref: np.ndarray, keep_fraction: float):
    """Project rows of `pref` onto their top principal directions.

    Keeps k = clamp(floor(keep_fraction * dim), 1, min(dim, n_rows))
    eigenvectors of the sample covariance (1/(n-1) normalization). The
    sign of each eigenvector is fixed so its largest-magnitude entry is
    positive, making the basis reproducible across runs.

    Returns (basis[dim, k], projected[n_rows, k]). The basis is treated as
    a constant by every gradient in this module.
    """
    X = np.asarray(pref, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("pref must be 2-d")
    n, h = X.shape
    if n < 2:
        raise ValueError("need at least 2 rows for a covariance estimate")
    if not (0.0 <= keep_fraction <= 1.0):
        raise ValueError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    k = max(1, int(np.floor(keep_fraction * h)))
    k = min(k, h, n)
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = Xc.T @ Xc / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    basis = eigvecs[:, order[:k]]
    # canonical sign: largest-|entry| coordinate of each column is positive
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    basis = basis * signs
    return basis, Xc @ basis


def project_with_basis(pref: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Center rows and project onto a fixed basis."""
    X = np.asarray(pref, dtype=np.float64)
    return (X - X.mean(axis=0)) @ basis


# ---------------------------------------------------------------------------
# distance correlation
# ---------------------------------------------------------------------------


def _dist_and_centered(x: np.ndarray):
    """Pairwise |x_i - x_j| and its double-centered form."""
    d = np.abs(x[:, None] - x[None, :])
    row = d.mean(axis=1, keepdims=True)
    col = d.mean(axis=0, keepdims=True)
    A = d - row - col + d.mean()
    return d, A


def distance_correlation(x: np.ndarray, y: np.ndarray) -> float:
    """Sample distance correlation of two coordinate vectors.

    Treats the k entries of each vector as k scalar observations. Returns 0
    when either vector is (numerically) constant.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("length mismatch")
    _, A = _dist_and_centered(x)
    _, B = _dist_and_centered(y)
    dcov2 = (A * B).mean()
    vx = np.sqrt(max((A * A).mean(), 0.0))
    vy = np.sqrt(max((B * B).mean(), 0.0))
    if vx < _EPS_GUARD or vy < _EPS_GUARD:
        return 0.0
    dcov = np.sqrt(max(dcov2, 0.0))
    return float(dcov / np.sqrt(vx * vy))


def _dcorr_with_grad(x: np.ndarray, y: np.ndarray):
    """Distance correlation plus gradients w.r.t. both coordinate vectors.

    Centered distance matrices absorb the centering adjoint: for any
    double-centered B, sum_ij B_ij * d|x_i - x_j| reduces to
    2 * sum_j (B o sign)_ij summed over j. Degenerate cases (constant
    input, zero distance covariance) return zero gradients, matching the
    convention that the loss contribution is 0 there.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    k = len(x)
    zg = np.zeros_like(x), np.zeros_like(y)
    _, A = _dist_and_centered(x)
    _, B = _dist_and_centered(y)
    k2 = float(k * k)
    vxy2 = (A * B).sum() / k2
    vxx2 = (A * A).sum() / k2
    vyy2 = (B * B).sum() / k2
    vx = np.sqrt(max(vxx2, 0.0))
    vy = np.sqrt(max(vyy2, 0.0))
    if vx < _EPS_GUARD or vy < _EPS_GUARD:
        return 0.0, *zg
    dcov = np.sqrt(max(vxy2, 0.0))
    denom = np.sqrt(vx * vy)
    value = float(dcov / denom)
    if dcov < _EPS_GUARD:
        return value, *zg

    Sx = np.sign(x[:, None] - x[None, :])
    Sy = np.sign(y[:, None] - y[None, :])
    # d vxy2 / dx_i = (2/k^2) * sum_j B_ij * sign(x_i - x_j)
    dvxy2_dx = (2.0 / k2) * (B * Sx).sum(axis=1)
    dvxy2_dy = (2.0 / k2) * (A * Sy).sum(axis=1)
    dvxx2_dx = (4.0 / k2) * (A * Sx).sum(axis=1)
    dvyy2_dy = (4.0 / k2) * (B * Sy).sum(axis=1)

    # value = sqrt(vxy2) / (vxx2 * vyy2)^(1/4)
    gx = dvxy2_dx / (2.0 * dcov * denom) - value * dvxx2_dx / (4.0 * vxx2)
    gy = dvxy2_dy / (2.0 * dcov * denom) - value * dvyy2_dy / (4.0 * vyy2)
    return value, gx, gy


def soft_dcorr_loss(pref: np.ndarray, keep_fraction: float, basis: np.ndarray | None = None):
    """Decorrelation penalty over preference embeddings.

    Projects the rows onto a PCA basis (computed here unless `basis` is
    supplied) and sums distance correlation over all unordered pairs of
    projected rows. The basis is a constant for differentiation; gradients
    flow through centering and projection only.

    Returns (value, grad_pref, basis).
    """
    X = np.asarray(pref, dtype=np.float64)
    n, h = X.shape
    if basis is None:
        basis, Z = pca_project(X, keep_fraction)
    else:
        Z = project_with_basis(X, basis)
    dZ = np.zeros_like(Z)
    value = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            v, gi, gj = _dcorr_with_grad(Z[i], Z[j])
            value += v
            dZ[i] += gi
            dZ[j] += gj
    # adjoint of Z = (X - mean(X)) @ basis
    dXc = dZ @ basis.T
    grad = dXc - dXc.mean(axis=0, keepdims=True)
    return float(value), grad, basis


# ---------------------------------------------------------------------------
# cross-system contrastive alignment
# ---------------------------------------------------------------------------


def cross_system_loss(
    cf_user: np.ndarray,
    cf_pos: np.ndarray,
    cf_neg: np.ndarray,
    content_user: np.ndarray,
    content_pos: np.ndarray,
    content_neg: np.ndarray,
):
    """Two-term contrastive alignment between the graph model and the
    content model, summed over the batch:

        -log sigmoid(cf_u . (content_pos - content_neg))
        -log sigmoid(content_u . (cf_pos - cf_neg))

    The content side is a fixed reference: gradients are returned only for
    the three graph-side arrays (content gradients are zero by design).

    Returns (value, d_cf_user, d_cf_pos, d_cf_neg).
    """
    cu = np.asarray(cf_user, dtype=np.float64)
    cp = np.asarray(cf_pos, dtype=np.float64)
    cn = np.asarray(cf_neg, dtype=np.float64)
    nu = np.asarray(content_user, dtype=np.float64)
    npos = np.asarray(content_pos, dtype=np.float64)
    nneg = np.asarray(content_neg, dtype=np.float64)
    if not (cu.shape == cp.shape == cn.shape == nu.shape == npos.shape == nneg.shape):
        raise ValueError("all six arrays must share one shape")

    diff_content = npos - nneg
    diff_cf = cp - cn
    d1 = (cu * diff_content).sum(axis=1)
    d2 = (nu * diff_cf).sum(axis=1)
    value = float(softplus(-d1).sum() + softplus(-d2).sum())

    s1 = sigmoid(-d1)[:, None]  # d/d d1 of softplus(-d1) is -sigmoid(-d1)
    s2 = sigmoid(-d2)[:, None]
    d_cf_user = -s1 * diff_content
    d_cf_pos = -s2 * nu
    d_cf_neg = s2 * nu
    return value, d_cf_user, d_cf_pos, d_cf_neg


# ---------------------------------------------------------------------------
# content click loss
# ---------------------------------------------------------------------------


def click_softmax_loss(pos_scores: np.ndarray, neg_scores: np.ndarray):
    """Sampled-softmax click objective for the content model.

    For each row: -log( exp(pos) / (exp(pos) + sum_j exp(neg_j)) ).
    Returns (value, d_pos, d_neg) summed over rows.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1, 1)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.ndim != 2 or neg.shape[0] != pos.shape[0]:
        raise ValueError("neg_scores must be [batch, n_neg]")
    logits = np.concatenate([pos, neg], axis=1)
    probs = softmax_rows(logits)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    value = float((lse - pos[:, 0]).sum())
    d = probs.copy()
    d[:, 0] -= 1.0
    return value, d[:, 0], d[:, 1:]


def combine_losses(bpr: float, l2: float, dcorr: float, cs: float, w: LossWeights) -> float:
    return float(bpr + w.l2 * l2 + w.dcorr * dcorr + w.cross_system * cs)
