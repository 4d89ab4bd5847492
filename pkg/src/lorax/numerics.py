"""Dense float64 linear algebra: SVD, truncation, pseudo-inverse, diagnostics."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ClampNotice, InvalidRank, NumericsError

PINV_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class SvdFactors:
    """``W = u @ diag(sigma) @ v.T`` with sigma descending.

    ``basis_id`` fingerprints the decomposed matrix, so an adapter defined on
    these bases can be checked against the weights it is applied to.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    source_shape: tuple[int, int]
    basis_id: str = ""

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T

    def truncate(self, r: int) -> "SvdFactors":
        return SvdFactors(self.u[:, :r], self.sigma[:r], self.v[:, :r], self.source_shape, self.basis_id)


def matrix_fingerprint(w: np.ndarray) -> str:
    w = np.ascontiguousarray(w, dtype=np.float64)
    h = hashlib.sha256(repr(w.shape).encode())
    h.update(w.tobytes())
    return h.hexdigest()[:16]


def _as_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise NumericsError(f"expected a 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericsError("matrix contains non-finite values")
    return w


def fix_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip column pairs so each u column's largest-magnitude entry is >= 0.

    ``argmax`` returns the lowest index on ties, which is the tie rule we want.
    """
    if u.shape[1] == 0:
        return u, v
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, v * signs


def svd(w, method: str = "lapack") -> SvdFactors:
    """Thin SVD with ``k = min(m, n)``, descending sigma, canonical signs.

    ``method="lapack"`` calls LAPACK ``dgesvd`` (Householder bidiagonalization
    followed by implicit-shift QR). ``method="golub_kahan"`` runs the pure
    numpy implementation in this module; it is slower and mainly serves as a
    cross-check.
    """
    w = _as_matrix(w)
    m, n = w.shape
    if min(m, n) == 0:
        return SvdFactors(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)), (m, n), matrix_fingerprint(w))
    # power-of-two rescale keeps subnormal or huge inputs in range, exactly
    amax = float(np.max(np.abs(w)))
    e = int(np.frexp(amax)[1]) if amax > 0 and not 2.0 ** -500 < amax < 2.0 ** 500 else 0
    a = np.ldexp(w, -e) if e else w
    if method == "lapack":
        u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd", check_finite=False)
        v = vt.T
    elif method == "golub_kahan":
        u, s, v = golub_kahan_svd(a)
    else:
        raise ValueError(f"unknown SVD method {method!r}")
    if e:
        s = np.ldexp(s, e)
    u, v = fix_signs(np.ascontiguousarray(u), np.ascontiguousarray(v))
    return SvdFactors(u, s.copy(), v, (m, n), matrix_fingerprint(w))


def clamp_rank(r: int, available: int, what: str = "rank") -> int:
    if r < 1:
        raise InvalidRank(f"{what} must be >= 1, got {r}")
    if r > available:
        warnings.warn(f"{what} {r} clamped to {available}", ClampNotice, stacklevel=3)
        return available
    return r


def truncated_svd(w, r: int, method: str = "lapack") -> SvdFactors:
    """Top-``r`` singular triplets; ``r`` above ``min(m, n)`` is clamped with a
    :class:`ClampNotice` warning. The effective rank is ``result.k``."""
    if r < 1:
        raise InvalidRank(f"rank must be >= 1, got {r}")
    full = svd(w, method=method)
    return full.truncate(clamp_rank(r, full.k))


def pseudo_inverse(a, tol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose inverse; singular values below ``tol * sigma_max`` count as zero."""
    f = svd(a)
    if f.k == 0:
        return np.zeros(f.source_shape[::-1])
    cutoff = tol * (f.sigma[0] if f.k else 0.0)
    keep = f.sigma > cutoff
    inv = np.zeros_like(f.sigma)
    inv[keep] = 1.0 / f.sigma[keep]
    return (f.v * inv) @ f.u.T


def orthonormality_defect(u) -> float:
    u = np.asarray(u, dtype=np.float64)
    return float(np.linalg.norm(u.T @ u - np.eye(u.shape[1])))


def projector(basis: np.ndarray) -> np.ndarray:
    return basis @ basis.T


def polar_factor(a: np.ndarray) -> np.ndarray:
    """Nearest matrix with orthonormal columns to ``a`` in Frobenius norm."""
    f = svd(a)
    return f.u @ f.v.T


# ---------------------------------------------------------------------------
# Golub-Kahan SVD in plain numpy


def _house(x):
    """Householder vector v (v[0] = 1) and beta with (I - beta v v^T) x = ±|x| e1."""
    v = x.astype(np.float64).copy()
    sigma = float(v[1:] @ v[1:])
    v0 = v[0]
    if sigma == 0.0:
        v[0] = 1.0
        return v, 0.0
    mu = np.sqrt(v0 * v0 + sigma)
    v[0] = v0 - mu if v0 <= 0 else -sigma / (v0 + mu)
    beta = 2.0 * v[0] ** 2 / (sigma + v[0] ** 2)
    v = v / v[0]
    return v, beta


def _bidiagonalize(a):
    """A (m >= n) = U B V^T with B upper bidiagonal n x n; U is m x n."""
    m, n = a.shape
    b = a.copy()
    left, right = [], []
    for j in range(n):
        v, beta = _house(b[j:, j])
        b[j:, j:] -= beta * np.outer(v, v @ b[j:, j:])
        left.append((j, v, beta))
        if j < n - 2:
            v, beta = _house(b[j, j + 1:])
            b[j:, j + 1:] -= beta * np.outer(b[j:, j + 1:] @ v, v)
            right.append((j + 1, v, beta))
    u = np.eye(m, n)
    for j, v, beta in reversed(left):
        u[j:, :] -= beta * np.outer(v, v @ u[j:, :])
    vm = np.eye(n)
    for j, v, beta in reversed(right):
        vm[j:, :] -= beta * np.outer(v, v @ vm[j:, :])
    return u, np.triu(np.tril(b[:n, :n], 1)), vm


def _givens(a, b):
    """c, s with [c s; -s c]^T [a; b] = [r; 0]."""
    if b == 0.0:
        return 1.0, 0.0
    r = np.hypot(a, b)
    return a / r, b / r


def _rot_cols(mat, i, j, c, s):
    ci, cj = mat[:, i].copy(), mat[:, j].copy()
    mat[:, i] = c * ci + s * cj
    mat[:, j] = -s * ci + c * cj


def _rot_rows(mat, i, j, c, s):
    ri, rj = mat[i, :].copy(), mat[j, :].copy()
    mat[i, :] = c * ri + s * rj
    mat[j, :] = -s * ri + c * rj


def _gk_step(b, u, v, lo, hi):
    """One implicit Wilkinson-shift QR sweep on the unreduced block b[lo:hi+1, lo:hi+1]."""
    dm, dn = b[hi - 1, hi - 1], b[hi, hi]
    fm = b[hi - 2, hi - 1] if hi - 1 > lo else 0.0
    fn = b[hi - 1, hi]
    t11, t12, t22 = dm * dm + fm * fm, dm * fn, dn * dn + fn * fn
    d = 0.5 * (t11 - t22)
    denom = d + np.copysign(np.hypot(d, t12), d) if d != 0 else abs(t12)
    mu = t22 - (t12 * t12 / denom if denom != 0 else 0.0)
    y = b[lo, lo] ** 2 - mu
    z = b[lo, lo] * b[lo, lo + 1]
    for k in range(lo, hi):
        c, s = _givens(y, z)
        _rot_cols(b, k, k + 1, c, s)
        _rot_cols(v, k, k + 1, c, s)
        y, z = b[k, k], b[k + 1, k]
        c, s = _givens(y, z)
        _rot_rows(b, k, k + 1, c, s)
        _rot_cols(u, k, k + 1, c, s)
        if k < hi - 1:
            y, z = b[k, k + 1], b[k, k + 2]


def _zero_row(b, u, i, hi):
    """d_i == 0: chase b[i, i+1] off the row with left rotations against rows i+1..hi."""
    for j in range(i + 1, hi + 1):
        if b[i, j] == 0.0:
            break
        c, s = _givens(b[j, j], b[i, j])
        _rot_rows(b, j, i, c, s)
        _rot_cols(u, j, i, c, s)
        b[i, j] = 0.0


def _zero_col(b, v, lo, hi):
    """d_hi == 0: chase b[hi-1, hi] up the column with right rotations."""
    for j in range(hi - 1, lo - 1, -1):
        if b[j, hi] == 0.0:
            break
        c, s = _givens(b[j, j], b[j, hi])
        _rot_cols(b, j, hi, c, s)
        _rot_cols(v, j, hi, c, s)
        b[j, hi] = 0.0


def golub_kahan_svd(a, max_sweeps: int = 75):
    """Thin SVD by Householder bidiagonalization plus implicit-shift QR.

    Returns ``(u, s, v)`` with s descending and nonnegative; signs are not
    canonicalised here (see :func:`fix_signs`).
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if m < n:
        v, s, u = golub_kahan_svd(a.T, max_sweeps)
        return u, s, v
    u, b, v = _bidiagonalize(a)
    eps = np.finfo(float).eps
    anorm = max(np.abs(b).max(), np.finfo(float).tiny)
    budget = max_sweeps * n
    while True:
        for i in range(n - 1):
            if abs(b[i, i + 1]) <= eps * (abs(b[i, i]) + abs(b[i + 1, i + 1])) or abs(b[i, i + 1]) < eps * anorm * 1e-3:
                b[i, i + 1] = 0.0
        hi = n - 1
        while hi > 0 and b[hi - 1, hi] == 0.0:
            hi -= 1
        if hi == 0:
            break
        lo = hi - 1
        while lo > 0 and b[lo - 1, lo] != 0.0:
            lo -= 1
        budget -= 1
        if budget < 0:
            raise NumericsError("Golub-Kahan iteration did not converge")
        small = [i for i in range(lo, hi + 1) if abs(b[i, i]) <= eps * anorm]
        if small:
            i = small[0]
            b[i, i] = 0.0
            if i < hi:
                _zero_row(b, u, i, hi)
            else:
                _zero_col(b, v, lo, hi)
            continue
        _gk_step(b, u, v, lo, hi)
    s = np.diag(b).copy()
    neg = s < 0
    s[neg] = -s[neg]
    v[:, neg] = -v[:, neg]
    order = np.argsort(-s, kind="stable")
    return u[:, order], s[order], v[:, order]
