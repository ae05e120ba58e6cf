"""Small dense symmetric linear algebra for growing sub-designs.

The sub-design correlation matrix only ever gains a row and column, so its
Cholesky factor and its inverse are carried along by bordering at O(j^2) per
step.  The smallest eigenvalue is estimated exactly by cyclic Jacobi for tiny
orders, otherwise by power iteration on the inverse (applied through the
factor) followed by a small safety deflation so the estimate errs low.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.linalg import cho_solve

logger = logging.getLogger(__name__)

JACOBI_MAX_ORDER = 8
DEFAULT_DEFLATION = 1e-3
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 1000


class SingularAugmentation(ArithmeticError):
    """The Schur complement of a proposed extension is not positive."""

    def __init__(self, schur: float):
        super().__init__(f"nonpositive Schur complement {schur:.3e}")
        self.schur = schur


def forward_solve(factor: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``L^{-1} k'`` for the rows of ``k`` (n x j), returned as j x n.

    The summation order is fixed, so each column depends only on its own
    row of ``k``: a candidate gets bit-identical results in any block.
    """
    n, j = k.shape
    z = np.array(k.T, dtype=float, order="C")
    for a in range(j):
        za = z[a]
        for b in range(a):
            za -= factor[a, b] * z[b]
        za /= factor[a, a]
    return z


def backward_solve(factor: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``L'^{-1} z`` for a vector, so ``backward_solve(L, L^{-1} b) = A^{-1} b``."""
    w = np.array(z, dtype=float)
    for a in range(w.shape[0] - 1, -1, -1):
        w[a] = (w[a] - factor[a + 1:, a] @ w[a + 1:]) / factor[a, a]
    return w


class GrowableSPDInverse:
    """Inverse of a symmetric positive-definite matrix that grows by bordering.

    The matrix, its lower Cholesky factor and its inverse are all kept.  The
    Schur complement and the bordering vector ``A^{-1} c`` come from the
    factor, which stays accurate long after an explicitly updated inverse
    has lost its digits to conditioning.
    """

    def __init__(self):
        self.matrix = np.zeros((0, 0))
        self.factor = np.zeros((0, 0))
        self.inverse = np.zeros((0, 0))
        self.log_det = 0.0

    @property
    def order(self) -> int:
        return self.matrix.shape[0]

    def _check(self, cross) -> np.ndarray:
        cross = np.asarray(cross, dtype=float).reshape(-1)
        if cross.shape[0] != self.order:
            raise ValueError(f"cross vector has length {cross.shape[0]}, expected {self.order}")
        return cross

    def schur_complement(self, cross: np.ndarray, corner: float) -> tuple[float, np.ndarray]:
        """``(corner - c'A^{-1}c, L^{-1}c)`` for a proposed border column ``c``."""
        cross = self._check(cross)
        lc = forward_solve(self.factor, cross[None, :])[:, 0]
        return float(corner - lc @ lc), lc

    def solve(self, b) -> np.ndarray:
        """``A^{-1} b`` through the factor."""
        b = self._check(b)
        return backward_solve(self.factor, forward_solve(self.factor, b[None, :])[:, 0])

    def extend(self, cross, corner: float, min_schur: float = 0.0) -> "GrowableSPDInverse":
        """Border the matrix with column ``cross`` and diagonal ``corner`` in place."""
        cross = self._check(cross)
        schur, lc = self.schur_complement(cross, corner)
        if not schur > min_schur:
            raise SingularAugmentation(schur)
        j = self.order
        g = backward_solve(self.factor, lc)
        inv = np.empty((j + 1, j + 1))
        inv[:j, :j] = self.inverse + np.outer(g, g) / schur
        inv[:j, j] = -g / schur
        inv[j, :j] = -g / schur
        inv[j, j] = 1.0 / schur
        # keep exact symmetry; the outer product is symmetric up to rounding
        inv[:j, :j] = 0.5 * (inv[:j, :j] + inv[:j, :j].T)
        mat = np.empty((j + 1, j + 1))
        mat[:j, :j] = self.matrix
        mat[:j, j] = cross
        mat[j, :j] = cross
        mat[j, j] = corner
        fac = np.zeros((j + 1, j + 1))
        fac[:j, :j] = self.factor
        fac[j, :j] = lc
        fac[j, j] = np.sqrt(schur)
        self.inverse = inv
        self.matrix = mat
        self.factor = fac
        self.log_det += float(np.log(schur))
        return self

    def copy(self) -> "GrowableSPDInverse":
        other = GrowableSPDInverse()
        other.matrix = self.matrix.copy()
        other.factor = self.factor.copy()
        other.inverse = self.inverse.copy()
        other.log_det = self.log_det
        return other


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 50) -> np.ndarray:
    """All eigenvalues of a small symmetric matrix by cyclic Jacobi rotations, ascending."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if n == 0:
        return np.zeros(0)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt((np.tril(a, -1) ** 2).sum())
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    return np.sort(np.diag(a))


def power_max_eigenvalue(a, tol: float = DEFAULT_TOL,
                         max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0,
                         start: np.ndarray | None = None,
                         n: int | None = None) -> tuple[float, np.ndarray, int]:
    """Dominant eigenvalue of a symmetric PSD operator by power iteration.

    ``a`` is a matrix or a callable ``v -> A v`` (then ``n`` gives the order).
    Returns the Rayleigh-quotient estimate, the final iterate and the number of
    iterations.  Stops when the relative change of the quotient drops below ``tol``.
    """
    if callable(a):
        apply = a
    else:
        n = a.shape[0]

        def apply(v):
            return a @ v
    if start is None:
        v = np.random.default_rng(seed).standard_normal(n)
    else:
        v = np.asarray(start, dtype=float).copy()
    v /= np.linalg.norm(v)
    w = apply(v)
    rq = float(v @ w)
    it = 0
    for it in range(1, max_iters + 1):
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v, it
        v = w / nw
        w = apply(v)
        new_rq = float(v @ w)
        if abs(new_rq - rq) <= tol * abs(new_rq):
            rq = new_rq
            break
        rq = new_rq
    return rq, v, it


def min_eigenvalue(state: GrowableSPDInverse, tol: float = DEFAULT_TOL,
                   max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0,
                   deflation: float = DEFAULT_DEFLATION) -> float:
    """Lower estimate of the smallest eigenvalue of the stored matrix.

    Orders up to eight are solved exactly.  Larger orders use
    ``(1 - deflation) / lambda_max(A^{-1})``, applying ``A^{-1}`` through the
    Cholesky factor rather than the stored inverse: the power iterate's Rayleigh
    quotient never exceeds the true maximum of the inverse, so without the
    deflation the estimate would err high.  If the iteration does not
    converge within ``max_iters`` the exact value is returned instead.
    """
    j = state.order
    if j == 0:
        raise ValueError("min_eigenvalue of an empty matrix")
    if j <= JACOBI_MAX_ORDER:
        return float(jacobi_eigenvalues(state.matrix)[0])
    fac = (state.factor, True)

    def apply_inverse(v):
        return cho_solve(fac, v)

    lam_max, _, iters = power_max_eigenvalue(apply_inverse, tol, max_iters, seed, n=j)
    if iters >= max_iters:
        # an unconverged iterate can overshoot by more than the deflation
        # (tiny relative gap at the top of the spectrum); j is small, so solve
        logger.debug("power iteration hit max_iters=%d at order %d; solving exactly", max_iters, j)
        return float(np.linalg.eigvalsh(state.matrix)[0])
    if not lam_max > 0:
        return 0.0
    return (1.0 - deflation) / lam_max
