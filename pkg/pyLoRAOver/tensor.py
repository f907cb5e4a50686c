"""
Dense tensor arithmetic and the truncated SVD used by every decomposition
"""
import logging

import numpy as np
from scipy import linalg

from .aux_functions import prod
from .exceptions import BadWildcard, DidNotConverge, NonFinite, ShapeMismatch, SizeMismatch

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


class DenseTensor:
    """
    n-dimensional real array stored row-major in 64-bit floats.

    The wrapped array is read-only, so a DenseTensor can be shared freely.
    Scalars are represented as 1-element order-1 tensors.
    """

    def __init__(self, values, dims=None):
        array = np.array(values, dtype=np.float64, copy=True, order='C')
        if dims is not None:
            dims = tuple(int(d) for d in dims)
            if prod(dims) != array.size:
                raise SizeMismatch(f'Data length {array.size} does not match dims {list(dims)}.')
            array = array.reshape(dims)
        if array.ndim == 0:
            array = array.reshape(1)
        if any(d < 1 for d in array.shape):
            raise SizeMismatch(f'All tensor dims should be >= 1, got {list(array.shape)}.')
        array.flags.writeable = False
        self._array = array

    def __repr__(self):
        return f'DenseTensor(dims={list(self.dims)})'

    def __array__(self, dtype=None, copy=None):
        if dtype is not None and np.dtype(dtype) != self._array.dtype:
            return self._array.astype(dtype)
        return self._array.copy() if copy else self._array

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self._array, other._array)

    __hash__ = None

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros(tuple(dims)))

    @classmethod
    def identity(cls, n):
        return cls(np.eye(int(n)))

    @property
    def dims(self):
        """Tuple of dimension sizes"""
        return self._array.shape

    @property
    def order(self):
        """Number of indices"""
        return self._array.ndim

    @property
    def size(self):
        """Number of stored floats"""
        return self._array.size

    @property
    def data(self):
        """Flat row-major view of the values"""
        return self._array.reshape(-1)

    @property
    def array(self):
        """Read-only numpy view of the tensor"""
        return self._array


class SvdResult:
    """Truncated singular value decomposition m ~ u . diag(sigma) . vt"""

    def __init__(self, u, sigma, vt, discarded_energy=0.0):
        self._u = u if isinstance(u, DenseTensor) else DenseTensor(u)
        self._sigma = np.array(sigma, dtype=np.float64)
        self._sigma.flags.writeable = False
        self._vt = vt if isinstance(vt, DenseTensor) else DenseTensor(vt)
        self._discarded_energy = float(discarded_energy)

    def __repr__(self):
        return f'SvdResult(rank={self.rank}, sigma_max={self._sigma[0]:.4e}, discarded={self._discarded_energy:.4e})'

    @property
    def u(self):
        """Left singular vectors, p x k"""
        return self._u

    @property
    def sigma(self):
        """Singular values, non-increasing"""
        return self._sigma

    @property
    def vt(self):
        """Right singular vectors, k x q"""
        return self._vt

    @property
    def discarded_energy(self):
        """Sum of squares of the truncated singular values"""
        return self._discarded_energy

    @property
    def rank(self):
        return len(self._sigma)

    def reconstruct(self):
        """u . diag(sigma) . vt as a DenseTensor"""
        return DenseTensor((self._u.array * self._sigma) @ self._vt.array)


def as_array(t) -> np.ndarray:
    """Float64 numpy view of a DenseTensor or array-like"""
    if isinstance(t, DenseTensor):
        return t.array
    return np.asarray(t, dtype=np.float64)


def _resolve_dims(size, new_dims):
    new_dims = [int(d) for d in new_dims]
    wildcards = [i for i, d in enumerate(new_dims) if d == -1]
    if len(wildcards) > 1:
        raise BadWildcard(f'Only one wildcard -1 allowed in {new_dims}.')
    if any(d < 1 and d != -1 for d in new_dims):
        raise SizeMismatch(f'Invalid dims {new_dims}.')
    if wildcards:
        known = prod(d for d in new_dims if d != -1)
        if size % known != 0 or size // known < 1:
            raise BadWildcard(f'Cannot resolve wildcard in {new_dims} for {size} elements.')
        new_dims[wildcards[0]] = size // known
    if prod(new_dims) != size:
        raise SizeMismatch(f'Cannot reshape {size} elements into {new_dims}.')
    return tuple(new_dims)


def reshape(t: DenseTensor, new_dims) -> DenseTensor:
    """Row-major reshape. At most one entry of new_dims may be -1."""
    dims = _resolve_dims(t.size, new_dims)
    return DenseTensor(t.array.reshape(dims))


def matmul(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """Matrix product of two 2-d tensors"""
    if a.order != 2 or b.order != 2 or a.dims[1] != b.dims[0]:
        raise ShapeMismatch(f'Cannot multiply {list(a.dims)} by {list(b.dims)}.')
    return DenseTensor(a.array @ b.array)


def frobenius_norm(t) -> float:
    """Square root of the sum of squares of all entries"""
    return float(np.linalg.norm(as_array(t).reshape(-1)))


def _round_robin(n):
    """
    Rounds of disjoint column pairs covering every pair once (n even).
    Player 0 stays put while the others rotate.
    """
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        top, bottom = players[:half], players[half:][::-1]
        left = np.array([min(i, j) for i, j in zip(top, bottom)])
        right = np.array([max(i, j) for i, j in zip(top, bottom)])
        rounds.append((left, right))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi(a):
    """
    One-sided (Hestenes) Jacobi orthogonalization of the columns of a.

    Returns (w, v) with a . v = w, v orthogonal and the columns of w mutually
    orthogonal to within JACOBI_TOL relative.
    """
    p, n = a.shape
    pad = n % 2
    w = np.hstack([a, np.zeros((p, pad))]) if pad else a.copy()
    v = np.eye(n + pad)
    rounds = _round_robin(n + pad) if n + pad > 1 else []
    for sweep in range(JACOBI_MAX_SWEEPS):
        rotated = 0
        for left, right in rounds:
            wi, wj = w[:, left], w[:, right]
            alpha = np.einsum('ij,ij->j', wi, wi)
            beta = np.einsum('ij,ij->j', wj, wj)
            gamma = np.einsum('ij,ij->j', wi, wj)
            active = np.abs(gamma) > JACOBI_TOL * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated += int(np.count_nonzero(active))
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.hypot(1.0, t), 1.0)
            s = np.where(active, c * t, 0.0)
            w[:, left], w[:, right] = c * wi - s * wj, s * wi + c * wj
            vi, vj = v[:, left], v[:, right]
            v[:, left], v[:, right] = c * vi - s * vj, s * vi + c * vj
        if rotated == 0:
            logging.getLogger('LoRAOver').debug(f'Jacobi converged after {sweep + 1} sweeps on {p}x{n}')
            return w[:, :n], v[:n, :n]
    raise DidNotConverge(f'Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps for a {p}x{n} matrix.')


def _complete_basis(u, valid):
    """Replace the columns of u flagged invalid with an orthonormal completion"""
    p, k = u.shape
    basis = [u[:, i] for i in range(k) if valid[i]]
    candidates = iter(np.eye(p))
    for i in range(k):
        if valid[i]:
            continue
        for e in candidates:
            x = e.copy()
            for _ in range(2):
                for b in basis:
                    x -= np.dot(b, x) * b
            norm = np.linalg.norm(x)
            if norm > 0.5:
                u[:, i] = x / norm
                basis.append(u[:, i])
                break
    return u


def _svd_full(m):
    """Thin SVD (u, sigma, vt) of m, sorted, sign-canonical"""
    rows, cols = m.shape
    transposed = rows < cols
    a = m.T if transposed else m
    # Column-pivoted QR, a[:, piv] = q r, then Jacobi on r^T: the sweeps run
    # on a small square factor with graded column norms
    q, r, piv = linalg.qr(a, mode='economic', pivoting=True)
    w, v = _jacobi(np.array(r.T, dtype=np.float64))
    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind='stable')
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    smax = sigma[0] if sigma.size else 0.0
    valid = sigma > smax * 64 * np.finfo(float).eps
    right = np.zeros_like(w)
    right[:, valid] = w[:, valid] / sigma[valid]
    right = _complete_basis(right, valid)
    u = q @ v
    vr = np.empty_like(right)
    vr[piv] = right
    # a = u s vr^T; undo the transpose
    left, right_t = (vr, u.T) if transposed else (u, vr.T)
    left, right_t = np.array(left), np.array(right_t)
    for k in range(left.shape[1]):
        col = left[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-14)
        if nz.size and col[nz[0]] < 0:
            left[:, k] = -col
            right_t[k, :] = -right_t[k, :]
    return left, sigma, right_t


def svd_truncated(m: DenseTensor, keep: int) -> SvdResult:
    """
    Top-'keep' singular triplets of a 2-d tensor, by one-sided Jacobi.

    The first non-negligible entry of every left singular vector is made
    positive, so the result is reproducible across runs.
    """
    arr = as_array(m)
    if arr.ndim != 2:
        raise ShapeMismatch(f'svd_truncated expects a 2-d tensor, got {list(arr.shape)}.')
    if not np.all(np.isfinite(arr)):
        raise NonFinite('svd_truncated input contains NaN or Inf.')
    keep = int(keep)
    if keep < 1 or keep > min(arr.shape):
        raise ShapeMismatch(f'keep={keep} outside [1, {min(arr.shape)}] for a {arr.shape[0]}x{arr.shape[1]} matrix.')
    u, sigma, vt = _svd_full(arr)
    discarded = float(np.sum(sigma[keep:] ** 2))
    return SvdResult(u[:, :keep], sigma[:keep], vt[:keep, :], discarded)
