"""Dense/sparse matrix primitives, norms and Perron-Frobenius eigenvalue estimation.

Dense matrices are ``numpy`` float64 arrays (row-major, 2-D). Adjacency matrices
are :class:`SparseAdjacency`, a validated wrapper around ``scipy.sparse`` CSR
storage that caches its 1-norm and PF eigenvalue.
"""

from typing import Any, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp

PF_TOL = 1e-8
PF_MAX_ITER = 10_000
PF_SHIFT = 1e-3
SHIFT_ESCALATE_AFTER = 500
NILPOTENT_FLOOR = 1e-300
KRON_MAX_ENTRIES = 1_000_000


class DimensionError(ValueError):
    """Raised when matrix shapes do not agree."""


class NonFiniteError(ValueError):
    """Raised when a matrix would carry NaN or Inf entries."""


class NonConvergenceError(RuntimeError):
    """An iterative method stopped at max_iter without meeting its tolerance.

    Carries the last estimate/iterate and the residual trace so callers can
    report how far the iteration got. ``kind``, ``layer`` and ``epoch`` are
    filled in by callers as the error travels up.
    """

    def __init__(self, message: str, last_estimate: Any = None,
                 iterate: Optional[np.ndarray] = None,
                 residuals: Optional[List[float]] = None):
        super().__init__(message)
        self.message = message
        self.last_estimate = last_estimate
        self.iterate = iterate
        self.residuals = list(residuals) if residuals is not None else []
        self.kind: Optional[str] = None
        self.layer: Optional[int] = None
        self.epoch: Optional[int] = None

    def with_context(self, kind: Optional[str] = None, layer: Optional[int] = None,
                     epoch: Optional[int] = None) -> "NonConvergenceError":
        if kind is not None:
            self.kind = kind
        if layer is not None:
            self.layer = layer
        if epoch is not None:
            self.epoch = epoch
        return self

    def __str__(self) -> str:
        parts = []
        if self.epoch is not None:
            parts.append(f"epoch {self.epoch}")
        if self.layer is not None:
            parts.append(f"layer {self.layer}")
        if self.kind is not None:
            parts.append(self.kind)
        prefix = f"[{', '.join(parts)}] " if parts else ""
        return prefix + self.message


def check_finite(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(M)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return M


def as_dense(data: Any, name: str = "matrix") -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array (copying only when needed)."""
    if sp.issparse(data):
        data = data.toarray()
    elif isinstance(data, SparseAdjacency):
        data = data.toarray()
    M = np.asarray(data, dtype=np.float64)
    if M.ndim == 1:
        M = M.reshape(1, -1)
    if M.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {M.shape}")
    return check_finite(M, name)


class SparseAdjacency:
    """Square nonnegative CSR matrix with cached norms and PF eigenvalue."""

    def __init__(self, matrix: Any):
        csr = sp.csr_matrix(matrix, dtype=np.float64)
        if csr.shape[0] != csr.shape[1]:
            raise DimensionError(f"adjacency must be square, got shape {csr.shape}")
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        check_finite(csr.data, "adjacency")
        if csr.nnz and csr.data.min() < 0:
            raise ValueError("adjacency entries must be nonnegative")
        self.csr = csr
        self._one_norm: Optional[float] = None
        self._pf: Optional[float] = None
        self._transpose: Optional["SparseAdjacency"] = None

    @classmethod
    def from_edges(cls, n: int, rows: Any, cols: Any, values: Any = None) -> "SparseAdjacency":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if values is None:
            values = np.ones(len(rows), dtype=np.float64)
        return cls(sp.coo_matrix((values, (rows, cols)), shape=(n, n)))

    @classmethod
    def identity(cls, n: int) -> "SparseAdjacency":
        return cls(sp.identity(n, dtype=np.float64, format='csr'))

    @classmethod
    def zeros(cls, n: int) -> "SparseAdjacency":
        return cls(sp.csr_matrix((n, n), dtype=np.float64))

    @property
    def n(self) -> int:
        return self.csr.shape[0]

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    @property
    def row_ptr(self) -> np.ndarray:
        return self.csr.indptr

    @property
    def col_idx(self) -> np.ndarray:
        return self.csr.indices

    @property
    def values(self) -> np.ndarray:
        return self.csr.data

    @property
    def one_norm(self) -> float:
        """Max column sum (entries are nonnegative)."""
        if self._one_norm is None:
            col_sums = np.asarray(self.csr.sum(axis=0)).ravel()
            self._one_norm = float(col_sums.max()) if col_sums.size else 0.0
        return self._one_norm

    @property
    def inf_norm(self) -> float:
        """Max row sum (entries are nonnegative)."""
        row_sums = np.asarray(self.csr.sum(axis=1)).ravel()
        return float(row_sums.max()) if row_sums.size else 0.0

    @property
    def pf_eigenvalue(self) -> float:
        """Lazily computed and cached PF eigenvalue."""
        return self.compute_pf()

    def compute_pf(self, tol: float = PF_TOL, max_iter: int = PF_MAX_ITER) -> float:
        if self._pf is None:
            self._pf, _ = pf_eigen(self, tol=tol, max_iter=max_iter)
        return self._pf

    def transpose(self) -> "SparseAdjacency":
        if self._transpose is None:
            self._transpose = SparseAdjacency(self.csr.transpose().tocsr())
            self._transpose._transpose = self
        return self._transpose

    @property
    def T(self) -> "SparseAdjacency":
        return self.transpose()

    def abs_sum(self) -> float:
        return float(self.csr.data.sum())

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.csr @ v

    def __repr__(self) -> str:
        return f"SparseAdjacency(n={self.n}, nnz={self.nnz})"


def matmul(L: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Dense product with shape checking."""
    if L.ndim != 2 or R.ndim != 2 or L.shape[1] != R.shape[0]:
        raise DimensionError(f"cannot multiply {L.shape} by {R.shape}")
    return check_finite(L @ R, "product")


def rmul_sparse(X: np.ndarray, A: SparseAdjacency) -> np.ndarray:
    """Compute ``X @ A`` for dense X (m×n) and sparse A (n×n)."""
    if X.ndim != 2 or X.shape[1] != A.n:
        raise DimensionError(f"cannot multiply {X.shape} by adjacency of size {A.n}")
    # (Aᵀ Xᵀ)ᵀ keeps scipy on its sparse × dense kernel
    out = np.asarray(A.csr.T @ X.T).T
    return check_finite(np.ascontiguousarray(out), "sparse product")


def inf_norm(M: Union[np.ndarray, SparseAdjacency]) -> float:
    """Max-row-sum norm; 0 for an empty matrix."""
    if isinstance(M, SparseAdjacency):
        return M.inf_norm
    M = np.asarray(M)
    if M.size == 0:
        return 0.0
    return float(np.abs(M).sum(axis=1).max())


def one_norm(M: Union[np.ndarray, SparseAdjacency]) -> float:
    """Max-column-sum norm; 0 for an empty matrix."""
    if isinstance(M, SparseAdjacency):
        return M.one_norm
    M = np.asarray(M)
    if M.size == 0:
        return 0.0
    return float(np.abs(M).sum(axis=0).max())


def _operator(S: Any):
    """Return (n, matvec, inf_norm, one_norm) for a dense or sparse square matrix."""
    if isinstance(S, SparseAdjacency):
        return S.n, S.matvec, S.inf_norm, S.one_norm
    if sp.issparse(S):
        S = SparseAdjacency(S)
        return S.n, S.matvec, S.inf_norm, S.one_norm
    M = np.asarray(S, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"PF eigenvalue needs a square matrix, got shape {M.shape}")
    check_finite(M, "matrix")
    if M.size and M.min() < 0:
        raise ValueError("PF eigenvalue needs a nonnegative matrix")
    return M.shape[0], (lambda v: M @ v), inf_norm(M), one_norm(M)


def pf_eigen(S: Any, tol: float = PF_TOL, max_iter: int = PF_MAX_ITER,
             shift: float = PF_SHIFT, seed: int = 0,
             require_vector: bool = False) -> Tuple[float, np.ndarray]:
    """Estimate the Perron-Frobenius eigenvalue of a nonnegative square matrix.

    Power iteration on ``S + shift*I`` from a strictly positive random start;
    the shift removes the oscillation of periodic (bipartite, cyclic)
    structure. If the estimate has not settled after ``SHIFT_ESCALATE_AFTER``
    steps the shift grows to half the smaller induced norm of S.
    The returned vector is the final iterate with ``sum(v) = 1``.
    Nilpotent matrices are detected first and return ``(0, ones/n)``.

    Args:
        S: nonnegative square matrix (dense array, scipy sparse or SparseAdjacency)
        tol: tolerance on successive eigenvalue estimates (relative above 1)
        max_iter: iteration budget
        shift: diagonal shift applied during iteration
        seed: seed for the positive start vector
        require_vector: also require the iterate itself to settle within tol

    Returns:
        Tuple of (eigenvalue, eigenvector)

    Raises:
        NonConvergenceError: when max_iter is exhausted
    """
    n, apply, s_inf, s_one = _operator(S)
    if n == 0:
        return 0.0, np.zeros(0)
    ones = np.full(n, 1.0 / n)

    # Nilpotency check on the support: S^k u = 0 for some k <= n iff S is nilpotent.
    u = ones.copy()
    support = u > 0
    for _ in range(min(n, max_iter) + 1):
        u = apply(u)
        total = u.sum()
        if total < NILPOTENT_FLOOR:
            return 0.0, ones
        u = u / total
        new_support = u > 0
        if np.array_equal(new_support, support):
            break
        support = new_support

    rng = np.random.default_rng(seed)
    v = rng.uniform(0.5, 1.5, size=n)
    v /= v.sum()
    estimate = np.inf
    # A small shift leaves the -λ mode of bipartite graphs decaying at ~1 - 2δ/λ.
    escalated_shift = max(shift, 0.5 * min(s_inf, s_one))
    for it in range(max_iter):
        if it == SHIFT_ESCALATE_AFTER:
            shift = escalated_shift
        Sv = apply(v)
        w = Sv + shift * v
        total = w.sum()
        new_estimate = Sv.sum() / v.sum()
        new_v = w / total
        delta_v = np.abs(new_v - v).sum()
        settled = abs(new_estimate - estimate) <= tol * max(1.0, abs(new_estimate))
        if require_vector:
            settled = settled and delta_v <= tol
        estimate, v = new_estimate, new_v
        if settled:
            # Any induced norm bounds the spectral radius.
            return float(min(max(estimate, 0.0), s_inf, s_one)), v
    raise NonConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        last_estimate=float(estimate), iterate=v,
    )


def vec(X: np.ndarray) -> np.ndarray:
    """Stack the columns of X into one vector."""
    return np.asarray(X).reshape(-1, order='F')


def unvec(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`."""
    return np.asarray(x).reshape((rows, cols), order='F')


def kron_materialize(A: Any, B: Any) -> np.ndarray:
    """Materialize the Kronecker product of two small matrices.

    Raises:
        ValueError: when the product would exceed ``KRON_MAX_ENTRIES`` entries
    """
    A = as_dense(A, "A")
    B = as_dense(B, "B")
    size = A.shape[0] * B.shape[0] * A.shape[1] * B.shape[1]
    if size > KRON_MAX_ENTRIES:
        raise ValueError(f"Kronecker product of {A.shape} and {B.shape} has {size} entries "
                         f"(limit {KRON_MAX_ENTRIES})")
    return np.kron(A, B)
