"""Well-posedness checks, the tractable training constraint and its projection.

A pair (W, A) is well-posed for every CONE activation when
``λ_pf(A)·λ_pf(|W|) < 1``. Training enforces the stricter convex condition
``‖W‖∞ ≤ κ/λ_pf(A)`` (or ``Σᵢ ‖Aᵢ‖₁‖Wᵢ‖∞ ≤ κ`` for several relations) by a
row-wise projection onto L1 balls.
"""

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from linalg import (PF_MAX_ITER, PF_TOL, DimensionError, NonConvergenceError, SparseAdjacency,
                    inf_norm, kron_materialize, pf_eigen)

DEFAULT_KAPPA = 0.95
HETERO_EXACT_LIMIT = 400
FEASIBILITY_SLACK = 1e-12
EIGENVECTOR_FLOOR = 1e-12


class RescaleError(ValueError):
    """The PF eigenvector of |W| is too degenerate to rescale with."""


@dataclass
class WellPosedReport:
    lambda_pf_A: Optional[float]
    lambda_pf_absW: Optional[float]
    product: float
    inf_norm_W: float
    pf_holds: Optional[bool]
    tractable_holds: bool
    condition_notes: List[str] = field(default_factory=list)
    relation_bounds: List[float] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"lambda_pf(A)      = {_fmt(self.lambda_pf_A)}",
            f"lambda_pf(|W|)    = {_fmt(self.lambda_pf_absW)}",
            f"product           = {self.product:.6g}",
            f"inf_norm(W)       = {self.inf_norm_W:.6g}",
            f"pf condition      = {_holds(self.pf_holds)}",
            f"tractable         = {_holds(self.tractable_holds)}",
        ]
        lines += [f"note: {note}" for note in self.condition_notes]
        return "\n".join(lines)


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.6g}"


def _holds(flag: Optional[bool]) -> str:
    return "unknown" if flag is None else ("holds" if flag else "fails")


@dataclass
class ConstraintSpec:
    """Projection radii: ``κ/λ_pf(A)`` for one relation, ``κᵢ/‖Aᵢ‖₁`` for several."""

    kappa: float
    radius: float
    kappas: List[float] = field(default_factory=list)
    radii: List[float] = field(default_factory=list)

    def __post_init__(self):
        for k in [self.kappa] + list(self.kappas):
            if not 0.0 <= k < 1.0:
                raise ValueError(f"kappa must lie in [0, 1), got {k}")

    @classmethod
    def for_graph(cls, A: SparseAdjacency, kappa: float = DEFAULT_KAPPA) -> "ConstraintSpec":
        lam = A.pf_eigenvalue
        radius = np.inf if lam == 0.0 else kappa / lam
        return cls(kappa=kappa, radius=radius, kappas=[kappa], radii=[radius])

    @classmethod
    def for_hetero(cls, As: Sequence[SparseAdjacency],
                   kappas: Sequence[float]) -> "ConstraintSpec":
        if len(As) != len(kappas):
            raise DimensionError(f"{len(kappas)} kappas for {len(As)} relations")
        radii = [np.inf if A.one_norm == 0.0 else k / A.one_norm for A, k in zip(As, kappas)]
        total = float(sum(kappas))
        spec = cls(kappa=min(total, np.nextafter(1.0, 0.0)), radius=radii[0],
                   kappas=list(kappas), radii=radii)
        if total >= 1.0:
            warnings.warn(f"sum of relation kappas is {total:.3f} >= 1; well-posedness is no "
                          f"longer certified by the tractable bound", RuntimeWarning)
        return spec

    @property
    def certified(self) -> bool:
        return float(sum(self.kappas)) < 1.0


def _notes(A: SparseAdjacency, W: np.ndarray, lam_A: float) -> List[str]:
    notes = []
    if lam_A == 0.0:
        notes.append("DAG detected: adjacency is nilpotent, well-posed for any W")
    row_sums = np.asarray(A.csr.sum(axis=1)).ravel()
    col_sums = np.asarray(A.csr.sum(axis=0)).ravel()
    binary = A.nnz == 0 or np.all(A.values == 1.0)
    if binary and A.n and np.all(row_sums == row_sums[0]) and np.all(col_sums == row_sums[0]):
        k = row_sums[0]
        spectral = float(np.linalg.norm(W, 2)) if W.size else 0.0
        status = "holds" if k * spectral < 1 else "fails"
        notes.append(f"{k:g}-regular graph detected: k*||W||_2 = {k * spectral:.6g} ({status})")
    bound = A.one_norm * inf_norm(W)
    if bound < 1:
        notes.append(f"contraction bound ||A||_1*||W||_inf = {bound:.6g} < 1")
    else:
        notes.append(f"contraction bound ||A||_1*||W||_inf = {bound:.6g} (not a contraction)")
    return notes


def check(W: np.ndarray, A: SparseAdjacency, tol: float = PF_TOL,
          max_iter: int = PF_MAX_ITER) -> WellPosedReport:
    """Evaluate the PF and tractable conditions for one relation."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionError(f"W must be square, got {W.shape}")
    lam_A = A.pf_eigenvalue
    lam_W, _ = pf_eigen(np.abs(W), tol=tol, max_iter=max_iter)
    norm_W = inf_norm(W)
    product = lam_A * lam_W
    return WellPosedReport(
        lambda_pf_A=lam_A,
        lambda_pf_absW=lam_W,
        product=product,
        inf_norm_W=norm_W,
        pf_holds=product < 1.0,
        tractable_holds=lam_A * norm_W < 1.0,
        condition_notes=_notes(A, W, lam_A),
        relation_bounds=[A.one_norm * norm_W],
    )


def check_hetero(Ws: Sequence[np.ndarray], As: Sequence[SparseAdjacency],
                 kappa: float = DEFAULT_KAPPA) -> WellPosedReport:
    """Evaluate the tractable bound Σ‖Aᵢ‖₁‖Wᵢ‖∞ ≤ κ and, on small instances, the exact PF condition."""
    if not Ws or len(Ws) != len(As):
        raise DimensionError("need equally many (nonzero) W and A terms")
    if len(Ws) == 1:
        report = check(Ws[0], As[0])
        report.tractable_holds = report.relation_bounds[0] <= kappa
        return report

    bounds = [A.one_norm * inf_norm(W) for W, A in zip(Ws, As)]
    total = float(sum(bounds))
    tractable = total <= kappa
    m, n = Ws[0].shape[0], As[0].n
    notes = [f"tractable bound sum ||A_i||_1*||W_i||_inf = {total:.6g} (kappa {kappa:g})"]
    if m * n <= HETERO_EXACT_LIMIT:
        operator = sum(np.abs(kron_materialize(A.toarray().T, W)) for W, A in zip(Ws, As))
        product, _ = pf_eigen(operator)
        pf_holds: Optional[bool] = product < 1.0
        notes.append("PF condition evaluated on the materialized Kronecker sum")
    else:
        product = total
        pf_holds = True if total < 1.0 else None
        notes.append("PF condition implied by the tractable bound" if pf_holds
                     else "PF condition unknown (instance too large to materialize)")
    return WellPosedReport(
        lambda_pf_A=None,
        lambda_pf_absW=None,
        product=product,
        inf_norm_W=max(inf_norm(W) for W in Ws),
        pf_holds=pf_holds,
        tractable_holds=tractable,
        condition_notes=notes,
        relation_bounds=bounds,
    )


def l1_ball_project(v: np.ndarray, r: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{u : ‖u‖₁ ≤ r}`` by sort-and-threshold.

    Raises:
        ValueError: negative radius
    """
    if r < 0:
        raise ValueError(f"radius must be nonnegative, got {r}")
    v = np.asarray(v, dtype=np.float64)
    magnitude = np.abs(v)
    if magnitude.sum() <= r + FEASIBILITY_SLACK:
        return v.copy()
    if r == 0:
        return np.zeros_like(v)
    u = np.sort(magnitude, kind='stable')[::-1]
    cssv = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    rho = np.nonzero(u - (cssv - r) / j > 0)[0][-1]
    theta = (cssv[rho] - r) / (rho + 1.0)
    return np.sign(v) * np.maximum(magnitude - theta, 0.0)


def project_radius(W: np.ndarray, radius: float) -> np.ndarray:
    if np.isinf(radius):
        return np.array(W, dtype=np.float64, copy=True)
    return np.vstack([l1_ball_project(row, radius) for row in W]) if W.size else W.copy()


def project_W(W: np.ndarray, spec: ConstraintSpec) -> np.ndarray:
    """Project each row of W onto the L1 ball of radius ``spec.radius``."""
    return project_radius(W, spec.radius)


def project_hetero(Ws: Sequence[np.ndarray], spec: ConstraintSpec) -> List[np.ndarray]:
    """Project each Wᵢ onto ``‖Wᵢ‖∞ ≤ κᵢ/‖Aᵢ‖₁``."""
    if len(Ws) != len(spec.radii):
        raise DimensionError(f"{len(spec.radii)} radii for {len(Ws)} weights")
    return [project_radius(W, radius) for W, radius in zip(Ws, spec.radii)]


def _perron_vector(M: np.ndarray) -> Tuple[float, np.ndarray]:
    """Dense Perron pair of a strictly positive matrix."""
    values, vectors = np.linalg.eig(M)
    k = int(np.argmax(values.real))
    v = vectors[:, k].real
    v = v * np.sign(v.sum())
    return float(values[k].real), v


def rescale_vector(W: np.ndarray, tol: float = PF_TOL, max_iter: int = PF_MAX_ITER,
                   regularization: float = 1e-9) -> Tuple[float, np.ndarray]:
    """Right PF eigenpair of |W|, regularized when the eigenvector has vanishing entries.

    A zero W returns the all-ones vector. When power iteration yields a vector
    with vanishing entries (or none at all, as for nilpotent |W|), the vector is
    taken from the dense eigendecomposition of ``|W| + ε·11ᵀ``, whose Perron
    vector is strictly positive.

    Raises:
        RescaleError: eigenvector still degenerate after regularization
    """
    absW = np.abs(np.asarray(W, dtype=np.float64))
    m = absW.shape[0]
    if not absW.any():
        return 0.0, np.ones(m)
    shift = max(1e-3, 0.5 * inf_norm(absW))
    lam: Optional[float]
    try:
        lam, v = pf_eigen(absW, tol=tol, max_iter=max_iter, shift=shift, require_vector=True)
        degenerate = lam == 0.0 or v.min() < EIGENVECTOR_FLOOR * v.max()
    except NonConvergenceError:
        lam, degenerate = None, True
    if degenerate:
        eps = regularization * max(absW.max(), 1.0)
        lam_reg, v = _perron_vector(absW + eps)
        if lam is None:
            lam = max(lam_reg - m * eps, 0.0)
        if not np.all(np.isfinite(v)) or v.min() < EIGENVECTOR_FLOOR * v.max():
            raise RescaleError(f"PF eigenvector of |W| has entries below {EIGENVECTOR_FLOOR} "
                               f"after regularization (min {v.min():.3e})")
    return lam, v / v.max()


def rescale(W: np.ndarray, head: np.ndarray,
            offsets: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray], np.ndarray]:
    """Linearly rescale (W, head, offsets) to an equivalent model with ‖W′‖∞ = λ_pf(|W|).

    With v the right PF eigenvector of |W| and S = diag(v)⁻¹:
    ``W′ = S W S⁻¹``, ``head′ = head S⁻¹`` and every offset map ``Ω′ = S Ω``.
    The state becomes ``X′ = S X``; outputs are unchanged for positively
    homogeneous activations.

    Returns:
        Tuple of (W′, head′, offsets′, v)
    """
    W = np.asarray(W, dtype=np.float64)
    _, v = rescale_vector(W)
    if head.shape[1] != W.shape[0]:
        raise DimensionError(f"head {head.shape} does not consume a state of size {W.shape[0]}")
    W_new = W * v[None, :] / v[:, None]
    head_new = head * v[None, :]
    offsets_new = [omega / v[:, None] for omega in offsets]
    return W_new, head_new, offsets_new, v
