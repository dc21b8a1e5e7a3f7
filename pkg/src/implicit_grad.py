"""Implicit differentiation through the equilibrium.

The adjoint ``G = ∇_Z L`` solves ``G = D ⊙ (Σᵢ Wᵢᵀ G Aᵢᵀ + ∇_X L)`` with the
activation derivative D taken from the converged forward solve. Parameter
gradients then follow in closed form from G.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from equilibrium import FORWARD_MAX_ITER, FORWARD_TOL, BForm, aggregate, fixed_point_iterate
from linalg import DimensionError, SparseAdjacency, check_finite, rmul_sparse


@dataclass
class AdjointSolution:
    grad_Z: np.ndarray
    residuals: List[float] = field(default_factory=list)
    iterations: int = 0


@dataclass
class GradientBundle:
    """Gradients of one equilibrium layer.

    For heterogeneous layers ``grad_W`` and ``grad_Omega`` are lists (one entry
    per relation); otherwise a single matrix / dict.
    """

    grad_W: Union[np.ndarray, List[np.ndarray]]
    grad_Omega: Union[Dict[str, np.ndarray], List[Dict[str, np.ndarray]]]
    grad_U: Optional[np.ndarray]
    grad_Z: np.ndarray
    iterations: int = 0


def solve_backward_hetero(Ws: Sequence[np.ndarray], As: Sequence[SparseAdjacency],
                          D: np.ndarray, grad_X: np.ndarray, tol: float = FORWARD_TOL,
                          max_iter: int = FORWARD_MAX_ITER) -> AdjointSolution:
    """Solve ``G = D ⊙ (Σᵢ Wᵢᵀ G Aᵢᵀ + grad_X)`` by Picard iteration from G0 = 0.

    Raises:
        NonConvergenceError: no fixed point within max_iter
    """
    if D.shape != grad_X.shape:
        raise DimensionError(f"D {D.shape} and grad_X {grad_X.shape} must agree")
    if not Ws or len(Ws) != len(As):
        raise DimensionError("need equally many (nonzero) W and A terms")
    m, n = grad_X.shape
    for W, A in zip(Ws, As):
        if W.shape != (m, m) or A.n != n:
            raise DimensionError(f"W {W.shape} / adjacency {A.n} do not fit grad_X {grad_X.shape}")
    Wts = [W.T for W in Ws]
    Ats = [A.transpose() for A in As]

    def step(G: np.ndarray) -> np.ndarray:
        return D * (aggregate(Wts, Ats, G) + grad_X)

    G, residuals = fixed_point_iterate(step, np.zeros((m, n)), tol, max_iter, kind="backward")
    return AdjointSolution(grad_Z=G, residuals=residuals, iterations=len(residuals))


def solve_backward(W: np.ndarray, A: SparseAdjacency, D: np.ndarray, grad_X: np.ndarray,
                   tol: float = FORWARD_TOL, max_iter: int = FORWARD_MAX_ITER) -> AdjointSolution:
    """Solve ``G = D ⊙ (Wᵀ G Aᵀ + grad_X)``."""
    return solve_backward_hetero([W], [A], D, grad_X, tol=tol, max_iter=max_iter)


def _offset_grads(grad_Z: np.ndarray, A: SparseAdjacency, U: np.ndarray, b_form: BForm,
                  omegas: Dict[str, np.ndarray], GA: Optional[np.ndarray] = None):
    """Gradients of ⟨b_Ω(U), grad_Z⟩ with respect to each Ω and to U."""
    if GA is None and any(b_form.uses_adjacency):
        GA = rmul_sparse(grad_Z, A.transpose())
    grad_Omega: Dict[str, np.ndarray] = {}
    grad_U = np.zeros_like(U, dtype=np.float64)
    for name, through_A in zip(b_form.names, b_form.uses_adjacency):
        upstream = GA if through_A else grad_Z
        grad_Omega[name] = upstream @ U.T
        grad_U += omegas[name].T @ upstream
    return grad_Omega, grad_U


def param_grads(grad_Z: np.ndarray, X: np.ndarray, A: SparseAdjacency, U: np.ndarray,
                b_form: BForm, omegas: Dict[str, np.ndarray],
                iterations: int = 0) -> GradientBundle:
    """Closed-form gradients for W, every Ω of the b-form and the input U.

    ``grad_W = G Aᵀ Xᵀ``; for ΩUA ``grad_Ω = G Aᵀ Uᵀ`` and ``grad_U = Ωᵀ G Aᵀ``;
    for ΩU the Aᵀ factor is dropped; Ω₁UA+Ω₂U sums both pieces.
    """
    if grad_Z.shape != X.shape:
        raise DimensionError(f"grad_Z {grad_Z.shape} and X {X.shape} must agree")
    if U.shape[1] != X.shape[1]:
        raise DimensionError(f"U covers {U.shape[1]} nodes, state has {X.shape[1]}")
    GA = rmul_sparse(grad_Z, A.transpose())
    grad_W = GA @ X.T
    grad_Omega, grad_U = _offset_grads(grad_Z, A, U, b_form, omegas, GA=GA)
    for name, grad in grad_Omega.items():
        if grad.shape != omegas[name].shape:
            raise DimensionError(f"{name} gradient {grad.shape} does not match {omegas[name].shape}")
    return GradientBundle(grad_W=check_finite(grad_W, "grad_W"), grad_Omega=grad_Omega,
                          grad_U=check_finite(grad_U, "grad_U"), grad_Z=grad_Z,
                          iterations=iterations)


def param_grads_hetero(grad_Z: np.ndarray, X: np.ndarray, As: Sequence[SparseAdjacency],
                       U: np.ndarray, b_form: BForm, omegas: Sequence[Dict[str, np.ndarray]],
                       iterations: int = 0) -> GradientBundle:
    """Per-relation gradients; U is shared so its gradient sums over relations."""
    if len(As) != len(omegas):
        raise DimensionError("need one Ω set per relation")
    grad_Ws: List[np.ndarray] = []
    grad_Omegas: List[Dict[str, np.ndarray]] = []
    grad_U = np.zeros_like(U, dtype=np.float64)
    for A, relation_omegas in zip(As, omegas):
        bundle = param_grads(grad_Z, X, A, U, b_form, relation_omegas)
        grad_Ws.append(bundle.grad_W)
        grad_Omegas.append(bundle.grad_Omega)
        grad_U += bundle.grad_U
    return GradientBundle(grad_W=grad_Ws, grad_Omega=grad_Omegas, grad_U=grad_U,
                          grad_Z=grad_Z, iterations=iterations)
