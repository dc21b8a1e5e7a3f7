"""CONE activation maps, affine input forms and forward fixed-point solvers.

The ordinary equilibrium is ``X = φ(W X A + B)``; the heterogeneous one is
``X = φ(Σᵢ (Wᵢ X Aᵢ + Bᵢ))``. Both are solved by plain Picard iteration from
``X0 = 0`` (or a warm start).
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from linalg import (DimensionError, NonConvergenceError, NonFiniteError, SparseAdjacency,
                    rmul_sparse)

FORWARD_TOL = 1e-6
FORWARD_MAX_ITER = 300

ACTIVATION_KINDS = ("relu", "leaky_relu", "tanh", "sigmoid", "identity")
HOMOGENEOUS_KINDS = ("relu", "leaky_relu", "identity")


@dataclass(frozen=True)
class Activation:
    """Elementwise CONE activation."""

    kind: str = "relu"
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {ACTIVATION_KINDS}")
        if self.kind == "leaky_relu" and not 0.0 <= self.slope <= 1.0:
            raise ValueError(f"leaky_relu slope must lie in [0, 1], got {self.slope}")

    @classmethod
    def parse(cls, tag: str) -> "Activation":
        """Parse ``relu``, ``leaky_relu:0.2`` and friends."""
        name, _, arg = tag.strip().partition(':')
        if name == "leaky_relu" and arg:
            return cls(name, float(arg))
        return cls(name)

    @property
    def tag(self) -> str:
        return f"leaky_relu:{self.slope!r}" if self.kind == "leaky_relu" else self.kind

    @property
    def positively_homogeneous(self) -> bool:
        return self.kind in HOMOGENEOUS_KINDS

    def apply(self, Z: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.maximum(Z, 0.0)
        if self.kind == "leaky_relu":
            return np.where(Z > 0, Z, self.slope * Z)
        if self.kind == "tanh":
            return np.tanh(Z)
        if self.kind == "sigmoid":
            return expit(Z)
        return np.array(Z, dtype=np.float64, copy=True)

    def derivative(self, Z: np.ndarray) -> np.ndarray:
        """Elementwise derivative; at a kink the lower one-sided value is used."""
        if self.kind == "relu":
            return (Z > 0).astype(np.float64)
        if self.kind == "leaky_relu":
            return np.where(Z > 0, 1.0, self.slope)
        if self.kind == "tanh":
            return 1.0 - np.tanh(Z) ** 2
        if self.kind == "sigmoid":
            s = expit(Z)
            return s * (1.0 - s)
        return np.ones_like(Z, dtype=np.float64)

    def kinks(self, Z: np.ndarray, radius: float) -> bool:
        """True when some entry sits within ``radius`` of a non-differentiable point."""
        if self.kind in ("relu", "leaky_relu"):
            return bool(np.any(np.abs(Z) < radius))
        return False


@dataclass(frozen=True)
class BlockActivation:
    """Row-block composition of activations, e.g. (identity on c rows, relu on h rows)."""

    blocks: Tuple[Tuple[int, Activation], ...]

    @classmethod
    def parse(cls, tag: str) -> "BlockActivation":
        inner = tag.strip()[len("block["):-1]
        blocks = []
        for item in inner.split(','):
            rows, _, name = item.partition('*')
            blocks.append((int(rows), Activation.parse(name)))
        return cls(tuple(blocks))

    @property
    def tag(self) -> str:
        return "block[" + ",".join(f"{rows}*{act.tag}" for rows, act in self.blocks) + "]"

    @property
    def rows(self) -> int:
        return sum(rows for rows, _ in self.blocks)

    @property
    def positively_homogeneous(self) -> bool:
        return all(act.positively_homogeneous for _, act in self.blocks)

    def _map(self, Z: np.ndarray, method: str) -> np.ndarray:
        if Z.shape[0] != self.rows:
            raise DimensionError(f"block activation covers {self.rows} rows, got {Z.shape[0]}")
        out = np.empty_like(Z, dtype=np.float64)
        start = 0
        for rows, act in self.blocks:
            out[start:start + rows] = getattr(act, method)(Z[start:start + rows])
            start += rows
        return out

    def apply(self, Z: np.ndarray) -> np.ndarray:
        return self._map(Z, "apply")

    def derivative(self, Z: np.ndarray) -> np.ndarray:
        return self._map(Z, "derivative")

    def kinks(self, Z: np.ndarray, radius: float) -> bool:
        start = 0
        for rows, act in self.blocks:
            if act.kinks(Z[start:start + rows], radius):
                return True
            start += rows
        return False


AnyActivation = Union[Activation, BlockActivation]


def parse_activation(tag: str) -> AnyActivation:
    if tag.startswith("block["):
        return BlockActivation.parse(tag)
    return Activation.parse(tag)


def apply(phi: AnyActivation, Z: np.ndarray) -> np.ndarray:
    return phi.apply(Z)


def derivative(phi: AnyActivation, Z: np.ndarray) -> np.ndarray:
    return phi.derivative(Z)


class BForm:
    """Affine input map b_Ω(U): ``OUA`` (ΩUA), ``OU`` (ΩU) or ``OUA+OU`` (Ω₁UA + Ω₂U)."""

    TAGS = ("OUA", "OU", "OUA+OU")

    def __init__(self, tag: str = "OUA"):
        if tag not in self.TAGS:
            raise ValueError(f"unknown b_form {tag!r}; expected one of {self.TAGS}")
        self.tag = tag

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BForm) and other.tag == self.tag

    def __repr__(self) -> str:
        return f"BForm({self.tag!r})"

    @property
    def names(self) -> Tuple[str, ...]:
        return ("Omega1", "Omega2") if self.tag == "OUA+OU" else ("Omega",)

    @property
    def uses_adjacency(self) -> Tuple[bool, ...]:
        return {"OUA": (True,), "OU": (False,), "OUA+OU": (True, False)}[self.tag]

    def init_shapes(self, m: int, p: int) -> Dict[str, Tuple[int, int]]:
        return {name: (m, p) for name in self.names}

    def evaluate(self, omegas: Dict[str, np.ndarray], U: np.ndarray,
                 A: SparseAdjacency) -> np.ndarray:
        B = None
        for name, through_A in zip(self.names, self.uses_adjacency):
            term = omegas[name] @ U
            if through_A:
                term = rmul_sparse(term, A)
            B = term if B is None else B + term
        return B


@dataclass
class EquilibriumSolution:
    X: np.ndarray
    D: np.ndarray
    Z: np.ndarray
    residuals: List[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0


def fixed_point_iterate(step: Callable[[np.ndarray], np.ndarray], X0: np.ndarray,
                        tol: float, max_iter: int,
                        kind: str = "forward") -> Tuple[np.ndarray, List[float]]:
    """Iterate ``X <- step(X)`` until the max-abs change is at most ``tol``.

    Raises:
        NonConvergenceError: after max_iter updates, or as soon as the iterate
            stops being finite
    """
    X = X0
    residuals: List[float] = []
    for _ in range(max_iter):
        try:
            X_next = step(X)
        except NonFiniteError as e:
            raise NonConvergenceError(f"iterate diverged to non-finite values ({e})",
                                      last_estimate=residuals[-1] if residuals else None,
                                      iterate=X, residuals=residuals).with_context(kind=kind) from e
        residual = float(np.max(np.abs(X_next - X))) if X.size else 0.0
        residuals.append(residual)
        if not np.isfinite(residual):
            raise NonConvergenceError("iterate diverged to non-finite values",
                                      last_estimate=residual, iterate=X,
                                      residuals=residuals).with_context(kind=kind)
        X = X_next
        if residual <= tol:
            return X, residuals
    raise NonConvergenceError(
        f"no fixed point within {max_iter} iterations (last residual {residuals[-1]:.3e}); "
        f"the (W, A) pair may be ill-posed",
        last_estimate=residuals[-1] if residuals else None, iterate=X, residuals=residuals,
    ).with_context(kind=kind)


def _check_tuple(Ws: Sequence[np.ndarray], As: Sequence[SparseAdjacency],
                 Bs: Sequence[np.ndarray]) -> Tuple[int, int]:
    if not Ws or not (len(Ws) == len(As) == len(Bs)):
        raise DimensionError("need equally many (nonzero) W, A and B terms")
    m, n = Bs[0].shape
    for W, A, B in zip(Ws, As, Bs):
        if W.shape != (m, m):
            raise DimensionError(f"W must be {m}×{m}, got {W.shape}")
        if A.n != n:
            raise DimensionError(f"adjacency must be {n}×{n}, got size {A.n}")
        if B.shape != (m, n):
            raise DimensionError(f"B must be {m}×{n}, got {B.shape}")
    return m, n


def aggregate(Ws: Sequence[np.ndarray], As: Sequence[SparseAdjacency],
              X: np.ndarray) -> np.ndarray:
    """Σᵢ Wᵢ X Aᵢ."""
    total = Ws[0] @ rmul_sparse(X, As[0])
    for W, A in zip(Ws[1:], As[1:]):
        total = total + W @ rmul_sparse(X, A)
    return total


def solve_forward_hetero(Ws: Sequence[np.ndarray], As: Sequence[SparseAdjacency],
                         Bs: Sequence[np.ndarray], phi: AnyActivation,
                         tol: float = FORWARD_TOL, max_iter: int = FORWARD_MAX_ITER,
                         X0: Optional[np.ndarray] = None) -> EquilibriumSolution:
    """Solve ``X = φ(Σᵢ (Wᵢ X Aᵢ + Bᵢ))`` by Picard iteration.

    Raises:
        DimensionError: inconsistent shapes
        NonConvergenceError: no fixed point within max_iter
    """
    m, n = _check_tuple(Ws, As, Bs)
    offset = Bs[0]
    for B in Bs[1:]:
        offset = offset + B
    if X0 is None:
        X0 = np.zeros((m, n))
    elif X0.shape != (m, n):
        raise DimensionError(f"warm start must be {m}×{n}, got {X0.shape}")

    def step(X: np.ndarray) -> np.ndarray:
        return phi.apply(aggregate(Ws, As, X) + offset)

    X, residuals = fixed_point_iterate(step, X0, tol, max_iter, kind="forward")
    Z = aggregate(Ws, As, X) + offset
    return EquilibriumSolution(X=X, D=phi.derivative(Z), Z=Z, residuals=residuals,
                               iterations=len(residuals))


def solve_forward(W: np.ndarray, A: SparseAdjacency, B: np.ndarray, phi: AnyActivation,
                  tol: float = FORWARD_TOL, max_iter: int = FORWARD_MAX_ITER,
                  X0: Optional[np.ndarray] = None) -> EquilibriumSolution:
    """Solve ``X = φ(W X A + B)``; the single-relation case of the hetero solver."""
    return solve_forward_hetero([W], [A], [B], phi, tol=tol, max_iter=max_iter, X0=X0)
