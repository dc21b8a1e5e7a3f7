"""The implicit graph model: equilibrium layers, heads, losses, metrics and checkpoints.

Layer l solves ``X_l = φ_l(Σᵢ W_{l,i} X_l Aᵢ + b_{Ω_l}(U_l))`` where ``U_1`` is
the feature matrix (or a learnable one) and ``U_l`` is ``X_{l-1}``, optionally
passed through an affine+activation map. The head reads ``X_L`` node-wise or
after sum/mean pooling.
"""

import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import IO, Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from equilibrium import (FORWARD_MAX_ITER, FORWARD_TOL, Activation, AnyActivation, BForm,
                         BlockActivation, EquilibriumSolution, parse_activation,
                         solve_forward_hetero)
from implicit_grad import GradientBundle, param_grads_hetero, solve_backward_hetero
from linalg import DimensionError, NonConvergenceError, SparseAdjacency, check_finite, inf_norm
from wellposed import ConstraintSpec, RescaleError, project_hetero, rescale

CHECKPOINT_MAGIC = b"IGNN"
CHECKPOINT_VERSION = 1
READOUTS = ("node", "sum", "mean")
HEADS = ("linear", "mlp")
TASKS = ("node-multiclass", "node-multilabel", "graph")


class CheckpointError(ValueError):
    """A checkpoint stream is corrupt, truncated or from another format version."""


@dataclass
class IgnnLayer:
    """One equilibrium layer; ``Ws`` and ``omegas`` hold one entry per relation."""

    Ws: List[np.ndarray]
    omegas: List[Dict[str, np.ndarray]]
    b_form: BForm
    activation: AnyActivation
    kappas: List[float]

    def __post_init__(self):
        if not self.Ws or len(self.Ws) != len(self.omegas) or len(self.Ws) != len(self.kappas):
            raise DimensionError("a layer needs one W, one Ω set and one kappa per relation")
        m = self.Ws[0].shape[0]
        p = None
        for W, relation_omegas in zip(self.Ws, self.omegas):
            if W.shape != (m, m):
                raise DimensionError(f"layer weights must be {m}×{m}, got {W.shape}")
            for name in self.b_form.names:
                omega = relation_omegas[name]
                p = omega.shape[1] if p is None else p
                if omega.shape != (m, p):
                    raise DimensionError(f"{name} must be {m}×{p}, got {omega.shape}")

    @property
    def W(self) -> np.ndarray:
        return self.Ws[0]

    @property
    def m(self) -> int:
        return self.Ws[0].shape[0]

    @property
    def p(self) -> int:
        return self.omegas[0][self.b_form.names[0]].shape[1]

    @property
    def relations(self) -> int:
        return len(self.Ws)

    def constraint_spec(self, adjacencies: Sequence[SparseAdjacency],
                        relation_kappas: Optional[Sequence[float]] = None) -> ConstraintSpec:
        if len(adjacencies) != self.relations:
            raise DimensionError(f"layer has {self.relations} relations, graph has {len(adjacencies)}")
        if self.relations == 1:
            return ConstraintSpec.for_graph(adjacencies[0], self.kappas[0])
        return ConstraintSpec.for_hetero(adjacencies, relation_kappas or self.kappas)

    def offsets(self, U: np.ndarray, adjacencies: Sequence[SparseAdjacency]) -> List[np.ndarray]:
        return [self.b_form.evaluate(relation_omegas, U, A)
                for relation_omegas, A in zip(self.omegas, adjacencies)]


@dataclass
class InterLayerAffine:
    """``U_{l+1} = φ(M X_l + c 1ᵀ)`` between two equilibrium layers."""

    M: np.ndarray
    c: np.ndarray
    activation: AnyActivation

    def apply(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        Z = self.M @ X + self.c
        return Z, self.activation.apply(Z)


@dataclass
class OutputHead:
    """Linear ``Ŷ = Θ H`` or one hidden layer ``Ŷ = Θ₂ φ(Θ H + c₁) + c₂``."""

    Theta: np.ndarray
    kind: str = "linear"
    Theta2: Optional[np.ndarray] = None
    c1: Optional[np.ndarray] = None
    c2: Optional[np.ndarray] = None
    activation: AnyActivation = field(default_factory=Activation)

    def __post_init__(self):
        if self.kind not in HEADS:
            raise ValueError(f"unknown head {self.kind!r}; expected one of {HEADS}")
        if self.kind == "mlp" and (self.Theta2 is None or self.c1 is None or self.c2 is None):
            raise ValueError("an mlp head needs Theta2, c1 and c2")

    @property
    def inputs(self) -> int:
        return self.Theta.shape[1]

    @property
    def outputs(self) -> int:
        return self.Theta.shape[0] if self.kind == "linear" else self.Theta2.shape[0]

    def apply(self, H: np.ndarray) -> Tuple[Optional[np.ndarray], np.ndarray]:
        if self.kind == "linear":
            return None, self.Theta @ H
        Z = self.Theta @ H + self.c1
        return Z, self.Theta2 @ self.activation.apply(Z) + self.c2


@dataclass
class ForwardCache:
    solutions: List[EquilibriumSolution]
    inputs: List[np.ndarray]
    affine_pre: List[Optional[np.ndarray]]
    dropout_mask: Optional[np.ndarray]
    pooled: np.ndarray
    head_pre: Optional[np.ndarray]
    predictions: np.ndarray
    adjacencies: List[SparseAdjacency]
    learnable_input: bool = False

    @property
    def states(self) -> List[np.ndarray]:
        return [solution.X for solution in self.solutions]

    @property
    def forward_iterations(self) -> int:
        return sum(solution.iterations for solution in self.solutions)


@dataclass
class ModelGradients:
    grads: Dict[str, np.ndarray]
    bundles: List[GradientBundle]
    iterations: int = 0


class IgnnModel:
    """Ordered equilibrium layers, optional inter-layer maps, a head and a readout."""

    def __init__(self, layers: List[IgnnLayer], head: OutputHead,
                 affines: Optional[List[Optional[InterLayerAffine]]] = None,
                 readout: str = "node", U: Optional[np.ndarray] = None,
                 dropout: float = 0.0):
        if not layers:
            raise ValueError("a model needs at least one layer")
        if readout not in READOUTS:
            raise ValueError(f"unknown readout {readout!r}; expected one of {READOUTS}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
        self.layers = layers
        self.head = head
        self.affines = affines if affines is not None else [None] * (len(layers) - 1)
        self.readout = readout
        self.U = U
        self.dropout = dropout
        self._check_chain()

    def _check_chain(self) -> None:
        if len(self.affines) != len(self.layers) - 1:
            raise DimensionError(f"{len(self.affines)} inter-layer maps for {len(self.layers)} layers")
        if self.U is not None and self.U.shape[0] != self.layers[0].p:
            raise DimensionError(f"learnable U has {self.U.shape[0]} rows, layer 1 expects "
                                 f"{self.layers[0].p}")
        for index, (prev, nxt) in enumerate(zip(self.layers[:-1], self.layers[1:]), start=1):
            width = prev.m
            affine = self.affines[index - 1]
            if affine is not None:
                if affine.M.shape[1] != width or affine.c.shape != (affine.M.shape[0], 1):
                    raise DimensionError(f"inter-layer map {index} does not fit width {width}")
                width = affine.M.shape[0]
            if nxt.p != width:
                raise DimensionError(f"layer {index + 1} expects {nxt.p} input rows, gets {width}")
        if self.head.inputs != self.layers[-1].m:
            raise DimensionError(f"head consumes {self.head.inputs} rows, last layer has "
                                 f"{self.layers[-1].m}")

    @classmethod
    def build(cls, feature_dim: Optional[int], num_classes: int, hidden: Sequence[int],
              num_nodes: Optional[int] = None, relations: int = 1, b_form: str = "OUA",
              activation: str = "relu", kappas: Sequence[float] = (0.95,),
              inter_layer: bool = False, head: str = "linear", head_hidden: int = 32,
              readout: str = "node", dropout: float = 0.0, seed: int = 0) -> "IgnnModel":
        """Initialize every matrix uniformly in ``[-1/√m, 1/√m]`` (m the output width).

        ``feature_dim=None`` means the dataset has no features: a learnable U of
        ``hidden[0]`` rows is created, which needs ``num_nodes``.
        """
        if not hidden:
            raise ValueError("hidden must name at least one layer width")
        if len(kappas) == 1:
            kappas = list(kappas) * len(hidden)
        if len(kappas) != len(hidden):
            raise ValueError(f"{len(kappas)} kappas for {len(hidden)} layers")
        rng = np.random.default_rng(seed)
        form = BForm(b_form)
        phi = parse_activation(activation)

        U = None
        if feature_dim is None:
            if num_nodes is None:
                raise ValueError("learnable features need the node count")
            feature_dim = hidden[0]
            U = _uniform(rng, (feature_dim, num_nodes), feature_dim)

        layers: List[IgnnLayer] = []
        affines: List[Optional[InterLayerAffine]] = []
        p = feature_dim
        for index, (m, kappa) in enumerate(zip(hidden, kappas)):
            if index > 0:
                if inter_layer:
                    affines.append(InterLayerAffine(_uniform(rng, (p, p), p),
                                                    _uniform(rng, (p, 1), p), phi))
                else:
                    affines.append(None)
            Ws = [_uniform(rng, (m, m), m) for _ in range(relations)]
            omegas = [{name: _uniform(rng, shape, m)
                       for name, shape in form.init_shapes(m, p).items()}
                      for _ in range(relations)]
            layer_kappas = [kappa] if relations == 1 else [kappa / relations] * relations
            layers.append(IgnnLayer(Ws, omegas, form, phi, layer_kappas))
            p = m

        if head == "mlp":
            output = OutputHead(_uniform(rng, (head_hidden, p), p), kind="mlp",
                                Theta2=_uniform(rng, (num_classes, head_hidden), head_hidden),
                                c1=np.zeros((head_hidden, 1)), c2=np.zeros((num_classes, 1)),
                                activation=phi)
        else:
            output = OutputHead(_uniform(rng, (num_classes, p), p))
        return cls(layers, output, affines=affines, readout=readout, U=U, dropout=dropout)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> Dict[str, np.ndarray]:
        """Named references to every trainable matrix, in a fixed order."""
        return dict(_named_parameters(self))

    def constraint_specs(self, adjacencies: Sequence[SparseAdjacency],
                         relation_kappas: Optional[Sequence[float]] = None) -> List[ConstraintSpec]:
        return [layer.constraint_spec(adjacencies, relation_kappas) for layer in self.layers]

    def project(self, specs: Sequence[ConstraintSpec]) -> None:
        """Project every W in place onto its constraint set."""
        for layer, spec in zip(self.layers, specs):
            for W, projected in zip(layer.Ws, project_hetero(layer.Ws, spec)):
                W[...] = projected

    def constraint_norms(self, specs: Sequence[ConstraintSpec]) -> List[List[Tuple[float, float]]]:
        """(‖Wᵢ‖∞, radius) per relation per layer."""
        return [[(inf_norm(W), radius) for W, radius in zip(layer.Ws, spec.radii)]
                for layer, spec in zip(self.layers, specs)]

    def copy(self) -> "IgnnModel":
        return load_checkpoint(save_checkpoint(self))


def _uniform(rng: np.random.Generator, shape: Tuple[int, int], fan: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan, 1))
    return rng.uniform(-bound, bound, size=shape)


def _named_parameters(model: IgnnModel) -> Iterator[Tuple[str, np.ndarray]]:
    for l, layer in enumerate(model.layers):
        for i, (W, relation_omegas) in enumerate(zip(layer.Ws, layer.omegas)):
            yield f"layers.{l}.W.{i}", W
            for name in layer.b_form.names:
                yield f"layers.{l}.{name}.{i}", relation_omegas[name]
    for l, affine in enumerate(model.affines):
        if affine is not None:
            yield f"affines.{l}.M", affine.M
            yield f"affines.{l}.c", affine.c
    yield "head.Theta", model.head.Theta
    if model.head.kind == "mlp":
        yield "head.c1", model.head.c1
        yield "head.Theta2", model.head.Theta2
        yield "head.c2", model.head.c2
    if model.U is not None:
        yield "U", model.U


def _pool(X: np.ndarray, readout: str) -> np.ndarray:
    if readout == "sum":
        return X.sum(axis=1, keepdims=True)
    if readout == "mean":
        return X.mean(axis=1, keepdims=True)
    return X


def _unpool(grad_H: np.ndarray, readout: str, n: int) -> np.ndarray:
    if readout == "sum":
        return np.repeat(grad_H, n, axis=1)
    if readout == "mean":
        return np.repeat(grad_H / n, n, axis=1)
    return grad_H


def forward(model: IgnnModel, adjacencies: Sequence[SparseAdjacency],
            U: Optional[np.ndarray] = None, mode: str = "eval",
            rng: Optional[np.random.Generator] = None,
            warm: Optional[Sequence[np.ndarray]] = None,
            tol: float = FORWARD_TOL, max_iter: int = FORWARD_MAX_ITER) -> ForwardCache:
    """Run every layer to equilibrium, then readout and head.

    Dropout (train mode only, inverted scaling) acts on ``X_L`` before the
    readout. ``warm`` holds per-layer initial iterates.

    Raises:
        NonConvergenceError: with the failing (1-based) layer attached
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    adjacencies = list(adjacencies)
    learnable = U is None
    if learnable:
        if model.U is None:
            raise ValueError("model has no learnable features and none were given")
        U = model.U
    n = adjacencies[0].n
    if U.shape[1] != n:
        raise DimensionError(f"features cover {U.shape[1]} nodes, graph has {n}")

    solutions: List[EquilibriumSolution] = []
    inputs: List[np.ndarray] = []
    affine_pre: List[Optional[np.ndarray]] = []
    current = U
    for l, layer in enumerate(model.layers):
        if l > 0:
            affine = model.affines[l - 1]
            if affine is not None:
                Z, current = affine.apply(current)
                affine_pre.append(Z)
            else:
                affine_pre.append(None)
        if layer.relations != len(adjacencies):
            raise DimensionError(f"layer {l + 1} has {layer.relations} relations, graph has "
                                 f"{len(adjacencies)}")
        X0 = warm[l] if warm is not None and l < len(warm) else None
        try:
            solution = solve_forward_hetero(layer.Ws, adjacencies,
                                            layer.offsets(current, adjacencies),
                                            layer.activation, tol=tol, max_iter=max_iter, X0=X0)
        except NonConvergenceError as exc:
            raise exc.with_context(layer=l + 1)
        inputs.append(current)
        solutions.append(solution)
        current = solution.X

    mask = None
    X_L = current
    if mode == "train" and model.dropout > 0.0:
        rng = rng if rng is not None else np.random.default_rng()
        keep = 1.0 - model.dropout
        mask = (rng.random(X_L.shape) < keep) / keep
        X_L = X_L * mask
    pooled = _pool(X_L, model.readout)
    head_pre, predictions = model.head.apply(pooled)
    return ForwardCache(solutions=solutions, inputs=inputs, affine_pre=affine_pre,
                        dropout_mask=mask, pooled=pooled, head_pre=head_pre,
                        predictions=check_finite(predictions, "predictions"),
                        adjacencies=adjacencies, learnable_input=learnable)


def eval_predictions(model: IgnnModel, cache: ForwardCache) -> np.ndarray:
    """Eval-mode predictions from a train-mode cache (the equilibria do not see dropout)."""
    _, predictions = model.head.apply(_pool(cache.solutions[-1].X, model.readout))
    return predictions


def predict(model: IgnnModel, adjacencies: Sequence[SparseAdjacency],
            U: Optional[np.ndarray] = None, tol: float = FORWARD_TOL,
            max_iter: int = FORWARD_MAX_ITER) -> np.ndarray:
    return forward(model, adjacencies, U, mode="eval", tol=tol, max_iter=max_iter).predictions


def backward(model: IgnnModel, cache: ForwardCache, grad_Y: np.ndarray,
             tol: float = FORWARD_TOL, max_iter: int = FORWARD_MAX_ITER) -> ModelGradients:
    """Exact gradients of every parameter given ``∂L/∂Ŷ``.

    Layer l's input gradient becomes layer (l-1)'s state gradient, through the
    inter-layer map when there is one.

    Raises:
        NonConvergenceError: with the failing (1-based) layer attached
    """
    if grad_Y.shape != cache.predictions.shape:
        raise DimensionError(f"grad_Y {grad_Y.shape} does not match predictions "
                             f"{cache.predictions.shape}")
    if len(cache.solutions) != model.num_layers:
        raise ValueError("cache does not come from this model")
    grads: Dict[str, np.ndarray] = {}
    head = model.head
    if head.kind == "linear":
        grads["head.Theta"] = grad_Y @ cache.pooled.T
        grad_H = head.Theta.T @ grad_Y
    else:
        hidden = head.activation.apply(cache.head_pre)
        grads["head.Theta2"] = grad_Y @ hidden.T
        grads["head.c2"] = grad_Y.sum(axis=1, keepdims=True)
        grad_pre = (head.Theta2.T @ grad_Y) * head.activation.derivative(cache.head_pre)
        grads["head.Theta"] = grad_pre @ cache.pooled.T
        grads["head.c1"] = grad_pre.sum(axis=1, keepdims=True)
        grad_H = head.Theta.T @ grad_pre

    grad_X = _unpool(grad_H, model.readout, cache.solutions[-1].X.shape[1])
    if cache.dropout_mask is not None:
        grad_X = grad_X * cache.dropout_mask

    bundles: List[GradientBundle] = [None] * model.num_layers  # type: ignore[list-item]
    iterations = 0
    for l in reversed(range(model.num_layers)):
        layer = model.layers[l]
        solution = cache.solutions[l]
        try:
            adjoint = solve_backward_hetero(layer.Ws, cache.adjacencies, solution.D, grad_X,
                                            tol=tol, max_iter=max_iter)
        except NonConvergenceError as exc:
            raise exc.with_context(layer=l + 1)
        iterations += adjoint.iterations
        bundle = param_grads_hetero(adjoint.grad_Z, solution.X, cache.adjacencies,
                                    cache.inputs[l], layer.b_form, layer.omegas,
                                    iterations=adjoint.iterations)
        bundles[l] = bundle
        for i, (grad_W, grad_omegas) in enumerate(zip(bundle.grad_W, bundle.grad_Omega)):
            grads[f"layers.{l}.W.{i}"] = grad_W
            for name, grad in grad_omegas.items():
                grads[f"layers.{l}.{name}.{i}"] = grad
        grad_X = bundle.grad_U
        if l > 0:
            affine = model.affines[l - 1]
            if affine is not None:
                Z = cache.affine_pre[l - 1]
                grad_Z = grad_X * affine.activation.derivative(Z)
                grads[f"affines.{l - 1}.M"] = grad_Z @ cache.solutions[l - 1].X.T
                grads[f"affines.{l - 1}.c"] = grad_Z.sum(axis=1, keepdims=True)
                grad_X = affine.M.T @ grad_Z
    if cache.learnable_input:
        grads["U"] = grad_X
    ordered = {name: grads[name] for name in model.parameters() if name in grads}
    return ModelGradients(grads=ordered, bundles=bundles, iterations=iterations)


def _check_mask(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("mask selects no nodes")
    if mask.min() < 0 or mask.max() >= n:
        raise ValueError(f"mask ids must lie in [0, {n})")
    return mask


def softmax_xent_masked(Y_hat: np.ndarray, Y: np.ndarray,
                        mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the masked columns; zero gradient elsewhere."""
    if Y_hat.shape != Y.shape:
        raise DimensionError(f"predictions {Y_hat.shape} and labels {Y.shape} must agree")
    mask = _check_mask(mask, Y.shape[1])
    logits = Y_hat[:, mask]
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_probs = shifted - log_norm
    targets = Y[:, mask]
    loss = float(-(targets * log_probs).sum() / mask.size)
    grad = np.zeros_like(Y_hat, dtype=np.float64)
    grad[:, mask] = (np.exp(log_probs) - targets) / mask.size
    return loss, grad


def bce_multilabel(Y_hat: np.ndarray, Y: np.ndarray,
                   mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Elementwise sigmoid cross-entropy, averaged over the c×|mask| masked entries."""
    if Y_hat.shape != Y.shape:
        raise DimensionError(f"predictions {Y_hat.shape} and labels {Y.shape} must agree")
    mask = _check_mask(mask, Y.shape[1])
    logits = Y_hat[:, mask]
    targets = Y[:, mask]
    count = logits.size
    losses = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = np.zeros_like(Y_hat, dtype=np.float64)
    grad[:, mask] = (expit(logits) - targets) / count
    return float(losses.sum() / count), grad


def loss_for_task(task: str):
    return bce_multilabel if task == "node-multilabel" else softmax_xent_masked


def binarize(Y_hat: np.ndarray, task: str) -> np.ndarray:
    """0/1 predictions: argmax per column, or logit > 0 (probability > 0.5) for multilabel."""
    if task == "node-multilabel":
        return (Y_hat > 0).astype(np.float64)
    pred = np.zeros_like(Y_hat, dtype=np.float64)
    if Y_hat.size:
        pred[np.argmax(Y_hat, axis=0), np.arange(Y_hat.shape[1])] = 1.0
    return pred


def _counts(pred: np.ndarray, Y: np.ndarray, mask: np.ndarray):
    mask = _check_mask(mask, Y.shape[1])
    P = pred[:, mask] > 0.5
    T = Y[:, mask] > 0.5
    tp = (P & T).sum(axis=1)
    fp = (P & ~T).sum(axis=1)
    fn = (~P & T).sum(axis=1)
    return tp, fp, fn


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def micro_f1(pred: np.ndarray, Y: np.ndarray, mask: np.ndarray) -> float:
    tp, fp, fn = _counts(pred, Y, mask)
    return _f1(tp.sum(), fp.sum(), fn.sum())


def macro_f1(pred: np.ndarray, Y: np.ndarray, mask: np.ndarray) -> float:
    """Unweighted mean of per-class F1; classes without support count as 0."""
    tp, fp, fn = _counts(pred, Y, mask)
    scores = [_f1(t, f, n) if t + n > 0 else 0.0 for t, f, n in zip(tp, fp, fn)]
    return float(np.mean(scores)) if scores else 0.0


def accuracy(pred: np.ndarray, Y: np.ndarray, mask: np.ndarray) -> float:
    mask = _check_mask(mask, Y.shape[1])
    hits = np.argmax(pred[:, mask], axis=0) == np.argmax(Y[:, mask], axis=0)
    return float(hits.mean())


def gcn_as_ignn(W1: np.ndarray, W2: np.ndarray, activation: str = "relu",
                kappa: float = 0.95) -> IgnnModel:
    """Express the two-layer GCN ``Ŷ = W₂ φ(W₁ U A) A`` as one equilibrium layer.

    The state stacks ``(X₂, X₁)`` (c + h rows) with ``W̃ = [[0, W₂], [0, 0]]``,
    ``Ω = [0; W₁]`` under the ΩUA form and identity activation on the top
    block. W̃ is nilpotent, so the layer is well-posed on any graph.
    """
    W1 = np.asarray(W1, dtype=np.float64)
    W2 = np.asarray(W2, dtype=np.float64)
    h, p = W1.shape
    c = W2.shape[0]
    if W2.shape[1] != h:
        raise DimensionError(f"W2 {W2.shape} does not consume W1 {W1.shape}")
    m = c + h
    W = np.zeros((m, m))
    W[:c, c:] = W2
    omega = np.zeros((m, p))
    omega[c:] = W1
    phi = BlockActivation(((c, Activation("identity")), (h, Activation.parse(activation))))
    layer = IgnnLayer([W], [{"Omega": omega}], BForm("OUA"), phi, [kappa])
    Theta = np.hstack([np.eye(c), np.zeros((c, h))])
    return IgnnModel([layer], OutputHead(Theta))


def flatten_layers(model: IgnnModel) -> IgnnModel:
    """Rewrite a stacked model as one layer over the state ``[X_L; …; X_1]``.

    W̃ is block upper bidiagonal: ``W_L … W_1`` on the diagonal and
    ``Ω_L … Ω_2`` on the superdiagonal; only X_1 receives ``b_{Ω_1}(U)``.
    Needs single-relation layers, no inter-layer maps and the ΩUA form above
    layer 1.
    """
    if any(layer.relations != 1 for layer in model.layers):
        raise ValueError("flattening needs single-relation layers")
    if any(affine is not None for affine in model.affines):
        raise ValueError("flattening needs layers without inter-layer maps")
    if any(layer.b_form.tag != "OUA" for layer in model.layers[1:]):
        raise ValueError("layers above the first must use the OUA form to flatten")
    stack = list(reversed(model.layers))
    sizes = [layer.m for layer in stack]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    total = int(starts[-1])
    W = np.zeros((total, total))
    for k, layer in enumerate(stack):
        rows = slice(starts[k], starts[k + 1])
        W[rows, rows] = layer.W
        if k + 1 < len(stack):
            W[rows, starts[k + 1]:starts[k + 2]] = layer.omegas[0]["Omega"]
    first = model.layers[0]
    omegas = {}
    for name in first.b_form.names:
        omega = np.zeros((total, first.p))
        omega[starts[-2]:] = first.omegas[0][name]
        omegas[name] = omega
    phi = BlockActivation(tuple(block for layer in stack
                                for block in _blocks(layer.m, layer.activation)))
    layer = IgnnLayer([W], [omegas], first.b_form, phi,
                      [max(layer.kappas[0] for layer in model.layers)])
    head = _pad_head(model.head, total)
    return IgnnModel([layer], head, readout=model.readout,
                     U=None if model.U is None else model.U.copy(), dropout=model.dropout)


def _blocks(m: int, activation: AnyActivation) -> Tuple[Tuple[int, Activation], ...]:
    if isinstance(activation, BlockActivation):
        return activation.blocks
    return ((m, activation),)


def _pad_head(head: OutputHead, total: int) -> OutputHead:
    Theta = np.zeros((head.Theta.shape[0], total))
    Theta[:, :head.inputs] = head.Theta
    if head.kind == "linear":
        return OutputHead(Theta)
    return OutputHead(Theta, kind="mlp", Theta2=head.Theta2.copy(), c1=head.c1.copy(),
                      c2=head.c2.copy(), activation=head.activation)


def rescale_model(model: IgnnModel) -> Tuple[IgnnModel, List[np.ndarray]]:
    """Return an equivalent model whose every W has ``‖W‖∞ = λ_pf(|W|)``.

    Each layer's state changes to ``S X`` with ``S = diag(v)⁻¹``; the matrix
    consuming that state (next Ω, next inter-layer M, or the head Θ) absorbs
    ``S⁻¹``. Predictions are unchanged for positively homogeneous activations.

    Raises:
        RescaleError: multi-relation layer, non-homogeneous activation or a
            degenerate PF eigenvector
    """
    rescaled = model.copy()
    vectors: List[np.ndarray] = []
    for l, layer in enumerate(rescaled.layers):
        if layer.relations != 1:
            raise RescaleError(f"layer {l + 1} has several relations; rescaling needs one")
        if not layer.activation.positively_homogeneous:
            raise RescaleError(f"layer {l + 1} activation {layer.activation.tag} is not "
                               f"positively homogeneous")
        consumers = _consumers(rescaled, l)
        names = layer.b_form.names
        stacked = np.vstack(consumers)
        W_new, stacked_new, offsets, v = rescale(layer.W, stacked,
                                                 [layer.omegas[0][name] for name in names])
        layer.W[...] = W_new
        for name, omega in zip(names, offsets):
            layer.omegas[0][name][...] = omega
        start = 0
        for consumer in consumers:
            consumer[...] = stacked_new[start:start + consumer.shape[0]]
            start += consumer.shape[0]
        vectors.append(v)
    return rescaled, vectors


def _consumers(model: IgnnModel, l: int) -> List[np.ndarray]:
    """Matrices multiplying layer l's state from the left."""
    if l + 1 == model.num_layers:
        return [model.head.Theta]
    affine = model.affines[l]
    if affine is not None:
        return [affine.M]
    nxt = model.layers[l + 1]
    return [relation_omegas[name] for relation_omegas in nxt.omegas for name in nxt.b_form.names]


def _hyperparameters(model: IgnnModel) -> Dict[str, Any]:
    return {
        "layers": [{"b_form": layer.b_form.tag, "activation": layer.activation.tag,
                    "kappas": [float(k) for k in layer.kappas], "relations": layer.relations}
                   for layer in model.layers],
        "affines": [None if affine is None else affine.activation.tag for affine in model.affines],
        "head": {"kind": model.head.kind, "activation": model.head.activation.tag},
        "readout": model.readout,
        "dropout": float(model.dropout),
        "learnable_features": model.U is not None,
    }


def save_checkpoint(model: IgnnModel, sink: Union[str, IO[bytes], None] = None) -> bytes:
    """Serialize the model; also write it to ``sink`` (a path or binary stream) when given.

    Layout: ``IGNN`` | version u32 | hyperparameter length u32 | JSON | tensor
    count u32 | per tensor: name length u32, name, rows u32, cols u32,
    row-major little-endian float64 data.
    """
    buffer = io.BytesIO()
    header = json.dumps(_hyperparameters(model), sort_keys=True).encode('utf-8')
    params = model.parameters()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack('<II', CHECKPOINT_VERSION, len(header)))
    buffer.write(header)
    buffer.write(struct.pack('<I', len(params)))
    for name, M in params.items():
        encoded = name.encode('utf-8')
        rows, cols = M.shape
        buffer.write(struct.pack('<I', len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack('<II', rows, cols))
        buffer.write(np.ascontiguousarray(M, dtype='<f8').tobytes())
    data = buffer.getvalue()
    if isinstance(sink, (str, os.PathLike)):
        directory = os.path.dirname(os.fspath(sink))
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(sink, 'wb') as f:
            f.write(data)
    elif sink is not None:
        sink.write(data)
    return data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack('<I', self.take(4, what))[0]


def load_checkpoint(source: Union[str, bytes, IO[bytes]]) -> IgnnModel:
    """Rebuild a model written by :func:`save_checkpoint`.

    Raises:
        CheckpointError: bad magic, unsupported version, truncation or missing tensors
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, 'rb') as f:
            data = f.read()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    reader = _Reader(data)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        hp = json.loads(reader.take(reader.u32("header length"), "header").decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt hyperparameter block: {exc}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.take(reader.u32("name length"), "tensor name").decode('utf-8')
        rows, cols = reader.u32("rows"), reader.u32("cols")
        payload = reader.take(8 * rows * cols, f"tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype='<f8').astype(np.float64).reshape(rows, cols)
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after the last tensor")
    try:
        return _from_tensors(hp, tensors)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor or field {exc}")


def _from_tensors(hp: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> IgnnModel:
    layers = []
    for l, spec in enumerate(hp["layers"]):
        form = BForm(spec["b_form"])
        Ws, omegas = [], []
        for i in range(spec["relations"]):
            Ws.append(tensors[f"layers.{l}.W.{i}"])
            omegas.append({name: tensors[f"layers.{l}.{name}.{i}"] for name in form.names})
        layers.append(IgnnLayer(Ws, omegas, form, parse_activation(spec["activation"]),
                                list(spec["kappas"])))
    affines: List[Optional[InterLayerAffine]] = []
    for l, tag in enumerate(hp["affines"]):
        affines.append(None if tag is None else InterLayerAffine(
            tensors[f"affines.{l}.M"], tensors[f"affines.{l}.c"], parse_activation(tag)))
    head_hp = hp["head"]
    if head_hp["kind"] == "mlp":
        head = OutputHead(tensors["head.Theta"], kind="mlp", Theta2=tensors["head.Theta2"],
                          c1=tensors["head.c1"], c2=tensors["head.c2"],
                          activation=parse_activation(head_hp["activation"]))
    else:
        head = OutputHead(tensors["head.Theta"], activation=parse_activation(head_hp["activation"]))
    U = tensors["U"] if hp["learnable_features"] else None
    return IgnnModel(layers, head, affines=affines, readout=hp["readout"], U=U,
                     dropout=hp["dropout"])
