"""Projected-gradient training, optimizers and evaluation."""

import os
import sys
import time
from dataclasses import dataclass, field, fields
from typing import IO, Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import ConfigManager
from graph import GraphDataset, NodeDataset, load_graph_dataset, load_node_dataset
from linalg import NonConvergenceError, SparseAdjacency
from logger import IgnnLogger
from model import (TASKS, ForwardCache, IgnnModel, accuracy, backward, binarize,
                   eval_predictions, forward, load_checkpoint, loss_for_task, macro_f1,
                   micro_f1, save_checkpoint)
from performance_monitor import PerformanceMonitor
from wellposed import ConstraintSpec

FEASIBILITY_TOL = 1e-12
METRIC_COLUMNS = ["epoch", "loss", "train_f1", "val_f1", "fwd_iters", "bwd_iters", "seconds"]

Dataset = Union[NodeDataset, GraphDataset]


class ConstraintViolationError(RuntimeError):
    """A weight left its feasible set after the projection step."""


@dataclass
class TrainConfig:
    task: str = "node-multiclass"
    dataset_path: str = "data/chains"
    renormalize: bool = True
    relations: bool = False
    symmetrize: bool = False

    hidden: List[int] = field(default_factory=lambda: [16])
    activation: str = "relu"
    b_form: str = "OUA"
    kappas: List[float] = field(default_factory=lambda: [0.95])
    relation_kappas: List[float] = field(default_factory=list)
    inter_layer: bool = False
    head: str = "linear"
    head_hidden: int = 32
    readout: str = "sum"
    dropout: float = 0.5

    optimizer: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 2000
    weight_decay: float = 5e-4
    seed: int = 0
    warm_start: bool = True

    tol: float = 1e-6
    max_iter: int = 300
    backward_tol: Optional[float] = None
    backward_max_iter: Optional[int] = None
    pf_tol: float = 1e-8
    pf_max_iter: int = 10000

    checkpoint: Optional[str] = "out/model.ignn"
    metrics: Optional[str] = None
    metrics_every: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.metrics_every < 1:
            raise ValueError("metrics_every must be at least 1")
        for kappa in list(self.kappas) + list(self.relation_kappas):
            if not 0.0 <= kappa < 1.0:
                raise ValueError(f"kappa must lie in [0, 1), got {kappa}")
        if len(self.kappas) not in (1, len(self.hidden)):
            raise ValueError(f"{len(self.kappas)} kappas for {len(self.hidden)} layers")

    @property
    def solve_backward_tol(self) -> float:
        return self.tol if self.backward_tol is None else self.backward_tol

    @property
    def solve_backward_max_iter(self) -> int:
        return self.max_iter if self.backward_max_iter is None else self.backward_max_iter

    @classmethod
    def from_manager(cls, config: ConfigManager) -> "TrainConfig":
        """Build a validated TrainConfig from the sections of a ConfigManager."""
        dataset = config.get_dataset_config()
        model = config.get_model_config()
        training = config.get_training_config()
        solver = config.get_solver_config()
        output = config.get_output_config()
        values: Dict[str, Any] = {
            "task": dataset["task"], "dataset_path": dataset["path"],
            "renormalize": dataset["renormalize"], "relations": dataset["relations"],
            "symmetrize": dataset["symmetrize"],
            "hidden": [int(h) for h in _as_list(model["hidden"])],
            "kappas": [float(k) for k in _as_list(model["kappa"])],
            "relation_kappas": [float(k) for k in _as_list(model["relation_kappas"])],
        }
        for key in ("activation", "b_form", "inter_layer", "head", "head_hidden", "readout",
                    "dropout"):
            values[key] = model[key]
        values.update(training)
        values.update(solver)
        for key in ("checkpoint", "metrics", "metrics_every"):
            values[key] = output[key]
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in values.items() if key in known})


def _as_list(value: Any) -> List[Any]:
    if value is None:
        return []
    return list(value) if isinstance(value, (list, tuple)) else [value]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_f1: float
    val_f1: float
    fwd_iters: int
    bwd_iters: int
    seconds: float

    def tsv(self) -> str:
        return (f"{self.epoch}\t{self.loss:.6f}\t{self.train_f1:.4f}\t{self.val_f1:.4f}\t"
                f"{self.fwd_iters}\t{self.bwd_iters}\t{self.seconds:.4f}")


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_f1: float = -1.0

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)
        if record.val_f1 > self.best_val_f1:
            self.best_val_f1 = record.val_f1
            self.best_epoch = record.epoch

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([[getattr(r, c) for c in METRIC_COLUMNS] for r in self.records],
                            columns=METRIC_COLUMNS)

    def to_tsv(self, sink: Union[str, IO[str]]) -> None:
        """Write one tab-separated row per epoch (with a header)."""
        frame = self.to_frame()
        if isinstance(sink, str):
            directory = os.path.dirname(sink)
            if directory:
                os.makedirs(directory, exist_ok=True)
        frame.to_csv(sink, sep='\t', index=False, float_format='%.6f')


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             config: TrainConfig) -> None:
    """In-place ``p <- p - lr * g``."""
    for name, grad in grads.items():
        params[name] -= config.lr * grad


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """In-place Adam update with bias correction; ``state`` carries moments across calls."""
    state.t += 1
    correction1 = 1.0 - config.beta1 ** state.t
    correction2 = 1.0 - config.beta2 ** state.t
    for name, grad in grads.items():
        m = state.m.setdefault(name, np.zeros_like(grad))
        v = state.v.setdefault(name, np.zeros_like(grad))
        m *= config.beta1
        m += (1.0 - config.beta1) * grad
        v *= config.beta2
        v += (1.0 - config.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        params[name] -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)


def load_dataset(config: TrainConfig) -> Dataset:
    if config.task == "graph":
        return load_graph_dataset(config.dataset_path, relations=config.relations,
                                  symmetrize=config.symmetrize or not config.relations,
                                  renormalize_graph=config.renormalize)
    return load_node_dataset(config.dataset_path, task=config.task, relations=config.relations,
                             symmetrize=config.symmetrize, renormalize_graph=config.renormalize)


def _tightest(per_graph: Sequence[List[ConstraintSpec]]) -> List[ConstraintSpec]:
    """Per layer, the smallest radius over every graph of a dataset."""
    specs = []
    for layer_specs in zip(*per_graph):
        radii = [min(radius) for radius in zip(*(spec.radii for spec in layer_specs))]
        first = layer_specs[0]
        specs.append(ConstraintSpec(kappa=first.kappa, radius=radii[0],
                                    kappas=list(first.kappas), radii=radii))
    return specs


class IgnnTrainer:
    """Projected-gradient training: step, then project every W back onto its constraint set."""

    def __init__(self, config: TrainConfig, logger: IgnnLogger,
                 monitor: Optional[PerformanceMonitor] = None):
        self.config = config
        self.logger = logger
        self.monitor = monitor if monitor is not None else PerformanceMonitor(None, logger)
        self.loss_fn = loss_for_task(config.task)

    def build_model(self, dataset: Dataset) -> IgnnModel:
        config = self.config
        if isinstance(dataset, GraphDataset):
            first = dataset.samples[0]
            feature_dim: Optional[int] = first.features.shape[0]
            relations = len(first.graph.adjacencies)
            num_nodes = None
            readout = config.readout if config.readout != "node" else "sum"
        else:
            feature_dim = None if dataset.features is None else dataset.features.shape[0]
            relations = len(dataset.graph.adjacencies)
            num_nodes = dataset.n
            readout = "node"
        return IgnnModel.build(feature_dim, dataset.num_classes, config.hidden,
                               num_nodes=num_nodes, relations=relations, b_form=config.b_form,
                               activation=config.activation, kappas=config.kappas,
                               inter_layer=config.inter_layer, head=config.head,
                               head_hidden=config.head_hidden, readout=readout,
                               dropout=config.dropout, seed=config.seed)

    def constraint_specs(self, model: IgnnModel, dataset: Dataset) -> List[ConstraintSpec]:
        relation_kappas = self.config.relation_kappas or None
        if isinstance(dataset, GraphDataset):
            graphs = [sample.graph.adjacencies for sample in dataset.samples]
        else:
            graphs = [dataset.graph.adjacencies]
        for adjacencies in graphs:
            for A in adjacencies:
                A.compute_pf(self.config.pf_tol, self.config.pf_max_iter)
        return _tightest([model.constraint_specs(adjacencies, relation_kappas)
                          for adjacencies in graphs])

    def train(self, dataset: Dataset, out: Optional[IO[str]] = None,
              model: Optional[IgnnModel] = None) -> Tuple[IgnnModel, TrainHistory]:
        """Train with per-epoch projection and keep the best-validation snapshot.

        Raises:
            NonConvergenceError: a solve failed (epoch and layer attached)
            ConstraintViolationError: a projected weight is still infeasible
        """
        config = self.config
        out = out if out is not None else sys.stdout
        model = model if model is not None else self.build_model(dataset)
        specs = self.constraint_specs(model, dataset)
        for layer, spec in enumerate(specs, start=1):
            radii = ", ".join(f"{r:.6g}" for r in spec.radii)
            self.logger.info(f"Layer {layer}: constraint radii {radii}")
        model.project(specs)

        params = model.parameters()
        adam = AdamState()
        rng = np.random.default_rng(config.seed)
        history = TrainHistory()
        best: Optional[IgnnModel] = None
        warm: Dict[int, List[np.ndarray]] = {}

        out.write("\t".join(METRIC_COLUMNS) + "\n")
        self.logger.info(f"Training {len(model.layers)}-layer model for {config.epochs} epochs "
                         f"({config.optimizer}, lr={config.lr})")
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            try:
                if isinstance(dataset, GraphDataset):
                    step = self._graph_epoch(model, dataset, rng, warm)
                else:
                    step = self._node_epoch(model, dataset, rng, warm)
            except NonConvergenceError as e:
                e.with_context(epoch=epoch)
                self.logger.log_error(e, "training")
                raise
            loss, grads, train_f1, val_f1, fwd_iters, bwd_iters = step

            if val_f1 > history.best_val_f1:
                best = model.copy()

            if config.weight_decay:
                for name, grad in grads.items():
                    grad += config.weight_decay * params[name]
            if config.optimizer == "adam":
                adam_step(params, grads, adam, config)
            else:
                sgd_step(params, grads, config)
            model.project(specs)
            self._check_feasible(model, specs, epoch)

            record = EpochRecord(epoch, loss, train_f1, val_f1, fwd_iters, bwd_iters,
                                 time.perf_counter() - start)
            history.append(record)
            self.monitor.record_time('epoch', record.seconds)
            if epoch % config.metrics_every == 0 or epoch == config.epochs:
                out.write(record.tsv() + "\n")
                self.logger.log_epoch(epoch, loss, train_f1, val_f1, fwd_iters, bwd_iters,
                                      record.seconds)

        final = best if best is not None else model
        self.logger.info(f"Best validation micro-F1 {history.best_val_f1:.4f} at epoch "
                         f"{history.best_epoch}")
        if config.checkpoint:
            save_checkpoint(final, config.checkpoint)
            self.logger.info(f"Checkpoint written to {config.checkpoint}")
        if config.metrics:
            history.to_tsv(config.metrics)
        self.monitor.log_performance_summary()
        return final, history

    def _check_feasible(self, model: IgnnModel, specs: Sequence[ConstraintSpec],
                        epoch: int) -> None:
        for layer, norms in enumerate(model.constraint_norms(specs), start=1):
            for norm, radius in norms:
                self.logger.log_constraint(layer, norm, radius)
                if norm > radius + FEASIBILITY_TOL:
                    raise ConstraintViolationError(
                        f"epoch {epoch}, layer {layer}: inf_norm(W) = {norm:.12g} exceeds "
                        f"radius {radius:.12g}")

    def _forward(self, model: IgnnModel, adjacencies: Sequence[SparseAdjacency],
                 U: Optional[np.ndarray], mode: str, rng: np.random.Generator,
                 warm: Optional[List[np.ndarray]]) -> ForwardCache:
        config = self.config

        @self.monitor.time_operation('forward')
        def _solve() -> ForwardCache:
            return forward(model, adjacencies, U, mode=mode, rng=rng,
                           warm=warm if config.warm_start else None,
                           tol=config.tol, max_iter=config.max_iter)

        cache = _solve()
        for layer, solution in enumerate(cache.solutions, start=1):
            self.monitor.record_solve('forward', solution.iterations)
            self.logger.log_solve('forward', solution.iterations, solution.residual, layer)
        return cache

    def _backward(self, model: IgnnModel, cache: ForwardCache, grad_Y: np.ndarray):
        @self.monitor.time_operation('backward')
        def _solve():
            return backward(model, cache, grad_Y, tol=self.config.solve_backward_tol,
                            max_iter=self.config.solve_backward_max_iter)

        result = _solve()
        self.monitor.record_solve('backward', result.iterations)
        return result

    def _node_epoch(self, model: IgnnModel, dataset: NodeDataset, rng: np.random.Generator,
                    warm: Dict[int, List[np.ndarray]]):
        adjacencies = dataset.graph.adjacencies
        cache = self._forward(model, adjacencies, dataset.features, "train", rng, warm.get(0))
        warm[0] = cache.states
        loss, grad_Y = self.loss_fn(cache.predictions, dataset.labels, dataset.train_idx)
        train_f1 = micro_f1(binarize(cache.predictions, self.config.task), dataset.labels,
                            dataset.train_idx)
        if dataset.val_idx.size:
            val_pred = binarize(eval_predictions(model, cache), self.config.task)
            val_f1 = micro_f1(val_pred, dataset.labels, dataset.val_idx)
        else:
            val_f1 = 0.0
        result = self._backward(model, cache, grad_Y)
        return loss, result.grads, train_f1, val_f1, cache.forward_iterations, result.iterations

    def _graph_epoch(self, model: IgnnModel, dataset: GraphDataset, rng: np.random.Generator,
                     warm: Dict[int, List[np.ndarray]]):
        """Sequential per-graph forward/backward; gradients summed in graph order."""
        train = dataset.train_idx
        grads: Dict[str, np.ndarray] = {}
        loss = 0.0
        fwd_iters = bwd_iters = 0
        train_pred = np.zeros((dataset.num_classes, train.size))
        for column, k in enumerate(train):
            sample = dataset.samples[k]
            cache = self._forward(model, sample.graph.adjacencies, sample.features, "train", rng,
                                  warm.get(int(k)))
            warm[int(k)] = cache.states
            target = dataset.labels[:, [k]]
            graph_loss, grad_Y = self.loss_fn(cache.predictions, target, np.array([0]))
            loss += graph_loss / train.size
            train_pred[:, column] = cache.predictions[:, 0]
            result = self._backward(model, cache, grad_Y / train.size)
            for name, grad in result.grads.items():
                if name in grads:
                    grads[name] += grad
                else:
                    grads[name] = grad.copy()
            fwd_iters += cache.forward_iterations
            bwd_iters += result.iterations

        train_f1 = micro_f1(binarize(train_pred, self.config.task), dataset.labels[:, train],
                            np.arange(train.size))
        val_f1 = 0.0
        if dataset.val_idx.size:
            predictions = graph_predictions(model, dataset, dataset.val_idx, self.config.tol,
                                            self.config.max_iter,
                                            warm if self.config.warm_start else None)
            val_f1 = micro_f1(binarize(predictions, self.config.task),
                              dataset.labels[:, dataset.val_idx], np.arange(dataset.val_idx.size))
        return loss, grads, train_f1, val_f1, fwd_iters, bwd_iters


def graph_predictions(model: IgnnModel, dataset: GraphDataset, ids: np.ndarray,
                      tol: float = 1e-6, max_iter: int = 300,
                      warm: Optional[Dict[int, List[np.ndarray]]] = None) -> np.ndarray:
    """Eval-mode predictions, one column per graph id; ``warm`` is read and refreshed."""
    predictions = np.zeros((dataset.num_classes, ids.size))
    for column, k in enumerate(ids):
        sample = dataset.samples[k]
        start = warm.get(int(k)) if warm is not None else None
        cache = forward(model, sample.graph.adjacencies, sample.features, mode="eval",
                        warm=start, tol=tol, max_iter=max_iter)
        if warm is not None:
            warm[int(k)] = cache.states
        predictions[:, column] = cache.predictions[:, 0]
    return predictions


def evaluate_model(model: IgnnModel, dataset: Dataset, task: Optional[str] = None,
                   split: str = "test", tol: float = 1e-6, max_iter: int = 300) -> Dict[str, float]:
    """Eval-mode metrics on one split: loss, micro/macro F1 and (multiclass) accuracy.

    Raises:
        ValueError: empty split
        DimensionError: model and dataset shapes disagree
    """
    task = task or dataset.task
    ids = dataset.split(split)
    if ids.size == 0:
        raise ValueError(f"the {split} split is empty")
    if isinstance(dataset, GraphDataset):
        predictions = graph_predictions(model, dataset, ids, tol, max_iter)
        labels = dataset.labels[:, ids]
        mask = np.arange(ids.size)
    else:
        predictions = forward(model, dataset.graph.adjacencies, dataset.features, mode="eval",
                              tol=tol, max_iter=max_iter).predictions
        labels = dataset.labels
        mask = ids
    loss, _ = loss_for_task(task)(predictions, labels, mask)
    pred = binarize(predictions, task)
    metrics = {
        "loss": loss,
        "micro_f1": micro_f1(pred, labels, mask),
        "macro_f1": macro_f1(pred, labels, mask),
    }
    if task != "node-multilabel":
        metrics["accuracy"] = accuracy(pred, labels, mask)
    return metrics


def evaluate(checkpoint: Union[str, bytes], dataset: Dataset, task: Optional[str] = None,
             split: str = "test", tol: float = 1e-6, max_iter: int = 300) -> Dict[str, float]:
    """Load a checkpoint and evaluate it on ``dataset``."""
    return evaluate_model(load_checkpoint(checkpoint), dataset, task, split, tol, max_iter)


def train(config: TrainConfig, logger: Optional[IgnnLogger] = None,
          out: Optional[IO[str]] = None) -> Tuple[IgnnModel, TrainHistory]:
    """Load the dataset named by ``config`` and train a fresh model on it."""
    logger = logger if logger is not None else IgnnLogger(log_dir=None, log_level="WARNING")
    return IgnnTrainer(config, logger).train(load_dataset(config), out)
