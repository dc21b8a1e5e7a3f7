import io
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from config import ConfigManager
from graph import (Graph, GraphDataset, GraphSample, HeteroGraph, NodeDataset, gen_chains,
                   renormalize, save_node_dataset)
from linalg import NonConvergenceError, SparseAdjacency
from logger import IgnnLogger
from model import IgnnModel
from performance_monitor import PerformanceMonitor
from trainer import (METRIC_COLUMNS, AdamState, ConstraintViolationError, EpochRecord,
                     IgnnTrainer, TrainConfig, TrainHistory, adam_step, evaluate,
                     evaluate_model, sgd_step, train)


def small_config(**overrides):
    values = dict(hidden=[6], epochs=20, dropout=0.0, max_iter=2000, checkpoint=None,
                  metrics=None, weight_decay=0.0)
    values.update(overrides)
    return TrainConfig(**values)


def random_node_dataset(seed=0, n=30, p=5, classes=3):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < 0.15, k=1).astype(float)
    graph = renormalize(Graph(SparseAdjacency(upper + upper.T), directed=False))
    labels = np.eye(classes)[:, rng.integers(0, classes, size=n)]
    order = rng.permutation(n)
    return NodeDataset(graph, rng.normal(size=(p, n)), labels, np.sort(order[:10]),
                       np.sort(order[10:20]), np.sort(order[20:30]))


def separable_dataset(n=20):
    """Nodes without edges whose class is the sign of the first feature."""
    rng = np.random.default_rng(1)
    signs = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    features = np.vstack([signs * rng.uniform(1.0, 2.0, n), rng.normal(scale=0.1, size=n)])
    labels = np.vstack([signs < 0, signs > 0]).astype(float)
    graph = renormalize(Graph(SparseAdjacency.zeros(n)))
    return NodeDataset(graph, features, labels, np.arange(0, 10), np.arange(10, 15),
                       np.arange(15, 20))


def graph_dataset():
    rng = np.random.default_rng(2)
    samples = []
    for k in range(6):
        n = 3 + k % 2
        upper = np.triu(np.ones((n, n)), k=1) * (rng.random((n, n)) < 0.7)
        graph = renormalize(Graph(SparseAdjacency(upper + upper.T), directed=False))
        samples.append(GraphSample(graph, rng.normal(size=(2, n)) + (k % 2)))
    labels = np.eye(2)[:, [k % 2 for k in range(6)]]
    return GraphDataset(samples, labels, np.arange(4), np.array([4]), np.array([5]))


class RecordingTrainer(IgnnTrainer):
    """Keeps the worst constraint slack seen after every epoch's projection."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.slack = []

    def _check_feasible(self, model, specs, epoch):
        self.slack.append(max(norm - radius for norms in model.constraint_norms(specs)
                              for norm, radius in norms))
        super()._check_feasible(model, specs, epoch)


class TestTrainConfig(unittest.TestCase):

    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual(config.optimizer, "adam")
        self.assertEqual(config.lr, 0.01)
        self.assertEqual(config.solve_backward_tol, config.tol)
        self.assertEqual(config.solve_backward_max_iter, config.max_iter)

    def test_backward_overrides(self):
        config = TrainConfig(backward_tol=1e-9, backward_max_iter=50)
        self.assertEqual(config.solve_backward_tol, 1e-9)
        self.assertEqual(config.solve_backward_max_iter, 50)

    def test_validation(self):
        for bad in ({"lr": 0.0}, {"epochs": 0}, {"kappas": [1.0]}, {"task": "edge"},
                    {"optimizer": "rmsprop"}, {"dropout": 1.0}, {"hidden": [4, 4],
                                                                  "kappas": [0.5, 0.5, 0.5]}):
            with self.subTest(**{k: str(v) for k, v in bad.items()}):
                with self.assertRaises(ValueError):
                    TrainConfig(**bad)

    def test_from_manager(self):
        manager = ConfigManager.from_dict({
            "model": {"hidden": [8, 8], "kappa": 0.9},
            "training": {"lr": 0.1, "optimizer": "sgd"},
            "solver": {"max_iter": 50},
        })
        config = TrainConfig.from_manager(manager)
        self.assertEqual(config.hidden, [8, 8])
        self.assertEqual(config.kappas, [0.9])
        self.assertEqual(config.relation_kappas, [])
        self.assertEqual(config.lr, 0.1)
        self.assertEqual(config.optimizer, "sgd")
        self.assertEqual(config.max_iter, 50)


class TestOptimizers(unittest.TestCase):

    def test_sgd_zero_gradient(self):
        params = {"w": np.array([[1.0, 2.0]])}
        sgd_step(params, {"w": np.zeros((1, 2))}, TrainConfig(lr=0.5))
        np.testing.assert_array_equal(params["w"], [[1.0, 2.0]])

    def test_sgd_scalar_step(self):
        params = {"w": np.array([[1.0]])}
        sgd_step(params, {"w": np.array([[4.0]])}, TrainConfig(lr=0.1))
        self.assertAlmostEqual(params["w"][0, 0], 0.6)

    def test_adam_first_step_is_lr_sized(self):
        config = TrainConfig(lr=0.01)
        for scale in (1e-3, 1.0, 1e3):
            params = {"w": np.zeros((2, 2))}
            grad = scale * np.array([[1.0, -2.0], [3.0, -4.0]])
            adam_step(params, {"w": grad}, AdamState(), config)
            np.testing.assert_allclose(np.abs(params["w"]), np.full((2, 2), 0.01), rtol=1e-4)
            np.testing.assert_array_equal(np.sign(params["w"]), -np.sign(grad))

    def test_adam_carries_state(self):
        config = TrainConfig(lr=0.01)
        state = AdamState()
        params = {"w": np.zeros((1, 1))}
        for _ in range(3):
            adam_step(params, {"w": np.ones((1, 1))}, state, config)
        self.assertEqual(state.t, 3)
        self.assertAlmostEqual(params["w"][0, 0], -0.03, places=6)


class TestTrainHistory(unittest.TestCase):

    def test_best_epoch_keeps_first_maximum(self):
        history = TrainHistory()
        for epoch, val in enumerate([0.2, 0.8, 0.8, 0.5], start=1):
            history.append(EpochRecord(epoch, 1.0, 0.0, val, 1, 1, 0.0))
        self.assertEqual(history.best_epoch, 2)
        self.assertEqual(history.best_val_f1, 0.8)
        self.assertEqual(len(history), 4)

    def test_tsv_export(self):
        history = TrainHistory()
        history.append(EpochRecord(1, 0.5, 0.25, 0.75, 10, 12, 0.01))
        buffer = io.StringIO()
        history.to_tsv(buffer)
        lines = buffer.getvalue().splitlines()
        self.assertEqual(lines[0].split('\t'), METRIC_COLUMNS)
        self.assertEqual(lines[1].split('\t')[0], "1")
        self.assertEqual(list(history.to_frame().columns), METRIC_COLUMNS)


class TestIgnnTrainer(unittest.TestCase):
    """Projected-gradient training end to end."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.logger = IgnnLogger(log_dir=None, log_level="CRITICAL")

    def tearDown(self):
        self.logger.cleanup()
        shutil.rmtree(self.temp_dir)

    def test_constraint_holds_after_every_epoch(self):
        dataset = random_node_dataset()
        trainer = RecordingTrainer(small_config(epochs=50, lr=0.05), self.logger)
        model = trainer.build_model(dataset)
        trainer.train(dataset, out=io.StringIO(), model=model)
        self.assertEqual(len(trainer.slack), 50)
        self.assertLessEqual(max(trainer.slack), 1e-12)
        specs = trainer.constraint_specs(model, dataset)
        for norms in model.constraint_norms(specs):
            for norm, radius in norms:
                self.assertLessEqual(norm, radius + 1e-12)

    def test_clamped_weights_reduce_to_logistic_regression(self):
        dataset = separable_dataset()
        config = small_config(epochs=200, lr=0.05, kappas=[0.0], activation="identity")
        trainer = IgnnTrainer(config, self.logger)
        model = trainer.build_model(dataset)
        _, history = trainer.train(dataset, out=io.StringIO(), model=model)
        np.testing.assert_array_equal(model.layers[0].W, np.zeros((6, 6)))
        self.assertEqual(history.records[-1].train_f1, 1.0)
        self.assertLess(history.records[-1].loss, history.records[0].loss)

    def test_output_stream_and_files(self):
        dataset = gen_chains(3, 5, 10, 10, 10, 10, seed=0)
        checkpoint = os.path.join(self.temp_dir, "out", "model.ignn")
        metrics = os.path.join(self.temp_dir, "out", "metrics.tsv")
        config = small_config(epochs=20, metrics_every=10, checkpoint=checkpoint,
                              metrics=metrics)
        out = io.StringIO()
        _, history = IgnnTrainer(config, self.logger).train(dataset, out=out)
        lines = out.getvalue().splitlines()
        self.assertEqual(lines[0].split('\t'), METRIC_COLUMNS)
        self.assertEqual([line.split('\t')[0] for line in lines[1:]], ["10", "20"])
        self.assertTrue(os.path.exists(checkpoint))
        frame = pd.read_csv(metrics, sep='\t')
        self.assertEqual(list(frame.columns), METRIC_COLUMNS)
        self.assertEqual(len(frame), 20)
        self.assertEqual(len(history), 20)

    def test_train_loads_configured_dataset(self):
        directory = os.path.join(self.temp_dir, "chains")
        save_node_dataset(gen_chains(2, 4, 5, 6, 6, 6, renormalize_graph=False), directory)
        config = small_config(epochs=5, dataset_path=directory)
        model, history = train(config, self.logger, out=io.StringIO())
        self.assertEqual(len(history), 5)
        self.assertEqual(model.layers[0].m, 6)
        self.assertEqual(model.head.outputs, 2)

    def test_deterministic_given_seed(self):
        dataset = gen_chains(3, 5, 10, 10, 10, 10, seed=0)
        runs = []
        for name in ("a", "b"):
            path = os.path.join(self.temp_dir, f"{name}.ignn")
            config = small_config(epochs=15, dropout=0.5, checkpoint=path)
            _, history = IgnnTrainer(config, self.logger).train(dataset, out=io.StringIO())
            with open(path, 'rb') as f:
                runs.append(([(r.loss, r.val_f1) for r in history.records], f.read()))
        self.assertEqual(runs[0][0], runs[1][0])
        self.assertEqual(runs[0][1], runs[1][1])

    def test_warm_start_does_not_change_losses(self):
        dataset = random_node_dataset()
        tol = 1e-10
        losses = []
        for warm_start in (True, False):
            config = small_config(epochs=5, optimizer="sgd", lr=0.05, kappas=[0.5], tol=tol,
                                  warm_start=warm_start)
            _, history = IgnnTrainer(config, self.logger).train(dataset, out=io.StringIO())
            losses.append([record.loss for record in history.records])
        np.testing.assert_allclose(losses[0], losses[1], rtol=0, atol=10 * tol)

    def test_monitor_times_every_solve(self):
        dataset = random_node_dataset()
        monitor = PerformanceMonitor(None, self.logger)
        IgnnTrainer(small_config(epochs=4), self.logger, monitor).train(
            dataset, out=io.StringIO())
        stats = monitor.get_performance_stats()
        for operation in ('forward', 'backward', 'epoch'):
            self.assertEqual(stats['operation_averages'][operation]['count'], 4)
        self.assertEqual(stats['solve_iterations']['forward']['count'], 4)
        self.assertEqual(stats['solve_iterations']['backward']['count'], 4)

    def test_evaluate_reproduces_best_validation(self):
        dataset = gen_chains(3, 5, 10, 10, 10, 10, seed=1)
        path = os.path.join(self.temp_dir, "best.ignn")
        config = small_config(epochs=30, checkpoint=path)
        best, history = IgnnTrainer(config, self.logger).train(dataset, out=io.StringIO())
        metrics = evaluate(path, dataset, split="val")
        self.assertEqual(metrics["micro_f1"], history.best_val_f1)
        self.assertEqual(metrics, evaluate_model(best, dataset, split="val"))
        self.assertEqual(set(metrics), {"loss", "micro_f1", "macro_f1", "accuracy"})

    def test_evaluate_empty_split(self):
        dataset = random_node_dataset()
        dataset.test_idx = np.array([], dtype=np.int64)
        model = IgnnTrainer(small_config(), self.logger).build_model(dataset)
        with self.assertRaises(ValueError):
            evaluate_model(model, dataset, split="test")

    def test_learnable_features(self):
        dataset = gen_chains(2, 3, 4, 6, 6, 6, seed=2)
        dataset.features = None
        model, history = IgnnTrainer(small_config(epochs=5), self.logger).train(
            dataset, out=io.StringIO())
        self.assertEqual(model.U.shape, (6, dataset.n))
        self.assertEqual(len(history), 5)

    def test_graph_classification(self):
        dataset = graph_dataset()
        config = small_config(task="graph", epochs=5, readout="mean")
        trainer = IgnnTrainer(config, self.logger)
        model = trainer.build_model(dataset)
        self.assertEqual(model.readout, "mean")
        specs = trainer.constraint_specs(model, dataset)
        largest = max(sample.graph.adjacency.pf_eigenvalue for sample in dataset.samples)
        self.assertAlmostEqual(specs[0].radius, 0.95 / largest)
        _, history = trainer.train(dataset, out=io.StringIO(), model=model)
        self.assertEqual(len(history), 5)
        metrics = evaluate_model(model, dataset, split="test")
        self.assertIn("accuracy", metrics)

    def test_non_convergence_carries_epoch_and_layer(self):
        dataset = gen_chains(3, 5, 10, 10, 10, 10, seed=0)
        config = small_config(epochs=3, tol=1e-14, max_iter=1)
        with self.assertRaises(NonConvergenceError) as ctx:
            IgnnTrainer(config, self.logger).train(dataset, out=io.StringIO())
        self.assertEqual(ctx.exception.epoch, 1)
        self.assertEqual(ctx.exception.layer, 1)

    def test_infeasible_weights_are_reported(self):
        dataset = random_node_dataset()
        trainer = IgnnTrainer(small_config(), self.logger)
        model = trainer.build_model(dataset)
        specs = trainer.constraint_specs(model, dataset)
        model.layers[0].W[...] = 10.0
        with self.assertRaises(ConstraintViolationError):
            trainer._check_feasible(model, specs, epoch=7)

    def test_hetero_node_dataset(self):
        base = random_node_dataset(seed=3)
        rng = np.random.default_rng(4)
        upper = np.triu(rng.random((30, 30)) < 0.1, k=1).astype(float)
        second = renormalize(Graph(SparseAdjacency(upper + upper.T))).adjacency
        base.graph = HeteroGraph(30, [("a", base.graph.adjacency), ("b", second)])
        trainer = IgnnTrainer(small_config(epochs=3, relation_kappas=[0.4, 0.4]), self.logger)
        model = trainer.build_model(base)
        self.assertIsInstance(model, IgnnModel)
        self.assertEqual(model.layers[0].relations, 2)
        _, history = trainer.train(base, out=io.StringIO(), model=model)
        self.assertEqual(len(history), 3)
        specs = trainer.constraint_specs(model, base)
        for norms in model.constraint_norms(specs):
            for norm, radius in norms:
                self.assertLessEqual(norm, radius + 1e-12)


if __name__ == '__main__':
    unittest.main()
