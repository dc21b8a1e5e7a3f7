import io
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import scipy.sparse as sp

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from graph import (DatasetFormatError, Graph, HeteroGraph, NodeDataset, gen_chains,
                   load_edge_list, load_features, load_labels, load_node_dataset, load_splits,
                   renormalize, renormalize_hetero, save_edge_list, save_node_dataset)
from linalg import DimensionError, SparseAdjacency, pf_eigen


class TestEdgeList(unittest.TestCase):
    """Parsing of tab-separated edge lists."""

    def test_empty_stream(self):
        graph = load_edge_list(io.BytesIO(b""), 3)
        self.assertEqual(graph.n, 3)
        self.assertEqual(graph.adjacency.nnz, 0)

    def test_single_edge(self):
        graph = load_edge_list(io.BytesIO(b"0\t1\n"), 2)
        self.assertEqual(graph.adjacency.nnz, 1)
        self.assertEqual(graph.adjacency.toarray()[0, 1], 1.0)

    def test_duplicates_collapse(self):
        graph = load_edge_list(b"0\t1\n1\t2\n0\t1\n", 3)
        self.assertEqual(graph.adjacency.nnz, 2)
        self.assertEqual(graph.adjacency.toarray().max(), 1.0)

    def test_symmetrize_adds_reverse_edges(self):
        graph = load_edge_list(b"0\t1\n", 2, symmetrize=True)
        np.testing.assert_array_equal(graph.adjacency.toarray(), [[0.0, 1.0], [1.0, 0.0]])
        self.assertFalse(graph.directed)

    def test_malformed_line_reports_line_number(self):
        with self.assertRaises(DatasetFormatError) as ctx:
            load_edge_list(b"0\t1\n1 2\n", 3)
        self.assertEqual(ctx.exception.line, 2)

    def test_non_integer_ids(self):
        with self.assertRaises(DatasetFormatError):
            load_edge_list(b"a\tb\n", 3)

    def test_id_out_of_range(self):
        with self.assertRaises(DatasetFormatError) as ctx:
            load_edge_list(b"0\t1\n0\t3\n", 3)
        self.assertEqual(ctx.exception.line, 2)

    def test_relation_column(self):
        graph = load_edge_list(b"0\t1\tcites\n1\t2\tlinks\n2\t0\tcites\n", 3, relation_col=True)
        self.assertIsInstance(graph, HeteroGraph)
        self.assertEqual(graph.relation_names, ["cites", "links"])
        self.assertEqual([A.nnz for A in graph.adjacencies], [2, 1])

    def test_round_trip(self):
        source = b"0\t1\n1\t2\n3\t0\n2\t2\n"
        graph = load_edge_list(source, 4)
        buffer = io.StringIO()
        save_edge_list(graph, buffer)
        again = load_edge_list(buffer.getvalue().encode('utf-8'), 4)
        self.assertEqual(again.adjacency.nnz, graph.adjacency.nnz)
        np.testing.assert_array_equal(again.adjacency.toarray(), graph.adjacency.toarray())

    def test_hetero_round_trip(self):
        graph = load_edge_list(b"0\t1\ta\n1\t0\tb\n", 2, relation_col=True)
        buffer = io.StringIO()
        save_edge_list(graph, buffer)
        again = load_edge_list(buffer.getvalue().encode('utf-8'), 2, relation_col=True)
        self.assertEqual(again.relation_names, ["a", "b"])


class TestHeteroGraph(unittest.TestCase):

    def test_requires_a_relation(self):
        with self.assertRaises(ValueError):
            HeteroGraph(3, [])

    def test_relation_sizes_must_agree(self):
        with self.assertRaises(DimensionError):
            HeteroGraph(3, [("a", SparseAdjacency.identity(3)), ("b", SparseAdjacency.identity(2))])


class TestRenormalize(unittest.TestCase):
    """Self-loops plus symmetric degree normalization."""

    def test_empty_graph_becomes_identity(self):
        graph = renormalize(Graph(SparseAdjacency.zeros(4)))
        np.testing.assert_allclose(graph.adjacency.toarray(), np.eye(4))

    def test_single_undirected_edge(self):
        graph = renormalize(load_edge_list(b"0\t1\n", 2, symmetrize=True))
        np.testing.assert_allclose(graph.adjacency.toarray(), np.full((2, 2), 0.5))

    def test_symmetric_inputs_have_unit_pf_eigenvalue(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            upper = np.triu(rng.random((8, 8)) < 0.4, k=1).astype(float)
            A = SparseAdjacency(upper + upper.T)
            renormalized = renormalize(Graph(A, directed=False)).adjacency.toarray()
            np.testing.assert_allclose(renormalized, renormalized.T, atol=1e-15)
            lam, _ = pf_eigen(renormalized, tol=1e-12)
            self.assertAlmostEqual(lam, 1.0, delta=1e-6)

    def test_regular_graph_row_sums(self):
        # 4-cycle: every node has degree 3 with its self-loop
        graph = load_edge_list(b"0\t1\n1\t2\n2\t3\n3\t0\n", 4, symmetrize=True)
        renormalized = renormalize(graph).adjacency.toarray()
        np.testing.assert_allclose(renormalized.sum(axis=0), np.ones(4))
        np.testing.assert_allclose(renormalized.sum(axis=1), np.ones(4))

    def test_hetero_renormalizes_each_relation(self):
        graph = HeteroGraph(2, [("a", SparseAdjacency.zeros(2)),
                                ("b", SparseAdjacency(sp.csr_matrix(np.ones((2, 2)) - np.eye(2))))])
        renormalized = renormalize_hetero(graph)
        np.testing.assert_allclose(renormalized.adjacencies[0].toarray(), np.eye(2))
        np.testing.assert_allclose(renormalized.adjacencies[1].toarray(), np.full((2, 2), 0.5))


class TestChains(unittest.TestCase):
    """The synthetic chains dataset."""

    def test_node_count(self):
        dataset = gen_chains(9, 20, 100, 20, 100, 200, seed=0)
        self.assertEqual(dataset.n, 400)
        self.assertEqual(dataset.features.shape, (100, 400))
        self.assertEqual(dataset.labels.shape, (2, 400))
        self.assertEqual((len(dataset.train_idx), len(dataset.val_idx), len(dataset.test_idx)),
                         (20, 100, 200))

    def test_raw_adjacency_has_one_entry_per_edge_and_is_nilpotent(self):
        dataset = gen_chains(9, 20, 100, 20, 100, 200, renormalize_graph=False)
        A = dataset.graph.adjacency
        self.assertEqual(A.nnz, 2 * 20 * 9)
        self.assertEqual(A.pf_eigenvalue, 0.0)

    def test_edges_point_away_from_start(self):
        dataset = gen_chains(3, 1, 4, 1, 1, 1, renormalize_graph=False)
        dense = dataset.graph.adjacency.toarray()
        self.assertEqual(dense[0, 1], 1.0)
        self.assertEqual(dense[1, 0], 0.0)

    def test_features_encode_class_on_start_node(self):
        dataset = gen_chains(4, 3, 10, 2, 2, 2)
        nodes_per_chain = 5
        for chain in range(6):
            start = chain * nodes_per_chain
            expected = 1.0 if chain >= 3 else 0.0
            self.assertEqual(dataset.features[0, start], expected)
        self.assertEqual(dataset.features.sum(), 3.0)

    def test_labels_follow_chain_class(self):
        dataset = gen_chains(2, 2, 5, 1, 1, 1)
        np.testing.assert_array_equal(dataset.labels.sum(axis=0), np.ones(12))
        np.testing.assert_array_equal(dataset.labels[1, :6], np.zeros(6))
        np.testing.assert_array_equal(dataset.labels[1, 6:], np.ones(6))

    def test_length_zero(self):
        dataset = gen_chains(0, 20, 100, 10, 10, 20, renormalize_graph=False)
        self.assertEqual(dataset.n, 40)
        self.assertEqual(dataset.graph.adjacency.nnz, 0)

    def test_renormalized_chain_has_unit_pf_eigenvalue(self):
        dataset = gen_chains(9, 20, 100, 20, 100, 200)
        self.assertAlmostEqual(dataset.graph.adjacency.pf_eigenvalue, 1.0, delta=1e-6)

    def test_deterministic_given_seed(self):
        a = gen_chains(5, 4, 8, 5, 5, 5, seed=3)
        b = gen_chains(5, 4, 8, 5, 5, 5, seed=3)
        np.testing.assert_array_equal(a.train_idx, b.train_idx)
        np.testing.assert_array_equal(a.test_idx, b.test_idx)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.graph.adjacency.toarray(), b.graph.adjacency.toarray())

    def test_splits_are_disjoint(self):
        dataset = gen_chains(9, 20, 100, 20, 100, 200, seed=1)
        combined = np.concatenate([dataset.train_idx, dataset.val_idx, dataset.test_idx])
        self.assertEqual(len(np.unique(combined)), 320)

    def test_splits_exceeding_nodes(self):
        with self.assertRaises(ValueError):
            gen_chains(1, 2, 3, 4, 4, 4)


class TestNodeFiles(unittest.TestCase):
    """Feature, label and split files."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_features_are_transposed(self):
        features = load_features(io.BytesIO(b"1 2 3\n4 5 6\n"), 2)
        np.testing.assert_array_equal(features, [[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]])

    def test_missing_features_mean_learnable(self):
        self.assertIsNone(load_features(os.path.join(self.temp_dir, "absent.txt"), 4))

    def test_feature_row_count_must_match(self):
        with self.assertRaises(DimensionError):
            load_features(io.BytesIO(b"1 2\n3 4\n"), 3)

    def test_ragged_features(self):
        with self.assertRaises(DatasetFormatError) as ctx:
            load_features(io.BytesIO(b"1 2\n3\n"), 2)
        self.assertEqual(ctx.exception.line, 2)

    def test_labels_must_be_flags(self):
        with self.assertRaises(DatasetFormatError):
            load_labels(io.BytesIO(b"0 2\n1 0\n"), 2)

    def test_split_sections(self):
        train, val, test = load_splits(b"train:\n0 1 2\nval:\n3 4 5\ntest:\n6 7 8\n", 9)
        self.assertEqual((len(train), len(val), len(test)), (3, 3, 3))

    def test_overlapping_splits(self):
        with self.assertRaises(ValueError):
            load_splits(b"train: 0 1\nval: 1\ntest: 2\n", 3)

    def test_id_before_section(self):
        with self.assertRaises(DatasetFormatError):
            load_splits(b"0 1\ntrain: 2\n", 3)

    def test_multiclass_columns_must_sum_to_one(self):
        graph = Graph(SparseAdjacency.identity(2))
        with self.assertRaises(ValueError):
            NodeDataset(graph, None, np.array([[1.0, 1.0], [1.0, 0.0]]),
                        np.array([0]), np.array([1]), np.array([], dtype=np.int64))

    def test_dataset_directory_round_trip(self):
        original = gen_chains(3, 2, 4, 2, 2, 2, seed=5, renormalize_graph=False)
        paths = save_node_dataset(original, self.temp_dir)
        self.assertEqual(len(paths), 4)
        loaded = load_node_dataset(self.temp_dir, renormalize_graph=False)
        np.testing.assert_array_equal(loaded.graph.adjacency.toarray(),
                                      original.graph.adjacency.toarray())
        np.testing.assert_array_equal(loaded.features, original.features)
        np.testing.assert_array_equal(loaded.labels, original.labels)
        np.testing.assert_array_equal(loaded.val_idx, original.val_idx)

    def test_dataset_without_features(self):
        original = gen_chains(1, 1, 2, 1, 1, 1, renormalize_graph=False)
        original.features = None
        paths = save_node_dataset(original, self.temp_dir)
        self.assertEqual(len(paths), 3)
        self.assertTrue(load_node_dataset(self.temp_dir).learnable_features)


if __name__ == '__main__':
    unittest.main()
