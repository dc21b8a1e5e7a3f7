"""Graph construction and ingestion.

Adjacency convention: entry ``A[i, j] = 1`` for an edge ``i -> j``, so column j
of ``X @ A`` gathers the states of j's predecessors.
"""

import io
import os
from dataclasses import dataclass
from typing import IO, Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from linalg import DimensionError, SparseAdjacency, as_dense

EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.txt"
LABELS_FILE = "labels.txt"
SPLITS_FILE = "splits.txt"
GRAPH_LABELS_FILE = "graph_labels.txt"
GRAPHS_DIR = "graphs"

Source = Union[str, bytes, IO[Any]]


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, source: str = "<stream>", line: Optional[int] = None):
        location = f"{source}:{line}" if line is not None else source
        super().__init__(f"{location}: {message}")
        self.source = source
        self.line = line


@dataclass(frozen=True)
class Graph:
    adjacency: SparseAdjacency
    directed: bool = True

    @property
    def n(self) -> int:
        return self.adjacency.n

    @property
    def adjacencies(self) -> List[SparseAdjacency]:
        return [self.adjacency]


@dataclass(frozen=True)
class HeteroGraph:
    n: int
    relations: List[Tuple[str, SparseAdjacency]]

    def __post_init__(self):
        if not self.relations:
            raise ValueError("a heterogeneous graph needs at least one relation")
        for name, adjacency in self.relations:
            if adjacency.n != self.n:
                raise DimensionError(f"relation {name!r} has size {adjacency.n}, expected {self.n}")

    @property
    def adjacencies(self) -> List[SparseAdjacency]:
        return [adjacency for _, adjacency in self.relations]

    @property
    def relation_names(self) -> List[str]:
        return [name for name, _ in self.relations]


AnyGraph = Union[Graph, HeteroGraph]


@dataclass
class NodeDataset:
    """Graph, optional features (p×n), labels (c×n) and train/val/test node sets."""

    graph: AnyGraph
    features: Optional[np.ndarray]
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    task: str = "node-multiclass"

    def __post_init__(self):
        n = self.graph.n
        if self.features is not None and self.features.shape[1] != n:
            raise DimensionError(f"features cover {self.features.shape[1]} nodes, graph has {n}")
        if self.labels.shape[1] != n:
            raise DimensionError(f"labels cover {self.labels.shape[1]} nodes, graph has {n}")
        _check_masks(n, self.train_idx, self.val_idx, self.test_idx)
        if self.task == "node-multiclass":
            sums = self.labels.sum(axis=0)
            if not np.allclose(sums, 1.0):
                raise ValueError("multiclass label columns must sum to 1")

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def learnable_features(self) -> bool:
        return self.features is None

    @property
    def num_classes(self) -> int:
        return self.labels.shape[0]

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]


@dataclass
class GraphSample:
    """One graph of a graph-classification dataset."""

    graph: AnyGraph
    features: np.ndarray


@dataclass
class GraphDataset:
    """Graph-classification data: one label column per graph."""

    samples: List[GraphSample]
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    task: str = "graph"

    def __post_init__(self):
        if self.labels.shape[1] != len(self.samples):
            raise DimensionError(f"{self.labels.shape[1]} labels for {len(self.samples)} graphs")
        _check_masks(len(self.samples), self.train_idx, self.val_idx, self.test_idx)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[0]

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]


def _check_masks(n: int, *masks: np.ndarray) -> None:
    seen = np.zeros(n, dtype=bool)
    for mask in masks:
        if mask.size and (mask.min() < 0 or mask.max() >= n):
            raise ValueError(f"split ids must lie in [0, {n})")
        if len(np.unique(mask)) != len(mask) or seen[mask].any():
            raise ValueError("train/val/test splits must be disjoint")
        seen[mask] = True


def _lines(source: Source) -> Tuple[Iterator[str], str]:
    """Yield decoded text lines from a path, raw bytes or an open stream."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, 'rb') as f:
            data = f.read()
        name = str(source)
    elif isinstance(source, bytes):
        data, name = source, "<bytes>"
    else:
        data = source.read()
        name = getattr(source, 'name', "<stream>")
    if isinstance(data, bytes):
        data = data.decode('utf-8')
    return iter(data.splitlines()), name


def load_edge_list(source: Source, n: int, relation_col: bool = False,
                   symmetrize: bool = False) -> AnyGraph:
    """Parse ``src<TAB>dst[<TAB>rel]`` lines into a Graph (or HeteroGraph).

    Duplicate edges collapse to a single unit entry; ``symmetrize`` also adds
    every reverse edge (undirected data). Relations keep first-seen order.

    Raises:
        DatasetFormatError: malformed line or id out of range
    """
    lines, name = _lines(source)
    edges: dict = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split('\t')
        expected = 3 if relation_col else 2
        if len(parts) != expected:
            raise DatasetFormatError(f"expected {expected} tab-separated fields, got {len(parts)}",
                                     name, lineno)
        try:
            src, dst = int(parts[0]), int(parts[1])
        except ValueError:
            raise DatasetFormatError(f"node ids must be integers: {line!r}", name, lineno)
        if not (0 <= src < n and 0 <= dst < n):
            raise DatasetFormatError(f"node id out of range [0, {n}): {line!r}", name, lineno)
        relation = parts[2].strip() if relation_col else ""
        bucket = edges.setdefault(relation, set())
        bucket.add((src, dst))
        if symmetrize:
            bucket.add((dst, src))

    def build(pairs) -> SparseAdjacency:
        if not pairs:
            return SparseAdjacency.zeros(n)
        rows, cols = zip(*sorted(pairs))
        return SparseAdjacency.from_edges(n, rows, cols)

    if not relation_col:
        return Graph(build(edges.get("", set())), directed=not symmetrize)
    if not edges:
        raise DatasetFormatError("no relations found", name)
    return HeteroGraph(n, [(rel, build(pairs)) for rel, pairs in edges.items()])


def save_edge_list(graph: AnyGraph, sink: Union[str, IO[str]]) -> None:
    """Write a graph back as a tab-separated edge list (weights dropped)."""
    lines = []
    if isinstance(graph, HeteroGraph):
        for name, adjacency in graph.relations:
            coo = adjacency.csr.tocoo()
            lines += [f"{i}\t{j}\t{name}" for i, j in zip(coo.row, coo.col)]
    else:
        coo = graph.adjacency.csr.tocoo()
        lines += [f"{i}\t{j}" for i, j in zip(coo.row, coo.col)]
    text = "\n".join(lines) + ("\n" if lines else "")
    _write(sink, text)


def _write(sink: Union[str, IO[str]], text: str) -> None:
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, 'w', encoding='utf-8') as f:
            f.write(text)
    else:
        sink.write(text)


def _renormalized(adjacency: SparseAdjacency) -> SparseAdjacency:
    n = adjacency.n
    with_loops = adjacency.csr + sp.identity(n, format='csr')
    degree = np.asarray(with_loops.sum(axis=1)).ravel()
    scale = sp.diags(1.0 / np.sqrt(degree))
    return SparseAdjacency(scale @ with_loops @ scale)


def renormalize(G: Graph) -> Graph:
    """Return D^{-1/2}(A + I)D^{-1/2}, D the row-sum degree of A + I."""
    return Graph(_renormalized(G.adjacency), directed=G.directed)


def renormalize_hetero(G: HeteroGraph) -> HeteroGraph:
    return HeteroGraph(G.n, [(name, _renormalized(adjacency)) for name, adjacency in G.relations])


def renormalize_any(G: AnyGraph) -> AnyGraph:
    if isinstance(G, HeteroGraph):
        return renormalize_hetero(G)
    return renormalize(G)


def gen_chains(length: int, chains_per_class: int, feature_dim: int,
               n_train: int, n_val: int, n_test: int, seed: int = 0,
               renormalize_graph: bool = True) -> NodeDataset:
    """Generate the two-class chains node-classification task.

    Each chain has ``length + 1`` nodes with edges pointing from the start node
    towards the far end. Only the start node of a class-1 chain carries a
    feature (a 1 in dimension 0); every other feature entry is 0.

    Raises:
        ValueError: when the splits need more nodes than the chains provide
    """
    if length < 0 or chains_per_class < 1 or feature_dim < 1:
        raise ValueError("length must be >= 0, chains_per_class and feature_dim >= 1")
    nodes_per_chain = length + 1
    num_chains = 2 * chains_per_class
    n = num_chains * nodes_per_chain
    if n_train + n_val + n_test > n:
        raise ValueError(f"splits {n_train}/{n_val}/{n_test} exceed {n} nodes")

    rows, cols = [], []
    features = np.zeros((feature_dim, n))
    labels = np.zeros((2, n))
    for chain in range(num_chains):
        cls = 0 if chain < chains_per_class else 1
        start = chain * nodes_per_chain
        for offset in range(length):
            rows.append(start + offset)
            cols.append(start + offset + 1)
        if cls == 1:
            features[0, start] = 1.0
        labels[cls, start:start + nodes_per_chain] = 1.0

    graph = Graph(SparseAdjacency.from_edges(n, rows, cols), directed=True)
    if renormalize_graph:
        graph = renormalize(graph)

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    train_idx = np.sort(order[:n_train])
    val_idx = np.sort(order[n_train:n_train + n_val])
    test_idx = np.sort(order[n_train + n_val:n_train + n_val + n_test])
    return NodeDataset(graph, features, labels, train_idx, val_idx, test_idx)


def _read_matrix(source: Source, n: Optional[int], what: str) -> np.ndarray:
    lines, name = _lines(source)
    rows: List[List[float]] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            row = [float(token) for token in line.split()]
        except ValueError:
            raise DatasetFormatError(f"{what} must be decimal numbers: {line!r}", name, lineno)
        if rows and len(row) != len(rows[0]):
            raise DatasetFormatError(f"expected {len(rows[0])} {what} columns, got {len(row)}",
                                     name, lineno)
        rows.append(row)
    if n is not None and len(rows) != n:
        raise DimensionError(f"{name}: {len(rows)} {what} rows for {n} nodes")
    if not rows:
        return np.zeros((0, 0))
    # one node per line in the file, one node per column in memory
    return as_dense(np.array(rows).T, what)


def load_features(source: Optional[Source], n: int) -> Optional[np.ndarray]:
    """Read a features file into a p×n matrix; a missing file means learnable features."""
    if source is None or (isinstance(source, str) and not os.path.exists(source)):
        return None
    return _read_matrix(source, n, "features")


def load_labels(source: Source, n: int) -> np.ndarray:
    """Read 0/1 label flags (one node per line) into a c×n matrix."""
    labels = _read_matrix(source, n, "labels")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise DatasetFormatError("labels must be 0/1 flags", _lines_name(source))
    return labels


def _lines_name(source: Source) -> str:
    return str(source) if isinstance(source, (str, os.PathLike)) else "<stream>"


def load_splits(source: Source, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read ``train:`` / ``val:`` / ``test:`` sections of whitespace-separated ids."""
    lines, name = _lines(source)
    sections = {"train": [], "val": [], "test": []}
    current = None
    for lineno, raw in enumerate(lines, start=1):
        tokens = raw.split()
        for token in tokens:
            if token.endswith(':'):
                label = token[:-1]
                if label not in sections:
                    raise DatasetFormatError(f"unknown split section {label!r}", name, lineno)
                current = label
                continue
            if current is None:
                raise DatasetFormatError("node id before any section header", name, lineno)
            try:
                node = int(token)
            except ValueError:
                raise DatasetFormatError(f"split ids must be integers: {token!r}", name, lineno)
            if not 0 <= node < n:
                raise DatasetFormatError(f"node id {node} out of range [0, {n})", name, lineno)
            sections[current].append(node)
    masks = tuple(np.array(sections[key], dtype=np.int64) for key in ("train", "val", "test"))
    _check_masks(n, *masks)
    return masks


def save_splits(sink: Union[str, IO[str]], train_idx: Sequence[int], val_idx: Sequence[int],
                test_idx: Sequence[int]) -> None:
    text = "".join(f"{label}:\n{' '.join(str(int(i)) for i in ids)}\n"
                   for label, ids in (("train", train_idx), ("val", val_idx), ("test", test_idx)))
    _write(sink, text)


def _save_matrix(sink: Union[str, IO[str]], M: np.ndarray, integer: bool = False) -> None:
    buffer = io.StringIO()
    for column in M.T:
        if integer:
            buffer.write(" ".join(str(int(x)) for x in column) + "\n")
        else:
            buffer.write(" ".join(repr(float(x)) for x in column) + "\n")
    _write(sink, buffer.getvalue())


def save_node_dataset(dataset: NodeDataset, directory: str) -> List[str]:
    """Write edges, features (if any), labels and splits; return the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = [os.path.join(directory, name) for name in (EDGES_FILE, FEATURES_FILE,
                                                        LABELS_FILE, SPLITS_FILE)]
    save_edge_list(dataset.graph, paths[0])
    if dataset.features is not None:
        _save_matrix(paths[1], dataset.features)
    else:
        paths.pop(1)
    _save_matrix(os.path.join(directory, LABELS_FILE), dataset.labels, integer=True)
    save_splits(os.path.join(directory, SPLITS_FILE), dataset.train_idx, dataset.val_idx,
                dataset.test_idx)
    return paths


def _count_lines(path: str) -> int:
    with open(path, 'r', encoding='utf-8') as f:
        return sum(1 for line in f if line.strip())


def load_node_dataset(directory: str, task: str = "node-multiclass", relations: bool = False,
                      symmetrize: bool = False, renormalize_graph: bool = True) -> NodeDataset:
    """Load a dataset directory written by :func:`save_node_dataset`.

    The node count is the number of label lines.
    """
    labels_path = os.path.join(directory, LABELS_FILE)
    n = _count_lines(labels_path)
    graph = load_edge_list(os.path.join(directory, EDGES_FILE), n, relation_col=relations,
                           symmetrize=symmetrize)
    if renormalize_graph:
        graph = renormalize_any(graph)
    features = load_features(os.path.join(directory, FEATURES_FILE), n)
    labels = load_labels(labels_path, n)
    train_idx, val_idx, test_idx = load_splits(os.path.join(directory, SPLITS_FILE), n)
    return NodeDataset(graph, features, labels, train_idx, val_idx, test_idx, task=task)


def load_graph_dataset(directory: str, relations: bool = False, symmetrize: bool = True,
                       renormalize_graph: bool = True) -> GraphDataset:
    """Load ``graphs/<k>/{edges.tsv,features.txt}``, ``graph_labels.txt`` and ``splits.txt``.

    Split ids refer to graph indices k.
    """
    graph_labels_path = os.path.join(directory, GRAPH_LABELS_FILE)
    count = _count_lines(graph_labels_path)
    labels = load_labels(graph_labels_path, count)
    samples = []
    for k in range(count):
        graph_dir = os.path.join(directory, GRAPHS_DIR, str(k))
        features_path = os.path.join(graph_dir, FEATURES_FILE)
        n = _count_lines(features_path)
        graph = load_edge_list(os.path.join(graph_dir, EDGES_FILE), n, relation_col=relations,
                               symmetrize=symmetrize)
        if renormalize_graph:
            graph = renormalize_any(graph)
        samples.append(GraphSample(graph, _read_matrix(features_path, n, "features")))
    train_idx, val_idx, test_idx = load_splits(os.path.join(directory, SPLITS_FILE), count)
    return GraphDataset(samples, labels, train_idx, val_idx, test_idx)
