import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse
from scipy.spatial.distance import cdist

from .errors import CapacityError, DataError, DimensionError, EmptyDatasetError, ParameterError, ParseError
from .utils import get_datasets_dir


log = logging.getLogger('graph')

SPLIT_STANDARD = 'standard'
SPLIT_TABULAR = 'tabular'

GRAPH_FILE = 'graph.npz'
MANIFEST_FILE = 'manifest.json'


def _frozen(values, dtype):
    array = np.array(values, dtype=dtype)
    array.flags.writeable = False
    return array


def _build_csr(num_nodes, rows, cols):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    loops = np.arange(num_nodes, dtype=np.int64)
    all_rows = np.concatenate([rows, cols, loops])
    all_cols = np.concatenate([cols, rows, loops])
    data = np.ones(len(all_rows), dtype=np.float64)
    adjacency = scipy.sparse.coo_matrix((data, (all_rows, all_cols)), shape=(num_nodes, num_nodes)).tocsr()
    adjacency.sum_duplicates()
    adjacency.sort_indices()
    return adjacency.indptr.astype(np.int64), adjacency.indices.astype(np.int64)


class Graph:

    def __init__(
            self,
            csr_offsets,
            csr_neighbors,
            features,
            labels,
            num_classes,
            label_names=None,
            name=None,
            split_kind=SPLIT_STANDARD,
            dropped_citations=0
        ):
        self._csr_offsets = _frozen(csr_offsets, np.int64)
        self._csr_neighbors = _frozen(csr_neighbors, np.int64)
        self._features = _frozen(features, np.float64)
        self._labels = _frozen(labels, np.int64)
        self._num_classes = int(num_classes)
        self._label_names = tuple(label_names) if label_names is not None else tuple(
            str(k) for k in range(self._num_classes)
        )
        self._name = name
        self._split_kind = split_kind
        self._dropped_citations = int(dropped_citations)

        if self._features.ndim != 2:
            raise DimensionError(f'Features must be a matrix, got {self._features.ndim} dimensions')
        num_nodes = self._features.shape[0]
        if self._csr_offsets.shape != (num_nodes + 1,):
            raise DimensionError(f'Expected {num_nodes + 1} CSR offsets, got {self._csr_offsets.shape[0]}')
        if self._labels.shape != (num_nodes,):
            raise DimensionError(f'Expected {num_nodes} labels, got {self._labels.shape[0]}')
        if self._csr_offsets[-1] != len(self._csr_neighbors):
            raise DimensionError('Last CSR offset does not match the neighbor count')
        if len(self._label_names) != self._num_classes:
            raise DimensionError(f'Expected {self._num_classes} label names, got {len(self._label_names)}')

        self._edge_rows = None
        self._gcn_weights = None

    def __repr__(self):
        return (
            f'Graph(name={self._name!r}, num_nodes={self.num_nodes}, num_edges={self.num_edges}, '
            f'num_features={self.num_features}, num_classes={self._num_classes})'
        )

    @property
    def num_nodes(self):
        return self._features.shape[0]

    @property
    def num_features(self):
        return self._features.shape[1]

    @property
    def num_classes(self):
        return self._num_classes

    @property
    def num_edges(self):
        # Undirected edges, self-loops excluded
        return (len(self._csr_neighbors) - self.num_nodes) // 2

    @property
    def csr_offsets(self):
        return self._csr_offsets

    @property
    def csr_neighbors(self):
        return self._csr_neighbors

    @property
    def features(self):
        return self._features

    @property
    def labels(self):
        return self._labels

    @property
    def label_names(self):
        return self._label_names

    @property
    def name(self):
        return self._name

    @property
    def split_kind(self):
        return self._split_kind

    @property
    def dropped_citations(self):
        return self._dropped_citations

    @property
    def degrees(self):
        return np.diff(self._csr_offsets)

    @property
    def edge_rows(self):
        if self._edge_rows is None:
            rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees)
            rows.flags.writeable = False
            self._edge_rows = rows
        return self._edge_rows

    @property
    def gcn_edge_weights(self):
        # D^-1/2 (A+I) D^-1/2 per stored edge, self-loops already counted in the degree
        if self._gcn_weights is None:
            inv_sqrt = 1.0 / np.sqrt(self.degrees.astype(np.float64))
            weights = inv_sqrt[self.edge_rows] * inv_sqrt[self._csr_neighbors]
            weights.flags.writeable = False
            self._gcn_weights = weights
        return self._gcn_weights

    def neighbors(self, node):
        return self._csr_neighbors[self._csr_offsets[node]:self._csr_offsets[node + 1]]

    def adjacency(self):
        data = np.ones(len(self._csr_neighbors), dtype=np.float64)
        return scipy.sparse.csr_matrix(
            (data, self._csr_neighbors, self._csr_offsets),
            shape=(self.num_nodes, self.num_nodes)
        )

    def to_edge_list(self):
        return np.stack([self.edge_rows, self._csr_neighbors], axis=1)

    @classmethod
    def from_edge_list(cls, edges, features, labels, num_classes, **kwargs):
        features = np.asarray(features, dtype=np.float64)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        num_nodes = features.shape[0]
        if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
            raise DimensionError(f'Edge endpoints must be in [0, {num_nodes})')
        offsets, neighbors = _build_csr(num_nodes, edges[:, 0], edges[:, 1])
        return cls(offsets, neighbors, features, labels, num_classes, **kwargs)

    def check_invariants(self):
        offsets = self._csr_offsets
        if np.any(np.diff(offsets) < 0):
            raise DataError('CSR offsets are not non-decreasing')
        if offsets[-1] != len(self._csr_neighbors):
            raise DataError('Last CSR offset does not match the neighbor count')

        rows = self.edge_rows
        neighbors = self._csr_neighbors
        if len(neighbors) and (neighbors.min() < 0 or neighbors.max() >= self.num_nodes):
            raise DataError('Neighbor index out of range')

        loop_counts = np.bincount(rows[rows == neighbors], minlength=self.num_nodes)
        if np.any(loop_counts != 1):
            node = int(np.flatnonzero(loop_counts != 1)[0])
            raise DataError(f'Node {node} has {loop_counts[node]} self-loops, expected exactly one')

        adjacency = self.adjacency()
        if (adjacency != adjacency.T).nnz != 0:
            raise DataError('Adjacency is not symmetric')

        if np.any(self._labels >= self._num_classes) or np.any(self._labels < -1):
            raise DataError(f'Labels must be in [0, {self._num_classes}) or -1 for unlabeled nodes')


class SplitSpec:

    def __init__(self, train_idx, val_idx, test_idx):
        self._train_idx = _frozen(train_idx, np.int64)
        self._val_idx = _frozen(val_idx, np.int64)
        self._test_idx = _frozen(test_idx, np.int64)

        union = np.concatenate([self._train_idx, self._val_idx, self._test_idx])
        if len(np.unique(union)) != len(union):
            raise DataError('Split index sets are not pairwise disjoint')

    def __repr__(self):
        return f'SplitSpec(train={len(self._train_idx)}, val={len(self._val_idx)}, test={len(self._test_idx)})'

    def __eq__(self, other):
        if not isinstance(other, SplitSpec):
            return NotImplemented
        return (
            np.array_equal(self._train_idx, other.train_idx)
            and np.array_equal(self._val_idx, other.val_idx)
            and np.array_equal(self._test_idx, other.test_idx)
        )

    __hash__ = None

    @property
    def train_idx(self):
        return self._train_idx

    @property
    def val_idx(self):
        return self._val_idx

    @property
    def test_idx(self):
        return self._test_idx

    @property
    def sizes(self):
        return len(self._train_idx), len(self._val_idx), len(self._test_idx)

    def check(self, g):
        for name, idx in (('train', self._train_idx), ('val', self._val_idx), ('test', self._test_idx)):
            if len(idx) and (idx.min() < 0 or idx.max() >= g.num_nodes):
                raise DataError(f'{name} indices out of range for a graph with {g.num_nodes} nodes')
            labels = g.labels[idx]
            if np.any(labels < 0) or np.any(labels >= g.num_classes):
                raise DataError(f'{name} split references unlabeled nodes')

    def save(self, path):
        np.savez(path, train_idx=self._train_idx, val_idx=self._val_idx, test_idx=self._test_idx)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            return cls(data['train_idx'], data['val_idx'], data['test_idx'])


def load_citation_dataset(content_path, cites_path, row_normalize=True, name=None):
    content_path = Path(content_path)
    cites_path = Path(cites_path)

    node_index = {}
    label_map = {}
    feature_rows = []
    label_ids = []
    width = None

    with content_path.open('r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 3:
                raise ParseError('expected <node_id> <features...> <label>', content_path, line_number)

            node_id, *values, label_name = tokens
            if node_id in node_index:
                raise ParseError(f"duplicate node id '{node_id}'", content_path, line_number)
            try:
                row = [float(value) for value in values]
            except ValueError as e:
                raise ParseError(f'non-numeric feature value ({e})', content_path, line_number) from e

            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DimensionError(
                    f'{content_path}:{line_number}: expected {width} features, found {len(row)}'
                )

            node_index[node_id] = len(node_index)
            feature_rows.append(row)
            label_ids.append(label_map.setdefault(label_name, len(label_map)))

    if not node_index:
        raise EmptyDatasetError(f"No nodes found in '{content_path}'")

    rows = []
    cols = []
    dropped = 0
    with cites_path.open('r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 2:
                raise ParseError('expected <citing_id> <cited_id>', cites_path, line_number)
            citing = node_index.get(tokens[0])
            cited = node_index.get(tokens[1])
            if citing is None or cited is None:
                dropped += 1
                continue
            rows.append(citing)
            cols.append(cited)

    if dropped:
        log.warning(f"Dropped {dropped} citations referencing unknown node ids in '{cites_path}'")

    features = np.array(feature_rows, dtype=np.float64)
    if row_normalize:
        features = row_normalize_features(features)

    offsets, neighbors = _build_csr(len(node_index), rows, cols)
    g = Graph(
        offsets,
        neighbors,
        features,
        np.array(label_ids, dtype=np.int64),
        len(label_map),
        label_names=list(label_map),
        name=name or content_path.stem,
        split_kind=SPLIT_STANDARD,
        dropped_citations=dropped
    )
    log.info(f'Loaded {g}')
    return g


def row_normalize_features(features):
    sums = features.sum(axis=1, keepdims=True)
    safe = np.where(sums == 0, 1.0, sums)
    return features / safe


def standardize_columns(table):
    table = np.asarray(table, dtype=np.float64)
    result = np.zeros_like(table)
    if table.shape[0] < 2:
        return result
    constant = np.ptp(table, axis=0) == 0
    mean = table.mean(axis=0)
    std = table.std(axis=0, ddof=1)
    varying = ~constant
    result[:, varying] = (table[:, varying] - mean[varying]) / std[varying]
    return result


def build_knn_graph(table, labels, k, name=None, label_names=None):
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2:
        raise DimensionError(f'Feature table must be a matrix, got {table.ndim} dimensions')
    if np.isnan(table).any():
        raise DataError('Feature table contains NaN values')
    if not np.isfinite(table).all():
        raise DataError('Feature table contains infinite values')

    n = table.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f'Expected {n} labels, got {labels.shape[0]}')
    if k < 1 or k >= n:
        raise ParameterError(f'k must be in [1, {n - 1}] for {n} points, got {k}')

    features = standardize_columns(table)
    distances = cdist(features, features, metric='euclidean')
    np.fill_diagonal(distances, np.inf)

    # Stable sort keeps the lower node index first among equal distances
    nearest = np.argsort(distances, axis=1, kind='stable')[:, :k]
    rows = np.repeat(np.arange(n, dtype=np.int64), k)
    cols = nearest.ravel()

    num_classes = int(labels.max()) + 1 if n else 0
    offsets, neighbors = _build_csr(n, rows, cols)
    g = Graph(
        offsets,
        neighbors,
        features,
        labels,
        num_classes,
        label_names=label_names,
        name=name,
        split_kind=SPLIT_TABULAR
    )
    log.info(f'Built {k}-NN {g}')
    return g


def load_tabular_csv(path):
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except OSError as e:
        raise OSError(e.errno, 'Failed to read table', str(path)) from e
    except pd.errors.EmptyDataError:
        raise EmptyDatasetError(f"'{path}' is empty") from None
    if 'label' not in frame.columns:
        raise DataError(f"'{path}' has no 'label' column")
    if frame.empty:
        raise EmptyDatasetError(f"No rows found in '{path}'")

    codes, uniques = pd.factorize(frame['label'], sort=False)
    if np.any(codes < 0):
        raise DataError(f"'{path}' has rows with a missing label")

    feature_frame = frame.drop(columns='label')
    try:
        table = feature_frame.to_numpy(dtype=np.float64)
    except ValueError as e:
        raise DataError(f"'{path}' has non-numeric feature values: {e}") from e

    return table, codes.astype(np.int64), [str(value) for value in uniques]


def make_standard_split(g, seed, per_class=20, num_val=500, num_test=1000):
    rng = np.random.default_rng(seed)
    labels = g.labels

    train = []
    for k in range(g.num_classes):
        members = np.flatnonzero(labels == k)
        if len(members) < per_class:
            raise CapacityError(
                f"Class {k} ('{g.label_names[k]}') has {len(members)} labeled nodes, {per_class} required",
                label=k
            )
        train.append(rng.choice(members, size=per_class, replace=False))
    train = np.concatenate(train) if train else np.array([], dtype=np.int64)

    labeled = np.flatnonzero(labels >= 0)
    required = per_class * g.num_classes + num_val + num_test
    if len(labeled) < required:
        raise CapacityError(f'{len(labeled)} labeled nodes available, {required} required')

    remainder = rng.permutation(np.setdiff1d(labeled, train))
    val = remainder[:num_val]
    test = remainder[num_val:num_val + num_test]
    return SplitSpec(np.sort(train), np.sort(val), np.sort(test))


def make_tabular_split(n, seed):
    if n < 20:
        raise ParameterError(f'Tabular split needs at least 20 rows, got {n}')
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    num_test = n * 15 // 100
    num_val = (n - num_test) * 10 // 100
    test = order[:num_test]
    val = order[num_test:num_test + num_val]
    train = order[num_test + num_val:]
    return SplitSpec(np.sort(train), np.sort(val), np.sort(test))


def make_split(g, seed):
    if g.split_kind == SPLIT_TABULAR:
        return make_tabular_split(g.num_nodes, seed)
    return make_standard_split(g, seed)


def dataset_manifest(g):
    return {
        'name': g.name,
        'num_nodes': g.num_nodes,
        'num_edges': g.num_edges,
        'K': g.num_classes,
        'F': g.num_features,
        'label_map': {name: index for index, name in enumerate(g.label_names)},
        'dropped_citations': g.dropped_citations,
        'split_kind': g.split_kind
    }


def write_dataset_manifest(g, path):
    Path(path).write_text(json.dumps(dataset_manifest(g), indent=2), encoding='utf-8')


def save_graph(g, path):
    np.savez(
        path,
        csr_offsets=g.csr_offsets,
        csr_neighbors=g.csr_neighbors,
        features=g.features,
        labels=g.labels,
        num_classes=np.array(g.num_classes),
        label_names=np.array(g.label_names, dtype=str),
        name=np.array(g.name or ''),
        split_kind=np.array(g.split_kind),
        dropped_citations=np.array(g.dropped_citations)
    )


def load_graph(path):
    with np.load(path, allow_pickle=False) as data:
        return Graph(
            data['csr_offsets'],
            data['csr_neighbors'],
            data['features'],
            data['labels'],
            int(data['num_classes']),
            label_names=[str(name) for name in data['label_names']],
            name=str(data['name']) or None,
            split_kind=str(data['split_kind']),
            dropped_citations=int(data['dropped_citations'])
        )


def resolve_dataset(dataset):
    path = Path(dataset)
    if path.suffix == '.npz' and path.is_file():
        return load_graph(path)

    if path.is_dir():
        if (path / GRAPH_FILE).is_file():
            return load_graph(path / GRAPH_FILE)
        contents = sorted(path.glob('*.content'))
        cites = sorted(path.glob('*.cites'))
        if len(contents) == 1 and len(cites) == 1:
            return load_citation_dataset(contents[0], cites[0], name=path.name)
        raise DataError(f"'{path}' holds neither {GRAPH_FILE} nor a single .content/.cites pair")

    named = get_datasets_dir() / str(dataset) / GRAPH_FILE
    if named.is_file():
        return load_graph(named)

    raise DataError(f"Unknown dataset '{dataset}'")
