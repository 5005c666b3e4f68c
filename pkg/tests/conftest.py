import numpy as np
import pytest

from graph_abstain.graph import Graph, build_knn_graph
from graph_abstain.layers import EncoderConfig


def random_graph(rng, num_nodes, num_features=4, num_classes=3, edge_prob=0.4, name='random'):
    edges = [
        (i, j)
        for i in range(num_nodes)
        for j in range(i + 1, num_nodes)
        if rng.random() < edge_prob
    ]
    features = rng.normal(size=(num_nodes, num_features))
    labels = np.arange(num_nodes) % num_classes
    return Graph.from_edge_list(np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels, num_classes,
                                name=name)


def clustered_table(rng, per_class=40, num_classes=3, num_features=5, spread=0.6):
    centers = rng.normal(scale=3.0, size=(num_classes, num_features))
    rows = []
    labels = []
    for k in range(num_classes):
        rows.append(centers[k] + spread * rng.normal(size=(per_class, num_features)))
        labels.extend([k] * per_class)
    return np.vstack(rows), np.array(labels, dtype=np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph(rng):
    return random_graph(rng, 6)


@pytest.fixture
def tabular_graph():
    table, labels = clustered_table(np.random.default_rng(7))
    return build_knn_graph(table, labels, 5, name='clusters')


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(hidden_features=3, num_heads=2, dropout_p=0.0)


@pytest.fixture
def fast_encoder():
    return EncoderConfig(hidden_features=4, num_heads=2, dropout_p=0.2)
