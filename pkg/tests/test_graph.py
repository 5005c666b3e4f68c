import json

import numpy as np
import pytest

from graph_abstain.errors import CapacityError, DataError, DimensionError, EmptyDatasetError, ParameterError, ParseError
from graph_abstain.graph import (
    SPLIT_TABULAR,
    Graph,
    SplitSpec,
    build_knn_graph,
    dataset_manifest,
    load_citation_dataset,
    load_graph,
    load_tabular_csv,
    make_split,
    make_standard_split,
    make_tabular_split,
    resolve_dataset,
    save_graph,
    standardize_columns
)

from conftest import random_graph


def write_citation_files(tmp_path, content, cites):
    content_path = tmp_path / 'toy.content'
    cites_path = tmp_path / 'toy.cites'
    content_path.write_text(content, encoding='utf-8')
    cites_path.write_text(cites, encoding='utf-8')
    return content_path, cites_path


def test_two_node_citation_is_symmetric(tmp_path):
    content, cites = write_citation_files(tmp_path, 'a 1 0 x\nb 0 1 y\n', 'a b\nb a\n')
    g = load_citation_dataset(content, cites)

    g.check_invariants()
    assert g.num_nodes == 2
    assert g.num_classes == 2
    assert list(g.degrees) == [2, 2]
    assert list(g.neighbors(0)) == [0, 1]
    assert g.num_edges == 1


def test_empty_cites_leaves_self_loops_only(tmp_path):
    content, cites = write_citation_files(tmp_path, 'a 1 x\nb 2 x\nc 3 y\n', '')
    g = load_citation_dataset(content, cites)

    for node in range(3):
        assert list(g.neighbors(node)) == [node]
    assert g.num_edges == 0


def test_labels_follow_first_appearance(tmp_path):
    content, cites = write_citation_files(tmp_path, 'n1 1 zeta\nn2 1 alpha\nn3 1 zeta\n', '')
    g = load_citation_dataset(content, cites)

    assert g.label_names == ('zeta', 'alpha')
    assert list(g.labels) == [0, 1, 0]
    assert dataset_manifest(g)['label_map'] == {'zeta': 0, 'alpha': 1}


def test_unknown_citations_are_dropped_and_counted(tmp_path):
    content, cites = write_citation_files(tmp_path, 'a 1 x\nb 1 y\n', 'a b\na ghost\nghost b\n')
    g = load_citation_dataset(content, cites)

    assert g.dropped_citations == 2
    assert g.num_edges == 1


def test_features_are_row_normalized(tmp_path):
    content, cites = write_citation_files(tmp_path, 'a 1 3 x\nb 0 0 y\n', '')
    g = load_citation_dataset(content, cites)
    assert np.allclose(g.features[0], [0.25, 0.75])
    assert np.allclose(g.features[1], [0.0, 0.0])

    raw = load_citation_dataset(content, cites, row_normalize=False)
    assert np.array_equal(raw.features[0], [1.0, 3.0])


def test_malformed_line_reports_line_number(tmp_path):
    content, cites = write_citation_files(tmp_path, 'a 1 x\nb 1 z y\n', '')
    with pytest.raises(ParseError) as exc_info:
        load_citation_dataset(content, cites)
    assert exc_info.value.line_number == 2


def test_inconsistent_width_is_a_dimension_error(tmp_path):
    content, cites = write_citation_files(tmp_path, 'a 1 2 x\nb 1 y\n', '')
    with pytest.raises(DimensionError):
        load_citation_dataset(content, cites)


def test_empty_content_file(tmp_path):
    content, cites = write_citation_files(tmp_path, '\n', '')
    with pytest.raises(EmptyDatasetError):
        load_citation_dataset(content, cites)


def test_edge_list_round_trip(rng):
    g = random_graph(rng, 12)
    g.check_invariants()

    rebuilt = Graph.from_edge_list(g.to_edge_list(), g.features, g.labels, g.num_classes)
    assert np.array_equal(rebuilt.csr_offsets, g.csr_offsets)
    assert np.array_equal(rebuilt.csr_neighbors, g.csr_neighbors)


def test_graph_save_load_round_trip(tmp_path, rng):
    g = random_graph(rng, 8, name='saved')
    save_graph(g, tmp_path / 'graph.npz')
    loaded = load_graph(tmp_path / 'graph.npz')

    assert np.array_equal(loaded.csr_neighbors, g.csr_neighbors)
    assert np.array_equal(loaded.features, g.features)
    assert loaded.label_names == g.label_names
    assert loaded.name == 'saved'
    assert resolve_dataset(tmp_path).num_nodes == 8


def test_standard_split_sizes_and_determinism(rng):
    g = random_graph(rng, 60, num_classes=3, edge_prob=0.05)
    split = make_standard_split(g, seed=3, per_class=5, num_val=10, num_test=20)

    assert split.sizes == (15, 10, 20)
    for k in range(3):
        assert np.count_nonzero(g.labels[split.train_idx] == k) == 5
    assert split == make_standard_split(g, seed=3, per_class=5, num_val=10, num_test=20)
    assert split != make_standard_split(g, seed=4, per_class=5, num_val=10, num_test=20)


def test_standard_split_capacity_error_names_class():
    labels = np.array([0] * 19 + [1] * 30)
    g = Graph.from_edge_list(np.empty((0, 2)), np.ones((49, 2)), labels, 2)
    with pytest.raises(CapacityError) as exc_info:
        make_standard_split(g, seed=0)
    assert exc_info.value.label == 0


def test_split_save_load_is_identical(tmp_path):
    split = make_tabular_split(100, seed=5)
    split.save(tmp_path / 'split.npz')
    assert SplitSpec.load(tmp_path / 'split.npz') == split


def test_overlapping_split_rejected():
    with pytest.raises(DataError):
        SplitSpec([0, 1], [1], [2])


@pytest.mark.parametrize(('n', 'sizes'), [(1000, (765, 85, 150)), (20, (16, 1, 3))])
def test_tabular_split_sizes(n, sizes):
    split = make_tabular_split(n, seed=0)
    assert split.sizes == sizes
    assert split == make_tabular_split(n, seed=0)


def test_tabular_split_needs_twenty_rows():
    with pytest.raises(ParameterError):
        make_tabular_split(19, seed=0)


def test_knn_collinear_points():
    table = np.array([[0.0], [1.0], [10.0]])
    g = build_knn_graph(table, np.array([0, 0, 1]), k=1)

    g.check_invariants()
    assert list(g.neighbors(0)) == [0, 1]
    assert list(g.neighbors(1)) == [0, 1, 2]
    assert list(g.neighbors(2)) == [1, 2]
    assert g.split_kind == SPLIT_TABULAR


def test_knn_identical_points_and_constant_column():
    table = np.array([[1.0, 5.0], [1.0, 5.0], [2.0, 5.0]])
    g = build_knn_graph(table, np.array([0, 1, 1]), k=1)

    assert 1 in g.neighbors(0)
    assert not np.isnan(g.features).any()
    assert np.array_equal(g.features[:, 1], np.zeros(3))


def test_knn_complete_graph(rng):
    n = 7
    g = build_knn_graph(rng.normal(size=(n, 3)), np.zeros(n, dtype=np.int64), k=n - 1)
    assert np.array_equal(g.degrees, np.full(n, n))


def test_knn_rejects_bad_input(rng):
    with pytest.raises(ParameterError):
        build_knn_graph(rng.normal(size=(4, 2)), np.zeros(4, dtype=np.int64), k=4)
    table = rng.normal(size=(4, 2))
    table[1, 1] = np.nan
    with pytest.raises(DataError):
        build_knn_graph(table, np.zeros(4, dtype=np.int64), k=1)


def test_standardized_columns(rng):
    table = rng.normal(loc=4.0, scale=3.0, size=(50, 3))
    result = standardize_columns(table)
    assert np.allclose(result.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(result.std(axis=0, ddof=1), 1.0, atol=1e-9)


def test_tabular_csv(tmp_path):
    path = tmp_path / 'table.csv'
    path.write_text('a,b,label\n1,2,yes\n3,4,no\n5,6,yes\n', encoding='utf-8')
    table, labels, names = load_tabular_csv(path)

    assert table.shape == (3, 2)
    assert list(labels) == [0, 1, 0]
    assert names == ['yes', 'no']


def test_tabular_csv_non_numeric(tmp_path):
    path = tmp_path / 'table.csv'
    path.write_text('a,label\nfoo,yes\n', encoding='utf-8')
    with pytest.raises(DataError):
        load_tabular_csv(path)


def test_make_split_dispatches_on_kind(tabular_graph):
    split = make_split(tabular_graph, seed=1)
    n = tabular_graph.num_nodes
    assert sum(split.sizes) == n
    assert split.sizes[2] == n * 15 // 100


def test_dataset_manifest_is_json(tabular_graph):
    manifest = dataset_manifest(tabular_graph)
    assert json.loads(json.dumps(manifest))['K'] == 3
