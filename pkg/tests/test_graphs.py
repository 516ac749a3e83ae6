import json

import numpy as np
import pytest

from grass.errors import DataError, ValidationError
from grass.graphs import (
    Graph,
    Permutation,
    batch_graphs,
    build_graph,
    file_sha256,
    graphs_equal,
    load_jsonl,
    permute_nodes,
    write_jsonl,
)


def path_graph(n: int) -> Graph:
    edges = [(i, i + 1) for i in range(n - 1)]
    return build_graph(n, edges, node_features=np.eye(n, 3), directed=False)


class TestBuildGraph:
    def test_undirected_input_symmetrized(self):
        g = build_graph(3, [(0, 1), (1, 2)], directed=False)
        assert g.num_edges == 4
        expected = np.array([[0, 1], [1, 0], [1, 2], [2, 1]])
        np.testing.assert_array_equal(g.edges, expected)

    def test_symmetrized_edge_features_duplicated(self):
        feats = np.array([[1.0, 2.0], [3.0, 4.0]])
        g = build_graph(3, [(0, 1), (1, 2)], edge_features=feats, directed=False)
        np.testing.assert_allclose(g.edge_features[0], g.edge_features[1])
        np.testing.assert_allclose(g.edge_features[2], [3.0, 4.0])

    def test_directed_input_kept_verbatim(self):
        g = build_graph(3, [(2, 0)], directed=True)
        np.testing.assert_array_equal(g.edges, [[2, 0]])

    def test_default_features_zero_width(self):
        g = build_graph(4, [(0, 1)])
        assert g.node_features.shape == (4, 0)
        assert g.edge_features.shape == (2, 0)

    def test_endpoint_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            build_graph(2, [(0, 2)])
        with pytest.raises(ValidationError):
            build_graph(2, [(-1, 0)])

    def test_feature_row_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            build_graph(3, [(0, 1)], node_features=np.zeros((2, 4)))
        with pytest.raises(ValidationError):
            build_graph(3, [(0, 1)], edge_features=np.zeros((3, 4)))

    def test_negative_num_nodes_rejected(self):
        with pytest.raises(ValidationError):
            build_graph(-1, [])

    def test_arrays_are_read_only(self):
        g = build_graph(2, [(0, 1)])
        with pytest.raises(ValueError):
            g.edges[0, 0] = 1

    def test_degrees(self):
        g = build_graph(3, [(0, 1), (0, 2)], directed=True)
        np.testing.assert_array_equal(g.out_degrees(), [2, 0, 0])
        np.testing.assert_array_equal(g.in_degrees(), [0, 1, 1])

    def test_undirected_pairs_deduplicates(self):
        g = build_graph(3, [(0, 1), (1, 0), (1, 2)], directed=True)
        np.testing.assert_array_equal(g.undirected_pairs(), [[0, 1], [1, 2]])


class TestBatching:
    def test_offsets_and_membership(self):
        a = path_graph(3)
        b = path_graph(2)
        batch = batch_graphs([a, b])
        np.testing.assert_array_equal(batch.member_offsets, [0, 3])
        assert batch.underlying.num_nodes == 5
        np.testing.assert_array_equal(batch.node_graph_ids, [0, 0, 0, 1, 1])
        # b's single undirected edge lands offset by 3
        np.testing.assert_array_equal(batch.underlying.edges[-2:], [[3, 4], [4, 3]])

    def test_edge_graph_ids(self):
        batch = batch_graphs([path_graph(2), path_graph(3)])
        np.testing.assert_array_equal(batch.edge_graph_ids, [0, 0, 1, 1, 1, 1])

    def test_empty_batch_rejected(self):
        with pytest.raises(ValidationError):
            batch_graphs([])

    def test_mismatched_feature_dims_rejected(self):
        a = build_graph(2, [(0, 1)], node_features=np.zeros((2, 3)))
        b = build_graph(2, [(0, 1)], node_features=np.zeros((2, 5)))
        with pytest.raises(ValidationError):
            batch_graphs([a, b])


class TestPermutation:
    def test_non_bijection_rejected(self):
        with pytest.raises(ValidationError):
            Permutation(np.array([0, 0, 1]))

    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = Permutation.random(9, rng)
            np.testing.assert_array_equal(
                p.mapping[p.inverse().mapping], np.arange(9)
            )

    def test_permute_nodes_preserves_structure(self):
        rng = np.random.default_rng(3)
        g = build_graph(
            5,
            [(0, 1), (1, 2), (2, 3), (3, 4)],
            node_features=rng.normal(size=(5, 2)),
        )
        p = Permutation.random(5, rng)
        h = permute_nodes(g, p)
        # old node i carries its features to slot p(i)
        for i in range(5):
            np.testing.assert_allclose(h.node_features[p.mapping[i]], g.node_features[i])
        # relabeled edge set matches the image of the original edge set
        np.testing.assert_array_equal(
            np.sort(np.sort(h.edges, axis=1), axis=0),
            np.sort(np.sort(p.mapping[g.edges], axis=1), axis=0),
        )

    def test_identity_is_noop(self):
        g = path_graph(4)
        assert graphs_equal(g, permute_nodes(g, Permutation.identity(4)))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            permute_nodes(path_graph(4), Permutation.identity(3))


class TestJsonl:
    def make_records(self):
        return [
            {
                "num_nodes": 3,
                "edges": [[0, 1], [1, 2]],
                "directed": False,
                "node_feat": [[0.5], [1.5], [2.5]],
                "edge_feat": [[1.0], [2.0]],
                "target": [0.25],
            },
            {
                "num_nodes": 1,
                "edges": [],
                "directed": False,
                "node_feat": [[9.0]],
                "edge_feat": [],
                "target": 4,
            },
        ]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, self.make_records())
        ds = load_jsonl(path)
        assert len(ds) == 2
        assert ds.graphs[0].num_edges == 4
        np.testing.assert_allclose(ds.targets[0], [0.25])
        assert ds.targets[1].dtype == np.int64
        assert int(ds.targets[1]) == 4

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(self.make_records()[0]) + "\n")
        with pytest.raises(DataError, match="schema"):
            load_jsonl(path)

    def test_wrong_schema_version_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"schema": "grass-jsonl/0"}\n')
        with pytest.raises(DataError, match="grass-jsonl/1"):
            load_jsonl(path)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        records = self.make_records()
        del records[1]["target"]
        write_jsonl(path, records)
        with pytest.raises(DataError, match="line 3"):
            load_jsonl(path)

    def test_out_of_range_edge_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        records = self.make_records()
        records[0]["edges"] = [[0, 7]]
        records[0]["edge_feat"] = [[1.0]]
        write_jsonl(path, records)
        with pytest.raises(DataError, match="line 2"):
            load_jsonl(path)

    def test_non_finite_feature_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        records = self.make_records()
        records[0]["node_feat"][0][0] = float("nan")
        with pytest.raises(ValueError):
            json.dumps(records[0], allow_nan=False)
        write_jsonl(path, records)
        with pytest.raises(DataError, match="non-finite"):
            load_jsonl(path)

    def test_missing_file_raises_data_error(self, tmp_path):
        with pytest.raises(DataError, match="nope.jsonl"):
            load_jsonl(tmp_path / "nope.jsonl")

    def test_sha256_is_stable(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, self.make_records())
        assert file_sha256(path) == file_sha256(path)
