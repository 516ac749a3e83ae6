import numpy as np
import pytest
import torch

from grass.encoding import compute_entries
from grass.errors import DataError, ValidationError
from grass.graphs import Permutation, build_graph, permute_nodes
from grass.model import (
    GrassModel,
    ModelConfig,
    count_parameters,
    init_params,
    load_checkpoint,
    model_config_from_echo,
    pool,
    prepare_batch,
    save_checkpoint,
)
from grass.rewiring import RewireConfig, superimpose


def small_config(**overrides):
    base = dict(
        num_layers=2,
        width=4,
        k=3,
        node_in_dim=5,
        edge_in_dim=2,
        max_out=2,
        max_in=2,
        out_dim=1,
        task="graph-regression",
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_graphs(rng, count=3, node_dim=5, edge_dim=2):
    graphs, targets = [], []
    for _ in range(count):
        n = int(rng.integers(3, 7))
        edges = [(i, i + 1) for i in range(n - 1)]
        graphs.append(
            build_graph(
                n,
                edges,
                node_features=rng.normal(size=(n, node_dim)),
                edge_features=rng.normal(size=(len(edges), edge_dim)),
            )
        )
        targets.append(np.array([rng.normal()]))
    return graphs, targets


def make_batch(rng, cfg=None, r=2, count=3, task="graph-regression"):
    graphs, targets = toy_graphs(rng, count=count)
    entries = compute_entries(graphs, (cfg or small_config()).k)
    return prepare_batch(
        graphs, entries, targets, RewireConfig(r=r), rng=rng, task=task
    ), graphs, entries, targets


class TestModelConfig:
    def test_invalid_values_rejected(self):
        with pytest.raises(ValidationError):
            small_config(width=0)
        with pytest.raises(ValidationError):
            small_config(num_layers=0)
        with pytest.raises(ValidationError):
            small_config(task="link-prediction")
        with pytest.raises(ValidationError):
            small_config(pool_kind="max")


class TestPrepareBatch:
    def test_shapes_and_offsets(self):
        rng = np.random.default_rng(0)
        batch, graphs, _, _ = make_batch(rng)
        total_nodes = sum(g.num_nodes for g in graphs)
        assert batch.num_nodes == total_nodes
        assert batch.node_raw.shape == (total_nodes, 3)
        assert batch.edge_raw.shape[0] == batch.topology.num_edges
        assert batch.edge_origin.shape[0] == batch.topology.num_edges
        # added edges exist for r=2 on most samples
        assert batch.topology.heads.max() < total_nodes

    def test_r_zero_has_no_added_edges(self):
        rng = np.random.default_rng(1)
        batch, graphs, _, _ = make_batch(rng, r=0)
        assert int((batch.edge_origin == 1).sum()) == 0
        assert batch.topology.num_edges == sum(g.num_edges for g in graphs)

    def test_rewiring_replay(self):
        rng_a = np.random.default_rng(7)
        rng_b = np.random.default_rng(7)
        graphs, targets = toy_graphs(np.random.default_rng(2))
        entries = compute_entries(graphs, 3)
        a = prepare_batch(graphs, entries, targets, RewireConfig(r=2), rng=rng_a)
        b = prepare_batch(graphs, entries, targets, RewireConfig(r=2), rng=rng_b)
        torch.testing.assert_close(a.topology.heads, b.topology.heads)

    def test_alignment_validated(self):
        graphs, targets = toy_graphs(np.random.default_rng(3))
        entries = compute_entries(graphs, 3)
        with pytest.raises(ValidationError):
            prepare_batch(graphs[:2], entries, targets, RewireConfig(r=0))
        with pytest.raises(ValidationError):
            prepare_batch(graphs, entries[::-1][:3], targets, RewireConfig(r=0))

    def test_classification_targets_are_long(self):
        rng = np.random.default_rng(4)
        graphs, _ = toy_graphs(rng)
        entries = compute_entries(graphs, 3)
        targets = [np.array(1), np.array(0), np.array(1)]
        batch = prepare_batch(
            graphs, entries, targets, RewireConfig(r=0),
            task="graph-classification",
        )
        assert batch.targets.dtype == torch.int64
        assert batch.targets.shape == (3,)

    def test_node_targets_concatenate(self):
        rng = np.random.default_rng(5)
        graphs, _ = toy_graphs(rng)
        entries = compute_entries(graphs, 3)
        targets = [np.zeros(g.num_nodes, dtype=np.int64) for g in graphs]
        batch = prepare_batch(
            graphs, entries, targets, RewireConfig(r=0),
            task="node-classification",
        )
        assert batch.targets.shape == (batch.num_nodes,)


class TestPool:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        batch, _, _, _ = make_batch(rng)
        node_out = torch.randn(batch.num_nodes, 4)
        edge_out = torch.randn(batch.topology.num_edges, 4)
        pooled = pool(
            node_out, edge_out, batch.node_graph_ids, batch.edge_graph_ids,
            batch.edge_origin, batch.num_graphs,
        )
        for b in range(batch.num_graphs):
            nodes = node_out[batch.node_graph_ids == b]
            base = edge_out[(batch.edge_graph_ids == b) & (batch.edge_origin == 0)]
            added = edge_out[(batch.edge_graph_ids == b) & (batch.edge_origin == 1)]
            expected = torch.cat(
                [nodes.sum(0), base.sum(0),
                 added.sum(0) if added.shape[0] else torch.zeros(4)]
            )
            torch.testing.assert_close(pooled[b], expected, atol=1e-6, rtol=1e-6)

    def test_no_added_edges_zero_third_segment(self):
        rng = np.random.default_rng(7)
        batch, _, _, _ = make_batch(rng, r=0)
        node_out = torch.randn(batch.num_nodes, 4)
        edge_out = torch.randn(batch.topology.num_edges, 4)
        pooled = pool(
            node_out, edge_out, batch.node_graph_ids, batch.edge_graph_ids,
            batch.edge_origin, batch.num_graphs,
        )
        torch.testing.assert_close(pooled[:, 8:], torch.zeros(batch.num_graphs, 4))

    def test_single_node_graph(self):
        g = build_graph(1, [], node_features=np.ones((1, 5)),
                        edge_features=np.zeros((0, 2)))
        entries = compute_entries([g], 3)
        batch = prepare_batch([g], entries, [np.array([0.0])], RewireConfig(r=0))
        x = torch.tensor([[1.0, 2.0, 3.0, 4.0]])
        e = torch.zeros(0, 4)
        pooled = pool(
            x, e, batch.node_graph_ids, batch.edge_graph_ids,
            batch.edge_origin, 1,
        )
        torch.testing.assert_close(pooled[0, :4], x[0])
        torch.testing.assert_close(pooled[0, 4:], torch.zeros(8))

    def test_joint_kind_width(self):
        rng = np.random.default_rng(8)
        batch, _, _, _ = make_batch(rng)
        pooled = pool(
            torch.randn(batch.num_nodes, 4),
            torch.randn(batch.topology.num_edges, 4),
            batch.node_graph_ids, batch.edge_graph_ids,
            batch.edge_origin, batch.num_graphs, kind="joint",
        )
        assert pooled.shape == (batch.num_graphs, 8)


class TestGrassModel:
    def test_forward_shapes_graph_regression(self):
        rng = np.random.default_rng(9)
        batch, _, _, _ = make_batch(rng)
        model = GrassModel(small_config()).eval()
        out = model(batch)
        assert out.predictions.shape == (batch.num_graphs, 1)
        assert out.pooled.shape == (batch.num_graphs, 12)
        assert out.node_outputs.shape == (batch.num_nodes, 4)

    def test_forward_shapes_node_classification(self):
        rng = np.random.default_rng(10)
        graphs, _ = toy_graphs(rng)
        entries = compute_entries(graphs, 3)
        targets = [np.zeros(g.num_nodes, dtype=np.int64) for g in graphs]
        batch = prepare_batch(
            graphs, entries, targets, RewireConfig(r=0),
            task="node-classification",
        )
        model = GrassModel(
            small_config(task="node-classification", out_dim=3)
        ).eval()
        out = model(batch)
        assert out.pooled is None
        assert out.predictions.shape == (batch.num_nodes, 3)

    def test_zero_params_predict_head_bias(self):
        rng = np.random.default_rng(11)
        batch, _, _, _ = make_batch(rng)
        model = GrassModel(small_config(num_layers=1)).eval()
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            model.head.bias.fill_(0.75)
        out = model(batch)
        torch.testing.assert_close(
            out.predictions, torch.full((batch.num_graphs, 1), 0.75)
        )

    def test_eval_deterministic_without_randomness(self):
        rng = np.random.default_rng(12)
        batch, _, _, _ = make_batch(rng, r=0)
        model = GrassModel(small_config()).eval()
        a = model(batch, generator=torch.Generator().manual_seed(0))
        b = model(batch, generator=torch.Generator().manual_seed(999))
        torch.testing.assert_close(a.predictions, b.predictions)

    def test_orientation_parity(self):
        model = GrassModel(small_config(num_layers=5))
        schedule = [model.orientation_flipped(i) for i in range(1, 6)]
        assert schedule == [False, True, False, True, False]

    def test_edge_flip_disabled(self):
        model = GrassModel(small_config(edge_flip_enabled=False))
        assert not any(model.orientation_flipped(i) for i in range(1, 3))

    def test_ablation_configs_run(self):
        rng = np.random.default_rng(13)
        for overrides in (
            dict(rrwp_enabled=False),
            dict(norm_kind="batchnorm"),
            dict(norm_kind="none"),
            dict(pool_kind="joint"),
            dict(edge_flip_enabled=False),
            dict(log_length_scaling=True),
            dict(head_hidden=8),
        ):
            batch, _, _, _ = make_batch(rng)
            out = GrassModel(small_config(**overrides)).eval()(batch)
            assert torch.isfinite(out.predictions).all()

    def test_pooled_invariant_under_node_relabeling(self):
        """Same graph, same rewiring, permuted labels: same pooled output."""
        rng = np.random.default_rng(14)
        graphs, targets = toy_graphs(rng, count=1)
        entries = compute_entries(graphs, 3)
        base = prepare_batch(
            graphs, entries, targets, RewireConfig(r=2),
            rng=np.random.default_rng(50),
        )
        h = base.rewired[0]
        p = Permutation.random(graphs[0].num_nodes, rng)
        permuted_graph = permute_nodes(graphs[0], p)
        pairs = np.sort(p.mapping[h.added_edges[0::2]], axis=1)
        h_perm = superimpose(permuted_graph, pairs)
        perm_entries = compute_entries([permuted_graph], 3)
        perm = prepare_batch(
            [permuted_graph], perm_entries, targets, RewireConfig(r=2),
            fixed_rewired=[h_perm],
        )
        model = GrassModel(small_config(dropkey_rate=0.0)).eval()
        out_a = model(base)
        out_b = model(perm)
        torch.testing.assert_close(
            out_a.pooled, out_b.pooled, atol=1e-5, rtol=1e-5
        )


class TestInitParams:
    def test_same_seed_identical(self):
        cfg = small_config()
        a = init_params(GrassModel(cfg), torch.Generator().manual_seed(5))
        b = init_params(GrassModel(cfg), torch.Generator().manual_seed(5))
        for pa, pb in zip(a.parameters(), b.parameters()):
            torch.testing.assert_close(pa, pb)

    def test_different_seed_differs(self):
        cfg = small_config()
        a = init_params(GrassModel(cfg), torch.Generator().manual_seed(5))
        b = init_params(GrassModel(cfg), torch.Generator().manual_seed(6))
        assert any(
            not torch.allclose(pa, pb)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_biases_zero_and_outputs_scaled(self):
        cfg = small_config(num_layers=8)
        model = init_params(GrassModel(cfg), torch.Generator().manual_seed(0))
        layer = model.layers[0]
        assert torch.all(layer.tail_tail.bias == 0)
        bound = cfg.width ** -0.5
        assert layer.tail_tail.weight.abs().max() <= bound
        assert layer.node_out.weight.abs().max() <= bound * model.beta + 1e-12
        assert torch.all(layer.pnv_node.gain == 1)

    def test_parameter_count_formula(self):
        cfg = small_config()
        model = GrassModel(cfg)
        w = cfg.width
        per_layer = 9 * (w * w + w) + 2 * w + 2 * w
        expected = (
            (cfg.node_in_dim * w + w)      # node input projection
            + (cfg.edge_in_dim * w + w)    # edge input projection
            + w                            # added-edge embedding
            + 2 * (2 * cfg.k)              # rrwp batchnorm affine pairs
            + 2 * (cfg.k * w + w)          # rrwp projections
            + 9 * w                        # 3x3 degree table
            + cfg.num_layers * per_layer
            + (3 * w * 1 + 1)              # linear head on 3n pooled vector
        )
        assert count_parameters(model) == expected


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        batch, _, _, _ = make_batch(rng, r=0)
        cfg = small_config()
        model = init_params(GrassModel(cfg), torch.Generator().manual_seed(1))
        model.eval()
        expected = model(batch).predictions

        path = tmp_path / "model.grss"
        echo = {"note": "test", "width": cfg.width}
        save_checkpoint(path, echo, model)
        loaded_echo, state = load_checkpoint(path)
        assert loaded_echo == echo

        fresh = GrassModel(cfg)
        fresh.load_state_dict(state)
        fresh.eval()
        torch.testing.assert_close(fresh(batch).predictions, expected)

    def test_corrupt_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "model.grss"
        model = GrassModel(small_config())
        save_checkpoint(path, {}, model)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0x55
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="checksum"):
            load_checkpoint(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "missing.grss")

    def test_config_echo_reconstruction(self):
        cfg = small_config(norm_kind="batchnorm", head_hidden=8)
        echo = dict(cfg.__dict__)
        echo["extra_key"] = "ignored"
        rebuilt = model_config_from_echo(echo)
        assert rebuilt == cfg
