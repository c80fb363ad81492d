"""Training and sampling loops, tree generation, graph hashing, metrics."""

import numpy as np
import pytest

from vbfn import pipeline
from vbfn.config import parse_config
from vbfn.flow import beta_at
from vbfn.graphs import DatasetMeta, make_sample
from vbfn.pipeline import (Checkpoint, OperatorCache, PrecisionSettings,
                           evaluate_vun, fit_params, gen_random_trees,
                           gen_tree_dataset, is_valid_tree, sample_graphs,
                           wl_hash)


def _cfg(*extra):
    base = ["train.steps = 40", "train.batch_size = 8", "train.lr = 3e-3",
            "predictor.hidden_width = 8", "predictor.time_embed_dim = 4",
            "schedule.T = 20"]
    return parse_config(None, base + list(extra))


def _fit(dataset, cfg, seed=0, steps=None, start=None):
    return fit_params(
        list(dataset), dataset.meta, schedule=cfg.schedule,
        precision=cfg.precision, solver_cfg=cfg.solver,
        pred_config=cfg.predictor, seed=seed,
        steps=cfg.train.steps if steps is None else steps,
        batch_size=cfg.train.batch_size,
        lr=cfg.train.lr, weight_decay=cfg.train.weight_decay,
        clip_norm=cfg.train.clip_norm, start=start)


def _sample(result, dataset, cfg, seed=0, count=8):
    return sample_graphs(
        result.checkpoint.params, dataset.meta, schedule=cfg.schedule,
        precision=cfg.precision, solver_cfg=cfg.solver,
        pred_config=cfg.predictor, histogram=result.checkpoint.histogram,
        count=count, seed=seed, steps=cfg.schedule.steps)


class TestOperatorCache:
    def test_masks_follow_node_count(self):
        meta = DatasetMeta(k_node=1, k_edge=2, max_n=5)
        cache = OperatorCache(PrecisionSettings(), meta)
        ops = cache.get(3)
        assert ops.node.mask.sum() == 3
        assert ops.edge.mask.sum() == 3  # pairs among 3 valid nodes
        assert ops.edge.dim == 10  # all padded upper-triangle slots

    def test_operators_cached(self):
        meta = DatasetMeta(k_node=1, k_edge=2, max_n=4)
        cache = OperatorCache(PrecisionSettings(), meta)
        assert cache.get(3) is cache.get(3)

    def test_priors_spd_under_partial_masks(self):
        from vbfn.solver import cholesky_factor
        meta = DatasetMeta(k_node=1, k_edge=2, max_n=6)
        cache = OperatorCache(PrecisionSettings(), meta)
        for n in range(1, 7):
            ops = cache.get(n)
            cholesky_factor(ops.node.prior)
            cholesky_factor(ops.edge.prior)


class TestTrees:
    def test_two_nodes_unique_tree(self):
        for tree in gen_random_trees(5, 2, seed=0):
            assert tree.edge_list() == [(0, 1, 2)]

    def test_eight_nodes_edge_count(self):
        for tree in gen_random_trees(20, 8, seed=1):
            assert len(tree.edge_list()) == 7
            assert is_valid_tree(tree)

    def test_uniform_over_labeled_trees(self):
        # Cayley: 4^2 = 16 labeled trees on 4 nodes
        counts = {}
        draws = 10_000
        for tree in gen_random_trees(draws, 4, seed=2):
            counts[wl_hash(tree) + str(sorted(tree.edge_list()))] = \
                counts.get(wl_hash(tree) + str(sorted(tree.edge_list())), 0) + 1
        assert len(counts) == 16
        p = 1 / 16
        stderr = np.sqrt(p * (1 - p) / draws)
        for c in counts.values():
            assert abs(c / draws - p) <= 4 * stderr

    def test_dataset_sizes_and_meta(self):
        ds = gen_tree_dataset(30, 4, 7, seed=3)
        assert ds.meta.max_n == 7 and ds.meta.k_edge == 2
        sizes = {s.n for s in ds}
        assert sizes <= set(range(4, 8))
        assert all(is_valid_tree(s) for s in ds)


class TestTreeValidity:
    def test_path_is_tree(self):
        s = make_sample(3, 3, node_classes=[1] * 3,
                        edges=[(0, 1, 2), (1, 2, 2)])
        assert is_valid_tree(s)

    def test_cycle_is_not(self):
        s = make_sample(3, 3, node_classes=[1] * 3,
                        edges=[(0, 1, 2), (1, 2, 2), (0, 2, 2)])
        assert not is_valid_tree(s)

    def test_disconnected_right_count_is_not(self):
        s = make_sample(4, 4, node_classes=[1] * 4,
                        edges=[(0, 1, 2), (0, 1, 2), (2, 3, 2)])
        assert not is_valid_tree(s)

    def test_cross_check_with_bfs_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10_000):
            n = int(rng.integers(2, 9))
            edges = [(i, j, 2) for i in range(n) for j in range(i + 1, n)
                     if rng.random() < 0.4]
            s = make_sample(n, n, node_classes=[1] * n, edges=edges)
            adj = [[] for _ in range(n)]
            for i, j, _ in edges:
                adj[i].append(j)
                adj[j].append(i)
            seen, stack = {0}, [0]
            while stack:
                u = stack.pop()
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
            assert is_valid_tree(s) == (len(seen) == n and len(edges) == n - 1)


class TestWlHash:
    def test_relabeling_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            n = int(rng.integers(2, 9))
            edges = [(i, j, int(rng.integers(2, 4))) for i in range(n)
                     for j in range(i + 1, n) if rng.random() < 0.5]
            s = make_sample(n, n, node_classes=rng.integers(1, 3, n),
                            edges=edges)
            perm = rng.permutation(n)
            p_edges = [(min(perm[i], perm[j]), max(perm[i], perm[j]), c)
                       for i, j, c in edges]
            s2 = make_sample(n, n, node_classes=s.node_classes[np.argsort(perm)],
                             edges=p_edges)
            assert wl_hash(s) == wl_hash(s2)

    def test_path_vs_star(self):
        path = make_sample(4, 4, node_classes=[1] * 4,
                           edges=[(0, 1, 2), (1, 2, 2), (2, 3, 2)])
        star = make_sample(4, 4, node_classes=[1] * 4,
                           edges=[(0, 1, 2), (0, 2, 2), (0, 3, 2)])
        assert wl_hash(path) != wl_hash(star)

    def test_edge_classes_enter_hash(self):
        a = make_sample(2, 2, node_classes=[1, 1], edges=[(0, 1, 2)])
        b = make_sample(2, 2, node_classes=[1, 1], edges=[(0, 1, 3)])
        assert wl_hash(a) != wl_hash(b)


class TestMetrics:
    def test_samples_equal_train_set_not_novel(self):
        ds = gen_tree_dataset(20, 4, 5, seed=6)
        rep = evaluate_vun(list(ds), list(ds))
        assert rep.novelty == 0.0 and rep.validity == 1.0

    def test_identical_samples_uniqueness(self):
        tree = gen_random_trees(1, 2, seed=7)[0]
        rep = evaluate_vun([tree] * 10, [])
        assert rep.validity == 1.0
        assert rep.uniqueness == pytest.approx(0.1)
        assert rep.novelty == 1.0

    def test_report_serializes(self):
        ds = gen_tree_dataset(5, 4, 5, seed=8)
        rep = evaluate_vun(list(ds), list(ds))
        assert "degree_histogram" in rep.to_json()

    def test_empty_samples_rejected(self):
        with pytest.raises(ValueError):
            evaluate_vun([], [])


class TestTraining:
    def test_low_t_gives_near_zero_states(self):
        ds = gen_tree_dataset(10, 4, 5, seed=9)
        cfg = _cfg()
        cache = OperatorCache(cfg.precision, ds.meta)
        beta = float(beta_at(cfg.schedule, "edge", cfg.schedule.t_min))
        assert beta <= 1e-3  # flow states stay near the zero prior mean

    def test_loss_sequence_deterministic(self):
        ds = gen_tree_dataset(12, 4, 5, seed=10)
        cfg = _cfg()
        a = _fit(ds, cfg, seed=1)
        b = _fit(ds, cfg, seed=1)
        assert a.losses == b.losses

    def test_shuffled_batch_same_loss(self):
        # the batch loss pools valid entries, so graph order cannot matter
        from vbfn import predictor
        from vbfn.pipeline import grids_for
        ds = gen_tree_dataset(6, 4, 5, seed=11)
        cfg = _cfg()
        cache = OperatorCache(cfg.precision, ds.meta)
        gn, ge = grids_for(ds.meta)
        rng = np.random.default_rng(0)
        params = pipeline.init_params_for(cfg.predictor, 0)
        order = [0, 1, 2, 3, 4, 5]
        shuffled = [3, 0, 5, 2, 4, 1]

        def loss_for(order):
            tn, te, zn, ze, mn, me = [], [], [], [], [], []
            draw = np.random.default_rng(42)
            states = {}
            for idx in order:
                s = ds[idx]
                if idx not in states:
                    zs = pipeline.encode_targets(s, ds.meta, gn, ge,
                                                 cache.full_vec)
                    ops = cache.get(s.n)
                    states[idx] = (zs, ops)
                (z_node, z_edge), ops = states[idx]
                zn.append(z_node)
                ze.append(z_edge)
                tn.append(z_node)  # deterministic stand-in flow state
                te.append(z_edge)
                mn.append(ops.node.mask)
                me.append(ops.edge.mask)
            batch = predictor.TrainingBatch(
                theta_node=np.array(tn), theta_edge=np.array(te),
                target_node=np.array(zn), target_edge=np.array(ze),
                node_mask=np.array(mn), edge_mask=np.array(me), t=0.5)
            loss, _ = predictor.loss_and_grad(params, cfg.predictor, batch,
                                              cfg.schedule, gn, ge)
            return loss

        assert loss_for(order) == pytest.approx(loss_for(shuffled), rel=1e-12)

    def test_zero_steps_returns_initialization(self):
        ds = gen_tree_dataset(8, 4, 5, seed=12)
        cfg = _cfg()
        res = _fit(ds, cfg, seed=2, steps=0)
        init = pipeline.init_params_for(cfg.predictor, 2)
        assert np.array_equal(res.checkpoint.params.flat, init.flat)
        assert res.losses == []

    def test_resume_is_bit_identical(self, tmp_path):
        ds = gen_tree_dataset(10, 4, 5, seed=13)
        cfg = _cfg()
        full = _fit(ds, cfg, seed=3, steps=30)
        half = _fit(ds, cfg, seed=3, steps=15)
        path = tmp_path / "ckpt.json"
        half.checkpoint.save(path)
        loaded = Checkpoint.load(path, cfg.predictor)
        resumed = _fit(ds, cfg, seed=3, steps=30, start=loaded)
        assert np.array_equal(full.checkpoint.params.flat,
                              resumed.checkpoint.params.flat)
        assert full.losses[15:] == resumed.losses

    def test_per_graph_t_runs(self):
        ds = gen_tree_dataset(8, 4, 5, seed=14)
        cfg = _cfg("train.per_graph_t = true")
        res = fit_params(list(ds), ds.meta, schedule=cfg.schedule,
                         precision=cfg.precision, solver_cfg=cfg.solver,
                         pred_config=cfg.predictor, seed=0, steps=5,
                         batch_size=4, lr=1e-3, weight_decay=0.0,
                         clip_norm=100.0, per_graph_t=True)
        assert len(res.losses) == 5

    def test_continuous_node_channel_trains(self):
        rng = np.random.default_rng(15)
        samples = []
        for _ in range(8):
            n = int(rng.integers(3, 5))
            edges = [(i, j, 2) for i in range(n) for j in range(i + 1, n)
                     if rng.random() < 0.5]
            samples.append(make_sample(n, 5, node_coords=rng.uniform(-1, 1, (n, 2)),
                                       edges=edges))
        from vbfn.graphs import Dataset
        meta = DatasetMeta(k_node=0, k_edge=2, max_n=5,
                           node_channel="continuous", d_x=2)
        ds = Dataset(samples=samples, meta=meta)
        cfg = _cfg("predictor.node_channel_kind = continuous")
        res = _fit(ds, cfg, seed=0, steps=10)
        assert all(np.isfinite(l) for l in res.losses)
        out = _sample(res, ds, cfg, count=4)
        assert all(s.continuous_nodes for s in out)


class TestSampling:
    def test_single_step_emits_valid_structures(self):
        ds = gen_tree_dataset(10, 4, 6, seed=16)
        cfg = _cfg("schedule.T = 1")
        res = _fit(ds, cfg, seed=0, steps=5)
        for s in _sample(res, ds, cfg, count=6):
            assert s.node_mask.sum() == s.n
            assert np.array_equal(s.edge_classes, s.edge_classes.T)
            assert np.all(np.diag(s.edge_classes * s.edge_mask) == 0)
            assert np.all(s.edge_classes[s.edge_mask > 0] >= 1)
            for i, j, _ in s.edge_list():
                assert i < s.n and j < s.n

    def test_fixed_seed_identical_samples(self):
        ds = gen_tree_dataset(10, 4, 6, seed=17)
        cfg = _cfg()
        res = _fit(ds, cfg, seed=0, steps=10)
        a = _sample(res, ds, cfg, seed=5)
        b = _sample(res, ds, cfg, seed=5)
        for x, y in zip(a, b):
            assert x.n == y.n
            assert np.array_equal(x.edge_classes, y.edge_classes)

    def test_sizes_follow_histogram(self):
        ds = gen_tree_dataset(50, 4, 6, seed=18)
        cfg = _cfg()
        res = _fit(ds, cfg, seed=0, steps=5)
        hist = res.checkpoint.histogram
        samples = _sample(res, ds, cfg, count=300)
        sizes = np.array([s.n for s in samples])
        for n, count in hist.items():
            p = count / len(ds)
            freq = np.mean(sizes == n)
            assert abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / 300) + 0.02

    def test_untrained_validity_no_better_than_random_decoding(self):
        # Monte-Carlo oracle: decode every pair independently and uniformly,
        # then measure tree validity.  An untrained sampler must sit at or
        # below this chance level (its near-constant decodes are degenerate).
        rng = np.random.default_rng(19)
        n, pairs = 6, 15
        hits = 0
        draws = 20_000
        for _ in range(draws):
            classes = rng.integers(1, 3, size=pairs)
            edges = [(i, j, 2)
                     for (i, j), c in zip([(a, b) for a in range(n)
                                           for b in range(a + 1, n)], classes)
                     if c == 2]
            hits += is_valid_tree(make_sample(n, n, node_classes=[1] * n,
                                              edges=edges))
        baseline = hits / draws
        # Cayley: 6^4 trees out of 2^15 graphs
        assert baseline == pytest.approx(6 ** 4 / 2 ** 15, abs=0.005)

        ds = gen_tree_dataset(20, 6, 6, seed=19)
        cfg = _cfg()
        params = pipeline.init_params_for(cfg.predictor, 0)
        samples = sample_graphs(
            params, ds.meta, schedule=cfg.schedule, precision=cfg.precision,
            solver_cfg=cfg.solver, pred_config=cfg.predictor,
            histogram={6: 1}, count=50, seed=0, steps=20)
        untrained_validity = np.mean([is_valid_tree(s) for s in samples])
        assert abs(untrained_validity - baseline) <= 0.05


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        ds = gen_tree_dataset(8, 4, 5, seed=20)
        cfg = _cfg()
        res = _fit(ds, cfg, seed=0, steps=5)
        path = tmp_path / "c.json"
        res.checkpoint.save(path)
        loaded = Checkpoint.load(path, cfg.predictor)
        assert np.array_equal(loaded.params.flat, res.checkpoint.params.flat)
        assert np.array_equal(loaded.opt_state.m, res.checkpoint.opt_state.m)
        assert loaded.histogram == res.checkpoint.histogram
        assert loaded.meta == res.checkpoint.meta
        assert loaded.step == res.checkpoint.step

    def test_version_checked(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"version": 99}')
        with pytest.raises(ValueError, match="version"):
            Checkpoint.load(path, _cfg().predictor)
