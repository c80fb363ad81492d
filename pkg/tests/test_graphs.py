"""Grid construction, continuous encoding, edge vectorization, dataset IO."""

import math

import numpy as np
import pytest

from vbfn import graphs
from vbfn.graphs import (DatasetFormatError, build_class_grid,
                         encode_continuous, make_sample, nearest_class,
                         read_dataset, unvectorize_edges, vectorize_edges,
                         write_samples)


class TestClassGrid:
    def test_single_class_spans_interval(self):
        g = build_class_grid(1)
        assert g.centers.tolist() == [0.0]
        assert g.lowers.tolist() == [-1.0]
        assert g.uppers.tolist() == [1.0]

    def test_two_classes(self):
        g = build_class_grid(2)
        np.testing.assert_allclose(g.centers, [-0.5, 0.5])
        np.testing.assert_allclose(g.lowers, [-1.0, 0.0])
        np.testing.assert_allclose(g.uppers, [0.0, 1.0])

    def test_four_classes(self):
        g = build_class_grid(4)
        np.testing.assert_allclose(g.centers, [-0.75, -0.25, 0.25, 0.75])

    def test_zero_classes_rejected(self):
        with pytest.raises(ValueError):
            build_class_grid(0)

    @pytest.mark.parametrize("K", list(range(1, 65)))
    def test_intervals_tile_unit_range(self, K):
        g = build_class_grid(K)
        # adjacent boundaries are bitwise identical, endpoints exact
        assert np.all(g.uppers[:-1] == g.lowers[1:])
        assert g.lowers[0] == -1.0 and g.uppers[-1] == 1.0
        assert abs(math.fsum(g.uppers - g.lowers) - 2.0) < 1e-13
        assert np.all(np.diff(g.centers) > 0)
        np.testing.assert_allclose(g.lowers, g.centers - 1.0 / K, atol=1e-15)
        np.testing.assert_allclose(g.uppers, g.centers + 1.0 / K, atol=1e-15)


class TestEncodeContinuous:
    def test_uniform_class_one(self):
        g = build_class_grid(2)
        sample = make_sample(3, 3, node_classes=[1, 1, 1],
                             edges=[(0, 1, 1), (0, 2, 1), (1, 2, 1)])
        enc = encode_continuous(sample, g, g)
        np.testing.assert_array_equal(enc.x_c, [-0.5, -0.5, -0.5])
        valid = enc.edge_mask > 0
        assert np.all(enc.a_c[valid] == -0.5)
        assert np.all(enc.a_c[~valid] == 0.0)

    def test_empty_mask_is_zero(self):
        g = build_class_grid(2)
        sample = make_sample(1, 4, node_classes=[2])
        enc = encode_continuous(sample, g, g)
        assert np.all(enc.x_c[1:] == 0.0)
        assert np.all(enc.a_c == 0.0)  # single node, diagonal masked

    @pytest.mark.parametrize("K", range(1, 17))
    def test_nearest_center_round_trip(self, K):
        rng = np.random.default_rng(K)
        g = build_class_grid(K)
        for _ in range(20):
            n = int(rng.integers(1, 7))
            cls = rng.integers(1, K + 1, size=n)
            sample = make_sample(n, 8, node_classes=cls)
            enc = encode_continuous(sample, g, g)
            back = nearest_class(enc.x_c[:n], g)
            np.testing.assert_array_equal(back, cls)

    def test_out_of_range_class_rejected(self):
        g = build_class_grid(2)
        sample = make_sample(2, 2, node_classes=[1, 3])
        with pytest.raises(ValueError, match="out of range"):
            encode_continuous(sample, g, g)

    def test_continuous_nodes_pass_through(self):
        g = build_class_grid(2)
        coords = np.array([[0.3, -0.2], [0.1, 0.9]])
        sample = make_sample(2, 3, node_coords=coords)
        enc = encode_continuous(sample, g, g)
        np.testing.assert_array_equal(enc.x_c[:4], coords.reshape(-1))
        assert np.all(enc.x_c[4:] == 0.0)


class TestVectorization:
    def test_full_mask_three_nodes(self):
        a = np.zeros((3, 3))
        mask = np.ones((3, 3)) - np.eye(3)
        vec, ev = vectorize_edges(a, mask)
        assert ev.size == 3
        assert [ev.pair_of(k) for k in range(3)] == [(0, 1), (0, 2), (1, 2)]

    def test_round_trip_exact(self):
        a = np.array([[0.0, 0.5], [0.5, 0.0]])
        mask = np.ones((2, 2)) - np.eye(2)
        vec, ev = vectorize_edges(a, mask)
        np.testing.assert_array_equal(vec, [0.5])
        np.testing.assert_array_equal(unvectorize_edges(vec, ev), a)

    def test_masked_node_reduces_slots(self):
        node_mask, edge_mask = graphs.build_masks(3, 4)
        vec, ev = vectorize_edges(np.zeros((4, 4)), edge_mask)
        assert ev.size == 3

    def test_asymmetric_rejected(self):
        a = np.array([[0.0, 1.0], [1.0 + 1e-6, 0.0]])
        mask = np.ones((2, 2)) - np.eye(2)
        with pytest.raises(ValueError, match="asymmetric"):
            vectorize_edges(a, mask)

    def test_many_random_round_trips(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            mask = (rng.random((n, n)) < 0.7).astype(int)
            mask = mask & mask.T
            np.fill_diagonal(mask, 0)
            a = rng.normal(size=(n, n))
            a = (a + a.T) / 2 * mask
            vec, ev = vectorize_edges(a, mask)
            back = unvectorize_edges(vec, ev)
            assert np.array_equal(back * mask, a * mask)
            assert np.array_equal(back, back.T)
            assert np.all(np.diag(back) == 0)


class TestMasks:
    def test_mask_counts(self):
        node_mask, edge_mask = graphs.build_masks(3, 5)
        assert node_mask.sum() == 3
        assert np.array_equal(edge_mask, np.outer(node_mask, node_mask)
                              * (1 - np.eye(5)))

    def test_diagonal_kept_when_not_masked(self):
        _, edge_mask = graphs.build_masks(2, 2, mask_diag_edges=False)
        assert edge_mask[0, 0] == 1

    def test_edge_classes_symmetric(self):
        sample = make_sample(3, 3, node_classes=[1, 1, 1], edges=[(0, 2, 2)])
        assert sample.edge_classes[0, 2] == sample.edge_classes[2, 0] == 2


class TestDatasetIO:
    def test_single_line_without_header(self, tmp_path):
        path = tmp_path / "one.jsonl"
        path.write_text('{"n":2,"node_classes":[1,1],"edges":[[0,1,1]]}\n')
        ds = read_dataset(path)
        assert len(ds) == 1
        assert ds[0].n == 2

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert len(read_dataset(path)) == 0

    def test_malformed_line_names_lineno(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"n":2,"node_classes":[1,1]}\n{oops\n')
        with pytest.raises(DatasetFormatError, match="line 2"):
            read_dataset(path)

    def test_bad_meta_header_rejected(self, tmp_path):
        path = tmp_path / "bad_meta.jsonl"
        path.write_text('{"meta": {"K_X": 1}}\n'
                        '{"n":2,"node_classes":[1,1],"edges":[]}\n')
        with pytest.raises(DatasetFormatError, match="meta"):
            read_dataset(path)

    def test_record_missing_n_rejected(self, tmp_path):
        path = tmp_path / "no_n.jsonl"
        path.write_text('{"node_classes":[1,1]}\n')
        with pytest.raises(DatasetFormatError, match="line 1"):
            read_dataset(path)

    def test_write_read_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        samples = []
        for _ in range(10):
            n = int(rng.integers(2, 6))
            edges = [(i, j, int(rng.integers(2, 4)))
                     for i in range(n) for j in range(i + 1, n)
                     if rng.random() < 0.5]
            samples.append(make_sample(n, 6, node_classes=rng.integers(1, 3, n),
                                       edges=edges))
        meta = graphs.DatasetMeta(k_node=2, k_edge=3, max_n=6)
        path = tmp_path / "ds.jsonl"
        write_samples(path, samples, meta)
        ds = read_dataset(path)
        assert ds.meta == meta
        assert len(ds) == len(samples)
        for a, b in zip(samples, ds):
            assert a.n == b.n
            assert np.array_equal(a.node_classes, b.node_classes)
            assert np.array_equal(a.edge_classes * a.edge_mask,
                                  b.edge_classes * b.edge_mask)

    def test_absent_pairs_take_no_edge_class(self, tmp_path):
        path = tmp_path / "sparse.jsonl"
        path.write_text('{"meta": {"K_X": 1, "K_A": 2, "max_n": 3}}\n'
                        '{"n":3,"node_classes":[1,1,1],"edges":[[0,1,2]]}\n')
        ds = read_dataset(path)
        assert ds[0].edge_classes[0, 2] == graphs.NO_EDGE_CLASS

    def test_continuous_round_trip(self, tmp_path):
        coords = np.array([[0.25, -0.5], [0.125, 0.75]])
        sample = make_sample(2, 3, node_coords=coords, edges=[(0, 1, 2)])
        meta = graphs.DatasetMeta(k_node=0, k_edge=2, max_n=3,
                                  node_channel="continuous", d_x=2)
        path = tmp_path / "cont.jsonl"
        write_samples(path, [sample], meta)
        ds = read_dataset(path)
        assert ds.meta.node_channel == "continuous"
        np.testing.assert_array_equal(ds[0].node_classes[:2], coords)
