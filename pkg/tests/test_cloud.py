import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcchange.cloud import (
    LabeledPointCloud, SpatialIndex, farthest_point_sample, knn_brute,
    lexmin_index, load_cloud, save_cloud,
)
from pcchange.errors import DataError

from reference import fps_oracle, knn_oracle


def rounded_cloud(rng, n, scale=10.0, decimals=4):
    # decimal-rounded coordinates make distance ties reproducible exactly
    return np.round(rng.uniform(0, scale, size=(n, 3)), decimals)


class TestLabeledPointCloud:
    def test_valid(self):
        c = LabeledPointCloud(points=np.zeros((4, 3)), labels=[0, 1, 1, 0], epoch="T2")
        assert len(c) == 4
        assert c.labels.dtype == np.int64

    def test_bad_shape(self):
        with pytest.raises(DataError):
            LabeledPointCloud(points=np.zeros((4, 2)))

    def test_nonfinite(self):
        pts = np.zeros((3, 3))
        pts[1, 2] = np.nan
        with pytest.raises(DataError):
            LabeledPointCloud(points=pts)

    def test_bad_labels(self):
        with pytest.raises(DataError):
            LabeledPointCloud(points=np.zeros((3, 3)), labels=[0, 1, 2])
        with pytest.raises(DataError):
            LabeledPointCloud(points=np.zeros((3, 3)), labels=[0, 1])

    def test_bad_epoch(self):
        with pytest.raises(DataError):
            LabeledPointCloud(points=np.zeros((3, 3)), epoch="T3")


class TestIO:
    def test_roundtrip_xyz(self, tmp_path):
        rng = np.random.default_rng(0)
        c = LabeledPointCloud(points=rounded_cloud(rng, 50))
        p = tmp_path / "a.xyz"
        save_cloud(c, p)
        back = load_cloud(p)
        assert np.allclose(back.points, c.points, atol=1e-6)
        assert back.labels is None

    def test_roundtrip_xyzl(self, tmp_path):
        rng = np.random.default_rng(1)
        labels = (rng.random(50) < 0.5).astype(np.int64)
        c = LabeledPointCloud(points=rounded_cloud(rng, 50), labels=labels, epoch="T2")
        p = tmp_path / "a.xyzl"
        save_cloud(c, p)
        back = load_cloud(p)
        assert np.array_equal(back.labels, labels)

    def test_comments_and_blanks(self, tmp_path):
        p = tmp_path / "c.xyz"
        p.write_text("# header\n\n1 2 3\n  # another\n4 5 6\n")
        c = load_cloud(p)
        assert len(c) == 2

    def test_error_names_line(self, tmp_path):
        p = tmp_path / "bad.xyz"
        p.write_text("1 2 3\n1 2\n")
        with pytest.raises(DataError, match=r"bad\.xyz:2"):
            load_cloud(p)

    def test_bad_label_value(self, tmp_path):
        p = tmp_path / "bad.xyzl"
        p.write_text("1 2 3 5\n")
        with pytest.raises(DataError):
            load_cloud(p)

    def test_save_is_byte_stable(self, tmp_path):
        rng = np.random.default_rng(2)
        c = LabeledPointCloud(points=rounded_cloud(rng, 20))
        p1, p2 = tmp_path / "x1.xyz", tmp_path / "x2.xyz"
        save_cloud(c, p1)
        save_cloud(c, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestKnnBrute:
    def test_matches_oracle_many(self):
        rng = np.random.default_rng(3)
        for trial in range(60):
            n = int(rng.integers(1, 30))
            q = int(rng.integers(1, 12))
            k = int(rng.integers(1, 8))
            ref = rounded_cloud(rng, n, scale=4.0, decimals=2)
            queries = rounded_cloud(rng, q, scale=4.0, decimals=2)
            idx, d2 = knn_brute(ref, queries, k)
            oidx, od2 = knn_oracle(ref, queries, k)
            assert np.array_equal(idx, oidx), f"trial {trial}"
            assert np.allclose(d2, od2, atol=0)

    def test_ties_by_index(self):
        # four corners of a square, query at center: all equidistant
        ref = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], dtype=float)
        idx, d2 = knn_brute(ref, np.zeros((1, 3)), 3)
        assert np.array_equal(idx[0], [0, 1, 2])
        assert np.allclose(d2[0], 1.0)

    def test_duplicate_points(self):
        ref = np.array([[1, 1, 1], [1, 1, 1], [2, 2, 2]], dtype=float)
        idx, _ = knn_brute(ref, np.array([[1, 1, 1]]), 2)
        assert np.array_equal(idx[0], [0, 1])

    def test_k_exceeds_n_pads(self):
        ref = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
        idx, d2 = knn_brute(ref, np.array([[0, 0, 0]]), 5)
        assert idx.shape == (1, 5)
        assert np.array_equal(idx[0], [0, 1, 1, 1, 1])
        assert d2[0][-1] == d2[0][1]

    def test_empty_ref(self):
        with pytest.raises(DataError):
            knn_brute(np.zeros((0, 3)), np.zeros((1, 3)), 1)

    def test_chunking_invariant(self):
        rng = np.random.default_rng(4)
        ref = rounded_cloud(rng, 200)
        queries = rounded_cloud(rng, 50)
        i1, d1 = knn_brute(ref, queries, 7)
        i2, d2 = knn_brute(ref, queries, 7, chunk_elems=500)
        assert np.array_equal(i1, i2)
        assert np.array_equal(d1, d2)


class TestSpatialIndex:
    def test_matches_brute_random(self):
        rng = np.random.default_rng(5)
        for trial in range(25):
            n = int(rng.integers(2, 400))
            pts = rounded_cloud(rng, n, scale=8.0, decimals=3)
            cloud = LabeledPointCloud(points=pts)
            index = SpatialIndex(cloud)
            k = int(rng.integers(1, 10))
            queries = rounded_cloud(rng, 10, scale=9.0, decimals=3)
            bi, bd = knn_brute(pts, queries, k)
            gi, gd = index.query_batch(queries, k)
            assert np.array_equal(gi, bi), f"trial {trial}"
            assert np.array_equal(gd, bd)

    def test_clustered_distribution(self):
        rng = np.random.default_rng(6)
        a = rng.normal(0, 0.05, size=(300, 3))
        b = rng.normal(5, 0.05, size=(10, 3))
        pts = np.round(np.vstack([a, b]), 4)
        index = SpatialIndex(LabeledPointCloud(points=pts))
        queries = np.round(rng.uniform(-1, 6, size=(20, 3)), 4)
        bi, bd = knn_brute(pts, queries, 4)
        gi, gd = index.query_batch(queries, 4)
        assert np.array_equal(gi, bi)

    def test_far_query(self):
        pts = np.round(np.random.default_rng(7).uniform(0, 1, (50, 3)), 4)
        index = SpatialIndex(LabeledPointCloud(points=pts))
        bi, _ = knn_brute(pts, np.array([[100.0, 100, 100]]), 3)
        gi, _ = index.query_batch(np.array([[100.0, 100, 100]]), 3)
        assert np.array_equal(gi, bi)


class TestFPS:
    def test_matches_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(30):
            n = int(rng.integers(2, 40))
            m = int(rng.integers(1, n + 1))
            pts = rounded_cloud(rng, n, scale=5.0, decimals=3)
            start = int(rng.integers(n))
            got = farthest_point_sample(pts, m, start=start)
            want = fps_oracle(pts, m, start)
            assert np.array_equal(got, want), f"trial {trial}"

    def test_m_equals_n_covers_all(self):
        pts = np.round(np.random.default_rng(9).uniform(0, 3, (12, 3)), 3)
        got = farthest_point_sample(pts, 12, start=0)
        assert sorted(got) == list(range(12))

    def test_no_duplicates_with_duplicate_points(self):
        pts = np.zeros((6, 3))
        pts[3:] = 1.0
        got = farthest_point_sample(pts, 6, start=0)
        assert len(set(got.tolist())) == 6

    def test_seeded_start_deterministic(self):
        pts = np.round(np.random.default_rng(10).uniform(0, 3, (30, 3)), 3)
        a = farthest_point_sample(pts, 5, seed=42)
        b = farthest_point_sample(pts, 5, seed=42)
        assert np.array_equal(a, b)

    def test_maximin_property(self):
        # the second pick is always the point farthest from the first
        pts = np.round(np.random.default_rng(11).uniform(0, 5, (25, 3)), 3)
        sel = farthest_point_sample(pts, 2, start=3)
        d2 = ((pts - pts[3]) ** 2).sum(axis=1)
        assert d2[sel[1]] == d2.max()


class TestLexmin:
    def test_basic(self):
        pts = np.array([[2, 0, 0], [1, 5, 5], [1, 4, 9], [1, 4, 2]], dtype=float)
        assert lexmin_index(pts) == 3

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_is_minimum(self, seed):
        pts = np.round(np.random.default_rng(seed).uniform(0, 1, (17, 3)), 3)
        i = lexmin_index(pts)
        key = (pts[i][0], pts[i][1], pts[i][2])
        assert all(key <= (p[0], p[1], p[2]) for p in pts)
