import numpy as np
import pytest

import pcchange.autodiff as ad
from pcchange.autodiff import Tensor
from pcchange.cloud import LabeledPointCloud
from pcchange.errors import DataError
from pcchange.model import (
    NetConfig, encode, feature_difference, forward, idw_interpolate, idw_weights,
    init_weights, load_model, save_model,
)

from reference import feature_difference_oracle, idw_oracle

TINY = dict(ratios=(4, 4, 2, 2), channels=(4, 4, 8, 8), k=4, min_points=16)


def make_cloud(rng, n, epoch="T1", scale=4.0):
    return LabeledPointCloud(points=rng.uniform(0, scale, size=(n, 3)), epoch=epoch)


class TestNetConfig:
    def test_defaults(self):
        cfg = NetConfig()
        assert cfg.levels == 4
        assert cfg.channels == (32, 64, 128, 256)

    def test_validation(self):
        with pytest.raises(ValueError):
            NetConfig(ratios=(4, 4), channels=(32,))
        with pytest.raises(ValueError):
            NetConfig(k=0)
        with pytest.raises(ValueError):
            NetConfig(ratios=(0, 2, 2, 2))

    def test_manifest_roundtrip(self):
        cfg = NetConfig(ratios=(2, 2), channels=(8, 16), k=5, min_points=10, seed=3)
        back = NetConfig.from_manifest(cfg.manifest())
        assert back == cfg


class TestEncoder:
    def test_level_sizes_default_ratios(self):
        rng = np.random.default_rng(0)
        cfg = NetConfig(ratios=(4, 4, 2, 2), channels=(4, 4, 8, 8), k=4, min_points=64)
        w = init_weights(cfg, rng)
        cloud = make_cloud(rng, 256)
        pyr = encode(cloud, w, cfg)
        assert [len(l.coords) for l in pyr.levels] == [64, 16, 8, 4]
        assert [l.features.data.shape[1] for l in pyr.levels] == [4, 4, 8, 8]

    def test_min_points_enforced(self):
        rng = np.random.default_rng(1)
        cfg = NetConfig(**TINY)
        w = init_weights(cfg, rng)
        with pytest.raises(DataError, match="minimum is 16"):
            encode(make_cloud(rng, 15), w, cfg)

    def test_single_weight_copy_drives_both_branches(self):
        # one parameter tree serves T1 and T2; no per-branch duplicates exist
        rng = np.random.default_rng(2)
        cfg = NetConfig(**TINY)
        w = init_weights(cfg, rng)
        names = [n for n, _ in ad.named_parameters(w)]
        assert len(names) == len(set(names))
        enc_names = [n for n in names if n.startswith("levels.")]
        # 4 levels x (edge: 1 linear; attn: phi/omega/alpha + beta 2 + sigma 2)
        assert len(enc_names) == 4 * 2 * (1 + 3 + 2 + 2)

        cloud = make_cloud(rng, 32)
        before = encode(cloud, w, cfg).levels[-1].features.data.copy()
        w.levels[0].edge.layers[0].weight.data += 0.1
        after = encode(cloud, w, cfg).levels[-1].features.data
        assert not np.allclose(before, after)

    def test_identical_clouds_identical_pyramids(self):
        rng = np.random.default_rng(3)
        cfg = NetConfig(**TINY)
        w = init_weights(cfg, rng)
        pts = rng.uniform(0, 4, size=(48, 3))
        p1 = encode(LabeledPointCloud(points=pts.copy(), epoch="T1"), w, cfg)
        p2 = encode(LabeledPointCloud(points=pts.copy(), epoch="T2"), w, cfg)
        for l1, l2 in zip(p1.levels, p2.levels):
            assert np.array_equal(l1.coords, l2.coords)
            assert np.array_equal(l1.features.data, l2.features.data)
            assert np.array_equal(l1.sample_idx, l2.sample_idx)

    def test_cache_freezes_selections(self):
        rng = np.random.default_rng(4)
        cfg = NetConfig(**TINY)
        w = init_weights(cfg, rng)
        cloud = make_cloud(rng, 32)
        cache = {}
        a = encode(cloud, w, cfg, cache=cache, tag="x")
        b = encode(cloud, w, cfg, cache=cache, tag="x")
        assert np.array_equal(a.levels[-1].features.data, b.levels[-1].features.data)
        assert ("x", 0, "fps") in cache and ("x", 3, "attn_graph") in cache


class TestFeatureDifference:
    def test_matches_oracle_many(self):
        rng = np.random.default_rng(5)
        for trial in range(50):
            n_a = int(rng.integers(1, 10))
            n_b = int(rng.integers(1, 10))
            c = int(rng.integers(1, 5))
            fa, fb = rng.normal(size=(n_a, c)), rng.normal(size=(n_b, c))
            ca = np.round(rng.uniform(0, 2, size=(n_a, 3)), 2)
            cb = np.round(rng.uniform(0, 2, size=(n_b, 3)), 2)
            got = feature_difference(Tensor(fa), ca, Tensor(fb), cb).data
            want = feature_difference_oracle(fa, ca, fb, cb)
            assert np.allclose(got, want, atol=1e-12), f"trial {trial}"

    def test_identical_clouds_zero(self):
        rng = np.random.default_rng(6)
        f = rng.normal(size=(8, 3))
        coords = rng.uniform(0, 2, size=(8, 3))
        got = feature_difference(Tensor(f), coords, Tensor(f.copy()), coords.copy()).data
        assert np.array_equal(got, np.zeros_like(f))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            feature_difference(
                Tensor(np.zeros((0, 2))), np.zeros((0, 3)),
                Tensor(np.zeros((3, 2))), np.zeros((3, 3)),
            )


class TestIDW:
    def test_matches_oracle_many(self):
        rng = np.random.default_rng(7)
        for trial in range(50):
            n_f = int(rng.integers(1, 12))
            n_c = int(rng.integers(1, 8))
            c = int(rng.integers(1, 5))
            fine = np.round(rng.uniform(0, 2, size=(n_f, 3)), 2)
            coarse = np.round(rng.uniform(0, 2, size=(n_c, 3)), 2)
            cf = rng.normal(size=(n_c, c))
            got = idw_interpolate(fine, coarse, Tensor(cf)).data
            want = idw_oracle(fine, coarse, cf)
            assert np.allclose(got, want, atol=1e-10), f"trial {trial}"

    def test_single_coarse_point(self):
        fine = np.random.default_rng(8).uniform(0, 2, size=(5, 3))
        coarse = np.array([[1.0, 1.0, 1.0]])
        cf = np.array([[2.0, -3.0]])
        got = idw_interpolate(fine, coarse, Tensor(cf)).data
        assert np.allclose(got, np.tile(cf, (5, 1)), atol=1e-12)

    def test_coincident_point_snaps(self):
        coarse = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
        cf = np.array([[10.0], [20.0], [30.0]])
        fine = np.array([[1.0, 0, 0], [0.5, 0.5, 0]])
        got = idw_interpolate(fine, coarse, Tensor(cf)).data
        assert got[0, 0] == 20.0   # exact copy, not epsilon-weighted blend
        assert 10.0 < got[1, 0] < 30.0

    def test_weights_normalized(self):
        rng = np.random.default_rng(9)
        idx, w = idw_weights(rng.uniform(0, 2, (10, 3)), rng.uniform(0, 2, (6, 3)))
        assert idx.shape == (10, 3) and w.shape == (10, 3)
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12
        assert (w >= 0).all()


class TestForward:
    def test_output_shape_and_grad_flow(self):
        rng = np.random.default_rng(10)
        cfg = NetConfig(**TINY)
        w = init_weights(cfg, rng)
        t1 = make_cloud(rng, 40, "T1")
        t2 = make_cloud(rng, 36, "T2")
        params = ad.parameters(w)
        with ad.record() as tape:
            logits = forward(t1, t2, w, cfg)
            loss = ad.reduce_sum(ad.reduce_sum(ad.mul(logits, logits), -1), -1)
        assert logits.data.shape == (36, 2)
        ad.backward(tape, loss, params=params)
        head_w = w.head.layers[0].weight.grad
        assert head_w is not None and np.abs(head_w).max() > 0

    def test_cached_forward_bit_identical(self):
        rng = np.random.default_rng(11)
        cfg = NetConfig(**TINY)
        w = init_weights(cfg, rng)
        t1, t2 = make_cloud(rng, 40, "T1"), make_cloud(rng, 36, "T2")
        cache = {}
        a = forward(t1, t2, w, cfg, cache=cache).data
        b = forward(t1, t2, w, cfg, cache=cache).data
        assert np.array_equal(a, b)

    def test_adversarial_tiny_clouds(self):
        # N=1 survives: FPS keeps the point, graphs pad by repeat, IDW snaps
        rng = np.random.default_rng(12)
        cfg = NetConfig(ratios=(4, 4, 2, 2), channels=(4, 4, 8, 8), k=4, min_points=1)
        w = init_weights(cfg, rng)
        for n1, n2 in [(1, 1), (1, 5), (5, 1), (2, 3)]:
            t1 = make_cloud(rng, n1, "T1")
            t2 = make_cloud(rng, n2, "T2")
            logits = forward(t1, t2, w, cfg)
            assert logits.data.shape == (n2, 2)
            assert np.isfinite(logits.data).all()


class TestSerialization:
    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(13)
        cfg = NetConfig(**TINY, seed=5)
        w = init_weights(cfg, rng)
        path = tmp_path / "model.ckpt"
        save_model(path, w, cfg, extra={"chunk_size": 256})
        w2, cfg2, manifest = load_model(path)
        assert cfg2 == cfg
        assert manifest["chunk_size"] == 256
        for (n1, t1), (n2, t2) in zip(ad.named_parameters(w), ad.named_parameters(w2)):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data)

    def test_loaded_model_same_forward(self, tmp_path):
        rng = np.random.default_rng(14)
        cfg = NetConfig(**TINY)
        w = init_weights(cfg, rng)
        t1, t2 = make_cloud(rng, 40, "T1"), make_cloud(rng, 36, "T2")
        want = forward(t1, t2, w, cfg).data
        save_model(tmp_path / "m.ckpt", w, cfg)
        w2, cfg2, _ = load_model(tmp_path / "m.ckpt")
        got = forward(t1, t2, w2, cfg2).data
        assert np.array_equal(got, want)

    def test_surplus_entry_rejected(self, tmp_path):
        from pcchange.checkpoint import load_arrays, save_arrays

        rng = np.random.default_rng(15)
        cfg = NetConfig(**TINY)
        w = init_weights(cfg, rng)
        path = tmp_path / "m.ckpt"
        save_model(path, w, cfg)
        arrays = load_arrays(path)
        arrays["bogus.extra"] = np.zeros(3)
        save_arrays(path, arrays)
        with pytest.raises(DataError, match="surplus"):
            load_model(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        from pcchange.checkpoint import load_arrays, save_arrays

        rng = np.random.default_rng(16)
        cfg = NetConfig(**TINY)
        w = init_weights(cfg, rng)
        path = tmp_path / "m.ckpt"
        save_model(path, w, cfg)
        arrays = load_arrays(path)
        first = next(iter(arrays))
        arrays[first] = np.zeros((1, 1))
        save_arrays(path, arrays)
        with pytest.raises(DataError, match="shape"):
            load_model(path)
