import struct

import numpy as np
import pytest

from robicl.distributions import (FormatError, LabeledDataset, TestDistSpec,
                                  TrainDistSpec, apply_preprocess, class_pairs,
                                  export_csv, export_manifest, feature_stats,
                                  fit_preprocess, load_cifar, load_idx,
                                  pca_align, preprocess_binary,
                                  sample_test_normal, sample_train,
                                  split_by_class)

SE_FACTOR = 4  # tolerance in standard errors for moment checks


class TestTrainSampler:
    def test_robust_coordinate_exact(self):
        spec = TrainDistSpec(d=5, lam=0.3, c=4)
        data = sample_train(spec, 500, seed=0)
        assert np.array_equal(data.features[:, 3], data.labels)

    def test_moments(self):
        spec = TrainDistSpec(d=3, lam=0.1, c=2)
        data = sample_train(spec, 100000, seed=1)
        u = data.products()
        target = np.array([0.05, 1.0, 0.05])
        se = u.std(axis=0, ddof=1) / np.sqrt(len(data))
        assert np.all(np.abs(u.mean(axis=0) - target) <= SE_FACTOR * se + 1e-12)

    def test_nonrobust_range(self):
        spec = TrainDistSpec(d=4, lam=0.25, c=1)
        u = sample_train(spec, 2000, seed=2).products()
        others = u[:, 1:]
        assert others.min() >= 0.0
        assert others.max() <= 0.25

    def test_deterministic_under_seed(self):
        spec = TrainDistSpec(d=6, lam=0.5, c=3)
        a = sample_train(spec, 1000, seed=42)
        b = sample_train(spec, 1000, seed=42)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            TrainDistSpec(d=3, lam=1.5, c=1)
        with pytest.raises(ValueError):
            TrainDistSpec(d=3, lam=0.5, c=4)


class TestNormalSampler:
    SPEC = TestDistSpec(d_rob=10, d_vul=90, d_irr=0, alpha=1.0, beta=0.1, gamma=0.0)

    def test_gamma_zero_irrelevant_coordinates(self):
        spec = TestDistSpec(2, 3, 4, alpha=1.0, beta=0.5, gamma=0.0)
        data = sample_test_normal(spec, 200, seed=3)
        assert not data.features[:, 5:].any()

    def test_block_means(self):
        data = sample_test_normal(self.SPEC, 100000, seed=4)
        u = data.products()
        se = u.std(axis=0, ddof=1) / np.sqrt(len(data))
        target = np.array([1.0] * 10 + [0.1] * 90)
        assert np.all(np.abs(u.mean(axis=0) - target) <= SE_FACTOR * se)

    def test_irrelevant_uncorrelated_with_label(self):
        spec = TestDistSpec(1, 1, 8, alpha=1.0, beta=0.5, gamma=0.7)
        data = sample_test_normal(spec, 100000, seed=5)
        corr = (data.labels[:, None] * data.features[:, 2:]).mean(axis=0)
        se = data.features[:, 2:].std(axis=0, ddof=1) / np.sqrt(len(data))
        assert np.all(np.abs(corr) <= SE_FACTOR * se)

    def test_central_moments_scale_with_block(self):
        # normal closed forms: var = s^2, third central = 0, fourth = 3 s^4
        spec = TestDistSpec(1, 1, 1, alpha=2.0, beta=0.5, gamma=0.25)
        u = sample_test_normal(spec, 200000, seed=6).products()
        n = len(u)
        for dim, scale in ((0, 2.0), (1, 0.5), (2, 0.25)):
            col = u[:, dim] - u[:, dim].mean()
            var = (col**2).mean()
            assert var == pytest.approx(scale**2, rel=0.05)
            m3 = (col**3).mean()
            se3 = np.std(col**3, ddof=1) / np.sqrt(n)
            assert abs(m3) <= SE_FACTOR * se3
            m4 = (col**4).mean()
            se4 = np.std(col**4, ddof=1) / np.sqrt(n)
            assert abs(m4 - 3 * scale**4) <= SE_FACTOR * se4

    def test_determinism(self):
        a = sample_test_normal(self.SPEC, 500, seed=7)
        b = sample_test_normal(self.SPEC, 500, seed=7)
        assert np.array_equal(a.features, b.features)

    def test_partition_validation(self):
        with pytest.raises(ValueError):
            TestDistSpec(1, 1, 0, alpha=1.0, beta=0.1, gamma=0.0,
                         s_rob=(0,), s_vul=(0,), s_irr=())


class TestPreprocess:
    def test_two_point_hand_example(self):
        out = preprocess_binary([[1.0, 0.0]], [[0.0, 1.0]])
        assert np.allclose(out.features, [[0.5, 0.5], [-0.5, -0.5]])
        assert out.labels.tolist() == [1.0, -1.0]

    def test_constant_dimension_becomes_zero(self):
        class0 = [[0.7, 0.1], [0.7, 0.4]]
        class1 = [[0.7, 0.9], [0.7, 0.6]]
        out = preprocess_binary(class0, class1)
        assert not out.features[:, 0].any()

    def test_alignment_sum_nonnegative(self):
        rng = np.random.default_rng(8)
        class0 = rng.uniform(size=(40, 12))
        class1 = rng.uniform(size=(25, 12))
        out = preprocess_binary(class0, class1)
        sums = (out.labels[:, None] * out.features).sum(axis=0)
        assert np.all(sums >= 0.0)

    def test_alignment_idempotent(self):
        rng = np.random.default_rng(9)
        class0 = rng.uniform(size=(30, 6))
        class1 = rng.uniform(size=(20, 6))
        once = preprocess_binary(class0, class1)
        resigns = np.where((once.labels[:, None] * once.features).sum(axis=0) >= 0, 1.0, -1.0)
        assert np.array_equal(resigns, np.ones(6))

    def test_statistics_reused_on_test_split(self):
        rng = np.random.default_rng(10)
        info = fit_preprocess(rng.uniform(size=(30, 4)), rng.uniform(size=(30, 4)))
        test0 = rng.uniform(size=(10, 4))
        out = apply_preprocess(info, test0, rng.uniform(size=(10, 4)))
        expected0 = (test0 - info.mean) * info.signs
        assert np.allclose(out.features[:10], expected0)

    def test_empty_class(self):
        with pytest.raises(ValueError):
            preprocess_binary(np.empty((0, 3)), np.ones((2, 3)))


def write_idx(tmp_path, images, labels, image_magic=0x803, label_magic=0x801,
              rows=2, cols=2, truncate_images=False):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img_path = tmp_path / "images-idx3-ubyte"
    lbl_path = tmp_path / "labels-idx1-ubyte"
    payload = images.tobytes()
    if truncate_images:
        payload = payload[:-1]
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", image_magic, len(images), rows, cols))
        f.write(payload)
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", label_magic, len(labels)))
        f.write(labels.tobytes())
    return img_path, lbl_path


class TestIdxLoader:
    def test_scaling_and_layout(self, tmp_path):
        img, lbl = write_idx(tmp_path, [[0, 255, 0, 255]], [7])
        feats, labels = load_idx(img, lbl)
        assert feats.tolist() == [[0.0, 1.0, 0.0, 1.0]]
        assert labels.tolist() == [7]

    def test_row_major_flattening(self, tmp_path):
        img, lbl = write_idx(tmp_path, [[10, 20, 30, 40]], [1])
        feats, _ = load_idx(img, lbl)
        assert np.allclose(feats[0] * 255, [10, 20, 30, 40])

    def test_wrong_image_magic(self, tmp_path):
        img, lbl = write_idx(tmp_path, [[0, 0, 0, 0]], [0], image_magic=0x802)
        with pytest.raises(FormatError, match="0x00000802"):
            load_idx(img, lbl)

    def test_wrong_label_magic(self, tmp_path):
        img, lbl = write_idx(tmp_path, [[0, 0, 0, 0]], [0], label_magic=0x802)
        with pytest.raises(FormatError):
            load_idx(img, lbl)

    def test_count_mismatch(self, tmp_path):
        img, lbl = write_idx(tmp_path, [[0, 0, 0, 0]], [0, 1])
        with pytest.raises(FormatError, match="count"):
            load_idx(img, lbl)

    def test_truncated_file(self, tmp_path):
        img, lbl = write_idx(tmp_path, [[1, 2, 3, 4]], [0], truncate_images=True)
        with pytest.raises(IOError):
            load_idx(img, lbl)


class TestCifarLoader:
    def test_two_records(self, tmp_path):
        rec0 = bytes([3]) + bytes(range(256)) * 12
        rec1 = bytes([8]) + bytes([255]) * 3072
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(rec0 + rec1)
        feats, labels = load_cifar([path])
        assert labels.tolist() == [3, 8]
        assert feats.shape == (2, 3072)
        assert feats[1].min() == feats[1].max() == 1.0

    def test_bad_length(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(bytes(3072))
        with pytest.raises(FormatError, match="multiple"):
            load_cifar([path])

    def test_pixel_scaling(self, tmp_path):
        path = tmp_path / "b.bin"
        path.write_bytes(bytes([0]) + bytes([255]) * 3072)
        feats, _ = load_cifar([path])
        assert feats[0, 0] == 1.0


class TestPcaAlign:
    def test_axis_aligned_data_recovered(self):
        # columns are exactly orthogonal after centering, with distinct
        # variances, so the principal basis is the identity up to order/sign
        feats = np.array([
            [3.0, 1.0, 0.2],
            [3.0, -1.0, -0.2],
            [-3.0, 1.0, -0.2],
            [-3.0, -1.0, 0.2],
        ])
        labels = np.ones(4)
        data = LabeledDataset(feats, labels)
        aligned, info = pca_align(data, 3)
        perm = np.abs(info.basis).argmax(axis=0)
        assert perm.tolist() == [0, 1, 2]  # variance order 3 > 1 > 0.2
        assert np.allclose(np.abs(info.basis), np.eye(3), atol=1e-12)
        assert np.allclose(np.abs(aligned.features), np.abs(feats), atol=1e-12)

    def test_rotation_invariance_of_coefficients(self):
        rng = np.random.default_rng(12)
        labels = rng.choice((-1.0, 1.0), size=6000)
        u = rng.normal(loc=(2.0, 0.5), scale=(2.0, 0.5), size=(6000, 2))
        feats = labels[:, None] * u
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        base, _ = pca_align(LabeledDataset(feats, labels), 2)
        rotated, _ = pca_align(LabeledDataset(feats @ rot.T, labels), 2)
        moments = lambda ds: np.sort((ds.labels[:, None] * ds.features).mean(axis=0))
        assert np.allclose(moments(base), moments(rotated), atol=0.05)

    def test_sign_postcondition(self):
        rng = np.random.default_rng(13)
        labels = rng.choice((-1.0, 1.0), size=500)
        feats = labels[:, None] * rng.normal(size=(500, 5)) + rng.normal(size=(500, 5))
        aligned, _ = pca_align(LabeledDataset(feats, labels), 5)
        sums = (aligned.labels[:, None] * aligned.features).sum(axis=0)
        assert np.all(sums >= -1e-9)

    def test_reports_effective_rank(self):
        rng = np.random.default_rng(14)
        labels = rng.choice((-1.0, 1.0), size=100)
        thin = rng.normal(size=(100, 2))
        feats = np.concatenate([thin, thin @ np.ones((2, 2))], axis=1)
        _, info = pca_align(LabeledDataset(labels[:, None] * feats, labels), 4)
        assert info.effective_rank == 2


class TestFeatureStats:
    def test_train_dist_means(self):
        data = sample_train(TrainDistSpec(d=3, lam=0.1, c=2), 100000, seed=15)
        stats = feature_stats(data)
        assert np.allclose(stats.mean_yx, [0.05, 1.0, 0.05], atol=0.01)

    def test_independent_dims_total_cov_is_own_variance(self):
        rng = np.random.default_rng(16)
        labels = rng.choice((-1.0, 1.0), size=50000)
        feats = rng.normal(scale=(1.0, 2.0, 0.5), size=(50000, 3))
        stats = feature_stats(LabeledDataset(feats, labels))
        assert np.allclose(stats.total_cov, [1.0, 4.0, 0.25], rtol=0.1)
        assert np.all(stats.total_cov > 0)

    def test_matches_full_covariance_sum(self):
        rng = np.random.default_rng(17)
        labels = rng.choice((-1.0, 1.0), size=300)
        feats = rng.normal(size=(300, 4)) @ rng.normal(size=(4, 4))
        stats = feature_stats(LabeledDataset(feats, labels))
        cov = np.cov(feats, rowvar=False)
        assert np.allclose(stats.total_cov, cov.sum(axis=1), atol=1e-10)


class TestExports:
    def test_csv_and_manifest(self, tmp_path):
        data = LabeledDataset([[0.1, 0.2], [0.3, 0.4]], [1, -1], "synthetic")
        csv_path = tmp_path / "pair.csv"
        export_csv(data, csv_path)
        header = csv_path.read_text().splitlines()[0]
        assert header == "dim_0,dim_1,label"
        info = fit_preprocess([[1.0, 0.0]], [[0.0, 1.0]])
        manifest = tmp_path / "pair.json"
        export_manifest(manifest, ["a.bin"], (0, 1), info)
        assert '"class_pair"' in manifest.read_text()

    def test_class_pairs_enumeration(self):
        pairs = class_pairs()
        assert len(pairs) == 45
        assert pairs[0] == (0, 1)
        assert pairs[-1] == (8, 9)

    def test_split_by_class(self):
        feats = np.arange(8, dtype=float).reshape(4, 2)
        split = split_by_class(feats, np.array([1, 0, 1, 2]))
        assert np.array_equal(split[1], feats[[0, 2]])
