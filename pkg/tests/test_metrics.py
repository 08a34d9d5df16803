import numpy as np
import pytest

from astf.bvh import euler_to_rotmat
from astf.metrics import (
    FeatureDistribution,
    MetricError,
    accuracy,
    clip_geodesic,
    frechet_distance,
    geodesic_distance,
    moment_descriptors,
    separation_report,
    train_probe_classifier,
)
from astf.motion import FEATURE_DIM, MotionClip, matrix_to_rot6
from synthdata import chain_skeleton, moment_matched_corpus, toy_corpus


class TestGeodesic:
    def test_identical_rotations(self):
        r = euler_to_rotmat([30.0, 40.0, -10.0], "ZXY")
        assert geodesic_distance(r, r) == 0.0

    def test_quarter_turn(self):
        r = euler_to_rotmat([90.0, 0.0, 0.0], "ZXY")
        assert geodesic_distance(np.eye(3), r) == pytest.approx(np.pi / 2, abs=1e-12)

    def test_half_turn_any_axis(self):
        for order, angles in [("XYZ", [180.0, 0, 0]), ("YXZ", [180.0, 0, 0]),
                              ("ZXY", [180.0, 0, 0])]:
            r = euler_to_rotmat(angles, order)
            assert geodesic_distance(np.eye(3), r) == pytest.approx(np.pi, abs=1e-9)

    def test_symmetry_and_triangle(self):
        rng = np.random.default_rng(0)
        rs = [euler_to_rotmat(rng.uniform(-180, 180, 3), "ZXY") for _ in range(6)]
        for a in rs:
            for b in rs:
                assert geodesic_distance(a, b) == pytest.approx(
                    geodesic_distance(b, a), abs=1e-12
                )
        for a, b, c in zip(rs, rs[1:], rs[2:]):
            assert geodesic_distance(a, c) <= (
                geodesic_distance(a, b) + geodesic_distance(b, c) + 1e-9
            )

    def test_non_orthonormal_rejected(self):
        with pytest.raises(MetricError, match="orthonormal"):
            geodesic_distance(np.eye(3) * 1.5, np.eye(3))

    def test_clip_level_mean(self):
        sk = chain_skeleton(2)
        frame_len, n_valid = 8, 5
        feats_a = np.zeros((FEATURE_DIM, frame_len, 2))
        feats_b = np.zeros((FEATURE_DIM, frame_len, 2))
        identity6 = matrix_to_rot6(np.eye(3))
        quarter6 = matrix_to_rot6(euler_to_rotmat([90.0, 0, 0], "ZXY"))
        for f in range(n_valid):
            for j in range(2):
                feats_a[0:6, f, j] = identity6
                feats_b[0:6, f, j] = quarter6
        mask = np.array([True] * n_valid + [False] * (frame_len - n_valid))
        a = MotionClip(feats_a, mask, sk, 1 / 15)
        b = MotionClip(feats_b, mask, sk, 1 / 15)
        # The 6-value rotation decode carries an eps guard, so ~1e-8 slack.
        assert clip_geodesic(a, b) == pytest.approx(np.pi / 2, abs=1e-6)
        assert clip_geodesic(a, a) == 0.0


class TestFrechet:
    def test_identical_distributions(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((40, 3))
        d = FeatureDistribution.from_samples(x)
        assert frechet_distance(d, d) == pytest.approx(0.0, abs=1e-8)

    def test_one_dimensional_closed_form(self):
        a = FeatureDistribution(np.array([0.0]), np.array([[1.0]]), 10)
        b = FeatureDistribution(np.array([1.0]), np.array([[1.0]]), 10)
        assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal_closed_form(self):
        a = FeatureDistribution(np.zeros(2), np.eye(2), 10)
        b = FeatureDistribution(np.zeros(2), 4.0 * np.eye(2), 10)
        assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-12)

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            d1 = FeatureDistribution.from_samples(rng.standard_normal((30, 4)))
            d2 = FeatureDistribution.from_samples(rng.standard_normal((30, 4)) * 2 + 1)
            ab, ba = frechet_distance(d1, d2), frechet_distance(d2, d1)
            assert ab == pytest.approx(ba, abs=1e-8)
            assert ab >= 0.0

    def test_dimension_mismatch(self):
        a = FeatureDistribution(np.zeros(2), np.eye(2), 5)
        b = FeatureDistribution(np.zeros(3), np.eye(3), 5)
        with pytest.raises(MetricError, match="dimension"):
            frechet_distance(a, b)

    def test_from_samples_validates(self):
        rng = np.random.default_rng(3)
        d = FeatureDistribution.from_samples(rng.standard_normal((20, 3)))
        d.validate()
        with pytest.raises(MetricError):
            FeatureDistribution.from_samples(np.zeros((1, 3)))


class TestProbeClassifier:
    def test_linearly_separable_styles(self):
        clips = toy_corpus(n_per_combo=4, n_joints=2, frame_len=24, seed=4)
        labels = [c.style_label for c in clips]
        clf = train_probe_classifier(clips, labels, seed=0)
        assert accuracy(clf, clips, labels) >= 0.99

    def test_feature_layer_width(self):
        clips = toy_corpus(n_per_combo=2, n_joints=2, frame_len=16, seed=5)
        clf = train_probe_classifier(clips, [c.style_label for c in clips],
                                     seed=0, d_hidden=12, epochs=3)
        assert clf.features_of(clips[0]).shape == (12,)

    def test_label_permutation_symmetric(self):
        clips = toy_corpus(n_per_combo=4, n_joints=2, frame_len=24, seed=6)
        labels = [c.style_label for c in clips]
        swapped = ["z_" + y for y in labels]  # same partition, new names
        acc1 = accuracy(train_probe_classifier(clips, labels, seed=3), clips, labels)
        acc2 = accuracy(train_probe_classifier(clips, swapped, seed=3), clips, swapped)
        assert acc1 == pytest.approx(acc2, abs=0.15)

    def test_degenerate_labels_rejected(self):
        clips = toy_corpus(n_per_combo=4, n_joints=2, frame_len=16, seed=7)
        with pytest.raises(MetricError, match="two classes"):
            train_probe_classifier(clips, ["same"] * len(clips))
        with pytest.raises(MetricError, match="4 samples"):
            train_probe_classifier(clips, ["a"] + ["b"] * (len(clips) - 1))

    def test_accuracy_edge_cases(self):
        clips = toy_corpus(n_per_combo=4, n_joints=2, frame_len=24, seed=8)
        labels = [c.style_label for c in clips]
        clf = train_probe_classifier(clips, labels, seed=1)
        assert accuracy(clf, [], []) == 0.0
        wrong = ["not_a_style"] * len(clips)
        assert accuracy(clf, clips, wrong) == 0.0
        half = [clf.predict(c) for c in clips[: len(clips) // 2]] + wrong[len(clips) // 2 :]
        assert accuracy(clf, clips, half) == pytest.approx(0.5, abs=0.01)

    def test_accuracy_order_invariant(self):
        clips = toy_corpus(n_per_combo=4, n_joints=2, frame_len=24, seed=9)
        labels = [c.style_label for c in clips]
        clf = train_probe_classifier(clips, labels, seed=2)
        perm = np.random.default_rng(0).permutation(len(clips))
        shuffled = accuracy(clf, [clips[i] for i in perm], [labels[i] for i in perm])
        assert shuffled == accuracy(clf, clips, labels)


class TestSeparationReport:
    def test_skew_kurtosis_signal_found_only_by_four_moments(self):
        clips = moment_matched_corpus(n_per_style=40, seed=10)
        report = separation_report(clips, seed=0)
        assert report.acc_four_moment >= 0.95
        assert report.acc_two_moment <= 0.60
        assert -1.0 <= report.silhouette_two <= 1.0
        assert -1.0 <= report.silhouette_four <= 1.0

    def test_duplicated_clips_give_chance_accuracy(self):
        base = moment_matched_corpus(n_per_style=12, seed=11)[:12]
        duplicated = []
        for clip in base:
            for label in ("a", "b"):
                copy = MotionClip(clip.features.copy(), clip.mask.copy(),
                                  clip.skeleton, clip.frame_time, label, None)
                duplicated.append(copy)
        report = separation_report(duplicated, seed=0)
        assert abs(report.acc_two_moment - 0.5) <= 0.2
        assert abs(report.acc_four_moment - 0.5) <= 0.2
        assert report.silhouette_four < 0

    def test_descriptor_shapes(self):
        clips = moment_matched_corpus(n_per_style=3, seed=12)
        x2, x4 = moment_descriptors(clips)
        width = clips[0].features.shape[0] * clips[0].features.shape[2]
        assert x2.shape == (6, 2 * width)
        assert x4.shape == (6, 4 * width)

    def test_csv_export(self, tmp_path):
        clips = moment_matched_corpus(n_per_style=6, seed=13)
        path = tmp_path / "descriptors.csv"
        separation_report(clips, seed=0, csv_path=path)
        assert len(clips) == 12
        lines = path.read_text().splitlines()
        assert lines[0].startswith("sequence_id,style_label,d0")
        assert len(lines) == 1 + len(clips)

    def test_single_style_rejected(self):
        clips = moment_matched_corpus(n_per_style=4, seed=14)
        for c in clips:
            c.style_label = "only"
        with pytest.raises(MetricError, match="two styles"):
            separation_report(clips)
