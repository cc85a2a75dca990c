"""Grid metrics and the utilization audit against independent oracles."""

import numpy as np
import pytest

from gaussocc.core import GaussianPrimitive, GaussianSet
from gaussocc.grid import GridSpec, VoxelGrid
from gaussocc.metrics import (
    CHI2_3DOF_90,
    ConfusionMatrix,
    bhattacharyya_coef,
    ellipsoid_volume_90,
    indiv_overlap,
    iou,
    mc_coverage_volume,
    mean_nearest_dist,
    miou,
    overall_overlap,
    perc_correct,
    utilization_report,
)

from conftest import random_gaussian_set


def grid_of(labels, classes=4):
    labels = np.asarray(labels, dtype=np.uint16)
    spec = GridSpec(
        min_corner=np.zeros(3),
        max_corner=np.array(labels.shape, dtype=float),
        resolution=np.array(labels.shape),
        num_classes_total=classes,
    )
    return VoxelGrid(spec=spec, labels=labels)


def random_grid(rng, classes=4, res=(8, 8, 8)):
    return grid_of(rng.integers(0, classes, size=res), classes=classes)


def iou_oracle(pred, gt):
    """Set-arithmetic recomputation."""
    p = {tuple(v) for v in np.argwhere(pred.labels != 0)}
    g = {tuple(v) for v in np.argwhere(gt.labels != 0)}
    union = p | g
    if not union:
        return 1.0
    return len(p & g) / len(union)


def miou_oracle(pred, gt, classes):
    vals = []
    for c in range(1, classes):
        p = {tuple(v) for v in np.argwhere(pred.labels == c)}
        g = {tuple(v) for v in np.argwhere(gt.labels == c)}
        union = p | g
        if union:
            vals.append(len(p & g) / len(union))
    return sum(vals) / len(vals) if vals else 1.0


def isotropic(mean, scale=1.0, logits=(0.0, 0.0)):
    return GaussianPrimitive(
        mean=mean, scale=(scale,) * 3, rotation=(1, 0, 0, 0), opacity=1.0, semantics=logits
    )


class TestIou:
    def test_perfect_agreement(self):
        rng = np.random.default_rng(40)
        g = random_grid(rng)
        assert iou(g, g) == 1.0

    def test_empty_prediction(self):
        rng = np.random.default_rng(41)
        gt = random_grid(rng)
        pred = grid_of(np.zeros_like(gt.labels))
        assert iou(pred, gt) == 0.0

    def test_empty_vs_empty_defined_as_one(self):
        empty = grid_of(np.zeros((4, 4, 4)))
        assert iou(empty, empty) == 1.0

    def test_matches_set_arithmetic_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            pred, gt = random_grid(rng), random_grid(rng)
            assert iou(pred, gt) == iou_oracle(pred, gt)

    def test_spec_mismatch_rejected(self):
        a = grid_of(np.zeros((4, 4, 4)))
        b = grid_of(np.zeros((4, 4, 5)))
        with pytest.raises(ValueError, match="share one spec"):
            iou(a, b)


class TestMiou:
    def test_perfect_agreement(self):
        rng = np.random.default_rng(43)
        g = random_grid(rng)
        assert miou(g, g) == 1.0

    def test_relabeled_class_matches_confusion_oracle(self):
        rng = np.random.default_rng(44)
        gt = random_grid(rng)
        labels = gt.labels.copy()
        labels[labels == 1] = 2  # collapse class 1 into class 2
        pred = grid_of(labels)
        assert miou(pred, gt) == pytest.approx(miou_oracle(pred, gt, 4), abs=0)
        assert miou(pred, gt) < miou(gt, gt)

    def test_half_overlap_two_class_toy(self):
        # One class, prediction shifted to overlap half the ground truth:
        # IoU = 2/6... constructed here with 50% overlap per the toy layout.
        gt = np.zeros((4, 1, 1), dtype=np.uint16)
        gt[:2] = 1
        pred = np.zeros((4, 1, 1), dtype=np.uint16)
        pred[1:3] = 1
        assert miou(grid_of(pred, classes=2), grid_of(gt, classes=2)) == pytest.approx(1.0 / 3.0)

    def test_absent_classes_excluded_by_default(self):
        gt = np.zeros((3, 3, 1), dtype=np.uint16)
        gt[0] = 1
        pred = gt.copy()
        assert miou(grid_of(pred), grid_of(gt)) == 1.0
        assert miou(grid_of(pred), grid_of(gt), include_absent=True) == pytest.approx(1.0 / 3.0)

    def test_matches_oracle_on_random_grids(self):
        rng = np.random.default_rng(45)
        for _ in range(25):
            pred, gt = random_grid(rng), random_grid(rng)
            assert miou(pred, gt) == miou_oracle(pred, gt, 4)


class TestConfusionMatrix:
    def test_total_counts(self):
        rng = np.random.default_rng(46)
        pred, gt = random_grid(rng), random_grid(rng)
        cm = ConfusionMatrix.from_grids(pred, gt)
        assert cm.total == gt.spec.num_voxels

    def test_rows_are_ground_truth(self):
        gt = grid_of(np.full((2, 2, 2), 1, dtype=np.uint16))
        pred = grid_of(np.full((2, 2, 2), 2, dtype=np.uint16))
        cm = ConfusionMatrix.from_grids(pred, gt)
        assert cm.counts[1, 2] == 8
        assert cm.counts[2, 1] == 0


class TestPositionMetrics:
    def _occupied_grid(self):
        labels = np.zeros((8, 8, 8), dtype=np.uint16)
        labels[2:5, 2:5, 2:5] = 1
        return grid_of(labels)

    def test_all_means_on_occupied_centers(self):
        gt = self._occupied_grid()
        centers = gt.occupied_centers()
        gs = GaussianSet.from_primitives([isotropic(c) for c in centers[:10]])
        assert perc_correct(gs, gt) == 100.0
        assert mean_nearest_dist(gs, gt) == 0.0

    def test_all_means_outside_grid(self):
        gt = self._occupied_grid()
        gs = GaussianSet.from_primitives([isotropic((20, 20, 20)), isotropic((-5, 0, 0))])
        assert perc_correct(gs, gt) == 0.0

    def test_l1_offset_case(self):
        labels = np.zeros((8, 8, 8), dtype=np.uint16)
        labels[4, 4, 4] = 1
        gt = grid_of(labels)
        center = gt.occupied_centers()[0]
        gs = GaussianSet.from_primitives([isotropic(center + np.array([0.1, 0.2, 0.0]))])
        assert mean_nearest_dist(gs, gt) == pytest.approx(0.3, abs=1e-12)

    def test_perc_matches_containment_oracle(self):
        rng = np.random.default_rng(47)
        gt = random_grid(rng, res=(6, 6, 6))
        gs = random_gaussian_set(rng, 40, 2, spread=4.0)
        means = rng.uniform(-2, 8, size=(40, 3))
        gs = GaussianSet(
            means=means, scales=gs.scales, rotations=gs.rotations, opacities=gs.opacities, logits=gs.logits
        )
        correct = 0
        for m in means:
            idx = np.floor(m).astype(int)
            if np.all(idx >= 0) and np.all(idx < 6) and gt.labels[tuple(idx)] != 0:
                correct += 1
        assert perc_correct(gs, gt) == pytest.approx(100.0 * correct / 40)

    def test_dist_matches_exhaustive_scan(self):
        rng = np.random.default_rng(48)
        gt = random_grid(rng, res=(6, 6, 6))
        means = rng.uniform(-2, 8, size=(100, 3))
        gs = GaussianSet(
            means=means,
            scales=np.full((100, 3), 0.5),
            rotations=np.tile([1.0, 0, 0, 0], (100, 1)),
            opacities=np.ones(100),
            logits=np.zeros((100, 3)),
        )
        centers = gt.occupied_centers()
        expected = np.mean(
            [np.min(np.sum(np.abs(centers - m), axis=1)) for m in means]
        )
        assert mean_nearest_dist(gs, gt) == pytest.approx(expected, rel=1e-12)

    def test_empty_ground_truth_rejected(self):
        gt = grid_of(np.zeros((4, 4, 4)))
        gs = GaussianSet.from_primitives([isotropic((1, 1, 1))])
        with pytest.raises(ValueError, match="no occupied"):
            mean_nearest_dist(gs, gt)


class TestEllipsoidVolume:
    UNIT_VOLUME = 4.0 / 3.0 * np.pi * CHI2_3DOF_90**1.5

    def test_unit_closed_form(self):
        assert ellipsoid_volume_90(isotropic((0, 0, 0))) == pytest.approx(self.UNIT_VOLUME, rel=1e-12)
        assert self.UNIT_VOLUME == pytest.approx(65.4655, abs=5e-4)

    def test_scaling_doubles_exactly(self):
        g = GaussianPrimitive(
            mean=(0, 0, 0), scale=(2, 1, 1), rotation=(1, 0, 0, 0), opacity=1.0, semantics=(0.0,)
        )
        assert ellipsoid_volume_90(g) == 2.0 * self.UNIT_VOLUME

    def test_scaling_eighth_exactly(self):
        g = GaussianPrimitive(
            mean=(0, 0, 0), scale=(0.5, 0.5, 0.5), rotation=(1, 0, 0, 0), opacity=1.0, semantics=(0.0,)
        )
        assert ellipsoid_volume_90(g) == 0.125 * self.UNIT_VOLUME


class TestOverallOverlap:
    BBOX = (np.array([-5.0, -5.0, -5.0]), np.array([5.0, 5.0, 5.0]))

    def test_single_gaussian_is_unity(self):
        gs = GaussianSet.from_primitives([isotropic((0, 0, 0))])
        assert overall_overlap(gs, self.BBOX, 1_000_000, seed=1) == pytest.approx(1.0, rel=0.02)

    def test_coincident_pair_doubles(self):
        gs = GaussianSet.from_primitives([isotropic((0, 0, 0)), isotropic((0, 0, 0))])
        assert overall_overlap(gs, self.BBOX, 1_000_000, seed=2) == pytest.approx(2.0, rel=0.02)

    def test_disjoint_pair_is_unity(self):
        bbox = (np.array([-150.0, -5.0, -5.0]), np.array([150.0, 5.0, 5.0]))
        gs = GaussianSet.from_primitives([isotropic((-100, 0, 0)), isotropic((100, 0, 0))])
        assert overall_overlap(gs, bbox, 1_000_000, seed=3) == pytest.approx(1.0, rel=0.02)

    def test_deterministic_given_seed(self):
        gs = GaussianSet.from_primitives([isotropic((0, 0, 0))])
        a = overall_overlap(gs, self.BBOX, 200_000, seed=9)
        b = overall_overlap(gs, self.BBOX, 200_000, seed=9)
        assert a == b

    def test_no_coverage_rejected(self):
        gs = GaussianSet.from_primitives([isotropic((1000, 0, 0), scale=0.01)])
        with pytest.raises(ValueError, match="no coverage"):
            overall_overlap(gs, self.BBOX, 10_000, seed=0)

    def test_monte_carlo_error_scales_as_inverse_sqrt(self):
        gs = GaussianSet.from_primitives([isotropic((0, 0, 0))])
        truth = ellipsoid_volume_90(gs.primitive(0))
        stds = []
        for n in (10_000, 100_000, 1_000_000):
            estimates = [
                mc_coverage_volume(gs, self.BBOX, n, seed=s) for s in range(12)
            ]
            stds.append(np.std([e - truth for e in estimates]))
        # each decade should shrink the spread by roughly sqrt(10)
        assert 1.5 < stds[0] / stds[1] < 6.5
        assert 1.5 < stds[1] / stds[2] < 6.5


class TestBhattacharyya:
    def test_identical_is_exactly_one(self):
        g = GaussianPrimitive(
            mean=(1, 2, 3), scale=(0.7, 1.3, 2.0), rotation=(0.5, 0.5, 0.5, 0.5), opacity=1.0, semantics=(0.0,)
        )
        assert bhattacharyya_coef(g, g) == 1.0

    def test_equal_covariance_closed_form(self):
        a = isotropic((0, 0, 0))
        b = isotropic((2, 0, 0))
        assert bhattacharyya_coef(a, b) == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(50)
        for _ in range(10):
            ga = random_gaussian_set(rng, 1, 2).primitive(0)
            gb = random_gaussian_set(rng, 1, 2).primitive(0)
            assert bhattacharyya_coef(ga, gb) == pytest.approx(bhattacharyya_coef(gb, ga), abs=1e-12)

    def test_strictly_decreasing_with_separation(self):
        prev = 1.1
        for sep in (0.0, 0.5, 1.0, 2.0, 4.0):
            val = bhattacharyya_coef(isotropic((0, 0, 0)), isotropic((sep, 0, 0)))
            assert val < prev
            prev = val


class TestIndivOverlap:
    def test_singleton_is_zero(self):
        gs = GaussianSet.from_primitives([isotropic((0, 0, 0))])
        assert indiv_overlap(gs) == 0.0

    def test_identical_pair_is_one(self):
        gs = GaussianSet.from_primitives([isotropic((0, 0, 0)), isotropic((0, 0, 0))])
        assert indiv_overlap(gs) == 1.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(51)
        gs = random_gaussian_set(rng, 50, 2)
        total = 0.0
        for i in range(50):
            for j in range(50):
                if i != j:
                    total += bhattacharyya_coef(gs.primitive(i), gs.primitive(j))
        assert indiv_overlap(gs) == pytest.approx(total / 50, rel=1e-10)

    def test_permutation_invariance_of_utilization_metrics(self):
        rng = np.random.default_rng(52)
        gs = random_gaussian_set(rng, 12, 3, spread=3.0)
        perm = rng.permutation(12)
        shuffled = GaussianSet.from_primitives([gs.primitive(int(i)) for i in perm])
        labels = np.zeros((8, 8, 8), dtype=np.uint16)
        labels[3:6, 3:6, 3:6] = 1
        gt = grid_of(labels)
        assert perc_correct(gs, gt) == perc_correct(shuffled, gt)
        assert mean_nearest_dist(gs, gt) == pytest.approx(mean_nearest_dist(shuffled, gt), rel=1e-12)
        assert indiv_overlap(gs) == pytest.approx(indiv_overlap(shuffled), rel=1e-10)
        bbox = (gt.spec.min_corner, gt.spec.max_corner)
        assert overall_overlap(gs, bbox, 100_000, seed=4) == overall_overlap(
            shuffled, bbox, 100_000, seed=4
        )

    def test_utilization_report_fields(self):
        rng = np.random.default_rng(53)
        labels = np.zeros((8, 8, 8), dtype=np.uint16)
        labels[2:6, 2:6, 2:6] = 2
        gt = grid_of(labels)
        gs = GaussianSet.from_primitives([isotropic(c) for c in gt.occupied_centers()[:6]])
        rep = utilization_report(gs, gt, mc_samples=50_000, seed=5)
        assert rep.perc_correct == 100.0
        assert rep.mean_dist == 0.0
        assert rep.overall_overlap > 0.0
        assert rep.indiv_overlap >= 0.0
        assert rep.mc_samples == 50_000
