"""Benchmark metrics and the Gaussian-utilization audit suite.

Grid metrics: binary occupied-vs-empty IoU and the per-class mean IoU over
non-empty classes, both driven by a confusion matrix.

Utilization metrics for a Gaussian set against a reference grid:

* percentage of Gaussians whose mean sits in an occupied voxel;
* mean L1 distance from each mean to its nearest occupied voxel center;
* overall overlap: summed 90%-confidence ellipsoid volumes over the
  Monte Carlo estimate of the union coverage volume;
* individual overlap: mean summed pairwise Bhattacharyya coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    GaussianPrimitive,
    GaussianSet,
    build_covariance,
    covariance_matrices,
    inverse_covariance_matrices,
)
from .grid import VoxelGrid

# Chi-square critical value at 90% for three degrees of freedom; the
# Mahalanobis ball d2 <= CHI2 is the 90% confidence ellipsoid.
CHI2_3DOF_90 = 6.251

# Samples per Monte Carlo chunk; fixed so the per-chunk random streams,
# and therefore the estimate, do not depend on execution schedule.
_MC_CHUNK = 1 << 17


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are prediction."""

    counts: np.ndarray

    @classmethod
    def from_grids(cls, pred: VoxelGrid, gt: VoxelGrid) -> "ConfusionMatrix":
        if not pred.spec.describes_same_grid(gt.spec):
            raise ValueError("prediction and ground-truth grids must share one spec")
        k = gt.spec.num_classes_total
        joint = gt.labels_flat.astype(np.int64) * k + pred.labels_flat.astype(np.int64)
        counts = np.bincount(joint, minlength=k * k).reshape(k, k)
        return cls(counts=counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where a class appears in neither grid."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - np.diag(self.counts)
        with np.errstate(invalid="ignore"):
            return np.where(union > 0, tp / union, np.nan)


def iou(pred: VoxelGrid, gt: VoxelGrid) -> float:
    """Binary occupied-vs-empty IoU; two entirely empty grids score 1."""
    if not pred.spec.describes_same_grid(gt.spec):
        raise ValueError("prediction and ground-truth grids must share one spec")
    p = pred.occupied_mask
    g = gt.occupied_mask
    tp = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return tp / union


def miou(pred: VoxelGrid, gt: VoxelGrid, include_absent: bool = False) -> float:
    """Mean IoU over the non-empty classes.

    Classes absent from both grids have an undefined 0/0 IoU and are
    excluded from the mean by default; ``include_absent`` counts them as 0
    instead. If every semantic class is absent from both grids the two
    grids agree perfectly on emptiness and the result is 1.
    """
    cm = ConfusionMatrix.from_grids(pred, gt)
    per_class = cm.per_class_iou()[1:]
    if include_absent:
        per_class = np.nan_to_num(per_class, nan=0.0)
    defined = per_class[~np.isnan(per_class)]
    if defined.size == 0:
        return 1.0
    return float(defined.mean())


def perc_correct(gs: GaussianSet, gt: VoxelGrid) -> float:
    """Percentage of Gaussians whose mean lies in an occupied voxel.

    Means outside the grid count as incorrectly placed.
    """
    idx, inside = gt.spec.point_to_voxel(gs.means)
    occupied = gt.labels[idx[:, 0], idx[:, 1], idx[:, 2]] != 0
    return 100.0 * float(np.count_nonzero(inside & occupied)) / len(gs)

def mean_nearest_dist(gs: GaussianSet, gt: VoxelGrid) -> float:
    """Mean L1 distance from each Gaussian mean to the nearest occupied
    voxel center, averaged over all Gaussians."""
    centers = gt.occupied_centers()
    if centers.shape[0] == 0:
        raise ValueError("ground truth has no occupied voxels; distance undefined")
    dists, _ = cKDTree(centers).query(gs.means, k=1, p=1)
    return float(np.mean(dists))


def ellipsoid_volume_90(g: GaussianPrimitive) -> float:
    """Volume of the 90% confidence ellipsoid,
    ``(4/3) pi chi2^{3/2} sqrt(det Sigma)``."""
    return (4.0 / 3.0) * np.pi * CHI2_3DOF_90**1.5 * float(np.prod(g.scale))


def _bbox_arrays(scene_bbox) -> tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(scene_bbox[0], dtype=np.float64)
    hi = np.asarray(scene_bbox[1], dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
        raise ValueError("scene_bbox must be (min, max) 3-vectors with max > min")
    return lo, hi


def _chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    # One independent counter-based stream per (seed, chunk); sample i of
    # the estimate is reproducible no matter how chunks are scheduled.
    key = (np.uint64(seed).item() << 64) | chunk_index
    return np.random.Generator(np.random.Philox(key=key))


def mc_coverage_volume(gs: GaussianSet, scene_bbox, mc_samples: int, seed: int) -> float:
    """Monte Carlo volume of the union of 90% ellipsoids.

    Uniform samples in the scene bounding box are tested against every
    Gaussian's ellipsoid; the union volume is the box volume times the hit
    fraction. Raises when not a single sample lands inside.
    """
    lo, hi = _bbox_arrays(scene_bbox)
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    inv_cov = inverse_covariance_matrices(gs)
    means = gs.means
    n_in = 0
    done = 0
    chunk_index = 0
    while done < mc_samples:
        m = min(_MC_CHUNK, mc_samples - done)
        rng = _chunk_rng(seed, chunk_index)
        pts = rng.uniform(lo, hi, size=(m, 3))
        inside = np.zeros(m, dtype=bool)
        for p in range(len(gs)):
            todo = ~inside
            if not np.any(todo):
                break
            d = pts[todo] - means[p]
            d2 = np.einsum("na,ab,nb->n", d, inv_cov[p], d)
            inside[todo] = d2 <= CHI2_3DOF_90
        n_in += int(np.count_nonzero(inside))
        done += m
        chunk_index += 1
    if n_in == 0:
        raise ValueError("no coverage detected: no Monte Carlo sample hit any ellipsoid")
    box_volume = float(np.prod(hi - lo))
    return box_volume * n_in / mc_samples


def overall_overlap(gs: GaussianSet, scene_bbox, mc_samples: int, seed: int) -> float:
    """Summed 90% ellipsoid volumes over the Monte Carlo coverage volume.

    1.0 means the ellipsoids tile their union without overlap; higher
    values mean redundant coverage.
    """
    total = sum(ellipsoid_volume_90(gs.primitive(i)) for i in range(len(gs)))
    return total / mc_coverage_volume(gs, scene_bbox, mc_samples, seed)


def bhattacharyya_coef(gi: GaussianPrimitive, gj: GaussianPrimitive) -> float:
    """Bhattacharyya coefficient between two Gaussians, in (0, 1].

    Computed in log space from the average covariance; exactly 1 for
    identical Gaussians.
    """
    ci = build_covariance(gi).covariance
    cj = build_covariance(gj).covariance
    avg = 0.5 * (ci + cj)
    # One determinant routine for all three matrices: identical inputs then
    # cancel exactly and BC(g, g) is exactly 1.
    log_det_i = np.linalg.slogdet(ci)[1]
    log_det_j = np.linalg.slogdet(cj)[1]
    log_det_avg = np.linalg.slogdet(avg)[1]
    diff = gi.mean - gj.mean
    quad = float(diff @ np.linalg.solve(avg, diff))
    log_bc = 0.25 * (log_det_i + log_det_j) - 0.5 * log_det_avg - 0.125 * quad
    return float(np.exp(log_bc))


def indiv_overlap(gs: GaussianSet) -> float:
    """Mean over Gaussians of the summed Bhattacharyya coefficients to all
    other Gaussians; 0 for a single Gaussian."""
    p = len(gs)
    if p == 1:
        return 0.0
    covs = covariance_matrices(gs)
    log_dets = np.linalg.slogdet(covs)[1]
    ii, jj = np.triu_indices(p, k=1)
    avg = 0.5 * (covs[ii] + covs[jj])
    log_det_avg = np.linalg.slogdet(avg)[1]
    diff = gs.means[ii] - gs.means[jj]
    quad = np.einsum("na,na->n", diff, np.linalg.solve(avg, diff[..., None])[..., 0])
    bc = np.exp(0.25 * (log_dets[ii] + log_dets[jj]) - 0.5 * log_det_avg - 0.125 * quad)
    per_gaussian = np.bincount(ii, weights=bc, minlength=p) + np.bincount(jj, weights=bc, minlength=p)
    return float(per_gaussian.mean())


@dataclass(frozen=True)
class UtilizationReport:
    """Position and overlap audit of a Gaussian set against a grid."""

    perc_correct: float
    mean_dist: float
    overall_overlap: float
    indiv_overlap: float
    mc_samples: int


def utilization_report(
    gs: GaussianSet,
    gt: VoxelGrid,
    mc_samples: int = 1_000_000,
    seed: int = 0,
) -> UtilizationReport:
    """Run the full audit; the scene bounding box is the grid extent."""
    bbox = (gt.spec.min_corner, gt.spec.max_corner)
    return UtilizationReport(
        perc_correct=perc_correct(gs, gt),
        mean_dist=mean_nearest_dist(gs, gt),
        overall_overlap=overall_overlap(gs, bbox, mc_samples, seed),
        indiv_overlap=indiv_overlap(gs),
        mc_samples=int(mc_samples),
    )
