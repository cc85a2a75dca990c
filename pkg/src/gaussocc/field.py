"""Occupancy field evaluation over a set of semantic Gaussians.

Two models are implemented:

* the probabilistic superposition: each Gaussian induces an occupancy
  probability ``exp(-d2/2)`` that is 1 at its center, geometry is the
  complement-product aggregate ``1 - prod(1 - alpha_i)``, semantics are
  the mixture-posterior expectation of per-Gaussian softmax distributions,
  and the composed prediction is ``[1 - alpha, alpha * e]`` with the empty
  class first;
* the legacy additive model: raw opacity-weighted Gaussian values times
  raw logits, summed, unbounded, kept for baseline comparison (its logits
  include the empty class as channel 0).

The aggregate runs in log space: per Gaussian the log survival term is
``log(-expm1(-d2/2))`` which is exact both near the center (where it goes
to -inf, forcing the aggregate to exactly 1) and in the far field. A query
point farther than the Mahalanobis cutoff from every Gaussian contributes
no term, so its aggregate is exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .core import (
    GaussianPrimitive,
    GaussianSet,
    log_determinants,
    mahalanobis_sq,
    rotation_matrices,
)

# Below this density the mixture posterior is treated as undefined and the
# configured fallback takes over.
GMM_DENOMINATOR_FLOOR = 1e-300

_LOG_GMM_FLOOR = np.log(GMM_DENOMINATOR_FLOOR)
_LOG_2PI = np.log(2.0 * np.pi)
_DEFAULT_CHUNK = 8192
_LN2 = np.log(2.0)


def log1mexp(a: np.ndarray) -> np.ndarray:
    """log(1 - exp(-a)) for a >= 0, accurate at both ends; -inf at a = 0."""
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(divide="ignore"):
        small = np.log(-np.expm1(-np.minimum(a, _LN2)))
        large = np.log1p(-np.exp(-np.maximum(a, _LN2)))
    return np.where(a < _LN2, small, large)


@dataclass(frozen=True)
class EvalOptions:
    """Evaluation policy shared by all field operations.

    ``cutoff_mahalanobis_sq`` drops any Gaussian whose squared Mahalanobis
    distance to the query point exceeds it (contribution exactly zero);
    ``None`` or ``inf`` disables the cutoff. ``neighbor_index`` turns on a
    uniform-cell index over the cutoff bounding boxes, which changes no
    results, only which Gaussians are visited. ``gmm_fallback`` names the
    policy for points where the mixture denominator vanishes; only
    ``"uniform"`` is defined.
    """

    cutoff_mahalanobis_sq: Optional[float] = 25.0
    neighbor_index: bool = False
    gmm_fallback: str = "uniform"

    def __post_init__(self):
        c = self.cutoff_mahalanobis_sq
        if c is not None and not c > 0.0:
            raise ValueError(f"cutoff_mahalanobis_sq must be > 0, got {c}")
        if self.gmm_fallback != "uniform":
            raise ValueError(f"unknown gmm_fallback policy {self.gmm_fallback!r}")

    @property
    def cutoff(self) -> float:
        c = self.cutoff_mahalanobis_sq
        return np.inf if c is None else float(c)


@dataclass(frozen=True)
class FieldSample:
    """Everything the field knows at one query point."""

    geometry_prob: float
    semantics_expectation: np.ndarray
    full_prediction: np.ndarray


class _CellIndex:
    """Hash grid over the cutoff bounding boxes of the Gaussians.

    The axis-aligned box enclosing one Gaussian's cutoff ellipsoid has
    half-width ``sqrt(cutoff * Sigma[a, a])`` along world axis ``a``. Cell
    size is the largest box edge, so every box spans at most two cells per
    axis and a point's own cell lists every Gaussian whose box can contain
    it. Skipped Gaussians are exactly those the cutoff already zeroes, so
    indexed evaluation returns the same values as the dense path.
    """

    def __init__(self, means: np.ndarray, cov_diag: np.ndarray, cutoff: float):
        half = np.sqrt(cutoff * cov_diag)  # (P, 3)
        self.cell = float(max(2.0 * half.max(), 1e-6))
        lo = np.floor((means - half) / self.cell).astype(np.int64)
        hi = np.floor((means + half) / self.cell).astype(np.int64)
        buckets: dict[tuple[int, int, int], list[int]] = {}
        for p in range(means.shape[0]):
            for ix in range(lo[p, 0], hi[p, 0] + 1):
                for iy in range(lo[p, 1], hi[p, 1] + 1):
                    for iz in range(lo[p, 2], hi[p, 2] + 1):
                        buckets.setdefault((ix, iy, iz), []).append(p)
        self._buckets = {k: np.array(v, dtype=np.int64) for k, v in buckets.items()}
        self._empty = np.empty(0, dtype=np.int64)

    def groups(self, points: np.ndarray) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        keys = np.floor(points / self.cell).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(uniq.shape[0] + 1))
        for u in range(uniq.shape[0]):
            pts = order[bounds[u] : bounds[u + 1]]
            prims = self._buckets.get(tuple(uniq[u]), self._empty)
            yield pts, prims


class FieldEvaluator:
    """Batch evaluator binding one GaussianSet to one EvalOptions.

    Precomputes the inverse covariances, log-determinants and softmaxed
    semantics once; all methods take an (N, 3) array of query points and
    are pure and thread-safe.
    """

    def __init__(self, gs: GaussianSet, opts: EvalOptions | None = None, chunk: int = _DEFAULT_CHUNK):
        self.gs = gs
        self.opts = opts or EvalOptions()
        self._chunk = int(chunk)
        self._means = gs.means
        self._rot = rotation_matrices(gs.rotations)
        self._scales = gs.scales
        self._log_det = log_determinants(gs)
        with np.errstate(divide="ignore"):
            self._log_opac = np.log(gs.opacities)
        self._sem = softmax(gs.logits, axis=1)
        self._cutoff = self.opts.cutoff
        self._index = None
        if self.opts.neighbor_index and np.isfinite(self._cutoff):
            cov_diag = np.einsum("pab,pb,pab->pa", self._rot, gs.scales**2, self._rot)
            self._index = _CellIndex(self._means, cov_diag, self._cutoff)

    # -- low-level blocks --------------------------------------------------

    def _d2(self, points: np.ndarray, prims: np.ndarray | None = None) -> np.ndarray:
        # Local-frame form sum(((R^T (x - m)) / s)^2): exact, nonnegative,
        # and the same arithmetic as the primitive-level distance.
        rot = self._rot if prims is None else self._rot[prims]
        scales = self._scales if prims is None else self._scales[prims]
        mu = self._means if prims is None else self._means[prims]
        diff = points[None, :, :] - mu[:, None, :]  # (p, n, 3)
        local = diff @ rot
        return np.sum((local / scales[:, None, :]) ** 2, axis=2).T

    def _blocks(self, points: np.ndarray) -> Iterator[tuple[np.ndarray, np.ndarray | None, np.ndarray]]:
        """Yield (point indices, primitive indices or None for all, d2 block)."""
        n = points.shape[0]
        if self._index is None:
            for start in range(0, n, self._chunk):
                idx = np.arange(start, min(start + self._chunk, n))
                yield idx, None, self._d2(points[idx])
        else:
            for pts, prims in self._index.groups(points):
                if prims.size == 0:
                    yield pts, prims, np.empty((pts.size, 0))
                    continue
                for start in range(0, pts.size, self._chunk):
                    idx = pts[start : start + self._chunk]
                    yield idx, prims, self._d2(points[idx], prims)

    def _log_survival_terms(self, d2: np.ndarray) -> np.ndarray:
        """Per-Gaussian ``log(1 - alpha_i)``; exactly 0 beyond the cutoff,
        -inf at a Gaussian center."""
        li = log1mexp(0.5 * d2)
        if np.isfinite(self._cutoff):
            li[d2 > self._cutoff] = 0.0
        return li

    def _alpha_from_d2(self, d2: np.ndarray) -> np.ndarray:
        li = self._log_survival_terms(d2)
        alpha = -np.expm1(np.sum(li, axis=1))
        # The aggregate can never fall below the largest single term; guard
        # against the one-ulp loss of the exp/log round trip.
        if d2.shape[1]:
            d2_eff = d2 if not np.isfinite(self._cutoff) else np.where(d2 > self._cutoff, np.inf, d2)
            alpha_max = np.exp(-0.5 * np.min(d2_eff, axis=1))
            alpha = np.maximum(alpha, alpha_max)
        return np.clip(alpha, 0.0, 1.0)

    def _semantics_from_d2(self, d2: np.ndarray, prims: np.ndarray | None) -> np.ndarray:
        log_opac = self._log_opac if prims is None else self._log_opac[prims]
        log_det = self._log_det if prims is None else self._log_det[prims]
        sem = self._sem if prims is None else self._sem[prims]
        c = self.gs.num_classes
        if d2.shape[1] == 0:
            return np.full((d2.shape[0], c), 1.0 / c)
        w = log_opac[None, :] - 0.5 * log_det[None, :] - 0.5 * d2
        if np.isfinite(self._cutoff):
            w = np.where(d2 > self._cutoff, -np.inf, w)
        with np.errstate(invalid="ignore"):
            log_norm = logsumexp(w, axis=1)
        # Fallback where the true mixture density underflows; the 3D normal
        # normalizer (2 pi)^{-3/2} is part of that density.
        undefined = ~np.isfinite(log_norm) | (log_norm - 1.5 * _LOG_2PI < _LOG_GMM_FLOOR)
        safe_norm = np.where(np.isfinite(log_norm), log_norm, 0.0)
        with np.errstate(invalid="ignore"):
            post = np.exp(w - safe_norm[:, None])
        e = post @ sem
        e[undefined] = 1.0 / c
        return e

    def _require_opacity(self):
        if not np.any(self.gs.opacities > 0.0):
            raise ValueError("invalid set: all opacities are zero, mixture prior is undefined")

    # -- public batch API --------------------------------------------------

    def alpha(self, points: np.ndarray) -> np.ndarray:
        """(N,) aggregate occupancy probabilities."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty(points.shape[0])
        for idx, _, d2 in self._blocks(points):
            out[idx] = self._alpha_from_d2(d2) if d2.shape[1] else 0.0
        return out

    def semantics(self, points: np.ndarray) -> np.ndarray:
        """(N, C) mixture-expected class distributions."""
        self._require_opacity()
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty((points.shape[0], self.gs.num_classes))
        for idx, prims, d2 in self._blocks(points):
            out[idx] = self._semantics_from_d2(d2, prims)
        return out

    def compose(self, points: np.ndarray) -> np.ndarray:
        """(N, C + 1) composed predictions, empty class first."""
        self._require_opacity()
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c = self.gs.num_classes
        out = np.empty((points.shape[0], c + 1))
        for idx, prims, d2 in self._blocks(points):
            if d2.shape[1]:
                a = self._alpha_from_d2(d2)
                e = self._semantics_from_d2(d2, prims)
            else:
                a = np.zeros(idx.size)
                e = np.full((idx.size, c), 1.0 / c)
            out[idx, 0] = 1.0 - a
            out[idx, 1:] = a[:, None] * e
        return out

    def legacy(self, points: np.ndarray) -> np.ndarray:
        """(N, channels) additive-model outputs; raw, unnormalized."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty((points.shape[0], self.gs.num_classes))
        for idx, prims, d2 in self._blocks(points):
            if not d2.shape[1]:
                out[idx] = 0.0
                continue
            g = np.exp(-0.5 * d2)
            if np.isfinite(self._cutoff):
                g[d2 > self._cutoff] = 0.0
            opac = self.gs.opacities if prims is None else self.gs.opacities[prims]
            logits = self.gs.logits if prims is None else self.gs.logits[prims]
            out[idx] = (g * opac[None, :]) @ logits
        return out


# -- single-point operations ----------------------------------------------


def single_occupancy_prob(x, g: GaussianPrimitive) -> float:
    """Occupancy probability induced by one Gaussian: ``exp(-d2/2)``,
    exactly 1 at the center."""
    return float(np.exp(-0.5 * mahalanobis_sq(x, g)))


def aggregate_geometry(x, gs: GaussianSet, opts: EvalOptions | None = None) -> float:
    """Overall occupancy probability ``1 - prod(1 - alpha_i)`` at a point."""
    return float(FieldEvaluator(gs, opts).alpha(np.asarray(x, dtype=np.float64)[None, :])[0])


def gmm_semantics(x, gs: GaussianSet, opts: EvalOptions | None = None) -> np.ndarray:
    """Expected class distribution at a point under the Gaussian mixture."""
    return FieldEvaluator(gs, opts).semantics(np.asarray(x, dtype=np.float64)[None, :])[0]


def compose_occupancy(x, gs: GaussianSet, opts: EvalOptions | None = None) -> np.ndarray:
    """Composed (C + 1)-way prediction at a point, empty class first."""
    return FieldEvaluator(gs, opts).compose(np.asarray(x, dtype=np.float64)[None, :])[0]


def legacy_additive(x, gs_with_empty: GaussianSet, opts: EvalOptions | None = None) -> np.ndarray:
    """Additive-model output at a point.

    The set's logits must carry the empty class as channel 0; the result
    is an unnormalized, unbounded accumulation.
    """
    return FieldEvaluator(gs_with_empty, opts).legacy(np.asarray(x, dtype=np.float64)[None, :])[0]


def sample_field(x, gs: GaussianSet, opts: EvalOptions | None = None) -> FieldSample:
    """Bundle geometry, semantics and the composed prediction at a point."""
    ev = FieldEvaluator(gs, opts)
    pt = np.asarray(x, dtype=np.float64)[None, :]
    alpha = float(ev.alpha(pt)[0])
    e = ev.semantics(pt)[0]
    full = np.concatenate([[1.0 - alpha], alpha * e])
    return FieldSample(geometry_prob=alpha, semantics_expectation=e, full_prediction=full)
