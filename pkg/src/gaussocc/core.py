"""Gaussian primitive data model and the covariance algebra built on it.

A primitive is an anisotropic 3D Gaussian: a mean position, per-axis
scales, a unit quaternion orientation, a nonnegative opacity weight and
a vector of semantic logits. The covariance is never stored; it is the
factored product ``R @ diag(s) @ diag(s).T @ R.T``, so the inverse and
determinant come straight from the factors instead of a general matrix
inversion.

All types are immutable after construction (arrays are copied and marked
read-only) and every operation here is a pure function, so values can be
shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

# Scales at or below this floor are clamped at construction so the
# covariance stays comfortably non-singular.
MIN_SCALE = 1e-3

_QUAT_NORM_TOL = 1e-6


def _as_float_array(value, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


def rotation_matrices(quats: np.ndarray) -> np.ndarray:
    """Convert scalar-first quaternions of shape (..., 4) to rotation matrices.

    Quaternions are normalized internally; a zero-norm quaternion raises
    ``ValueError``.
    """
    q = np.asarray(quats, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternions must have trailing dimension 4, got {q.shape}")
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero-norm quaternion has no orientation")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)

    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a single scalar-first quaternion.

    The input is normalized first; the result satisfies ``R.T @ R = I``
    and ``det(R) = +1``.
    """
    q = _as_float_array(q, (4,), "quaternion")
    return rotation_matrices(q)


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic semantic Gaussian.

    ``semantics`` holds raw logits for the non-empty classes only; the
    empty class is produced by the field composition, not stored here.
    (The additive legacy model instead packs the empty class as channel 0,
    see :func:`gaussocc.field.legacy_additive`.)
    """

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    semantics: np.ndarray

    def __post_init__(self):
        mean = _as_float_array(self.mean, (3,), "mean")
        scale = _as_float_array(self.scale, (3,), "scale")
        rotation = _as_float_array(self.rotation, (4,), "rotation")
        semantics = np.asarray(self.semantics, dtype=np.float64)
        if semantics.ndim != 1 or semantics.size == 0:
            raise ValueError("semantics must be a non-empty 1-D logit vector")
        if not np.all(np.isfinite(semantics)):
            raise ValueError("semantics must be finite")
        opacity = float(self.opacity)
        if not np.isfinite(opacity) or opacity < 0.0:
            raise ValueError(f"opacity must be >= 0, got {opacity}")

        norm = float(np.linalg.norm(rotation))
        if norm == 0.0:
            raise ValueError("zero-norm quaternion has no orientation")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "scale", _frozen(np.maximum(scale, MIN_SCALE)))
        object.__setattr__(self, "rotation", _frozen(rotation / norm))
        object.__setattr__(self, "opacity", opacity)
        object.__setattr__(self, "semantics", _frozen(semantics))

    @property
    def num_classes(self) -> int:
        return self.semantics.shape[0]


@dataclass(frozen=True)
class GaussianSet:
    """Ordered collection of Gaussians stored column-wise for fast math.

    ``means`` is (P, 3), ``scales`` (P, 3), ``rotations`` (P, 4) scalar
    first, ``opacities`` (P,) and ``logits`` (P, C). The same validation
    and normalization as :class:`GaussianPrimitive` is applied row-wise.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != 3 or means.shape[0] < 1:
            raise ValueError(f"means must be (P, 3) with P >= 1, got {means.shape}")
        p = means.shape[0]
        scales = _as_float_array(self.scales, (p, 3), "scales")
        rotations = _as_float_array(self.rotations, (p, 4), "rotations")
        opacities = _as_float_array(self.opacities, (p,), "opacities")
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] != p or logits.shape[1] == 0:
            raise ValueError(f"logits must be (P, C) with C >= 1, got {logits.shape}")
        if not np.all(np.isfinite(means)) or not np.all(np.isfinite(logits)):
            raise ValueError("means and logits must be finite")
        if np.any(opacities < 0.0):
            raise ValueError("opacities must be >= 0")
        norms = np.linalg.norm(rotations, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("zero-norm quaternion has no orientation")

        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "scales", _frozen(np.maximum(scales, MIN_SCALE)))
        object.__setattr__(self, "rotations", _frozen(rotations / norms))
        object.__setattr__(self, "opacities", _frozen(opacities))
        object.__setattr__(self, "logits", _frozen(logits))

    @classmethod
    def from_primitives(cls, primitives: Iterable[GaussianPrimitive]) -> "GaussianSet":
        prims = list(primitives)
        if not prims:
            raise ValueError("a GaussianSet needs at least one primitive")
        classes = {p.num_classes for p in prims}
        if len(classes) != 1:
            raise ValueError(f"all primitives must share one class count, got {sorted(classes)}")
        return cls(
            means=np.stack([p.mean for p in prims]),
            scales=np.stack([p.scale for p in prims]),
            rotations=np.stack([p.rotation for p in prims]),
            opacities=np.array([p.opacity for p in prims]),
            logits=np.stack([p.semantics for p in prims]),
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        # Rows are already validated and normalized; copy them verbatim so a
        # primitive view is bit-identical to the stored columns (a second
        # normalization could shift the quaternion by an ulp).
        prim = object.__new__(GaussianPrimitive)
        object.__setattr__(prim, "mean", _frozen(self.means[i]))
        object.__setattr__(prim, "scale", _frozen(self.scales[i]))
        object.__setattr__(prim, "rotation", _frozen(self.rotations[i]))
        object.__setattr__(prim, "opacity", float(self.opacities[i]))
        object.__setattr__(prim, "semantics", _frozen(self.logits[i]))
        return prim

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]


@dataclass(frozen=True)
class CovarianceDecomposition:
    """Factored covariance of one primitive: rotation, scales, and the
    derived covariance, inverse and determinant."""

    rotation_matrix: np.ndarray
    scale_matrix: np.ndarray
    covariance: np.ndarray
    inverse: np.ndarray
    det: float


def build_covariance(g: GaussianPrimitive) -> CovarianceDecomposition:
    """Assemble the covariance factors of a primitive.

    The inverse is ``R @ diag(1/s^2) @ R.T`` and the determinant is
    ``prod(s)**2``; both are exact consequences of the factorization.
    """
    rot = quat_to_rotation(g.rotation)
    s = g.scale
    cov = (rot * (s * s)) @ rot.T
    inv = (rot / (s * s)) @ rot.T
    det = float(np.prod(s)) ** 2
    return CovarianceDecomposition(
        rotation_matrix=_frozen(rot),
        scale_matrix=_frozen(np.diag(s)),
        covariance=_frozen(cov),
        inverse=_frozen(inv),
        det=det,
    )


def mahalanobis_sq(x, g: GaussianPrimitive) -> float:
    """Squared Mahalanobis distance of a point from a primitive.

    Evaluated in the Gaussian's local frame, ``sum((R.T (x - m) / s)^2)``,
    which is exact and never forms the inverse covariance explicitly.
    """
    x = _as_float_array(x, (3,), "x")
    rot = quat_to_rotation(g.rotation)
    local = rot.T @ (x - g.mean)
    return float(np.sum((local / g.scale) ** 2))


def covariance_matrices(gs: GaussianSet) -> np.ndarray:
    """Stacked (P, 3, 3) covariances of a set."""
    rot = rotation_matrices(gs.rotations)
    s2 = gs.scales**2
    return np.einsum("pab,pb,pcb->pac", rot, s2, rot)


def inverse_covariance_matrices(gs: GaussianSet) -> np.ndarray:
    """Stacked (P, 3, 3) inverse covariances, from the factorization."""
    rot = rotation_matrices(gs.rotations)
    inv_s2 = gs.scales**-2.0
    return np.einsum("pab,pb,pcb->pac", rot, inv_s2, rot)


def log_determinants(gs: GaussianSet) -> np.ndarray:
    """(P,) log-determinants of the covariances, ``2 * sum(log s)``."""
    return 2.0 * np.sum(np.log(gs.scales), axis=1)
