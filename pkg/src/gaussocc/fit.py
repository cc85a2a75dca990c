"""Differentiable fitting of a Gaussian set to a reference voxel grid.

Parameters live in an unconstrained vector: per Gaussian the mean (3),
log-scales (3), a free quaternion that is normalized on use (4), a raw
opacity mapped through softplus (1), and the semantic logits. The loss is
the mean cross entropy between the composed field prediction and the
one-hot grid label at sampled voxel centers; the additive baseline uses a
softmax over its raw accumulated logits instead.

Gradients are fully analytic, including the quaternion-normalization
chain (so the gradient of a free quaternion is its tangent-space
projection scaled by 1/norm) and the covariance chain through rotation
and log-scales. Optimization is plain gradient descent with first/second
moment accumulation, decoupled weight decay and a cosine step-size decay.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, softmax

from .core import MIN_SCALE, GaussianSet, rotation_matrices
from .field import EvalOptions, log1mexp
from .grid import VoxelGrid, voxelize, voxelize_legacy
from .io import read_key_values
from .metrics import iou, miou

_LOG_U_FLOOR = np.log(1e-15)  # floor on per-Gaussian log(1 - alpha_i) inside the loss
_PRED_FLOOR = 1e-12  # floor on predicted class probability inside the log
_LOG_PRED_FLOOR = np.log(_PRED_FLOOR)
_LOG_GMM_FLOOR = np.log(1e-300)
_LOG_2PI = np.log(2.0 * np.pi)

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8

MODELS = ("probabilistic", "additive")


def _stream(seed: int, lane: int) -> np.random.Generator:
    # Independent counter-based stream per (seed, lane).
    return np.random.Generator(np.random.Philox(key=(np.uint64(seed).item() << 64) | lane))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def inv_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        small = np.log(np.expm1(np.minimum(y, 20.0)))
    return np.where(y > 20.0, y + np.log1p(-np.exp(-y)), small)


@dataclass(frozen=True)
class ParamVector:
    """Flat unconstrained parameters of a Gaussian set.

    Per-Gaussian layout: mean (3), log-scale (3), quaternion wxyz (4),
    raw opacity (1), logits (``num_channels``).
    """

    values: np.ndarray
    num_gaussians: int
    num_channels: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        expected = self.num_gaussians * self.stride
        if values.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {values.shape}")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def stride(self) -> int:
        return 11 + self.num_channels

    @classmethod
    def encode(cls, gs: GaussianSet) -> "ParamVector":
        blocks = np.concatenate(
            [
                gs.means,
                np.log(gs.scales),
                gs.rotations,
                inv_softplus(gs.opacities)[:, None],
                gs.logits,
            ],
            axis=1,
        )
        return cls(values=blocks.reshape(-1), num_gaussians=len(gs), num_channels=gs.num_classes)

    def decode(self) -> GaussianSet:
        blk = self.values.reshape(self.num_gaussians, self.stride)
        return GaussianSet(
            means=blk[:, 0:3],
            scales=np.exp(blk[:, 3:6]),
            rotations=blk[:, 6:10],
            opacities=softplus(blk[:, 10]),
            logits=blk[:, 11:],
        )


INIT_POLICIES = ("grid", "random")


@dataclass(frozen=True)
class FitConfig:
    """Budget, sampling policy and model choice for one fitting run.

    ``init`` picks the starting set: ``"grid"`` is the occupancy-aligned
    initialization from the reference grid; ``"random"`` scatters means
    uniformly over the grid extent with neutral semantics, the setting
    for a fair representation comparison where neither model starts with
    placement knowledge.
    """

    num_gaussians: int = 256
    iterations: int = 1000
    learning_rate: float = 0.02
    lr_min: float = 0.0
    batch_points: int = 1024
    occupied_ratio: float = 0.5
    seed: int = 0
    model: str = "probabilistic"
    init: str = "grid"
    weight_decay: float = 0.01
    eval_every: int = 200
    init_logit_scale: float = 5.0
    cutoff_mahalanobis_sq: Optional[float] = 25.0

    def __post_init__(self):
        if self.num_gaussians < 1 or self.iterations < 1 or self.batch_points < 1:
            raise ValueError("num_gaussians, iterations and batch_points must be positive")
        if self.learning_rate <= 0 or self.lr_min < 0 or self.eval_every < 1:
            raise ValueError("learning_rate must be > 0, lr_min >= 0, eval_every >= 1")
        if not 0.0 < self.occupied_ratio < 1.0:
            raise ValueError("occupied_ratio must lie strictly between 0 and 1")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.init not in INIT_POLICIES:
            raise ValueError(f"init must be one of {INIT_POLICIES}, got {self.init!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "FitConfig":
        kwargs: dict[str, object] = {}
        fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        for key, value in raw.items():
            if key not in fields:
                raise ValueError(f"unknown fit config key {key!r}")
            if key in ("model", "init"):
                kwargs[key] = value
            elif key == "cutoff_mahalanobis_sq":
                kwargs[key] = None if value.lower() in ("none", "inf") else float(value)
            elif key in ("num_gaussians", "iterations", "batch_points", "seed", "eval_every"):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)  # type: ignore[arg-type]

    @classmethod
    def from_file(cls, path) -> "FitConfig":
        return cls.from_dict(read_key_values(path))

    def to_dict(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for name in self.__dataclass_fields__:  # type: ignore[attr-defined]
            value = getattr(self, name)
            out[name] = "none" if value is None else value
        return out


@dataclass(frozen=True)
class FitResult:
    gaussians: GaussianSet
    loss_trace: np.ndarray
    metrics_trace: tuple[tuple[int, float, float], ...]

    @property
    def final_iou(self) -> float:
        return self.metrics_trace[-1][1]

    @property
    def final_miou(self) -> float:
        return self.metrics_trace[-1][2]


# -- farthest point sampling ---------------------------------------------------


def _greedy_fps(points: np.ndarray, k: int, first: int) -> np.ndarray:
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    dist = np.linalg.norm(points - points[first], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def fps_init(candidates: np.ndarray, k: int, seed: int, batched: bool = False) -> np.ndarray:
    """Indices of k farthest-point samples from a candidate cloud.

    Greedy: a seeded first pick, then each next point maximizes the
    minimum distance to the chosen set. The batched variant splits the
    cloud into octants around the bounding-box midpoint, runs greedy
    sampling per octant with proportional quotas and concatenates.
    """
    points = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = _stream(seed, 0)
    if k == n:
        return np.arange(n)
    if not batched:
        return _greedy_fps(points, k, first=int(rng.integers(n)))

    mid = 0.5 * (points.min(axis=0) + points.max(axis=0))
    octant = (
        (points[:, 0] >= mid[0]).astype(np.int64) * 4
        + (points[:, 1] >= mid[1]).astype(np.int64) * 2
        + (points[:, 2] >= mid[2]).astype(np.int64)
    )
    members = [np.flatnonzero(octant == o) for o in range(8)]
    sizes = np.array([m.size for m in members])
    exact = k * sizes / n
    quotas = np.floor(exact).astype(np.int64)
    remainder = k - int(quotas.sum())
    for o in np.argsort(-(exact - quotas), kind="stable"):
        if remainder == 0:
            break
        if quotas[o] < sizes[o]:
            quotas[o] += 1
            remainder -= 1
    while remainder > 0:  # rare: leftover capacity after fractional rounding
        for o in np.argsort(-(sizes - quotas), kind="stable"):
            if remainder and quotas[o] < sizes[o]:
                quotas[o] += 1
                remainder -= 1
    out = []
    for o in range(8):
        if quotas[o] == 0:
            continue
        sub = members[o]
        picked = _greedy_fps(points[sub], int(quotas[o]), first=int(rng.integers(sub.size)))
        out.append(sub[picked])
    return np.concatenate(out)


def init_from_grid(gt: VoxelGrid, cfg: FitConfig) -> GaussianSet:
    """Distribution-style initialization from the reference grid itself.

    Means are farthest-point samples of the occupied voxel centers (with
    replacement plus sub-voxel jitter when the grid has fewer occupied
    voxels than Gaussians), scales equal the voxel size, rotations are
    identity, opacities one, and the logits are a scaled one-hot of the
    local label.
    """
    centers = gt.occupied_centers()
    labels = gt.occupied_labels().astype(np.int64)
    n_occ = centers.shape[0]
    if n_occ == 0:
        raise ValueError("cannot initialize from a fully empty grid")
    p = cfg.num_gaussians
    rng = _stream(cfg.seed, 1)
    if n_occ >= p:
        idx = fps_init(centers, p, cfg.seed, batched=n_occ > 20000)
        means = centers[idx]
        chosen = labels[idx]
    else:
        extra = rng.integers(0, n_occ, size=p - n_occ)
        jitter = rng.uniform(-0.25, 0.25, size=(p - n_occ, 3)) * gt.spec.voxel_size
        means = np.concatenate([centers, centers[extra] + jitter])
        chosen = np.concatenate([labels, labels[extra]])

    channels = gt.spec.num_classes_total - 1 if cfg.model == "probabilistic" else gt.spec.num_classes_total
    logits = np.zeros((p, channels))
    hot = chosen - 1 if cfg.model == "probabilistic" else chosen
    logits[np.arange(p), hot] = cfg.init_logit_scale
    return GaussianSet(
        means=means,
        scales=np.tile(gt.spec.voxel_size, (p, 1)),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (p, 1)),
        opacities=np.ones(p),
        logits=logits,
    )


def random_init(gt: VoxelGrid, cfg: FitConfig) -> GaussianSet:
    """Placement-agnostic initialization: means uniform over the grid
    extent, neutral (zero) logits, voxel-pair scales, identity rotations."""
    p = cfg.num_gaussians
    rng = _stream(cfg.seed, 9)
    spec = gt.spec
    channels = spec.num_classes_total - 1 if cfg.model == "probabilistic" else spec.num_classes_total
    return GaussianSet(
        means=rng.uniform(spec.min_corner, spec.max_corner, size=(p, 3)),
        scales=np.tile(2.0 * spec.voxel_size, (p, 1)),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (p, 1)),
        opacities=np.ones(p),
        logits=np.zeros((p, channels)),
    )


# -- fused loss and gradient ----------------------------------------------------


def _rotation_quat_jacobian(qn: np.ndarray) -> np.ndarray:
    """(P, 4, 3, 3) derivative of the rotation matrix w.r.t. each unit
    quaternion component."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    o = np.zeros_like(w)

    def mat(*rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dw = mat((o, -z, y), (z, o, -x), (-y, x, o))
    dx = mat((o, y, z), (y, -2 * x, -w), (z, w, -2 * x))
    dy = mat((-2 * y, x, w), (x, o, z), (-w, z, -2 * y))
    dz = mat((-2 * z, -w, x), (w, -2 * z, y), (x, y, o))
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1)


def _loss_and_grad(
    theta: np.ndarray,
    num_gaussians: int,
    num_channels: int,
    points: np.ndarray,
    labels: np.ndarray,
    model: str,
    cutoff: float,
    want_grad: bool = True,
) -> tuple[float, np.ndarray | None]:
    p, ch = num_gaussians, num_channels
    stride = 11 + ch
    blk = theta.reshape(p, stride)
    means = blk[:, 0:3]
    log_scales = blk[:, 3:6]
    quats_raw = blk[:, 6:10]
    opac_raw = blk[:, 10]
    logits = blk[:, 11:]

    qnorm = np.linalg.norm(quats_raw, axis=1)
    if np.any(qnorm == 0.0):
        raise ValueError("zero-norm quaternion has no orientation")
    qn = quats_raw / qnorm[:, None]
    rot = rotation_matrices(qn)
    s_exp = np.exp(log_scales)
    s = np.maximum(s_exp, MIN_SCALE)
    s_active = (s_exp > MIN_SCALE).astype(np.float64)
    inv_s2 = s**-2.0
    opac = softplus(opac_raw)
    sig = expit(opac_raw)

    n = points.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    max_label = ch if model == "probabilistic" else ch - 1
    if labels.min() < 0 or labels.max() > max_label:
        raise ValueError(f"labels must lie in [0, {max_label}] for the {model} model")

    # (p, n, ...) layout so the heavy contractions are batched matmuls.
    diff = points[None, :, :] - means[:, None, :]  # (p, n, 3)
    v = diff @ rot  # v[p, n, b] = sum_a diff[p, n, a] rot[p, a, b]
    v2 = v * v
    d2 = (v2 @ inv_s2[:, :, None])[..., 0]  # (p, n)
    cut = d2 > cutoff if np.isfinite(cutoff) else np.zeros_like(d2, dtype=bool)
    alpha_i = np.exp(-0.5 * d2)

    loss_terms = np.empty(n)
    grad_d2 = np.zeros((p, n)) if want_grad else None
    grad_logits = np.zeros((p, ch)) if want_grad else None
    grad_log_a = np.zeros(p) if want_grad else None
    grad_ls_extra = np.zeros(p) if want_grad else None  # log-det chain, per axis
    grad_a_direct = np.zeros(p) if want_grad else None  # additive path only

    if model == "probabilistic":
        u = -np.expm1(-0.5 * d2)  # 1 - alpha_i
        li_raw = log1mexp(0.5 * d2)
        li_floor = li_raw < _LOG_U_FLOOR
        li = np.maximum(li_raw, _LOG_U_FLOOR)
        li[cut] = 0.0
        total = li.sum(axis=0)  # (n,)

        occ = labels > 0
        loss_terms[~occ] = -total[~occ]

        n_occ = int(np.count_nonzero(occ))
        if n_occ:
            s_occ = total[occ]
            log_alpha_raw = log1mexp(-s_occ)
            alpha_floor = ~(log_alpha_raw >= _LOG_PRED_FLOOR)
            log_alpha = np.where(alpha_floor, _LOG_PRED_FLOOR, log_alpha_raw)

            sem = softmax(logits, axis=1)
            log_det = 2.0 * np.sum(np.log(s), axis=1)
            with np.errstate(divide="ignore"):
                log_opac = np.log(opac)
            w = log_opac[:, None] - 0.5 * log_det[:, None] - 0.5 * d2[:, occ]
            w[cut[:, occ]] = -np.inf
            wmax = w.max(axis=0)
            finite = np.isfinite(wmax)
            wmax_safe = np.where(finite, wmax, 0.0)
            expw = np.exp(w - wmax_safe[None, :])
            denom = expw.sum(axis=0)
            with np.errstate(divide="ignore"):
                log_norm = wmax_safe + np.log(denom)
            fallback = ~finite | (log_norm - 1.5 * _LOG_2PI < _LOG_GMM_FLOOR)
            rho = expw / np.where(denom > 0.0, denom, 1.0)[None, :]  # (p, n_occ)
            rho[:, fallback] = 0.0
            e = sem.T @ rho  # (ch, n_occ)
            k_idx = labels[occ] - 1
            e_y = e[k_idx, np.arange(n_occ)]
            e_y = np.where(fallback, 1.0 / ch, e_y)
            e_floor = e_y < _PRED_FLOOR
            log_e = np.log(np.maximum(e_y, _PRED_FLOOR))
            loss_terms[occ] = -log_alpha - log_e

        if want_grad:
            g_li = np.full((p, n), -1.0)
            if n_occ:
                with np.errstate(over="ignore"):
                    ratio = np.exp(s_occ - log_alpha_raw)  # (1 - alpha) / alpha
                ratio = np.where(alpha_floor, 0.0, ratio)
                g_li[:, occ] = ratio[None, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                dli_dd2 = 0.5 * alpha_i / u
            dli_dd2[li_floor | cut] = 0.0
            grad_d2[:] = g_li * dli_dd2
            if n_occ:
                dead = fallback | e_floor
                beta = rho * sem[:, k_idx]  # (p, n_occ)
                beta /= np.where(e_y, e_y, 1.0)[None, :]
                d_loss_dw = rho - beta
                d_loss_dw[:, dead] = 0.0
                grad_d2[:, occ] += -0.5 * d_loss_dw
                row_sums = d_loss_dw.sum(axis=1)
                grad_log_a += row_sums
                grad_ls_extra += -row_sums
                onehot = np.zeros((n_occ, ch))
                onehot[np.arange(n_occ), k_idx] = 1.0
                live_beta = np.where(dead[None, :], 0.0, beta)
                grad_logits += sem * live_beta.sum(axis=1)[:, None] - live_beta @ onehot
    else:  # additive baseline
        g_vals = opac[:, None] * alpha_i
        g_vals[cut] = 0.0
        z = np.tensordot(g_vals, logits, axes=(0, 0))  # (n, ch)
        zmax = z.max(axis=1)
        lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        log_p = z[np.arange(n), labels] - lse
        p_floor = log_p < _LOG_PRED_FLOOR
        loss_terms[:] = -np.maximum(log_p, _LOG_PRED_FLOOR)

        if want_grad:
            prob = np.exp(z - lse[:, None])
            d_loss_dz = prob.copy()
            d_loss_dz[np.arange(n), labels] -= 1.0
            d_loss_dz[p_floor] = 0.0
            g_gv = logits @ d_loss_dz.T  # (p, n)
            grad_d2[:] = -0.5 * g_gv * g_vals
            grad_logits += np.tensordot(g_vals, d_loss_dz, axes=(1, 0))
            grad_a_direct += (g_gv * alpha_i * ~cut).sum(axis=1)

    loss = float(loss_terms.mean())
    if not want_grad:
        return loss, None

    # Chain the shared d2 gradient into means, log-scales and quaternions;
    # every contraction below is a (p,)-batched matrix product.
    w_loc = v * inv_s2[:, None, :]  # (p, n, 3), local-frame gradient direction
    g2_row = grad_d2[:, None, :]  # (p, 1, n)
    rw = w_loc @ rot.transpose(0, 2, 1)  # (p, n, 3): rows are R @ (D v)
    g_means = -2.0 * (g2_row @ rw)[:, 0, :]
    g_ls = -2.0 * (g2_row @ (v2 * inv_s2[:, None, :]))[:, 0, :]
    g_ls += grad_ls_extra[:, None]
    g_ls *= s_active
    grad_rot = 2.0 * ((diff * grad_d2[:, :, None]).transpose(0, 2, 1) @ w_loc)  # (p, 3, 3)
    jac = _rotation_quat_jacobian(qn)
    g_qn = np.einsum("pab,piab->pi", grad_rot, jac)
    g_quat = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / qnorm[:, None]
    if model == "probabilistic":
        with np.errstate(invalid="ignore"):
            log_a_chain = np.where(opac > 0.0, sig / opac, 0.0)
        g_opac = grad_log_a * log_a_chain
    else:
        g_opac = grad_a_direct * sig

    grad = np.empty_like(blk)
    grad[:, 0:3] = g_means
    grad[:, 3:6] = g_ls
    grad[:, 6:10] = g_quat
    grad[:, 10] = g_opac
    grad[:, 11:] = grad_logits
    return loss, grad.reshape(-1) / n


def _points_to_labels(gt: VoxelGrid, points: np.ndarray) -> np.ndarray:
    return gt.labels_at_points(points)


def fit_loss(
    params: ParamVector,
    gt: VoxelGrid,
    sample_points: np.ndarray,
    model: str = "probabilistic",
    opts: EvalOptions | None = None,
) -> float:
    """Mean cross entropy of the model prediction against grid labels at
    the given sample points."""
    opts = opts or EvalOptions()
    loss, _ = _loss_and_grad(
        np.asarray(params.values, dtype=np.float64),
        params.num_gaussians,
        params.num_channels,
        np.atleast_2d(np.asarray(sample_points, dtype=np.float64)),
        _points_to_labels(gt, sample_points),
        model,
        opts.cutoff,
        want_grad=False,
    )
    return loss


def fit_grad(
    params: ParamVector,
    gt: VoxelGrid,
    sample_points: np.ndarray,
    model: str = "probabilistic",
    opts: EvalOptions | None = None,
) -> np.ndarray:
    """Analytic gradient of :func:`fit_loss` w.r.t. every parameter."""
    opts = opts or EvalOptions()
    _, grad = _loss_and_grad(
        np.asarray(params.values, dtype=np.float64),
        params.num_gaussians,
        params.num_channels,
        np.atleast_2d(np.asarray(sample_points, dtype=np.float64)),
        _points_to_labels(gt, sample_points),
        model,
        opts.cutoff,
        want_grad=True,
    )
    return grad


class _SamplePools:
    """Cached occupied/empty voxel-center pools of one grid."""

    def __init__(self, gt: VoxelGrid):
        self.centers = gt.spec.all_centers()
        flat = gt.labels_flat
        self.labels = flat.astype(np.int64)
        self.occupied = np.flatnonzero(flat != 0)
        self.empty = np.flatnonzero(flat == 0)
        if self.occupied.size == 0:
            raise ValueError("cannot sample training points from a fully empty grid")

    def draw(self, batch: int, occupied_ratio: float, rng: np.random.Generator):
        n_occ = batch if self.empty.size == 0 else int(round(batch * occupied_ratio))
        n_occ = min(max(n_occ, 1), batch)
        picks = [self.occupied[rng.integers(0, self.occupied.size, size=n_occ)]]
        if batch - n_occ:
            picks.append(self.empty[rng.integers(0, self.empty.size, size=batch - n_occ)])
        idx = np.concatenate(picks)
        return self.centers[idx], self.labels[idx]


def sample_training_points(
    gt: VoxelGrid, batch: int, occupied_ratio: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw voxel centers with the requested occupied/empty balance."""
    return _SamplePools(gt).draw(batch, occupied_ratio, rng)


def _evaluate(gs: GaussianSet, gt: VoxelGrid, model: str, opts: EvalOptions) -> tuple[float, float]:
    if model == "probabilistic":
        pred = voxelize(gs, gt.spec, opts)
    else:
        pred = voxelize_legacy(gs, gt.spec, opts)
    return iou(pred, gt), miou(pred, gt)


def fit(gt: VoxelGrid, cfg: FitConfig) -> FitResult:
    """Fit a Gaussian set to a reference grid.

    Deterministic given the config seed; returns the final set, the
    per-iteration loss trace and the periodic IoU/mIoU trace (always
    including iteration 0 and the final state).
    """
    opts = EvalOptions(cutoff_mahalanobis_sq=cfg.cutoff_mahalanobis_sq)
    initial = init_from_grid(gt, cfg) if cfg.init == "grid" else random_init(gt, cfg)
    pv = ParamVector.encode(initial)
    theta = pv.values.copy()
    p, ch = pv.num_gaussians, pv.num_channels
    stride = pv.stride

    # Decoupled weight decay applies to log-scales, raw opacity and logits.
    # Means are geometry (decay would drag the scene toward the origin) and
    # quaternions are directions (decay would violate norm preservation).
    decay_mask = np.zeros((p, stride), dtype=bool)
    decay_mask[:, 3:6] = True
    decay_mask[:, 10:] = True
    decay_mask = decay_mask.reshape(-1)

    def renormalize_quats(vec: np.ndarray) -> None:
        # The preconditioned update is not exactly tangent to the quaternion
        # sphere; the loss is radial-invariant, so snap the norm back.
        quats = vec.reshape(p, stride)[:, 6:10]
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    rng = _stream(cfg.seed, 2)
    pools = _SamplePools(gt)
    m = np.zeros_like(theta)
    vv = np.zeros_like(theta)
    losses = np.empty(cfg.iterations)
    metrics: list[tuple[int, float, float]] = []

    def record(iteration: int):
        gs = ParamVector(values=theta, num_gaussians=p, num_channels=ch).decode()
        i, mi = _evaluate(gs, gt, cfg.model, opts)
        metrics.append((iteration, i, mi))

    record(0)
    span = max(cfg.iterations - 1, 1)
    for t in range(cfg.iterations):
        points, labels = pools.draw(cfg.batch_points, cfg.occupied_ratio, rng)
        loss, grad = _loss_and_grad(theta, p, ch, points, labels, cfg.model, opts.cutoff)
        losses[t] = loss
        lr = cfg.lr_min + 0.5 * (cfg.learning_rate - cfg.lr_min) * (1.0 + np.cos(np.pi * t / span))
        m = _ADAM_B1 * m + (1.0 - _ADAM_B1) * grad
        vv = _ADAM_B2 * vv + (1.0 - _ADAM_B2) * grad * grad
        m_hat = m / (1.0 - _ADAM_B1 ** (t + 1))
        v_hat = vv / (1.0 - _ADAM_B2 ** (t + 1))
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        if cfg.weight_decay:
            theta[decay_mask] -= lr * cfg.weight_decay * theta[decay_mask]
        renormalize_quats(theta)
        if (t + 1) % cfg.eval_every == 0 and t + 1 < cfg.iterations:
            record(t + 1)

    record(cfg.iterations)
    final = ParamVector(values=theta, num_gaussians=p, num_channels=ch).decode()
    return FitResult(gaussians=final, loss_trace=losses, metrics_trace=tuple(metrics))
