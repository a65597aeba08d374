"""Fit a Gaussian set to a synthetic scene by first-order gradient descent.

Each iteration voxelizes the set under the chosen aggregation rule,
renders every camera view, combines the grid losses (focal, lovasz, scal)
with view-averaged feature alignment and depth losses, and applies an
adaptive-moment update with global-norm gradient clipping.

The temperature follows a decay schedule over normalized progress
r = i / (iterations - 1): the exponential schedule
tau(r) = max(t_min, t_max * (t_min / t_max)^r) front-loads high
temperatures and spends most iterations near t_min; the linear schedule
interpolates uniformly; constant keeps t_max throughout.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    GaussianGrads,
    GaussianSet,
    LOG_SCALE_MAX,
    LOG_SCALE_MIN,
    quat_normalize,
    tempered_opacity,
)
from .errors import DivergenceError, InvalidParameterError
from .losses import (
    LossWeights,
    cosine_feature_loss,
    focal_loss,
    huber_depth_loss,
    lovasz_loss,
    scal_loss,
)
from .occupancy import AggregationMode, g2o_backward, voxelize
from .render import RenderSettings, render_backward, render_features
from .scenes import SceneBundle
from .semantic import binary_iou


@dataclass
class TemperatureSchedule:
    t_min: float = 1e-3
    t_max: float = 1.0
    mode: str = "exponential"  # exponential | linear | constant
    tau_test: float | None = None  # defaults to t_min

    def __post_init__(self):
        if self.mode not in ("exponential", "linear", "constant"):
            raise InvalidParameterError(f"unknown schedule mode {self.mode!r}")
        if not (0 < self.t_min <= self.t_max):
            raise InvalidParameterError(
                f"need 0 < t_min <= t_max, got ({self.t_min}, {self.t_max})")
        if self.tau_test is None:
            self.tau_test = self.t_min
        if self.tau_test <= 0:
            raise InvalidParameterError("tau_test must be positive")


def temperature_at(r: float, schedule: TemperatureSchedule) -> float:
    """Temperature at normalized progress r in [0, 1] (clamped with a warning)."""
    if r < 0.0 or r > 1.0:
        warnings.warn(f"progress {r} outside [0, 1], clamping", stacklevel=2)
        r = min(max(r, 0.0), 1.0)
    if schedule.mode == "constant":
        return schedule.t_max
    if schedule.mode == "linear":
        return schedule.t_max + r * (schedule.t_min - schedule.t_max)
    return max(schedule.t_min,
               schedule.t_max * (schedule.t_min / schedule.t_max) ** r)


@dataclass
class FitConfig:
    num_gaussians: int = 64
    iterations: int = 500
    step_size: float = 1e-2       # means, scales, rotations, embeddings
    step_logit: float = 5e-2
    weights: LossWeights = field(default_factory=LossWeights)
    mode: AggregationMode = AggregationMode.POISSON
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    seed: int = 0
    views: list | None = None     # default: every camera in the scene
    gamma: float = 2.0
    alpha_balance: float = 0.25
    huber_delta: float = 1.0
    grad_clip: float = 1.0
    freeze_opacity: bool = False
    threads: int = 1
    render: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        self.mode = AggregationMode(self.mode)
        if self.num_gaussians < 1 or self.iterations < 1:
            raise InvalidParameterError("counts must be >= 1")
        if self.step_size <= 0 or self.step_logit <= 0:
            raise InvalidParameterError("step sizes must be positive")


@dataclass
class IterationRecord:
    iteration: int
    r: float
    tau: float
    loss_total: float
    loss_focal: float
    loss_lovasz: float
    loss_scal: float
    loss_feat: float
    loss_depth: float
    iou: float
    mean_opacity: float


CSV_COLUMNS = ["iteration", "r", "tau", "loss_total", "loss_focal",
               "loss_lovasz", "loss_scal", "loss_feat", "loss_depth", "iou",
               "mean_opacity"]


@dataclass
class FitReport:
    records: list
    gaussians: GaussianSet
    tau_test: float
    final_iou: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for rec in self.records:
                writer.writerow([getattr(rec, c) for c in CSV_COLUMNS])


def init_gaussians(bundle: SceneBundle, n: int, seed: int,
                   d: int | None = None) -> GaussianSet:
    """Seeded initialization from the occupied voxels of the target grid.

    Means are uniform over occupied voxel centers with uniform jitter of
    half a voxel per axis; scales start at one voxel, rotations at identity,
    logits at zero, embeddings at random unit vectors.
    """
    occ_idx = np.argwhere(bundle.occupancy.values >= 0.5)
    if occ_idx.shape[0] == 0:
        raise InvalidParameterError("target scene has no occupied voxels")
    grid = bundle.spec
    d = bundle.table.d if d is None else d
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, occ_idx.shape[0], size=n)
    centers = grid.center_of(occ_idx[picks])
    jitter = rng.uniform(-0.5, 0.5, size=(n, 3)) * grid.voxel_size
    emb = rng.normal(size=(n, d))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return GaussianSet(
        means=centers + jitter,
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), np.log(grid.voxel_size)),
        opacity_logits=np.zeros(n),
        embeddings=emb,
    )


class _Adam:
    """Adaptive-moment update for one parameter array."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fit(bundle: SceneBundle, config: FitConfig,
        progress=None) -> FitReport:
    """Run the optimization; deterministic given (scene, config).

    ``progress`` is an optional callable invoked with each IterationRecord.
    Raises DivergenceError if the loss goes non-finite.
    """
    views = config.views if config.views is not None else bundle.cameras
    teachers = bundle.teachers
    if len(views) == 0 or len(teachers) < len(views):
        raise InvalidParameterError(
            "scene bundle needs at least one camera with teacher images")
    target = (bundle.occupancy.values >= 0.5).astype(np.float64)
    gaussians = init_gaussians(bundle, config.num_gaussians, config.seed)
    w = config.weights
    opts = {
        "means": _Adam(gaussians.means.shape, config.step_size),
        "quats": _Adam(gaussians.quats.shape, config.step_size),
        "log_scales": _Adam(gaussians.log_scales.shape, config.step_size),
        "opacity_logits": _Adam(gaussians.opacity_logits.shape, config.step_logit),
        "embeddings": _Adam(gaussians.embeddings.shape, config.step_size),
    }
    records = []
    n_views = len(views)
    for i in range(config.iterations):
        r = i / (config.iterations - 1) if config.iterations > 1 else 0.0
        tau = temperature_at(r, config.schedule)

        pred = voxelize(gaussians, bundle.spec, config.mode, tau,
                        truncation=config.render.truncation,
                        threads=config.threads)
        v_focal, g_focal = focal_loss(pred.values, target, config.gamma,
                                      config.alpha_balance)
        v_lov, g_lov = lovasz_loss(pred.values, target) \
            if w.lambda_lov > 0 else (0.0, 0.0)
        v_scal, g_scal = scal_loss(pred.values, target) \
            if w.lambda_scal > 0 else (0.0, 0.0)
        upstream_vox = (w.lambda_focal * g_focal + w.lambda_lov * g_lov
                        + w.lambda_scal * g_scal)
        grads = g2o_backward(gaussians, bundle.spec, config.mode, tau,
                             upstream_vox, truncation=config.render.truncation,
                             threads=config.threads)

        v_feat = v_depth = 0.0
        if w.lambda_feat > 0 or w.lambda_depth > 0:
            for cam, teacher in zip(views, teachers):
                img = render_features(gaussians, cam, tau, config.render)
                valid = teacher.alpha > 0.5
                vf, gf = cosine_feature_loss(img, teacher.feature, valid)
                vd, gd = huber_depth_loss(img.depth, teacher.depth,
                                          valid & (img.alpha > 0.5),
                                          config.huber_delta)
                v_feat += vf / n_views
                v_depth += vd / n_views
                grads.add_scaled(render_backward(
                    gaussians, cam, tau,
                    gf * (w.lambda_feat / n_views), None,
                    gd * (w.lambda_depth / n_views), config.render))

        total = (w.lambda_focal * v_focal + w.lambda_lov * v_lov
                 + w.lambda_scal * v_scal + w.lambda_feat * v_feat
                 + w.lambda_depth * v_depth)
        if not np.isfinite(total):
            raise DivergenceError(
                f"loss became non-finite at iteration {i} (tau={tau:.3g})")

        if config.freeze_opacity:
            grads.d_opacity_logits[:] = 0.0
        norm = grads.global_norm()
        if config.grad_clip > 0 and norm > config.grad_clip:
            grads.scale(config.grad_clip / norm)

        iou = binary_iou(pred.binarize(0.5), target >= 0.5)
        rec = IterationRecord(
            iteration=i, r=r, tau=tau, loss_total=total, loss_focal=v_focal,
            loss_lovasz=v_lov, loss_scal=v_scal, loss_feat=v_feat,
            loss_depth=v_depth, iou=iou,
            mean_opacity=float(np.mean(tempered_opacity(
                gaussians.opacity_logits, tau))))
        records.append(rec)
        if progress is not None:
            progress(rec)

        opts["means"].step(gaussians.means, grads.d_means)
        opts["quats"].step(gaussians.quats, grads.d_quats)
        opts["log_scales"].step(gaussians.log_scales, grads.d_log_scales)
        if not config.freeze_opacity:
            opts["opacity_logits"].step(gaussians.opacity_logits,
                                        grads.d_opacity_logits)
        opts["embeddings"].step(gaussians.embeddings, grads.d_embeddings)
        gaussians.quats = quat_normalize(gaussians.quats)
        np.clip(gaussians.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX,
                out=gaussians.log_scales)

    tau_test = config.schedule.tau_test
    final_pred = voxelize(gaussians, bundle.spec, config.mode, tau_test,
                          truncation=config.render.truncation,
                          threads=config.threads)
    final_iou = binary_iou(final_pred.binarize(0.5), target >= 0.5)
    return FitReport(records, gaussians, tau_test, final_iou)
