"""Voxel grids and the Gaussian-to-occupancy aggregation operators.

Three pointwise aggregation rules map a Gaussian set to an occupancy
probability at a 3D location:

* ``gf2``        1 - prod_i (1 - k_i(x)), kernels only — opacity never
                 enters, so any primitive forces occupancy 1 at its mean.
* ``bernoulli``  1 - prod_i (1 - a_i k_i(x)), independent per-primitive hits.
* ``poisson``    1 - exp(-sum_i a_i k_i(x)), first-arrival probability under
                 the summed event intensity z(x) = sum_i a_i k_i(x).

For all rules, poisson <= bernoulli <= gf2 pointwise, and
bernoulli - poisson <= z(x)^2 / 2.

The pointwise functions below are the plain reference path used as the
brute-force oracle in tests; :func:`voxelize` evaluates the same quantity
at every voxel center through the kernel backend.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .core import (
    DEFAULT_TRUNCATION,
    GaussianGrads,
    GaussianSet,
    build_inv_covariance,
    clamp_tau,
    effective_opacity,
    eval_kernel,
    inv_cov_param_grads,
    tempered_opacity,
    tempered_opacity_grad,
)
from .errors import InvalidParameterError, ResourceLimitError, ShapeMismatchError

DEFAULT_CELL_CAP = 1 << 28


class AggregationMode(str, Enum):
    GF2 = "gf2"
    BERNOULLI = "bernoulli"
    POISSON = "poisson"

    @property
    def kernel_code(self) -> int:
        return {"gf2": kernels.MODE_GF2,
                "bernoulli": kernels.MODE_BERNOULLI,
                "poisson": kernels.MODE_POISSON}[self.value]


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel lattice: dims (X, Y, Z), minimum corner, edge length.

    Voxel (x, y, z) has center origin + voxel_size * (x + 1/2, y + 1/2,
    z + 1/2) and flat index (x * Y + y) * Z + z.
    """

    dims: tuple
    origin: tuple
    voxel_size: float

    def __post_init__(self):
        dims = tuple(int(v) for v in self.dims)
        origin = tuple(float(v) for v in self.origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if len(dims) != 3 or any(v < 1 for v in dims):
            raise InvalidParameterError(f"grid dims must be 3 positive ints, got {dims}")
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise InvalidParameterError(f"bad grid origin {origin}")
        if not (np.isfinite(self.voxel_size) and self.voxel_size > 0):
            raise InvalidParameterError(f"voxel_size must be > 0, got {self.voxel_size}")

    @property
    def n_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    def centers(self) -> np.ndarray:
        """All voxel centers, shape (X*Y*Z, 3), flat index (x*Y + y)*Z + z."""
        x, y, z = self.dims
        ix, iy, iz = np.meshgrid(np.arange(x), np.arange(y), np.arange(z),
                                 indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3).astype(np.float64)
        return np.asarray(self.origin) + self.voxel_size * (idx + 0.5)

    def center_of(self, index) -> np.ndarray:
        return np.asarray(self.origin) + self.voxel_size * (
            np.asarray(index, dtype=np.float64) + 0.5)


@dataclass
class OccupancyGrid:
    """Scalar payload on a grid; probabilities in [0, 1] or binary {0, 1}."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.spec.dims)
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameterError("non-finite occupancy values")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise InvalidParameterError("occupancy values outside [0, 1]")

    def binarize(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold


def _prepared(gaussians: GaussianSet, tau: float, mode=None,
              intensity_scale: float = 1.0):
    alphas = tempered_opacity(gaussians.opacity_logits, tau)
    if mode is AggregationMode.POISSON and intensity_scale != 1.0:
        alphas = alphas * intensity_scale
    inv_covs = build_inv_covariance(gaussians.quats, gaussians.log_scales)
    return inv_covs, alphas


def _trunc_sq(truncation) -> float:
    if truncation is None or not np.isfinite(truncation):
        return np.inf
    return float(truncation) ** 2


# ---------------------------------------------------------------------------
# Pointwise reference operators (oracle path; untruncated).
# ---------------------------------------------------------------------------

def aggregate_gf2(gaussians: GaussianSet, x: np.ndarray, tau: float | None = None):
    """Kernel-only union; tau is accepted for interface uniformity and ignored."""
    if len(gaussians) == 0:
        return np.zeros(np.shape(x)[0]) if np.ndim(x) == 2 else 0.0
    k = eval_kernel(gaussians, x)
    return 1.0 - np.prod(1.0 - k, axis=-1)


def aggregate_bernoulli(gaussians: GaussianSet, x: np.ndarray, tau: float):
    """Independent-hit union of effective opacities."""
    if len(gaussians) == 0:
        return np.zeros(np.shape(x)[0]) if np.ndim(x) == 2 else 0.0
    h = effective_opacity(gaussians, x, tau)
    return 1.0 - np.prod(1.0 - h, axis=-1)


def aggregate_poisson(gaussians: GaussianSet, x: np.ndarray, tau: float,
                      intensity_scale: float = 1.0):
    """First-arrival probability 1 - exp(-z(x))."""
    return -np.expm1(-mean_measure(gaussians, x, tau, intensity_scale))


def mean_measure(gaussians: GaussianSet, x: np.ndarray, tau: float,
                 intensity_scale: float = 1.0):
    """z(x) = sum_i a_i k_i(x), the expected event count at x."""
    if len(gaussians) == 0:
        return np.zeros(np.shape(x)[0]) if np.ndim(x) == 2 else 0.0
    h = effective_opacity(gaussians, x, tau)
    return intensity_scale * h.sum(axis=-1)


def aggregate(gaussians: GaussianSet, x: np.ndarray, mode, tau: float):
    mode = AggregationMode(mode)
    if mode is AggregationMode.GF2:
        return aggregate_gf2(gaussians, x)
    if mode is AggregationMode.BERNOULLI:
        return aggregate_bernoulli(gaussians, x, tau)
    return aggregate_poisson(gaussians, x, tau)


# ---------------------------------------------------------------------------
# Grid evaluation through the kernel backend.
# ---------------------------------------------------------------------------

_SUPERSAMPLE_OFFSETS = np.array(
    [[sx, sy, sz] for sx in (-0.25, 0.25) for sy in (-0.25, 0.25)
     for sz in (-0.25, 0.25)])


def _sample_points(spec: GridSpec, supersample: bool) -> np.ndarray:
    centers = spec.centers()
    if not supersample:
        return centers
    offs = _SUPERSAMPLE_OFFSETS * spec.voxel_size
    return (centers[:, None, :] + offs[None, :, :]).reshape(-1, 3)


def voxelize(gaussians: GaussianSet, spec: GridSpec, mode, tau: float, *,
             truncation: float | None = DEFAULT_TRUNCATION,
             supersample: bool = False, cell_cap: int = DEFAULT_CELL_CAP,
             intensity_scale: float = 1.0, threads: int = 1,
             return_z: bool = False):
    """Occupancy probability at every voxel center (or 2x2x2 subsample mean).

    Matches looping the pointwise operator over all centers; contributions
    with Mahalanobis distance beyond ``truncation`` are dropped (None keeps
    everything). ``intensity_scale`` rescales the poisson mean measure
    (ignored by the other modes). Raises ResourceLimitError above
    ``cell_cap`` voxels.
    """
    mode = AggregationMode(mode)
    tau = clamp_tau(tau)
    if spec.n_voxels > cell_cap:
        raise ResourceLimitError(
            f"grid has {spec.n_voxels} voxels, above the cap of {cell_cap}")
    inv_covs, alphas = _prepared(gaussians, tau, mode, intensity_scale)
    pts = _sample_points(spec, supersample)
    values, z = kernels.g2o_forward(gaussians.means, inv_covs, alphas, pts,
                                    mode.kernel_code, _trunc_sq(truncation),
                                    threads)
    if supersample:
        values = values.reshape(-1, 8).mean(axis=1)
        z = z.reshape(-1, 8).mean(axis=1)
    grid = OccupancyGrid(spec, np.minimum(values, 1.0))
    if return_z:
        return grid, z.reshape(spec.dims)
    return grid


def g2o_backward(gaussians: GaussianSet, spec: GridSpec, mode, tau: float,
                 upstream: np.ndarray, *,
                 truncation: float | None = DEFAULT_TRUNCATION,
                 supersample: bool = False, intensity_scale: float = 1.0,
                 threads: int = 1) -> GaussianGrads:
    """Pull a per-voxel gradient grid back onto every Gaussian field.

    Embedding gradients are identically zero (geometry never reads them);
    in gf2 mode the opacity gradient is identically zero as well.
    """
    mode = AggregationMode(mode)
    tau = clamp_tau(tau)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != spec.dims and upstream.size != spec.n_voxels:
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} does not match grid {spec.dims}")
    up = np.ascontiguousarray(upstream.reshape(-1))
    inv_covs, alphas = _prepared(gaussians, tau, mode, intensity_scale)
    pts = _sample_points(spec, supersample)
    if supersample:
        up = np.repeat(up / 8.0, 8)
    d_means, d_inv_covs, d_alphas = kernels.g2o_backward(
        gaussians.means, inv_covs, alphas, pts, mode.kernel_code,
        _trunc_sq(truncation), up, threads)
    grads = GaussianGrads.zeros(len(gaussians), gaussians.d)
    grads.d_means[:] = d_means
    if len(gaussians):
        d_quats, d_log_scales = inv_cov_param_grads(
            gaussians.quats, gaussians.log_scales, d_inv_covs)
        grads.d_quats[:] = d_quats
        grads.d_log_scales[:] = d_log_scales
        scale = intensity_scale if mode is AggregationMode.POISSON else 1.0
        grads.d_opacity_logits[:] = scale * d_alphas * tempered_opacity_grad(
            gaussians.opacity_logits, tau)
    return grads
