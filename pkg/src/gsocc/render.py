"""Screen-space projection and front-to-back feature splatting.

Projection follows the local affine (EWA) approximation: a Gaussian with
camera-frame center t and world covariance Sigma lands at the pinhole image
point (fx tx/tz + cx, fy ty/tz + cy) with 2D covariance J W Sigma W^T J^T
plus an isotropic 0.3 px^2 low-pass term, J being the projection Jacobian
at t and W the world-to-camera rotation.

Pixel (row v, col u) is sampled at image coordinates (u, v). Blending runs
front to back over camera-space depth of the means, ties broken by input
index. Per-pixel contributions are clamped to ``alpha_clamp`` (default
0.999) so transmittance gradients stay finite, and blending stops once the
accumulated transmittance falls below ``stop_transmittance``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .core import (
    DEFAULT_TRUNCATION,
    GaussianGrads,
    GaussianSet,
    build_covariance,
    clamp_tau,
    cov_param_grads,
    tempered_opacity,
    tempered_opacity_grad,
)
from .errors import InvalidParameterError, ShapeMismatchError

NEAR_PLANE = 0.01
LOW_PASS = 0.3  # px^2, added to both cov2d diagonal entries
CULL_SIGMA = 3.0  # cull when the 3-sigma screen ellipse misses the image


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a rigid world-to-camera map.

    The camera looks along +z in its own frame, x right, y down.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be at least 1x1")
        if self.world_to_camera.shape != (4, 4):
            raise InvalidParameterError("world_to_camera must be 4x4")
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise InvalidParameterError("world_to_camera rotation not orthonormal")
        if np.linalg.det(R) < 0:
            raise InvalidParameterError("world_to_camera rotation must have det +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target, fx: float, fy: float, width: int, height: int,
                up=(0.0, 0.0, 1.0), cx: float | None = None,
                cy: float | None = None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise InvalidParameterError("eye and target coincide")
        forward = forward / norm
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        down /= np.linalg.norm(down)
        c2w = np.column_stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = c2w.T
        w2c[:3, 3] = -c2w.T @ eye
        return cls(fx=fx, fy=fy,
                   cx=(width - 1) / 2.0 if cx is None else cx,
                   cy=(height - 1) / 2.0 if cy is None else cy,
                   width=width, height=height, world_to_camera=w2c)

    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def ray_directions(self) -> np.ndarray:
        """Unit world-space ray direction per pixel, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64),
                           np.arange(self.height, dtype=np.float64))
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                          np.ones_like(u)], axis=-1)
        d_world = d_cam @ self.rotation  # R^T applied row-wise
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


@dataclass
class RenderSettings:
    alpha_clamp: float = 0.999
    stop_transmittance: float = 1e-4
    truncation: float | None = DEFAULT_TRUNCATION
    threads: int = 1

    def exact(self) -> "RenderSettings":
        """No early termination, no truncation; for oracles and gradients."""
        return replace(self, stop_transmittance=0.0, truncation=None)


@dataclass
class Projection:
    """Screen-space quantities for a whole Gaussian set (invalid rows are
    culled: behind the near plane or 3-sigma ellipse off screen)."""

    mean2d: np.ndarray   # (N, 2)
    cov2d: np.ndarray    # (N, 2, 2), low-pass included
    depth: np.ndarray    # (N,) camera-frame z
    valid: np.ndarray    # (N,) bool
    t_cam: np.ndarray    # (N, 3) camera-frame centers


@dataclass
class FeatureImage:
    """Rendered per-pixel embedding map with alpha and expected depth."""

    feature: np.ndarray  # (H, W, d)
    alpha: np.ndarray    # (H, W)
    depth: np.ndarray    # (H, W)

    @property
    def height(self) -> int:
        return self.feature.shape[0]

    @property
    def width(self) -> int:
        return self.feature.shape[1]

    @property
    def d(self) -> int:
        return self.feature.shape[2]


def project_gaussians(gaussians: GaussianSet, cam: Camera) -> Projection:
    n = len(gaussians)
    if n == 0:
        return Projection(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0),
                          np.zeros(0, dtype=bool), np.zeros((0, 3)))
    R = cam.rotation
    t = gaussians.means @ R.T + cam.translation
    depth = t[:, 2]
    front = depth > NEAR_PLANE
    tz = np.where(front, depth, 1.0)
    u = cam.fx * t[:, 0] / tz + cam.cx
    v = cam.fy * t[:, 1] / tz + cam.cy
    mean2d = np.stack([u, v], axis=1)
    sigma = build_covariance(gaussians.quats, gaussians.log_scales)
    V = np.einsum("ik,nkl,jl->nij", R, sigma, R)
    J = _proj_jacobian(t, tz, cam)
    cov2d = np.einsum("nik,nkl,njl->nij", J, V, J)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(lam_max)
    off = ((u + radius < 0) | (u - radius > cam.width - 1)
           | (v + radius < 0) | (v - radius > cam.height - 1))
    return Projection(mean2d, cov2d, depth, front & ~off, t)


def _proj_jacobian(t, tz, cam: Camera) -> np.ndarray:
    n = t.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * t[:, 0] / tz**2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * t[:, 1] / tz**2
    return J


def _conics(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def _blend_order(proj: Projection) -> np.ndarray:
    idx = np.flatnonzero(proj.valid)
    return idx[np.argsort(proj.depth[idx], kind="stable")]


def _trunc_sq(truncation) -> float:
    if truncation is None or not np.isfinite(truncation):
        return np.inf
    return float(truncation) ** 2


def render_features(gaussians: GaussianSet, cam: Camera, tau: float,
                    settings: RenderSettings | None = None) -> FeatureImage:
    """Alpha-blend embeddings into a (H, W, d) feature image.

    The alpha map is 1 - prod(1 - a_i) over blended contributions and the
    depth map is the alpha-normalized expected camera depth.
    """
    settings = settings or RenderSettings()
    tau = clamp_tau(tau)
    proj = project_gaussians(gaussians, cam)
    order = _blend_order(proj)
    alphas = tempered_opacity(gaussians.opacity_logits[order], tau)
    feature, alpha, depth = kernels.splat_forward(
        np.ascontiguousarray(proj.mean2d[order]),
        np.ascontiguousarray(_conics(proj.cov2d[order])),
        alphas, np.ascontiguousarray(proj.depth[order]),
        np.ascontiguousarray(gaussians.embeddings[order]),
        cam.width, cam.height, settings.alpha_clamp,
        settings.stop_transmittance, _trunc_sq(settings.truncation),
        settings.threads)
    return FeatureImage(feature, alpha, depth)


def render_backward(gaussians: GaussianSet, cam: Camera, tau: float,
                    g_feature: np.ndarray, g_alpha: np.ndarray | None = None,
                    g_depth: np.ndarray | None = None,
                    settings: RenderSettings | None = None) -> GaussianGrads:
    """Pull per-pixel feature/alpha/depth gradients back to Gaussian fields.

    Culled Gaussians receive zero gradients. Requires alpha_clamp < 1.
    """
    settings = settings or RenderSettings()
    tau = clamp_tau(tau)
    n = len(gaussians)
    g_feature = np.asarray(g_feature, dtype=np.float64)
    shape = (cam.height, cam.width)
    if g_feature.shape != shape + (gaussians.d,):
        raise ShapeMismatchError(
            f"feature gradient shape {g_feature.shape} does not match "
            f"{shape + (gaussians.d,)}")
    g_alpha = np.zeros(shape) if g_alpha is None else np.asarray(g_alpha, dtype=np.float64)
    g_depth = np.zeros(shape) if g_depth is None else np.asarray(g_depth, dtype=np.float64)
    if g_alpha.shape != shape or g_depth.shape != shape:
        raise ShapeMismatchError("alpha/depth gradient shape mismatch")

    grads = GaussianGrads.zeros(n, gaussians.d)
    proj = project_gaussians(gaussians, cam)
    order = _blend_order(proj)
    if order.size == 0:
        return grads
    alphas_s = tempered_opacity(gaussians.opacity_logits[order], tau)
    conics_s = _conics(proj.cov2d[order])
    d_m2d_s, d_con_s, d_alpha_s, d_depth_s, d_feat_s = kernels.splat_backward(
        np.ascontiguousarray(proj.mean2d[order]),
        np.ascontiguousarray(conics_s),
        alphas_s, np.ascontiguousarray(proj.depth[order]),
        np.ascontiguousarray(gaussians.embeddings[order]),
        cam.width, cam.height, settings.alpha_clamp,
        settings.stop_transmittance, _trunc_sq(settings.truncation),
        np.ascontiguousarray(g_feature), np.ascontiguousarray(g_alpha),
        np.ascontiguousarray(g_depth), settings.threads)

    # Scatter sorted-order gradients back to the original indexing.
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_alpha = np.zeros(n)
    d_depth = np.zeros(n)
    d_mean2d[order] = d_m2d_s
    d_conic[order] = d_con_s
    d_alpha[order] = d_alpha_s
    d_depth[order] = d_depth_s
    grads.d_embeddings[order] = d_feat_s
    grads.d_opacity_logits[:] = d_alpha * tempered_opacity_grad(
        gaussians.opacity_logits, tau)

    # conic -> cov2d: C = M^-1 so dL/dM = -C G C.
    C = _conic_matrix(_conics(proj.cov2d))
    G = np.zeros((n, 2, 2))
    G[:, 0, 0] = d_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * d_conic[:, 1]
    G[:, 1, 1] = d_conic[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", C, G, C)

    # cov2d = J V J^T + const: gradients to V and, through J, to t.
    R = cam.rotation
    t = proj.t_cam
    tz = np.where(proj.depth > NEAR_PLANE, proj.depth, 1.0)
    J = _proj_jacobian(t, tz, cam)
    g_V = np.einsum("nia,nij,njb->nab", J, g_cov2d, J)
    sigma = build_covariance(gaussians.quats, gaussians.log_scales)
    V = np.einsum("ik,nkl,jl->nij", R, sigma, R)
    Jp = _proj_jacobian_dt(t, tz, cam)  # (N, 3, 2, 3)
    M = np.einsum("nkab,nbc,ndc->nkad", Jp, V, J)
    g_t = np.einsum("nad,nkad->nk", g_cov2d, M) + np.einsum(
        "nad,nkda->nk", g_cov2d, M)

    # mean2d and per-gaussian depth -> t.
    g_t[:, 0] += d_mean2d[:, 0] * cam.fx / tz
    g_t[:, 1] += d_mean2d[:, 1] * cam.fy / tz
    g_t[:, 2] += (-d_mean2d[:, 0] * cam.fx * t[:, 0] / tz**2
                  - d_mean2d[:, 1] * cam.fy * t[:, 1] / tz**2)
    g_t[:, 2] += d_depth

    g_t[~proj.valid] = 0.0
    g_V[~proj.valid] = 0.0
    grads.d_means[:] = g_t @ R
    g_sigma = np.einsum("ia,nij,jb->nab", R, g_V, R)
    d_quats, d_log_scales = cov_param_grads(gaussians.quats,
                                            gaussians.log_scales, g_sigma)
    grads.d_quats[:] = d_quats
    grads.d_log_scales[:] = d_log_scales
    return grads


def _conic_matrix(conics: np.ndarray) -> np.ndarray:
    C = np.zeros((conics.shape[0], 2, 2))
    C[:, 0, 0] = conics[:, 0]
    C[:, 0, 1] = C[:, 1, 0] = conics[:, 1]
    C[:, 1, 1] = conics[:, 2]
    return C


def _proj_jacobian_dt(t, tz, cam: Camera) -> np.ndarray:
    """dJ/dt stacked over the three components of t, shape (N, 3, 2, 3)."""
    n = t.shape[0]
    Jp = np.zeros((n, 3, 2, 3))
    inv2 = 1.0 / tz**2
    inv3 = inv2 / tz
    Jp[:, 0, 0, 2] = -cam.fx * inv2
    Jp[:, 1, 1, 2] = -cam.fy * inv2
    Jp[:, 2, 0, 0] = -cam.fx * inv2
    Jp[:, 2, 0, 2] = 2.0 * cam.fx * t[:, 0] * inv3
    Jp[:, 2, 1, 1] = -cam.fy * inv2
    Jp[:, 2, 1, 2] = 2.0 * cam.fy * t[:, 1] * inv3
    return Jp


def frustum_mask(spec, cam: Camera) -> np.ndarray:
    """Boolean (X, Y, Z) mask of voxels whose centers fall inside the view."""
    centers = spec.centers()
    t = centers @ cam.rotation.T + cam.translation
    front = t[:, 2] > NEAR_PLANE
    tz = np.where(front, t[:, 2], 1.0)
    u = cam.fx * t[:, 0] / tz + cam.cx
    v = cam.fy * t[:, 1] / tz + cam.cy
    inside = (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    return (front & inside).reshape(spec.dims)
