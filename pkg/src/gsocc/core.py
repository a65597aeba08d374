"""Gaussian primitive representation and the shared 3D kernel math.

A primitive carries a position, an orientation (unit quaternion, scalar
first), per-axis log scales, an opacity logit, and a feature embedding.
Covariances are never stored as raw matrices: they are always rebuilt from
the quaternion/scale factorization, which keeps them symmetric positive
definite by construction.

Opacity is materialized only through the tempered sigmoid
``sigma(logit / tau)``; small temperatures sharpen opacities toward {0, 1}
while keeping the map differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InvalidParameterError, NumericalDegeneracyError

SCALE_MIN = 1e-6  # meters
SCALE_MAX = 1e3
LOG_SCALE_MIN = np.log(SCALE_MIN)
LOG_SCALE_MAX = np.log(SCALE_MAX)
TAU_MIN = 1e-6
TAU_MAX = 1e3

# Mahalanobis radius beyond which aggregation kernels drop a contribution
# (exp(-36/2) ~ 1.5e-8, far below every test tolerance). None disables.
DEFAULT_TRUNCATION = 6.0


def clamp_tau(tau: float) -> float:
    """Validate a temperature and clamp it into the supported range."""
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise InvalidParameterError(f"temperature must be positive and finite, got {tau}")
    return float(min(max(tau, TAU_MIN), TAU_MAX))


@dataclass
class GaussianSet:
    """A set of N Gaussian primitives stored as float64 arrays.

    Fields
    ------
    means : (N, 3) positions in meters.
    quats : (N, 4) unit quaternions (w, x, y, z); renormalized on construction.
    log_scales : (N, 3) log of per-axis standard deviations in meters,
        clamped so scales stay in [1e-6, 1e3].
    opacity_logits : (N,) raw logits; opacity is sigma(logit / tau).
    embeddings : (N, d) feature vectors, one shared d for the whole set.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        as_c = np.ascontiguousarray
        self.means = as_c(np.atleast_2d(np.asarray(self.means, dtype=np.float64)))
        self.quats = as_c(np.atleast_2d(np.asarray(self.quats, dtype=np.float64)))
        self.log_scales = as_c(
            np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64)))
        self.opacity_logits = as_c(np.atleast_1d(
            np.asarray(self.opacity_logits, dtype=np.float64)))
        self.embeddings = as_c(
            np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64)))
        n = self.means.shape[0]
        if self.means.shape != (n, 3):
            raise InvalidParameterError(f"means must be (N, 3), got {self.means.shape}")
        if self.quats.shape != (n, 4):
            raise InvalidParameterError(f"quats must be (N, 4), got {self.quats.shape}")
        if self.log_scales.shape != (n, 3):
            raise InvalidParameterError(
                f"log_scales must be (N, 3), got {self.log_scales.shape}"
            )
        if self.opacity_logits.shape != (n,):
            raise InvalidParameterError(
                f"opacity_logits must be (N,), got {self.opacity_logits.shape}"
            )
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise InvalidParameterError(
                f"embeddings must be (N, d), got {self.embeddings.shape}"
            )
        for name in ("means", "quats", "log_scales", "opacity_logits", "embeddings"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"non-finite values in {name}")
        # Renormalize only when actually off; keeps float32 round-trips exact
        # (kernel evaluation normalizes internally regardless).
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            self.quats = quat_normalize(self.quats)
        self.log_scales = np.clip(self.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.means.copy(),
            self.quats.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.embeddings.copy(),
        )

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(
            self.means[idx],
            self.quats[idx],
            self.log_scales[idx],
            self.opacity_logits[idx],
            self.embeddings[idx],
        )

    @classmethod
    def empty(cls, d: int) -> "GaussianSet":
        return cls(
            np.zeros((0, 3)),
            np.zeros((0, 4)),
            np.zeros((0, 3)),
            np.zeros((0,)),
            np.zeros((0, d)),
        )

    @classmethod
    def single(cls, mean, quat=(1.0, 0.0, 0.0, 0.0), log_scale=(0.0, 0.0, 0.0),
               opacity_logit=0.0, embedding=(1.0,)) -> "GaussianSet":
        return cls(
            np.asarray(mean, dtype=np.float64)[None],
            np.asarray(quat, dtype=np.float64)[None],
            np.asarray(log_scale, dtype=np.float64)[None],
            np.asarray([opacity_logit], dtype=np.float64),
            np.asarray(embedding, dtype=np.float64)[None],
        )


# ---------------------------------------------------------------------------
# Quaternion / rotation helpers (scalar-first convention).
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidParameterError("quaternion norm too small to normalize")
    return q / norm


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions, shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rot_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for the polynomial map above, shape (..., 4) -> (..., 4, 3, 3).

    Evaluated at the given (unit) quaternion; combine with
    :func:`quat_normalize_jacobian` to differentiate through renormalization.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    J = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    J[..., 0, :, :] = 2 * np.stack(
        [np.stack([zero, -z, y], -1),
         np.stack([z, zero, -x], -1),
         np.stack([-y, x, zero], -1)], -2)
    J[..., 1, :, :] = 2 * np.stack(
        [np.stack([zero, y, z], -1),
         np.stack([y, -2 * x, -w], -1),
         np.stack([z, w, -2 * x], -1)], -2)
    J[..., 2, :, :] = 2 * np.stack(
        [np.stack([-2 * y, x, w], -1),
         np.stack([x, zero, z], -1),
         np.stack([-w, z, -2 * y], -1)], -2)
    J[..., 3, :, :] = 2 * np.stack(
        [np.stack([-2 * z, -w, x], -1),
         np.stack([w, -2 * z, y], -1),
         np.stack([x, y, zero], -1)], -2)
    return J


def quat_normalize_jacobian(q: np.ndarray) -> np.ndarray:
    """d(q/|q|)/dq, shape (..., 4) -> (..., 4, 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    eye = np.broadcast_to(np.eye(4), q.shape[:-1] + (4, 4))
    return (eye - qn[..., :, None] * qn[..., None, :]) / norm[..., None]


# ---------------------------------------------------------------------------
# Covariance construction and kernel evaluation.
# ---------------------------------------------------------------------------

def build_covariance(quat: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(2 s)) R^T for quaternion/log-scale pairs.

    Accepts single (4,), (3,) inputs or batches (..., 4), (..., 3).
    """
    quat = np.asarray(quat, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not (np.all(np.isfinite(quat)) and np.all(np.isfinite(log_scale))):
        raise InvalidParameterError("non-finite rotation or scale")
    R = quat_to_rot(quat_normalize(quat))
    s2 = np.exp(2.0 * np.clip(log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX))
    return np.einsum("...ik,...k,...jk->...ij", R, s2, R)


def build_inv_covariance(quat: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Sigma^-1 = R diag(exp(-2 s)) R^T, the form kernel evaluation uses."""
    quat = np.asarray(quat, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not (np.all(np.isfinite(quat)) and np.all(np.isfinite(log_scale))):
        raise InvalidParameterError("non-finite rotation or scale")
    R = quat_to_rot(quat_normalize(quat))
    inv_s2 = np.exp(-2.0 * np.clip(log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX))
    return np.einsum("...ik,...k,...jk->...ij", R, inv_s2, R)


def assert_spd(cov: np.ndarray, min_eig: float = 1e-12) -> None:
    """Raise if a covariance matrix is effectively singular."""
    eigvals = np.linalg.eigvalsh(cov)
    if np.min(eigvals) < min_eig:
        raise NumericalDegeneracyError(
            f"covariance smallest eigenvalue {np.min(eigvals):.3e} below {min_eig:.0e}"
        )


def mahalanobis_sq(gaussians: GaussianSet, x: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distance of points to every Gaussian.

    x may be (3,) or (M, 3); returns (N,) or (M, N).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    A = build_inv_covariance(gaussians.quats, gaussians.log_scales)
    diff = pts[:, None, :] - gaussians.means[None, :, :]  # (M, N, 3)
    m2 = np.einsum("mni,nij,mnj->mn", diff, A, diff)
    return m2[0] if single else m2


def eval_kernel(gaussians: GaussianSet, x: np.ndarray) -> np.ndarray:
    """Unnormalized Gaussian kernel exp(-m^2 / 2) at points x.

    Equals 1 exactly at the mean. Raises on effectively singular covariance
    (smallest scale below 1e-6 m, i.e. eigenvalue below 1e-12 m^2).
    """
    smallest = np.exp(2.0 * np.min(gaussians.log_scales))
    if smallest < 1e-12:
        raise NumericalDegeneracyError("covariance eigenvalue below 1e-12")
    return np.exp(-0.5 * mahalanobis_sq(gaussians, x))


def tempered_opacity(opacity_logit, tau: float):
    """sigma(logit / tau); saturates cleanly at the extremes, never NaN."""
    tau = clamp_tau(tau)
    return expit(np.asarray(opacity_logit, dtype=np.float64) / tau)


def tempered_opacity_grad(opacity_logit, tau: float):
    """d sigma(logit / tau) / d logit."""
    tau = clamp_tau(tau)
    a = expit(np.asarray(opacity_logit, dtype=np.float64) / tau)
    return a * (1.0 - a) / tau


def effective_opacity(gaussians: GaussianSet, x: np.ndarray, tau: float) -> np.ndarray:
    """Per-primitive contribution alpha_i * kernel_i(x), the event intensity."""
    k = eval_kernel(gaussians, x)
    a = tempered_opacity(gaussians.opacity_logits, tau)
    return a * k


# ---------------------------------------------------------------------------
# Parameter-space gradient chains. The hot kernels differentiate with respect
# to (mean, inverse covariance, alpha); these helpers push those gradients
# back onto the stored fields (mean, quaternion, log-scale, logit).
# ---------------------------------------------------------------------------

def inv_cov_param_grads(quats: np.ndarray, log_scales: np.ndarray,
                        g_inv_cov: np.ndarray):
    """Map dL/dA (A = Sigma^-1, entries treated independently) to
    (dL/dquat, dL/dlog_scale). Batched over the leading axis."""
    quats = np.atleast_2d(np.asarray(quats, dtype=np.float64))
    log_scales = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
    G = np.asarray(g_inv_cov, dtype=np.float64).reshape(-1, 3, 3)
    qn = quat_normalize(quats)
    R = quat_to_rot(qn)
    inv_s2 = np.exp(-2.0 * log_scales)  # (N, 3)
    # dL/ds_k = -2 exp(-2 s_k) (R^T G R)_kk
    RtGR = np.einsum("nki,nkl,nlj->nij", R, G, R)
    d_log_scale = -2.0 * inv_s2 * np.einsum("nkk->nk", RtGR)
    # dA/dq_j = J_j D R^T + R D J_j^T with D = diag(exp(-2s))
    J = quat_rot_jacobian(qn)  # (N, 4, 3, 3)
    JD = J * inv_s2[:, None, None, :]  # scales columns of each J_j
    term = np.einsum("nqik,njk->nqij", JD, R)  # J_j D R^T
    d_qn = np.einsum("nij,nqij->nq", G, term) + np.einsum("nij,nqji->nq", G, term)
    d_quat = np.einsum("nqp,nq->np", quat_normalize_jacobian(quats), d_qn)
    return d_quat, d_log_scale


def cov_param_grads(quats: np.ndarray, log_scales: np.ndarray,
                    g_cov: np.ndarray):
    """Map dL/dSigma (entries treated independently) to
    (dL/dquat, dL/dlog_scale). Batched over the leading axis."""
    quats = np.atleast_2d(np.asarray(quats, dtype=np.float64))
    log_scales = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
    G = np.asarray(g_cov, dtype=np.float64).reshape(-1, 3, 3)
    qn = quat_normalize(quats)
    R = quat_to_rot(qn)
    s2 = np.exp(2.0 * log_scales)
    RtGR = np.einsum("nki,nkl,nlj->nij", R, G, R)
    d_log_scale = 2.0 * s2 * np.einsum("nkk->nk", RtGR)
    J = quat_rot_jacobian(qn)
    JD = J * s2[:, None, None, :]
    term = np.einsum("nqik,njk->nqij", JD, R)
    d_qn = np.einsum("nij,nqij->nq", G, term) + np.einsum("nij,nqji->nq", G, term)
    d_quat = np.einsum("nqp,nq->np", quat_normalize_jacobian(quats), d_qn)
    return d_quat, d_log_scale


@dataclass
class GaussianGrads:
    """Per-field gradients for a :class:`GaussianSet`, same shapes."""

    d_means: np.ndarray
    d_quats: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_embeddings: np.ndarray

    @classmethod
    def zeros(cls, n: int, d: int) -> "GaussianGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros((n, d)))

    def _fields(self):
        return (self.d_means, self.d_quats, self.d_log_scales,
                self.d_opacity_logits, self.d_embeddings)

    def add_scaled(self, other: "GaussianGrads", c: float = 1.0) -> "GaussianGrads":
        for a, b in zip(self._fields(), other._fields()):
            a += c * b
        return self

    def scale(self, c: float) -> "GaussianGrads":
        for a in self._fields():
            a *= c
        return self

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self._fields())))


def kernel_point_grads(gaussians: GaussianSet, x: np.ndarray):
    """Kernel values plus analytic gradients w.r.t. every geometric field.

    x is a single point (3,). Returns a dict with the value array (N,) and
    gradients d_mean (N, 3), d_quat (N, 4), d_log_scale (N, 3).
    """
    x = np.asarray(x, dtype=np.float64)
    A = build_inv_covariance(gaussians.quats, gaussians.log_scales)
    diff = x[None, :] - gaussians.means  # (N, 3)
    Ad = np.einsum("nij,nj->ni", A, diff)
    p = np.exp(-0.5 * np.einsum("ni,ni->n", diff, Ad))
    d_mean = p[:, None] * Ad
    g_A = -0.5 * p[:, None, None] * diff[:, :, None] * diff[:, None, :]
    d_quat, d_log_scale = inv_cov_param_grads(gaussians.quats, gaussians.log_scales, g_A)
    return {"value": p, "d_mean": d_mean, "d_quat": d_quat, "d_log_scale": d_log_scale}
