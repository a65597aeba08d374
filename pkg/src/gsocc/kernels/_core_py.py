"""Pure-numpy kernels: occupancy aggregation and feature splatting.

This is the fallback backend; a Cython extension with the same function
signatures is preferred when compiled. Both backends must agree to 1e-9
on every output (tested), and accumulate in fixed index order so results
are reproducible run to run.

Aggregation modes are shared integer codes:
  0 -> kernel-only union       1 - prod(1 - k_i)
  1 -> bernoulli union         1 - prod(1 - a_i k_i)
  2 -> poisson first-arrival   1 - exp(-sum a_i k_i)

Points and pixels are processed in chunks to bound the (points x gaussians)
intermediate arrays.
"""

from __future__ import annotations

import numpy as np

MODE_GF2 = 0
MODE_BERNOULLI = 1
MODE_POISSON = 2

_CHUNK_ELEMS = 1 << 22  # target elements per (points x gaussians) block


def _chunks(m: int, n: int):
    step = max(1, _CHUNK_ELEMS // max(n, 1))
    for start in range(0, m, step):
        yield start, min(m, start + step)


def _kernel_block(means, inv_covs, points, trunc_sq):
    """Kernel values k (M, N) with truncation applied."""
    diff = points[:, None, :] - means[None, :, :]
    m2 = np.einsum("mni,nij,mnj->mn", diff, inv_covs, diff)
    k = np.exp(-0.5 * m2)
    if np.isfinite(trunc_sq):
        k[m2 > trunc_sq] = 0.0
    return diff, k


def _exclusive_prod(om):
    """prod_{j != i} om[:, j] via prefix/suffix products (zero-safe)."""
    pre = np.ones_like(om)
    np.cumprod(om[:, :-1], axis=1, out=pre[:, 1:])
    suf = np.ones_like(om)
    np.cumprod(om[:, :0:-1], axis=1, out=suf[:, -2::-1])
    return pre * suf


def g2o_forward(means, inv_covs, alphas, points, mode, trunc_sq, nthreads=1):
    """Aggregate occupancy at M points. Returns (values (M,), z (M,)).

    z is the running sum of contributions (the mean measure for mode 2).
    """
    m = points.shape[0]
    values = np.zeros(m)
    z = np.zeros(m)
    if means.shape[0] == 0:
        return values, z
    for lo, hi in _chunks(m, means.shape[0]):
        _, k = _kernel_block(means, inv_covs, points[lo:hi], trunc_sq)
        h = k if mode == MODE_GF2 else alphas[None, :] * k
        z[lo:hi] = h.sum(axis=1)
        if mode == MODE_POISSON:
            values[lo:hi] = -np.expm1(-z[lo:hi])
        else:
            values[lo:hi] = 1.0 - np.prod(1.0 - h, axis=1)
    return values, z


def g2o_backward(means, inv_covs, alphas, points, mode, trunc_sq, upstream,
                 nthreads=1):
    """Gradients of sum(upstream * values) w.r.t. per-gaussian quantities.

    Returns (d_means (N, 3), d_inv_covs (N, 3, 3), d_alphas (N,)).
    """
    n = means.shape[0]
    d_means = np.zeros((n, 3))
    d_inv_covs = np.zeros((n, 3, 3))
    d_alphas = np.zeros(n)
    if n == 0 or points.shape[0] == 0:
        return d_means, d_inv_covs, d_alphas
    for lo, hi in _chunks(points.shape[0], n):
        diff, k = _kernel_block(means, inv_covs, points[lo:hi], trunc_sq)
        up = upstream[lo:hi]
        if mode == MODE_GF2:
            h = k
            d_h = up[:, None] * _exclusive_prod(1.0 - h)
            d_k = d_h
        elif mode == MODE_BERNOULLI:
            h = alphas[None, :] * k
            d_h = up[:, None] * _exclusive_prod(1.0 - h)
            d_k = d_h * alphas[None, :]
            d_alphas += np.einsum("mn,mn->n", d_h, k)
        else:
            h = alphas[None, :] * k
            d_h = (up * np.exp(-h.sum(axis=1)))[:, None]
            d_k = d_h * alphas[None, :]
            d_alphas += np.einsum("mn,mn->n", np.broadcast_to(d_h, k.shape), k)
        d_m2 = d_k * (-0.5 * k)  # zero wherever truncation zeroed k
        Ad = np.einsum("nij,mnj->mni", inv_covs, diff)
        d_means += np.einsum("mn,mni->ni", d_m2, -2.0 * Ad)
        d_inv_covs += np.einsum("mn,mni,mnj->nij", d_m2, diff, diff)
    return d_means, d_inv_covs, d_alphas


def embed_forward(means, inv_covs, alphas, embeddings, points, trunc_sq,
                  nthreads=1):
    """Intensity-weighted embedding average per point.

    Returns (emb (M, d), z (M,)) with emb = sum h_i f_i / max(z, 1e-8).
    """
    m = points.shape[0]
    d = embeddings.shape[1]
    emb = np.zeros((m, d))
    z = np.zeros(m)
    if means.shape[0] == 0:
        return emb, z
    for lo, hi in _chunks(m, means.shape[0]):
        _, k = _kernel_block(means, inv_covs, points[lo:hi], trunc_sq)
        h = alphas[None, :] * k
        z[lo:hi] = h.sum(axis=1)
        emb[lo:hi] = (h @ embeddings) / np.maximum(z[lo:hi], 1e-8)[:, None]
    return emb, z


def nearest_embed_forward(means, inv_covs, alphas, embeddings, points,
                          trunc_sq, nthreads=1):
    """Winner-take-all variant: each point copies the embedding of the
    gaussian with the largest intensity there (ties -> lowest index)."""
    m = points.shape[0]
    d = embeddings.shape[1]
    emb = np.zeros((m, d))
    z = np.zeros(m)
    if means.shape[0] == 0:
        return emb, z
    for lo, hi in _chunks(m, means.shape[0]):
        _, k = _kernel_block(means, inv_covs, points[lo:hi], trunc_sq)
        h = alphas[None, :] * k
        z[lo:hi] = h.sum(axis=1)
        best = np.argmax(h, axis=1)
        emb[lo:hi] = embeddings[best]
        emb[lo:hi][h[np.arange(h.shape[0]), best] <= 0.0] = 0.0
    return emb, z


# ---------------------------------------------------------------------------
# Screen-space splatting. Inputs arrive pre-sorted in blend order
# (front to back); pixel (row v, col u) is sampled at coordinates (u, v).
# ---------------------------------------------------------------------------

def _pixel_grid(width, height):
    u, v = np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64))
    return u.ravel(), v.ravel()


def _alpha_matrix(means2d, conics, alphas, us, vs, alpha_clamp, trunc_sq):
    dx = us[:, None] - means2d[None, :, 0]
    dy = vs[:, None] - means2d[None, :, 1]
    ca, cb, cc = conics[:, 0], conics[:, 1], conics[:, 2]
    m2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    g = np.exp(-0.5 * m2)
    if np.isfinite(trunc_sq):
        g[m2 > trunc_sq] = 0.0
    a_raw = alphas[None, :] * g
    return dx, dy, g, a_raw, np.minimum(a_raw, alpha_clamp)


def splat_forward(means2d, conics, alphas, depths, feats, width, height,
                  alpha_clamp, stop_t, trunc_sq, nthreads=1):
    """Front-to-back alpha blending of K sorted gaussians.

    conics pack the inverse 2D covariance [[a, b], [b, c]] as (a, b, c).
    A contribution is blended only while the accumulated transmittance is
    >= stop_t (stop_t = 0 disables early termination).

    Returns (feature (H, W, d), alpha (H, W), depth (H, W)).
    """
    d = feats.shape[1]
    k = means2d.shape[0]
    feature = np.zeros((height * width, d))
    alpha_map = np.zeros(height * width)
    depth_map = np.zeros(height * width)
    if k == 0:
        return (feature.reshape(height, width, d),
                alpha_map.reshape(height, width),
                depth_map.reshape(height, width))
    us, vs = _pixel_grid(width, height)
    for lo, hi in _chunks(us.shape[0], k):
        _, _, _, _, a = _alpha_matrix(means2d, conics, alphas,
                                      us[lo:hi], vs[lo:hi], alpha_clamp, trunc_sq)
        om = 1.0 - a
        t = np.ones_like(om)
        np.cumprod(om[:, :-1], axis=1, out=t[:, 1:])
        include = t >= stop_t if stop_t > 0.0 else np.ones_like(t, dtype=bool)
        w = np.where(include, t * a, 0.0)
        feature[lo:hi] = w @ feats
        alpha_map[lo:hi] = 1.0 - np.prod(np.where(include, om, 1.0), axis=1)
        s = w @ depths
        depth_map[lo:hi] = s / np.maximum(alpha_map[lo:hi], 1e-8)
    return (feature.reshape(height, width, d),
            alpha_map.reshape(height, width),
            depth_map.reshape(height, width))


def splat_backward(means2d, conics, alphas, depths, feats, width, height,
                   alpha_clamp, stop_t, trunc_sq,
                   g_feature, g_alpha, g_depth, nthreads=1):
    """Gradients of the splat under upstream feature/alpha/depth gradients.

    Requires alpha_clamp < 1 (the clamp keeps 1/(1 - a) finite).
    Returns (d_means2d (K, 2), d_conics (K, 3), d_alphas (K,),
    d_depths (K,), d_feats (K, d)).
    """
    k = means2d.shape[0]
    d = feats.shape[1]
    d_means2d = np.zeros((k, 2))
    d_conics = np.zeros((k, 3))
    d_alphas = np.zeros(k)
    d_depths = np.zeros(k)
    d_feats = np.zeros((k, d))
    if k == 0:
        return d_means2d, d_conics, d_alphas, d_depths, d_feats
    us, vs = _pixel_grid(width, height)
    gf = g_feature.reshape(-1, d)
    ga = g_alpha.ravel()
    gd = g_depth.ravel()
    for lo, hi in _chunks(us.shape[0], k):
        dx, dy, g, a_raw, a = _alpha_matrix(means2d, conics, alphas,
                                            us[lo:hi], vs[lo:hi],
                                            alpha_clamp, trunc_sq)
        om = 1.0 - a
        t = np.ones_like(om)
        np.cumprod(om[:, :-1], axis=1, out=t[:, 1:])
        include = t >= stop_t if stop_t > 0.0 else np.ones_like(t, dtype=bool)
        w = np.where(include, t * a, 0.0)
        alpha_px = 1.0 - np.prod(np.where(include, om, 1.0), axis=1)
        t_end = 1.0 - alpha_px
        s = w @ depths
        c = np.maximum(alpha_px, 1e-8)
        gs = gd[lo:hi] / c
        g_alpha_px = ga[lo:hi] + np.where(alpha_px > 1e-8,
                                          -gd[lo:hi] * s / (c * c), 0.0)
        # per-unit-weight upstream: u_{p,i} = gF_p . f_i + gS_p * depth_i
        upw = gf[lo:hi] @ feats.T + gs[:, None] * depths[None, :]
        wu = w * upw
        suffix = np.cumsum(wu[:, ::-1], axis=1)[:, ::-1] - wu
        inv_om = 1.0 / np.maximum(om, 1e-12)
        da = t * upw - suffix * inv_om + (g_alpha_px * t_end)[:, None] * inv_om
        da = np.where(include, da, 0.0)
        da_raw = np.where(a_raw < alpha_clamp, da, 0.0)
        d_alphas += np.einsum("pk,pk->k", da_raw, g)
        dm2 = da_raw * alphas[None, :] * (-0.5 * g)
        ca, cb, cc = conics[:, 0], conics[:, 1], conics[:, 2]
        d_means2d[:, 0] += np.einsum("pk,pk->k", dm2, -2.0 * (ca * dx + cb * dy))
        d_means2d[:, 1] += np.einsum("pk,pk->k", dm2, -2.0 * (cb * dx + cc * dy))
        d_conics[:, 0] += np.einsum("pk,pk->k", dm2, dx * dx)
        d_conics[:, 1] += np.einsum("pk,pk->k", dm2, 2.0 * dx * dy)
        d_conics[:, 2] += np.einsum("pk,pk->k", dm2, dy * dy)
        d_depths += w.T @ gs
        d_feats += w.T @ gf[lo:hi]
    return d_means2d, d_conics, d_alphas, d_depths, d_feats
