# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same contracts as the numpy backend (_core_py).

Forward passes parallelize over points/pixels with OpenMP (each output
slot is written by exactly one iteration, so results are identical for any
thread count). Backward passes accumulate per-gaussian gradients serially
in fixed point order, which keeps them bit-reproducible.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, INFINITY
from libc.stdlib cimport free, malloc

cnp.import_array()

MODE_GF2 = 0
MODE_BERNOULLI = 1
MODE_POISSON = 2


cdef inline double _m2_3d(const double* mean, const double* A,
                          const double* p) noexcept nogil:
    cdef double d0 = p[0] - mean[0]
    cdef double d1 = p[1] - mean[1]
    cdef double d2 = p[2] - mean[2]
    return (d0 * (A[0] * d0 + A[1] * d1 + A[2] * d2)
            + d1 * (A[3] * d0 + A[4] * d1 + A[5] * d2)
            + d2 * (A[6] * d0 + A[7] * d1 + A[8] * d2))


def g2o_forward(double[:, ::1] means, double[:, :, ::1] inv_covs,
                double[::1] alphas, double[:, ::1] points, int mode,
                double trunc_sq, int nthreads=1):
    cdef Py_ssize_t n = means.shape[0]
    cdef Py_ssize_t m = points.shape[0]
    values_arr = np.zeros(m)
    z_arr = np.zeros(m)
    cdef double[::1] values = values_arr
    cdef double[::1] z = z_arr
    if n == 0 or m == 0:
        return values_arr, z_arr
    cdef Py_ssize_t p, i
    cdef double m2, k, h, acc, prod
    cdef int nt = max(nthreads, 1)
    for p in prange(m, nogil=True, num_threads=nt, schedule="static"):
        acc = 0.0
        prod = 1.0
        for i in range(n):
            m2 = _m2_3d(&means[i, 0], &inv_covs[i, 0, 0], &points[p, 0])
            if m2 > trunc_sq:
                continue
            k = exp(-0.5 * m2)
            h = k if mode == 0 else alphas[i] * k
            acc = acc + h
            prod = prod * (1.0 - h)
        z[p] = acc
        if mode == 2:
            values[p] = -(exp(-acc) - 1.0)
        else:
            values[p] = 1.0 - prod
    return values_arr, z_arr


def g2o_backward(double[:, ::1] means, double[:, :, ::1] inv_covs,
                 double[::1] alphas, double[:, ::1] points, int mode,
                 double trunc_sq, double[::1] upstream, int nthreads=1):
    cdef Py_ssize_t n = means.shape[0]
    cdef Py_ssize_t m = points.shape[0]
    d_means_arr = np.zeros((n, 3))
    d_inv_covs_arr = np.zeros((n, 3, 3))
    d_alphas_arr = np.zeros(n)
    cdef double[:, ::1] d_means = d_means_arr
    cdef double[:, :, ::1] d_inv_covs = d_inv_covs_arr
    cdef double[::1] d_alphas = d_alphas_arr
    if n == 0 or m == 0:
        return d_means_arr, d_inv_covs_arr, d_alphas_arr
    # Per-point scratch: kernel values and exclusive products.
    k_arr = np.empty(n)
    pre_arr = np.empty(n)
    suf_arr = np.empty(n)
    cdef double[::1] kbuf = k_arr
    cdef double[::1] pre = pre_arr
    cdef double[::1] suf = suf_arr
    cdef Py_ssize_t p, i, a, b
    cdef double m2, k, h, zsum, up, d_h, d_k, d_m2, base
    cdef double d0, d1, d2, ad0, ad1, ad2
    cdef const double* A
    for p in range(m):
        up = upstream[p]
        zsum = 0.0
        for i in range(n):
            m2 = _m2_3d(&means[i, 0], &inv_covs[i, 0, 0], &points[p, 0])
            if m2 > trunc_sq:
                kbuf[i] = 0.0
            else:
                kbuf[i] = exp(-0.5 * m2)
            zsum += kbuf[i] if mode == 0 else alphas[i] * kbuf[i]
        if mode != 2:
            # exclusive products of (1 - h) around each index
            base = 1.0
            for i in range(n):
                pre[i] = base
                h = kbuf[i] if mode == 0 else alphas[i] * kbuf[i]
                base *= 1.0 - h
            base = 1.0
            for i in range(n - 1, -1, -1):
                suf[i] = base
                h = kbuf[i] if mode == 0 else alphas[i] * kbuf[i]
                base *= 1.0 - h
        else:
            base = up * exp(-zsum)
        for i in range(n):
            k = kbuf[i]
            if mode == 2:
                d_h = base
            else:
                d_h = up * pre[i] * suf[i]
            if mode == 0:
                d_k = d_h
            else:
                d_k = d_h * alphas[i]
                d_alphas[i] += d_h * k
            d_m2 = d_k * (-0.5 * k)
            if d_m2 == 0.0:
                continue
            d0 = points[p, 0] - means[i, 0]
            d1 = points[p, 1] - means[i, 1]
            d2 = points[p, 2] - means[i, 2]
            A = &inv_covs[i, 0, 0]
            ad0 = A[0] * d0 + A[1] * d1 + A[2] * d2
            ad1 = A[3] * d0 + A[4] * d1 + A[5] * d2
            ad2 = A[6] * d0 + A[7] * d1 + A[8] * d2
            d_means[i, 0] += d_m2 * (-2.0 * ad0)
            d_means[i, 1] += d_m2 * (-2.0 * ad1)
            d_means[i, 2] += d_m2 * (-2.0 * ad2)
            d_inv_covs[i, 0, 0] += d_m2 * d0 * d0
            d_inv_covs[i, 0, 1] += d_m2 * d0 * d1
            d_inv_covs[i, 0, 2] += d_m2 * d0 * d2
            d_inv_covs[i, 1, 0] += d_m2 * d1 * d0
            d_inv_covs[i, 1, 1] += d_m2 * d1 * d1
            d_inv_covs[i, 1, 2] += d_m2 * d1 * d2
            d_inv_covs[i, 2, 0] += d_m2 * d2 * d0
            d_inv_covs[i, 2, 1] += d_m2 * d2 * d1
            d_inv_covs[i, 2, 2] += d_m2 * d2 * d2
    return d_means_arr, d_inv_covs_arr, d_alphas_arr


def embed_forward(double[:, ::1] means, double[:, :, ::1] inv_covs,
                  double[::1] alphas, double[:, ::1] embeddings,
                  double[:, ::1] points, double trunc_sq, int nthreads=1):
    cdef Py_ssize_t n = means.shape[0]
    cdef Py_ssize_t m = points.shape[0]
    cdef Py_ssize_t d = embeddings.shape[1]
    emb_arr = np.zeros((m, d))
    z_arr = np.zeros(m)
    cdef double[:, ::1] emb = emb_arr
    cdef double[::1] z = z_arr
    if n == 0 or m == 0:
        return emb_arr, z_arr
    cdef Py_ssize_t p, i, j
    cdef double m2, h, acc, denom
    cdef int nt = max(nthreads, 1)
    for p in prange(m, nogil=True, num_threads=nt, schedule="static"):
        acc = 0.0
        for i in range(n):
            m2 = _m2_3d(&means[i, 0], &inv_covs[i, 0, 0], &points[p, 0])
            if m2 > trunc_sq:
                continue
            h = alphas[i] * exp(-0.5 * m2)
            acc = acc + h
            for j in range(d):
                emb[p, j] += h * embeddings[i, j]
        z[p] = acc
        denom = acc if acc > 1e-8 else 1e-8
        for j in range(d):
            emb[p, j] /= denom
    return emb_arr, z_arr


def nearest_embed_forward(double[:, ::1] means, double[:, :, ::1] inv_covs,
                          double[::1] alphas, double[:, ::1] embeddings,
                          double[:, ::1] points, double trunc_sq,
                          int nthreads=1):
    cdef Py_ssize_t n = means.shape[0]
    cdef Py_ssize_t m = points.shape[0]
    cdef Py_ssize_t d = embeddings.shape[1]
    emb_arr = np.zeros((m, d))
    z_arr = np.zeros(m)
    cdef double[:, ::1] emb = emb_arr
    cdef double[::1] z = z_arr
    if n == 0 or m == 0:
        return emb_arr, z_arr
    cdef Py_ssize_t p, i, j, best
    cdef double m2, h, acc, hbest
    cdef int nt = max(nthreads, 1)
    for p in prange(m, nogil=True, num_threads=nt, schedule="static"):
        acc = 0.0
        best = -1
        hbest = 0.0
        for i in range(n):
            m2 = _m2_3d(&means[i, 0], &inv_covs[i, 0, 0], &points[p, 0])
            if m2 > trunc_sq:
                continue
            h = alphas[i] * exp(-0.5 * m2)
            acc = acc + h
            if h > hbest:
                hbest = h
                best = i
        z[p] = acc
        if best >= 0:
            for j in range(d):
                emb[p, j] = embeddings[best, j]
    return emb_arr, z_arr


cdef inline double _m2_2d(double du, double dv, const double* con) noexcept nogil:
    return con[0] * du * du + 2.0 * con[1] * du * dv + con[2] * dv * dv


def splat_forward(double[:, ::1] means2d, double[:, ::1] conics,
                  double[::1] alphas, double[::1] depths,
                  double[:, ::1] feats, int width, int height,
                  double alpha_clamp, double stop_t, double trunc_sq,
                  int nthreads=1):
    cdef Py_ssize_t k = means2d.shape[0]
    cdef Py_ssize_t d = feats.shape[1]
    feature_arr = np.zeros((height, width, d))
    alpha_arr = np.zeros((height, width))
    depth_arr = np.zeros((height, width))
    cdef double[:, :, ::1] feature = feature_arr
    cdef double[:, ::1] alpha_map = alpha_arr
    cdef double[:, ::1] depth_map = depth_arr
    if k == 0:
        return feature_arr, alpha_arr, depth_arr
    cdef Py_ssize_t px, u, v, i, j
    cdef double m2, a, t, w, s, du, dv, denom
    cdef int nt = max(nthreads, 1)
    for px in prange(height * width, nogil=True, num_threads=nt,
                     schedule="static"):
        v = px // width
        u = px - v * width
        t = 1.0
        s = 0.0
        for i in range(k):
            if stop_t > 0.0 and t < stop_t:
                break
            du = u - means2d[i, 0]
            dv = v - means2d[i, 1]
            m2 = _m2_2d(du, dv, &conics[i, 0])
            if m2 > trunc_sq:
                continue
            a = alphas[i] * exp(-0.5 * m2)
            if a > alpha_clamp:
                a = alpha_clamp
            w = t * a
            for j in range(d):
                feature[v, u, j] += w * feats[i, j]
            s = s + w * depths[i]
            t = t * (1.0 - a)
        alpha_map[v, u] = 1.0 - t
        denom = alpha_map[v, u] if alpha_map[v, u] > 1e-8 else 1e-8
        depth_map[v, u] = s / denom
    return feature_arr, alpha_arr, depth_arr


def splat_backward(double[:, ::1] means2d, double[:, ::1] conics,
                   double[::1] alphas, double[::1] depths,
                   double[:, ::1] feats, int width, int height,
                   double alpha_clamp, double stop_t, double trunc_sq,
                   double[:, :, ::1] g_feature, double[:, ::1] g_alpha,
                   double[:, ::1] g_depth, int nthreads=1):
    cdef Py_ssize_t k = means2d.shape[0]
    cdef Py_ssize_t d = feats.shape[1]
    d_means2d_arr = np.zeros((k, 2))
    d_conics_arr = np.zeros((k, 3))
    d_alphas_arr = np.zeros(k)
    d_depths_arr = np.zeros(k)
    d_feats_arr = np.zeros((k, d))
    cdef double[:, ::1] d_means2d = d_means2d_arr
    cdef double[:, ::1] d_conics = d_conics_arr
    cdef double[::1] d_alphas = d_alphas_arr
    cdef double[::1] d_depths = d_depths_arr
    cdef double[:, ::1] d_feats = d_feats_arr
    if k == 0:
        return d_means2d_arr, d_conics_arr, d_alphas_arr, d_depths_arr, d_feats_arr
    # per-pixel replay buffers over included contributions
    idx_arr = np.empty(k, dtype=np.int64)
    a_buf_arr = np.empty(k)
    t_buf_arr = np.empty(k)
    g_buf_arr = np.empty(k)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double[::1] a_buf = a_buf_arr
    cdef double[::1] t_buf = t_buf_arr
    cdef double[::1] g_buf = g_buf_arr
    cdef Py_ssize_t px, u, v, i, j, m, q
    cdef double m2, a, t, w, s, du, dv, alpha_px, c, gs, g_alpha_px
    cdef double acc, upw, da, da_raw, dm2, g, t_end, om
    for v in range(height):
        for u in range(width):
            # forward replay collecting included contributions
            t = 1.0
            s = 0.0
            m = 0
            for i in range(k):
                if stop_t > 0.0 and t < stop_t:
                    break
                du = u - means2d[i, 0]
                dv = v - means2d[i, 1]
                m2 = _m2_2d(du, dv, &conics[i, 0])
                if m2 > trunc_sq:
                    continue
                g = exp(-0.5 * m2)
                a = alphas[i] * g
                if a > alpha_clamp:
                    a = alpha_clamp
                idx[m] = i
                a_buf[m] = a
                g_buf[m] = g
                t_buf[m] = t
                m += 1
                s += t * a * depths[i]
                t *= 1.0 - a
            alpha_px = 1.0 - t
            t_end = t
            c = alpha_px if alpha_px > 1e-8 else 1e-8
            gs = g_depth[v, u] / c
            g_alpha_px = g_alpha[v, u]
            if alpha_px > 1e-8:
                g_alpha_px -= g_depth[v, u] * s / (c * c)
            # back-to-front accumulation
            acc = 0.0
            for q in range(m - 1, -1, -1):
                i = idx[q]
                a = a_buf[q]
                om = 1.0 - a
                if om < 1e-12:
                    om = 1e-12
                upw = gs * depths[i]
                for j in range(d):
                    upw += g_feature[v, u, j] * feats[i, j]
                w = t_buf[q] * a
                da = t_buf[q] * upw - acc / om + g_alpha_px * t_end / om
                # chain only when the clamp was inactive
                if alphas[i] * g_buf[q] < alpha_clamp:
                    da_raw = da
                else:
                    da_raw = 0.0
                d_alphas[i] += da_raw * g_buf[q]
                dm2 = da_raw * alphas[i] * (-0.5 * g_buf[q])
                du = u - means2d[i, 0]
                dv = v - means2d[i, 1]
                d_means2d[i, 0] += dm2 * (-2.0 * (conics[i, 0] * du
                                                  + conics[i, 1] * dv))
                d_means2d[i, 1] += dm2 * (-2.0 * (conics[i, 1] * du
                                                  + conics[i, 2] * dv))
                d_conics[i, 0] += dm2 * du * du
                d_conics[i, 1] += dm2 * 2.0 * du * dv
                d_conics[i, 2] += dm2 * dv * dv
                d_depths[i] += gs * w
                for j in range(d):
                    d_feats[i, j] += w * g_feature[v, u, j]
                acc += w * upw
    return d_means2d_arr, d_conics_arr, d_alphas_arr, d_depths_arr, d_feats_arr
