"""Training objectives: each returns (value, gradient w.r.t. prediction).

Grid losses (focal, lovasz, scal) take a probability grid and a binary
target of the same shape. Image losses (huber depth, cosine feature) take
per-pixel predictions plus a validity mask. The total is a plain weighted
sum; gradients distribute linearly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTargetError, ShapeMismatchError

PRED_EPS = 1e-7
NORM_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_focal: float = 1.0
    lambda_lov: float = 1.0
    lambda_scal: float = 1.0
    lambda_feat: float = 1.0
    lambda_depth: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs target {target.shape}")


def focal_loss(pred, target, gamma: float = 2.0, alpha_balance: float = 0.25):
    """Mean of -alpha_b (1 - p_t)^gamma log(p_t), p_t = p if target else 1-p."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    inside = (pred > PRED_EPS) & (pred < 1.0 - PRED_EPS)
    p = np.clip(pred, PRED_EPS, 1.0 - PRED_EPS)
    y = target > 0.5
    pt = np.where(y, p, 1.0 - p)
    one_m = 1.0 - pt
    value = float(np.mean(-alpha_balance * one_m**gamma * np.log(pt)))
    if gamma > 0:
        d_pt = -alpha_balance * (-gamma * one_m**(gamma - 1.0) * np.log(pt)
                                 + one_m**gamma / pt)
    else:
        d_pt = -alpha_balance / pt
    grad = np.where(y, d_pt, -d_pt) * inside / pred.size
    return value, grad


def _lovasz_grad_sorted(y_sorted: np.ndarray) -> np.ndarray:
    # Discrete gradient of the Jaccard set function along the sorted order.
    gts = y_sorted.sum()
    intersection = gts - np.cumsum(y_sorted)
    union = gts + np.cumsum(1.0 - y_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_loss(pred, target):
    """Lovasz extension of the foreground Jaccard loss.

    Errors are 1-p on foreground and p on background, sorted descending and
    weighted by the Jaccard gradient. All-background targets return 0 by
    convention (the Jaccard index is undefined there).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    shape = pred.shape
    p = pred.reshape(-1)
    y = (target.reshape(-1) > 0.5).astype(np.float64)
    if y.sum() == 0:
        return 0.0, np.zeros(shape)
    m = np.where(y > 0, 1.0 - p, p)
    order = np.argsort(-m, kind="stable")
    g_sorted = _lovasz_grad_sorted(y[order])
    value = float(m[order] @ g_sorted)
    grad = np.zeros_like(p)
    grad[order] = g_sorted
    grad *= np.where(y > 0, -1.0, 1.0)
    return value, grad.reshape(shape)


def scal_loss(pred, target):
    """Soft precision/recall/specificity affinity: -(log P + log R + log S)/3.

    Requires at least one foreground and one background target voxel.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    y = (target > 0.5).astype(np.float64)
    n_fg = y.sum()
    n_bg = y.size - n_fg
    if n_fg == 0 or n_bg == 0:
        raise DegenerateTargetError(
            "scal loss needs both foreground and background voxels")
    p = pred.reshape(-1)
    yf = y.reshape(-1)
    sp = max(p.sum(), NORM_EPS)
    spy = (p * yf).sum()
    snn = ((1.0 - p) * (1.0 - yf)).sum()
    precision = max(spy / sp, NORM_EPS)
    recall = max(spy / n_fg, NORM_EPS)
    specificity = max(snn / n_bg, NORM_EPS)
    value = -(np.log(precision) + np.log(recall) + np.log(specificity)) / 3.0
    d_prec = (yf * sp - spy) / sp**2
    d_rec = yf / n_fg
    d_spec = -(1.0 - yf) / n_bg
    grad = -(d_prec / precision + d_rec / recall + d_spec / specificity) / 3.0
    return float(value), grad.reshape(pred.shape)


def huber_depth_loss(pred_depth, target_depth, valid_mask, delta: float = 1.0):
    """Mean Huber penalty on depth residuals over valid pixels.

    Empty masks return (0, zero gradient).
    """
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    target_depth = np.asarray(target_depth, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=bool)
    _check_shapes(pred_depth, target_depth)
    if mask.shape != pred_depth.shape:
        raise ShapeMismatchError("valid_mask shape mismatch")
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(pred_depth)
    r = pred_depth - target_depth
    quad = np.abs(r) <= delta
    per = np.where(quad, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    value = float((per * mask).sum() / count)
    grad = np.where(quad, r, delta * np.sign(r)) * mask / count
    return value, grad


def cosine_feature_loss(rendered, teacher_feature, valid_mask):
    """Mean (1 - cosine) between rendered and teacher features.

    Supervision covers pixels where the teacher is valid and the rendered
    alpha exceeds 0.5 (empty background is never pushed toward a feature).
    Returns the gradient w.r.t. the rendered feature map.
    """
    feat = np.asarray(rendered.feature, dtype=np.float64)
    teacher = np.asarray(teacher_feature, dtype=np.float64)
    if feat.shape != teacher.shape:
        raise ShapeMismatchError(
            f"rendered {feat.shape} vs teacher {teacher.shape}")
    mask = np.asarray(valid_mask, dtype=bool) & (rendered.alpha > 0.5)
    count = int(mask.sum())
    grad = np.zeros_like(feat)
    if count == 0:
        return 0.0, grad
    a = feat[mask]
    b = teacher[mask]
    na = np.maximum(np.linalg.norm(a, axis=1), NORM_EPS)
    nb = np.maximum(np.linalg.norm(b, axis=1), NORM_EPS)
    cos = np.einsum("pd,pd->p", a, b) / (na * nb)
    value = float(np.mean(1.0 - cos))
    d_a = -(b / (na * nb)[:, None] - (cos / na**2)[:, None] * a) / count
    grad[mask] = d_a
    return value, grad


def total_loss(parts: dict, weights: LossWeights):
    """Weighted sum of named loss parts {name: (value, grad)}.

    Names map to weights: focal, lov, scal, feat, depth. Returns the scalar
    total and {name: weighted grad}.
    """
    lam = {"focal": weights.lambda_focal, "lov": weights.lambda_lov,
           "scal": weights.lambda_scal, "feat": weights.lambda_feat,
           "depth": weights.lambda_depth}
    total = 0.0
    grads = {}
    for name, (value, grad) in parts.items():
        w = lam[name]
        total += w * value
        grads[name] = w * grad
    return total, grads
