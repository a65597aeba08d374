"""Per-voxel embeddings, open-vocabulary queries, labeling, and metrics.

Voxel embeddings are intensity-weighted averages of the contributing
Gaussian embeddings (the same intensities the poisson occupancy operator
sums), so a voxel's embedding always lies in the convex hull of its
contributors. Queries score voxels by cosine similarity against a prompt
vector; labeling takes the argmax over a table of named unit vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DEFAULT_TRUNCATION, GaussianSet, clamp_tau, tempered_opacity, \
    build_inv_covariance
from .errors import InvalidParameterError, ShapeMismatchError
from .occupancy import GridSpec, OccupancyGrid

EMPTY = -1  # in-memory sentinel for unlabeled voxels


@dataclass
class EmbeddingTable:
    """Named categories mapped to unit-norm embedding vectors."""

    names: list
    vectors: np.ndarray

    def __post_init__(self):
        self.names = list(self.names)
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if len(self.names) != self.vectors.shape[0]:
            raise InvalidParameterError("one vector per name required")
        if len(set(self.names)) != len(self.names):
            raise InvalidParameterError("category names must be unique")
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.vectors.shape[0] and np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidParameterError("table vectors must be unit norm")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown category {name!r}; "
                           f"known: {', '.join(self.names)}") from None

    def vector_of(self, name: str) -> np.ndarray:
        return self.vectors[self.index_of(name)]


@dataclass
class SemanticGrid:
    """Per-voxel category indices; EMPTY (-1) marks unoccupied voxels."""

    spec: GridSpec
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(self.spec.dims)

    @property
    def occupied(self) -> np.ndarray:
        return self.labels != EMPTY


@dataclass
class VoxelEmbeddings:
    """Aggregated per-voxel embeddings plus the intensity mass z per voxel."""

    spec: GridSpec
    vectors: np.ndarray  # (X, Y, Z, d)
    weights: np.ndarray  # (X, Y, Z)


def voxel_embeddings(gaussians: GaussianSet, spec: GridSpec, tau: float, *,
                     truncation: float | None = DEFAULT_TRUNCATION,
                     method: str = "intensity",
                     threads: int = 1) -> VoxelEmbeddings:
    """Aggregate Gaussian embeddings onto voxel centers.

    ``intensity`` (default) weights each contributor by a_i k_i(x);
    ``nearest`` copies the single strongest contributor instead.
    """
    tau = clamp_tau(tau)
    if method not in ("intensity", "nearest"):
        raise InvalidParameterError(f"unknown aggregation method {method!r}")
    trunc_sq = np.inf if truncation is None or not np.isfinite(truncation) \
        else float(truncation) ** 2
    pts = spec.centers()
    alphas = tempered_opacity(gaussians.opacity_logits, tau)
    inv_covs = build_inv_covariance(gaussians.quats, gaussians.log_scales)
    fn = kernels.embed_forward if method == "intensity" \
        else kernels.nearest_embed_forward
    emb, z = fn(gaussians.means, inv_covs, alphas, gaussians.embeddings, pts,
                trunc_sq, threads)
    return VoxelEmbeddings(spec, emb.reshape(spec.dims + (gaussians.d,)),
                           z.reshape(spec.dims))


def query_scores(ve: VoxelEmbeddings, prompt: np.ndarray,
                 weight_floor: float = 1e-8) -> np.ndarray:
    """Cosine similarity of every voxel embedding against a prompt vector.

    Voxels with no intensity mass score -inf (excluded from heatmaps).
    Invariant to positive rescaling of the prompt.
    """
    prompt = np.asarray(prompt, dtype=np.float64)
    pn = np.linalg.norm(prompt)
    if not np.isfinite(pn) or pn == 0.0:
        raise InvalidParameterError("prompt vector must be nonzero")
    if prompt.shape != (ve.vectors.shape[-1],):
        raise ShapeMismatchError("prompt dimension mismatch")
    norms = np.linalg.norm(ve.vectors, axis=-1)
    cos = (ve.vectors @ (prompt / pn)) / np.maximum(norms, 1e-12)
    return np.where(ve.weights > weight_floor, cos, -np.inf)


def assign_labels(ve: VoxelEmbeddings, occupancy: OccupancyGrid,
                  table: EmbeddingTable, threshold: float = 0.5) -> SemanticGrid:
    """Argmax-cosine category for voxels at or above the occupancy threshold.

    Ties resolve to the lowest table index; everything else is EMPTY.
    """
    if len(table) == 0:
        raise InvalidParameterError("embedding table is empty")
    if occupancy.spec != ve.spec:
        raise ShapeMismatchError("occupancy and embeddings use different grids")
    flat = ve.vectors.reshape(-1, ve.vectors.shape[-1])
    norms = np.maximum(np.linalg.norm(flat, axis=1), 1e-12)
    cos = (flat @ table.vectors.T) / norms[:, None]
    labels = np.argmax(cos, axis=1).astype(np.int32)  # first max wins ties
    occ = occupancy.values.reshape(-1) >= threshold
    labels[~occ] = EMPTY
    return SemanticGrid(ve.spec, labels.reshape(ve.spec.dims))


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two boolean masks (1.0 if both empty)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass
class Metrics:
    occupancy_iou: float
    per_class_iou: list  # NaN where a class is absent from both pred and gt
    miou: float


def compute_metrics(pred: SemanticGrid, pred_occ: OccupancyGrid,
                    gt: SemanticGrid, *, num_classes: int | None = None,
                    threshold: float = 0.5,
                    mask: np.ndarray | None = None) -> Metrics:
    """Occupancy IoU plus per-class and mean IoU over label agreement.

    Classes absent from both prediction and ground truth are excluded from
    the mean (NaN in the per-class list). An optional boolean mask (e.g. a
    camera frustum) restricts all counting.
    """
    if pred.spec != gt.spec or pred_occ.spec != gt.spec:
        raise ShapeMismatchError("metric inputs use different grids")
    sel = np.ones(gt.spec.dims, dtype=bool) if mask is None \
        else np.asarray(mask, dtype=bool)
    if sel.shape != gt.spec.dims:
        raise ShapeMismatchError("mask shape does not match the grid")
    p_occ = pred_occ.binarize(threshold) & sel
    g_occ = gt.occupied & sel
    occupancy_iou = binary_iou(p_occ, g_occ)
    pl = pred.labels[sel]
    gl = gt.labels[sel]
    if num_classes is None:
        present = np.concatenate([pl, gl])
        num_classes = int(present.max()) + 1 if np.any(present != EMPTY) else 0
    per_class = []
    for c in range(num_classes):
        tp = int(np.sum((pl == c) & (gl == c)))
        fp = int(np.sum((pl == c) & (gl != c)))
        fn = int(np.sum((gl == c) & (pl != c)))
        denom = tp + fp + fn
        per_class.append(tp / denom if denom else float("nan"))
    finite = [v for v in per_class if not np.isnan(v)]
    miou = float(np.mean(finite)) if finite else float("nan")
    return Metrics(occupancy_iou, per_class, miou)
