"""Gaussian-primitive occupancy grids with language-embedded features.

A Gaussian set carries geometry (mean, rotation, scale, opacity logit) and
a feature embedding per primitive. The package converts such sets into
voxel occupancy under three aggregation operators (kernel-only union,
bernoulli union, poisson first-arrival), splats embeddings into camera
views with temperature-sharpened opacities, fits sets to synthetic scenes,
and answers open-vocabulary queries against per-voxel embeddings.
"""

from .core import (
    DEFAULT_TRUNCATION,
    GaussianGrads,
    GaussianSet,
    build_covariance,
    build_inv_covariance,
    effective_opacity,
    eval_kernel,
    tempered_opacity,
)
from .errors import (
    DegenerateTargetError,
    DivergenceError,
    FormatError,
    GsoccError,
    InvalidParameterError,
    NumericalDegeneracyError,
    ResourceLimitError,
    ShapeMismatchError,
)
from .trainer import (
    FitConfig,
    FitReport,
    TemperatureSchedule,
    fit,
    init_gaussians,
    temperature_at,
)
from .kernels import BACKEND
from .losses import (
    LossWeights,
    cosine_feature_loss,
    focal_loss,
    huber_depth_loss,
    lovasz_loss,
    scal_loss,
    total_loss,
)
from .occupancy import (
    AggregationMode,
    GridSpec,
    OccupancyGrid,
    aggregate_bernoulli,
    aggregate_gf2,
    aggregate_poisson,
    g2o_backward,
    mean_measure,
    voxelize,
)
from .render import (
    Camera,
    FeatureImage,
    RenderSettings,
    frustum_mask,
    project_gaussians,
    render_backward,
    render_features,
)
from .scenes import PRESETS, SceneBundle, SceneSpec, gen_scene, ideal_gaussians
from .semantic import (
    EMPTY,
    EmbeddingTable,
    SemanticGrid,
    VoxelEmbeddings,
    assign_labels,
    binary_iou,
    compute_metrics,
    query_scores,
    voxel_embeddings,
)

__version__ = "0.1.0"
