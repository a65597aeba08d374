"""Synthetic scene generation: grids, labels, cameras, and teacher images.

A scene is a set of solid primitives placed on a voxel grid. Teacher
feature images are painted by casting a ray through every pixel and copying
the category embedding of the first occupied voxel the ray enters (3D-DDA
traversal over voxel boundaries); the teacher depth is the camera-frame z
of that voxel's center. Pixels that miss carry a zero feature and an
invalid (zero) alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianSet
from .errors import InvalidParameterError
from .occupancy import GridSpec, OccupancyGrid
from .render import Camera, FeatureImage
from .semantic import EMPTY, EmbeddingTable, SemanticGrid


@dataclass
class Box:
    center: tuple
    size: tuple
    category: str

    def contains(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        half = 0.5 * np.asarray(self.size, dtype=np.float64)
        return np.all(np.abs(pts - c) <= half, axis=-1)

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        half = 0.5 * np.asarray(self.size, dtype=np.float64)
        return c - half, c + half


@dataclass
class Sphere:
    center: tuple
    radius: float
    category: str

    def contains(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        return np.linalg.norm(pts - c, axis=-1) <= self.radius

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass
class Plane:
    """Axis-aligned slab spanning the whole grid cross-section."""

    axis: int
    offset: float
    thickness: float
    category: str

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.abs(pts[..., self.axis] - self.offset) <= 0.5 * self.thickness

    def bounds(self):
        lo = np.full(3, -np.inf)
        hi = np.full(3, np.inf)
        lo[self.axis] = self.offset - 0.5 * self.thickness
        hi[self.axis] = self.offset + 0.5 * self.thickness
        return lo, hi


@dataclass
class CameraRing:
    """Placement rule: cameras on a ring looking at the grid center."""

    count: int = 5
    radius: float | None = None  # default: 1.7 x the largest half-extent
    height: float | None = None
    image_size: int = 48
    focal: float | None = None   # default: image_size (about 53 deg fov)


@dataclass
class SceneSpec:
    dims: tuple
    origin: tuple
    voxel_size: float
    primitives: list
    cameras: CameraRing = field(default_factory=CameraRing)
    embedding_dim: int = 8
    seed: int = 0

    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.origin, self.voxel_size)

    def validate(self):
        if self.embedding_dim < 2:
            raise InvalidParameterError("embedding dimension must be >= 2")
        grid = self.grid()
        lo = np.asarray(grid.origin)
        hi = lo + grid.extent
        for prim in self.primitives:
            plo, phi = prim.bounds()
            inside_lo = np.where(np.isfinite(plo), plo >= lo - 1e-9, True)
            inside_hi = np.where(np.isfinite(phi), phi <= hi + 1e-9, True)
            if not (np.all(inside_lo) and np.all(inside_hi)):
                raise InvalidParameterError(
                    f"primitive {prim} does not fit inside the grid extent")


@dataclass
class SceneBundle:
    occupancy: OccupancyGrid
    semantics: SemanticGrid
    table: EmbeddingTable
    cameras: list
    teachers: list  # FeatureImage per camera; alpha is the validity mask

    @property
    def spec(self) -> GridSpec:
        return self.occupancy.spec


def random_orthonormal_table(names, d: int, seed: int) -> EmbeddingTable:
    """Mutually orthogonal unit vectors for each name (requires d >= count)."""
    names = list(names)
    if len(names) > d:
        raise InvalidParameterError(
            f"{len(names)} categories do not fit into {d} dimensions")
    rng = np.random.default_rng(seed)
    mat = rng.normal(size=(d, d))
    q, r = np.linalg.qr(mat)
    q = q * np.sign(np.diag(r))  # deterministic sign convention
    return EmbeddingTable(names, q[: len(names)])


def ring_cameras(grid: GridSpec, rule: CameraRing) -> list:
    center = np.asarray(grid.origin) + 0.5 * grid.extent
    half = 0.5 * float(np.max(grid.extent))
    radius = rule.radius if rule.radius is not None else 1.7 * half + 1.0
    height = rule.height if rule.height is not None else 0.9 * half
    focal = rule.focal if rule.focal is not None else float(rule.image_size)
    cams = []
    for k in range(rule.count):
        theta = 2.0 * math.pi * k / rule.count
        eye = center + np.array([radius * math.cos(theta),
                                 radius * math.sin(theta), height])
        cams.append(Camera.look_at(eye, center, fx=focal, fy=focal,
                                   width=rule.image_size,
                                   height=rule.image_size))
    return cams


def first_hit_voxel(spec: GridSpec, occupied: np.ndarray, origin: np.ndarray,
                    direction: np.ndarray):
    """First occupied voxel a ray enters, or None.

    Incremental 3D-DDA: clip the ray to the grid box, then step across
    voxel boundaries in order of boundary-crossing parameter t.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    lo = np.asarray(spec.origin, dtype=np.float64)
    hi = lo + spec.extent
    # Ray/box overlap in t.
    t0, t1 = 0.0, np.inf
    for a in range(3):
        if direction[a] == 0.0:
            if origin[a] < lo[a] or origin[a] > hi[a]:
                return None
        else:
            ta = (lo[a] - origin[a]) / direction[a]
            tb = (hi[a] - origin[a]) / direction[a]
            t0 = max(t0, min(ta, tb))
            t1 = min(t1, max(ta, tb))
    if t0 > t1:
        return None
    eps = 1e-9 * max(1.0, float(np.max(spec.extent)))
    p = origin + (t0 + eps) * direction
    vs = spec.voxel_size
    idx = np.floor((p - lo) / vs).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(spec.dims) - 1)
    step = np.sign(direction).astype(np.int64)
    t_max = np.empty(3)
    t_delta = np.empty(3)
    for a in range(3):
        if direction[a] == 0.0:
            t_max[a] = np.inf
            t_delta[a] = np.inf
        else:
            nxt = lo[a] + (idx[a] + (1 if step[a] > 0 else 0)) * vs
            t_max[a] = (nxt - origin[a]) / direction[a]
            t_delta[a] = vs / abs(direction[a])
    dims = spec.dims
    while True:
        if occupied[idx[0], idx[1], idx[2]]:
            return (int(idx[0]), int(idx[1]), int(idx[2]))
        a = int(np.argmin(t_max))
        if t_max[a] > t1:
            return None
        idx[a] += step[a]
        if idx[a] < 0 or idx[a] >= dims[a]:
            return None
        t_max[a] += t_delta[a]


def render_teacher(grid: GridSpec, occupied: np.ndarray, labels: np.ndarray,
                   table: EmbeddingTable, cam: Camera) -> FeatureImage:
    """Paint category embeddings through per-pixel first-hit ray casting."""
    h, w = cam.height, cam.width
    feature = np.zeros((h, w, table.d))
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    dirs = cam.ray_directions()
    eye = cam.position()
    R = cam.rotation
    tr = cam.translation
    for v in range(h):
        for u in range(w):
            hit = first_hit_voxel(grid, occupied, eye, dirs[v, u])
            if hit is None:
                continue
            label = int(labels[hit])
            feature[v, u] = table.vectors[label]
            alpha[v, u] = 1.0
            center = grid.center_of(hit)
            depth[v, u] = (R @ center + tr)[2]
    return FeatureImage(feature, alpha, depth)


def gen_scene(spec: SceneSpec) -> SceneBundle:
    """Fully deterministic scene bundle from a spec and its seed.

    Later primitives overwrite earlier ones where they overlap.
    """
    spec.validate()
    grid = spec.grid()
    centers = grid.centers()
    labels = np.full(grid.n_voxels, EMPTY, dtype=np.int32)
    names = []
    for prim in spec.primitives:
        if prim.category not in names:
            names.append(prim.category)
        labels[prim.contains(centers)] = names.index(prim.category)
    table = random_orthonormal_table(names, spec.embedding_dim, spec.seed)
    labels3 = labels.reshape(grid.dims)
    occupied = labels3 != EMPTY
    occupancy = OccupancyGrid(grid, occupied.astype(np.float64))
    semantics = SemanticGrid(grid, labels3)
    cameras = ring_cameras(grid, spec.cameras)
    teachers = [render_teacher(grid, occupied, labels3, table, cam)
                for cam in cameras]
    return SceneBundle(occupancy, semantics, table, cameras, teachers)


def ideal_gaussians(bundle: SceneBundle, *, opacity_logit: float = 5.0,
                    scale_factor: float = 0.3) -> GaussianSet:
    """One Gaussian per occupied voxel, carrying its ground-truth embedding.

    This is the idealized pipeline input: labeling these against the
    bundle's table reproduces the semantic grid exactly.
    """
    grid = bundle.spec
    occ = bundle.semantics.occupied
    idx = np.argwhere(occ)
    if idx.shape[0] == 0:
        raise InvalidParameterError("scene has no occupied voxels")
    means = grid.center_of(idx)
    n = idx.shape[0]
    labels = bundle.semantics.labels[occ]
    return GaussianSet(
        means=means,
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), np.log(scale_factor * grid.voxel_size)),
        opacity_logits=np.full(n, opacity_logit),
        embeddings=bundle.table.vectors[labels],
    )


# ---------------------------------------------------------------------------
# Presets.
# ---------------------------------------------------------------------------

def box_spec(seed: int = 0, image_size: int = 48, num_cameras: int = 5) -> SceneSpec:
    """Unit box centered in an 8x8x8 grid: 64 occupied voxels."""
    return SceneSpec(
        dims=(8, 8, 8), origin=(-1.0, -1.0, -1.0), voxel_size=0.25,
        primitives=[Box(center=(0.0, 0.0, 0.0), size=(1.0, 1.0, 1.0),
                        category="box")],
        cameras=CameraRing(count=num_cameras, image_size=image_size),
        embedding_dim=8, seed=seed)


def threecat_spec(seed: int = 0, image_size: int = 48,
                  num_cameras: int = 5) -> SceneSpec:
    """Three separated boxes with distinct categories on a 16x8x6 grid."""
    z = -0.125  # a voxel-center plane
    prims = [
        Box(center=(-1.125, 0.125, z), size=(0.76, 0.76, 0.76), category="red"),
        Box(center=(0.125, 0.125, z), size=(0.76, 0.76, 0.76), category="green"),
        Box(center=(1.375, 0.125, z), size=(0.76, 0.76, 0.76), category="blue"),
    ]
    return SceneSpec(
        dims=(16, 8, 6), origin=(-2.0, -1.0, -0.75), voxel_size=0.25,
        primitives=prims,
        cameras=CameraRing(count=num_cameras, image_size=image_size),
        embedding_dim=8, seed=seed)


def room_spec(seed: int = 0, image_size: int = 64,
              num_cameras: int = 5) -> SceneSpec:
    """Floor slab plus a box, a sphere, and a thin wall segment."""
    prims = [
        Plane(axis=2, offset=-0.875, thickness=0.25, category="floor"),
        Box(center=(-0.625, -0.625, -0.375), size=(0.76, 0.76, 0.76),
            category="crate"),
        Sphere(center=(0.625, 0.625, -0.25), radius=0.45, category="ball"),
        Box(center=(0.875, -0.625, -0.25), size=(0.26, 1.0, 1.0),
            category="wall"),
    ]
    return SceneSpec(
        dims=(16, 16, 8), origin=(-2.0, -2.0, -1.0), voxel_size=0.25,
        primitives=prims,
        cameras=CameraRing(count=num_cameras, image_size=image_size),
        embedding_dim=8, seed=seed)


PRESETS = {"box": box_spec, "threecat": threecat_spec, "room": room_spec}

_AXES = {"x": 0, "y": 1, "z": 2}


def spec_from_dict(doc: dict) -> SceneSpec:
    """Build a SceneSpec from a parsed YAML/JSON document."""
    prims = []
    for p in doc.get("primitives", []):
        kind = p.get("kind")
        if kind == "box":
            prims.append(Box(tuple(p["center"]), tuple(p["size"]),
                             p["category"]))
        elif kind == "sphere":
            prims.append(Sphere(tuple(p["center"]), float(p["radius"]),
                                p["category"]))
        elif kind == "plane":
            axis = p["axis"]
            axis = _AXES[axis] if isinstance(axis, str) else int(axis)
            prims.append(Plane(axis, float(p["offset"]),
                               float(p["thickness"]), p["category"]))
        else:
            raise InvalidParameterError(f"unknown primitive kind {kind!r}")
    cam = doc.get("cameras", {})
    ring = CameraRing(
        count=int(cam.get("count", 5)),
        radius=cam.get("radius"),
        height=cam.get("height"),
        image_size=int(cam.get("image_size", 48)),
        focal=cam.get("focal"),
    )
    return SceneSpec(
        dims=tuple(doc["dims"]),
        origin=tuple(doc["origin"]),
        voxel_size=float(doc["voxel_size"]),
        primitives=prims,
        cameras=ring,
        embedding_dim=int(doc.get("embedding_dim", 8)),
        seed=int(doc.get("seed", 0)),
    )
