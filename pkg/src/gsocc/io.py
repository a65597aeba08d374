"""On-disk formats. All binary payloads are little-endian float32/ints.

Gaussians  magic "LGOC", version u32=1, count u64, d u32, then per record
           float32 x (3 mean + 4 quat + 3 log-scale + 1 logit + d embedding).
Grid       magic "VOXG", version u32=1, dims u32 x3, voxel_size f32,
           origin f32 x3, payload tag u8 (0 = u8 binary, 1 = u16 labels with
           0xFFFF = EMPTY, 2 = f32 scalars), payload row-major with flat
           index (x*Y + y)*Z + z.
Table      magic "EMBT", version u32=1, d u32, count u32, then per entry
           name length u16 + UTF-8 bytes + f32 x d.
Feature    magic "FIMG", version u32=1, width u32, height u32, d u32, then
image      f32 feature (H*W*d), f32 alpha (H*W), f32 depth (H*W).
Camera     YAML key/value document.
Manifest   YAML document referencing the binary files by relative path.

Loaders reject wrong magic or version and never read past declared lengths;
every format round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import yaml

from .core import GaussianSet
from .errors import FormatError
from .occupancy import GridSpec, OccupancyGrid
from .render import Camera, FeatureImage
from .scenes import SceneBundle
from .semantic import EMPTY, EmbeddingTable, SemanticGrid

GAUSS_MAGIC = b"LGOC"
GRID_MAGIC = b"VOXG"
TABLE_MAGIC = b"EMBT"
FIMG_MAGIC = b"FIMG"
VERSION = 1

GRID_TAG_BINARY = 0
GRID_TAG_LABELS = 1
GRID_TAG_SCALAR = 2
_EMPTY_U16 = 0xFFFF


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated, needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt)


def _check_header(r: _Reader, magic: bytes):
    got = r.take(4)
    if got != magic:
        raise FormatError(
            f"{r.path}: bad magic, expected {magic.decode()!r}, "
            f"got {got!r}")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise FormatError(
            f"{r.path}: unsupported version {version}, expected {VERSION}")


def save_gaussians(path, gaussians: GaussianSet) -> None:
    path = Path(path)
    n, d = len(gaussians), gaussians.d
    rec = np.concatenate(
        [gaussians.means, gaussians.quats, gaussians.log_scales,
         gaussians.opacity_logits[:, None], gaussians.embeddings],
        axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(GAUSS_MAGIC)
        f.write(struct.pack("<IQI", VERSION, n, d))
        f.write(rec.tobytes())


def load_gaussians(path) -> GaussianSet:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    _check_header(r, GAUSS_MAGIC)
    n, d = r.unpack("QI")
    if d < 1 or n * (11 + d) * 4 > len(r.data):
        raise FormatError(
            f"{path}: declared {n} records of dim {d} exceed file length")
    rec = r.array("<f4", n * (11 + d)).astype(np.float64).reshape(n, 11 + d)
    return GaussianSet(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10],
                       rec[:, 11:])


def _write_grid(path, spec: GridSpec, tag: int, payload: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<III", *spec.dims))
        f.write(struct.pack("<f", spec.voxel_size))
        f.write(struct.pack("<fff", *spec.origin))
        f.write(struct.pack("<B", tag))
        f.write(payload.tobytes())


def save_occupancy(path, grid: OccupancyGrid, binary: bool = True) -> None:
    if binary:
        payload = (grid.values.reshape(-1) >= 0.5).astype("<u1")
        _write_grid(path, grid.spec, GRID_TAG_BINARY, payload)
    else:
        _write_grid(path, grid.spec, GRID_TAG_SCALAR,
                    grid.values.reshape(-1).astype("<f4"))


def save_semantics(path, grid: SemanticGrid) -> None:
    labels = grid.labels.reshape(-1).astype(np.int64)
    payload = np.where(labels == EMPTY, _EMPTY_U16, labels).astype("<u2")
    _write_grid(path, grid.spec, GRID_TAG_LABELS, payload)


def save_scalar_grid(path, spec: GridSpec, values: np.ndarray) -> None:
    _write_grid(path, spec, GRID_TAG_SCALAR,
                np.asarray(values).reshape(-1).astype("<f4"))


def load_grid(path):
    """Read any grid file; returns (spec, tag, values)."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    _check_header(r, GRID_MAGIC)
    dims = r.unpack("III")
    (voxel_size,) = r.unpack("f")
    origin = r.unpack("fff")
    (tag,) = r.unpack("B")
    spec = GridSpec(dims, origin, voxel_size)
    n = spec.n_voxels
    if tag == GRID_TAG_BINARY:
        values = r.array("<u1", n).astype(np.float64)
    elif tag == GRID_TAG_LABELS:
        raw = r.array("<u2", n).astype(np.int64)
        values = np.where(raw == _EMPTY_U16, EMPTY, raw).astype(np.int32)
    elif tag == GRID_TAG_SCALAR:
        values = r.array("<f4", n).astype(np.float64)
    else:
        raise FormatError(f"{path}: unknown payload tag {tag}")
    return spec, tag, values.reshape(spec.dims)


def load_occupancy(path) -> OccupancyGrid:
    spec, tag, values = load_grid(path)
    if tag not in (GRID_TAG_BINARY, GRID_TAG_SCALAR):
        raise FormatError(f"{path}: expected an occupancy payload, got tag {tag}")
    return OccupancyGrid(spec, values)


def load_semantics(path) -> SemanticGrid:
    spec, tag, values = load_grid(path)
    if tag != GRID_TAG_LABELS:
        raise FormatError(f"{path}: expected a label payload, got tag {tag}")
    return SemanticGrid(spec, values)


def save_table(path, table: EmbeddingTable) -> None:
    with open(path, "wb") as f:
        f.write(TABLE_MAGIC)
        f.write(struct.pack("<III", VERSION, table.d, len(table)))
        vecs = table.vectors.astype("<f4")
        for name, vec in zip(table.names, vecs):
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(vec.tobytes())


def load_table(path) -> EmbeddingTable:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    _check_header(r, TABLE_MAGIC)
    d, count = r.unpack("II")
    names, vectors = [], []
    for _ in range(count):
        (ln,) = r.unpack("H")
        names.append(r.take(ln).decode("utf-8"))
        vectors.append(r.array("<f4", d).astype(np.float64))
    vecs = np.stack(vectors) if vectors else np.zeros((0, d))
    return EmbeddingTable(names, vecs)


def save_feature_image(path, img: FeatureImage) -> None:
    with open(path, "wb") as f:
        f.write(FIMG_MAGIC)
        f.write(struct.pack("<IIII", VERSION, img.width, img.height, img.d))
        f.write(img.feature.astype("<f4").tobytes())
        f.write(img.alpha.astype("<f4").tobytes())
        f.write(img.depth.astype("<f4").tobytes())


def load_feature_image(path) -> FeatureImage:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    _check_header(r, FIMG_MAGIC)
    w, h, d = r.unpack("III")
    if w * h * (d + 2) * 4 > len(r.data):
        raise FormatError(f"{path}: declared {w}x{h}x{d} exceeds file length")
    feature = r.array("<f4", h * w * d).astype(np.float64).reshape(h, w, d)
    alpha = r.array("<f4", h * w).astype(np.float64).reshape(h, w)
    depth = r.array("<f4", h * w).astype(np.float64).reshape(h, w)
    return FeatureImage(feature, alpha, depth)


def save_camera(path, cam: Camera) -> None:
    doc = {
        "format": "gsocc-camera",
        "version": VERSION,
        "fx": float(cam.fx), "fy": float(cam.fy),
        "cx": float(cam.cx), "cy": float(cam.cy),
        "width": int(cam.width), "height": int(cam.height),
        "world_to_camera": [[float(v) for v in row]
                            for row in cam.world_to_camera],
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def load_camera(path) -> Camera:
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict) or doc.get("format") != "gsocc-camera":
        raise FormatError(f"{path}: not a camera document")
    if doc.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported camera version {doc.get('version')}")
    return Camera(fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
                  width=doc["width"], height=doc["height"],
                  world_to_camera=np.asarray(doc["world_to_camera"]))


def save_scene(directory, bundle: SceneBundle) -> None:
    """Write a full scene bundle plus its manifest into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_occupancy(directory / "occupancy.voxg", bundle.occupancy)
    save_semantics(directory / "semantics.voxg", bundle.semantics)
    save_table(directory / "table.embt", bundle.table)
    views = []
    for i, (cam, teacher) in enumerate(zip(bundle.cameras, bundle.teachers)):
        cam_file = f"camera_{i:02d}.yaml"
        teach_file = f"teacher_{i:02d}.fimg"
        save_camera(directory / cam_file, cam)
        save_feature_image(directory / teach_file, teacher)
        views.append({"camera": cam_file, "teacher": teach_file})
    manifest = {
        "format": "gsocc-scene",
        "version": VERSION,
        "grid": {"dims": list(bundle.spec.dims),
                 "origin": list(bundle.spec.origin),
                 "voxel_size": bundle.spec.voxel_size},
        "files": {"occupancy": "occupancy.voxg",
                  "semantics": "semantics.voxg",
                  "table": "table.embt"},
        "views": views,
        "overlap_rule": "last-primitive-wins",
    }
    (directory / "scene.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))


def load_scene(directory) -> SceneBundle:
    directory = Path(directory)
    manifest_path = directory / "scene.yaml"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: no scene.yaml manifest")
    doc = yaml.safe_load(manifest_path.read_text())
    if not isinstance(doc, dict) or doc.get("format") != "gsocc-scene":
        raise FormatError(f"{manifest_path}: not a scene manifest")
    if doc.get("version") != VERSION:
        raise FormatError(f"{manifest_path}: unsupported version {doc.get('version')}")
    files = doc["files"]
    occupancy = load_occupancy(directory / files["occupancy"])
    semantics = load_semantics(directory / files["semantics"])
    table = load_table(directory / files["table"])
    cameras, teachers = [], []
    for view in doc.get("views", []):
        cameras.append(load_camera(directory / view["camera"]))
        teachers.append(load_feature_image(directory / view["teacher"]))
    if occupancy.spec != semantics.spec:
        raise FormatError(f"{directory}: occupancy and semantics grids differ")
    return SceneBundle(occupancy, semantics, table, cameras, teachers)
