"""Scene point clouds (PLY / native ``.npz`` cache) and episode definitions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .errors import ChainViewError
from .geometry import CameraPose, Intrinsics, InvalidPose


class SceneError(ChainViewError):
    pass


class MalformedFile(SceneError):
    pass


class UnsupportedFormat(SceneError):
    pass


class IoFailure(SceneError):
    pass


class SchemaViolation(ChainViewError):
    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field


class DanglingReference(ChainViewError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScenePointCloud:
    points: np.ndarray  # (N, 3) float64, meters, world frame
    colors: np.ndarray  # (N, 3) float64 in [0, 1]

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        cols = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(pts) != len(cols):
            raise MalformedFile(f"{len(pts)} points but {len(cols)} colors")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(cols))):
            raise MalformedFile("point cloud contains NaN or Inf")
        if len(cols) and (cols.min() < 0.0 or cols.max() > 1.0):
            raise MalformedFile("colors must lie in [0, 1]")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "colors", _readonly(cols))
        if len(pts):
            box = (pts.min(axis=0), pts.max(axis=0))
        else:
            box = (np.zeros(3), np.zeros(3))
        object.__setattr__(self, "_aabb", (_readonly(box[0]), _readonly(box[1])))

    @property
    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self._aabb

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "ScenePointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def concat(cls, clouds: Sequence["ScenePointCloud"]) -> "ScenePointCloud":
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
        )


# --------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    properties: list = field(default_factory=list)  # (name, dtype str) or (name, None) for lists


def _parse_header(f) -> tuple[str, list[_PlyElement]]:
    magic = f.readline()
    if magic.strip() != b"ply":
        raise MalformedFile("missing 'ply' magic line")
    fmt = None
    elements: list[_PlyElement] = []
    while True:
        raw = f.readline()
        if not raw:
            raise MalformedFile("header ended before 'end_header'")
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError as exc:
            raise MalformedFile("non-ASCII bytes in PLY header") from exc
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tokens = line.split()
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            if len(tokens) < 2:
                raise MalformedFile(f"bad format line: {line!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise MalformedFile(f"bad element line: {line!r}")
            elements.append(_PlyElement(tokens[1], int(tokens[2])))
        elif tokens[0] == "property":
            if not elements:
                raise MalformedFile("property declared before any element")
            if tokens[1] == "list":
                elements[-1].properties.append((tokens[-1], None))
            else:
                if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                    raise MalformedFile(f"bad property line: {line!r}")
                elements[-1].properties.append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise MalformedFile(f"unexpected header line: {line!r}")
    if fmt is None:
        raise MalformedFile("PLY header has no format line")
    if fmt == "binary_big_endian":
        raise UnsupportedFormat("big-endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedFile(f"unknown PLY format {fmt!r}")
    return fmt, elements


def _colors_from(table, names) -> np.ndarray:
    cols = np.column_stack([np.asarray(table[n], dtype=np.float64) for n in names])
    if np.issubdtype(np.asarray(table[names[0]]).dtype, np.integer):
        cols = cols / 255.0
    return cols


def read_ply(path) -> ScenePointCloud:
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise IoFailure(f"cannot open {path}: {exc}") from exc
    with f:
        fmt, elements = _parse_header(f)
        body = f.read()

    vertex_pos = next((i for i, e in enumerate(elements) if e.name == "vertex"), None)
    if vertex_pos is None:
        raise MalformedFile("PLY has no vertex element")
    vertex = elements[vertex_pos]
    names = [n for n, _ in vertex.properties]
    for n in ("x", "y", "z"):
        if n not in names:
            raise MalformedFile(f"vertex element lacks property {n!r}")
    if not all(n in names for n in ("red", "green", "blue")):
        raise UnsupportedFormat("vertex element lacks red/green/blue properties")
    if any(dt is None for _, dt in vertex.properties):
        raise UnsupportedFormat("list properties on vertices are not supported")

    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        # skip rows of elements that precede the vertex block
        skip = sum(e.count for e in elements[:vertex_pos])
        rows = [ln for ln in lines if ln.strip()][skip: skip + vertex.count]
        if len(rows) != vertex.count:
            raise MalformedFile(f"expected {vertex.count} vertex rows, found {len(rows)}")
        table = {}
        try:
            data = np.array([r.split()[: len(names)] for r in rows], dtype=np.float64)
        except ValueError as exc:
            raise MalformedFile(f"non-numeric vertex data: {exc}") from exc
        if vertex.count and data.shape != (vertex.count, len(names)):
            raise MalformedFile("vertex rows have the wrong number of fields")
        data = data.reshape(vertex.count, len(names))
        for j, (n, dt) in enumerate(vertex.properties):
            table[n] = data[:, j].astype(dt)
    else:
        offset = 0
        for e in elements[:vertex_pos]:
            if any(dt is None for _, dt in e.properties):
                raise UnsupportedFormat(
                    f"element {e.name!r} with list properties precedes vertices"
                )
            offset += e.count * np.dtype([(n, "<" + dt) for n, dt in e.properties]).itemsize
        dtype = np.dtype([(n, "<" + dt) for n, dt in vertex.properties])
        need = offset + vertex.count * dtype.itemsize
        if len(body) < need:
            raise MalformedFile(
                f"binary body holds {len(body)} bytes, header implies at least {need}"
            )
        table = np.frombuffer(body, dtype=dtype, count=vertex.count, offset=offset)

    points = np.column_stack([np.asarray(table[n], dtype=np.float64) for n in ("x", "y", "z")])
    colors = _colors_from(table, ("red", "green", "blue"))
    if vertex.count == 0:
        points, colors = np.zeros((0, 3)), np.zeros((0, 3))
    return ScenePointCloud(points, colors)


def write_ply(cloud: ScenePointCloud, path, binary: bool = True) -> None:
    """Write float32 xyz + uint8 rgb. Colors are rounded to 8 bits."""
    path = Path(path)
    n = len(cloud)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rgb = np.round(cloud.colors * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                     ("red", "u1"), ("green", "u1"), ("blue", "u1")])
            for j, name in enumerate("xyz"):
                rec[name] = cloud.points[:, j]
            for j, name in enumerate(("red", "green", "blue")):
                rec[name] = rgb[:, j]
            f.write(rec.tobytes())
        else:
            # float64 repr of each float32 value parses back to the same float32
            pts = cloud.points.astype(np.float32).astype(np.float64).tolist()
            for p, c in zip(pts, rgb.tolist()):
                f.write(f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))


# --------------------------------------------------------------------------
# native cache

CACHE_SUFFIX = ".npz"
_CACHE_VERSION = 1


def save_cache(cloud: ScenePointCloud, path) -> None:
    path = Path(path)
    try:
        with open(path, "wb") as f:
            np.savez(f, version=np.array(_CACHE_VERSION), points=cloud.points, colors=cloud.colors)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _load_cache(path: Path) -> ScenePointCloud:
    try:
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != _CACHE_VERSION:
                raise UnsupportedFormat(f"cache version {int(z['version'])} not understood")
            return ScenePointCloud(z["points"], z["colors"])
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise MalformedFile(f"{path} is not a point-cloud cache: {exc}") from exc


def load_point_cloud(path) -> ScenePointCloud:
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such file: {path}")
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == CACHE_SUFFIX:
        return _load_cache(path)
    raise UnsupportedFormat(f"unrecognized scene file type {suffix!r}")


# --------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    image_path: Path
    pose: CameraPose
    intrinsics: Intrinsics


@dataclass(frozen=True)
class Episode:
    episode_id: str
    scene_path: Path
    frames: tuple
    question: str
    ground_truth: str
    extra_answers: tuple = ()
    category: Optional[str] = None

    @property
    def references(self) -> list[str]:
        return [self.ground_truth, *self.extra_answers]


_NUM = {"type": "number"}

EPISODE_SCHEMA = {
    "type": "object",
    "required": ["episode_id", "scene", "frames", "question", "answer"],
    "properties": {
        "episode_id": {"type": "string", "minLength": 1},
        "scene": {"type": "string", "minLength": 1},
        "question": {"type": "string", "minLength": 1, "pattern": r"\S"},
        "answer": {"type": "string"},
        "extra_answers": {"type": "array", "items": {"type": "string"}},
        "category": {"type": ["string", "null"]},
        "frames": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "image", "pose", "intrinsics"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "image": {"type": "string", "minLength": 1},
                    "pose": {"type": "array", "items": _NUM, "minItems": 16, "maxItems": 16},
                    "intrinsics": {
                        "type": "object",
                        "required": ["fx", "fy", "cx", "cy", "width", "height"],
                        "properties": {
                            "fx": _NUM, "fy": _NUM, "cx": _NUM, "cy": _NUM,
                            "width": {"type": "integer", "minimum": 1},
                            "height": {"type": "integer", "minimum": 1},
                        },
                    },
                },
            },
        },
    },
}


def _field_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        # message looks like "'question' is a required property"
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    return ".".join(parts)


def parse_episode(data: dict, base_dir, strict: bool = True) -> Episode:
    validator = jsonschema.Draft7Validator(EPISODE_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        name = _field_path(err)
        raise SchemaViolation(f"episode field {name!r}: {err.message}", field=name)

    base_dir = Path(base_dir)
    frames = []
    seen = set()
    for i, fr in enumerate(data["frames"]):
        if fr["id"] in seen:
            raise SchemaViolation(f"duplicate frame id {fr['id']}", field=f"frames.{i}.id")
        seen.add(fr["id"])
        try:
            pose = CameraPose.from_matrix(fr["pose"])
        except InvalidPose as exc:
            raise SchemaViolation(f"frames.{i}.pose: {exc}", field=f"frames.{i}.pose") from exc
        try:
            k = Intrinsics(**{key: fr["intrinsics"][key] for key in
                              ("fx", "fy", "cx", "cy", "width", "height")})
        except ValueError as exc:
            raise SchemaViolation(
                f"frames.{i}.intrinsics: {exc}", field=f"frames.{i}.intrinsics"
            ) from exc
        image = base_dir / fr["image"]
        if strict and not image.is_file():
            raise DanglingReference(f"frame {fr['id']} image not found: {image}")
        frames.append(FrameRecord(fr["id"], image, pose, k))

    return Episode(
        episode_id=data["episode_id"],
        scene_path=base_dir / data["scene"],
        frames=tuple(frames),
        question=data["question"],
        ground_truth=data["answer"],
        extra_answers=tuple(data.get("extra_answers") or ()),
        category=data.get("category"),
    )


def load_episode(path, strict: bool = True) -> Episode:
    """Load and validate an episode JSON; paths resolve relative to the file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: invalid JSON ({exc})") from exc
    return parse_episode(data, path.parent, strict=strict)


def episode_to_dict(ep: Episode, base_dir) -> dict:
    base_dir = Path(base_dir)

    def rel(p: Path) -> str:
        try:
            return str(Path(p).relative_to(base_dir))
        except ValueError:
            return str(p)

    d = {
        "episode_id": ep.episode_id,
        "scene": rel(ep.scene_path),
        "frames": [
            {
                "id": fr.frame_id,
                "image": rel(fr.image_path),
                "pose": fr.pose.to_list(),
                "intrinsics": fr.intrinsics.to_dict(),
            }
            for fr in ep.frames
        ],
        "question": ep.question,
        "answer": ep.ground_truth,
    }
    if ep.extra_answers:
        d["extra_answers"] = list(ep.extra_answers)
    if ep.category is not None:
        d["category"] = ep.category
    return d


def subsample_frames(frames: Sequence, ratio: int) -> list:
    """Keep every ``ratio``-th frame starting from the first."""
    return list(frames[::ratio])


def expected_subsample_len(n: int, ratio: int) -> int:
    return math.ceil(n / ratio)
