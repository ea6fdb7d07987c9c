"""Point-splat rendering of scene clouds from arbitrary poses, plus the
orthographic bird's-eye overview."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ChainViewError
from .geometry import CameraPose, Intrinsics, NEAR_PLANE, world_to_camera
from .scene_io import ScenePointCloud


class EncodeFailure(ChainViewError):
    pass


class Provenance(str, Enum):
    ANCHOR_FRAME = "AnchorFrame"
    RENDERED = "Rendered"
    BIRDS_EYE = "BirdsEye"


@dataclass(frozen=True)
class RenderSettings:
    splat_radius_px: int = 2
    background: tuple = (0.0, 0.0, 0.0)
    near_m: float = 0.05
    far_m: float = 100.0
    birds_eye_resolution: int = 512
    up_axis: str = "z"

    def __post_init__(self):
        if not 0 <= self.splat_radius_px <= 8:
            raise ValueError("splat_radius_px must be in [0, 8]")
        if not self.near_m > 0 or not self.far_m > self.near_m:
            raise ValueError("need 0 < near_m < far_m")
        if self.up_axis not in ("z", "y"):
            raise ValueError("up_axis must be 'z' or 'y'")


@dataclass(eq=False)
class Observation:
    """An RGB image (H, W, 3) in [0, 1] together with the pose it was seen from."""

    image: np.ndarray
    pose: CameraPose
    step_index: int = 0
    provenance: Provenance = Provenance.RENDERED
    label: str = ""
    _encoded: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.step_index < 0:
            raise ValueError("step_index must be >= 0")
        self.image.setflags(write=False)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    def png_bytes(self) -> bytes:
        if "png" not in self._encoded:
            self._encoded["png"] = encode_image(self, "PNG")
        return self._encoded["png"]

    def sidecar(self) -> dict:
        return {
            "pose": self.pose.to_list(),
            "step_index": self.step_index,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_file(cls, path, pose: CameraPose, step_index: int = 0,
                  provenance: Provenance = Provenance.ANCHOR_FRAME, label: str = ""):
        path = Path(path)
        data = path.read_bytes()
        obs = cls(decode_image(data), pose, step_index, provenance, label)
        if data[:8] == b"\x89PNG\r\n\x1a\n":
            obs._encoded["png"] = data
        return obs


def _disc_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(r, r, indexing="xy")
    keep = dx * dx + dy * dy <= radius * radius
    return np.column_stack([dx[keep], dy[keep]])


def _zbuffer(width: int, height: int, px: np.ndarray, py: np.ndarray, key: np.ndarray,
             colors: np.ndarray, radius: int, background) -> np.ndarray:
    """Splat pixels; per pixel the smallest ``key`` wins, ties by point order."""
    image = np.empty((height, width, 3), dtype=np.float64)
    image[...] = np.asarray(background, dtype=np.float64)
    if len(px) == 0:
        return image
    offs = _disc_offsets(radius)
    order = np.arange(len(px))
    sx = (px[:, None] + offs[None, :, 0]).ravel()
    sy = (py[:, None] + offs[None, :, 1]).ravel()
    sk = np.repeat(key, len(offs))
    si = np.repeat(order, len(offs))
    inside = (sx >= 0) & (sx < width) & (sy >= 0) & (sy < height)
    sx, sy, sk, si = sx[inside], sy[inside], sk[inside], si[inside]
    flat = sy * width + sx
    srt = np.lexsort((si, sk, flat))
    flat, si = flat[srt], si[srt]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    image.reshape(-1, 3)[flat[first]] = colors[si[first]]
    return image


def render_view(scene: ScenePointCloud, pose: CameraPose, k: Intrinsics,
                settings: RenderSettings = RenderSettings(), step_index: int = 0) -> Observation:
    """Z-buffered splat render: nearest depth wins per pixel."""
    if len(scene):
        cam = world_to_camera(scene.points, pose)
        z = cam[:, 2]
        ok = (z > max(settings.near_m, NEAR_PLANE)) & (z <= settings.far_m)
        cam, cols = cam[ok], scene.colors[ok]
        z = cam[:, 2]
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
        vis = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
        px = np.floor(u[vis]).astype(np.int64)
        py = np.floor(v[vis]).astype(np.int64)
        image = _zbuffer(k.width, k.height, px, py, z[vis], cols[vis],
                         settings.splat_radius_px, settings.background)
    else:
        image = _zbuffer(k.width, k.height, np.zeros(0, np.int64), np.zeros(0, np.int64),
                         np.zeros(0), np.zeros((0, 3)), 0, settings.background)
    return Observation(image, pose, step_index, Provenance.RENDERED)


# --------------------------------------------------------------------------
# bird's-eye


@dataclass(frozen=True)
class BirdsEyeMapping:
    """Orthographic world -> pixel map for the top-down overview."""

    center: tuple  # horizontal (a, b) center of the footprint
    extent: float  # world meters covered by the image side
    resolution: int
    up_axis: str = "z"

    @property
    def axes(self) -> tuple[int, int, int]:
        # (image-right axis, image-up axis, height axis)
        return (0, 1, 2) if self.up_axis == "z" else (0, 2, 1)

    def world_to_pixel(self, points) -> np.ndarray:
        """Continuous pixel coordinates (u, v) for (N, 3) world points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        a, b, _ = self.axes
        s = self.resolution / self.extent
        u = (pts[:, a] - self.center[0]) * s + self.resolution / 2.0
        if self.up_axis == "z":
            v = self.resolution / 2.0 - (pts[:, b] - self.center[1]) * s
        else:
            # looking down -y: world +z points toward the bottom of the image
            v = self.resolution / 2.0 + (pts[:, b] - self.center[1]) * s
        return np.column_stack([u, v])

    def camera_pose(self, height: float) -> CameraPose:
        a, b, h = self.axes
        c = np.zeros(3)
        c[a], c[b], c[h] = self.center[0], self.center[1], height
        if self.up_axis == "z":
            rot = np.column_stack([[1, 0, 0], [0, -1, 0], [0, 0, -1]])
        else:
            rot = np.column_stack([[1, 0, 0], [0, 0, 1], [0, -1, 0]])
        return CameraPose(rot.astype(np.float64), c)


def birds_eye_mapping(scene: ScenePointCloud, resolution: int, up_axis: str = "z",
                      margin: float = 0.05) -> BirdsEyeMapping:
    lo, hi = scene.aabb
    a, b = (0, 1) if up_axis == "z" else (0, 2)
    center = ((lo[a] + hi[a]) / 2.0, (lo[b] + hi[b]) / 2.0)
    span = max(hi[a] - lo[a], hi[b] - lo[b])
    # degenerate footprints still need a finite scale; everything maps to the center
    extent = span * (1.0 + 2.0 * margin) if span > 0 else 1.0
    return BirdsEyeMapping((float(center[0]), float(center[1])), float(extent), resolution, up_axis)


def render_birds_eye(scene: ScenePointCloud, resolution: Optional[int] = None,
                     settings: RenderSettings = RenderSettings()) -> Observation:
    """Top-down orthographic overview; the highest point wins per pixel."""
    res = resolution or settings.birds_eye_resolution
    mapping = birds_eye_mapping(scene, res, settings.up_axis)
    _, _, h = mapping.axes
    top = float(scene.aabb[1][h]) + 1.0
    pose = mapping.camera_pose(top)
    if len(scene) == 0:
        image = _zbuffer(res, res, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0),
                         np.zeros((0, 3)), 0, settings.background)
        return Observation(image, pose, 0, Provenance.BIRDS_EYE, "birds-eye")
    uv = mapping.world_to_pixel(scene.points)
    px = np.floor(uv[:, 0]).astype(np.int64)
    py = np.floor(uv[:, 1]).astype(np.int64)
    px = np.clip(px, 0, res - 1)
    py = np.clip(py, 0, res - 1)
    image = _zbuffer(res, res, px, py, -scene.points[:, h], scene.colors,
                     settings.splat_radius_px, settings.background)
    return Observation(image, pose, 0, Provenance.BIRDS_EYE, "birds-eye")


# --------------------------------------------------------------------------
# encoding


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_image(obs, fmt: str = "PNG", quality: int = 90) -> bytes:
    image = obs.image if isinstance(obs, Observation) else obs
    fmt = fmt.upper()
    if fmt == "JPG":
        fmt = "JPEG"
    if fmt not in ("PNG", "JPEG"):
        raise EncodeFailure(f"unsupported image format {fmt!r}")
    if not 1 <= quality <= 100:
        raise EncodeFailure("quality must be in 1..100")
    buf = io.BytesIO()
    try:
        pil = Image.fromarray(to_uint8(image), mode="RGB")
        if fmt == "PNG":
            # fixed settings keep the byte stream reproducible
            pil.save(buf, format="PNG", optimize=False, compress_level=6)
        else:
            pil.save(buf, format="JPEG", quality=quality)
    except (ValueError, OSError, TypeError) as exc:
        raise EncodeFailure(str(exc)) from exc
    return buf.getvalue()


def decode_image(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def media_type(data: bytes) -> str:
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return "image/png"
    if data[:3] == b"\xff\xd8\xff":
        return "image/jpeg"
    raise EncodeFailure("unknown image encoding")


def save_observation(obs: Observation, directory, stem: str) -> Path:
    """Write ``<stem>.png`` and the ``<stem>.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    png = directory / f"{stem}.png"
    png.write_bytes(obs.png_bytes())
    (directory / f"{stem}.json").write_text(json.dumps(obs.sidecar(), indent=2) + "\n")
    return png
