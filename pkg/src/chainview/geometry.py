"""Rigid camera poses, pinhole intrinsics and the discrete motion vocabulary.

Camera frame convention: +z forward, +x right, +y down (right-handed).
Poses are camera-to-world: ``world = R @ cam + t`` where ``t`` is the
camera center in world coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from .errors import ChainViewError

ORTHO_TOL = 1e-9
NEAR_PLANE = 1e-4
CONSTRUCT_TOL = 1e-6  # looser than ORTHO_TOL so hand-typed matrices still load


class InvalidPose(ChainViewError):
    pass


class InvalidAnchor(ChainViewError):
    pass


class AnswerNotAMotion(ChainViewError):
    pass


_EYE3 = np.eye(3)
_EYE3.setflags(write=False)
# compositions drifting further than this from SO(3) are re-projected
RENORM_TOL = 1e-12


def _det3(r: np.ndarray) -> float:
    a, b, c, d, e, f, g, h, i = r.ravel().tolist()
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def _ortho_error(r: np.ndarray) -> float:
    return float(np.abs(r.T @ r - _EYE3).max())


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation).reshape(3, 3)
        t = _frozen(self.translation).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise InvalidPose("pose entries must be finite")
        if _ortho_error(r) > CONSTRUCT_TOL or _det3(r) <= 0:
            raise InvalidPose("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def _trusted(cls, rotation: np.ndarray, translation: np.ndarray) -> "CameraPose":
        """Skip validation for results of rigid operations on already valid poses."""
        pose = object.__new__(cls)
        object.__setattr__(pose, "rotation", _frozen(rotation))
        object.__setattr__(pose, "translation", _frozen(translation))
        return pose

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix, tol: float = 1e-4) -> "CameraPose":
        """Build from a 4x4 (or 16 row-major floats) camera-to-world matrix.

        Rotations off SO(3) by less than ``tol`` are re-orthonormalized;
        anything worse raises :class:`InvalidPose`.
        """
        m = np.asarray(matrix, dtype=np.float64)
        if m.size != 16:
            raise InvalidPose(f"pose needs 16 values, got {m.size}")
        m = m.reshape(4, 4)
        if not np.all(np.isfinite(m)):
            raise InvalidPose("pose entries must be finite")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=tol):
            raise InvalidPose("last row of a rigid transform must be [0, 0, 0, 1]")
        r = m[:3, :3]
        if _ortho_error(r) > tol or _det3(r) <= 0:
            raise InvalidPose("rotation block is not a proper rotation")
        return cls(orthonormalize(r), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_list(self) -> list[float]:
        """Row-major 16 floats, the serialized form used in every JSON surface."""
        return [float(x) for x in self.matrix().reshape(-1)]

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        r = self.rotation
        return _ortho_error(r) <= tol and abs(_det3(r) - 1.0) <= tol

    def allclose(self, other: "CameraPose", atol: float = 1e-9) -> bool:
        return bool(
            np.abs(self.rotation - other.rotation).max() <= atol
            and np.abs(self.translation - other.translation).max() <= atol
        )

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        t = ", ".join(f"{x:.4g}" for x in self.translation)
        return f"CameraPose(center=({t}))"


def compose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Rigid composition ``a ∘ b`` (apply ``b`` first, then ``a``)."""
    r = a.rotation @ b.rotation
    if _ortho_error(r) > RENORM_TOL:
        r = orthonormalize(r)
    t = a.rotation @ b.translation + a.translation
    if not np.isfinite(t).all():
        raise InvalidPose("composed translation is not finite")
    return CameraPose._trusted(r, t)


def inverse(p: CameraPose) -> CameraPose:
    rt = p.rotation.T
    return CameraPose._trusted(rt, -rt @ p.translation)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera at ``eye`` looking at ``target`` with image-up roughly along ``up``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-12:
        raise InvalidPose("look_at: viewing direction is parallel to up")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose(np.column_stack([x, y, z]), eye)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 60.0) -> "Intrinsics":
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


DEFAULT_INTRINSICS = Intrinsics.from_fov(640, 480, 60.0)


def project(point, pose: CameraPose, k: Intrinsics):
    """Pinhole projection of a world point.

    Returns ``(u, v, depth)`` or None when the point is at/behind the near
    plane or lands outside the image.
    """
    p_cam = pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.translation)
    depth = p_cam[2]
    if depth <= NEAR_PLANE:
        return None
    u = k.fx * p_cam[0] / depth + k.cx
    v = k.fy * p_cam[1] / depth + k.cy
    if not (0 <= u < k.width and 0 <= v < k.height):
        return None
    return float(u), float(v), float(depth)


def unproject(u: float, v: float, depth: float, pose: CameraPose, k: Intrinsics) -> np.ndarray:
    p_cam = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    return pose.rotation @ p_cam + pose.translation


def world_to_camera(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Vectorized world->camera transform for an (N, 3) array."""
    return (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation


# --------------------------------------------------------------------------
# Action vocabulary


class Motion(Enum):
    MOVE_FORWARD = "move forward"
    MOVE_BACKWARD = "move backward"
    MOVE_LEFT = "move left"
    MOVE_RIGHT = "move right"
    MOVE_UP = "move up"
    MOVE_DOWN = "move down"
    YAW_LEFT = "yaw left"
    YAW_RIGHT = "yaw right"
    PITCH_UP = "pitch up"
    PITCH_DOWN = "pitch down"
    ROLL_CW = "roll clockwise"
    ROLL_CCW = "roll counterclockwise"

    @property
    def verb(self) -> str:
        return self.value

    @property
    def inverse(self) -> "Motion":
        return _INVERSE_MOTION[self]


_INVERSE_MOTION = {
    Motion.MOVE_FORWARD: Motion.MOVE_BACKWARD,
    Motion.MOVE_BACKWARD: Motion.MOVE_FORWARD,
    Motion.MOVE_LEFT: Motion.MOVE_RIGHT,
    Motion.MOVE_RIGHT: Motion.MOVE_LEFT,
    Motion.MOVE_UP: Motion.MOVE_DOWN,
    Motion.MOVE_DOWN: Motion.MOVE_UP,
    Motion.YAW_LEFT: Motion.YAW_RIGHT,
    Motion.YAW_RIGHT: Motion.YAW_LEFT,
    Motion.PITCH_UP: Motion.PITCH_DOWN,
    Motion.PITCH_DOWN: Motion.PITCH_UP,
    Motion.ROLL_CW: Motion.ROLL_CCW,
    Motion.ROLL_CCW: Motion.ROLL_CW,
}


@dataclass(frozen=True)
class SwitchTo:
    anchor_index: int

    @property
    def verb(self) -> str:
        return f"switch to view {self.anchor_index}"


@dataclass(frozen=True)
class Answer:
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("answer text must be non-empty")

    @property
    def verb(self) -> str:
        return f"answer {self.text}"


Action = Union[Motion, SwitchTo, Answer]


@dataclass(frozen=True)
class MotionConfig:
    step_m: float = 0.3
    yaw_deg: float = 30.0
    pitch_deg: float = 30.0
    roll_deg: float = 30.0
    clamp_margin_m: float = 0.5
    # "camera": move up/down along camera -y/+y; "world": along world_up
    vertical: str = "camera"
    world_up: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        for name in ("step_m", "yaw_deg", "pitch_deg", "roll_deg", "clamp_margin_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"MotionConfig.{name} must be positive")
        if self.vertical not in ("camera", "world"):
            raise ValueError("MotionConfig.vertical must be 'camera' or 'world'")


def axis_rotation(axis: str, angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(axis)


# camera-local translation directions (unit vectors)
_TRANSLATIONS = {
    Motion.MOVE_FORWARD: (0.0, 0.0, 1.0),
    Motion.MOVE_BACKWARD: (0.0, 0.0, -1.0),
    Motion.MOVE_RIGHT: (1.0, 0.0, 0.0),
    Motion.MOVE_LEFT: (-1.0, 0.0, 0.0),
    Motion.MOVE_UP: (0.0, -1.0, 0.0),
    Motion.MOVE_DOWN: (0.0, 1.0, 0.0),
}

# (axis, sign); +y is down so a positive turn about y swings forward toward +x (right)
_ROTATIONS = {
    Motion.YAW_LEFT: ("y", -1.0, "yaw_deg"),
    Motion.YAW_RIGHT: ("y", 1.0, "yaw_deg"),
    Motion.PITCH_UP: ("x", 1.0, "pitch_deg"),
    Motion.PITCH_DOWN: ("x", -1.0, "pitch_deg"),
    Motion.ROLL_CW: ("z", 1.0, "roll_deg"),
    Motion.ROLL_CCW: ("z", -1.0, "roll_deg"),
}


@lru_cache(maxsize=256)
def motion_delta(motion: Motion, config: MotionConfig) -> CameraPose:
    """The fixed camera-local SE(3) increment for one motion (poses are immutable, so cached)."""
    if motion in _TRANSLATIONS:
        return CameraPose(np.eye(3), np.array(_TRANSLATIONS[motion]) * config.step_m)
    axis, sign, attr = _ROTATIONS[motion]
    angle = math.radians(getattr(config, attr)) * sign
    return CameraPose(axis_rotation(axis, angle), np.zeros(3))


def clamp_bounds(aabb, margin: float):
    lo, hi = aabb
    return np.asarray(lo, dtype=np.float64) - margin, np.asarray(hi, dtype=np.float64) + margin


def apply_action(
    pose: CameraPose,
    action: Action,
    config: MotionConfig = MotionConfig(),
    scene=None,
    anchors: Sequence[CameraPose] = (),
) -> CameraPose:
    """Return the pose reached by taking ``action`` from ``pose``.

    Translations and rotations are egocentric: the increment is expressed in
    the current camera frame, i.e. ``new = pose ∘ delta``. ``SwitchTo``
    returns the anchor pose unchanged. When ``scene`` is given, the camera
    center is clamped into the scene box grown by ``config.clamp_margin_m``.
    """
    if isinstance(action, Answer):
        raise AnswerNotAMotion("Answer is a terminal decision, not a camera motion")
    if isinstance(action, SwitchTo):
        if not 0 <= action.anchor_index < len(anchors):
            raise InvalidAnchor(
                f"switch target {action.anchor_index} outside anchors 0..{len(anchors) - 1}"
            )
        return anchors[action.anchor_index]
    if not isinstance(action, Motion):
        raise TypeError(f"not an action: {action!r}")

    if config.vertical == "world" and action in (Motion.MOVE_UP, Motion.MOVE_DOWN):
        up = np.asarray(config.world_up, dtype=np.float64)
        sign = 1.0 if action is Motion.MOVE_UP else -1.0
        new = CameraPose(pose.rotation, pose.translation + sign * config.step_m * up)
    else:
        new = compose(pose, motion_delta(action, config))

    if scene is not None and action in _TRANSLATIONS:
        lo, hi = clamp_bounds(scene.aabb, config.clamp_margin_m)
        clamped = np.clip(new.translation, lo, hi)
        if not np.array_equal(clamped, new.translation):
            new = CameraPose(new.rotation, clamped)
    return new


def inverse_action(action: Action) -> Action:
    if isinstance(action, Motion):
        return action.inverse
    raise ValueError(f"{action!r} has no inverse action")


def action_verb(action: Action) -> str:
    """Canonical surface form, e.g. ``"yaw left"`` or ``"switch to view 2"``."""
    return action.verb


ALL_MOTIONS: tuple = tuple(Motion)
