"""Synthetic scenes, episodes and scripted transcripts for offline runs.

Three small z-up rooms: a cube room, two rooms joined by a corridor, and a
room whose target hides behind a partition. Frame images are rendered from
the scene itself, so anchors and rendered views look alike.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, look_at
from .renderer import RenderSettings, render_view
from .scene_io import ScenePointCloud, write_ply

FRAME_INTRINSICS = Intrinsics.from_fov(160, 120, 70.0)
FRAME_RENDER = RenderSettings(splat_radius_px=1)
FRAMES_PER_EPISODE = 40


def plane(origin, u, v, nu: int, nv: int, color, checker=None) -> ScenePointCloud:
    """Grid of nu x nv points spanning ``origin + s*u + t*v`` for s, t in [0, 1]."""
    s = np.linspace(0.0, 1.0, nu)
    t = np.linspace(0.0, 1.0, nv)
    ss, tt = np.meshgrid(s, t, indexing="ij")
    pts = (np.asarray(origin, float)[None, :] + ss.reshape(-1, 1) * np.asarray(u, float)
           + tt.reshape(-1, 1) * np.asarray(v, float))
    cols = np.tile(np.asarray(color, float), (len(pts), 1))
    if checker is not None:
        cell = ((np.floor(ss * checker).astype(int) + np.floor(tt * checker).astype(int)) % 2)
        cols[cell.reshape(-1) == 1] *= 0.8
    return ScenePointCloud(pts, cols)


def box(center, size, color, n: int = 20) -> ScenePointCloud:
    """Surface points of an axis-aligned box (all six faces)."""
    c = np.asarray(center, float)
    sx, sy, sz = size
    lo = c - np.array(size) / 2.0
    faces = [
        plane(lo, (sx, 0, 0), (0, sy, 0), n, n, color),
        plane(lo + (0, 0, sz), (sx, 0, 0), (0, sy, 0), n, n, color),
        plane(lo, (sx, 0, 0), (0, 0, sz), n, n, color),
        plane(lo + (0, sy, 0), (sx, 0, 0), (0, 0, sz), n, n, color),
        plane(lo, (0, sy, 0), (0, 0, sz), n, n, color),
        plane(lo + (sx, 0, 0), (0, sy, 0), (0, 0, sz), n, n, color),
    ]
    return ScenePointCloud.concat(faces)


def cube_cloud(n: int = 41) -> ScenePointCloud:
    """Unit cube centered at the origin, faces colored by axis (6 * n^2 points)."""
    colors = [(1, 0, 0), (0, 1, 1), (0, 1, 0), (1, 0, 1), (0, 0, 1), (1, 1, 0)]
    lo = np.array([-0.5, -0.5, -0.5])
    faces = [
        plane(lo, (1, 0, 0), (0, 1, 0), n, n, colors[0], checker=4),
        plane(lo + (0, 0, 1), (1, 0, 0), (0, 1, 0), n, n, colors[1], checker=4),
        plane(lo, (1, 0, 0), (0, 0, 1), n, n, colors[2], checker=4),
        plane(lo + (0, 1, 0), (1, 0, 0), (0, 0, 1), n, n, colors[3], checker=4),
        plane(lo, (0, 1, 0), (0, 0, 1), n, n, colors[4], checker=4),
        plane(lo + (1, 0, 0), (0, 1, 0), (0, 0, 1), n, n, colors[5], checker=4),
    ]
    return ScenePointCloud.concat(faces)


CUBE_VIEW_POSE = look_at((2.2, -1.6, 1.3), (0.0, 0.0, 0.0))
CUBE_VIEW_INTRINSICS = Intrinsics.from_fov(320, 240, 60.0)


def room_shell(x0, y0, x1, y1, height=2.5, spacing=0.05, floor=(0.55, 0.5, 0.45),
               wall=(0.85, 0.85, 0.8), openings=()) -> ScenePointCloud:
    """Floor plus four walls; ``openings`` lists (wall, start, end) gaps along a wall."""
    nx = int(round((x1 - x0) / spacing)) + 1
    ny = int(round((y1 - y0) / spacing)) + 1
    nz = int(round(height / spacing)) + 1
    parts = [plane((x0, y0, 0), (x1 - x0, 0, 0), (0, y1 - y0, 0), nx, ny, floor, checker=16)]
    walls = {
        "south": ((x0, y0, 0), (x1 - x0, 0, 0), nx),
        "north": ((x0, y1, 0), (x1 - x0, 0, 0), nx),
        "west": ((x0, y0, 0), (0, y1 - y0, 0), ny),
        "east": ((x1, y0, 0), (0, y1 - y0, 0), ny),
    }
    for name, (origin, along, n) in walls.items():
        cloud = plane(origin, along, (0, 0, height), n, nz, wall)
        for gap_wall, start, end in openings:
            if gap_wall != name:
                continue
            axis = 0 if name in ("south", "north") else 1
            keep = (cloud.points[:, axis] < start) | (cloud.points[:, axis] > end)
            cloud = ScenePointCloud(cloud.points[keep], cloud.colors[keep])
        parts.append(cloud)
    return ScenePointCloud.concat(parts)


def sphere(center, radius, color, n: int = 40) -> ScenePointCloud:
    # Fibonacci lattice: even coverage without randomness
    i = np.arange(n * n) + 0.5
    phi = np.arccos(1 - 2 * i / (n * n))
    theta = math.pi * (1 + 5 ** 0.5) * i
    pts = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    return ScenePointCloud(np.asarray(center, float) + radius * pts,
                           np.tile(np.asarray(color, float), (len(pts), 1)))


def cube_room() -> ScenePointCloud:
    return ScenePointCloud.concat([
        room_shell(-2, -2, 2, 2),
        box((1.0, 1.0, 0.3), (0.6, 0.6, 0.6), (0.9, 0.1, 0.1)),
        box((-1.2, 0.8, 0.4), (0.8, 0.5, 0.8), (0.35, 0.25, 0.15)),
    ])


def corridor_rooms() -> ScenePointCloud:
    return ScenePointCloud.concat([
        room_shell(-4, -1.5, -1, 1.5, openings=[("east", -0.5, 0.5)]),
        plane((-1, -0.5, 0), (2, 0, 0), (0, 1, 0), 21, 11, (0.5, 0.5, 0.55)),
        plane((-1, -0.5, 0), (2, 0, 0), (0, 0, 2.5), 21, 26, (0.7, 0.75, 0.8)),
        plane((-1, 0.5, 0), (2, 0, 0), (0, 0, 2.5), 21, 26, (0.7, 0.75, 0.8)),
        room_shell(1, -1.5, 4, 1.5, openings=[("west", -0.5, 0.5)]),
        sphere((3.0, 0.6, 0.35), 0.3, (0.1, 0.8, 0.2)),
    ])


def occluded_room() -> ScenePointCloud:
    return ScenePointCloud.concat([
        room_shell(-2.5, -2, 2.5, 2),
        plane((0.5, -2.0, 0), (0, 2.6, 0), (0, 0, 2.0), 27, 21, (0.6, 0.6, 0.7)),
        box((1.5, -1.2, 0.25), (0.5, 0.5, 0.5), (0.1, 0.2, 0.9)),
        box((-1.5, 1.2, 0.45), (0.5, 0.5, 0.9), (0.8, 0.7, 0.2)),
    ])


def orbit_poses(center, radius, height, n, target_height=0.8, arc=(0.0, 2 * math.pi)):
    poses = []
    for i in range(n):
        a = arc[0] + (arc[1] - arc[0]) * i / n
        eye = (center[0] + radius * math.cos(a), center[1] + radius * math.sin(a), height)
        poses.append(look_at(eye, (center[0], center[1], target_height)))
    return poses


def walk_poses(start, end, n, height=1.4, look=(1.0, 0.0, -0.15)):
    poses = []
    start, end = np.asarray(start, float), np.asarray(end, float)
    for i in range(n):
        p = start + (end - start) * i / max(1, n - 1)
        eye = np.array([p[0], p[1], height])
        poses.append(look_at(eye, eye + np.asarray(look)))
    return poses


SCENES = {
    "cube_room": {
        "build": cube_room,
        "poses": lambda: orbit_poses((0, 0), 1.6, 1.5, FRAMES_PER_EPISODE),
        "question": "What color is the cube on the floor?",
        "answer": "red",
        "extra_answers": ["red cube"],
        "category": "attribute recognition",
    },
    "corridor": {
        "build": corridor_rooms,
        "poses": lambda: walk_poses((-3.5, 0.0), (-0.5, 0.0), FRAMES_PER_EPISODE),
        "question": "What object is in the far room at the end of the corridor?",
        "answer": "green ball",
        "extra_answers": ["ball", "a green sphere"],
        "category": "object localization",
    },
    "occluded": {
        "build": occluded_room,
        "poses": lambda: orbit_poses((-1.0, 0.0), 1.0, 1.5, FRAMES_PER_EPISODE,
                                     arc=(0.5 * math.pi, 1.5 * math.pi)),
        "question": "What is hidden behind the partition wall?",
        "answer": "blue box",
        "extra_answers": ["box"],
        "category": "spatial reasoning",
    },
}

SCRIPTS = {
    "cube_room": {
        "cov": [
            "SELECT: 1, 0",
            "THINK: the cube is somewhere ahead.\nACTION: move forward",
            "THINK: closer now, turning to face it.\nACTION: yaw left",
            "THINK: there is a red cube on the floor.\nANSWER: red",
            "THINK: checking from a slightly different angle.\nACTION: yaw right",
            "THINK: it is clearly red.\nANSWER: red",
        ],
        "no-selection": [
            "THINK: the cube is somewhere ahead.\nACTION: move forward",
            "THINK: closer now, turning to face it.\nACTION: yaw left",
            "THINK: there is a red cube on the floor.\nANSWER: red",
            "THINK: checking from a slightly different angle.\nACTION: yaw right",
            "THINK: it is clearly red.\nANSWER: red",
        ],
        "baseline": ["ANSWER: red"],
    },
    "corridor": {
        "cov": [
            "SELECT: 3",
            "THINK: the corridor leads east.\nACTION: move forward",
            "ACTION: move forward",
            "THINK: the far room is coming into view.\nACTION: move forward",
            "THINK: a green ball sits in the far room.\nANSWER: green ball",
        ],
        "no-selection": [
            "ACTION: switch to view 3",
            "ACTION: move forward",
            "ACTION: move forward",
            "THINK: a green ball sits in the far room.\nANSWER: green ball",
        ],
        "baseline": ["ANSWER: a chair"],
    },
    "occluded": {
        "cov": [
            "SELECT: 0, 3",
            "THINK: probably a chair.\nANSWER: a chair",
            "THINK: I should look around the partition.\nACTION: move right",
            "ACTION: switch to view 1",
            "THINK: the far side may be visible from here.\nACTION: yaw left",
            "THINK: a blue box is behind the wall.\nANSWER: blue box",
        ],
        "no-selection": [
            "THINK: probably a chair.\nANSWER: a chair",
            "ACTION: move right",
            "ACTION: switch to view 3",
            "ACTION: yaw left",
            "ANSWER: blue box",
        ],
        "baseline": ["ANSWER: box"],
    },
}

CONFIG_TEMPLATE = """\
# offline fixture suite: scripted model, rule-based judge
[run]
episodes = ["episodes/*.json"]
out_dir = "runs"
ratio = 10
k_max = 6
workers = 1

[backend]
kind = "{kind}"
script = "scripts.json"
reveal_after = 3

[motion]
step_m = 0.3
yaw_deg = 30.0

[render]
splat_radius_px = 1
birds_eye_resolution = 256

[budget]
min_steps = {min_steps}
max_steps = 12

[eval]
judge = "rule"
"""


def build_fixture_suite(out_dir, kind: str = "scripted", min_steps: int = 0) -> Path:
    """Write scenes, frame images, episodes, scripts and ``config.toml`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    for name, spec in SCENES.items():
        scene = spec["build"]()
        scene_path = out / "scenes" / f"{name}.ply"
        write_ply(scene, scene_path)
        frame_dir = out / "frames" / name
        frames = []
        for i, pose in enumerate(spec["poses"]()):
            obs = render_view(scene, pose, FRAME_INTRINSICS, FRAME_RENDER)
            png = frame_dir / f"{i:04d}.png"
            frame_dir.mkdir(parents=True, exist_ok=True)
            png.write_bytes(obs.png_bytes())
            frames.append({
                "id": i,
                "image": f"../frames/{name}/{i:04d}.png",
                "pose": pose.to_list(),
                "intrinsics": FRAME_INTRINSICS.to_dict(),
            })
        episode = {
            "episode_id": name,
            "scene": f"../scenes/{name}.ply",
            "frames": frames,
            "question": spec["question"],
            "answer": spec["answer"],
            "extra_answers": spec["extra_answers"],
            "category": spec["category"],
        }
        (out / "episodes" / f"{name}.json").write_text(json.dumps(episode, indent=1) + "\n")
    (out / "scripts.json").write_text(json.dumps(SCRIPTS, indent=2) + "\n")
    (out / "config.toml").write_text(CONFIG_TEMPLATE.format(kind=kind, min_steps=min_steps))
    return out
