import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainview.fixtures import cube_cloud
from chainview.scene_io import (
    DanglingReference, IoFailure, MalformedFile, ScenePointCloud, SchemaViolation,
    UnsupportedFormat, episode_to_dict, load_episode, load_point_cloud, parse_episode,
    read_ply, save_cache, subsample_frames, write_ply,
)

IDENTITY = [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1]
K = {"fx": 100.0, "fy": 100.0, "cx": 50.0, "cy": 40.0, "width": 100, "height": 80}


def ascii_ply(rows, props="property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n", count=None):
    head = (f"ply\nformat ascii 1.0\nelement vertex {len(rows) if count is None else count}\n"
            f"{props}end_header\n")
    return head + "".join(" ".join(str(v) for v in r) + "\n" for r in rows)


def test_empty_ply(tmp_path):
    p = tmp_path / "e.ply"
    p.write_text(ascii_ply([]))
    cloud = load_point_cloud(p)
    assert len(cloud) == 0
    lo, hi = cloud.aabb
    assert np.array_equal(lo, np.zeros(3)) and np.array_equal(hi, np.zeros(3))


def test_single_vertex(tmp_path):
    p = tmp_path / "one.ply"
    p.write_text(ascii_ply([(1, 2, 3, 255, 0, 0)]))
    cloud = load_point_cloud(p)
    assert cloud.points.tolist() == [[1.0, 2.0, 3.0]]
    assert cloud.colors.tolist() == [[1.0, 0.0, 0.0]]
    lo, hi = cloud.aabb
    assert lo.tolist() == [1, 2, 3] and hi.tolist() == [1, 2, 3]


def test_binary_little_endian_with_extra_property(tmp_path):
    head = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\nproperty float nx\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            "element face 0\nproperty list uchar int vertex_indices\nend_header\n")
    body = struct.pack("<4f3B", 0.5, -1, 2, 9, 0, 128, 255) + struct.pack("<4f3B", 1, 1, 1, 0, 10, 20, 30)
    p = tmp_path / "b.ply"
    p.write_bytes(head.encode() + body)
    cloud = read_ply(p)
    np.testing.assert_array_equal(cloud.points, [[0.5, -1, 2], [1, 1, 1]])
    np.testing.assert_allclose(cloud.colors[0], [0, 128 / 255, 1])


def test_ply_errors(tmp_path):
    p = tmp_path / "be.ply"
    p.write_bytes(b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\n"
                  b"property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n"
                  b"property uchar blue\nend_header\n")
    with pytest.raises(UnsupportedFormat):
        read_ply(p)
    p.write_text(ascii_ply([(0, 0, 0)], props="property float x\nproperty float y\nproperty float z\n"))
    with pytest.raises(UnsupportedFormat):
        read_ply(p)
    p.write_text(ascii_ply([(0, 0, 0, 1, 1, 1)], count=3))
    with pytest.raises(MalformedFile):
        read_ply(p)
    p.write_text("not a ply at all\n")
    with pytest.raises(MalformedFile):
        read_ply(p)
    with pytest.raises(IoFailure):
        load_point_cloud(tmp_path / "missing.ply")
    (tmp_path / "scene.obj").write_text("v 0 0 0\n")
    with pytest.raises(UnsupportedFormat):
        load_point_cloud(tmp_path / "scene.obj")


def test_cube_roundtrip_native_cache(tmp_path):
    cloud = cube_cloud()
    assert len(cloud) >= 10_000
    save_cache(cloud, tmp_path / "c.npz")
    back = load_point_cloud(tmp_path / "c.npz")
    assert back.points.tobytes() == cloud.points.tobytes()
    assert back.colors.tobytes() == cloud.colors.tobytes()


def test_ply_then_cache_is_identity(tmp_path):
    rng = np.random.default_rng(0)
    cloud = ScenePointCloud(rng.uniform(-3, 3, (500, 3)).astype(np.float32).astype(np.float64),
                            rng.integers(0, 256, (500, 3)) / 255.0)
    for binary in (True, False):
        write_ply(cloud, tmp_path / "s.ply", binary=binary)
        loaded = load_point_cloud(tmp_path / "s.ply")
        save_cache(loaded, tmp_path / "s.npz")
        again = load_point_cloud(tmp_path / "s.npz")
        assert np.array_equal(again.points, loaded.points)
        assert np.array_equal(again.colors, loaded.colors)
        np.testing.assert_allclose(loaded.points, cloud.points, atol=1e-6)
        lo, hi = loaded.aabb
        assert np.all(loaded.points >= lo) and np.all(loaded.points <= hi)


def test_cloud_is_immutable():
    cloud = cube_cloud(5)
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 9.0


def minimal_episode(tmp_path, **overrides):
    (tmp_path / "f0.png").write_bytes(b"")
    data = {
        "episode_id": "e1", "scene": "scene.ply", "question": "What is on the table?",
        "answer": "a cup",
        "frames": [{"id": 0, "image": "f0.png", "pose": IDENTITY, "intrinsics": K}],
    }
    data.update(overrides)
    return data


def test_minimal_episode(tmp_path):
    path = tmp_path / "ep.json"
    path.write_text(json.dumps(minimal_episode(tmp_path)))
    ep = load_episode(path)
    assert len(ep.frames) == 1
    assert ep.frames[0].intrinsics.cx == 50.0
    assert ep.references == ["a cup"]
    again = parse_episode(episode_to_dict(ep, tmp_path), tmp_path)
    assert again == ep


def test_missing_question_names_field(tmp_path):
    data = minimal_episode(tmp_path)
    del data["question"]
    with pytest.raises(SchemaViolation) as info:
        parse_episode(data, tmp_path)
    assert info.value.field == "question"
    assert "question" in str(info.value)


def test_nested_schema_field(tmp_path):
    data = minimal_episode(tmp_path)
    data["frames"][0]["pose"] = IDENTITY[:15]
    with pytest.raises(SchemaViolation) as info:
        parse_episode(data, tmp_path)
    assert info.value.field == "frames.0.pose"


def test_dangling_image(tmp_path):
    data = minimal_episode(tmp_path)
    data["frames"][0]["image"] = "nope.png"
    with pytest.raises(DanglingReference):
        parse_episode(data, tmp_path, strict=True)
    assert parse_episode(data, tmp_path, strict=False).frames[0].image_path.name == "nope.png"


def test_subsample_examples():
    frames = list(range(120))
    assert subsample_frames(frames, 10) == list(range(0, 120, 10))
    assert len(subsample_frames(frames, 10)) == 12
    assert subsample_frames(frames, 1) == frames
    assert subsample_frames(list(range(5)), 10) == [0]


@given(st.integers(0, 300), st.integers(1, 12), st.integers(1, 12))
def test_subsample_properties(n, a, b):
    frames = list(range(n))
    once = subsample_frames(frames, a)
    assert len(once) == -(-n // a)
    assert subsample_frames(once, b) == subsample_frames(frames, a * b)
