from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainview.fixtures import CUBE_VIEW_INTRINSICS, CUBE_VIEW_POSE, cube_cloud
from chainview.geometry import CameraPose, Intrinsics, Motion, MotionConfig, apply_action, look_at
from chainview.renderer import (
    Observation, Provenance, RenderSettings, birds_eye_mapping, decode_image, encode_image,
    render_birds_eye, render_view, save_observation,
)
from chainview.scene_io import ScenePointCloud

from oracles import inv4, mat4

GOLDEN = Path(__file__).parent / "golden"
K = Intrinsics.from_fov(64, 48, 60.0)
R0 = RenderSettings(splat_radius_px=0)


def cloud(points, colors):
    return ScenePointCloud(np.array(points, float), np.array(colors, float))


def non_background(image, bg=(0, 0, 0)):
    return np.argwhere(np.any(image != np.asarray(bg, float), axis=2))


def test_empty_scene_is_background():
    obs = render_view(ScenePointCloud.empty(), CameraPose.identity(), K,
                      RenderSettings(background=(0.2, 0.4, 0.6)))
    assert obs.image.shape == (48, 64, 3)
    assert np.all(obs.image == np.array([0.2, 0.4, 0.6]))
    assert obs.provenance is Provenance.RENDERED


def test_single_point_on_principal_ray():
    obs = render_view(cloud([[0, 0, 1]], [[1, 0, 0]]), CameraPose.identity(), K, R0)
    hits = non_background(obs.image)
    assert hits.tolist() == [[int(K.cy), int(K.cx)]]
    assert obs.image[int(K.cy), int(K.cx)].tolist() == [1.0, 0.0, 0.0]


def test_nearer_point_wins():
    scene = cloud([[0, 0, 2], [0, 0, 1]], [[0, 0, 1], [1, 0, 0]])
    obs = render_view(scene, CameraPose.identity(), K, R0)
    assert obs.image[int(K.cy), int(K.cx)].tolist() == [1.0, 0.0, 0.0]
    # order in the cloud does not matter
    scene = cloud([[0, 0, 1], [0, 0, 2]], [[1, 0, 0], [0, 0, 1]])
    assert render_view(scene, CameraPose.identity(), K, R0).image[int(K.cy), int(K.cx)].tolist() == [1, 0, 0]


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.4, 0.4), st.floats(-0.3, 0.3), st.floats(0.2, 5), st.floats(1.05, 3))
def test_depth_order_for_collinear_pairs(x, y, d, factor):
    near = np.array([x, y, 1.0]) * d
    far = near * factor
    scene = cloud([far, near], [[0, 0, 1], [0, 1, 0]])
    obs = render_view(scene, CameraPose.identity(), K, R0)
    hits = non_background(obs.image)
    for r, c in hits:
        assert obs.image[r, c].tolist() == [0.0, 1.0, 0.0]


def test_splat_radius_makes_disc():
    obs = render_view(cloud([[0, 0, 1]], [[1, 1, 1]]), CameraPose.identity(), K,
                      RenderSettings(splat_radius_px=2))
    assert len(non_background(obs.image)) == 13  # lattice points with dx^2 + dy^2 <= 4


def test_cube_matches_golden():
    obs = render_view(cube_cloud(), CUBE_VIEW_POSE, CUBE_VIEW_INTRINSICS, RenderSettings())
    golden = decode_image((GOLDEN / "cube_view.png").read_bytes())
    assert np.array_equal(np.round(obs.image * 255), np.round(golden * 255))
    assert obs.png_bytes() == render_view(cube_cloud(), CUBE_VIEW_POSE, CUBE_VIEW_INTRINSICS,
                                          RenderSettings()).png_bytes()


def test_cube_coverage_matches_projection_oracle():
    # radius 0: covered pixels are exactly the floor of each visible projection,
    # and each shows the color of its nearest point
    cube = cube_cloud()
    k = CUBE_VIEW_INTRINSICS
    w2c = inv4(mat4(CUBE_VIEW_POSE.rotation, CUBE_VIEW_POSE.translation))
    best = {}
    for i, (p, c) in enumerate(zip(cube.points.tolist(), cube.colors.tolist())):
        x, y, z = (sum(w2c[r][j] * (p + [1.0])[j] for j in range(4)) for r in range(3))
        if z <= 0.05:
            continue
        u, v = k.fx * x / z + k.cx, k.fy * y / z + k.cy
        if not (0 <= u < k.width and 0 <= v < k.height):
            continue
        key = (int(v // 1), int(u // 1))
        if key not in best or z < best[key][0] - 1e-12:
            best[key] = (z, c)
    obs = render_view(cube, CUBE_VIEW_POSE, k, R0)
    hits = {tuple(rc) for rc in non_background(obs.image).tolist()}
    assert hits == set(best)
    agree = sum(obs.image[r, c].tolist() == best[(r, c)][1] for r, c in best)
    # ties at shared cube edges may resolve either way; everything else must agree
    assert agree / len(best) > 0.99


def test_concurrent_renders_are_identical():
    cube = cube_cloud()
    poses = [look_at((2.2 * np.cos(a), 2.2 * np.sin(a), 1.0), (0, 0, 0)) for a in np.linspace(0, 6, 6)]

    def job(p):
        return render_view(cube, p, CUBE_VIEW_INTRINSICS, RenderSettings()).png_bytes()

    serial = [job(p) for p in poses]
    with ThreadPoolExecutor(4) as pool:
        parallel = list(pool.map(job, poses * 2))
    assert parallel == serial * 2


def test_move_forward_grows_footprint():
    cube = cube_cloud()
    pose = look_at((0, -4, 0), (0, 0, 0))
    cfg = MotionConfig(step_m=0.4)
    sizes = []
    for _ in range(5):
        sizes.append(len(non_background(render_view(cube, pose, CUBE_VIEW_INTRINSICS).image)))
        pose = apply_action(pose, Motion.MOVE_FORWARD, cfg)
    assert all(b > a for a, b in zip(sizes, sizes[1:]))


def test_birds_eye_trivial_cases():
    empty = render_birds_eye(ScenePointCloud.empty(), 32)
    assert np.all(empty.image == 0)
    one = render_birds_eye(cloud([[3, 4, 5]], [[1, 1, 0]]), 33, R0)
    assert non_background(one.image).tolist() == [[16, 16]]


def test_birds_eye_grid_matches_analytic_positions():
    xs, ys = np.meshgrid(np.linspace(0, 2, 9), np.linspace(0, 1, 5))
    pts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)])
    res = 200
    obs = render_birds_eye(cloud(pts, np.ones_like(pts)), res, R0)
    # analytic: extent = 2 * 1.1 over 200 px, centered on (1, 0.5), y up the image
    s = res / 2.2
    expect = {(int(100 - (y - 0.5) * s), int((x - 1.0) * s + 100)) for x, y, _ in pts}
    hits = {tuple(rc) for rc in non_background(obs.image).tolist()}
    assert len(hits) == len(pts)
    for r, c in hits:
        assert min(abs(r - er) + abs(c - ec) for er, ec in expect) <= 1


def test_birds_eye_highest_point_wins():
    scene = cloud([[0, 0, 0], [0, 0, 1], [1, 1, 0]], [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    obs = render_birds_eye(scene, 64, R0)
    m = birds_eye_mapping(scene, 64)
    u, v = m.world_to_pixel([[0, 0, 0]])[0]
    assert obs.image[int(v), int(u)].tolist() == [0.0, 1.0, 0.0]


def test_birds_eye_cube_golden():
    obs = render_birds_eye(cube_cloud(), 256, RenderSettings())
    golden = decode_image((GOLDEN / "cube_birds_eye.png").read_bytes())
    assert np.array_equal(np.round(obs.image * 255), np.round(golden * 255))


def test_png_roundtrip_and_jpeg_error():
    obs = render_view(cube_cloud(), CUBE_VIEW_POSE, CUBE_VIEW_INTRINSICS, RenderSettings())
    png = encode_image(obs, "PNG")
    assert png.startswith(b"\x89PNG")
    assert np.array_equal(np.round(decode_image(png) * 255), np.round(obs.image * 255))
    jpg = encode_image(obs, "JPEG", 90)
    assert np.mean(np.abs(decode_image(jpg) - obs.image)) < 0.02
    blank = render_view(ScenePointCloud.empty(), CameraPose.identity(), K)
    assert decode_image(encode_image(blank)).shape == (48, 64, 3)


def test_bad_quality_raises():
    from chainview.renderer import EncodeFailure
    blank = render_view(ScenePointCloud.empty(), CameraPose.identity(), K)
    with pytest.raises(EncodeFailure):
        encode_image(blank, "JPEG", 0)
    with pytest.raises(EncodeFailure):
        encode_image(blank, "TIFF")


def test_save_observation_sidecar(tmp_path):
    import json
    obs = render_view(cloud([[0, 0, 1]], [[1, 0, 0]]), CameraPose.identity(), K, step_index=4)
    png = save_observation(obs, tmp_path, "4")
    side = json.loads((tmp_path / "4.json").read_text())
    assert side == {"pose": CameraPose.identity().to_list(), "step_index": 4, "provenance": "Rendered"}
    back = Observation.from_file(png, obs.pose, 4)
    assert back.png_bytes() == obs.png_bytes()
