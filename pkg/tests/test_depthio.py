import numpy as np
import pytest
from PIL import Image

from twohands.depthio import (CameraIntrinsics, DepthFrame, NoiseConfig, add_sensor_noise, backproject,
                              extract_foreground, foreground_pixels, read_depth, render_depth, sobel_normals,
                              write_depth, write_depth_pgm)
from twohands.handmodel import pose_hands
from twohands.raster import project, rasterize
from twohands.scenes import motion_sequence


def plane_depth(camera, normal, offset, mask=None):
    """Exact depth of the plane ``normal . X = offset`` along every pixel ray."""
    v, u = np.mgrid[0:camera.height, 0:camera.width].astype(float)
    rays = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], -1)
    z = offset / (rays @ normal)
    if mask is not None:
        z = np.where(mask, z, 0.0)
    return z


def test_fronto_parallel_plane_normals(camera):
    frame = DepthFrame.from_depth(np.full((camera.height, camera.width), 0.5))
    n, stats = sobel_normals(frame, camera)
    # only the image border lacks a full 3x3 neighbourhood
    assert stats == {"fallback": 2 * (camera.width + camera.height) - 4, "degenerate": 0}
    np.testing.assert_allclose(n, np.tile([0, 0, -1.0], (len(n), 1)), atol=1e-12)


@pytest.mark.parametrize("tilt", [(0.3, 0.0), (0.0, -0.4), (0.25, 0.2)])
def test_tilted_plane_normals(camera, tilt):
    n_true = np.array([tilt[0], tilt[1], -1.0])
    n_true /= np.linalg.norm(n_true)
    z = plane_depth(camera, n_true, n_true @ [0, 0, 0.6])
    frame = DepthFrame.from_depth(z)
    n, _ = sobel_normals(frame, camera, discontinuity_threshold=1.0)
    inner = np.zeros_like(z, bool)
    inner[20:-20, 20:-20] = True
    sel = inner[frame.foreground_mask]
    err = np.degrees(np.arccos(np.clip(n[sel] @ n_true, -1, 1)))
    assert err.max() < 0.5
    assert np.allclose(np.linalg.norm(n, axis=1), 1)


def test_normals_point_at_camera_and_borrow_at_edges(camera):
    mask = np.zeros((camera.height, camera.width), bool)
    mask[80:160, 100:220] = True
    z = np.where(mask, 0.5, 0.0)
    n, stats = sobel_normals(DepthFrame.from_depth(z), camera)
    P = backproject(DepthFrame.from_depth(z), camera)
    assert np.all(np.sum(n * P, axis=1) < 0)
    assert stats["fallback"] == 2 * (80 + 120) - 4
    np.testing.assert_allclose(n, np.tile([0, 0, -1.0], (len(n), 1)), atol=1e-12)


def test_backprojection_inverts_projection(camera, rng):
    z = rng.uniform(0.3, 1.0, (camera.height, camera.width))
    z[rng.random(z.shape) < 0.3] = 0
    frame = DepthFrame.from_depth(z)
    P = backproject(frame, camera)
    pix = foreground_pixels(frame)
    assert len(P) == frame.n_foreground == len(pix)
    v, u = np.divmod(pix, camera.width)
    np.testing.assert_allclose(project(P, camera), np.c_[u, v], atol=1e-9)
    np.testing.assert_array_equal(P[:, 2], z[v, u])


def test_foreground_window():
    z = np.array([[0.0, 0.1, 0.5], [1.3, 1.2, 0.2]])
    f = extract_foreground(DepthFrame.from_depth(z), 0.2, 1.2)
    np.testing.assert_array_equal(f.foreground_mask, [[False, False, True], [False, True, True]])


def test_sensor_noise_statistics(camera):
    z = np.zeros((camera.height, camera.width))
    z[40:200, 60:260] = 0.5
    z[40:200, 160:260] = 0.6  # a 10 cm step
    frame = DepthFrame.from_depth(z)
    cfg = NoiseConfig(invalid_probability=0.5, depth_sigma=0.001)
    jit, dropped = [], []
    edge = np.zeros_like(z, bool)
    edge[40:200, 159:161] = True
    ring = (z > 0) & ~np.pad(np.ones((158, 198), bool), ((41, 41), (61, 61)))
    edge |= ring
    interior = (z > 0) & ~edge
    for seed in range(20):
        out = add_sensor_noise(frame, seed, cfg)
        jit.append((out.depth - z)[interior & (out.depth > 0)])
        dropped.append(np.mean(out.depth[edge] == 0))
        assert np.all(out.depth[interior] > 0)
        assert np.all(out.depth[z == 0] == 0)
    jit = np.concatenate(jit)
    assert abs(jit.std() - 0.001) < 2e-5
    assert abs(jit.mean()) < 1e-5
    assert abs(np.mean(dropped) - 0.5) < 0.02


def test_noise_is_seeded(camera):
    z = np.full((camera.height, camera.width), 0.5)
    a, b = add_sensor_noise(DepthFrame.from_depth(z), 7), add_sensor_noise(DepthFrame.from_depth(z), 7)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_zero_noise_is_identity(camera, template):
    f = render_depth(template, motion_sequence(template, "static", 1)[0], camera)
    out = add_sensor_noise(f, 0, NoiseConfig(invalid_probability=0.0, depth_sigma=0.0))
    np.testing.assert_array_equal(out.depth, f.depth)


def test_depth_file_roundtrip(tmp_path, rng):
    z = rng.uniform(0.2, 1.5, (24, 32))
    z[3, 4] = 0
    f = DepthFrame.from_depth(z)
    write_depth(tmp_path / "a.depth", f)
    raw = (tmp_path / "a.depth").read_bytes()
    assert raw[:4] == b"DPTH" and len(raw) == 12 + 24 * 32 * 4
    back = read_depth(tmp_path / "a.depth")
    np.testing.assert_array_equal(back.depth, z.astype(np.float32))
    assert not back.foreground_mask[3, 4]
    (tmp_path / "b.depth").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        read_depth(tmp_path / "b.depth")


def test_pgm_is_16_bit_millimetres(tmp_path):
    z = np.array([[0.0, 0.5004], [1.2345, 2.0]])
    write_depth_pgm(tmp_path / "d.pgm", DepthFrame.from_depth(z))
    raw = (tmp_path / "d.pgm").read_bytes()
    assert raw.startswith(b"P5")
    img = np.asarray(Image.open(tmp_path / "d.pgm")).astype(int)
    np.testing.assert_array_equal(img, [[0, 500], [1234, 2000]])


def test_rendered_hand_depth(template, camera):
    gt = motion_sequence(template, "static", 1)[0]
    f = render_depth(template, gt, camera)
    V = pose_hands(template, gt).vertex_positions
    fg = f.depth[f.foreground_mask]
    assert V[:, 2].min() - 1e-9 <= fg.min() and fg.max() <= V[:, 2].max() + 1e-9
    assert 2000 < f.n_foreground < 20000


def test_rasterizer_single_triangle():
    cam = CameraIntrinsics(fx=100, fy=100, cx=10, cy=10, width=21, height=21)
    # triangle on the plane z = 1 + 0.5 x, covering the image centre
    P = np.array([[-0.05, -0.05, 0.0], [0.08, -0.05, 0.0], [-0.05, 0.08, 0.0]])
    P[:, 2] = 1 + 0.5 * P[:, 0]
    buf = rasterize(P, np.array([[0, 1, 2]]), cam)
    v, u = 10, 10  # ray through the optical axis hits x = 0, z = 1
    assert buf.face[v, u] == 0
    assert buf.depth[v, u] == pytest.approx(1.0, abs=1e-12)
    X = np.einsum("k,ka->a", buf.bary[v, u], P)
    np.testing.assert_allclose(X, [0, 0, 1], atol=1e-12)
    assert np.allclose(buf.bary[buf.covered].sum(-1), 1)


def test_rasterizer_keeps_nearest_surface():
    cam = CameraIntrinsics(fx=100, fy=100, cx=10, cy=10, width=21, height=21)
    tri = np.array([[-0.2, -0.2, 0], [0.2, -0.2, 0], [0.0, 0.2, 0]])
    P = np.concatenate([tri + [0, 0, 1.0], tri + [0, 0, 0.8]])
    buf = rasterize(P, np.array([[0, 1, 2], [3, 4, 5]]), cam)
    assert buf.face[10, 10] == 1 and buf.depth[10, 10] == pytest.approx(0.8)


@pytest.mark.parametrize("kw", [dict(fx=0), dict(near=0), dict(near=3, far=2), dict(width=0)])
def test_camera_validation(kw):
    with pytest.raises(ValueError):
        CameraIntrinsics(**kw)
