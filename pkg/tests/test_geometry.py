import numpy as np
import pytest

from viewgraft.autodiff import Tape, finite_diff_check
from viewgraft.geometry import (
    CameraParams,
    Intrinsics,
    Pose,
    TapedCamera,
    ViewRecord,
    axis_angle_from_rot,
    d_cam,
    d_depth,
    d_normal,
    look_at,
    normal_stencil_valid,
    normals_from_depth,
    pixel_dirs,
    project,
    rot_from_axis_angle,
    rot_geodesic,
    taped_rotation,
    unproject_depth_to_points,
)


def _cam(rvec=(0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0), fx=60.0, fy=60.0,
         w=32, h=24) -> CameraParams:
    return CameraParams(
        pose=Pose(rot=rot_from_axis_angle(np.asarray(rvec, float)),
                  t=np.asarray(t, float)),
        intr=Intrinsics(fx=fx, fy=fy, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                        width=w, height=h))


def test_rodrigues_is_a_rotation():
    rng = np.random.default_rng(0)
    for _ in range(25):
        v = rng.normal(size=3)
        v = v / np.linalg.norm(v) * rng.uniform(0, np.pi - 1e-3)
        R = rot_from_axis_angle(v)
        assert np.max(np.abs(R @ R.T - np.eye(3))) < 1e-12
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        assert np.max(np.abs(axis_angle_from_rot(R) - v)) < 1e-9
        assert rot_geodesic(R, np.eye(3)) == pytest.approx(np.linalg.norm(v),
                                                           abs=1e-9)


def test_taped_rotation_matches_numpy_rodrigues():
    rng = np.random.default_rng(1)
    for _ in range(10):
        v = rng.normal(size=3) * 0.7
        t = Tape()
        rows = taped_rotation(t.variable("r", v))
        R = np.array([[rows[i][j].item() for j in range(3)] for i in range(3)])
        assert np.max(np.abs(R - rot_from_axis_angle(v))) < 1e-14


def test_d_cam_zero_for_identical_cameras():
    c = _cam(rvec=(0.1, -0.2, 0.3), t=(1.0, 2.0, 3.0))
    assert d_cam(c, c).item() == 0.0


def test_d_cam_pure_rotation_equals_weighted_angle():
    ang = np.radians(10.0)
    c1 = _cam(rvec=(0.0, 0.0, ang))
    c2 = _cam()
    assert d_cam(c1, c2).item() == pytest.approx(ang, abs=1e-9)
    assert d_cam(c1, c2, w_rot=2.0).item() == pytest.approx(2 * ang, abs=1e-9)


def test_d_cam_translation_and_focal_terms():
    c1 = _cam(t=(3.0, 0.0, 4.0))
    c2 = _cam()
    assert d_cam(c1, c2).item() == pytest.approx(5.0, abs=1e-12)
    c3 = _cam(fx=66.0, fy=54.0)
    expect = 0.1 * (6.0 + 6.0) / 120.0
    assert d_cam(c3, c2).item() == pytest.approx(expect, abs=1e-12)


def test_d_cam_gradients_through_taped_camera():
    ref = _cam(rvec=(0.05, 0.1, -0.04), t=(0.2, -0.1, 1.0), fx=55.0, fy=58.0)

    def expr(v):
        rows = taped_rotation(v["rvec"])
        tc = TapedCamera(r=rows, t=[v["t"][0], v["t"][1], v["t"][2]],
                         fx=v["logf"][0].exp() * 60.0,
                         fy=v["logf"][1].exp() * 60.0)
        return d_cam(tc, ref)

    rep = finite_diff_check(expr, {
        "rvec": np.array([0.02, 0.15, 0.01]),
        "t": np.array([0.3, 0.0, 0.9]),
        "logf": np.array([0.02, -0.03]),
    }, tolerance=1e-4)
    assert rep.passed, rep.per_param


def test_look_at_center_and_axes():
    eye = np.array([2.0, -1.0, 3.0])
    pose = look_at(eye, np.array([0.0, 0.0, 0.0]))
    assert np.max(np.abs(pose.center() - eye)) < 1e-12
    fwd_world = pose.rot.T @ np.array([0.0, 0.0, 1.0])
    want = -eye / np.linalg.norm(eye)
    assert np.max(np.abs(fwd_world - want)) < 1e-12
    with pytest.raises(ValueError):
        look_at(np.array([0.0, 0.0, 5.0]), np.zeros(3))  # parallel to up


def test_project_unproject_round_trip():
    cam = _cam(rvec=(0.2, -0.1, 0.05), t=(0.3, 0.2, 2.0), w=16, h=12)
    rng = np.random.default_rng(4)
    depth = rng.uniform(1.5, 3.0, size=(12, 16))
    valid = rng.uniform(size=(12, 16)) > 0.2
    valid[0, 0] = True
    rec = ViewRecord(camera=cam, depth=depth,
                     normal=np.zeros((12, 16, 3)), valid=valid)
    pts = unproject_depth_to_points(rec)
    uv, z = project(cam, pts)
    vv, uu = np.nonzero(valid)
    assert np.max(np.abs(uv[:, 0] - uu)) < 1e-9
    assert np.max(np.abs(uv[:, 1] - vv)) < 1e-9
    assert np.max(np.abs(z - depth[valid])) < 1e-9


def test_plane_depth_gives_plane_normals():
    # camera above the z=0 plane, tilted; interior normals must match the
    # plane normal expressed in the camera frame
    eye = np.array([0.5, -0.4, 3.0])
    pose = look_at(eye, np.array([0.0, 0.3, 0.0]))
    intr = Intrinsics(fx=40.0, fy=40.0, cx=15.5, cy=11.5, width=32, height=24)
    cam = CameraParams(pose=pose, intr=intr)
    dirs = pixel_dirs(intr)
    wdirs = dirs @ pose.rot  # R^T applied to each dir
    C = pose.center()
    depth = -C[2] / wdirs[..., 2]
    assert np.all(depth > 0)
    n, nvalid = normals_from_depth(depth, intr)
    plane_n_cam = pose.rot @ np.array([0.0, 0.0, 1.0])
    # orientation: must face the camera
    sgn = -np.sign(np.dot(plane_n_cam, np.array([0.0, 0.0, 1.0])))
    want = plane_n_cam * (sgn if sgn != 0 else 1.0)
    err = np.linalg.norm(n[2:-2, 2:-2] - want, axis=-1)
    assert nvalid[2:-2, 2:-2].all()
    assert np.max(err) < 1e-6


def test_d_depth_scale_invariant_ignores_global_scale():
    rng = np.random.default_rng(7)
    d = rng.uniform(1.0, 2.0, size=(8, 8))
    valid = np.ones((8, 8), dtype=bool)
    assert d_depth(2.0 * d, d, valid).item() == pytest.approx(0.0, abs=1e-9)
    assert d_depth(2.0 * d, d, valid, kind="l1").item() == pytest.approx(
        np.mean(d), abs=1e-9)
    with pytest.raises(ValueError):
        d_depth(d, d, np.zeros((8, 8), dtype=bool))
    with pytest.raises(ValueError):
        d_depth(d, d, valid, kind="l2")


def test_d_depth_si_matches_hand_value():
    d2 = np.ones((2, 2))
    d1 = np.array([[1.0, 1.0], [np.e, np.e]])
    valid = np.ones((2, 2), dtype=bool)
    # log ratios are (0, 0, 1, 1); median 0.5; mean |r - m| = 0.5
    assert d_depth(d1, d2, valid).item() == pytest.approx(0.5, abs=1e-12)


def test_d_depth_gradient_masked():
    rng = np.random.default_rng(9)
    ref = rng.uniform(1.0, 3.0, size=(6, 6))
    pred0 = ref * rng.uniform(0.9, 1.1, size=(6, 6))
    valid = rng.uniform(size=(6, 6)) > 0.3

    def expr(v):
        return d_depth(v["d"], ref, valid)

    rep = finite_diff_check(expr, {"d": pred0}, tolerance=1e-4)
    assert rep.passed, rep.per_param
    # masked-out pixels must get zero gradient
    t = Tape()
    dt = t.variable("d", pred0)
    g = t.backward(d_depth(dt, ref, valid))["d"]
    assert np.all(g[~valid] == 0.0)


def test_d_normal_identical_and_orthogonal():
    n = np.zeros((4, 4, 3))
    n[..., 2] = -1.0
    valid = np.ones((4, 4), dtype=bool)
    assert d_normal(n, n, valid).item() == 0.0
    m = np.zeros((4, 4, 3))
    m[..., 0] = 1.0
    assert d_normal(n, m, valid).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        d_normal(n, n, np.zeros((4, 4), dtype=bool))


def test_normal_stencil_valid_erodes_neighbours():
    v = np.ones((5, 5), dtype=bool)
    v[2, 2] = False
    out = normal_stencil_valid(v)
    assert not out[2, 2] and not out[2, 1] and not out[1, 2]
    assert out[0, 0]  # borders clamp, corner survives
    assert out[4, 4]
