import numpy as np
import pytest

from viewgraft.geometry import rot_geodesic
from viewgraft.scenes import (
    CaptureRig,
    MisalignmentSpec,
    Scene,
    SceneRecipe,
    SceneSpec,
    build_scene,
    coverage_overlap,
    make_capture_set,
    make_inserted_view,
    make_sweep_cameras,
    orbit_camera,
    render_gt_view,
    sample_scene,
)

RIG = CaptureRig(width=48, im_height=48)


def _flat_scene(base=0.3) -> Scene:
    return build_scene(SceneSpec(base=base))


def _bumpy_scene(seed=0) -> Scene:
    return build_scene(sample_scene(SceneRecipe(), seed))


def _ins_cam(rig=RIG):
    return orbit_camera(1.7, 1.8, -45.0, (0.55, -0.35, 0.0), rig.fov_deg,
                        rig.width, rig.im_height)


def test_flat_scene_depth_matches_plane_closed_form():
    scene = _flat_scene()
    cam = orbit_camera(2.0, 2.0, 60.0, RIG.target, 38.0, 48, 48)
    rec = render_gt_view(scene, cam, steps=128)
    from viewgraft.geometry import pixel_dirs
    dirs = pixel_dirs(cam.intr).reshape(-1, 3)
    w = dirs @ cam.pose.rot
    C = cam.pose.center()
    t_plane = (0.3 - C[2]) / w[:, 2]
    err = np.abs(rec.depth.reshape(-1) - t_plane)[rec.valid.reshape(-1)]
    assert rec.valid.mean() > 0.5
    assert np.max(err) <= 1e-3


def test_analytic_gradient_matches_numeric():
    scene = _bumpy_scene(3)
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.9, 0.9, size=200)
    y = rng.uniform(-0.9, 0.9, size=200)
    gx, gy = scene.grad(x, y)
    h = 1e-6
    ngx = (scene.height(x + h, y) - scene.height(x - h, y)) / (2 * h)
    ngy = (scene.height(x, y + h) - scene.height(x, y - h)) / (2 * h)
    assert np.max(np.abs(gx - ngx)) < 1e-5
    assert np.max(np.abs(gy - ngy)) < 1e-5


def test_gt_normals_match_analytic_on_flat_scene():
    scene = _flat_scene()
    cam = orbit_camera(2.0, 2.0, 90.0, RIG.target, 38.0, 32, 32)
    rec = render_gt_view(scene, cam)
    want = cam.pose.rot @ np.array([0.0, 0.0, 1.0])
    want = want * -np.sign(want[2])  # faces the camera (forward is +z)
    err = np.linalg.norm(rec.normal[rec.valid] - want, axis=-1)
    assert np.max(err) < 1e-9


def test_zero_misalignment_is_bit_exact_truth():
    scene = _bumpy_scene(1)
    obs, truth = make_inserted_view(scene, _ins_cam(), MisalignmentSpec())
    assert np.array_equal(obs.depth, truth.depth)
    assert np.array_equal(obs.normal, truth.normal)
    assert np.array_equal(obs.valid, truth.valid)
    assert obs.camera is truth.camera


def test_pose_jitter_reports_nominal_camera_and_is_monotone():
    scene = _bumpy_scene(2)
    cam = _ins_cam()
    d = {}
    for deg in (1.0, 2.0):
        obs, truth = make_inserted_view(
            scene, cam, MisalignmentSpec(rot_jitter_deg=deg, seed=5))
        assert obs.camera is cam  # reported camera never jittered
        m = obs.valid & truth.valid
        d[deg] = float(np.mean(np.abs(obs.depth[m] - truth.depth[m])))
        assert d[deg] > 1e-4
    assert d[2.0] > d[1.0]


def test_depth_warp_scales_linearly():
    scene = _bumpy_scene(2)
    cam = _ins_cam()
    diffs = {}
    for amp in (0.05, 0.10):
        obs, truth = make_inserted_view(
            scene, cam, MisalignmentSpec(depth_warp_amp=amp, seed=9))
        m = obs.valid & truth.valid
        diffs[amp] = obs.depth[m] - truth.depth[m]
        assert np.max(np.abs(diffs[amp])) > 1e-3
    ratio = diffs[0.10] / np.where(np.abs(diffs[0.05]) > 1e-12,
                                   diffs[0.05], 1.0)
    good = np.abs(diffs[0.05]) > 1e-9
    assert np.allclose(ratio[good], 2.0, atol=1e-6)


def test_blob_pulls_depth_toward_camera_locally():
    scene = _bumpy_scene(2)
    cam = _ins_cam()
    obs, truth = make_inserted_view(
        scene, cam, MisalignmentSpec(blob_amp=0.2, blob_radius_frac=0.15,
                                     seed=3))
    m = obs.valid & truth.valid
    delta = obs.depth - truth.depth
    assert np.min(delta[m]) < -0.15          # intrudes toward the camera
    assert np.all(delta[m] <= 1e-12)         # never pushed away
    changed = np.abs(delta) > 1e-9
    assert 0.0 < changed[m].mean() < 0.5     # compact region only


def test_inserted_view_determinism():
    scene = _bumpy_scene(6)
    cam = _ins_cam()
    mis = MisalignmentSpec(rot_jitter_deg=2.0, depth_warp_amp=0.05,
                           blob_amp=0.15, blob_radius_frac=0.12, seed=21)
    a_obs, a_tr = make_inserted_view(scene, cam, mis)
    b_obs, b_tr = make_inserted_view(scene, cam, mis)
    assert np.array_equal(a_obs.depth, b_obs.depth)
    assert np.array_equal(a_obs.normal, b_obs.normal)
    assert np.array_equal(a_tr.depth, b_tr.depth)


def test_capture_set_and_sweep_shapes():
    scene = _bumpy_scene(0)
    views = make_capture_set(scene, RIG)
    assert len(views) == RIG.n_views
    for v in views:
        assert v.depth.shape == (48, 48)
        assert v.valid.mean() > 0.4
    sweep = make_sweep_cameras(RIG, -45.0, (0.55, -0.35, 0.0), k=4)
    assert len(sweep) == 4


def test_sampled_scenes_vary_and_are_deterministic():
    a = sample_scene(SceneRecipe(), 0)
    b = sample_scene(SceneRecipe(), 0)
    c = sample_scene(SceneRecipe(), 1)
    assert np.array_equal(a.bumps, b.bumps)
    assert not np.array_equal(a.bumps, c.bumps)


def test_coverage_overlap_bounds():
    scene = _bumpy_scene(0)
    cams = [v.camera for v in make_capture_set(scene, RIG)]
    assert coverage_overlap(scene, cams, cams[0]) > 0.95
    ins = _ins_cam()
    ov = coverage_overlap(scene, cams, ins)
    assert 0.0 < ov < 1.0


def test_geodesic_rig_consistency():
    # neighbouring rig cameras differ by roughly the azimuth step
    scene = _flat_scene()
    views = make_capture_set(scene, CaptureRig(n_views=3, width=16,
                                               im_height=16))
    g = rot_geodesic(views[0].camera.pose.rot, views[1].camera.pose.rot)
    assert 0.1 < g < 1.5
