import json
import math

import numpy as np
import pytest

from viewgraft import reconstructor as rc
from viewgraft.geometry import CameraParams, Pose, look_at, rot_from_axis_angle
from viewgraft.metrics import (depth_total_variation, evaluate,
                               geometric_errors, psnr, ssim)
from viewgraft.scenes import (CaptureRig, MisalignmentSpec, SceneRecipe,
                              build_scene, make_capture_set,
                              make_inserted_view, make_sweep_cameras,
                              orbit_camera, sample_scene)

EXTENT = (-1.0, 1.0, -1.0, 1.0)


@pytest.fixture(scope="module")
def fitted_env():
    """Prefit params, a registered zero-misalignment inserted view, and the
    prefit-only twin for the registration-disjointness check."""
    scene = build_scene(sample_scene(SceneRecipe(), seed=3))
    rig = CaptureRig(n_views=6, width=32, im_height=32)
    gt = make_capture_set(scene, rig)
    cfg = rc.PrefitConfig(iterations=40, grid_shape=(32, 32), steps=64)
    params0, _ = rc.prefit(gt, EXTENT, cfg, seed=3)
    cam = orbit_camera(2.0, 2.0, 215.0, (-0.25, 0.1, 0.0), 38.0, 32, 32)
    obs, truth = make_inserted_view(scene, cam, MisalignmentSpec(seed=3))
    params = params0.copy()
    rc.register_inserted_view(params, obs, vid=6)
    sweep = make_sweep_cameras(rig, 215.0, (-0.25, 0.1, 0.0))
    return scene, rig, gt, params0, params, obs, truth, sweep


def _smooth(seed, shape=(24, 24)):
    rng = np.random.default_rng(seed)
    x = np.cumsum(np.cumsum(rng.random(shape), axis=0), axis=1)
    return x / x.max()


def test_psnr_closed_forms():
    a = np.zeros((8, 8))
    m = np.ones((8, 8), dtype=bool)
    assert psnr(a, a, m) == 99.0
    assert abs(psnr(a, np.ones((8, 8)), m) - 0.0) < 1e-12
    assert abs(psnr(a, np.full((8, 8), 0.1), m) - 20.0) < 1e-12
    # near-zero MSE stays at the cap
    assert psnr(a, np.full((8, 8), 1e-9), m) == 99.0


def test_psnr_monotone_in_mse():
    rng = np.random.default_rng(7)
    a = rng.random((12, 12))
    m = np.ones((12, 12), dtype=bool)
    prev = np.inf
    for scale in [1e-3, 3e-3, 1e-2, 0.1, 0.3, 1.0]:
        cur = psnr(a, a + scale * rng.standard_normal((12, 12)), m)
        assert cur < prev
        prev = cur


def test_psnr_mask_and_errors():
    a = _smooth(0, (12, 12))
    b = a.copy()
    m = np.ones((12, 12), dtype=bool)
    m[0, 0] = False
    b[0, 0] = 1e6                       # corruption outside the mask
    assert psnr(a, b, m) == 99.0
    with pytest.raises(ValueError, match="empty"):
        psnr(a, b, np.zeros((12, 12), dtype=bool))
    with pytest.raises(ValueError, match="peak"):
        psnr(a, b, m, peak=0.0)


def test_ssim_self_similarity():
    x = _smooth(1)
    m = np.ones(x.shape, dtype=bool)
    assert abs(ssim(x, x, m) - 1.0) < 1e-9
    m[:4, :] = False                    # partial mask still exact
    assert abs(ssim(x, x, m) - 1.0) < 1e-9


def test_ssim_symmetry():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a = _smooth(rng.integers(1 << 30))
        b = _smooth(rng.integers(1 << 30))
        m = np.ones(a.shape, dtype=bool)
        assert abs(ssim(a, b, m) - ssim(b, a, m)) < 1e-12


def test_ssim_constant_offset_closed_form():
    # constant images: variance terms vanish, luminance term remains:
    # (2*0.25*0.75 + C1) / (0.25^2 + 0.75^2 + C1) with C1 = 1e-4
    a = np.full((16, 16), 0.25)
    b = a + 0.5
    m = np.ones((16, 16), dtype=bool)
    want = (0.375 + 1e-4) / (0.625 + 1e-4)
    assert abs(ssim(a, b, m, peak=1.0) - want) < 1e-12


def test_ssim_window_errors():
    small = np.zeros((10, 10))
    with pytest.raises(ValueError, match="smaller"):
        ssim(small, small, np.ones((10, 10), dtype=bool))
    a = _smooth(3, (16, 16))
    holes = np.ones((16, 16), dtype=bool)
    holes[::6, ::6] = False             # every 11x11 window hits a hole
    with pytest.raises(ValueError, match="no window"):
        ssim(a, a, holes)
    with pytest.raises(ValueError, match="peak"):
        ssim(a, a, np.ones((16, 16), dtype=bool), peak=-1.0)


def test_ssim_mask_excludes_corruption():
    a = _smooth(4)
    b = a.copy()
    b[0, 0] = 50.0
    m = np.ones(a.shape, dtype=bool)
    m[0, 0] = False                     # drops every window touching (0,0)
    assert abs(ssim(a, b, m) - 1.0) < 1e-9


def test_ssim_range_bound():
    rng = np.random.default_rng(5)
    m = np.ones((24, 24), dtype=bool)
    for _ in range(10):
        a = _smooth(rng.integers(1 << 30))
        b = _smooth(rng.integers(1 << 30))
        for pair in [(a, b), (a, 1.0 - a), (a, 0.5 - 0.5 * a)]:
            v = ssim(*pair, m)
            assert -1.0 <= v <= 1.0


def test_geometric_errors_identity(fitted_env):
    _, _, gt, _, _, _, _, _ = fitted_env
    geo = geometric_errors(gt[0], gt[0])
    assert geo["si_depth"] == 0.0
    assert geo["l1_depth"] == 0.0
    assert geo["normal_mean_angle_deg"] < 1e-4
    assert geo["pose_geodesic_deg"] == 0.0
    assert geo["trans_error"] == 0.0


def test_geometric_errors_contrasts(fitted_env):
    _, _, gt, _, _, _, _, _ = fitted_env
    ref = gt[0]
    rad = math.radians(5.0)
    axis = np.array([0.0, 0.0, rad])
    rot = ref.camera.pose.rot @ rot_from_axis_angle(axis)
    cam = CameraParams(intr=ref.camera.intr,
                       pose=Pose(rot=rot, t=ref.camera.pose.t.copy()))
    spun = rc.ViewRecord(camera=cam, depth=ref.depth, normal=ref.normal,
                         valid=ref.valid, normal_valid=ref.normal_valid)
    geo = geometric_errors(spun, ref)
    assert abs(geo["pose_geodesic_deg"] - 5.0) < 1e-6

    doubled = rc.ViewRecord(camera=ref.camera, depth=2.0 * ref.depth,
                            normal=ref.normal, valid=ref.valid,
                            normal_valid=ref.normal_valid)
    geo = geometric_errors(doubled, ref)
    assert geo["si_depth"] < 1e-9       # uniform scale is gauged away
    assert geo["l1_depth"] > 0.1

    shrunk = rc.ViewRecord(camera=ref.camera, depth=ref.depth[:16, :16],
                           normal=ref.normal[:16, :16],
                           valid=ref.valid[:16, :16],
                           normal_valid=ref.normal_valid[:16, :16])
    with pytest.raises(ValueError, match="resolution"):
        geometric_errors(shrunk, ref)


def test_depth_total_variation():
    d = np.tile(np.arange(6, dtype=np.float64), (6, 1))
    v = np.ones((6, 6), dtype=bool)
    # horizontal steps are 1, vertical steps are 0: 30 pairs each
    assert abs(depth_total_variation(d, v) - 0.5) < 1e-12
    assert depth_total_variation(d, np.zeros((6, 6), dtype=bool)) == 0.0
    v2 = np.zeros((6, 6), dtype=bool)
    v2[0, 0] = True                     # no valid adjacent pair
    assert depth_total_variation(d, v2) == 0.0


def test_evaluate_registration_leaves_captured_untouched(fitted_env):
    _, _, gt, params0, params, obs, truth, sweep = fitted_env
    rep = evaluate(params, gt, (obs, truth), sweep)
    for i in range(len(gt)):
        bare = rc.render_view(params0, i)
        geo = geometric_errors(bare, gt[i])
        assert rep.preservation[i]["si_depth"] == geo["si_depth"]
        assert rep.preservation[i]["pose_deg"] == geo["pose_geodesic_deg"]


def test_evaluate_report_shape(fitted_env):
    _, _, gt, _, params, obs, truth, sweep = fitted_env
    rep = evaluate(params, gt, (obs, truth), sweep)
    assert len(rep.preservation) == len(gt)
    assert len(rep.novel_pose) == len(sweep)
    assert set(rep.insertion) == {"vs_observed", "vs_truth"}
    flat = list(rep.aggregates.values())
    for p in rep.preservation:
        flat.extend(p.values())
    for p in rep.novel_pose:
        flat.extend(p.values())
        assert 0.0 <= p["coverage"] <= 1.0
    for side in rep.insertion.values():
        flat.extend(side.values())
    assert all(np.isfinite(v) for v in flat)
    # without a sweep the novel aggregates are defined as zero
    bare = evaluate(params, gt, (obs, truth))
    assert bare.novel_pose == ()
    assert bare.aggregates["novel_coverage"] == 0.0
    assert bare.aggregates["novel_depth_tv"] == 0.0


def test_evaluate_zero_misalignment_targets_coincide(fitted_env):
    _, _, gt, _, params, obs, truth, sweep = fitted_env
    rep = evaluate(params, gt, (obs, truth), sweep)
    vo = rep.insertion["vs_observed"]
    vt = rep.insertion["vs_truth"]
    assert vt["si_depth"] <= vo["si_depth"] + 1e-9
    assert vt["normal_deg"] <= vo["normal_deg"] + 1e-9


def test_evaluate_deterministic(fitted_env):
    _, _, gt, _, params, obs, truth, sweep = fitted_env
    a = evaluate(params, gt, (obs, truth), sweep)
    b = evaluate(params, gt, (obs, truth), sweep)
    assert json.dumps(a.to_dict(), sort_keys=True) == \
        json.dumps(b.to_dict(), sort_keys=True)


def test_novel_coverage_inside_hull(fitted_env):
    # a camera strictly inside the rig hull (chord midpoint of two camera
    # centers, aimed at the shared target) sees at least as much of the
    # surface as the worse of its two neighbors
    _, rig, _, _, params, _, _, _ = fitted_env
    target = np.array([-0.25, 0.1, 0.0])
    azs = np.linspace(rig.arc_deg[0], rig.arc_deg[1], rig.n_views)
    for i, j in [(0, 1), (2, 3), (4, 5), (0, 5), (1, 4)]:
        ci = orbit_camera(2.0, 2.0, float(azs[i]), tuple(target), 38.0,
                          32, 32)
        cj = orbit_camera(2.0, 2.0, float(azs[j]), tuple(target), 38.0,
                          32, 32)
        mid = CameraParams(
            intr=ci.intr,
            pose=look_at(0.5 * (ci.pose.center() + cj.pose.center()),
                         target))
        cov = [float(rc.render_camera(params, c).valid.mean())
               for c in (ci, mid, cj)]
        assert cov[1] >= min(cov[0], cov[2])
