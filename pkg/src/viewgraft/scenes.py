"""Synthetic scenes: analytic heightfields, capture rigs, and the
deliberately misaligned inserted view.

The surface is z(x, y) = base + gaussian bumps + smoothstep-edged blocks,
so heights AND gradients are closed-form; ground-truth normals come from
the analytic gradient, not from finite differences. Rendering shares the
fixed-step march + secant scheme with the reconstructor (marching.py), so
ground truth and model live on the same discretization.

Everything is driven by explicit seeds; no call here touches global RNG
state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraParams, Intrinsics, Pose, ViewRecord,
                       look_at, normals_from_depth, pixel_dirs, project,
                       rot_from_axis_angle)
from .marching import MarchConfig, march_brackets, ray_dirs_world, secant_depth

__all__ = [
    "SceneSpec",
    "Scene",
    "CaptureRig",
    "MisalignmentSpec",
    "SceneRecipe",
    "sample_scene",
    "build_scene",
    "render_gt_view",
    "make_capture_set",
    "make_inserted_view",
    "make_sweep_cameras",
    "coverage_overlap",
    "INVALID_DEPTH",
    "INVALID_NORMAL",
]

INVALID_DEPTH = 1.0
INVALID_NORMAL = (0.0, 0.0, -1.0)


@dataclass(frozen=True)
class SceneSpec:
    """Closed-form surface description.

    bumps: (B, 4) rows (cx, cy, amplitude, sigma)
    blocks: (K, 6) rows (x0, x1, y0, y1, height, edge_width)
    """
    extent: tuple = (-1.0, 1.0, -1.0, 1.0)
    base: float = 0.0
    bumps: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    blocks: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))


@dataclass(frozen=True)
class SceneRecipe:
    """Procedural recipe; sample_scene(recipe, seed) -> SceneSpec."""
    n_bumps: int = 4
    n_blocks: int = 2
    bump_amp: tuple = (0.08, 0.22)
    bump_sigma: tuple = (0.12, 0.3)
    block_height: tuple = (0.1, 0.3)
    block_size: tuple = (0.25, 0.55)
    block_edge: float = 0.08
    extent: tuple = (-1.0, 1.0, -1.0, 1.0)
    base: float = 0.0


def sample_scene(recipe: SceneRecipe, seed: int) -> SceneSpec:
    rng = np.random.default_rng([seed, 11])
    x0, x1, y0, y1 = recipe.extent
    margin = 0.15
    bumps = np.zeros((recipe.n_bumps, 4))
    for i in range(recipe.n_bumps):
        bumps[i] = (rng.uniform(x0 + margin, x1 - margin),
                    rng.uniform(y0 + margin, y1 - margin),
                    rng.uniform(*recipe.bump_amp),
                    rng.uniform(*recipe.bump_sigma))
    blocks = np.zeros((recipe.n_blocks, 6))
    for i in range(recipe.n_blocks):
        w = rng.uniform(*recipe.block_size)
        h = rng.uniform(*recipe.block_size)
        cx = rng.uniform(x0 + margin + w / 2, x1 - margin - w / 2)
        cy = rng.uniform(y0 + margin + h / 2, y1 - margin - h / 2)
        blocks[i] = (cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2,
                     rng.uniform(*recipe.block_height), recipe.block_edge)
    return SceneSpec(extent=recipe.extent, base=recipe.base,
                     bumps=bumps, blocks=blocks)


def _sstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _sstep_d(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, 6.0 * t * (1.0 - t), 0.0)


class Scene:
    """Evaluatable surface + conservative z band."""

    def __init__(self, spec: SceneSpec, z_margin: float = 0.5):
        self.spec = spec
        amp_pos = float(np.sum(np.maximum(spec.bumps[:, 2], 0.0))) if len(spec.bumps) else 0.0
        amp_neg = float(np.sum(np.minimum(spec.bumps[:, 2], 0.0))) if len(spec.bumps) else 0.0
        blk = float(np.max(spec.blocks[:, 4])) if len(spec.blocks) else 0.0
        self.z_band = (spec.base + amp_neg - z_margin,
                       spec.base + amp_pos + blk + z_margin)

    def height(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        z = np.full(x.shape, self.spec.base, dtype=x.dtype)
        for cx, cy, amp, sig in self.spec.bumps:
            r2 = (x - cx) ** 2 + (y - cy) ** 2
            z = z + amp * np.exp(-r2 / (2.0 * sig * sig))
        for bx0, bx1, by0, by1, h, e in self.spec.blocks:
            wx = _sstep((x - bx0) / e) * _sstep((bx1 - x) / e)
            wy = _sstep((y - by0) / e) * _sstep((by1 - y) / e)
            z = z + h * wx * wy
        return z

    def grad(self, x, y):
        """(dz/dx, dz/dy), closed form."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        gx = np.zeros_like(x)
        gy = np.zeros_like(y)
        for cx, cy, amp, sig in self.spec.bumps:
            r2 = (x - cx) ** 2 + (y - cy) ** 2
            g = amp * np.exp(-r2 / (2.0 * sig * sig)) / (sig * sig)
            gx += -g * (x - cx)
            gy += -g * (y - cy)
        for bx0, bx1, by0, by1, h, e in self.spec.blocks:
            ax = _sstep((x - bx0) / e)
            bx = _sstep((bx1 - x) / e)
            ay = _sstep((y - by0) / e)
            by = _sstep((by1 - y) / e)
            dax = _sstep_d((x - bx0) / e) / e
            dbx = -_sstep_d((bx1 - x) / e) / e
            day = _sstep_d((y - by0) / e) / e
            dby = -_sstep_d((by1 - y) / e) / e
            gx += h * (dax * bx + ax * dbx) * (ay * by)
            gy += h * (ax * bx) * (day * by + ay * dby)
        return gx, gy

    def march_config(self, steps: int = 128, quantum: float = 0.125) -> MarchConfig:
        return MarchConfig(extent=self.spec.extent, z_band=self.z_band,
                           steps=steps, quantum=quantum)


def build_scene(spec: SceneSpec) -> Scene:
    return Scene(spec)


@dataclass(frozen=True)
class CaptureRig:
    """Cameras on an orbit arc, all aimed at a target point."""
    n_views: int = 6
    radius: float = 2.0
    height: float = 2.0
    arc_deg: tuple = (30.0, 150.0)
    target: tuple = (-0.25, 0.1, 0.0)
    fov_deg: float = 38.0
    width: int = 64
    im_height: int = 64


def _intrinsics(fov_deg: float, width: int, height: int) -> Intrinsics:
    half = np.radians(fov_deg) * 0.5
    fx = ((width - 1) * 0.5) / np.tan(half)
    return Intrinsics(fx=fx, fy=fx, cx=(width - 1) / 2.0,
                      cy=(height - 1) / 2.0, width=width, height=height)


def orbit_camera(radius: float, height: float, azimuth_deg: float,
                 target, fov_deg: float, width: int, im_height: int) -> CameraParams:
    az = np.radians(azimuth_deg)
    tgt = np.asarray(target, dtype=np.float64)
    eye = np.array([tgt[0] + radius * np.cos(az),
                    tgt[1] + radius * np.sin(az),
                    height])
    return CameraParams(pose=look_at(eye, tgt),
                        intr=_intrinsics(fov_deg, width, im_height))


def render_gt_view(scene: Scene, camera: CameraParams,
                   steps: int = 128) -> ViewRecord:
    """March the analytic field; normals from the analytic gradient."""
    intr = camera.intr
    dirs = pixel_dirs(intr).reshape(-1, 3)
    wdirs = ray_dirs_world(camera.pose.rot, dirs)
    C = camera.pose.center()
    cfg = scene.march_config(steps=steps)
    res = march_brackets(scene.height, C, wdirs, cfg)
    t = secant_depth(scene.height, C, wdirs, res)
    H, W = intr.height, intr.width
    hx = C[0] + t * wdirs[:, 0]
    hy = C[1] + t * wdirs[:, 1]
    gx, gy = scene.grad(hx, hy)
    n_world = np.stack([-gx, -gy, np.ones_like(gx)], axis=1)
    n_world /= np.linalg.norm(n_world, axis=1, keepdims=True)
    n_cam = n_world @ camera.pose.rot.T
    # orient to face the camera
    facing = np.sum(n_cam * dirs, axis=1)
    n_cam *= -np.sign(facing)[:, None]
    depth = np.where(res.valid, t, INVALID_DEPTH).reshape(H, W)
    normal = np.where(res.valid[:, None], n_cam,
                      np.array(INVALID_NORMAL)).reshape(H, W, 3)
    v = res.valid.reshape(H, W)
    # analytic normals are meaningful wherever depth is
    return ViewRecord(camera=camera, depth=depth, normal=normal,
                      valid=v, normal_valid=v)


def make_capture_set(scene: Scene, rig: CaptureRig, steps: int = 128):
    views = []
    az = np.linspace(rig.arc_deg[0], rig.arc_deg[1], rig.n_views)
    for a in az:
        cam = orbit_camera(rig.radius, rig.height, float(a), rig.target,
                           rig.fov_deg, rig.width, rig.im_height)
        views.append(render_gt_view(scene, cam, steps=steps))
    return views


@dataclass(frozen=True)
class MisalignmentSpec:
    """The three corruption channels of the inserted view.

    All magnitudes 0 -> the inserted view is exactly its own ground truth.
    """
    rot_jitter_deg: float = 0.0
    trans_jitter_frac: float = 0.0   # fraction of camera-target distance
    depth_warp_amp: float = 0.0      # multiplicative, peak amplitude
    depth_warp_modes: int = 2        # low-frequency cosine modes per axis
    blob_amp: float = 0.0            # depth pulled toward camera
    blob_radius_frac: float = 0.0    # radius as a fraction of image width
    blob_center: tuple = (0.5, 0.5)  # (u, v) as fractions of (W, H)
    seed: int = 0


def _smooth_field(H: int, W: int, modes: int, rng) -> np.ndarray:
    """Zero-mean smooth random field, peak |value| == 1."""
    u = np.linspace(0.0, 1.0, W)
    v = np.linspace(0.0, 1.0, H)
    f = np.zeros((H, W))
    for k in range(1, modes + 1):
        for l in range(1, modes + 1):
            c = rng.normal()
            pu = rng.uniform(0, 2 * np.pi)
            pv = rng.uniform(0, 2 * np.pi)
            f += c * np.outer(np.cos(np.pi * l * v + pv),
                              np.cos(np.pi * k * u + pu))
    f -= f.mean()
    peak = np.max(np.abs(f))
    return f / peak if peak > 0 else f


def make_inserted_view(scene: Scene, camera: CameraParams,
                       mis: MisalignmentSpec, steps: int = 128):
    """Returns (observed, truth).

    truth is the clean render from the nominal camera. observed REPORTS the
    nominal camera but its maps come from a pose-jittered render, warped by
    a smooth multiplicative depth field and punched by a content blob;
    normals are recomputed from the corrupted depth whenever a map-level
    channel is active.
    """
    truth = render_gt_view(scene, camera, steps=steps)
    rng = np.random.default_rng([mis.seed, 17])
    render_cam = camera
    jittered = mis.rot_jitter_deg != 0.0 or mis.trans_jitter_frac != 0.0
    if jittered:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = np.radians(mis.rot_jitter_deg)
        R_d = rot_from_axis_angle(axis * ang)
        C = camera.pose.center()
        tgt_dist = np.linalg.norm(C)  # order-of-magnitude scale is enough
        dC = rng.normal(size=3)
        dC = dC / np.linalg.norm(dC) * mis.trans_jitter_frac * tgt_dist
        C_new = C + dC
        R_new = R_d @ camera.pose.rot
        render_cam = CameraParams(
            pose=Pose(rot=R_new, t=-R_new @ C_new), intr=camera.intr)
    rec = render_gt_view(scene, render_cam, steps=steps)
    depth = rec.depth.copy()
    valid = rec.valid.copy()
    normal = rec.normal.copy()
    H, W = depth.shape
    map_level = False
    if mis.depth_warp_amp != 0.0:
        fld = _smooth_field(H, W, mis.depth_warp_modes, rng)
        depth = np.where(valid, depth * (1.0 + mis.depth_warp_amp * fld),
                         depth)
        map_level = True
    if mis.blob_amp != 0.0 and mis.blob_radius_frac > 0.0:
        u0 = mis.blob_center[0] * (W - 1)
        v0 = mis.blob_center[1] * (H - 1)
        r = mis.blob_radius_frac * W
        uu, vv = np.meshgrid(np.arange(W, dtype=float),
                             np.arange(H, dtype=float))
        rho = np.sqrt((uu - u0) ** 2 + (vv - v0) ** 2) / r
        bump = _sstep(1.0 - rho)
        depth = np.where(valid, depth - mis.blob_amp * bump, depth)
        map_level = True
    nvalid = valid
    if map_level:
        normal, nv = normals_from_depth(depth, camera.intr, valid)
        nvalid = nv & valid
        normal = np.where(nvalid[..., None], normal,
                          np.array(INVALID_NORMAL))
        depth = np.where(valid, depth, INVALID_DEPTH)
    observed = ViewRecord(camera=camera, depth=depth, normal=normal,
                          valid=valid, normal_valid=nvalid)
    return observed, truth


def make_sweep_cameras(rig: CaptureRig, inserted_az_deg: float,
                       inserted_target, k: int = 4):
    """Novel poses between the arc's end and the inserted view's azimuth."""
    a0 = rig.arc_deg[0]
    cams = []
    fr = np.linspace(0.25, 1.0, k)
    for f in fr:
        az = a0 + (inserted_az_deg - a0) * f
        tgt = tuple(np.asarray(rig.target) * (1 - f)
                    + np.asarray(inserted_target) * f)
        cams.append(orbit_camera(rig.radius, rig.height, float(az), tgt,
                                 rig.fov_deg, rig.width, rig.im_height))
    return cams


def coverage_overlap(scene: Scene, captured_cams, inserted_cam,
                     samples: int = 96) -> float:
    """Fraction of the inserted view's surface footprint that any captured
    view also sees. Visibility = surface point projects inside the image
    (heightfields are mild; occlusion is ignored and documented as such).
    """
    x0, x1, y0, y1 = scene.spec.extent
    xs = np.linspace(x0, x1, samples)
    ys = np.linspace(y0, y1, samples)
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx.reshape(-1), yy.reshape(-1),
                    scene.height(xx.reshape(-1), yy.reshape(-1))], axis=1)

    def sees(cam):
        uv, z = project(cam, pts)
        return ((z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.intr.width - 1)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.intr.height - 1))

    ins = sees(inserted_cam)
    if not ins.any():
        return 0.0
    cap = np.zeros_like(ins)
    for cam in captured_cams:
        cap |= sees(cam)
    return float(np.sum(ins & cap) / np.sum(ins))
