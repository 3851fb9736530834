"""Differentiable multi-view heightfield reconstructor.

The model is a bilinear heightfield grid over a fixed x/y extent plus one
camera block per view (axis-angle rotation, translation, log-focal) and an
optional per-view low-resolution depth residual. Rendering a view:

1. build the taped camera, composing any augmentation conditioning
   (constant pose delta left-multiplied into the rotation, dlogf added to
   the log-focals),
2. cast z-parameterized rays (camera-frame direction ((u-cx)/fx,
   (v-cy)/fy, 1), so the ray parameter IS the camera-space depth),
3. bracket the first surface crossing with an untaped float32 march whose
   per-ray bounds are slab-clipped to the extent box and quantized inward,
   so brackets are locally constant under parameter perturbations and the
   taped graph stays finite-difference consistent,
4. refine with one taped secant step between the bracket constants; the
   heightfield enters through clamped bilinear samples,
5. add the bilinearly upsampled residual block when the view has one,
6. derive camera-frame normals from central differences of the point map,
   with a detached facing flip, and erode validity by the stencil,
7. apply the block part of the view's augmentation as a taped image warp.

Invalid pixels carry finite sentinels (depth 1, normal (0,0,-1)); losses
must mask by the returned validity planes.

predict_records materializes plain numpy view records by running the same
forward on constants, so the adapted/teacher render path can never drift
from the trained one.

prefit fits the grid and cameras to captured records (grid initialized
from per-cell medians of unprojected depth, cameras from noise-perturbed
capture calibration, pinned there to fix the gauge). register_inserted_view
adds camera + residual blocks for a new view by multi-start pose descent
on plain depth L1, never touching existing blocks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import AugTransform, block_warp_mask, taped_block_warp
from .geometry import (CameraParams, Intrinsics, Pose, TapedCamera,
                       ViewRecord, axis_angle_from_rot, d_cam, d_depth,
                       d_normal, normal_stencil_valid, normals_from_depth,
                       pixel_dirs, rot_from_axis_angle, taped_rotation,
                       unproject_depth_to_points)
from .marching import MarchConfig, march_brackets, ray_dirs_world, secant_depth
from .optim import AdamConfig, AdamState, adam_step

__all__ = ["ViewStatic", "ModelParams", "BatchItem", "PredView", "register",
           "forward", "predict_records", "render_view", "prefit",
           "PrefitConfig", "PrefitReport", "register_inserted_view",
           "RegistrationConfig", "RegistrationResult", "save_params",
           "load_params", "block_keys"]

CHECKPOINT_MAGIC = b"VGRF0001"


@dataclass(frozen=True)
class ViewStatic:
    """Per-view quantities that are never optimized."""
    cx: float
    cy: float
    width: int
    height: int


@dataclass
class ModelParams:
    extent: tuple                 # (x0, x1, y0, y1)
    z_band: tuple                 # (z_lo, z_hi) for march clipping
    steps: int                    # march samples per ray
    quantum: float                # bracket quantization (depth units)
    view_static: dict             # vid -> ViewStatic
    blocks: dict                  # name -> float64 ndarray

    def copy(self) -> "ModelParams":
        return ModelParams(extent=self.extent, z_band=self.z_band,
                           steps=self.steps, quantum=self.quantum,
                           view_static=dict(self.view_static),
                           blocks={k: v.copy()
                                   for k, v in self.blocks.items()})

    @property
    def view_ids(self):
        return sorted(self.view_static)


def block_keys(vid: int) -> tuple:
    return (f"rot:{vid:03d}", f"trans:{vid:03d}", f"logf:{vid:03d}")


@dataclass
class BatchItem:
    """One view to render, with optional augmentation conditioning."""
    view_id: int
    pose_delta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dlogf: np.ndarray = field(default_factory=lambda: np.zeros(2))
    map_warp: AugTransform | None = None
    is_inserted: bool = False


@dataclass
class PredView:
    view_id: int
    camera: TapedCamera
    depth: ad.Tensor              # (H, W)
    normal: tuple                 # (nx, ny, nz) Tensors, (H, W) each
    valid: np.ndarray             # (H, W) bool
    normal_valid: np.ndarray      # (H, W) bool
    is_inserted: bool = False


def register(tape: ad.Tape, params: ModelParams,
             trainable=None) -> dict:
    """Put every block on the tape; keys outside `trainable` (when given)
    become constants and receive no gradient."""
    tensors = {}
    for key in sorted(params.blocks):
        if trainable is None or key in trainable:
            tensors[key] = tape.variable(key, params.blocks[key])
        else:
            tensors[key] = tape.constant(params.blocks[key])
    return tensors


def _grid_height_fn(grid_vals: np.ndarray, extent):
    """Vectorized clamped bilinear height lookup, dtype-preserving."""
    x0, x1, y0, y1 = extent
    Hg, Wg = grid_vals.shape
    g64 = np.ascontiguousarray(grid_vals, dtype=np.float64)
    g32 = g64.astype(np.float32)
    sx = (Wg - 1.0) / (x1 - x0)
    sy = (Hg - 1.0) / (y1 - y0)

    def height(x, y):
        g = g32 if x.dtype == np.float32 else g64
        qx = np.clip((x - x0) * sx, 0.0, Wg - 1.0)
        qy = np.clip((y - y0) * sy, 0.0, Hg - 1.0)
        ix = np.minimum(qx.astype(np.int64), Wg - 2)
        iy = np.minimum(qy.astype(np.int64), Hg - 2)
        fx = (qx - ix).astype(g.dtype)
        fy = (qy - iy).astype(g.dtype)
        return ((1 - fy) * ((1 - fx) * g[iy, ix] + fx * g[iy, ix + 1])
                + fy * ((1 - fx) * g[iy + 1, ix] + fx * g[iy + 1, ix + 1]))

    return height


def _res_queries(width: int, height: int, res_shape):
    """Constant query fields mapping pixels into the residual lattice."""
    rh, rw = res_shape
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    qx = np.clip((u + 0.5) * (rw / width) - 0.5, 0.0, rw - 1.0)
    qy = np.clip((v + 0.5) * (rh / height) - 0.5, 0.0, rh - 1.0)
    qxg, qyg = np.meshgrid(qx, qy)
    return qxg.reshape(-1), qyg.reshape(-1)


def _forward_one(tape: ad.Tape, tensors: dict, params: ModelParams,
                 item: BatchItem) -> PredView:
    vid = item.view_id
    vs = params.view_static[vid]
    H, W = vs.height, vs.width
    kr, kt, kf = block_keys(vid)
    grid = tensors["grid"]
    Hg, Wg = grid.shape

    # camera with conditioning composed in
    R = taped_rotation(tensors[kr])
    tr = tensors[kt]
    tvec = [tr[0], tr[1], tr[2]]
    lf = tensors[kf]
    lfx, lfy = lf[0], lf[1]
    pd = np.asarray(item.pose_delta, dtype=np.float64)
    if np.any(pd != 0.0):
        Rd = rot_from_axis_angle(pd)
        R = [[Rd[i, 0] * R[0][j] + Rd[i, 1] * R[1][j] + Rd[i, 2] * R[2][j]
              for j in range(3)] for i in range(3)]
        tvec = [Rd[i, 0] * tvec[0] + Rd[i, 1] * tvec[1]
                + Rd[i, 2] * tvec[2] for i in range(3)]
    dl = np.asarray(item.dlogf, dtype=np.float64)
    if dl[0] != 0.0:
        lfx = lfx + float(dl[0])
    if dl[1] != 0.0:
        lfy = lfy + float(dl[1])
    fx = lfx.exp()
    fy = lfy.exp()
    camera = TapedCamera(r=R, t=tvec, fx=fx, fy=fy)

    # z-parameterized rays: camera dirs ((u-cx)/fx, (v-cy)/fy, 1)
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    dx = (-lfx).exp() * tape.constant((uu - vs.cx).reshape(-1))
    dy = (-lfy).exp() * tape.constant((vv - vs.cy).reshape(-1))
    # world dirs w_i = sum_j R_ji * dcam_j and center C_i = -sum_j R_ji t_j
    w = [R[0][i] * dx + R[1][i] * dy + R[2][i] for i in range(3)]
    C = [-(R[0][i] * tvec[0] + R[1][i] * tvec[1] + R[2][i] * tvec[2])
         for i in range(3)]

    # untaped bracket search on current values
    center_np = np.array([float(c.value) for c in C])
    wdirs_np = np.stack([wi.value for wi in w], axis=1)
    height_np = _grid_height_fn(grid.value, params.extent)
    mcfg = MarchConfig(extent=params.extent, z_band=params.z_band,
                       steps=params.steps, quantum=params.quantum)
    res = march_brackets(height_np, center_np, wdirs_np, mcfg)
    valid = res.valid.reshape(H, W)

    # taped secant between the bracket constants
    x0, x1, y0, y1 = params.extent
    sx = (Wg - 1.0) / (x1 - x0)
    sy = (Hg - 1.0) / (y1 - y0)

    def f_at(t_const):
        tc = tape.constant(t_const)
        px = C[0] + tc * w[0]
        py = C[1] + tc * w[1]
        pz = C[2] + tc * w[2]
        qx = ad.clamp((px - x0) * sx, lo=0.0, hi=Wg - 1.0)
        qy = ad.clamp((py - y0) * sy, lo=0.0, hi=Hg - 1.0)
        return pz - ad.bilinear_sample(grid, qx, qy)

    f_a = f_at(res.t_a)
    f_b = f_at(res.t_b)
    ratio = ad.clamp(f_a / ad.clamp(f_a - f_b, lo=1e-30), lo=0.0, hi=1.0)
    depth = tape.constant(res.t_a) + tape.constant(res.t_b - res.t_a) * ratio

    kres = f"res:{vid:03d}"
    if kres in tensors:
        rq_x, rq_y = _res_queries(W, H, tensors[kres].shape)
        depth = depth + ad.bilinear_sample(tensors[kres], rq_x, rq_y)

    # camera-frame point map and central-difference normals
    Px = (depth * dx).reshape((H, W))
    Py = (depth * dy).reshape((H, W))
    Pz = depth.reshape((H, W))
    tx = [ad.cdiff_x(Px), ad.cdiff_x(Py), ad.cdiff_x(Pz)]
    ty = [ad.cdiff_y(Px), ad.cdiff_y(Py), ad.cdiff_y(Pz)]
    nx = tx[1] * ty[2] - tx[2] * ty[1]
    ny = tx[2] * ty[0] - tx[0] * ty[2]
    nz = tx[0] * ty[1] - tx[1] * ty[0]
    facing = (nx.value * dx.value.reshape(H, W)
              + ny.value * dy.value.reshape(H, W) + nz.value)
    flip = np.where(facing > 0, -1.0, np.where(facing < 0, 1.0, 0.0))
    nsq_val = nx.value ** 2 + ny.value ** 2 + nz.value ** 2
    normal_valid = normal_stencil_valid(valid) & (flip != 0.0) \
        & (nsq_val > 1e-24)
    fc = tape.constant(flip)
    nx, ny, nz = nx * fc, ny * fc, nz * fc
    norm = ad.clamp((nx * nx + ny * ny + nz * nz).sqrt(), lo=1e-12)
    nx, ny, nz = nx / norm, ny / norm, nz / norm
    depth2d = depth.reshape((H, W))

    t_aug = item.map_warp
    if t_aug is not None and t_aug.has_block:
        depth2d, (nx, ny, nz) = taped_block_warp(depth2d, (nx, ny, nz),
                                                 t_aug)
        normal_valid = block_warp_mask(normal_valid, t_aug) \
            & block_warp_mask(valid, t_aug)
        valid = block_warp_mask(valid, t_aug)

    # finite sentinels at invalid pixels
    m = valid.astype(np.float64)
    depth2d = depth2d * tape.constant(m) + tape.constant(1.0 - m)
    mn = normal_valid.astype(np.float64)
    mn_t = tape.constant(mn)
    nx = nx * mn_t
    ny = ny * mn_t
    nz = nz * mn_t - tape.constant(1.0 - mn)

    return PredView(view_id=vid, camera=camera, depth=depth2d,
                    normal=(nx, ny, nz), valid=valid,
                    normal_valid=normal_valid,
                    is_inserted=item.is_inserted)


def forward(tape: ad.Tape, tensors: dict, params: ModelParams,
            items) -> list:
    return [_forward_one(tape, tensors, params, it) for it in items]


def _camera_params_of(pred: PredView, vs: ViewStatic) -> CameraParams:
    R = np.array([[float(pred.camera.r[i][j].value) for j in range(3)]
                  for i in range(3)])
    t = np.array([float(ti.value) for ti in pred.camera.t])
    return CameraParams(
        pose=Pose(rot=R, t=t),
        intr=Intrinsics(fx=float(pred.camera.fx.value),
                        fy=float(pred.camera.fy.value),
                        cx=vs.cx, cy=vs.cy, width=vs.width,
                        height=vs.height))


def render_view(params: ModelParams, vid: int,
                item: BatchItem | None = None) -> ViewRecord:
    """Materialize one view as a plain numpy record (no gradients).

    Runs the exact taped forward on constants, so rendered records can
    never diverge from the differentiable path. Pass an item to render
    with augmentation conditioning applied.
    """
    if item is None:
        item = BatchItem(view_id=vid)
    elif item.view_id != vid:
        raise ValueError("item.view_id does not match vid")
    tape = ad.Tape()
    tensors = {k: tape.constant(v) for k, v in params.blocks.items()}
    pred = _forward_one(tape, tensors, params, item)
    vs = params.view_static[vid]
    normal = np.stack([p.value for p in pred.normal], axis=-1)
    return ViewRecord(camera=_camera_params_of(pred, vs),
                      depth=pred.depth.value.copy(), normal=normal,
                      valid=pred.valid.copy(),
                      normal_valid=pred.normal_valid.copy())


def predict_records(params: ModelParams, vids=None) -> dict:
    if vids is None:
        vids = params.view_ids
    return {vid: render_view(params, vid) for vid in vids}


def render_camera(params: ModelParams, camera: CameraParams) -> ViewRecord:
    """Plain numpy render of the height grid from an arbitrary camera.

    No per-view blocks are involved (and no residual), so this works for
    novel poses the model was never fitted to. Normals come from the depth
    difference stencil.
    """
    intr = camera.intr
    dirs = pixel_dirs(intr).reshape(-1, 3)
    wdirs = ray_dirs_world(camera.pose.rot, dirs)
    C = camera.pose.center()
    height_at = _grid_height_fn(params.blocks["grid"], params.extent)
    cfg = MarchConfig(extent=params.extent, z_band=params.z_band,
                      steps=params.steps, quantum=params.quantum)
    res = march_brackets(height_at, C, wdirs, cfg)
    t = secant_depth(height_at, C, wdirs, res)
    H, W = intr.height, intr.width
    depth = np.where(res.valid, t, 1.0).reshape(H, W)
    valid = res.valid.reshape(H, W)
    normal, nvalid = normals_from_depth(depth, intr, valid)
    return ViewRecord(camera=camera, depth=depth, normal=normal,
                      valid=valid, normal_valid=nvalid)


# ---------------------------------------------------------------------------
# prefit

@dataclass(frozen=True)
class PrefitConfig:
    iterations: int = 150
    learning_rate: float = 1e-2
    rot_noise_deg: float = 1.0
    trans_noise_frac: float = 0.01
    focal_noise: float = 0.005
    pin_weight: float = 0.1
    depth_weight: float = 1.0
    normal_weight: float = 0.2
    grid_shape: tuple = (64, 64)
    quantum: float = 0.125
    steps: int = 128
    z_margin: float = 0.5


@dataclass
class PrefitReport:
    loss_history: list
    depth_l1: dict               # vid -> masked mean |d_model - d_ref|
    init_cams: dict              # vid -> noisy CameraParams used as pin


def _median_grid(records, extent, grid_shape) -> np.ndarray:
    """Per-node median height of unprojected record points."""
    Hg, Wg = grid_shape
    x0, x1, y0, y1 = extent
    pts = np.concatenate([unproject_depth_to_points(r) for r in records])
    jx = np.clip(np.rint((pts[:, 0] - x0) / (x1 - x0) * (Wg - 1)),
                 0, Wg - 1).astype(np.int64)
    iy = np.clip(np.rint((pts[:, 1] - y0) / (y1 - y0) * (Hg - 1)),
                 0, Hg - 1).astype(np.int64)
    cid = iy * Wg + jx
    z = pts[:, 2]
    order = np.lexsort((z, cid))
    cs, zs = cid[order], z[order]
    uniq, starts = np.unique(cs, return_index=True)
    ends = np.r_[starts[1:], len(cs)]
    lengths = ends - starts
    lo = starts + (lengths - 1) // 2
    hi = starts + lengths // 2
    grid = np.full(Hg * Wg, np.median(z))
    grid[uniq] = 0.5 * (zs[lo] + zs[hi])
    return grid.reshape(Hg, Wg)


def _noisy_camera(cam: CameraParams, cfg: PrefitConfig,
                  rng: np.random.Generator) -> CameraParams:
    drv = rng.normal(size=3) * np.radians(cfg.rot_noise_deg) / np.sqrt(3)
    Rn = rot_from_axis_angle(drv) @ cam.pose.rot
    C = cam.pose.center()
    Cn = C + rng.normal(size=3) * cfg.trans_noise_frac \
        * np.linalg.norm(C) / np.sqrt(3)
    dlf = rng.normal(size=2) * cfg.focal_noise
    i = cam.intr
    return CameraParams(
        pose=Pose(rot=Rn, t=-Rn @ Cn),
        intr=Intrinsics(fx=i.fx * float(np.exp(dlf[0])),
                        fy=i.fy * float(np.exp(dlf[1])),
                        cx=i.cx, cy=i.cy, width=i.width, height=i.height))


def prefit(records, extent, cfg: PrefitConfig = PrefitConfig(),
           seed: int = 0):
    """Fit grid + cameras to captured records. Returns (params, report).

    Cameras start at noise-perturbed copies of the record cameras (the
    "calibration as measured") and are pinned there with a small d_cam
    weight to fix the gauge; depth is supervised with plain L1.
    """
    rng = np.random.default_rng([seed, 2])
    grid0 = _median_grid(records, extent, cfg.grid_shape)
    view_static = {}
    blocks = {"grid": grid0}
    init_cams = {}
    for vid, rec in enumerate(records):
        i = rec.camera.intr
        view_static[vid] = ViewStatic(cx=i.cx, cy=i.cy, width=i.width,
                                      height=i.height)
        cam0 = _noisy_camera(rec.camera, cfg, rng)
        init_cams[vid] = cam0
        kr, kt, kf = block_keys(vid)
        blocks[kr] = axis_angle_from_rot(cam0.pose.rot)
        blocks[kt] = cam0.pose.t.copy()
        blocks[kf] = np.log([cam0.intr.fx, cam0.intr.fy])
    params = ModelParams(
        extent=tuple(extent),
        z_band=(float(grid0.min()) - cfg.z_margin,
                float(grid0.max()) + cfg.z_margin),
        steps=cfg.steps, quantum=cfg.quantum,
        view_static=view_static, blocks=blocks)

    opt_cfg = AdamConfig(learning_rate=cfg.learning_rate, weight_decay=0.0)
    state = AdamState(params.blocks)
    items = [BatchItem(view_id=v) for v in params.view_ids]
    history = []
    for it in range(cfg.iterations):
        tape = ad.Tape()
        tensors = register(tape, params)
        preds = forward(tape, tensors, params, items)
        loss = None
        for pred in preds:
            rec = records[pred.view_id]
            both = pred.valid & rec.valid
            nmask = pred.normal_valid & rec.normal_mask
            term = cfg.pin_weight * d_cam(pred.camera,
                                          init_cams[pred.view_id]) \
                + cfg.depth_weight * d_depth(pred.depth, rec.depth, both,
                                             kind="l1") \
                + cfg.normal_weight * d_normal(pred.normal, rec.normal,
                                               nmask)
            loss = term if loss is None else loss + term
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise RuntimeError(f"non-finite prefit loss at iteration {it}")
        if it % 10 == 0 or it == cfg.iterations - 1:
            history.append(lv)
        grads = tape.backward(loss)
        adam_step(params.blocks, grads, state, opt_cfg)

    depth_l1 = {}
    for vid, rec in enumerate(records):
        out = render_view(params, vid)
        both = out.valid & rec.valid
        depth_l1[vid] = float(np.mean(np.abs(out.depth[both]
                                             - rec.depth[both])))
    return params, PrefitReport(loss_history=history, depth_l1=depth_l1,
                                init_cams=init_cams)


# ---------------------------------------------------------------------------
# inserted-view registration

@dataclass(frozen=True)
class RegistrationConfig:
    coarse_iters: int = 20
    fine_iters: int = 40
    learning_rate: float = 3e-3
    rot_probe_deg: float = 5.0
    trans_probe_frac: float = 0.10
    residual_shape: tuple = (16, 16)
    warn_threshold: float = 0.05


@dataclass
class RegistrationResult:
    view_id: int
    final_error: float           # masked depth L1 after residual
    pose_error: float            # masked depth L1 after pose fit alone
    chosen_start: int
    warn: bool


def _pose_starts(rvec0, t0, cfg: RegistrationConfig):
    starts = [(rvec0.copy(), t0.copy())]
    ang = np.radians(cfg.rot_probe_deg)
    for axis in range(3):
        for sgn in (1.0, -1.0):
            r = rvec0.copy()
            r[axis] += sgn * ang
            starts.append((r, t0.copy()))
    step = cfg.trans_probe_frac * np.linalg.norm(t0)
    for axis in range(3):
        for sgn in (1.0, -1.0):
            t = t0.copy()
            t[axis] += sgn * step
            starts.append((rvec0.copy(), t))
    return starts


def _fit_pose(params: ModelParams, observed: ViewRecord, vid: int,
              rvec, tvec, iters: int, lr: float):
    """Adam on rot/trans of one view against observed depth (L1).

    Returns (rvec, tvec, final_loss); inf when the view loses overlap.
    """
    kr, kt, kf = block_keys(vid)
    work = params.copy()
    work.blocks[kr] = rvec.copy()
    work.blocks[kt] = tvec.copy()
    sub = {kr: work.blocks[kr], kt: work.blocks[kt]}
    state = AdamState(sub)
    cfg = AdamConfig(learning_rate=lr, weight_decay=0.0)
    item = BatchItem(view_id=vid)
    last = np.inf
    for _ in range(iters):
        tape = ad.Tape()
        tensors = register(tape, work, trainable=(kr, kt))
        pred = _forward_one(tape, tensors, work, item)
        both = pred.valid & observed.valid
        if not both.any():
            return sub[kr], sub[kt], np.inf
        loss = d_depth(pred.depth, observed.depth, both, kind="l1")
        last = float(loss.value)
        if not np.isfinite(last):
            return sub[kr], sub[kt], np.inf
        grads = tape.backward(loss)
        adam_step(sub, grads, state, cfg)
    return sub[kr], sub[kt], last


def _masked_block_means(diff: np.ndarray, mask: np.ndarray, shape):
    rh, rw = shape
    H, W = diff.shape
    by, bx = H // rh, W // rw
    d = (diff * mask).reshape(rh, by, rw, bx).sum(axis=(1, 3))
    c = mask.reshape(rh, by, rw, bx).sum(axis=(1, 3))
    return np.where(c > 0, d / np.maximum(c, 1), 0.0)


def _unregister(params: ModelParams, vid: int) -> None:
    # roll back a partially added view so a failed registration leaves
    # params exactly as it found them
    params.view_static.pop(vid, None)
    for k in block_keys(vid) + (f"res:{vid:03d}",):
        params.blocks.pop(k, None)


def register_inserted_view(params: ModelParams, observed: ViewRecord,
                           vid: int,
                           cfg: RegistrationConfig = RegistrationConfig()
                           ) -> RegistrationResult:
    """Add camera + residual blocks for a new view, fitting its pose to
    the observed depth. Mutates params by ADDING blocks only; existing
    blocks and the grid are never touched.
    """
    kr, kt, kf = block_keys(vid)
    for k in (kr, kt, kf, f"res:{vid:03d}"):
        if k in params.blocks:
            raise ValueError(f"view {vid} already registered ({k} exists)")
    i = observed.camera.intr
    params.view_static[vid] = ViewStatic(cx=i.cx, cy=i.cy, width=i.width,
                                         height=i.height)
    params.blocks[kf] = np.log([i.fx, i.fy])

    rvec0 = axis_angle_from_rot(observed.camera.pose.rot)
    t0 = observed.camera.pose.t.copy()
    coarse = []
    for rv, tv in _pose_starts(rvec0, t0, cfg):
        coarse.append(_fit_pose(params, observed, vid, rv, tv,
                                cfg.coarse_iters, cfg.learning_rate))
    losses = [c[2] for c in coarse]
    best = int(np.argmin(losses))
    if not np.isfinite(losses[best]):
        _unregister(params, vid)
        raise ValueError(f"registration failed: view {vid} shares no "
                         "valid overlap with the model from any start")
    rv, tv, _ = coarse[best]
    params.blocks[kr] = rv
    params.blocks[kt] = tv
    rv, tv, pose_err = _fit_pose(params, observed, vid, rv, tv,
                                 cfg.fine_iters, cfg.learning_rate)
    if not np.isfinite(pose_err):
        _unregister(params, vid)
        raise ValueError(f"registration failed: view {vid} lost overlap "
                         "during the fine pose fit")
    params.blocks[kr] = rv
    params.blocks[kt] = tv

    fit = render_view(params, vid)
    both = fit.valid & observed.valid
    res = _masked_block_means(observed.depth - fit.depth, both,
                              cfg.residual_shape)
    params.blocks[f"res:{vid:03d}"] = res
    final = render_view(params, vid)
    both = final.valid & observed.valid
    err = float(np.mean(np.abs(final.depth[both] - observed.depth[both])))
    return RegistrationResult(view_id=vid, final_error=err,
                              pose_error=float(pose_err),
                              chosen_start=best,
                              warn=err > cfg.warn_threshold)


# ---------------------------------------------------------------------------
# checkpoint io

def save_params(params: ModelParams, path) -> None:
    """Byte-deterministic binary checkpoint."""
    header = {
        "extent": list(params.extent),
        "z_band": list(params.z_band),
        "steps": int(params.steps),
        "quantum": float(params.quantum),
        "views": {str(v): {"cx": s.cx, "cy": s.cy, "width": s.width,
                           "height": s.height}
                  for v, s in params.view_static.items()},
        "blocks": [{"key": k, "shape": list(params.blocks[k].shape)}
                   for k in sorted(params.blocks)],
    }
    hb = json.dumps(header, sort_keys=True,
                    separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for k in sorted(params.blocks):
            f.write(np.ascontiguousarray(params.blocks[k],
                                         dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blocks = {}
        for spec in header["blocks"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            blocks[spec["key"]] = np.frombuffer(
                buf, dtype="<f8").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise ValueError("trailing bytes after checkpoint payload")
    view_static = {int(v): ViewStatic(cx=s["cx"], cy=s["cy"],
                                      width=int(s["width"]),
                                      height=int(s["height"]))
                   for v, s in header["views"].items()}
    return ModelParams(extent=tuple(header["extent"]),
                       z_band=tuple(header["z_band"]),
                       steps=int(header["steps"]),
                       quantum=float(header["quantum"]),
                       view_static=view_static, blocks=blocks)
