"""Geometry-perturbation augmentation for rendered views.

A transform has a global part (rotation / translation / log-scale about the
image center) and a blockwise part (3x3 grid of per-cell affines fitted to
a jittered corner lattice, blended with feathered partition-of-unity
weights). Four modes: identity, global, block, global_block.

The two halves are applied differently on the two sides of a consistency
loss:

- the model renders the global part geometrically: lift_to_conditioning
  turns it into a camera-frame rotation delta (roll from image rotation,
  pan / tilt from translation over focal length) plus a log-focal shift;
  the block part then warps the rendered maps in image space
  (taped_block_warp).
- reference records are warped entirely in image space: warp_maps applies
  the global affine followed by the block warp (two inverse-mapped bilinear
  resampling passes), and warp_record additionally composes the lifted
  camera delta into the stored camera and rotates normal vectors into the
  delta'd frame.

For small amplitudes the two routes agree to first order; the residual is
the consistency noise the augmentation deliberately trains against.
Identity mode bypasses everything and is bit-exact.

Validity is strict: a warped pixel stays valid only if its query is in
bounds and every bilinear corner with nonzero weight reads a valid source
pixel, for every cell with non-negligible blend weight. Resampled values
therefore never mix invalid-pixel sentinels.

sample_aug always consumes the same number of random draws regardless of
the drawn mode, so runs that share a seed see identical randomness streams
even when presets differ in augmentation settings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import (CameraParams, Intrinsics, Pose, ViewRecord,
                       rot_from_axis_angle)

__all__ = ["AugConfig", "AugTransform", "sample_aug", "lift_to_conditioning",
           "warp_maps", "warp_record", "warp_mask", "block_warp_mask",
           "taped_block_warp", "block_weight_planes", "MODES"]

MODES = ("identity", "global", "block", "global_block")


@dataclass(frozen=True)
class AugConfig:
    max_rot_deg: float = 2.0
    max_trans_frac: float = 0.03     # of image width / height
    max_log_scale: float = 0.05
    max_corner_frac: float = 0.10    # of cell size
    feather_px: float = 4.0
    modes: tuple = MODES


@dataclass
class AugTransform:
    mode: str
    width: int
    height: int
    affine: np.ndarray               # (2,3) forward global map p' = Mp + b
    block_affines: np.ndarray        # (3,3,2,3) forward per-cell maps
    rot_rad: float                   # global image rotation about center
    trans_px: np.ndarray             # (2,) global pixel translation
    log_scale: float                 # global isotropic log-scale
    feather_px: float = 4.0

    @property
    def is_identity(self) -> bool:
        return self.mode == "identity"

    @property
    def has_global(self) -> bool:
        return self.mode in ("global", "global_block")

    @property
    def has_block(self) -> bool:
        return self.mode in ("block", "global_block")


def _identity_affine() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _fit_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares 2x3 affine mapping src (4,2) onto dst (4,2)."""
    X = np.column_stack([src, np.ones(len(src))])
    A = np.linalg.solve(X.T @ X, X.T @ dst)  # (3,2) columns for (x', y')
    return A.T


def sample_aug(cfg: AugConfig, width: int, height: int,
               rng: np.random.Generator) -> AugTransform:
    """Draw one transform. Consumes exactly 37 uniforms in every mode."""
    u = rng.random(37)
    mode = cfg.modes[min(int(u[0] * len(cfg.modes)), len(cfg.modes) - 1)]
    ang = float(np.radians((2 * u[1] - 1) * cfg.max_rot_deg))
    tx = (2 * u[2] - 1) * cfg.max_trans_frac * width
    ty = (2 * u[3] - 1) * cfg.max_trans_frac * height
    ls = float((2 * u[4] - 1) * cfg.max_log_scale)
    jit = (2 * u[5:37] - 1).reshape(4, 4, 2)

    has_global = mode in ("global", "global_block")
    affine = _identity_affine()
    if has_global:
        c = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        M = np.exp(ls) * np.array([[np.cos(ang), -np.sin(ang)],
                                   [np.sin(ang), np.cos(ang)]])
        affine = np.column_stack([M, c - M @ c + np.array([tx, ty])])

    block = np.broadcast_to(_identity_affine(), (3, 3, 2, 3)).copy()
    if mode in ("block", "global_block"):
        xs = np.linspace(0.0, width - 1.0, 4)
        ys = np.linspace(0.0, height - 1.0, 4)
        cell = np.array([(width - 1.0) / 3.0, (height - 1.0) / 3.0])
        lat = np.stack(np.meshgrid(xs, ys), axis=-1)          # (4,4,2) x,y
        lat_j = lat + jit * cell * cfg.max_corner_frac
        for i in range(3):
            for j in range(3):
                src = np.array([lat[i, j], lat[i, j + 1],
                                lat[i + 1, j], lat[i + 1, j + 1]])
                dst = np.array([lat_j[i, j], lat_j[i, j + 1],
                                lat_j[i + 1, j], lat_j[i + 1, j + 1]])
                block[i, j] = _fit_affine(src, dst)

    return AugTransform(
        mode=mode, width=width, height=height, affine=affine,
        block_affines=block, rot_rad=ang if has_global else 0.0,
        trans_px=np.array([tx, ty]) if has_global else np.zeros(2),
        log_scale=ls if has_global else 0.0, feather_px=cfg.feather_px)


def lift_to_conditioning(t: AugTransform, intr: Intrinsics):
    """Camera-space half of a transform: (axis-angle delta, dlogf).

    Image rotation lifts to camera roll, pixel translation to pan / tilt
    through the small-angle pinhole map (du ~ fx*ry, dv ~ -fy*rx), and
    log-scale to a log-focal shift. Image translation never becomes camera
    translation. Exact for roll and scale, first order for pan / tilt.
    """
    if not t.has_global:
        return np.zeros(3), np.zeros(2)
    rx = -t.trans_px[1] / intr.fy
    ry = t.trans_px[0] / intr.fx
    return np.array([rx, ry, t.rot_rad]), np.array([t.log_scale,
                                                    t.log_scale])


# ---------------------------------------------------------------------------
# warp fields, shared by the numpy and taped resampling paths

def _invert_affine(A: np.ndarray) -> np.ndarray:
    Mi = np.linalg.inv(A[:, :2])
    return np.column_stack([Mi, -Mi @ A[:, 2]])


def _apply_affine(A: np.ndarray, qx, qy):
    return (A[0, 0] * qx + A[0, 1] * qy + A[0, 2],
            A[1, 0] * qx + A[1, 1] * qy + A[1, 2])


def _sstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _band_weights(length: int, feather: float) -> np.ndarray:
    """(3, length) partition-of-unity band weights along one axis."""
    x = np.arange(length, dtype=np.float64)
    b1 = (length - 1) / 3.0
    b2 = 2.0 * (length - 1) / 3.0
    f = max(feather, 1e-6)
    r1 = _sstep((x - (b1 - f / 2.0)) / f)
    r2 = _sstep((x - (b2 - f / 2.0)) / f)
    # (1-r1) + r1*(1-r2) + r1*r2 == 1 exactly
    return np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2])


def block_weight_planes(t: AugTransform) -> np.ndarray:
    """(3, 3, H, W) cell blending weights; sums to 1 at every pixel."""
    wx = _band_weights(t.width, t.feather_px)
    wy = _band_weights(t.height, t.feather_px)
    return wy[:, None, :, None] * wx[None, :, None, :]


def _pixel_grid(width: int, height: int):
    return np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64))


def _sample_bilinear_np(img: np.ndarray, qx, qy, fill: float):
    H, W = img.shape
    inb = (qx >= 0) & (qx <= W - 1) & (qy >= 0) & (qy <= H - 1)
    x = np.clip(qx, 0, W - 1.0)
    y = np.clip(qy, 0, H - 1.0)
    x0 = np.minimum(x.astype(np.int64), W - 2)
    y0 = np.minimum(y.astype(np.int64), H - 2)
    fx = x - x0
    fy = y - y0
    v = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x0 + 1])
         + fy * ((1 - fx) * img[y0 + 1, x0] + fx * img[y0 + 1, x0 + 1]))
    return np.where(inb, v, fill)


def _sample_valid_strict(mask: np.ndarray, qx, qy) -> np.ndarray:
    """True where the query is in bounds and every bilinear corner with
    nonzero weight is valid, so resampled values never mix sentinels."""
    H, W = mask.shape
    inb = (qx >= 0) & (qx <= W - 1) & (qy >= 0) & (qy <= H - 1)
    v = _sample_bilinear_np(mask.astype(np.float64), qx, qy, 0.0)
    return inb & (v > 1.0 - 1e-9)


def _global_pass_np(planes, valid, t, fills):
    uu, vv = _pixel_grid(t.width, t.height)
    qx, qy = _apply_affine(_invert_affine(t.affine), uu, vv)
    out = [_sample_bilinear_np(p, qx, qy, f) for p, f in zip(planes, fills)]
    return out, _sample_valid_strict(valid, qx, qy)


def _block_pass_np(planes, valid, t, fills):
    uu, vv = _pixel_grid(t.width, t.height)
    W9 = block_weight_planes(t)
    out = [np.zeros_like(p) for p in planes]
    ok = np.ones_like(valid)
    for i in range(3):
        for j in range(3):
            w = W9[i, j]
            qx, qy = _apply_affine(_invert_affine(t.block_affines[i, j]),
                                   uu, vv)
            for k, (p, f) in enumerate(zip(planes, fills)):
                out[k] += w * _sample_bilinear_np(p, qx, qy, f)
            active = w > 1e-6
            ok &= _sample_valid_strict(valid, qx, qy) | ~active
    return out, ok


def warp_maps(depth: np.ndarray, normal: np.ndarray, valid: np.ndarray,
              t: AugTransform):
    """Image-space application of the full transform (global, then block).

    Returns (depth, normal, valid). Normals are re-normalized after
    interpolation; pixels where interpolation degenerates go invalid, and
    invalid pixels carry the usual sentinels (depth 1, normal (0,0,-1)).
    Identity transforms return the input arrays untouched.
    """
    if t.is_identity:
        return depth, normal, valid
    planes = [depth, normal[..., 0], normal[..., 1], normal[..., 2]]
    fills = [1.0, 0.0, 0.0, -1.0]
    ok = valid
    if t.has_global:
        planes, ok = _global_pass_np(planes, ok, t, fills)
    if t.has_block:
        planes, ok = _block_pass_np(planes, ok, t, fills)
    d = planes[0]
    n = np.stack(planes[1:], axis=-1)
    norm = np.linalg.norm(n, axis=-1)
    ok = ok & (norm > 1e-6)
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-6)[..., None],
                 np.array([0.0, 0.0, -1.0]))
    d = np.where(ok, d, 1.0)
    return d, n, ok


def block_warp_mask(mask: np.ndarray, t: AugTransform) -> np.ndarray:
    """Strict warp of a boolean mask under the block part only."""
    if not t.has_block:
        return mask
    uu, vv = _pixel_grid(t.width, t.height)
    W9 = block_weight_planes(t)
    ok = np.ones_like(mask)
    for i in range(3):
        for j in range(3):
            qx, qy = _apply_affine(
                _invert_affine(t.block_affines[i, j]), uu, vv)
            active = W9[i, j] > 1e-6
            ok &= _sample_valid_strict(mask, qx, qy) | ~active
    return ok


def warp_mask(mask: np.ndarray, t: AugTransform) -> np.ndarray:
    """Strict image-space warp of a boolean mask (global, then block)."""
    if t.is_identity:
        return mask
    if t.has_global:
        uu, vv = _pixel_grid(t.width, t.height)
        qx, qy = _apply_affine(_invert_affine(t.affine), uu, vv)
        mask = _sample_valid_strict(mask, qx, qy)
    return block_warp_mask(mask, t)


def warp_record(rec: ViewRecord, t: AugTransform) -> ViewRecord:
    """Reference-side warp: camera composed with the lifted delta, maps
    warped in image space, normal vectors rotated into the delta'd frame.
    """
    if t.is_identity:
        return rec
    rot_delta, dlogf = lift_to_conditioning(t, rec.camera.intr)
    Rd = rot_from_axis_angle(rot_delta)
    pose = Pose(rot=Rd @ rec.camera.pose.rot, t=Rd @ rec.camera.pose.t)
    intr = rec.camera.intr
    cam = CameraParams(pose=pose, intr=Intrinsics(
        fx=intr.fx * float(np.exp(dlogf[0])),
        fy=intr.fy * float(np.exp(dlogf[1])),
        cx=intr.cx, cy=intr.cy, width=intr.width, height=intr.height))
    normal = rec.normal
    if t.has_global:
        # camera-frame vectors transform as v' = Rd v under the new pose
        normal = normal @ Rd.T
    d, n, ok = warp_maps(rec.depth, normal, rec.valid, t)
    nok = warp_mask(rec.normal_mask, t) & ok
    return ViewRecord(camera=cam, depth=d, normal=n, valid=ok,
                      normal_valid=nok)


def taped_block_warp(depth, normal_planes, t: AugTransform):
    """Block-part warp of taped (H, W) planes inside the model's forward.

    depth is a Tensor, normal_planes a tuple (nx, ny, nz) of Tensors.
    Returns (depth, (nx, ny, nz)) with normals re-normalized. Validity is
    the caller's job via block_warp_mask. The blending weights and query
    fields are constants; gradients flow through the resampled plane
    values only. Queries are clamped into range so the out-of-bounds fill
    path never fires; out-of-bounds pixels must be killed through the
    warped validity mask instead.
    """
    if not t.has_block:
        return depth, normal_planes
    H, W = t.height, t.width
    uu, vv = _pixel_grid(W, H)
    W9 = block_weight_planes(t)
    planes = [depth, *normal_planes]
    acc = [None] * 4
    for i in range(3):
        for j in range(3):
            qx, qy = _apply_affine(_invert_affine(t.block_affines[i, j]),
                                   uu, vv)
            qxf = np.clip(qx, 0.0, W - 1.0).reshape(-1)
            qyf = np.clip(qy, 0.0, H - 1.0).reshape(-1)
            wf = W9[i, j].reshape(-1)
            for k, p in enumerate(planes):
                term = ad.bilinear_sample(p, qxf, qyf) * wf
                acc[k] = term if acc[k] is None else acc[k] + term
    d = acc[0].reshape((H, W))
    nx = acc[1].reshape((H, W))
    ny = acc[2].reshape((H, W))
    nz = acc[3].reshape((H, W))
    norm = ad.clamp((nx * nx + ny * ny + nz * nz).sqrt(), lo=1e-6)
    return d, (nx / norm, ny / norm, nz / norm)
