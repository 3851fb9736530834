"""Cameras, view records, and the distances the losses are built from.

Conventions used across the package:

- poses are world-to-camera: x_cam = R @ x_world + t; camera center is
  C = -R^T t
- depth maps store camera-frame z (not euclidean ray length)
- pixel centers sit at integer coordinates: pixel (row i, col j) is at
  image point (u, v) = (j, i); this makes image coordinates and grid
  sampling indices the same thing
- normals live in the camera frame, unit length, oriented to face the
  camera (n . ray < 0)

The distance functions (d_cam, d_depth, d_normal) are written against the
autodiff Tensors so they can sit inside losses; plain numpy inputs are
lifted onto a scratch tape, so the same code path serves evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

__all__ = [
    "Intrinsics",
    "Pose",
    "CameraParams",
    "ViewRecord",
    "TapedCamera",
    "rot_from_axis_angle",
    "axis_angle_from_rot",
    "rot_geodesic",
    "look_at",
    "pixel_dirs",
    "project",
    "unproject_depth_to_points",
    "normals_from_depth",
    "normal_stencil_valid",
    "taped_rotation",
    "d_cam",
    "d_depth",
    "d_normal",
]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""
    rot: np.ndarray  # (3, 3)
    t: np.ndarray    # (3,)

    def center(self) -> np.ndarray:
        return -self.rot.T @ self.t


@dataclass(frozen=True)
class CameraParams:
    pose: Pose
    intr: Intrinsics


@dataclass
class ViewRecord:
    """One observed or rendered view: camera + maps.

    valid marks pixels whose depth is meaningful. Invalid pixels hold the
    finite sentinels depth=1.0, normal=(0,0,-1) so masked reductions never
    meet NaN. normal_valid, when set by a producer that knows better
    (analytic normals, difference-stencil renders), marks pixels whose
    normal is meaningful; when None it is derived conservatively via
    normal_stencil_valid.
    """
    camera: CameraParams
    depth: np.ndarray           # (H, W) float64
    normal: np.ndarray          # (H, W, 3) float64
    valid: np.ndarray           # (H, W) bool
    normal_valid: np.ndarray | None = None

    @property
    def normal_mask(self) -> np.ndarray:
        if self.normal_valid is not None:
            return self.normal_valid
        return normal_stencil_valid(self.valid)


# ---------------------------------------------------------------------------
# rotations

def rot_from_axis_angle(rvec: np.ndarray) -> np.ndarray:
    """Rodrigues. Mirrors the taped construction exactly (same series)."""
    p = np.asarray(rvec, dtype=np.float64)
    s = float(p @ p)
    if s < 1e-8:
        a = 1.0 - s / 6.0 + s * s / 120.0
        b = 0.5 - s / 24.0 + s * s / 720.0
    else:
        th = np.sqrt(s)
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / s
    K = np.array([[0.0, -p[2], p[1]],
                  [p[2], 0.0, -p[0]],
                  [-p[1], p[0], 0.0]])
    return np.eye(3) + a * K + b * (np.outer(p, p) - s * np.eye(3))


def axis_angle_from_rot(R: np.ndarray) -> np.ndarray:
    """Log map; returns a vector with norm in [0, pi]."""
    tr = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    th = float(np.arccos(tr))
    if th < 1e-8:
        return np.array([R[2, 1] - R[1, 2],
                         R[0, 2] - R[2, 0],
                         R[1, 0] - R[0, 1]]) * 0.5
    if th > np.pi - 1e-6:
        # near pi the skew part degenerates; recover axis from R + I
        M = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        # fix signs from off-diagonals using the largest component
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k:
                    axis[i] = M[i, k] / axis[k]
        n = np.linalg.norm(axis)
        axis = axis / n if n > 0 else np.array([1.0, 0.0, 0.0])
        return axis * th
    w = np.array([R[2, 1] - R[1, 2],
                  R[0, 2] - R[2, 0],
                  R[1, 0] - R[0, 1]]) / (2.0 * np.sin(th))
    return w * th


def rot_geodesic(R1: np.ndarray, R2: np.ndarray) -> float:
    """Angle of R1 R2^T, in radians.

    Computed as pi - 2 arccos(||R1 - R2||_F / (2 sqrt 2)), which equals
    arccos((trace(R1 R2^T) - 1) / 2) exactly but stays well-conditioned
    near 0 (identical rotations give exactly 0 instead of ~1e-8 noise).
    """
    fro = float(np.sqrt(np.sum((R1 - R2) ** 2)))
    x = min(fro / (2.0 * np.sqrt(2.0)), 1.0)
    return float(np.pi - 2.0 * np.arccos(x))


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose with +z forward, +x right, +y down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("look_at: view direction parallel to up")
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world coords
    return Pose(rot=R, t=-R @ eye)


# ---------------------------------------------------------------------------
# projection / unprojection / normals

def pixel_dirs(intr: Intrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions with z = 1."""
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d = np.empty((intr.height, intr.width, 3))
    d[..., 0] = (uu - intr.cx) / intr.fx
    d[..., 1] = (vv - intr.cy) / intr.fy
    d[..., 2] = 1.0
    return d


def project(camera: CameraParams, points_world: np.ndarray):
    """Project world points. Returns ((N,2) uv, (N,) camera z)."""
    P = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    pc = P @ camera.pose.rot.T + camera.pose.t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.intr.fx * pc[:, 0] / z + camera.intr.cx
        v = camera.intr.fy * pc[:, 1] / z + camera.intr.cy
    return np.stack([u, v], axis=1), z


def unproject_depth_to_points(record: ViewRecord) -> np.ndarray:
    """World points for the record's valid pixels, (M, 3)."""
    dirs = pixel_dirs(record.camera.intr)
    pc = dirs * record.depth[..., None]
    m = record.valid
    pc = pc[m].reshape(-1, 3)
    R, t = record.camera.pose.rot, record.camera.pose.t
    return (pc - t) @ R


def normal_stencil_valid(valid: np.ndarray) -> np.ndarray:
    """Pixels whose difference stencil touches only valid pixels."""
    v = valid
    H, W = v.shape
    if H < 2 or W < 2:
        return np.zeros_like(v)
    left = np.empty_like(v)
    left[:, 1:] = v[:, :-1]
    left[:, 0] = v[:, 0]
    right = np.empty_like(v)
    right[:, :-1] = v[:, 1:]
    right[:, -1] = v[:, -1]
    up = np.empty_like(v)
    up[1:, :] = v[:-1, :]
    up[0, :] = v[0, :]
    down = np.empty_like(v)
    down[:-1, :] = v[1:, :]
    down[-1, :] = v[-1, :]
    return v & left & right & up & down


def _cdiff_np(x: np.ndarray, axis: int) -> np.ndarray:
    out = np.empty_like(x)
    if axis == 1:
        out[:, 1:-1] = x[:, 2:] - x[:, :-2]
        out[:, 0] = x[:, 1] - x[:, 0]
        out[:, -1] = x[:, -1] - x[:, -2]
    else:
        out[1:-1, :] = x[2:, :] - x[:-2, :]
        out[0, :] = x[1, :] - x[0, :]
        out[-1, :] = x[-1, :] - x[-2, :]
    return out


def normals_from_depth(depth: np.ndarray, intr: Intrinsics,
                       valid: np.ndarray | None = None):
    """Camera-frame unit normals from a depth map.

    Tangents are central differences of the camera-frame point map
    (one-sided at borders); the normal is their cross product, flipped
    per-pixel to face the camera. Returns (normal (H,W,3), normal_valid).
    """
    H, W = depth.shape
    dirs = pixel_dirs(intr)
    P = dirs * depth[..., None]
    tx = np.stack([_cdiff_np(P[..., k], 1) for k in range(3)], axis=-1)
    ty = np.stack([_cdiff_np(P[..., k], 0) for k in range(3)], axis=-1)
    n = np.cross(tx, ty)
    facing = np.sum(n * dirs, axis=-1)
    sign = -np.sign(facing)
    n = n * sign[..., None]
    norm = np.linalg.norm(n, axis=-1)
    ok = (norm > 1e-12) & (sign != 0.0)
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-12)[..., None],
                 np.array([0.0, 0.0, -1.0]))
    if valid is None:
        valid = np.ones((H, W), dtype=bool)
    return n, normal_stencil_valid(valid) & ok


# ---------------------------------------------------------------------------
# taped camera + distances

@dataclass
class TapedCamera:
    """Camera quantities as taped scalars (rotation entries row-major)."""
    r: list          # 3x3 nested list of Tensor
    t: list          # 3 Tensors
    fx: Tensor
    fy: Tensor


def taped_rotation(rvec: Tensor) -> list:
    """3x3 rotation (nested Tensor list) from a taped axis-angle vector."""
    p0, p1, p2 = rvec[0], rvec[1], rvec[2]
    s = p0 * p0 + p1 * p1 + p2 * p2
    a = ad.rot_coeff_a(s)
    b = ad.rot_coeff_b(s)
    r00 = 1.0 + b * (p0 * p0 - s)
    r01 = a * (-p2) + b * (p0 * p1)
    r02 = a * p1 + b * (p0 * p2)
    r10 = a * p2 + b * (p0 * p1)
    r11 = 1.0 + b * (p1 * p1 - s)
    r12 = a * (-p0) + b * (p1 * p2)
    r20 = a * (-p1) + b * (p0 * p2)
    r21 = a * p0 + b * (p1 * p2)
    r22 = 1.0 + b * (p2 * p2 - s)
    return [[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]]


def _taped_camera_const(tape: Tape, cam: CameraParams) -> TapedCamera:
    r = [[tape.constant(cam.pose.rot[i, j]) for j in range(3)] for i in range(3)]
    t = [tape.constant(cam.pose.t[i]) for i in range(3)]
    return TapedCamera(r=r, t=t, fx=tape.constant(cam.intr.fx),
                       fy=tape.constant(cam.intr.fy))


def d_cam(cam1, cam2: CameraParams, w_rot: float = 1.0,
          w_trans: float = 1.0, w_focal: float = 0.1) -> Tensor:
    """Pose-and-intrinsics distance.

    w_rot * geodesic(R1, R2) + w_trans * ||t1 - t2|| + w_focal *
    (|dfx| + |dfy|) / (fx2 + fy2). cam1 may be a TapedCamera (inside a
    loss) or a CameraParams (lifted to a scratch tape); cam2 is the
    reference and always plain numpy.
    """
    if isinstance(cam1, CameraParams):
        cam1 = _taped_camera_const(Tape(), cam1)
    # geodesic via the Frobenius form (see rot_geodesic): equal to the
    # arccos-of-trace expression but exact at 0
    fro2 = None
    for i in range(3):
        for j in range(3):
            dij = cam1.r[i][j] - float(cam2.pose.rot[i, j])
            term = dij * dij
            fro2 = term if fro2 is None else fro2 + term
    x = ad.clamp(fro2.sqrt() * (1.0 / (2.0 * np.sqrt(2.0))), hi=1.0)
    geo = np.pi - ad.arccos(x) * 2.0
    d0 = cam1.t[0] - float(cam2.pose.t[0])
    d1 = cam1.t[1] - float(cam2.pose.t[1])
    d2 = cam1.t[2] - float(cam2.pose.t[2])
    trans = (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
    foc = ((cam1.fx - float(cam2.intr.fx)).abs()
           + (cam1.fy - float(cam2.intr.fy)).abs()) \
        / float(cam2.intr.fx + cam2.intr.fy)
    return geo * w_rot + trans * w_trans + foc * w_focal


def _lift_map(x, ref_tape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = ref_tape if ref_tape is not None else Tape()
    return t.constant(np.asarray(x, dtype=np.float64))


def d_depth(d1, d2: np.ndarray, valid: np.ndarray,
            kind: str = "scale_invariant") -> Tensor:
    """Masked depth distance between a prediction and a reference map.

    kind="l1": masked mean |d1 - d2|.
    kind="scale_invariant": masked mean |log d1 - log d2 - m| with m the
    masked median of the log ratio, treated as a constant by the adjoint.
    Depths are clamped to 1e-6 before the log as a domain guard. Raises on
    an empty mask.
    """
    d1 = _lift_map(d1)
    mask = np.asarray(valid, dtype=np.float64)
    if not np.any(mask > 0):
        raise ValueError("d_depth: empty validity mask")
    if kind == "l1":
        diff = (d1 - d1.tape.constant(d2)).abs()
        return ad.masked_mean(diff, mask)
    if kind != "scale_invariant":
        raise ValueError(f"unknown depth distance kind {kind!r}")
    ref = np.log(np.maximum(d2, 1e-6))
    lg = ad.clamp(d1, lo=1e-6).log()
    r_vals = lg.value - ref
    m = float(np.median(r_vals[valid.astype(bool)]))
    resid = (lg - d1.tape.constant(ref + m)).abs()
    return ad.masked_mean(resid, mask)


def d_normal(n1, n2: np.ndarray, valid: np.ndarray) -> Tensor:
    """Masked mean of (1 - <n1, n2>); 0 for identical unit normals.

    n1 is either an (H,W,3) numpy array or a 3-tuple of (H,W) Tensors.
    """
    mask = np.asarray(valid, dtype=np.float64)
    if not np.any(mask > 0):
        raise ValueError("d_normal: empty validity mask")
    if isinstance(n1, (tuple, list)):
        nx, ny, nz = n1
    else:
        t = Tape()
        nx = t.constant(n1[..., 0])
        ny = t.constant(n1[..., 1])
        nz = t.constant(n1[..., 2])
    tape = nx.tape
    cosn = (nx * tape.constant(n2[..., 0])
            + ny * tape.constant(n2[..., 1])
            + nz * tape.constant(n2[..., 2]))
    return ad.masked_mean(1.0 - cosn, mask)
