"""Fixed-step ray marching over a heightfield, shared by the ground-truth
renderer and the reconstructor.

Rays are parameterized by camera-frame z: a pixel's world ray is
p(t) = C + t * w with w = R^T (dx, dy, 1), so the march parameter t IS the
depth value the maps store. Per-pixel [near, far] comes from clipping the
ray against the field's xy extent and a conservative z band, then gets
quantized INWARD onto a fixed lattice (step q). The quantization makes the
sample positions locally constant under small camera perturbations, which
keeps the rendered depth a smooth function of the parameters (the
finite-difference gradient checks rely on this). The z-band margin must
exceed q so inward trimming cannot drop a surface crossing.

The sign-change search runs in float32 (it only picks bracket indices);
the secant refinement through the bracket is done by the caller at full
precision (taped, for the reconstructor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MarchConfig", "MarchResult", "ray_dirs_world", "march_brackets",
           "secant_depth"]


@dataclass(frozen=True)
class MarchConfig:
    extent: tuple  # (x0, x1, y0, y1)
    z_band: tuple  # (z_lo, z_hi) conservative surface band
    steps: int = 128
    quantum: float = 0.125
    t_eps: float = 1e-3
    t_far: float = 50.0


@dataclass
class MarchResult:
    t_a: np.ndarray      # (N,) bracket start (depth units)
    t_b: np.ndarray      # (N,) bracket end
    valid: np.ndarray    # (N,) bool: a crossing was bracketed
    f_a: np.ndarray      # (N,) float32 field value at t_a (diagnostic)
    f_b: np.ndarray


def ray_dirs_world(rot: np.ndarray, dirs_cam: np.ndarray) -> np.ndarray:
    """R^T applied to (..., 3) camera dirs."""
    return dirs_cam @ rot


def _slab(a, b, lo, hi):
    """t-interval with lo <= a + t b <= hi, elementwise."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - a) / b
        t1 = (hi - a) / b
    swap = b < 0
    lo_t = np.where(swap, t1, t0)
    hi_t = np.where(swap, t0, t1)
    degenerate = np.abs(b) < 1e-12
    inside = (a >= lo) & (a <= hi)
    lo_t = np.where(degenerate, np.where(inside, -np.inf, np.inf), lo_t)
    hi_t = np.where(degenerate, np.where(inside, np.inf, -np.inf), hi_t)
    return lo_t, hi_t


def march_brackets(height_at, center: np.ndarray, wdirs: np.ndarray,
                   cfg: MarchConfig) -> MarchResult:
    """Bracket the first surface crossing along each ray.

    height_at(x, y) -> surface height, vectorized over flat arrays (called
    with float32 inputs). wdirs is (N, 3). Crossings are detected as the
    first sign change of f(t) = ray_z(t) - height(ray_xy(t)) from positive
    to non-positive; rays that start non-positive (camera at or below the
    surface) or never cross are invalid.
    """
    x0, x1, y0, y1 = cfg.extent
    z_lo, z_hi = cfg.z_band
    N = wdirs.shape[0]
    tn = np.full(N, cfg.t_eps)
    tf = np.full(N, cfg.t_far)
    for a, b, lo, hi in ((center[0], wdirs[:, 0], x0, x1),
                         (center[1], wdirs[:, 1], y0, y1),
                         (center[2], wdirs[:, 2], z_lo, z_hi)):
        s_lo, s_hi = _slab(a, b, lo, hi)
        tn = np.maximum(tn, s_lo)
        tf = np.minimum(tf, s_hi)
    q = cfg.quantum
    tn = np.ceil(tn / q) * q
    tf = np.floor(tf / q) * q
    ok = tf - tn >= 2.0 * q

    tn32 = tn.astype(np.float32)
    tf32 = tf.astype(np.float32)
    # degenerate rays still march (ok filters them); give them a unit span
    span = np.where(ok, tf32 - tn32, 1.0).astype(np.float32)
    steps = np.linspace(0.0, 1.0, cfg.steps, dtype=np.float32)
    t = tn32[:, None] + span[:, None] * steps[None, :]
    w32 = wdirs.astype(np.float32)
    c32 = center.astype(np.float32)
    px = c32[0] + t * w32[:, 0:1]
    py = c32[1] + t * w32[:, 1:2]
    pz = c32[2] + t * w32[:, 2:3]
    h = height_at(px.reshape(-1), py.reshape(-1)).reshape(t.shape)
    f = pz - h
    pos = f > 0
    cross = pos[:, :-1] & ~pos[:, 1:]
    has = cross.any(axis=1)
    k = np.argmax(cross, axis=1)
    idx = np.arange(N)
    t_a = t[idx, k].astype(np.float64)
    t_b = t[idx, k + 1].astype(np.float64)
    valid = ok & has & pos[:, 0]
    return MarchResult(t_a=t_a, t_b=t_b, valid=valid,
                       f_a=f[idx, k], f_b=f[idx, k + 1])


def secant_depth(height_at, center: np.ndarray, wdirs: np.ndarray,
                 res: MarchResult) -> np.ndarray:
    """One float64 secant step through each bracket; returns depth (N,).

    Exact for fields linear along the ray (planes). Invalid rays get a
    depth from the dummy bracket; callers mask them.
    """
    def f_at(tt):
        px = center[0] + tt * wdirs[:, 0]
        py = center[1] + tt * wdirs[:, 1]
        pz = center[2] + tt * wdirs[:, 2]
        return pz - height_at(px, py)

    fa = f_at(res.t_a)
    fb = f_at(res.t_b)
    den = fa - fb
    den = np.where(np.abs(den) < 1e-30, 1e-30, den)
    t_star = res.t_a + (res.t_b - res.t_a) * fa / den
    return np.clip(t_star, res.t_a, res.t_b)
