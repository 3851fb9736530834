"""Evaluation metrics and the per-run report.

The representation carries no photometry, so image-space fidelity (PSNR,
SSIM) is computed on depth maps normalized to [0, 1] by the captured set's
ground-truth depth range and reported as depth-PSNR / depth-SSIM. Geometric
errors reuse the same distances the adaptation loop trains against, plus
degree conversions for readability. evaluate() bundles three questions into
one report: did the captured views survive (preservation), did the inserted
view land (insertion, judged against both the observed record and the
misalignment-free truth), and does the surface stay stable from nearby
novel poses (coverage and depth total variation as a ghosting proxy).
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import ViewRecord, d_depth, rot_geodesic
from .reconstructor import (ModelParams, predict_records, render_camera,
                            render_view)

__all__ = ["psnr", "ssim", "geometric_errors", "depth_total_variation",
           "EvalReport", "evaluate"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a, b, valid, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB over the valid pixels.

    Zero masked MSE is reported as the 99 dB cap (and the cap also bounds
    near-zero MSE, so the value is always finite).
    """
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mask = np.asarray(valid, dtype=bool)
    if not mask.any():
        raise ValueError("psnr: empty validity mask")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = float(np.mean(diff[mask] ** 2))
    if mse == 0.0:
        return 99.0
    return min(10.0 * math.log10(peak * peak / mse), 99.0)


def _ssim_kernel() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, valid, peak: float = 1.0) -> float:
    """Mean SSIM over all 11x11 windows fully inside the valid mask.

    Gaussian window (sigma 1.5), stabilizers C1=(0.01*peak)^2 and
    C2=(0.03*peak)^2. Windows touching any invalid pixel are skipped
    entirely rather than reweighted, so masked-out corruption can never
    leak into the score.
    """
    if peak <= 0:
        raise ValueError("ssim: peak must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim: shape mismatch")
    h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(
            f"ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x"
            f"{SSIM_WINDOW} window")
    mask = np.asarray(valid, dtype=bool)
    shape = (SSIM_WINDOW, SSIM_WINDOW)
    keep = sliding_window_view(mask, shape).all(axis=(2, 3))
    if not keep.any():
        raise ValueError("ssim: no window lies fully inside the valid mask")
    wa = sliding_window_view(a, shape)[keep]
    wb = sliding_window_view(b, shape)[keep]
    k = _ssim_kernel()
    mu_a = np.einsum("nij,ij->n", wa, k)
    mu_b = np.einsum("nij,ij->n", wb, k)
    var_a = np.einsum("nij,ij->n", wa * wa, k) - mu_a * mu_a
    var_b = np.einsum("nij,ij->n", wb * wb, k) - mu_b * mu_b
    cov = np.einsum("nij,ij->n", wa * wb, k) - mu_a * mu_b
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def geometric_errors(pred: ViewRecord, ref: ViewRecord) -> dict:
    """Bundle of geometric distances between two records of one view.

    Depth errors are evaluated on the joint validity mask, normal error on
    the joint normal mask (mean angle in degrees), and the pose terms
    compare the records' cameras directly.
    """
    if pred.depth.shape != ref.depth.shape:
        raise ValueError("geometric_errors: resolution mismatch")
    joint = pred.valid & ref.valid
    si = float(d_depth(pred.depth, ref.depth, joint,
                       kind="scale_invariant").value)
    l1 = float(d_depth(pred.depth, ref.depth, joint, kind="l1").value)
    njoint = pred.normal_mask & ref.normal_mask
    if not njoint.any():
        raise ValueError("geometric_errors: empty normal mask")
    cos = np.clip(np.sum(pred.normal * ref.normal, axis=-1), -1.0, 1.0)
    normal_deg = float(np.degrees(np.mean(np.arccos(cos[njoint]))))
    pose_deg = math.degrees(rot_geodesic(pred.camera.pose.rot,
                                         ref.camera.pose.rot))
    trans = float(np.linalg.norm(pred.camera.pose.t - ref.camera.pose.t))
    return {"si_depth": si, "l1_depth": l1,
            "normal_mean_angle_deg": normal_deg,
            "pose_geodesic_deg": pose_deg, "trans_error": trans}


def depth_total_variation(depth: np.ndarray, valid: np.ndarray) -> float:
    """Mean |depth step| over adjacent pixel pairs that are both valid.

    Spikes indicate unstable or doubled surfaces; 0.0 when no valid pair
    exists (an empty render is flat, not unstable).
    """
    vx = valid[:, 1:] & valid[:, :-1]
    vy = valid[1:, :] & valid[:-1, :]
    dx = np.abs(depth[:, 1:] - depth[:, :-1])[vx]
    dy = np.abs(depth[1:, :] - depth[:-1, :])[vy]
    total = dx.size + dy.size
    if total == 0:
        return 0.0
    return float((dx.sum() + dy.sum()) / total)


@dataclass(frozen=True)
class EvalReport:
    """Per-run evaluation bundle; every value is a finite float."""
    preservation: tuple       # per captured view: dict of metrics
    insertion: dict           # {"vs_observed": {...}, "vs_truth": {...}}
    novel_pose: tuple         # per sweep camera: coverage and depth TV
    aggregates: dict          # means over views / cameras

    def to_dict(self) -> dict:
        return {"preservation": [dict(p) for p in self.preservation],
                "insertion": {k: dict(v) for k, v in self.insertion.items()},
                "novel_pose": [dict(p) for p in self.novel_pose],
                "aggregates": dict(self.aggregates)}


def _captured_depth_range(captured_gt) -> tuple:
    vals = np.concatenate([gt.depth[gt.valid] for gt in captured_gt])
    if vals.size == 0:
        raise ValueError("evaluate: captured ground truth has no valid depth")
    lo = float(vals.min())
    hi = float(vals.max())
    if hi <= lo:
        raise ValueError("evaluate: degenerate captured depth range")
    return lo, hi


def _insertion_errors(pred: ViewRecord, ref: ViewRecord) -> dict:
    geo = geometric_errors(pred, ref)
    return {"si_depth": geo["si_depth"],
            "normal_deg": geo["normal_mean_angle_deg"]}


def evaluate(theta_star: ModelParams, captured_gt, inserted,
             sweep=()) -> EvalReport:
    """Evaluate an adapted model against ground truth.

    captured_gt is the list of ground-truth captured records (view id =
    position); inserted is the (observed, truth) record pair for the view
    registered right after the captured block. Preservation renders every
    captured view and scores depth PSNR/SSIM (depth normalized to [0, 1]
    by the captured ground-truth range), scale-invariant depth error,
    normal angle, and pose drift. Insertion scores the inserted view's
    render against both records of the pair. Each sweep camera is rendered
    from the height grid alone (no per-view blocks exist for novel poses)
    and reported as valid coverage plus depth total variation. Pure and
    deterministic; novel-pose aggregates are 0.0 when sweep is empty.
    """
    observed, truth = inserted
    n = len(captured_gt)
    lo, hi = _captured_depth_range(captured_gt)
    scale = hi - lo
    preds = predict_records(theta_star, list(range(n)))
    preservation = []
    for i, gt in enumerate(captured_gt):
        pred = preds[i]
        joint = pred.valid & gt.valid
        geo = geometric_errors(pred, gt)
        pn = (pred.depth - lo) / scale
        gn = (gt.depth - lo) / scale
        preservation.append({
            "view_id": float(i),
            "depth_psnr": psnr(pn, gn, joint, peak=1.0),
            "depth_ssim": ssim(pn, gn, joint, peak=1.0),
            "si_depth": geo["si_depth"],
            "normal_deg": geo["normal_mean_angle_deg"],
            "pose_deg": geo["pose_geodesic_deg"],
        })
    pred_g = render_view(theta_star, n)
    insertion = {"vs_observed": _insertion_errors(pred_g, observed),
                 "vs_truth": _insertion_errors(pred_g, truth)}
    novel = []
    for cam in sweep:
        r = render_camera(theta_star, cam)
        novel.append({"coverage": float(r.valid.mean()),
                      "depth_tv": depth_total_variation(r.depth, r.valid)})

    def pmean(key):
        return float(np.mean([p[key] for p in preservation]))

    aggregates = {
        "preservation_depth_psnr": pmean("depth_psnr"),
        "preservation_depth_ssim": pmean("depth_ssim"),
        "preservation_si_depth": pmean("si_depth"),
        "preservation_normal_deg": pmean("normal_deg"),
        "preservation_pose_deg": pmean("pose_deg"),
        "insertion_vs_observed_si_depth": insertion["vs_observed"]["si_depth"],
        "insertion_vs_observed_normal_deg":
            insertion["vs_observed"]["normal_deg"],
        "insertion_vs_truth_si_depth": insertion["vs_truth"]["si_depth"],
        "insertion_vs_truth_normal_deg": insertion["vs_truth"]["normal_deg"],
        "novel_coverage": (float(np.mean([p["coverage"] for p in novel]))
                           if novel else 0.0),
        "novel_depth_tv": (float(np.mean([p["depth_tv"] for p in novel]))
                           if novel else 0.0),
    }
    return EvalReport(preservation=tuple(preservation), insertion=insertion,
                      novel_pose=tuple(novel), aggregates=aggregates)
