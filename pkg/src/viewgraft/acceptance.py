"""Executable acceptance checks for the whole pipeline.

Eight checks cover the stack end to end: finite-difference validation of
every differentiable loss path, exact update semantics of the adaptation
loop, a clean-insertion consistency run, preset orderings on the
misaligned benchmark, augmentation behavior, byte-level determinism of
artifacts, metric closed forms, and the serial wall-clock budget of the
ablation suite. Each check returns a CheckResult and run_acceptance
prints one PASS or FAIL line per check.

The heavyweight part (every preset on ten seeds of the benchmark config)
runs at most once per context and is shared by the ordering and runtime
checks, so `viewgraft check` stays within one suite's budget.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from time import perf_counter

import numpy as np

from . import autodiff as ad
from . import reconstructor as rc
from . import tta
from .augment import (MODES, AugConfig, block_weight_planes,
                      lift_to_conditioning, sample_aug, warp_record)
from .experiment import (SUITE_PRESETS, ablation_suite, adapt_and_evaluate,
                         config_from_dict, default_config, prepare_run,
                         run_experiment, summary_row)
from .geometry import axis_angle_from_rot, d_depth
from .metrics import geometric_errors, psnr, ssim
from .scenes import (MisalignmentSpec, SceneRecipe, build_scene,
                     orbit_camera, render_gt_view, sample_scene)

__all__ = ["AcceptanceContext", "CheckResult", "run_acceptance",
           "check_gradients", "check_update_semantics",
           "check_clean_insertion", "check_benchmark_orderings",
           "check_augmentation", "check_determinism",
           "check_metric_selftests", "check_suite_runtime"]

EXTENT = (-1.0, 1.0, -1.0, 1.0)


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str


class AcceptanceContext:
    """Shared state for one acceptance pass.

    The benchmark suite (all presets, ten seeds) is expensive, so it is
    built lazily and cached; the ordering check and the runtime check
    both read from the same rows.
    """

    def __init__(self, out_dir=None, jobs: int = 1):
        if out_dir is None:
            out_dir = tempfile.mkdtemp(prefix="viewgraft-acceptance-")
        self.out_dir = Path(out_dir)
        self.jobs = jobs
        self._suite = None

    def suite(self):
        if self._suite is None:
            cfg = default_config()
            presets = SUITE_PRESETS + ("no_anchor",)
            self._suite = ablation_suite(cfg, seeds=range(10),
                                         out_dir=self.out_dir / "suite",
                                         presets=presets, jobs=self.jobs)
        return self._suite


def _truth_params(scene, cams, grid_n=12, steps=48):
    """Grid sampled from the analytic field with exact cameras; the
    cheapest configuration whose renders are trustworthy."""
    gx = np.linspace(EXTENT[0], EXTENT[1], grid_n)
    gy = np.linspace(EXTENT[2], EXTENT[3], grid_n)
    GX, GY = np.meshgrid(gx, gy)
    blocks = {"grid": scene.height(GX, GY)}
    vstat = {}
    for vid, cam in enumerate(cams):
        i = cam.intr
        vstat[vid] = rc.ViewStatic(cx=i.cx, cy=i.cy, width=i.width,
                                   height=i.height)
        kr, kt, kf = rc.block_keys(vid)
        blocks[kr] = axis_angle_from_rot(cam.pose.rot)
        blocks[kt] = cam.pose.t.copy()
        blocks[kf] = np.log([i.fx, i.fy])
    return rc.ModelParams(extent=EXTENT, z_band=scene.z_band, steps=steps,
                          quantum=0.125, view_static=vstat, blocks=blocks)


def check_gradients(ctx=None) -> CheckResult:
    """Reverse-mode gradients of the step losses vs central differences.

    Each configuration draws a fresh scene, camera and perturbed model,
    then checks one loss path: the plain pair loss, the three augmented
    anchor variants (conditioning lift plus reference warp, exactly as
    the step loop composes them), and the hard supervision form with its
    l1 depth term. Configurations without enough mask overlap do not
    count toward the total.
    """
    t0 = perf_counter()
    rng = np.random.default_rng(2024)
    target = 100
    done = 0
    draws = 0
    worst = 0.0
    failed = []
    variants = ("plain", "global", "block", "global_block", "hard")
    while done < target:
        draws += 1
        if draws > 6 * target:
            break
        recipe = SceneRecipe(n_bumps=int(rng.integers(1, 4)),
                             n_blocks=int(rng.integers(0, 3)))
        scene = build_scene(sample_scene(recipe,
                                         seed=int(rng.integers(1 << 31))))
        cam = orbit_camera(float(rng.uniform(1.7, 2.3)),
                           float(rng.uniform(1.6, 2.4)),
                           float(rng.uniform(0.0, 360.0)),
                           (-0.25, 0.1, 0.0), 38.0, 12, 12)
        ref = render_gt_view(scene, cam, steps=96)
        # a 38 degree fov orbit camera fills about half the 12x12 frame
        if int(ref.valid.sum()) < 60:
            continue
        params = _truth_params(scene, [cam], grid_n=10, steps=48)
        b = params.blocks
        b["grid"] = b["grid"] + rng.normal(0.0, 0.01, b["grid"].shape)
        b["rot:000"] = b["rot:000"] + rng.normal(0.0, 0.004, 3)
        b["trans:000"] = b["trans:000"] + rng.normal(0.0, 0.004, 3)
        b["logf:000"] = b["logf:000"] + rng.normal(0.0, 0.004, 2)
        b["res:000"] = rng.normal(0.0, 0.004, (4, 4))

        kind = variants[done % len(variants)]
        item = rc.BatchItem(view_id=0)
        target_rec = ref
        wd, wn, dk = 0.2, 0.2, "scale_invariant"
        if kind in ("global", "block", "global_block"):
            t = sample_aug(AugConfig(modes=(kind,)), 12, 12, rng)
            pose_delta, dlogf = lift_to_conditioning(t, ref.camera.intr)
            item = rc.BatchItem(view_id=0, pose_delta=pose_delta,
                                dlogf=dlogf, map_warp=t)
            target_rec = warp_record(ref, t)
        elif kind == "hard":
            wd, wn, dk = 1.0, 1.0, "l1"

        base = rc.render_view(params, 0, item)
        both = base.valid & target_rec.valid
        nm = base.normal_mask & target_rec.normal_mask
        if int(both.sum()) < 35 or int(nm.sum()) < 20:
            continue

        def build(v, item=item, tr=target_rec, wd=wd, wn=wn, dk=dk,
                  params=params):
            tape = next(iter(v.values())).tape
            pred = rc._forward_one(tape, dict(v), params, item)
            return tta._pair_loss(pred, tr, wd, wn, depth_kind=dk)

        rep = ad.finite_diff_check(
            build, {k: v.copy() for k, v in params.blocks.items()},
            max_entries=4, rng=np.random.default_rng(1000 + done))
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failed.append((done, kind, rep.max_rel_err))
        done += 1
    elapsed = perf_counter() - t0
    passed = done >= target and not failed and elapsed < 60.0
    detail = f"{done} configs, max rel err {worst:.2e}, {elapsed:.1f}s"
    if failed:
        detail += f", {len(failed)} configs over tolerance"
    return CheckResult(1, "gradient correctness", passed, detail)


def check_update_semantics(ctx=None) -> CheckResult:
    """Closed forms and gating of the adaptation update machinery."""
    problems = []

    def toy(blocks):
        return rc.ModelParams(extent=EXTENT, z_band=(0.0, 1.0), steps=8,
                              quantum=0.125, view_static={}, blocks=blocks)

    # EMA closed forms, one step then a second with a different momentum
    a0 = np.array([1.0, -2.0])
    s_a = np.array([3.0, 2.0])
    teacher = toy({"a": a0.copy(), "b": np.zeros((2, 2))})
    student = toy({"a": s_a.copy(), "b": np.ones((2, 2))})
    tta.ema_update(teacher, student, 0.9)
    want_a = 0.9 * a0 + 0.1 * s_a
    want_b = 0.1 * np.ones((2, 2))
    if (np.max(np.abs(teacher.blocks["a"] - want_a)) > 1e-15
            or np.max(np.abs(teacher.blocks["b"] - want_b)) > 1e-15):
        problems.append("ema one-step closed form")
    tta.ema_update(teacher, student, 0.999)
    want_a = 0.999 * want_a + 0.001 * s_a
    if np.max(np.abs(teacher.blocks["a"] - want_a)) > 1e-12:
        problems.append("ema two-step closed form")

    # restore at the rate extremes is an exact copy or an exact no-op
    rng = np.random.default_rng(2)
    cur = {"g": rng.normal(size=257), "r": rng.normal(size=(5, 3))}
    ref = {"g": rng.normal(size=257), "r": rng.normal(size=(5, 3))}
    work = {k: v.copy() for k, v in cur.items()}
    n1 = tta.stochastic_restore(work, ref, 1.0, np.random.default_rng(3))
    if n1 != 272 or not all(np.array_equal(work[k], ref[k]) for k in ref):
        problems.append("restore rate 1 not exact")
    work = {k: v.copy() for k, v in cur.items()}
    n0 = tta.stochastic_restore(work, ref, 0.0, np.random.default_rng(3))
    if n0 != 0 or not all(np.array_equal(work[k], cur[k]) for k in cur):
        problems.append("restore rate 0 not a no-op")

    # Bernoulli count at the production rate, 6 sigma band
    n_par = 1_000_000
    big = {"g": np.zeros(n_par)}
    big0 = {"g": np.ones(n_par)}
    cnt = tta.stochastic_restore(big, big0, 1e-3, np.random.default_rng(4))
    sigma = float(np.sqrt(n_par * 1e-3 * (1.0 - 1e-3)))
    if abs(cnt - n_par * 1e-3) > 6.0 * sigma:
        problems.append(f"restore count {cnt} outside 6 sigma")

    # insertion frequency over 10k batch draws
    cfg = tta.TTAConfig()
    brng = np.random.default_rng(7)
    hits = sum(tta.sample_batch(brng, 6, cfg, 8, 8)[1]
               for _ in range(10_000))
    freq = hits / 10_000.0
    if not 0.48 <= freq <= 0.52:
        problems.append(f"insertion frequency {freq:.4f}")

    # anchor loss is exactly zero at the frozen teacher with no aug
    scene = build_scene(sample_scene(SceneRecipe(n_bumps=2, n_blocks=1),
                                     seed=6))
    cams = [orbit_camera(2.0, 2.0, az, (-0.25, 0.1, 0.0), 38.0, 24, 24)
            for az in (30.0, 100.0, 170.0, 240.0, 310.0)]
    params = _truth_params(scene, cams, grid_n=12, steps=48)
    captured = [0, 1, 2, 3]
    refs = tta.precompute_anchor_refs(params, captured)
    preds = rc.predict_records(params, captured)
    a_val = tta.anchor_loss(preds, refs)
    if not abs(a_val) <= 1e-9:
        problems.append(f"anchor loss {a_val!r} at the anchor teacher")

    # the distillation term is identically zero off insertion steps
    obs = rc.render_view(params, 4)
    run_cfg = replace(tta.TTAConfig(), steps=30, subset_sizes=(2, 3),
                      restore_rate=0.0, seed=5)
    _, traces = tta.run_tta(params.copy(), captured, 4, run_cfg,
                            inserted_obs=obs)
    if any(tr.loss_gen != 0.0 for tr in traces if not tr.inserted):
        problems.append("gen loss nonzero off insertion")
    if not any(tr.inserted for tr in traces):
        problems.append("no insertion event in 30 draws at p 0.5")
    run_cfg0 = replace(run_cfg, p_insert=0.0, steps=10)
    _, traces0 = tta.run_tta(params.copy(), captured, 4, run_cfg0,
                             inserted_obs=obs)
    if any(tr.inserted or tr.loss_gen != 0.0 for tr in traces0):
        problems.append("gen loss nonzero at p 0")

    detail = "; ".join(problems) if problems else \
        f"ema/restore/sampling exact, insertion freq {freq:.4f}"
    return CheckResult(2, "update semantics", not problems, detail)


def check_clean_insertion(ctx=None) -> CheckResult:
    """Full method on a perfectly aligned inserted view, ten seeds.

    Adaptation must neither disturb the captured fit (final error within
    1.25x of the prefit error) nor push the inserted view away from its
    own truth (within 10% of the post-registration value).
    """
    cfg = replace(default_config(), misalignment=MisalignmentSpec())
    ok = 0
    walls = []
    lines = []
    for seed in range(10):
        t0 = perf_counter()
        setup = prepare_run(cfg, seed)
        art = adapt_and_evaluate(setup, cfg, "full")
        walls.append(perf_counter() - t0)
        row = summary_row(art)
        pres_ok = row["pres_si_final"] <= 1.25 * row["pres_si_initial"]
        ins_ok = row["ins_truth_si_final"] <= 1.10 * row["ins_truth_si_initial"]
        ok += int(pres_ok and ins_ok)
        if not (pres_ok and ins_ok):
            lines.append(f"seed {seed}: pres {row['pres_si_final']:.3e}"
                         f"/{row['pres_si_initial']:.3e}"
                         f" ins {row['ins_truth_si_final']:.3e}"
                         f"/{row['ins_truth_si_initial']:.3e}")
    passed = ok >= 9 and max(walls) < 120.0
    detail = f"{ok}/10 seeds within bounds, max {max(walls):.1f}s per seed"
    if lines:
        detail += "; " + "; ".join(lines)
    return CheckResult(3, "clean insertion consistency", passed, detail)


def check_benchmark_orderings(ctx) -> CheckResult:
    """Preset orderings on the misaligned benchmark, per-seed majorities.

    (a) full degrades captured views less than hard supervision;
    (b) full beats the frozen baseline on the inserted-view residual;
    (c) dropping the anchor term degrades captured views more than full;
    (d) always inserting trades captured fidelity for a lower residual.
    """
    rows, _ = ctx.suite()
    by = {(r["preset"], r["seed"]): r for r in rows}
    seeds = sorted({r["seed"] for r in rows})
    ca = cb = cc = cd = 0
    for s in seeds:
        full = by[("full", s)]
        hard = by[("hard_supervision", s)]
        base = by[("baseline", s)]
        noa = by[("no_anchor", s)]
        p05 = by[("selfdist_p05", s)]
        p10 = by[("selfdist_p10", s)]
        ca += full["pres_si_degradation"] < hard["pres_si_degradation"]
        cb += full["ins_obs_si_final"] < base["ins_obs_si_final"]
        cc += noa["pres_si_degradation"] > full["pres_si_degradation"]
        cd += (p10["ins_obs_si_final"] < p05["ins_obs_si_final"]
               and p10["pres_si_degradation"] > p05["pres_si_degradation"])
    n = len(seeds)
    passed = ca >= 8 and cb >= 8 and cc >= 8 and cd >= 7
    detail = (f"(a) {ca}/{n} need 8, (b) {cb}/{n} need 8, "
              f"(c) {cc}/{n} need 8, (d) {cd}/{n} need 7")
    return CheckResult(4, "benchmark orderings", passed, detail)


def check_augmentation(ctx=None) -> CheckResult:
    """Identity exactness, feather partition of unity, mode frequencies."""
    problems = []
    rng = np.random.default_rng(11)
    scene = build_scene(sample_scene(SceneRecipe(n_bumps=2, n_blocks=1),
                                     seed=8))
    cam = orbit_camera(2.0, 2.0, 120.0, (-0.25, 0.1, 0.0), 38.0, 24, 24)
    rec = render_gt_view(scene, cam, steps=128)
    t = sample_aug(AugConfig(modes=("identity",)), 24, 24, rng)
    w = warp_record(rec, t)
    same = (np.array_equal(w.depth, rec.depth)
            and np.array_equal(w.normal, rec.normal)
            and np.array_equal(w.valid, rec.valid)
            and np.array_equal(w.normal_mask, rec.normal_mask)
            and np.array_equal(w.camera.pose.rot, rec.camera.pose.rot)
            and np.array_equal(w.camera.pose.t, rec.camera.pose.t)
            and w.camera.intr.fx == rec.camera.intr.fx
            and w.camera.intr.fy == rec.camera.intr.fy)
    if not same:
        problems.append("identity mode is not a bit-exact no-op")

    worst = 0.0
    for _ in range(50):
        wpx = int(rng.integers(13, 65))
        hpx = int(rng.integers(13, 65))
        t = sample_aug(AugConfig(modes=("block", "global_block")),
                       wpx, hpx, rng)
        planes = block_weight_planes(t)
        worst = max(worst,
                    float(np.max(np.abs(planes.sum(axis=(0, 1)) - 1.0))))
    if worst > 1e-6:
        problems.append(f"partition of unity off by {worst:.2e}")

    counts = {m: 0 for m in MODES}
    mrng = np.random.default_rng(12)
    n_draw = 10_000
    for _ in range(n_draw):
        counts[sample_aug(AugConfig(), 16, 16, mrng).mode] += 1
    off = max(abs(c / n_draw - 1.0 / len(MODES)) for c in counts.values())
    if off > 0.02:
        problems.append(f"mode frequency off by {off:.3f}")

    detail = "; ".join(problems) if problems else (
        f"identity exact, unity err {worst:.1e}, freq err {off:.4f}")
    return CheckResult(5, "augmentation behavior", not problems, detail)


def check_determinism(ctx) -> CheckResult:
    """Byte-identical report and trace across reruns and worker counts."""
    raw = {"rig": {"width": 32, "im_height": 32},
           "prefit": {"iterations": 30, "grid_shape": [24, 24], "steps": 64},
           "gt_steps": 96, "tta": {"steps": 40}, "seeds": [0, 1],
           "variant": "full"}
    cfg = config_from_dict(raw)
    base = ctx.out_dir / "determinism"
    problems = []

    run_experiment(cfg, 0, "full", base / "rerun_a")
    run_experiment(cfg, 0, "full", base / "rerun_b")
    rel = Path("full") / "seed000"
    for name in ("report.json", "trace.jsonl"):
        pa = (base / "rerun_a" / rel / name).read_bytes()
        pb = (base / "rerun_b" / rel / name).read_bytes()
        if pa != pb:
            problems.append(f"rerun differs in {name}")

    presets = ("full", "hard_supervision")
    ablation_suite(cfg, seeds=[0, 1], out_dir=base / "jobs1",
                   presets=presets, jobs=1)
    ablation_suite(cfg, seeds=[0, 1], out_dir=base / "jobs2",
                   presets=presets, jobs=2)
    for p in presets:
        for s in (0, 1):
            for name in ("report.json", "trace.jsonl"):
                pa = base / "jobs1" / p / f"seed{s:03d}" / name
                pb = base / "jobs2" / p / f"seed{s:03d}" / name
                if pa.read_bytes() != pb.read_bytes():
                    problems.append(f"jobs differ in {p}/seed{s:03d}/{name}")
    if ((base / "jobs1" / "table.csv").read_bytes()
            != (base / "jobs2" / "table.csv").read_bytes()):
        problems.append("jobs differ in table.csv")

    detail = "; ".join(problems) if problems else \
        "rerun and 1-vs-2 worker artifacts byte-identical"
    return CheckResult(6, "artifact determinism", not problems, detail)


def check_metric_selftests(ctx=None) -> CheckResult:
    """PSNR/SSIM closed forms and depth-error scale invariance."""
    problems = []
    rng = np.random.default_rng(9)
    a = rng.random((16, 16))
    v = np.ones((16, 16), bool)
    if psnr(a, a, v) != 99.0:
        problems.append("psnr of identical images")
    if abs(psnr(a, a + 1.0, v)) > 1e-12:
        problems.append("psnr at unit mse")
    if abs(psnr(a, a + 0.1, v) - 20.0) > 1e-9:
        problems.append("psnr at mse 0.01")
    if abs(ssim(a, a, v) - 1.0) > 1e-9:
        problems.append("ssim self-similarity")
    x = np.full((16, 16), 0.25)
    y = np.full((16, 16), 0.75)
    c1 = 1e-4
    want = (2.0 * 0.25 * 0.75 + c1) / (0.25 ** 2 + 0.75 ** 2 + c1)
    if abs(ssim(x, y, v) - want) > 1e-12:
        problems.append("ssim constant-image closed form")

    scene = build_scene(sample_scene(SceneRecipe(n_bumps=2, n_blocks=1),
                                     seed=13))
    cam = orbit_camera(2.0, 2.0, 200.0, (-0.25, 0.1, 0.0), 38.0, 24, 24)
    rec = render_gt_view(scene, cam, steps=128)
    doubled = replace(rec, depth=rec.depth * 2.0)
    si = geometric_errors(doubled, rec)["si_depth"]
    if not si <= 1e-9:
        problems.append(f"si depth under doubling: {si:.2e}")
    direct = abs(float(d_depth(2.0 * rec.depth, rec.depth,
                               rec.valid).value))
    if not direct <= 1e-9:
        problems.append(f"d_depth under doubling: {direct:.2e}")

    detail = "; ".join(problems) if problems else \
        "closed forms exact, scale invariance below 1e-9"
    return CheckResult(7, "metric self-tests", not problems, detail)


def check_suite_runtime(ctx) -> CheckResult:
    """Serial wall clock of the standard suite, shared setups included."""
    rows, setup_seconds = ctx.suite()
    setups = sum(setup_seconds.values())
    adapt = sum(r["wall_seconds"] for r in rows
                if r["preset"] in SUITE_PRESETS)
    minutes = (setups + adapt) / 60.0
    passed = minutes < 90.0
    detail = (f"{minutes:.1f} min serial ({setups / 60.0:.1f} setup + "
              f"{adapt / 60.0:.1f} adaptation), budget 90")
    return CheckResult(8, "suite runtime", passed, detail)


CHECKS = (
    (1, check_gradients),
    (2, check_update_semantics),
    (3, check_clean_insertion),
    (4, check_benchmark_orderings),
    (5, check_augmentation),
    (6, check_determinism),
    (7, check_metric_selftests),
    (8, check_suite_runtime),
)


def run_acceptance(criteria=None, out_dir=None, jobs: int = 1) -> int:
    """Run the selected checks in order; print one line per check.

    Returns 0 when every selected check passes, 1 otherwise.
    """
    known = {n for n, _ in CHECKS}
    wanted = known if not criteria else set(criteria)
    unknown = wanted - known
    if unknown:
        raise ValueError(f"unknown criteria: {sorted(unknown)}")
    ctx = AcceptanceContext(out_dir=out_dir, jobs=jobs)
    all_ok = True
    for num, fn in CHECKS:
        if num not in wanted:
            continue
        res = fn(ctx)
        status = "PASS" if res.passed else "FAIL"
        print(f"criterion {num} ({res.name}): {status} [{res.detail}]",
              flush=True)
        all_ok = all_ok and res.passed
    return 0 if all_ok else 1
