"""Config-driven experiment runner and ablation suite.

One run is a pure function of (config, seed, preset): synthesize a scene
and its captured views, prefit the reconstructor, register the misaligned
inserted view, adapt with the preset's settings, and evaluate before and
after. The ablation presets each change one ingredient of the adaptation
recipe so the comparison table isolates every component's contribution.

Artifacts are byte-reproducible: reports are canonical sorted JSON, traces
are one JSON object per line, images are 16-bit big-endian PGM with the
value-to-gray mapping documented in a sidecar, and wall-clock timing never
enters a file. Suites may run seeds in parallel; each run owns its output
directory exclusively, so the byte content is independent of scheduling.
"""

import json
import multiprocessing
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from time import perf_counter

import numpy as np

from .augment import AugConfig
from .metrics import EvalReport, evaluate
from .reconstructor import (ModelParams, PrefitConfig, predict_records,
                            prefit, register_inserted_view, render_view,
                            save_params)
from .scenes import (CaptureRig, MisalignmentSpec, SceneRecipe, build_scene,
                     make_capture_set, make_inserted_view, make_sweep_cameras,
                     orbit_camera, sample_scene)
from .tta import TTAConfig, check_config, run_tta

__all__ = ["InsertedSpec", "ExperimentConfig", "PRESETS", "SUITE_PRESETS",
           "StageError", "RunSetup", "RunArtifact", "default_config",
           "config_from_dict", "config_to_dict", "load_config",
           "resolve_preset", "prepare_run", "adapt_and_evaluate",
           "run_experiment", "ablation_suite", "write_outputs",
           "write_table", "write_pgm", "summary_row"]


# Each preset changes one ingredient relative to its predecessor: no
# adaptation at all, anchor distillation alone, + subset sampling and
# augmentation, + inserted-view self-distillation at p=0.5 and p=1.0,
# + stochastic restoration (the full method), and the naive alternative
# that fits the observed inserted maps directly. no_anchor is kept out of
# the comparison suite; it exists to measure what anchoring buys.
PRESETS = {
    "baseline": {"steps": 0},
    "anchor_only": {"p_insert": 0.0, "restore_rate": 0.0,
                    "subset_full": True, "identity_aug": True},
    "subset_aug": {"p_insert": 0.0, "restore_rate": 0.0},
    "selfdist_p05": {"p_insert": 0.5, "restore_rate": 0.0},
    "selfdist_p10": {"p_insert": 1.0, "restore_rate": 0.0},
    "full": {},
    "hard_supervision": {"inserted_supervision": "hard", "lambda_gen": 1.0,
                         "p_insert": 1.0, "restore_rate": 0.0,
                         "identity_aug": True},
    "no_anchor": {"lambda_anchor": 0.0},
}

SUITE_PRESETS = ("baseline", "anchor_only", "subset_aug", "selfdist_p05",
                 "selfdist_p10", "full", "hard_supervision")


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage and seed that produced it."""

    def __init__(self, stage: str, seed: int, cause: Exception):
        super().__init__(f"stage {stage!r} failed for seed {seed}: {cause}")
        self.stage = stage
        self.seed = seed


@dataclass(frozen=True)
class InsertedSpec:
    """Placement of the inserted view on the capture orbit. None fields
    inherit the rig's value; resolution matches the rig always."""
    azimuth_deg: float = 215.0
    target: tuple | None = None
    radius: float | None = None
    height: float | None = None
    fov_deg: float | None = None


def _default_misalignment() -> MisalignmentSpec:
    # the fixed misaligned benchmark: pose jitter, low-frequency depth
    # warp, and one hallucinated content blob
    return MisalignmentSpec(rot_jitter_deg=2.0, trans_jitter_frac=0.02,
                            depth_warp_amp=0.05, blob_amp=0.15,
                            blob_radius_frac=0.15)


def _default_prefit() -> PrefitConfig:
    return PrefitConfig(iterations=120, grid_shape=(48, 48), steps=96)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneRecipe = field(default_factory=SceneRecipe)
    rig: CaptureRig = field(default_factory=CaptureRig)
    inserted: InsertedSpec = field(default_factory=InsertedSpec)
    misalignment: MisalignmentSpec = field(
        default_factory=_default_misalignment)
    prefit: PrefitConfig = field(default_factory=_default_prefit)
    tta: TTAConfig = field(default_factory=lambda: TTAConfig(aug=AugConfig()))
    variant: str = "full"
    seeds: tuple = tuple(range(10))
    output_dir: str = "runs"
    gt_steps: int = 128


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


# section name -> (dataclass, fields that are not configurable there)
_SECTIONS = {
    "scene": (SceneRecipe, ()),
    "rig": (CaptureRig, ()),
    "inserted": (InsertedSpec, ()),
    "misalignment": (MisalignmentSpec, ("seed",)),  # seed is the run seed
    "prefit": (PrefitConfig, ()),
    "tta": (TTAConfig, ("aug", "seed")),            # aug has its own section
    "aug": (AugConfig, ()),
}
_TOP_KEYS = set(_SECTIONS) | {"variant", "seeds", "output_dir", "gt_steps"}


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _coerce(name: str, key: str, cur, new):
    """Type-check one override against the default it replaces."""
    new = _tuplify(new)
    if cur is None:
        return new
    bad = ValueError(f"config {name}.{key}: expected "
                     f"{type(cur).__name__}, got {new!r}")
    if isinstance(cur, bool):
        if not isinstance(new, bool):
            raise bad
        return new
    if isinstance(cur, int):
        if isinstance(new, bool) or not isinstance(new, int):
            raise bad
        return new
    if isinstance(cur, float):
        if isinstance(new, bool) or not isinstance(new, (int, float)):
            raise bad
        return float(new)
    if isinstance(cur, str):
        if not isinstance(new, str):
            raise bad
        return new
    if isinstance(cur, tuple):
        if not isinstance(new, tuple):
            raise bad
        return new
    return new


def _apply_section(base, name: str, data: dict):
    cls, hidden = _SECTIONS[name]
    allowed = {f.name for f in fields(cls)} - set(hidden)
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(
            f"unknown config key {name}.{sorted(unknown)[0]} "
            f"(allowed: {sorted(allowed)})")
    return replace(base, **{k: _coerce(name, k, getattr(base, k), v)
                            for k, v in data.items()})


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from parsed JSON with strict schema validation.

    Every section is optional and overlays the defaults; unknown keys at
    any level are errors, since a silently ignored hyperparameter typo
    would invalidate an ablation.
    """
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ValueError(f"unknown config key {sorted(unknown)[0]} "
                         f"(allowed: {sorted(_TOP_KEYS)})")
    cfg = default_config()
    sections = {}
    for name in _SECTIONS:
        if name in ("tta", "aug"):
            continue
        base = getattr(cfg, name)
        sections[name] = _apply_section(base, name, raw.get(name, {}))
    tta = _apply_section(cfg.tta, "tta", raw.get("tta", {}))
    aug = _apply_section(cfg.tta.aug, "aug", raw.get("aug", {}))
    tta = replace(tta, aug=aug)
    variant = raw.get("variant", cfg.variant)
    if variant not in PRESETS:
        raise ValueError(f"unknown preset {variant!r} "
                         f"(known: {sorted(PRESETS)})")
    seeds = _tuplify(raw.get("seeds", list(cfg.seeds)))
    if not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ValueError("seeds must be non-negative integers")
    gt_steps = raw.get("gt_steps", cfg.gt_steps)
    if not (isinstance(gt_steps, int) and gt_steps > 0):
        raise ValueError("gt_steps must be a positive integer")
    return ExperimentConfig(scene=sections["scene"], rig=sections["rig"],
                            inserted=sections["inserted"],
                            misalignment=sections["misalignment"],
                            prefit=sections["prefit"], tta=tta,
                            variant=variant, seeds=seeds,
                            output_dir=str(raw.get("output_dir",
                                                   cfg.output_dir)),
                            gt_steps=gt_steps)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Canonical JSON-ready snapshot; config_from_dict inverts it."""
    mis = asdict(cfg.misalignment)
    mis.pop("seed")
    tta = asdict(cfg.tta)
    tta.pop("aug")
    tta.pop("seed")
    return {"scene": asdict(cfg.scene), "rig": asdict(cfg.rig),
            "inserted": asdict(cfg.inserted), "misalignment": mis,
            "prefit": asdict(cfg.prefit), "tta": tta,
            "aug": asdict(cfg.tta.aug), "variant": cfg.variant,
            "seeds": list(cfg.seeds), "output_dir": cfg.output_dir,
            "gt_steps": cfg.gt_steps}


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return default_config()
    with open(path, "r", encoding="utf-8") as f:
        return config_from_dict(json.load(f))


def resolve_preset(name: str, tta: TTAConfig, n_views: int) -> TTAConfig:
    """Overlay a preset's overrides onto the base adaptation config."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r} (known: {sorted(PRESETS)})")
    ov = dict(PRESETS[name])
    if ov.pop("identity_aug", False):
        tta = replace(tta, aug=replace(tta.aug, modes=("identity",)))
    if ov.pop("subset_full", False):
        ov["subset_sizes"] = (n_views - 1,)
    return replace(tta, **ov)


@dataclass
class RunSetup:
    """Everything that is preset-independent for one (config, seed)."""
    seed: int
    scene: object
    gt: list
    cam_g: object
    obs: object
    truth: object
    params: ModelParams          # prefit + registered inserted view
    prefit_report: dict
    registration: dict
    sweep: list
    eval_initial: EvalReport
    setup_seconds: float


@dataclass
class RunArtifact:
    preset: str
    seed: int
    config: dict                 # canonical snapshot that reproduces this
    resolved_tta: dict
    prefit_report: dict
    registration: dict
    eval_initial: EvalReport
    eval_final: EvalReport
    traces: tuple
    params: ModelParams
    captured_gt: tuple
    inserted_pair: tuple
    wall_seconds: float          # informational only, never serialized


def _resolve_inserted_camera(cfg: ExperimentConfig):
    ins, rig = cfg.inserted, cfg.rig
    target = ins.target if ins.target is not None else rig.target
    return orbit_camera(
        ins.radius if ins.radius is not None else rig.radius,
        ins.height if ins.height is not None else rig.height,
        ins.azimuth_deg, tuple(target),
        ins.fov_deg if ins.fov_deg is not None else rig.fov_deg,
        rig.width, rig.im_height), tuple(target)


def prepare_run(cfg: ExperimentConfig, seed: int) -> RunSetup:
    """Synthesize, prefit, and register; shared by all presets of a seed."""
    t0 = perf_counter()
    try:
        scene = build_scene(sample_scene(cfg.scene, seed))
        gt = make_capture_set(scene, cfg.rig, steps=cfg.gt_steps)
        cam_g, target = _resolve_inserted_camera(cfg)
        mis = replace(cfg.misalignment, seed=seed)
        obs, truth = make_inserted_view(scene, cam_g, mis, steps=cfg.gt_steps)
    except Exception as e:
        raise StageError("synthesize", seed, e) from e
    try:
        params0, pre = prefit(gt, cfg.scene.extent, cfg.prefit, seed=seed)
    except Exception as e:
        raise StageError("prefit", seed, e) from e
    try:
        params = params0.copy()
        reg = register_inserted_view(params, obs, vid=cfg.rig.n_views)
    except Exception as e:
        raise StageError("register", seed, e) from e
    try:
        sweep = make_sweep_cameras(cfg.rig, cfg.inserted.azimuth_deg, target)
        eval_initial = evaluate(params, gt, (obs, truth), sweep)
    except Exception as e:
        raise StageError("evaluate", seed, e) from e
    prefit_report = {"first_loss": float(pre.loss_history[0]),
                     "final_loss": float(pre.loss_history[-1]),
                     "depth_l1": {str(k): float(v)
                                  for k, v in sorted(pre.depth_l1.items())}}
    registration = {"view_id": reg.view_id,
                    "final_error": float(reg.final_error),
                    "pose_error": float(reg.pose_error),
                    "chosen_start": int(reg.chosen_start),
                    "warn": bool(reg.warn)}
    return RunSetup(seed=seed, scene=scene, gt=gt, cam_g=cam_g, obs=obs,
                    truth=truth, params=params, prefit_report=prefit_report,
                    registration=registration, sweep=sweep,
                    eval_initial=eval_initial,
                    setup_seconds=perf_counter() - t0)


def adapt_and_evaluate(setup: RunSetup, cfg: ExperimentConfig,
                       preset: str) -> RunArtifact:
    """Run one preset's adaptation on a prepared setup and evaluate it."""
    n = cfg.rig.n_views
    tta_cfg = resolve_preset(preset,
                             replace(cfg.tta, seed=setup.seed), n)
    check_config(tta_cfg, n)
    t0 = perf_counter()
    try:
        if tta_cfg.steps > 0:
            final, traces = run_tta(setup.params, list(range(n)), n, tta_cfg,
                                    inserted_obs=setup.obs)
        else:
            final, traces = setup.params.copy(), []
    except Exception as e:
        raise StageError("adapt", setup.seed, e) from e
    try:
        if tta_cfg.steps > 0:
            eval_final = evaluate(final, setup.gt, (setup.obs, setup.truth),
                                  setup.sweep)
        else:
            eval_final = setup.eval_initial
    except Exception as e:
        raise StageError("evaluate", setup.seed, e) from e
    return RunArtifact(preset=preset, seed=setup.seed,
                       config=config_to_dict(cfg),
                       resolved_tta=asdict(tta_cfg),
                       prefit_report=setup.prefit_report,
                       registration=setup.registration,
                       eval_initial=setup.eval_initial,
                       eval_final=eval_final, traces=tuple(traces),
                       params=final, captured_gt=tuple(setup.gt),
                       inserted_pair=(setup.obs, setup.truth),
                       wall_seconds=perf_counter() - t0)


def run_experiment(cfg: ExperimentConfig, seed: int, preset: str = None,
                   out_dir=None, write: bool = True) -> RunArtifact:
    """Full pipeline for one (config, seed); writes artifacts by default."""
    preset = preset if preset is not None else cfg.variant
    setup = prepare_run(cfg, seed)
    art = adapt_and_evaluate(setup, cfg, preset)
    if write:
        base = Path(out_dir if out_dir is not None else cfg.output_dir)
        try:
            write_outputs(art, base / preset / f"seed{seed:03d}")
        except OSError as e:
            raise StageError("write", seed, e) from e
    return art


def write_pgm(path, values: np.ndarray, valid: np.ndarray,
              lo: float, hi: float) -> None:
    """16-bit big-endian binary PGM; invalid pixels are gray 0."""
    if hi <= lo:
        hi = lo + 1e-9
    q = np.clip(np.round((values - lo) * (65535.0 / (hi - lo))), 0.0, 65535.0)
    gray = np.where(valid, q, 0.0).astype(">u2")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(gray.tobytes())


def _dump_images(art: RunArtifact, img_dir: Path) -> None:
    img_dir.mkdir(parents=True, exist_ok=True)
    n = len(art.captured_gt)
    preds = predict_records(art.params, list(range(n)))
    pred_g = render_view(art.params, n)
    obs, _ = art.inserted_pair
    lines = ["# gray = round(65535 * (value - lo) / (hi - lo)); "
             "invalid pixels are gray 0",
             "# file lo hi"]

    def dump(name, values, valid):
        if valid.any():
            lo, hi = float(values[valid].min()), float(values[valid].max())
        else:
            lo, hi = 0.0, 1.0
        write_pgm(img_dir / name, values, valid, lo, hi)
        lines.append(f"{name} {lo!r} {hi!r}")

    for i in range(n):
        pred, gt = preds[i], art.captured_gt[i]
        joint = pred.valid & gt.valid
        dump(f"view{i:02d}_depth.pgm", pred.depth, pred.valid)
        dump(f"view{i:02d}_err.pgm", np.abs(pred.depth - gt.depth), joint)
    dump("inserted_depth.pgm", pred_g.depth, pred_g.valid)
    dump("inserted_err.pgm", np.abs(pred_g.depth - obs.depth),
         pred_g.valid & obs.valid)
    (img_dir / "mapping.txt").write_bytes(("\n".join(lines) + "\n").encode())


def write_outputs(art: RunArtifact, run_dir) -> None:
    """Write report.json, trace.jsonl, checkpoint, and image dumps.

    Bytes depend only on the artifact's content, never on timing, so a
    rerun of the same (config, seed, preset) rewrites identical files.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    report = {"preset": art.preset, "seed": art.seed, "config": art.config,
              "resolved_tta": art.resolved_tta,
              "prefit": art.prefit_report,
              "registration": art.registration,
              "eval_initial": art.eval_initial.to_dict(),
              "eval_final": art.eval_final.to_dict(),
              "n_trace_steps": len(art.traces)}
    blob = (json.dumps(report, sort_keys=True, indent=1) + "\n").encode()
    (run_dir / "report.json").write_bytes(blob)
    lines = [json.dumps(asdict(t), sort_keys=True) for t in art.traces]
    (run_dir / "trace.jsonl").write_bytes(
        ("\n".join(lines) + "\n").encode() if lines else b"")
    save_params(art.params, run_dir / "checkpoint.bin")
    _dump_images(art, run_dir / "images")


def summary_row(art: RunArtifact) -> dict:
    """Flat per-run scalars for tables and the acceptance checks."""
    ai = art.eval_initial.aggregates
    af = art.eval_final.aggregates
    return {
        "preset": art.preset, "seed": art.seed,
        "pres_si_initial": ai["preservation_si_depth"],
        "pres_si_final": af["preservation_si_depth"],
        "pres_si_degradation": (af["preservation_si_depth"]
                                - ai["preservation_si_depth"]),
        "pres_psnr_final": af["preservation_depth_psnr"],
        "ins_obs_si_initial": ai["insertion_vs_observed_si_depth"],
        "ins_obs_si_final": af["insertion_vs_observed_si_depth"],
        "ins_truth_si_initial": ai["insertion_vs_truth_si_depth"],
        "ins_truth_si_final": af["insertion_vs_truth_si_depth"],
        "novel_tv_final": af["novel_depth_tv"],
        "wall_seconds": art.wall_seconds,
    }


_TABLE_METRICS = ("pres_si_final", "pres_si_degradation", "pres_psnr_final",
                  "ins_obs_si_final", "ins_truth_si_final", "novel_tv_final")


def write_table(rows, path, presets=None) -> None:
    """Comparison table: one row per preset, mean and spread over seeds."""
    if presets is None:
        seen = []
        for r in rows:
            if r["preset"] not in seen:
                seen.append(r["preset"])
        presets = seen
    header = ["preset", "seeds"]
    for m in _TABLE_METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    out = [",".join(header)]
    for preset in presets:
        got = [r for r in rows if r["preset"] == preset]
        if not got:
            continue
        cells = [preset, str(len(got))]
        for m in _TABLE_METRICS:
            vals = np.array([r[m] for r in got], dtype=np.float64)
            cells += [repr(float(vals.mean())), repr(float(vals.std()))]
        out.append(",".join(cells))
    Path(path).write_bytes(("\n".join(out) + "\n").encode())


def _progress(msg: str) -> None:
    # append-only shared channel; safe under parallel seeds
    sys.stderr.write(msg + "\n")
    sys.stderr.flush()


def _seed_worker(task):
    cfg, seed, presets, out = task
    setup = prepare_run(cfg, seed)
    _progress(f"[seed {seed}] setup done "
              f"({setup.setup_seconds:.1f}s, prefit loss "
              f"{setup.prefit_report['final_loss']:.4g})")
    rows = []
    for preset in presets:
        art = adapt_and_evaluate(setup, cfg, preset)
        write_outputs(art, Path(out) / preset / f"seed{seed:03d}")
        row = summary_row(art)
        rows.append(row)
        _progress(f"[seed {seed}] {preset} done ({art.wall_seconds:.1f}s)")
    return seed, setup.setup_seconds, rows


def ablation_suite(cfg: ExperimentConfig, seeds=None, out_dir=None,
                   presets=SUITE_PRESETS, jobs: int = 1):
    """Run presets x seeds, write per-run artifacts and the suite table.

    Returns (rows, setup_seconds) where rows are summary_row dicts sorted
    by (preset order, seed) and setup_seconds maps each seed to the time
    spent on its shared synthesize/prefit/register stage. Seeds run in
    parallel when jobs > 1; artifacts are byte-identical either way.
    """
    seeds = list(cfg.seeds if seeds is None else seeds)
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    tasks = [(cfg, s, tuple(presets), str(out)) for s in seeds]
    if jobs <= 1:
        results = [_seed_worker(t) for t in tasks]
    else:
        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            results = pool.map(_seed_worker, tasks)
    setup_seconds = {seed: t for seed, t, _ in results}
    rows = [r for _, _, rs in results for r in rs]
    order = {p: i for i, p in enumerate(presets)}
    rows.sort(key=lambda r: (order[r["preset"]], r["seed"]))
    write_table(rows, out / "table.csv", presets=list(presets))
    return rows, setup_seconds
