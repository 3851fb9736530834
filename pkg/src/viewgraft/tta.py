"""Test-time adaptation of a registered model to an inserted view.

The student is pulled three ways each step: anchor distillation ties its
captured-view predictions to references rendered once from the frozen
starting parameters, self-distillation ties its inserted-view prediction to
an EMA teacher's soft label, and a drift penalty ties every parameter to its
starting value. Periodic stochastic restoration resets a random sprinkle of
parameters to the start as a long-horizon safeguard.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import AugConfig, lift_to_conditioning, sample_aug, warp_record
from .geometry import (CameraParams, Intrinsics, Pose, ViewRecord, d_cam,
                       d_depth, d_normal)
from .optim import AdamConfig, AdamState, adam_step
from .reconstructor import (BatchItem, ModelParams, ViewStatic, forward,
                            predict_records, register, render_view)

__all__ = [
    "TTAConfig",
    "TTAState",
    "StepTrace",
    "check_config",
    "precompute_anchor_refs",
    "sample_batch",
    "anchor_loss",
    "gen_loss",
    "reg_loss",
    "ema_update",
    "stochastic_restore",
    "tta_step",
    "run_tta",
    "save_state",
    "load_state",
]

STATE_MAGIC = b"VGTS0001"


@dataclass(frozen=True)
class TTAConfig:
    steps: int = 300
    p_insert: float = 0.5
    ema_momentum: float = 0.999
    restore_every: int = 10          # steps between restore events
    restore_rate: float = 1e-3       # per-parameter Bernoulli rate
    learning_rate: float = 1e-5
    weight_decay: float = 1e-2
    alpha_depth: float = 0.2         # anchor map weights
    alpha_normal: float = 0.2
    beta_depth: float = 1.0          # self-distillation map weights
    beta_normal: float = 1.0
    lambda_anchor: float = 1.0
    lambda_gen: float = 5e-2
    lambda_reg: float = 1e-4
    subset_sizes: tuple = (3, 4, 5)  # allowed captured-batch sizes
    seed: int = 0
    aug: AugConfig = field(default_factory=AugConfig)
    # "distill": soft label from the EMA teacher. "hard": fit the observed
    # inserted maps directly (the naive alternative, kept for comparison).
    inserted_supervision: str = "distill"


@dataclass(frozen=True)
class StepTrace:
    step: int
    subset: tuple                    # captured view ids in the batch
    inserted: bool
    aug_modes: tuple                 # one mode string per subset view
    loss_anchor: float               # raw, unweighted
    loss_gen: float
    loss_reg: float
    loss_total: float                # weighted objective
    restore_event: bool
    n_restored: int


def check_config(cfg: TTAConfig, n_captured: int) -> None:
    if n_captured < 4:
        raise ValueError("need at least 4 captured views")
    if not (0.0 <= cfg.p_insert <= 1.0):
        raise ValueError("p_insert must be in [0, 1]")
    if not (0.0 <= cfg.ema_momentum < 1.0):
        raise ValueError("ema_momentum must be in [0, 1)")
    if not (0.0 <= cfg.restore_rate <= 1.0):
        raise ValueError("restore_rate must be in [0, 1]")
    if cfg.restore_every < 1:
        raise ValueError("restore_every must be >= 1")
    if cfg.steps < 0:
        raise ValueError("steps must be >= 0")
    if cfg.learning_rate <= 0.0:
        raise ValueError("learning_rate must be positive")
    allowed = {n_captured - 1, n_captured - 2, n_captured - 3}
    if not cfg.subset_sizes or not set(cfg.subset_sizes) <= allowed:
        raise ValueError(
            f"subset_sizes must be a nonempty subset of {sorted(allowed)}")
    for name in ("alpha_depth", "alpha_normal", "beta_depth", "beta_normal",
                 "lambda_anchor", "lambda_gen", "lambda_reg"):
        if getattr(cfg, name) < 0.0:
            raise ValueError(f"{name} must be >= 0")
    if cfg.inserted_supervision not in ("distill", "hard"):
        raise ValueError(
            f"unknown inserted_supervision {cfg.inserted_supervision!r}")


def precompute_anchor_refs(params: ModelParams, captured_vids) -> dict:
    """Render the frozen anchor teacher once per captured view."""
    return predict_records(params, sorted(captured_vids))


def sample_batch(rng: np.random.Generator, n: int, cfg: TTAConfig,
                 width: int, height: int):
    """Draw one step's batch plan.

    Returns (positions into the captured list, insert flag, one transform
    per position). The stream layout is fixed: one size draw, one subset
    draw, one insertion uniform (drawn even at p 0 or 1), then exactly one
    transform per subset view; the inserted view never gets a transform.
    """
    sizes = cfg.subset_sizes
    size = int(sizes[int(rng.integers(len(sizes)))])
    pos = tuple(sorted(int(i) for i in rng.choice(n, size=size,
                                                  replace=False)))
    insert = bool(rng.random() < cfg.p_insert)
    transforms = [sample_aug(cfg.aug, width, height, rng) for _ in pos]
    return pos, insert, transforms


def _pair_loss(pred, ref: ViewRecord, w_depth: float, w_normal: float,
               depth_kind: str = "scale_invariant"):
    """d_cam + w_depth*d_depth + w_normal*d_normal against a reference
    record. pred is a taped forward output; map terms without any
    overlapping support are dropped (no support, no gradient)."""
    total = d_cam(pred.camera, ref.camera)
    both = pred.valid & ref.valid
    if both.any():
        total = total + w_depth * d_depth(pred.depth, ref.depth, both,
                                          kind=depth_kind)
    nmask = pred.normal_valid & ref.normal_mask
    if nmask.any():
        total = total + w_normal * d_normal(pred.normal, ref.normal, nmask)
    return total


def _record_pair_loss(pred: ViewRecord, ref: ViewRecord, w_depth: float,
                      w_normal: float,
                      depth_kind: str = "scale_invariant") -> float:
    # plain-record twin of _pair_loss; each distance builds its own scratch
    # tape, so combine values rather than tensors
    total = float(d_cam(pred.camera, ref.camera).value)
    both = pred.valid & ref.valid
    if both.any():
        total += w_depth * float(
            d_depth(pred.depth, ref.depth, both, kind=depth_kind).value)
    nmask = pred.normal_mask & ref.normal_mask
    if nmask.any():
        total += w_normal * float(
            d_normal(pred.normal, ref.normal, nmask).value)
    return total


def anchor_loss(preds: dict, refs: dict, alpha_depth: float = 0.2,
                alpha_normal: float = 0.2) -> float:
    """Sum over predicted captured views of the distance to their anchor
    references. Record-level; the step loop runs the taped twin."""
    missing = sorted(set(preds) - set(refs))
    if missing:
        raise KeyError(f"no anchor reference for views {missing}")
    return sum(
        _record_pair_loss(preds[v], refs[v], alpha_depth, alpha_normal)
        for v in sorted(preds))


def gen_loss(student_g: ViewRecord, teacher_g: ViewRecord,
             beta_depth: float = 1.0, beta_normal: float = 1.0) -> float:
    """Distance from the student's inserted-view prediction to the
    teacher's soft label. Only defined when the view was in the batch."""
    return _record_pair_loss(student_g, teacher_g, beta_depth, beta_normal)


def reg_loss(student: ModelParams, theta0: ModelParams) -> float:
    """Squared parameter drift summed over every block, divided by the
    total parameter count."""
    if set(student.blocks) != set(theta0.blocks):
        raise ValueError("student/theta0 block sets differ")
    num = 0.0
    count = 0
    for k in sorted(student.blocks):
        a, b = student.blocks[k], theta0.blocks[k]
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for block {k}")
        num += float(np.sum((a - b) ** 2))
        count += a.size
    return num / count


def _taped_drift(tensors: dict, theta0: ModelParams, tape: ad.Tape):
    total = None
    count = 0
    for k in sorted(tensors):
        d = tensors[k] - tape.constant(theta0.blocks[k])
        s = (d * d).sum()
        total = s if total is None else total + s
        count += theta0.blocks[k].size
    return total * (1.0 / count)


def ema_update(teacher: ModelParams, student: ModelParams,
               momentum: float) -> None:
    """teacher <- momentum*teacher + (1-momentum)*student, in place."""
    if set(teacher.blocks) != set(student.blocks):
        raise ValueError("teacher/student block sets differ")
    for k in sorted(student.blocks):
        t, s = teacher.blocks[k], student.blocks[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for block {k}")
        t *= momentum
        t += (1.0 - momentum) * s


def stochastic_restore(blocks: dict, theta0_blocks: dict, rate: float,
                       rng: np.random.Generator) -> int:
    """Reset each scalar parameter to its starting value with probability
    `rate`. Returns the number restored. One uniform is drawn per parameter
    regardless of rate, so the restore stream does not depend on it."""
    n = 0
    for k in sorted(blocks):
        mask = rng.random(blocks[k].shape) < rate
        if mask.any():
            blocks[k][mask] = theta0_blocks[k][mask]
            n += int(mask.sum())
    return n


class TTAState:
    """Everything one adaptation run mutates.

    student/theta0/teacher are independent copies of the registered model;
    anchor refs are rendered once from theta0 and never touched again.
    Batch sampling and restoration draw from separate seeded streams so a
    preset with restoration disabled sees identical batches.
    """

    def __init__(self, params: ModelParams, captured_vids, inserted_vid,
                 cfg: TTAConfig, inserted_obs: ViewRecord | None = None):
        check_config(cfg, len(captured_vids))
        if cfg.inserted_supervision == "hard" and inserted_obs is None:
            raise ValueError("hard supervision needs the observed record")
        self.cfg = cfg
        self.params = params.copy()
        self.theta0 = params.copy()
        self.teacher = params.copy()
        self.captured_vids = tuple(sorted(captured_vids))
        self.inserted_vid = inserted_vid
        self.inserted_obs = inserted_obs
        self.anchor_refs = precompute_anchor_refs(self.theta0,
                                                  self.captured_vids)
        self.adam = AdamConfig(learning_rate=cfg.learning_rate,
                               weight_decay=cfg.weight_decay)
        self.opt = AdamState(self.params.blocks)
        self.step = 0
        self.traces: list[StepTrace] = []
        self.rng_batch = np.random.default_rng([cfg.seed, 0])
        self.rng_restore = np.random.default_rng([cfg.seed, 1])


def tta_step(state: TTAState) -> StepTrace:
    cfg = state.cfg
    state.step += 1

    ref0 = state.anchor_refs[state.captured_vids[0]]
    pos, insert, transforms = sample_batch(
        state.rng_batch, len(state.captured_vids), cfg,
        ref0.camera.intr.width, ref0.camera.intr.height)
    subset = tuple(state.captured_vids[i] for i in pos)
    insert = insert and state.inserted_vid is not None

    items = []
    for vid, t in zip(subset, transforms):
        pose_delta, dlogf = lift_to_conditioning(
            t, state.anchor_refs[vid].camera.intr)
        items.append(BatchItem(view_id=vid, pose_delta=pose_delta,
                               dlogf=dlogf, map_warp=t))
    if insert:
        items.append(BatchItem(view_id=state.inserted_vid,
                               is_inserted=True))

    # soft label from the previous step's teacher, before the student moves
    teacher_rec = None
    if insert and cfg.lambda_gen != 0.0 \
            and cfg.inserted_supervision == "distill":
        teacher_rec = render_view(state.teacher, state.inserted_vid)

    tape = ad.Tape()
    tensors = register(tape, state.params)
    preds = forward(tape, tensors, state.params, items)

    raw_anchor = 0.0
    raw_gen = 0.0
    raw_reg = 0.0
    total = None
    if cfg.lambda_anchor != 0.0:
        a_t = None
        for pred, t in zip(preds[:len(subset)], transforms):
            ref = warp_record(state.anchor_refs[pred.view_id], t)
            term = _pair_loss(pred, ref, cfg.alpha_depth, cfg.alpha_normal)
            a_t = term if a_t is None else a_t + term
        raw_anchor = float(a_t.value)
        total = cfg.lambda_anchor * a_t
    if insert and cfg.lambda_gen != 0.0:
        if cfg.inserted_supervision == "hard":
            g_t = _pair_loss(preds[-1], state.inserted_obs, cfg.beta_depth,
                             cfg.beta_normal, depth_kind="l1")
        else:
            g_t = _pair_loss(preds[-1], teacher_rec, cfg.beta_depth,
                             cfg.beta_normal)
        raw_gen = float(g_t.value)
        weighted = cfg.lambda_gen * g_t
        total = weighted if total is None else total + weighted
    if cfg.lambda_reg != 0.0:
        r_t = _taped_drift(tensors, state.theta0, tape)
        raw_reg = float(r_t.value)
        weighted = cfg.lambda_reg * r_t
        total = weighted if total is None else total + weighted

    total_val = float(total.value) if total is not None else 0.0
    if not np.isfinite(total_val):
        raise RuntimeError(
            f"non-finite objective at step {state.step}: "
            f"anchor={raw_anchor} gen={raw_gen} reg={raw_reg}")
    if total is not None:
        grads = tape.backward(total)
        adam_step(state.params.blocks, grads, state.opt, state.adam)

    ema_update(state.teacher, state.params, cfg.ema_momentum)

    restore_event = (cfg.restore_rate > 0.0
                     and state.step % cfg.restore_every == 0)
    n_restored = 0
    if restore_event:
        n_restored = stochastic_restore(state.params.blocks,
                                        state.theta0.blocks,
                                        cfg.restore_rate, state.rng_restore)

    trace = StepTrace(
        step=state.step, subset=subset, inserted=insert,
        aug_modes=tuple(t.mode for t in transforms),
        loss_anchor=raw_anchor, loss_gen=raw_gen, loss_reg=raw_reg,
        loss_total=total_val, restore_event=restore_event,
        n_restored=n_restored)
    state.traces.append(trace)
    return trace


def run_tta(params: ModelParams, captured_vids, inserted_vid,
            cfg: TTAConfig, inserted_obs: ViewRecord | None = None,
            on_step=None):
    """Adapt a registered model for cfg.steps steps.

    Returns (adapted ModelParams, list of StepTrace). cfg.steps = 0 returns
    an untouched copy. Raises RuntimeError on a non-finite objective, with
    all completed traces preserved on the exception's __cause__ side via
    the state the caller holds (use TTAState directly to inspect).
    """
    state = TTAState(params, captured_vids, inserted_vid, cfg,
                     inserted_obs=inserted_obs)
    while state.step < cfg.steps:
        tr = tta_step(state)
        if on_step is not None:
            on_step(tr)
    return state.params, state.traces


# ---------------------------------------------------------------------------
# state checkpointing

def _record_to_payload(rec: ViewRecord):
    i = rec.camera.intr
    meta = {"rot": rec.camera.pose.rot.tolist(),
            "t": rec.camera.pose.t.tolist(),
            "intr": [i.fx, i.fy, i.cx, i.cy, i.width, i.height]}
    arrays = {"depth": rec.depth,
              "normal": rec.normal,
              "valid": rec.valid.astype(np.float64),
              "normal_valid": rec.normal_mask.astype(np.float64)}
    return meta, arrays


def _record_from_payload(meta: dict, arrays: dict) -> ViewRecord:
    fx, fy, cx, cy, w, h = meta["intr"]
    cam = CameraParams(
        pose=Pose(rot=np.array(meta["rot"]), t=np.array(meta["t"])),
        intr=Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                        width=int(w), height=int(h)))
    return ViewRecord(camera=cam, depth=arrays["depth"],
                      normal=arrays["normal"],
                      valid=arrays["valid"] > 0.5,
                      normal_valid=arrays["normal_valid"] > 0.5)


def _model_meta(params: ModelParams) -> dict:
    return {"extent": list(params.extent),
            "z_band": list(params.z_band),
            "steps": params.steps,
            "quantum": params.quantum,
            "view_static": {str(v): [s.cx, s.cy, s.width, s.height]
                            for v, s in sorted(params.view_static.items())}}


def _model_from_meta(meta: dict, blocks: dict) -> ModelParams:
    vstat = {int(v): ViewStatic(cx=s[0], cy=s[1], width=int(s[2]),
                                height=int(s[3]))
             for v, s in meta["view_static"].items()}
    return ModelParams(extent=tuple(meta["extent"]),
                       z_band=tuple(meta["z_band"]), steps=meta["steps"],
                       quantum=meta["quantum"], view_static=vstat,
                       blocks=blocks)


def save_state(state: TTAState, path) -> None:
    """Full-fidelity adaptation checkpoint: resuming reproduces exactly the
    run that never stopped (rng streams included). Anchor refs are not
    stored; they re-render bit-identically from theta0."""
    arrays = {}
    for prefix, p in (("student", state.params), ("theta0", state.theta0),
                      ("teacher", state.teacher)):
        for k, v in p.blocks.items():
            arrays[f"{prefix}/{k}"] = v
    for k, v in state.opt.m.items():
        arrays[f"m/{k}"] = v
    for k, v in state.opt.v.items():
        arrays[f"v/{k}"] = v
    obs_meta = None
    if state.inserted_obs is not None:
        obs_meta, obs_arrays = _record_to_payload(state.inserted_obs)
        for k, v in obs_arrays.items():
            arrays[f"obs/{k}"] = v
    header = {
        "config": asdict(state.cfg),
        "model": _model_meta(state.params),
        "captured_vids": list(state.captured_vids),
        "inserted_vid": state.inserted_vid,
        "obs": obs_meta,
        "step": state.step,
        "opt_step": state.opt.step,
        "rng_batch": state.rng_batch.bit_generator.state,
        "rng_restore": state.rng_restore.bit_generator.state,
        "traces": [asdict(t) for t in state.traces],
        "arrays": [{"key": k, "shape": list(arrays[k].shape)}
                   for k in sorted(arrays)],
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(STATE_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in sorted(arrays):
            f.write(np.ascontiguousarray(arrays[k],
                                         dtype="<f8").tobytes())


def load_state(path) -> TTAState:
    with open(path, "rb") as f:
        magic = f.read(len(STATE_MAGIC))
        if magic != STATE_MAGIC:
            raise ValueError(f"bad state magic {magic!r}")
        (hlen,) = np.frombuffer(f.read(4), dtype="<u4")
        header = json.loads(f.read(int(hlen)).decode())
        arrays = {}
        for ent in header["arrays"]:
            shape = tuple(ent["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            arrays[ent["key"]] = np.frombuffer(buf, dtype="<f8") \
                .reshape(shape).copy()
        if f.read(1):
            raise ValueError("trailing bytes after state payload")

    c = dict(header["config"])
    c["aug"] = AugConfig(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in c["aug"].items()})
    c["subset_sizes"] = tuple(c["subset_sizes"])
    cfg = TTAConfig(**c)

    def blocks_of(prefix):
        pre = prefix + "/"
        return {k[len(pre):]: v for k, v in arrays.items()
                if k.startswith(pre)}

    obs = None
    if header["obs"] is not None:
        obs = _record_from_payload(header["obs"], blocks_of("obs"))
    state = TTAState.__new__(TTAState)
    state.cfg = cfg
    state.params = _model_from_meta(header["model"], blocks_of("student"))
    state.theta0 = _model_from_meta(header["model"], blocks_of("theta0"))
    state.teacher = _model_from_meta(header["model"], blocks_of("teacher"))
    state.captured_vids = tuple(header["captured_vids"])
    state.inserted_vid = header["inserted_vid"]
    state.inserted_obs = obs
    state.anchor_refs = precompute_anchor_refs(state.theta0,
                                               state.captured_vids)
    state.adam = AdamConfig(learning_rate=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    state.opt = AdamState(state.params.blocks)
    state.opt.m = blocks_of("m")
    state.opt.v = blocks_of("v")
    state.opt.step = header["opt_step"]
    state.step = header["step"]
    state.traces = [StepTrace(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in d.items()})
                    for d in header["traces"]]
    state.rng_batch = np.random.default_rng()
    state.rng_batch.bit_generator.state = header["rng_batch"]
    state.rng_restore = np.random.default_rng()
    state.rng_restore.bit_generator.state = header["rng_restore"]
    return state
