import json
import struct

import numpy as np
import pytest

from viewgraft import cli
from viewgraft.experiment import (PRESETS, SUITE_PRESETS, ExperimentConfig,
                                  ablation_suite, adapt_and_evaluate,
                                  config_from_dict, config_to_dict,
                                  default_config, prepare_run,
                                  resolve_preset, run_experiment,
                                  write_outputs, write_pgm)
from viewgraft.tta import check_config


def _small_raw(**over):
    raw = {
        "rig": {"width": 32, "im_height": 32},
        "prefit": {"iterations": 30, "grid_shape": [24, 24], "steps": 64},
        "gt_steps": 96,
        "tta": {"steps": 6},
        "seeds": [0, 1],
        "variant": "full",
    }
    raw.update(over)
    return raw


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """One tiny full run shared by the artifact-shape tests."""
    out = tmp_path_factory.mktemp("small_run")
    cfg = config_from_dict(_small_raw())
    art = run_experiment(cfg, 0, out_dir=out)
    return cfg, art, out / "full" / "seed000"


def test_config_round_trip():
    cfg = default_config()
    snap = config_to_dict(cfg)
    back = config_from_dict(json.loads(json.dumps(snap)))
    assert back == cfg
    # overrides land and survive the trip
    cfg2 = config_from_dict(_small_raw())
    assert cfg2.rig.width == 32
    assert cfg2.prefit.grid_shape == (24, 24)
    assert cfg2.tta.steps == 6
    assert config_from_dict(json.loads(json.dumps(config_to_dict(cfg2)))) \
        == cfg2


def test_config_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown config key frobnicate"):
        config_from_dict({"frobnicate": 1})
    with pytest.raises(ValueError, match="tta.lr"):
        config_from_dict({"tta": {"lr": 1e-4}})
    with pytest.raises(ValueError, match="aug.blur"):
        config_from_dict({"aug": {"blur": 2.0}})
    with pytest.raises(ValueError, match="misalignment.seed"):
        config_from_dict({"misalignment": {"seed": 3}})
    with pytest.raises(ValueError, match="unknown preset"):
        config_from_dict({"variant": "fancy"})
    with pytest.raises(ValueError, match="tta.steps"):
        config_from_dict({"tta": {"steps": "many"}})
    with pytest.raises(ValueError, match="rig.width"):
        config_from_dict({"rig": {"width": 32.5}})
    with pytest.raises(ValueError, match="seeds"):
        config_from_dict({"seeds": [0, -1]})
    with pytest.raises(ValueError, match="config root"):
        config_from_dict([1, 2])


def test_presets_resolve():
    base = default_config().tta
    for name in PRESETS:
        resolved = resolve_preset(name, base, 6)
        check_config(resolved, 6)
    assert resolve_preset("baseline", base, 6).steps == 0
    assert resolve_preset("selfdist_p10", base, 6).p_insert == 1.0
    assert resolve_preset("selfdist_p05", base, 6).restore_rate == 0.0
    hard = resolve_preset("hard_supervision", base, 6)
    assert hard.inserted_supervision == "hard"
    assert hard.lambda_gen == 1.0
    assert hard.aug.modes == ("identity",)
    anchor = resolve_preset("anchor_only", base, 6)
    assert anchor.subset_sizes == (5,)
    assert anchor.p_insert == 0.0
    assert anchor.aug.modes == ("identity",)
    assert resolve_preset("no_anchor", base, 6).lambda_anchor == 0.0
    full = resolve_preset("full", base, 6)
    assert full == base
    with pytest.raises(ValueError, match="unknown preset"):
        resolve_preset("nope", base, 6)


def test_baseline_is_initial_evaluation(tmp_path):
    cfg = config_from_dict(_small_raw(variant="baseline"))
    art = run_experiment(cfg, 0, out_dir=tmp_path)
    assert art.traces == ()
    assert art.eval_final.to_dict() == art.eval_initial.to_dict()
    run_dir = tmp_path / "baseline" / "seed000"
    report = json.loads((run_dir / "report.json").read_bytes())
    assert report["n_trace_steps"] == 0
    assert (run_dir / "trace.jsonl").read_bytes() == b""


def test_run_artifacts_complete(small_run):
    cfg, art, run_dir = small_run
    report = json.loads((run_dir / "report.json").read_bytes())
    assert report["preset"] == "full"
    assert report["seed"] == 0
    assert report["n_trace_steps"] == 6
    assert report["resolved_tta"]["steps"] == 6
    lines = (run_dir / "trace.jsonl").read_bytes().splitlines()
    assert len(lines) == 6
    first = json.loads(lines[0])
    assert first["step"] == 1
    assert set(first) == {"step", "subset", "inserted", "aug_modes",
                          "loss_anchor", "loss_gen", "loss_reg",
                          "loss_total", "restore_event", "n_restored"}
    assert (run_dir / "checkpoint.bin").exists()
    img = run_dir / "images"
    for i in range(6):
        assert (img / f"view{i:02d}_depth.pgm").exists()
        assert (img / f"view{i:02d}_err.pgm").exists()
    assert (img / "inserted_depth.pgm").exists()
    assert (img / "mapping.txt").exists()
    assert cli._check_run_dir(run_dir) == []


def test_rerun_reproduces_bytes(small_run, tmp_path):
    cfg, art, run_dir = small_run
    report = json.loads((run_dir / "report.json").read_bytes())
    # the resolved-config snapshot re-runs to identical bytes
    cfg2 = config_from_dict(report["config"])
    run_experiment(cfg2, report["seed"], preset=report["preset"],
                   out_dir=tmp_path)
    dir2 = tmp_path / "full" / "seed000"
    for name in ("report.json", "trace.jsonl", "checkpoint.bin"):
        assert (dir2 / name).read_bytes() == (run_dir / name).read_bytes()
    a = sorted((run_dir / "images").iterdir())
    b = sorted((dir2 / "images").iterdir())
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_pgm_format(tmp_path):
    vals = np.array([[1.0, 3.0], [2.0, 9.0]])
    valid = np.array([[True, True], [True, False]])
    path = tmp_path / "x.pgm"
    write_pgm(path, vals, valid, 1.0, 3.0)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n")
    gray = struct.unpack(">4H", raw[len(b"P5\n2 2\n65535\n"):])
    assert gray == (0, 65535, 32768, 0)   # lo, hi, mid rounded, invalid


def test_ablation_suite_writes_table(tmp_path):
    cfg = config_from_dict(_small_raw())
    presets = ("baseline", "full")
    rows, setup_s = ablation_suite(cfg, seeds=[0, 1], out_dir=tmp_path,
                                   presets=presets)
    assert [r["preset"] for r in rows] == ["baseline", "baseline",
                                           "full", "full"]
    assert [r["seed"] for r in rows] == [0, 1, 0, 1]
    assert set(setup_s) == {0, 1}
    table = (tmp_path / "table.csv").read_text().splitlines()
    assert len(table) == 3
    assert table[0].startswith("preset,seeds,")
    assert table[1].startswith("baseline,2,")
    assert table[2].startswith("full,2,")
    for preset in presets:
        for seed in (0, 1):
            assert (tmp_path / preset / f"seed{seed:03d}"
                    / "report.json").exists()
    # baseline rows carry zero adaptation: final equals initial
    for r in rows:
        if r["preset"] == "baseline":
            assert r["pres_si_degradation"] == 0.0


def test_suite_parallel_bytes_match(tmp_path):
    cfg = config_from_dict(_small_raw(tta={"steps": 4}))
    a, b = tmp_path / "j1", tmp_path / "j2"
    ablation_suite(cfg, seeds=[0, 1], out_dir=a, presets=("full",), jobs=1)
    ablation_suite(cfg, seeds=[0, 1], out_dir=b, presets=("full",), jobs=2)
    for seed in (0, 1):
        for name in ("report.json", "trace.jsonl"):
            pa = a / "full" / f"seed{seed:03d}" / name
            pb = b / "full" / f"seed{seed:03d}" / name
            assert pa.read_bytes() == pb.read_bytes()
    assert (a / "table.csv").read_bytes() == (b / "table.csv").read_bytes()


def test_shared_setup_matches_fresh_run(tmp_path):
    # suites reuse one prefit+registration per seed; that shortcut must
    # not change any bytes relative to a standalone run
    cfg = config_from_dict(_small_raw(tta={"steps": 4}))
    setup = prepare_run(cfg, 0)
    art_a = adapt_and_evaluate(setup, cfg, "baseline")
    art_b = adapt_and_evaluate(setup, cfg, "full")
    write_outputs(art_b, tmp_path / "shared")
    fresh = run_experiment(cfg, 0, preset="full", out_dir=tmp_path)
    assert art_a.eval_initial.to_dict() == fresh.eval_initial.to_dict()
    assert (tmp_path / "shared" / "report.json").read_bytes() == \
        (tmp_path / "full" / "seed000" / "report.json").read_bytes()


def test_cli_run_check_and_render(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(_small_raw(tta={"steps": 3})))
    out = tmp_path / "out"
    code = cli.main(["run", "--config", str(cfg_path), "--seed", "0",
                     "--out", str(out), "--check"])
    assert code == 0
    run_dir = out / "full" / "seed000"
    assert (run_dir / "report.json").exists()

    rend = tmp_path / "rendered"
    code = cli.main(["render", str(run_dir / "checkpoint.bin"),
                     "--out", str(rend)])
    assert code == 0
    pgms = sorted(p.name for p in rend.glob("*.pgm"))
    assert pgms == [f"view{i:02d}_depth.pgm" for i in range(7)]
    assert (rend / "mapping.txt").exists()

    code = cli.main(["ablate", "--config", str(cfg_path), "--seeds", "1",
                     "--preset", "baseline", "--out",
                     str(tmp_path / "suite"), "--check"])
    assert code == 0
    assert (tmp_path / "suite" / "table.csv").exists()


def test_cli_bad_inputs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"tta": {"steps": "many"}}))
    assert cli.main(["run", "--config", str(bad), "--seed", "0",
                     "--out", str(tmp_path / "o")]) == 2
    missing = tmp_path / "nope.json"
    assert cli.main(["run", "--config", str(missing), "--seed", "0",
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["ablate", "--preset", "fancy", "--seeds", "1",
                     "--out", str(tmp_path / "o")]) == 2


def test_stage_error_names_stage():
    # an inserted camera far outside the scene observes nothing, so
    # registration has no valid depth to fit; the failure names its stage
    cfg = config_from_dict(_small_raw(inserted={"radius": 50.0}))
    from viewgraft.experiment import StageError
    with pytest.raises(StageError) as err:
        run_experiment(cfg, 0, write=False)
    assert err.value.stage == "register"
    assert err.value.seed == 0
    assert "stage 'register'" in str(err.value)
