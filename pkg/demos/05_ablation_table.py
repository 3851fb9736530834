"""A miniature ablation: frozen baseline vs full method vs naive fit.

Runs three presets on two seeds at small scale and prints the per-seed
rows plus where the aggregated table landed. The naive preset fits the
corrupted observation directly and pays for it on the captured views;
the full method splits the difference. The real benchmark (every preset,
ten seeds, full resolution) runs via `viewgraft ablate` or the
acceptance gate.
"""

import tempfile
from pathlib import Path

from viewgraft.experiment import ablation_suite, config_from_dict

raw = {"rig": {"width": 32, "im_height": 32},
       "prefit": {"iterations": 60, "grid_shape": [32, 32], "steps": 64},
       "gt_steps": 96,
       "tta": {"steps": 40}}
cfg = config_from_dict(raw)

out = Path(tempfile.mkdtemp(prefix="viewgraft-demo-"))
presets = ("baseline", "full", "hard_supervision")
rows, setup_seconds = ablation_suite(cfg, seeds=[0, 1], out_dir=out,
                                     presets=presets)

print(f"\nsetups took {sum(setup_seconds.values()):.1f}s shared across "
      "presets; per-seed rows:")
print("  preset            seed  captured-si  degradation  ins-vs-obs")
for r in rows:
    print(f"  {r['preset']:16s}  {r['seed']:4d}  "
          f"{r['pres_si_final']:.6f}    {r['pres_si_degradation']:+.2e}  "
          f"{r['ins_obs_si_final']:.6f}")

print(f"\naggregated table: {out / 'table.csv'}")
print((out / "table.csv").read_text().strip())
print("\nhard supervision already buys the lowest inserted residual here; "
      "its cost on the captured views needs the full-scale benchmark "
      "(T=300 at 64x64, ten seeds) to show up")
