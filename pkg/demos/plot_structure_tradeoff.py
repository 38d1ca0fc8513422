"""
More cSDS weight, more of the target's edges
============================================

"""

# three runs that differ only in lambda_c; they share the (i, j) draw sequence
import sys
from pathlib import Path

import torch
from keystyle import TrainConfig
from keystyle.experiments import TOY_STRUCTURE_PRESETS, run_grid
from keystyle.synthetic import shapes_dataset

torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
out = Path("demo_out") / "tradeoff"
data = shapes_dataset()
cfg = TrainConfig(learning_rate=1e-3, max_steps=steps, checkpoint_every=250, width_multiplier=0.25, t_index=28)

report = run_grid(data, cfg, list(TOY_STRUCTURE_PRESETS.values()), [28], run_dir=out)
for name, cell in zip(TOY_STRUCTURE_PRESETS, report["cells"]):
    print(f"{name:>7}  lambda_c={cell['lambda_c']:<6g} edge IoU {cell['structure_score']:.3f}")

# probe images for every cell sit next to report.json
print("report:", out / "report.json")
