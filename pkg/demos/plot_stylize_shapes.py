"""
Stylizing a synthetic clip from one keyframe
============================================

"""

# eight 64x64 frames; only frame 0 has a painted counterpart,
# and a red square enters from frame 1 on
import sys
from pathlib import Path

import torch
from keystyle import TrainConfig, write_image
from keystyle.experiments import structure_score
from keystyle.operator import apply_operator
from keystyle.synthetic import shapes_dataset
from keystyle.trainer import log_convergence, selected_operator, train

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "shapes"
out.mkdir(parents=True, exist_ok=True)
data = shapes_dataset()

# a quarter-width operator trains in well under a minute per thousand steps
cfg = TrainConfig(learning_rate=1e-3, max_steps=600, checkpoint_every=150, width_multiplier=0.25,
                  lambda_c=4e-3, t_index=28)
state = train(data, cfg, run_dir=out / "run", marks=[0.1, 0.2, 0.5])
for row in log_convergence(state, [0.1, 0.2, 0.5]):
    print(row)

# the checkpoint with the lowest full-sum loss
phi = selected_operator(state)
print("selected step", phi.meta["step"], "edge agreement", round(structure_score(phi, data), 3))
for i, frame in enumerate(data.frames):
    write_image(frame, out / f"frame_{i}.png")
    write_image(apply_operator(phi, frame), out / f"stylized_{i}.png")
print("wrote", out)
