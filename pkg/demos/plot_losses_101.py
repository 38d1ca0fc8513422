"""
Losses and noise, one piece at a time
=====================================

"""

# a toy feature extractor: two fixed convolutions, no learned weights
import numpy as np
import torch
from keystyle import ImagePlane
from keystyle.backends import make_toy_extractor, make_toy_denoiser
from keystyle.distillation import build_schedule, loss_csds, mix_noise, noise_like
from keystyle.perceptual import gram, loss_key, loss_vgg

rng = np.random.default_rng(0)
a = ImagePlane(rng.uniform(0, 1, (32, 32, 3)))
b = ImagePlane(rng.uniform(0, 1, (32, 32, 3)))
e = make_toy_extractor(0)

# Gram matrices pool over space, so shuffling pixels barely moves the style loss
feats = e(a.to_tensor())
print("gram of t1:", tuple(gram(feats["t1"][0]).shape))
print("key loss a vs b:", loss_key(a, b).item())
print("style loss a vs b:", loss_vgg(e, a, b).item())

# the 30-step schedule: index 0 is almost pure noise, 29 almost clean
sched = build_schedule()
print("alpha_bar[0], [16], [28], [29]:", sched[0], sched[16], sched[28], sched[29])
y = a.to_tensor()
eps = noise_like(y.shape, seed=0, step=0, frame=0)
for t in (0, 16, 28):
    z = mix_noise(y, eps, sched, t)
    print(f"t={t:2d}  corr(z, y) = {np.corrcoef(z.flatten(), y.flatten())[0, 1]:.3f}")

# a denoiser that treats the condition as the clean image pushes y toward it
d = make_toy_denoiser("structure", sched)
cond = torch.zeros(1, 1, 32, 32)
value, grad = loss_csds(d, sched, 28, y, cond, eps)
print("cSDS value:", value.item(), " mean gradient:", grad.mean().item())
