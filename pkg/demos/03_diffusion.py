# Noise schedule, forward noising and guidance arithmetic
# %%
import torch

from metadiffusion.diffusion import DiffusionSchedule, forward_sample, guided_noise

sched = DiffusionSchedule.cosine(1000)
for t in (0, 1, 250, 500, 750, 1000):
    print(t, float(sched.alpha_bars[t]))

# %%
# x_t = sqrt(ab) x0 + sqrt(1 - ab) eps, signal fades as t grows
g = torch.Generator().manual_seed(0)
x0 = torch.full((5000,), 0.7)
for t in (10, 500, 990):
    xt = forward_sample(x0, t, torch.randn(5000, generator=g), sched)
    print(t, "mean", round(xt.mean().item(), 3), "std", round(xt.std().item(), 3))

# %%
# guidance pushes the estimate away from the unconditional one
ec, eu = torch.tensor([1.0]), torch.tensor([0.0])
for w in (0.0, 1.0, 5.0):
    print("w", w, guided_noise(ec, eu, w).item())
