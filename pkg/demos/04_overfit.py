# Desk-scale run: overfit a small denoiser on eight fe_lite samples
# Takes around an hour on one CPU core at the default settings.
# %%
import sys

from metadiffusion.desk import OverfitSettings, run_overfit

steps = int(sys.argv[1]) if len(sys.argv) > 1 else OverfitSettings().steps
res = run_overfit(OverfitSettings(steps=steps), progress=lambda s, loss: s % 100 or print(s, round(loss, 4)))

# %%
print("loss", res.initial_loss, "->", res.final_loss, f"({100 * res.loss_reduction:.1f}% lower)")
for k, (e, acc) in enumerate(zip(res.nrmse, res.pixel_accuracy)):
    print(k, "curve NRMSE", round(e, 4), "pixel accuracy", round(acc, 4))
print(res.passed, "of", len(res.nrmse), "below", res.threshold)
