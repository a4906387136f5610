# Linear plane-strain compression of a unit cell
# %%
import numpy as np

from metadiffusion.design import GrfSpec, generate_unit_cell
from metadiffusion.fe import MaterialParams, run_strain_sweep, solve_compression

# a solid block with nu = 0 carries sigma22 = -E * strain everywhere
solid = solve_compression(np.ones((16, 16)), MaterialParams(1.0, 0.0), 0.01)
print("solid: sigma22 range", solid.sigma22.min(), solid.sigma22.max(), "sigma_eff", solid.effective_stress)

# %%
cell = generate_unit_cell(GrfSpec(grid_size=24, rng_seed=11))
r = solve_compression(cell, MaterialParams(), 0.05)
print("fill", round(cell.fill_fraction, 3), "sigma_eff", r.effective_stress)
print("top / bottom reaction", r.top_reaction, r.bottom_reaction)

# every horizontal cut carries the same force, so row averages of stress agree
rows = (-r.sigma22).mean(axis=1)
print("row averages min/max", rows.min(), rows.max())

# %%
# the sweep gives fields at the eleven default strain levels
frames, curve = run_strain_sweep(cell)
print(frames.shape)
for e, s in zip(np.r_[0.002, np.arange(1, 11) * 0.02], curve):
    print(f"{e:.3f} {s:.5f}")
