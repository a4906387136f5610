# Random unit cells from a Gaussian random field
# %%
import numpy as np

from metadiffusion.design import (
    GrfSpec,
    RetryBudgetExhausted,
    check_connectivity,
    generate_unit_cell,
    sample_grf,
    spectral_slope,
)

# one field on a 48x48 quarter grid, standardized to zero mean, unit variance
field = sample_grf(GrfSpec(rng_seed=7))
print(field.shape, round(field.mean(), 6), round(field.std(), 6))

# the radially averaged power spectrum falls off as k^-alpha
for alpha in (2.0, 3.0, 4.0):
    print("alpha", alpha, "slope", round(spectral_slope(GrfSpec(grid_size=64, alpha=alpha), 50), 2))

# %%
# threshold, keep the spanning component, mirror twice -> 96x96 cell
cell = generate_unit_cell(GrfSpec(rng_seed=7))
print(cell.pixels.shape, "fill", round(cell.fill_fraction, 3), "threshold", round(cell.threshold, 3),
      "rejected draws", cell.rejections)
print("symmetric", cell.is_mirror_symmetric(), "connected", check_connectivity(cell.quarter, 0.10))

# coarse text picture of the quarter
q = cell.quarter[::4, ::4]
print("\n".join("".join("#" if v else "." for v in row) for row in q))

# %%
# smooth fields give blobs that span easily, rough ones break up into islands
for alpha in (4.5, 2.5):
    fills = [generate_unit_cell(GrfSpec(alpha=alpha, rng_seed=s)).fill_fraction for s in range(20)]
    print("alpha", alpha, "mean fill", round(float(np.mean(fills)), 3))

# very rough fields rarely span the cell at all
try:
    generate_unit_cell(GrfSpec(alpha=1.5, rng_seed=3, max_attempts=50))
except RetryBudgetExhausted as exc:
    print("alpha 1.5:", exc)
