"""
A small reconstruction from a random start
==========================================

Simulate a dataset, start from a sum of random spheres and run the
stochastic average gradient loop for a few hundred iterations. Takes a few
minutes on one core.
"""

import numpy as np

from cryosagd.evaluation import align_volumes
from cryosagd.reconstruct import ReconConfig, Reconstructor
from cryosagd.simulate import SimConfig, phantom_geometric, simulate_dataset
from cryosagd.volume import DensityVolume, nyquist

truth = phantom_geometric(32, 6.0, "lobes", seed=1)
ds, _ = simulate_dataset(truth, SimConfig(K=1000, snr=0.05, defocus_range=(1e4, 2.5e4),
                                          seed=3))

ny = nyquist(6.0)
cfg = ReconConfig(batch_size=50, rho_min=0.25 * ny, rho_max=0.25 * ny, max_iter=200,
                  prior="exponential", prior_lambda=1.0, seed=0)


def report(rec, row):
    if np.isfinite(row["heldout_rremse"]):
        print(f"iteration {row['iteration']:4d}  rho {row['rho']:.4f}  "
              f"held-out RREMSE {row['heldout_rremse']:.4f}  "
              f"evaluated {row['fraction_evaluated']:.3f}")


rec = Reconstructor(ds, cfg, callback=report)
start = DensityVolume(rec.state.v.copy(), 6.0)
vol = rec.run()

_, c0 = align_volumes(truth, start)
_, c1 = align_volumes(truth, vol)
print(f"correlation with the phantom: start {c0:.3f}, end {c1:.3f}")
