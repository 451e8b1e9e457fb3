"""Simulate the single-route network, compare with the exact solution, then
look at a scaled sample path against the fluid limit."""

import numpy as np

from closednet import exact, fluid, sim
from closednet.model import bundled_model

model = bundled_model("c1")
est = sim.simulate(model, [4], 5e4, seed=1)
lam = exact.throughput(exact.normalizing_table(model, [4]), [4])
print(est.to_text())
print(f"exact throughput {lam[0]:.5f}, simulated {est.throughput[0]:.5f} +- {est.throughput_halfwidth[0]:.5f}")

m0 = np.array([[0.0], [1.0]])
tr = fluid.integrate(model, m0, 10.0)
for c in (20, 200, 2000):
    path = sim.fluid_scaled_trajectory(model, [1], c, 10.0, seed=0, m0=m0)
    print(f"scale {c:5d}: sup distance to fluid path {sim.sup_distance(path, tr):.3f}")
