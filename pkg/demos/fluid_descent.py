"""Integrate the fluid model from a random start and watch the entropy fall to
its minimum, then check the end state against the optimal set."""

import numpy as np

from closednet import fluid, pfopt
from closednet.model import bundled_model

model = bundled_model("six")
n = model.population_array()
rep = pfopt.solve_pf(model, n)

m0 = fluid.random_state(model, n, np.random.default_rng(3))
tr = fluid.integrate(model, m0, 100.0 / model.mu_min, record_every=500)

for t, b in list(zip(tr.times, tr.beta))[:: max(1, len(tr.times) // 12)]:
    print(f"t={t:8.3f}  beta - beta* = {b - rep.beta_star:.3e}")
print("emptying events:", tr.events)
print(fluid.optimal_set_membership(model, n, rep, tr.final()).to_text())
