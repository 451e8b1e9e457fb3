"""Which queues limit throughput in the six-queue network, and how close a
moderate population already is to the large-population answer."""

import numpy as np

from closednet import exact, pfopt
from closednet.model import bundled_model

model = bundled_model("six")
rep = pfopt.solve_pf(model)

print("limiting throughputs:", dict(zip(model.route_ids, rep.allocation.round(6).tolist())))
print("bottlenecks:", [model.queues[j] for j in rep.bottlenecks])
print("utilizations:", dict(zip(model.queues, rep.utilizations.round(4).tolist())))

# exact throughput at a few scales
base = model.population_array(integer=True)
for c in (1, 5, 20, 60):
    n = c * base
    lam = exact.throughput(exact.normalizing_table(model, n), n)
    print(f"c={c:3d}  throughput {np.round(lam, 5)}  gap {np.abs(lam - rep.allocation).max():.2e}")
