"""Sweep the population of the two-route network and watch the exact
quantities settle on their open-network limits."""

from closednet import sweep
from closednet.model import bundled_model

spec = sweep.SweepSpec.build(bundled_model("t1"), None, [1, 2, 5, 10, 20, 50, 100, 200])
result = sweep.run_sweep(spec)
print(result.to_csv())

# the total variation column should fall steadily
tv = [row.tv_open for row in result.rows]
print("TV decreasing:", all(b < a for a, b in zip(tv, tv[1:])))
