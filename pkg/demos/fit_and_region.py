"""Simulate one field, fit exact and approximate models, report a 95% region.

Run with ``python3 demos/fit_and_region.py``.
"""

from truncml.estimation import confidence_region, fit
from truncml.grid import GridSpec, generate
from truncml.likelihood import LikelihoodContext
from truncml.models import WendlandModel, make_model
from truncml.simulation import SimSpec, simulate
from truncml.wendland import SmoothnessConfig, ThetaBox

smooth = SmoothnessConfig(9.0, 4.5, 2)
box = ThetaBox(0.5, 2.0, 1.0, 2.6)
sites = generate(GridSpec(2, 0.3, 300, seed=21))
z = simulate(SimSpec(sites, WendlandModel(smooth), (1.0, 1.8), replicates=1, seed=22))[0]

models = {"exact": WendlandModel(smooth)}
for kind in ("truncation", "linear_interp", "nugget"):
    models[kind] = make_model(kind, smooth, beta_max=box.beta_max, m=sites.n)

for name, model in models.items():
    res = fit(LikelihoodContext(sites, z, model, box))
    line = f"{name:<14} theta_hat=({res.theta_hat[0]:.4f}, {res.theta_hat[1]:.4f})  l={res.objective:.5f}"
    if name == "exact":
        line += f"  95% area={confidence_region(res, 0.95).area:.4f}"
    print(line)
