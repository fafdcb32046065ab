"""KL divergence of a tapered Matern model, with the taper itself approximated.

Run with ``python3 demos/taper_kl.py``.
"""

from truncml.approximations import default_family
from truncml.grid import GridSpec, generate
from truncml.tapering import MaternParams, TaperSpec, kl_divergence
from truncml.wendland import SmoothnessConfig, ThetaBox

sites = generate(GridSpec(2, 0.3, 200, seed=31))
truth = MaternParams(1.0, 1.0, 1.5)
smooth = SmoothnessConfig(5.0, 2.5, 2)
exact = TaperSpec(3.0, smooth)
thetas = ThetaBox(0.5, 2.0, 0.5, 2.0).grid(3)

base = [kl_divergence(sites, truth, th, exact) for th in thetas]
print(f"KL cost of tapering at the true parameters: {kl_divergence(sites, truth, truth.theta, exact):.4e}")
fam = default_family("linear_interp", 3.0)
for m in (10, 100, 1000):
    spec = TaperSpec(3.0, smooth, fam, m)
    gap = max(abs(kl_divergence(sites, truth, th, spec) - b) for th, b in zip(thetas, base))
    print(f"m={m:<5} sup gap over the theta grid: {gap:.3e}")
