"""Sup-norm error of the four approximation families as the level m grows.

Run with ``python3 demos/approximation_error.py``.
"""

from truncml.approximations import ApproxInstance, default_family, sup_error
from truncml.wendland import SmoothnessConfig, ThetaBox, WendlandParams

smooth = SmoothnessConfig(9.0, 4.5, 2)
box = ThetaBox(0.5, 2.0, 1.0, 2.6)
base = WendlandParams(1.0, 1.8, smooth)

print(f"{'family':<14}" + "".join(f"{m:>11}" for m in (10, 100, 1000)))
for kind in ("truncation", "bernstein", "linear_interp", "nugget"):
    fam = default_family(kind, box.beta_max)
    errs = [sup_error(ApproxInstance(fam, m, base), theta_box=box, n_theta=3) for m in (10, 100, 1000)]
    print(f"{kind:<14}" + "".join(f"{e:>11.3e}" for e in errs))
