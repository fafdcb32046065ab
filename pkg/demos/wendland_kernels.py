"""Generalized Wendland kernels: values, parameter derivatives, spectral density.

Run with ``python3 demos/wendland_kernels.py``.
"""

import numpy as np

from truncml.wendland import SmoothnessConfig, WendlandParams, eval_dphi, eval_phi, spectral_density

t = np.linspace(0.0, 2.0, 9)

# integer kappa goes through the closed polynomial form, the others through quadrature
for kappa in (0.5, 1.0, 1.5, 4.5):
    params = WendlandParams(1.0, 1.8, SmoothnessConfig(9.0, kappa, 2))
    print(f"kappa={kappa:<4} phi:", np.array2string(eval_phi(params, t), precision=4))

params = WendlandParams(1.0, 1.8, SmoothnessConfig(9.0, 4.5, 2))
print("d/dbeta    :", np.array2string(eval_dphi(params, t, (0, 1)), precision=4))
print("d2/dbeta2  :", np.array2string(eval_dphi(params, t, (0, 2)), precision=4))

# the spectral density is positive and decays like |s|^-(d + 1 + 2 kappa)
s = np.array([0.0, 1.0, 10.0, 100.0])
print("spectral   :", [f"{spectral_density(params, v):.4e}" for v in s])
