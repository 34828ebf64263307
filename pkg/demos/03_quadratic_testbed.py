"""Check the law's functional form on SGD over a noisy quadratic with power-law spectra.

Run with ``python3 demos/03_quadratic_testbed.py`` (a few seconds).
"""

import numpy as np

from multipower import QuadSpec, exact_expected_loss, make_schedule, m_estimate, sample_spectra, sgd_monte_carlo, theory_curve
from multipower.laws import g_saturation
from multipower.quadratic import g_hat, matched_power_c

# %% Exact expected loss via the second-moment recursion agrees with simulated SGD.
small = sample_spectra(QuadSpec(d=8), seed=1)
s = make_schedule("cosine", 0, 256, 0.5)
mean, se = sgd_monte_carlo(small, s, trials=5000, seed=2)
exact = exact_expected_loss(small, s)
for t in (32, 128, 256):
    print(f"t={t:3d} exact {exact[t]:.5f}  SGD {mean[t]:.5f} +- {se[t]:.5f}")

# %% The closed-form final-loss estimate and its rigorous error bound.
est, bound = m_estimate(small, s)
print(f"final loss exact {exact[-1]:.5f}, estimate {est:.5f}, |gap| {abs(exact[-1] - est):.2e} <= bound {bound:.2e}")

# %% At scale the loss follows the closed-form curve, with an error that shrinks as the peak LR shrinks.
spec = QuadSpec(d=4096)
big = sample_spectra(spec, seed=0)
for eta, T in ((0.4, 500), (0.1, 2000)):
    s = make_schedule("two_stage", 0, T, eta, lr_b=0.3 * eta, T_A=int(0.6 * T))
    ex, th = exact_expected_loss(big, s)[1:], theory_curve(spec, s)
    tail = np.cumsum(s.post_lrs) >= 12
    print(f"peak {eta}: max |exact - closed form| over LR area >= 12: {np.abs(ex - th)[tail].max():.2f}")

# %% The saturation of the quadratic model approaches a pure power law at large argument.
c = matched_power_c(0.2, 2.0, 1.0)
for x in (10, 100, 1000, 10000):
    print(f"x={x:5d}  model {g_hat(x, 0.2, 2.0, 1.0, C=1.0):.6f}  power law {g_saturation(x, c, 0.2):.6f}")
