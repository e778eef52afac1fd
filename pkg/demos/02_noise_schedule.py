"""
The forward noising process
===========================

A linear beta schedule, its cumulative products, and a Monte-Carlo check that
the closed-form jump to step t matches t single-step corruptions.
"""

import math

import numpy as np

from repdit.diffusion import make_schedule, q_sample

s = make_schedule(T=50)
print("beta_1, beta_T:", s.betas[0], s.betas[-1])
for t in (1, 10, 25, 50):
    print(f"t={t:>2}  alpha_bar={s.alpha_bar(t):.5f}  signal std={math.sqrt(s.alpha_bar(t)):.4f}")

# iterate x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise and compare moments
small = make_schedule("linear", T=10, beta_start=0.01, beta_end=0.05)
x0 = np.array([1.0, -0.5, 2.0])
n = 50_000
rng = np.random.default_rng(1)
x = np.tile(x0, (n, 1))
for beta in small.betas:
    x = math.sqrt(1 - beta) * x + math.sqrt(beta) * rng.standard_normal(x.shape)
closed = q_sample(np.tile(x0, (n, 1)), small.T, rng.standard_normal((n, 3)), small).data

print("target mean", np.round(math.sqrt(small.alpha_bar(10)) * x0, 4), "var", round(1 - small.alpha_bar(10), 4))
print("chain  mean", np.round(x.mean(0), 4), "var", np.round(x.var(0), 4))
print("closed mean", np.round(closed.mean(0), 4), "var", np.round(closed.var(0), 4))
