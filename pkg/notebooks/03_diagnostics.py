# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Diagnostics
#
# Effective rank, outlier profiles and a Monte-Carlo look at how often two
# random directions conflict.

import math

import numpy as np
from scipy import special, stats

from resm_merge.diagnostics import conflict_mc, outlier_profile, rank_profile

rng = np.random.default_rng(0)

# ## Effective rank
#
# The number of singular values needed for 95% of the energy. A dense random
# update needs many; an update dominated by a few spikes needs few.

dense = rng.standard_normal((128, 128))
sparse = 0.01 * rng.standard_normal((128, 128))
sparse[[3, 40, 90], [7, 64, 100]] += 30.0
print(rank_profile({"dense": [dense], "sparse": [sparse]}, energy=0.95))

# ## Outliers
#
# Entries at or above `mu + 3 sigma` of their row are outliers. Their total
# magnitude, normalized across models, gives the aggregation weights.

a = rng.standard_normal((32, 64)) * 0.1
b = a.copy()
b[0, :4] += 5.0
prof = outlier_profile([a, b], sigma_mult=3.0)
for m in prof["models"]:
    print(m["model"], m["outlier_count"], round(m["outlier_mass"], 2), round(m["alpha"], 3))

# ## Random conflicts
#
# For independent uniform unit vectors in dimension k, (1 + u.v) / 2 follows
# Beta((k-1)/2, (k-1)/2), and E|u.v| = Gamma(k/2) / (sqrt(pi) Gamma((k+1)/2)).
# The simulation agrees with both. E|u.v| stays below 2.5 / sqrt(k), but the
# probability of u.v exceeding 1/sqrt(k) settles near 0.16 for large k and so
# crosses 2.5 / sqrt(k) once k is larger than about 250.

print(f"{'k':>5} {'P mc':>8} {'P exact':>8} {'E mc':>8} {'E exact':>8} {'bound':>8}")
for k in (16, 64, 256, 1024):
    eps = 1 / math.sqrt(k)
    est = conflict_mc(k, eps, trials=50_000, seed=0)
    p_exact = stats.beta.sf((1 + eps) / 2, (k - 1) / 2, (k - 1) / 2)
    e_exact = math.exp(special.gammaln(k / 2) - special.gammaln((k + 1) / 2)) / math.sqrt(math.pi)
    print(f"{k:>5} {est.p_hat:8.4f} {p_exact:8.4f} {est.expected_abs_dot:8.4f} {e_exact:8.4f} {est.bound:8.4f}")
