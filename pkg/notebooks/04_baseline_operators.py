# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Element-wise baselines
#
# Weight averaging, task arithmetic, TIES, DARE and Breadcrumbs all have the
# form `base + sum_i w_i * m_i * delta_i` with a binary mask per model. Here
# we look at the masks each one chooses.

import numpy as np

from resm_merge.merge_methods import (
    breadcrumbs_mask,
    dare_drop,
    task_arithmetic,
    ties_combine,
    topk_mask,
)

rng = np.random.default_rng(3)
base = np.zeros(8)
deltas = [np.round(rng.standard_normal(8), 2) for _ in range(3)]
for d in deltas:
    print(d)

# TIES trims each task vector to its largest entries, elects a sign per
# coordinate and averages the entries that agree with it.

trimmed = [topk_mask(d, 0.5) for d in deltas]
print(np.array([t.mask for t in trimmed]).astype(int))
print("ties", base + ties_combine(trimmed))
print("sum ", task_arithmetic(base, deltas))

# DARE drops entries at random and rescales the survivors, so the result is
# unbiased. The mask depends only on (seed, layer name, model index).

dropped = dare_drop(deltas[0], 0.5, rng_seed=0, layer_name="demo", model_index=1)
print(dropped.mask.astype(int), dropped.values)
draws = dare_drop(np.tile(deltas[0], (20_000, 1)), 0.5, rng_seed=1).values
print(np.round(draws.mean(axis=0) - deltas[0], 3))

# Breadcrumbs discards both tails: the few largest entries and the many
# smallest ones.

crumbs = breadcrumbs_mask(deltas[0], top_discard=0.125, bottom_discard=0.25)
print(crumbs.mask.astype(int), crumbs.values)
