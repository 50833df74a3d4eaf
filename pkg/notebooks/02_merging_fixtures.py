# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Merging synthetic fine-tunes
#
# A set of fine-tuned models is simulated by adding low-rank task vectors,
# with a few heavy-tailed outliers, to a random base. We merge them with plain
# task arithmetic, with the singular-vector merge (TSVM) and with its
# reweighted variant (RESM).

import numpy as np

from resm_merge import (
    FixtureSpec,
    MergePlan,
    ResmParams,
    effective_rank,
    generate_fixtures,
    merge_model,
)
from resm_merge.tsv_merge import resm_layer, tsvm_layer

spec = FixtureSpec(n_models=3, rank=4, outlier_fraction=0.005, seed=1)
base, models = generate_fixtures(spec)
print({name: rec.shape for name, rec in base.items()})

# Look at one layer. Each task vector is the fine-tuned layer minus the base.
# The injected outliers hold a large share of the energy, so 90% of it needs
# more singular values than the rank-4 structure alone would.

b = base.load("dense")
deltas = [m.load("dense") - b for m in models]
print([effective_rank(np.linalg.svd(d, compute_uv=False), 0.9) for d in deltas])

# TSVM keeps `k_fixed` singular triplets per model, orthogonalizes the stacked
# singular vectors of all models jointly and sums the pieces.

tsvm = tsvm_layer(b, deltas, k_fixed=4)
print(tsvm.retained_rank, tsvm.warnings)

# RESM weights each model by its share of outlier mass and picks the rank
# from the layer's sparsity.

resm = resm_layer(b, deltas, ResmParams())
print("alpha", np.round(resm.stats.alpha, 3))
print("omega", round(resm.stats.omega, 3), "k_l", resm.stats.rank_k, "used", resm.retained_rank)

# Compare the merged updates with the plain sum of task vectors.

target = sum(deltas)
for name, merged in [("tsvm", tsvm.merged), ("resm", resm.merged)]:
    upd = merged - b
    cos = np.sum(upd * target) / np.linalg.norm(upd) / np.linalg.norm(target)
    print(name, "cosine to sum of deltas:", round(float(cos), 3))

# The whole checkpoint is merged layer by layer; 1-D tensors use weighted
# task arithmetic. The report records what happened in every layer.

plan = MergePlan(base_path="base", model_paths=["m1", "m2", "m3"], method="resm", output_path="out")
merged, report = merge_model(base, models, plan, threads=4)
for entry in report["layers"]:
    print(entry["layer"], entry["method"], entry["k_l"], entry["retained_rank"], entry["clamped"])

# Same plan, different worker counts, identical output.

again, _ = merge_model(base, models, plan, threads=1)
print(again == merged)
