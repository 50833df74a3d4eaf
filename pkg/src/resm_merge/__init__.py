"""Checkpoint merging by task-vector arithmetic and reweighted singular-vector merging."""

from .diagnostics import conflict_bound, conflict_mc, outlier_profile, rank_profile, sparsity_profile
from .fixtures import FixtureSpec, generate_fixtures, write_fixtures
from .linalg import SvdFactors, effective_rank, orthogonalize, reconstruct, svd, truncate
from .merge_methods import (
    MaskedDelta,
    breadcrumbs_mask,
    dare_drop,
    task_arithmetic,
    ties_combine,
    topk_mask,
    weight_average,
)
from .plan import MergePlan, load_plan
from .task_vector import (
    DeltaMatrix,
    LayerStats,
    ResmParams,
    RowStats,
    delta,
    dynamic_rank,
    layer_sparsity,
    outlier_weights,
    row_stats,
    threshold_mask,
)
from .tensor_store import (
    Checkpoint,
    CheckpointReader,
    LayerManifest,
    TensorRecord,
    read_checkpoint,
    validate_compat,
    write_checkpoint,
)
from .tsv_merge import LayerMergeOutcome, merge_model, resm_layer, run_plan, tsvm_layer

__version__ = "0.1.0"
