"""Anomaly localization by sparse subspace reconstruction of deep features.

Test features are rewritten as sparse linear combinations of nominal
features; whatever cannot be expressed that way is the anomaly signal.
A per-query pursuit at a deep reference level picks the small nominal
subset that the scoring levels reconstruct against, which keeps inference
cheap without giving up the span of the full bank.
"""

from .evaluation import (
    EvalReport,
    GroundTruthMask,
    ablate_sampling,
    connected_components,
    evaluate,
    pixel_auroc,
    pro_score,
)
from .memory_bank import (
    BankError,
    MemoryBank,
    SampledSubset,
    bank_from_tensors,
    build_bank,
    coverage_error,
    full_subset,
    load_bank,
    nn_matching_error,
    sample_random,
    sample_subspace,
)
from .omp import OmpConfig, SparseCode, ls_on_support, omp_solve, select_atom, update_residual
from .pipeline import (
    AnomalyMap,
    PipelineConfig,
    aggregate_levels,
    gaussian_smooth,
    residual_to_scores,
    score_sample,
    upsample_bilinear,
)
from .synthetic import SyntheticDataset, SyntheticSpec, gen_synthetic, union_of_subspaces
from .tensor_io import (
    DictionaryMatrix,
    FeatureTensor,
    FlatFeature,
    TensorFormatError,
    flatten,
    read_tensor,
    reshape,
    stack_dictionary,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "BankError",
    "DictionaryMatrix",
    "EvalReport",
    "FeatureTensor",
    "FlatFeature",
    "GroundTruthMask",
    "MemoryBank",
    "OmpConfig",
    "PipelineConfig",
    "SampledSubset",
    "SparseCode",
    "SyntheticDataset",
    "SyntheticSpec",
    "TensorFormatError",
    "ablate_sampling",
    "aggregate_levels",
    "bank_from_tensors",
    "build_bank",
    "connected_components",
    "coverage_error",
    "evaluate",
    "flatten",
    "full_subset",
    "gaussian_smooth",
    "gen_synthetic",
    "load_bank",
    "ls_on_support",
    "nn_matching_error",
    "omp_solve",
    "pixel_auroc",
    "pro_score",
    "read_tensor",
    "reshape",
    "residual_to_scores",
    "sample_random",
    "sample_subspace",
    "score_sample",
    "select_atom",
    "stack_dictionary",
    "union_of_subspaces",
    "update_residual",
    "upsample_bilinear",
    "write_tensor",
]
