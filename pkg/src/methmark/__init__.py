"""methmark: prognostic network community markers from DNA methylation."""

from .community import (
    CommunityAssignment,
    RegularizedSpectralClustering,
    SparseGraph,
    adjusted_rand_index,
    largest_component,
    select_block_count,
    spectral_partition,
)
from .data import (
    AlignedStudy,
    ClinicalTable,
    ExpressionMatrix,
    MethylationDataset,
    align_cohorts,
    filter_probes,
    knn_impute,
    load_clinical,
    load_expression,
    load_methylation,
)
from .ebayes import (
    NodeWeight,
    PrognosticNetwork,
    WaldField,
    build_adjacency,
    estimate_all_node_weights,
    estimate_node_weight,
    laplace_gauss_marginal,
    posterior_median,
    threshold_from_weight,
    universal_weight_floor,
    weight_from_threshold,
)
from .interaction import (
    HealthyReference,
    InteractionValue,
    estimate_moments,
    interaction_measure,
)
from .markers import (
    MarkerModel,
    classify,
    concordance_test,
    expression_interaction,
    prognostic_score,
    train_threshold,
    validate_marker,
)
from .pipeline import PipelineRunner, RunConfig, run_pipeline
from .survival import (
    CoxFit,
    KMCurve,
    LogRankResult,
    SurvivalData,
    cox_fit,
    km_estimate,
    logrank_test,
    wald_statistic,
)
from .synth import SynthSpec, generate, generate_sbm, generate_wald_field

__version__ = "0.1.0"

__all__ = [
    "AlignedStudy",
    "ClinicalTable",
    "CommunityAssignment",
    "CoxFit",
    "ExpressionMatrix",
    "HealthyReference",
    "InteractionValue",
    "KMCurve",
    "LogRankResult",
    "MarkerModel",
    "MethylationDataset",
    "NodeWeight",
    "PipelineRunner",
    "PrognosticNetwork",
    "RegularizedSpectralClustering",
    "RunConfig",
    "SparseGraph",
    "SurvivalData",
    "SynthSpec",
    "WaldField",
    "adjusted_rand_index",
    "align_cohorts",
    "build_adjacency",
    "classify",
    "concordance_test",
    "cox_fit",
    "estimate_all_node_weights",
    "estimate_moments",
    "estimate_node_weight",
    "expression_interaction",
    "filter_probes",
    "generate",
    "generate_sbm",
    "generate_wald_field",
    "interaction_measure",
    "km_estimate",
    "knn_impute",
    "laplace_gauss_marginal",
    "largest_component",
    "load_clinical",
    "load_expression",
    "load_methylation",
    "logrank_test",
    "posterior_median",
    "prognostic_score",
    "run_pipeline",
    "select_block_count",
    "spectral_partition",
    "threshold_from_weight",
    "train_threshold",
    "universal_weight_floor",
    "validate_marker",
    "wald_statistic",
    "weight_from_threshold",
]
