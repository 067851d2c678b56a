"""Expected predictions and expected-loss leaf refitting for decision trees
and forests under missing features, backed by a tractable mixture density."""

from .data import (
    BinningSpec,
    CsvFormatError,
    Dataset,
    FeatureSchema,
    MISSING_CODE,
    RawTable,
    apply_binning,
    discretize,
    drop_missing_targets,
    inject_mcar,
    load_csv,
    save_csv,
)
from .density import (
    ConstraintSet,
    MixtureDensity,
    ZeroEvidenceError,
    conditional,
    em_fit,
    em_fit_with_trace,
    intersect,
    log_likelihood,
    marginal,
)
from .expectation import (
    LeafPosterior,
    expected_cross_prediction,
    expected_prediction,
    expected_prediction_forest,
    expected_predictions_batch,
    expected_squared_prediction,
    leaf_posterior,
)
from .fitting import (
    ForestSystem,
    RefitReport,
    SolveResult,
    apply_forest_solution,
    build_forest_system,
    expected_mse,
    refit_bagging,
    refit_boost_tree,
    refit_tree_mse,
    solve_forest_system,
)
from .harness import (
    ExperimentConfig,
    RunReport,
    emit_report,
    generate_synthetic,
    impute,
    median_impute_fit,
    rmse,
    run_experiment,
)
from .trees import (
    DecisionNode,
    DumpFormatError,
    ForestModel,
    Leaf,
    MissingFeatureError,
    TreeModel,
    evaluate,
    evaluate_forest,
    forest_of,
    induce_tree,
    leaf_constraints,
    load_forest,
    parse_dump,
    save_forest,
    with_leaf_values,
)

__version__ = "0.1.0"
