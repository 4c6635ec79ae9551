"""Factor-analytic compression of collinear features for stable prediction.

The pipeline: filter redundant features from the sample correlation matrix,
estimate a well-conditioned shrunken correlation matrix with a
cross-validated penalty, compress it by maximum-likelihood factor analysis
with Varimax rotation, project subjects onto regression-type factor scores,
and use those scores as predictors in a Cox model evaluated by IPCW Brier
curves. A Monte-Carlo benchmark of the latent-dimension selection rules is
included.
"""

__version__ = "0.1.0"

from .corr import (
    CorrelationMatrix,
    FilterResult,
    PenaltySearchResult,
    ShrunkenCorrelation,
    condition_number,
    cv_select_penalty,
    redundancy_filter,
    sample_correlation,
    shrink,
)
from .factor import (
    DimensionDiagnostics,
    FactorModel,
    SelectionTally,
    dimension_diagnostics,
    fit_ml_factor,
    guttman_bound,
    kmo,
    ledermann_max,
    select_aic,
    select_bic,
    select_lrt,
    smc_lower_bounds,
    threshold_loadings,
    variance_explained,
)
from .ingest import (
    ColumnStats,
    RawDataset,
    StandardizedMatrix,
    apply_stats,
    load_csv,
    standardize,
)
from .pipeline import (
    PipelineConfig,
    PipelineError,
    RunReport,
    ScorePipeline,
    run_pipeline,
    validate_external,
)
from .rotation import RotationResult, rotated_model, varimax
from .scores import FactorScores, thomson_scores
from .simulate import (
    GeneratorModel,
    ScenarioResult,
    SimulationScenario,
    build_loading_matrix,
    emit_table,
    run_scenario,
    simulate_dataset,
)
from .survival import (
    BrierCurve,
    CoxModel,
    IntegratedScore,
    StepSurvivalCurve,
    SurvivalData,
    brier_curve,
    brier_cv,
    fit_cox,
    integrate_brier,
    km,
    predict_survival,
    r_squared,
    reverse_km,
)
