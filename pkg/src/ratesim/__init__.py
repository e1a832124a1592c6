"""ratesim: data-driven simulation of vehicular cellular link data rates.

Pipeline: ingest or synthesize drive-test traces, train a random-forest data
rate predictor, turn it probabilistic with a GPR derivation model, aggregate
measurements into a connectivity map, and replay traces through opportunistic
transmission schemes to evaluate and optimize them.
"""

from .connmap import ConnectivityMap, grid_key
from .derivation import (
    DerivationModel,
    KernelConfig,
    VirtualMeasurement,
    fit_derivation,
    sample_virtual,
    synthesize_profile,
)
from .engine import RunConfig, RunResult, TransmissionEvent, benchmark, replay, sweep
from .errors import (
    ConfigError,
    DataError,
    ModelError,
    RatesimError,
    TraceParseError,
    ZeroVarianceError,
)
from .metrics import Ecdf, ecdf, ecdf_similarity, mean_ci
from .regression import (
    EvaluationReport,
    LeastSquaresPredictor,
    MeanPredictor,
    RegressionForest,
    RegressionTree,
    TreeParams,
    cross_matrix,
    cross_validate,
    forest_trainer,
    mdi_importance,
    mean_trainer,
    ols_trainer,
    r_squared,
    train_forest,
    train_tree,
)
from .schemes import (
    MetricSample,
    SchemeConfig,
    SchemeState,
    decide,
    default_config,
    metric_source,
    normalize_metric,
    tx_probability,
    z_factor,
)
from .trace import (
    CANONICAL_COLUMNS,
    FEATURE_NAMES,
    ContextSample,
    SyntheticSpec,
    Trace,
    TransmissionRecord,
    emit_trace,
    generate_synthetic_scenario,
    ingest_trace,
    project_position,
    unproject_position,
)

__version__ = "0.1.0"
