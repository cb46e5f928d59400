"""Federated learning simulator with a tail-focused training objective."""

from .data import (
    DeviceShard,
    Example,
    Population,
    gen_gaussian_mixture,
    gen_hetero_logistic,
    load_devices_jsonl,
    save_devices_jsonl,
    split_devices,
    weights_by_count,
)
from .federation import (
    AMResult,
    CertifiedGradientDescent,
    DeviceObjective,
    EvalSnapshot,
    FederatedRun,
    FederationConfig,
    PowerLawSchedule,
    RoundLog,
    am_meta,
    deltafl_round,
    fedavg_round,
    local_update,
    lr_schedule,
    population_objectives,
    quadratic_objectives,
    run_federated,
    smoothed_full_gradient,
)
from .metrics import (
    DeviceMetricTable,
    histogram,
    percentile,
    scatter_export,
    summarize,
    summary_export,
    table_from_population,
)
from .models import LossSpec, device_error, device_grad, device_loss, init_params, point_grad, point_loss
from .secure_agg import (
    AggregationTranscript,
    MMQuantileResult,
    PinballSpec,
    audit_transcript,
    make_masked_aggregator,
    masked_weighted_sum,
    mm_quantile,
    pinball_loss,
    plain_weighted_sum,
    secure_quantile_for_round,
)
from .superquantile import (
    ConformityLevel,
    MixtureWeights,
    SmoothingParam,
    WeightedValues,
    conformity,
    in_feasible_set,
    plus_objective,
    smoothed_device_coefficients,
    smoothed_eta_minimizers,
    smoothed_eta_star,
    smoothed_objective,
    smoothed_objective_slope,
    smoothed_plus,
    smoothed_plus_derivative,
    superquantile,
    weighted_quantile,
)

__version__ = "0.1.0"
