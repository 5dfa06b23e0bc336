"""Two-stage spatial fusion of gauge and simulation extremes.

Stage 1 fits GEV margins per site; Stage 2 couples the six per-site parameters
of both sources through a linear model of coregionalization, with Stage-1
estimation error carried by a bootstrap covariance.
"""

from .bootstrap import (
    MeasurementCov,
    StackedObservations,
    block_bootstrap_stage1,
    build_measurement_cov,
    load_measurement_cov,
    save_measurement_cov,
    spd_repair,
    stack_stage1,
    wendland_c4,
)
from .data import (
    AnnualMaximaSeries,
    Dataset,
    Site,
    completeness_filter,
    distance_matrix,
    haversine_km,
    load_dataset,
    save_dataset,
)
from .exceptions import ConvergenceError, DataError, GevFusionError
from .krige import KrigingResult, Location, ReturnLevelEstimate, krige_grid, krige_point, return_level_from_kriging
from .lmc import LmcParams, cross_source_correlations, fit_lmc, nll, nll_and_grad, nll_grad, sigma_obs
from .marginal import (
    GevFitResult,
    GevParams,
    ad_gof,
    fit_gev,
    gev_cdf,
    gev_logpdf,
    return_level,
    return_level_gradient,
    trend_test,
)
from .validate import (
    CvReport,
    LooSiteResult,
    geographic_block_cv,
    identifiability_study,
    loo_block,
    pit_and_coverage,
    rmse_decomposition,
    saturation_experiment,
    simulate_dataset,
)

__version__ = "0.1.0"
