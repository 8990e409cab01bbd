"""Treatment effect estimation for clustered data with unmeasured
cluster-level confounding.

The estimator of interest weights each unit by the inverse conditional
probability of its observed treatment given the covariates and the
within-cluster treatment count; conditioning on the count removes any
cluster-level confounder from the weights.  Baseline inverse probability
weighting with fixed or random cluster intercepts, a naive contrast, a
sandwich variance, a cluster bootstrap, and the replication studies are
included for comparison.
"""

from importlib.metadata import PackageNotFoundError, version as _dist_version

from .cmle import CondFit, cond_loglik, cond_score, fit_cmle
from .cond_prob import (CondProbResult, LinearPredictors, cond_prob_binary,
                        cond_prob_bruteforce, cond_prob_multinomial)
from .data_model import (Dataset, DatasetSchema, SufficientStat,
                         filter_positivity, load_csv, save_csv)
from .errors import IcpwError, UsageError
from .estimators import (EffectEstimate, WeightTable, build_weight_table,
                         effect_contrast, icpw_mean_potential, icpw_tau,
                         naive_tau)
from .baselines import (PropensityFit, fit_fixed_logistic,
                        fit_random_logistic, ipw_tau_from_propensity,
                        predict_propensity)
from .inference import (PIPELINE_METHODS, cluster_bootstrap, icpw_tau_with_se,
                        make_pipeline, sandwich_beta_cov)
from .simulate import (ScenarioConfig, SimulationReport, generate_dataset,
                       render_report, run_replications)

try:
    __version__ = _dist_version("icpw")
except PackageNotFoundError:
    __version__ = "0+unknown"

__all__ = [
    "CondFit", "CondProbResult", "Dataset", "DatasetSchema",
    "EffectEstimate", "IcpwError", "LinearPredictors", "PIPELINE_METHODS",
    "PropensityFit", "ScenarioConfig", "SimulationReport", "SufficientStat",
    "UsageError", "WeightTable", "build_weight_table", "cluster_bootstrap",
    "cond_loglik", "cond_prob_binary", "cond_prob_bruteforce",
    "cond_prob_multinomial", "cond_score", "effect_contrast",
    "filter_positivity", "fit_cmle", "fit_fixed_logistic",
    "fit_random_logistic", "generate_dataset", "icpw_mean_potential",
    "icpw_tau", "icpw_tau_with_se", "ipw_tau_from_propensity", "load_csv",
    "make_pipeline", "naive_tau", "predict_propensity", "render_report",
    "run_replications", "sandwich_beta_cov", "save_csv", "__version__",
]
