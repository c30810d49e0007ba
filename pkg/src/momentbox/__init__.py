"""Inference for conditional moment inequality models via box-indexed
KS-type statistics: exact statistic computation, subsampling and
rate-adaptive critical values, smoothness pre-tests, limit-law simulation,
and a Monte Carlo harness."""

from .designs import (DesignConfig, boundary_theta, exact_rate_exponent,
                      generate_design, true_boundary, upper_moment_model)
from .engine import (Box, KSResult, ks_statistic, min_box_exact,
                     min_interval_1d, scaled_statistic)
from .harness import (ci_upper_endpoint, coverage_experiment, decide_method,
                      excess_length_experiment, kolmogorov_distance,
                      local_power_curve, plugin_test, scaled_histogram)
from .limitsim import (ContactPointParams, GaussianField, ZSimConfig,
                       drift_infimum, drift_integral, simulate_Z,
                       simulate_gaussian_field, z_quantile)
from .models import (Aggregator, CallbackModel, Dataset, IntervalMeanModel,
                     IntervalMedianModel, MomentModel, aggregate,
                     evaluate_moments, load_interval_csv)
from .pretest import (ContactSetEstimate, KernelSpec, LocalFit, PretestPlan,
                      contact_point_params, default_bandwidth,
                      discretize_contact_points, estimate_contact_set,
                      hessian_pretest, local_quadratic_fit, run_pretest)
from .resampling import (EmpiricalDistribution, RatePlan, SubsamplePlan,
                         TestResult, adaptive_test, estimate_beta,
                         estimate_beta_a, fixed_rate_test,
                         subsample_distribution)

__version__ = "0.1.0"
