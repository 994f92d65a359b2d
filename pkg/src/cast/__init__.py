"""Continuous-time treatment-effect trajectories from right-censored survival data.

The package estimates per-horizon doubly-robust treatment effects with honest
regression forests and fuses them into smooth effect trajectories (weighted
quadratic and cross-validated smoothing spline), with propensity modeling,
SHAP-based heterogeneity analysis, a refutation-test harness, and a synthetic
cohort generator used as the test oracle.
"""

__version__ = "0.1.0"
