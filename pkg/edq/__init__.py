"""
(©) EDQ Lab

Earliest-disagreement Q-evaluation on marked decision point processes.

- core_process: trajectories, intensities and thinning.
- disagreement: target-policy segments and the earliest-disagreement splice.
- simulators: the time-to-failure and tumor-growth environments.
- approximator: history featurization, the MLP Q-function and tabular tables.
- estimators: EDQ, discretized FQE, ERM and tabular training loops.
- oracle: exact values on small discrete processes.
- identifiability: local independence graphs and eliminability.
- evaluation: labeled test sets, normalized RMSE and the estimator grid.
"""

__version__ = "1.0.0"
