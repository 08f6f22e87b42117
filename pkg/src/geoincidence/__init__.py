"""Cell-level incidence maps from municipal case counts, and forecasts of them.

Modules
-------
geo_grid      grid, municipalities and membership tables
covariance    variogram models, point and block covariances
block_dss     block sequential simulation of cell incidence
baselines     per-cell ARMA and panel VAR forecasters
sird          municipal SIRD forecasts with pseudo-count blending
tensor_engine small reverse-mode autodiff engine with 3-D convolutions
stconvs2s     the spatio-temporal convolutional forecaster
evaluation    metrics and rolling-origin backtesting
pipeline      configuration, synthetic data and the CLI commands
"""
__version__ = "0.1.0"
