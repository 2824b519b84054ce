"""Missing-value imputation for multivariate time series with switching sparse networks."""
from .core import (FitReport, FitResult, Hyperparams, LatentFactors, ModelParams, Network,
                   PartialSeries, RegimePath, SmoothedPosterior, observed_slice)
from .em import fit, impute, initialize, linear_interpolate, sweep_num_regimes
from .evaluation import regime_accuracy, rmse
from .glasso import GlassoConfig, gaussian_ll, graphical_lasso
from .synth import SynthSpec, generate_dataset, inject_missing, zscore

__version__ = "0.1.0"
