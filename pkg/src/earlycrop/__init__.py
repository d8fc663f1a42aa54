"""Attention-transformer crop classification with relevance-derived timeframes."""

from .dataio import (DateAxis, Dataset, SynthConfig, TimeSeriesSample, generate_synthetic,
                     load_dataset, save_dataset, split_spatial)
from .errors import (ConfigError, EarlyCropError, InferenceError, ModelFormatError,
                     NumericError, ParseError, PruningError, SchemaError, SplitError,
                     TrainingError)
from .experiments import (EarlinessResult, PruneCurve, curve_auc, earliness_experiment,
                          prune_curve_random, prune_curve_targeted)
from .lrp import LrpConfig, RelevanceMap, conservation_gap, relevance_map, timestep_relevance
from .model import (ForwardTrace, ModelConfig, Parameters, forward, init_model, load_params,
                    predict, save_params)
from .timeframe import (RelevanceProfile, Timeframe, aggregate_relevance, bounding_window,
                        dominant_peaks, prune_to_window, top_n_timesteps)
from .train import Metrics, TrainConfig, evaluate, grad_check, loss_and_grad, train

__version__ = "0.1.0"
