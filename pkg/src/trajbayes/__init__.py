"""Bayesian uncertainty for segmentation nets from SGD checkpoint trajectories."""

from .metrics import dice, ece, entropy_map, foreground_bbox
from .posterior import (EnsembleSpec, bn_recalibrate, deep_ensemble_train, ensemble_predict, mc_dropout_predict,
                        select_members, swa_average, temperature_scale)
from .segnet import NetConfig, ProbabilisticPrediction, SegNet, build, predict_proba
from .synthdata import Dataset, PhantomParams, generate_split
from .tensor import ParamSet, Rng
from .trainer import CheckpointStore, TrainConfig, lr_cyclical, lr_poly, train

__version__ = "0.1.0"
