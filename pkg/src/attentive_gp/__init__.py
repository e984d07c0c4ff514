"""Attention encoder-decoder feature extractor with an exact GP output layer.

Submodules: ``autodiff`` (reverse-mode tape), ``model`` (encoder-decoder),
``gp`` (exact and KISS marginal likelihoods), ``trainer`` (block-wise and
full-batch training), ``data`` (synthetic tasks and CSV), ``evaluation``
(prediction, generation, metrics), ``config`` and ``cli``.
"""

from .data import SequenceDataset, gen_load, gen_sin, gen_suspension, normalize
from .evaluation import FeatureCache, generate, predict
from .gp import GPHyperparams, GPPosterior, gp_nll, gp_predict, kiss_nll
from .model import AttentiveGP, ModelConfig
from .trainer import TrainConfig, blockwise_train, fullbatch_train

__version__ = "0.1.0"

__all__ = [
    "AttentiveGP", "FeatureCache", "GPHyperparams", "GPPosterior", "ModelConfig",
    "SequenceDataset", "TrainConfig", "blockwise_train", "fullbatch_train", "gen_load",
    "gen_sin", "gen_suspension", "generate", "gp_nll", "gp_predict", "kiss_nll",
    "normalize", "predict",
]
