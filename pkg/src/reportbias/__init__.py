"""Visual classifiers that separate what is present from what people mention."""

from .baselines import BaselineKind, MultiHeadParams, build_baseline, multihead_predict
from .corpus import Corpus, read_jsonl, write_jsonl
from .errors import (CheckpointError, CheckpointVersionError, ConfigError,
                     CorruptCheckpointError, DimensionMismatchError, InvalidInputError,
                     NumericalError)
from .model import (ModelParams, init_params, loss, loss_and_grad, marginalize,
                    model_forward, noisy_or, predict)
from .synthgen import GeneratorConfig, sample_corpus, true_bias
from .trainer import TrainConfig, gradient_check, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
