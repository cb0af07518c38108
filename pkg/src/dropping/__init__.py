"""Dropping networks: bagged, dropout-trained ensembles for few-shot transfer
between sentence-pair tasks, built on a small numpy autodiff engine."""

from .data import PairDataset, SynthSpec, load_pairs, synth_task
from .encoders import ModelConfig, PairModel, load_model, save_model
from .ensemble import (BagConfig, DroppingEnsemble, ensemble_predict, load_ensemble,
                       save_ensemble, train_dropping_ensemble)
from .errors import (ConfigurationError, DroppingError, InputError, NumericError, RankError,
                     ShapeError, StateError)
from .smoothing import SmootherConfig
from .training import TrainConfig
from .transfer import (GammaSchedule, TransferPlan, few_shot_dropping_transfer, run_transfer,
                       train_target_only, zero_shot_eval)

__version__ = "0.1.0"
