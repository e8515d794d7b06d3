"""Sequential recommendation by temporally evolving aggregation.

Two learned energy terms score a candidate next item: a transition score
over the user's own behavior sequence and a unary score over the evolving
user-item neighborhood graph. Training contrasts targets against sampled
negatives; evaluation ranks held-out items under HR@K / NDCG@K.
"""

__version__ = "0.1.0"

from .data import PreparedDataset, prepare_dataset
from .evaluation import EvalConfig, evaluate_all
from .params import ModelParams, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "PreparedDataset", "prepare_dataset", "EvalConfig", "evaluate_all",
    "ModelParams", "init_params", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "train", "__version__",
]
