"""Social recommendation with disentangled interest/social embeddings and
similarity-gated regulation of social influence."""

from .config import TrainConfig, load_config
from .dataset import DatasetBundle, InteractionRecord, SocialGraph, load_bundle, prepare, save_bundle
from .model import CDRSB, Recommender
from .train import TrainReport, fit, load_checkpoint, save_checkpoint

__all__ = [
    "CDRSB",
    "DatasetBundle",
    "InteractionRecord",
    "Recommender",
    "SocialGraph",
    "TrainConfig",
    "TrainReport",
    "fit",
    "load_bundle",
    "load_checkpoint",
    "load_config",
    "prepare",
    "save_bundle",
    "save_checkpoint",
]

__version__ = "0.1.0"
