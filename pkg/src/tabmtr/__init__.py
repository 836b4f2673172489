"""FT-Transformer on a small numpy autodiff engine, with mask token replacement
(MTR) and baseline augmentations for tabular data."""

from .augment import AugmentationSpec
from .data import DatasetBundle, build_bundle, synth_generate
from .metrics import auc
from .model import ColumnSchema, ModelConfig, TabTransformer
from .training import TrainConfig, finetune, ssl_pretrain, supervised_train

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec", "ColumnSchema", "DatasetBundle", "ModelConfig", "TabTransformer",
    "TrainConfig", "auc", "build_bundle", "finetune", "ssl_pretrain", "supervised_train",
    "synth_generate",
]
