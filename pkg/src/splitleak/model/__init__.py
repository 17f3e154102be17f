from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .tokenizer import Tokenizer
from .train import TrainLog, pad_batch, toy_train
from .transformer import (FFN_KINDS, LAYER_KINDS, Block, LayerRef, ModelConfig, SplitModel,
                          init_model, silu)

__all__ = [
    "Block", "CheckpointError", "FFN_KINDS", "LAYER_KINDS", "LayerRef", "ModelConfig",
    "SplitModel", "Tokenizer", "TrainLog", "init_model", "load_checkpoint", "pad_batch",
    "save_checkpoint", "silu", "toy_train",
]
