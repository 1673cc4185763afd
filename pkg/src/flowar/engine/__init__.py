from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import FULL_SCALE_TRAIN, CodecConfig, DataConfig, ModelConfig, SampleConfig, TrainConfig
from .data import make_dataset
from .evaluate import EvalReport, evaluate
from .model import FlowARModel
from .sample import generate_latents, sample
from .train import Trainer, TrainingDiverged, load_model, save_model

__all__ = [
    "FULL_SCALE_TRAIN", "CheckpointError", "CodecConfig", "DataConfig", "EvalReport", "FlowARModel", "ModelConfig",
    "SampleConfig", "TrainConfig", "Trainer", "TrainingDiverged", "evaluate", "generate_latents", "load_model",
    "make_dataset", "read_checkpoint", "sample", "save_model", "write_checkpoint",
]
