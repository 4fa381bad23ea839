from .core import Denoiser, InjectionOverrides, TapBundle
from .dataset import CONDITION_KINDS, SamplePair, Scene, Shape, generate_dataset, read_dataset, write_dataset
from .model import LAYERS, ModelConfig, UNet
from .prompt import PromptEmbedding
from .train import TrainConfig, TrainingDiverged, train
from .weights import DenoiserWeights

__all__ = [
    "CONDITION_KINDS",
    "LAYERS",
    "Denoiser",
    "DenoiserWeights",
    "InjectionOverrides",
    "ModelConfig",
    "PromptEmbedding",
    "SamplePair",
    "Scene",
    "Shape",
    "TapBundle",
    "TrainConfig",
    "TrainingDiverged",
    "UNet",
    "generate_dataset",
    "read_dataset",
    "train",
    "write_dataset",
]
