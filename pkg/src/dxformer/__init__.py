"""DXFormer: temporal action segmentation with dual dilated windowed attention."""
from .attention import BlockSpec, window_size, windowed_attention
from .data_io import Checkpoint, ClassMapping, SegmentationSample, load_checkpoint, save_checkpoint
from .errors import DXFormerError
from .kernels import available_backends, get_backend, set_backend
from .metrics import MetricsReport, edit_score, evaluate_split, f1_at_k, frame_accuracy
from .model import DXFormer, ModelConfig, dxformer_forward, init_params
from .tensor import Tensor
from .training import TrainConfig, evaluate, seg_loss, train

__version__ = "0.1.0"

__all__ = [
    "BlockSpec", "Checkpoint", "ClassMapping", "DXFormer", "DXFormerError", "MetricsReport", "ModelConfig",
    "SegmentationSample", "Tensor", "TrainConfig", "available_backends", "dxformer_forward", "edit_score",
    "evaluate", "evaluate_split", "f1_at_k", "frame_accuracy", "get_backend", "init_params", "load_checkpoint",
    "save_checkpoint", "seg_loss", "set_backend", "train", "window_size", "windowed_attention",
]
