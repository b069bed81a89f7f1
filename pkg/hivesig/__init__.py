from .audio_io import AudioClip, AugmentSpec, augment, discover_dataset, load_wav, resample, segment, write_wav
from .autograd import Tensor, conv2d, cross_entropy, dense, maxpool2d, batchnorm, batchnorm2d, softmax, softmax_cross_entropy
from .checkpoint import load_model, save_model
from .compress import (
    distill,
    distillation_loss,
    prune_layers,
    prune_neurons,
    quantize_head,
    size_report,
    softmax_with_temperature,
    total_loss,
)
from .config import PipelineConfig, load_config
from .errors import DataError, HiveSigError, InputError, PipelineOrderError
from .evalmetrics import BenchReport, ConfusionMatrix, accuracy, benchmark, confusion_matrix, f1_per_class, report
from .network import LayerSpec, Model, NetworkSpec, build_spec, build_student, build_teacher, count_params
from .quantization import QuantParams, calibrate, dequantize, quantize
from .tfrepr import TFImage, cochleagram, mel_spectrogram, rasterize, smoothed_spectrogram, spectrogram, stft
from .training import Dataset, load_manifest, train

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "AugmentSpec", "augment", "discover_dataset", "load_wav", "resample", "segment", "write_wav",
    "Tensor", "conv2d", "cross_entropy", "dense", "maxpool2d", "batchnorm", "batchnorm2d", "softmax", "softmax_cross_entropy",
    "load_model", "save_model",
    "distill", "distillation_loss", "prune_layers", "prune_neurons", "quantize_head", "size_report",
    "softmax_with_temperature", "total_loss",
    "PipelineConfig", "load_config",
    "DataError", "HiveSigError", "InputError", "PipelineOrderError",
    "BenchReport", "ConfusionMatrix", "accuracy", "benchmark", "confusion_matrix", "f1_per_class", "report",
    "LayerSpec", "Model", "NetworkSpec", "build_spec", "build_student", "build_teacher", "count_params",
    "QuantParams", "calibrate", "dequantize", "quantize",
    "TFImage", "cochleagram", "mel_spectrogram", "rasterize", "smoothed_spectrogram", "spectrogram", "stft",
    "Dataset", "load_manifest", "train",
]
