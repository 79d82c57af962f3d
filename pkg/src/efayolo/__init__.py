"""Lightweight attention detector on numpy: blocks, detector, analysis, formats and a small autodiff."""
from .analysis import analyze, count_flops, count_params, evaluate_detections, model_size_bytes
from .detector import Detection, Model, ModelConfig, build_model, decode, infer_image, nms
from .errors import ConfigError, DimensionError, EfaError, FormatError, GeometryError, InputError, NumericError
from .formats import load_config, load_ppm, parse_config, print_config, read_weights, write_weights

__version__ = "0.1.0"

__all__ = [
    "analyze", "count_flops", "count_params", "evaluate_detections", "model_size_bytes",
    "Detection", "Model", "ModelConfig", "build_model", "decode", "infer_image", "nms",
    "ConfigError", "DimensionError", "EfaError", "FormatError", "GeometryError", "InputError", "NumericError",
    "load_config", "load_ppm", "parse_config", "print_config", "read_weights", "write_weights",
]
