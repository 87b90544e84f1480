"""Regional key point shifts as a temporal feature for video classification."""
from .arese import arese_forward, extract_key_points, key_point_shifts, shift_weights
from .config import RunConfig, load_run_config, parse_run_config
from .errors import (ConfigError, DivergenceError, FormatError, KpshiftError, NeedTwoFramesError,
                     ShapeError)
from .grad import finite_diff_check, forward_with_tape, kpsem_backward, run_gradcheck
from .head import KpsemParams, fuse_features, init_params, kpsem_forward, temporal_extent
from .partition import SeparationNet, build_partition, compute_adaptive_bias
from .synth import SyntheticVideoSpec, generate_dataset
from .tensor import tensor_io_read, tensor_io_write
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DivergenceError", "FormatError", "KpshiftError", "KpsemParams",
    "NeedTwoFramesError", "RunConfig", "SeparationNet", "ShapeError", "SyntheticVideoSpec",
    "TrainConfig", "arese_forward", "build_partition", "compute_adaptive_bias", "evaluate",
    "extract_key_points", "finite_diff_check", "forward_with_tape", "fuse_features",
    "generate_dataset", "init_params", "key_point_shifts", "kpsem_backward", "kpsem_forward",
    "load_run_config", "parse_run_config", "run_gradcheck", "shift_weights", "temporal_extent",
    "tensor_io_read", "tensor_io_write", "train",
]
