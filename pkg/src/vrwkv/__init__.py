"""VRWKV image encoder in numpy: linear-time bidirectional WKV attention, token shift,
a hand-differentiated encoder, toy training and benchmarks."""

from vrwkv.kernel import (
    DegenerateInputError,
    NonFiniteInputError,
    RecurrenceError,
    WkvGradients,
    biwkv,
    biwkv_backward,
    biwkv_forward,
    biwkv_oracle,
    flops_estimate,
)
from vrwkv.model import (
    PRESETS,
    ModelConfig,
    count_params,
    init_params,
    model_backward,
    model_forward,
    param_breakdown,
    preset,
)
from vrwkv.shift import q_shift, token_shift, token_shift_backward

__version__ = "0.1.0"

__all__ = [
    "DegenerateInputError", "NonFiniteInputError", "RecurrenceError", "WkvGradients",
    "biwkv", "biwkv_backward", "biwkv_forward", "biwkv_oracle", "flops_estimate",
    "PRESETS", "ModelConfig", "count_params", "init_params", "model_backward", "model_forward",
    "param_breakdown", "preset", "q_shift", "token_shift", "token_shift_backward",
]
