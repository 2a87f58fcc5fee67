"""Minimal reverse-mode autodiff over numpy arrays."""
from .core import (
    DiffArray,
    NumericError,
    ShapeError,
    Tape,
    add,
    as_array,
    avg_pool2d,
    backward,
    clip,
    concat,
    conv2d,
    div,
    exp,
    log,
    matmul,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    upsample_nearest,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import Adam
from .params import CheckpointError, ParamStore, load_arrays, read_manifest

__all__ = [
    "Adam", "CheckpointError", "DiffArray", "GradCheckReport", "NumericError", "ParamStore",
    "ShapeError", "Tape", "add", "as_array", "avg_pool2d", "backward", "clip", "concat", "conv2d",
    "div", "exp", "grad_check", "load_arrays", "log", "matmul", "mul", "neg", "read_manifest",
    "reduce_mean", "reduce_sum", "relu", "reshape", "sigmoid", "softmax", "sub", "upsample_nearest",
]
