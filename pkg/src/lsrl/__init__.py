"""LSRL: a tiny language that compiles to exact weights for recurrent models."""

from .builder import ApproxParams, ProgramBuilder, ValueBounds, new_program
from .graph import ComputationGraph, Diagnostic, DimensionError, GraphError, Node, NodeId
from .linalg import EXACT, F64, BackendError, Matrix
from .models import (
    GATED_LINEAR_RNN,
    GATED_RNN,
    GRU_STACK,
    LINEAR_RNN,
    LSTM_STACK,
    RNN,
    RecurrentModel,
    cast_model,
    load_model,
    save_model,
)
from .runtime import (
    GraphSession,
    ModelSession,
    NoiseSpec,
    add_noise,
    interpret,
    read_sequence,
    run_model,
    write_sequence,
)

__all__ = [
    "ApproxParams",
    "ProgramBuilder",
    "ValueBounds",
    "new_program",
    "ComputationGraph",
    "Diagnostic",
    "DimensionError",
    "GraphError",
    "Node",
    "NodeId",
    "EXACT",
    "F64",
    "BackendError",
    "Matrix",
    "RecurrentModel",
    "cast_model",
    "load_model",
    "save_model",
    "LINEAR_RNN",
    "GATED_LINEAR_RNN",
    "RNN",
    "GATED_RNN",
    "GRU_STACK",
    "LSTM_STACK",
    "GraphSession",
    "ModelSession",
    "NoiseSpec",
    "add_noise",
    "interpret",
    "run_model",
    "read_sequence",
    "write_sequence",
]
