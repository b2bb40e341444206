"""Layered recurrent models and their JSON container format.

A model is an ordered stack of layers of one homogeneous kind.  Weights are
exact rationals until `cast_model` moves them to the f64 backend; the
container stores every entry as a string so either backend reloads
bit-exactly.  See docs/model-format.md for the field-by-field reference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .linalg import EXACT, F64, Matrix, Vector, as_exact, as_float, format_number

LINEAR_RNN = "linear_rnn"
GATED_LINEAR_RNN = "gated_linear_rnn"
RNN = "rnn"
GATED_RNN = "gated_rnn"
GRU_STACK = "gru_stack"
LSTM_STACK = "lstm_stack"
HAWK_GRIFFIN_STACK = "hawk_griffin_stack"  # reserved tag, never emitted

MODEL_KINDS = (LINEAR_RNN, GATED_LINEAR_RNN, RNN, GATED_RNN, GRU_STACK, LSTM_STACK)
FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class LinOp:
    A: Matrix
    b: Vector


# an MLP is a tuple of LinOp and the literal string "relu"
MLP = tuple


@dataclass(frozen=True)
class StateLayer:
    """State update s' = [ReLU](A s + B x + b) plus read-out phi (and gate gamma).

    gamma is None for ungated layers; a gated executor treats that as an
    all-ones gate.
    """

    A: Matrix
    B: Matrix
    b: Vector
    s0: Vector
    phi: MLP = ()
    gamma: MLP | None = None


@dataclass(frozen=True)
class GRULayer:
    W_z: Matrix
    U_z: Matrix
    b_z: Vector
    W_r: Matrix
    U_r: Matrix
    b_r: Vector
    W_h: Matrix
    U_h: Matrix
    b_h: Vector
    h0: Vector
    role: str = ""


@dataclass(frozen=True)
class LSTMLayer:
    W_f: Matrix
    U_f: Matrix
    b_f: Vector
    W_i: Matrix
    U_i: Matrix
    b_i: Vector
    W_o: Matrix
    U_o: Matrix
    b_o: Vector
    W_c: Matrix
    U_c: Matrix
    b_c: Vector
    h0: Vector
    c0: Vector
    role: str = ""


@dataclass(frozen=True)
class RecurrentModel:
    """Immutable, shareable compiled model.

    `readout`, present on GRU/LSTM stacks, maps the last layer's hidden
    vector to the model output (a block selection for canonical models, a
    signed recombination when sign-split blocks were needed).
    """

    kind: str
    input_dim: int
    output_dim: int
    layers: tuple
    backend: str = EXACT
    readout: Matrix | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelError("unsupported model kind %r" % self.kind)

    def with_layers(self, layers, **kw) -> "RecurrentModel":
        return replace(self, layers=tuple(layers), **kw)


# ---------------------------------------------------------------------------
# backend casting
# ---------------------------------------------------------------------------


def _cast_vec(v: Vector, conv) -> Vector:
    return tuple(conv(x) for x in v)


def _cast_mlp(mlp, conv_m, conv_v):
    out = []
    for op in mlp:
        if op == "relu":
            out.append("relu")
        else:
            out.append(LinOp(conv_m(op.A), _cast_vec(op.b, conv_v)))
    return tuple(out)


def _cast_layer(layer, conv_m, conv_v):
    if isinstance(layer, StateLayer):
        return StateLayer(
            conv_m(layer.A),
            conv_m(layer.B),
            _cast_vec(layer.b, conv_v),
            _cast_vec(layer.s0, conv_v),
            _cast_mlp(layer.phi, conv_m, conv_v),
            None if layer.gamma is None else _cast_mlp(layer.gamma, conv_m, conv_v),
        )
    if isinstance(layer, GRULayer):
        return GRULayer(
            conv_m(layer.W_z), conv_m(layer.U_z), _cast_vec(layer.b_z, conv_v),
            conv_m(layer.W_r), conv_m(layer.U_r), _cast_vec(layer.b_r, conv_v),
            conv_m(layer.W_h), conv_m(layer.U_h), _cast_vec(layer.b_h, conv_v),
            _cast_vec(layer.h0, conv_v), layer.role,
        )
    if isinstance(layer, LSTMLayer):
        return LSTMLayer(
            conv_m(layer.W_f), conv_m(layer.U_f), _cast_vec(layer.b_f, conv_v),
            conv_m(layer.W_i), conv_m(layer.U_i), _cast_vec(layer.b_i, conv_v),
            conv_m(layer.W_o), conv_m(layer.U_o), _cast_vec(layer.b_o, conv_v),
            conv_m(layer.W_c), conv_m(layer.U_c), _cast_vec(layer.b_c, conv_v),
            _cast_vec(layer.h0, conv_v), _cast_vec(layer.c0, conv_v), layer.role,
        )
    raise ModelError("unknown layer type %r" % type(layer).__name__)


def cast_model(model: RecurrentModel, backend: str) -> RecurrentModel:
    """Convert every weight to the requested backend; exact -> f64 is lossy
    in general, f64 -> exact is always faithful (binary floats are rationals)."""
    if backend == model.backend:
        return model
    if backend == F64:
        conv_m, conv_v = (lambda m: m.to_float()), as_float
    elif backend == EXACT:
        conv_m, conv_v = (lambda m: m.to_exact()), (lambda x: Fraction(x))
    else:
        raise ModelError("unknown backend %r" % backend)
    return replace(
        model,
        backend=backend,
        layers=tuple(_cast_layer(l, conv_m, conv_v) for l in model.layers),
        readout=None if model.readout is None else conv_m(model.readout),
        metadata=dict(model.metadata, backend=backend),
    )


# ---------------------------------------------------------------------------
# parameter walk (noise injection, statistics)
# ---------------------------------------------------------------------------

_GRU_FIELDS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h", "h0")
_LSTM_FIELDS = (
    "W_f", "U_f", "b_f", "W_i", "U_i", "b_i", "W_o", "U_o", "b_o", "W_c", "U_c", "b_c",
    "h0", "c0",
)


def layer_param_names(layer) -> tuple[str, ...]:
    """Documented deterministic parameter order within one layer."""
    if isinstance(layer, StateLayer):
        names = ["A", "B", "b", "s0"]
        for i, op in enumerate(layer.phi):
            if op != "relu":
                names.append("phi.%d" % i)
        if layer.gamma is not None:
            for i, op in enumerate(layer.gamma):
                if op != "relu":
                    names.append("gamma.%d" % i)
        return tuple(names)
    if isinstance(layer, GRULayer):
        return _GRU_FIELDS
    if isinstance(layer, LSTMLayer):
        return _LSTM_FIELDS
    raise ModelError("unknown layer type")


def get_layer_param(layer, name: str):
    if "." in name:
        head, idx = name.split(".")
        op = getattr(layer, head)[int(idx)]
        return op  # a LinOp
    return getattr(layer, name)


def set_layer_param(layer, name: str, value):
    if "." in name:
        head, idx = name.split(".")
        ops = list(getattr(layer, head))
        ops[int(idx)] = value
        return replace(layer, **{head: tuple(ops)})
    return replace(layer, **{name: value})


# ---------------------------------------------------------------------------
# JSON container
# ---------------------------------------------------------------------------


def _matrix_to_json(m: Matrix) -> dict:
    return {
        "rows": m.rows,
        "cols": m.cols,
        "nz": [[i, j, format_number(v)] for (i, j), v in m.nonzero_items()],
    }


def _matrix_from_json(d: dict, parse) -> Matrix:
    return Matrix(d["rows"], d["cols"], {(i, j): parse(s) for i, j, s in d["nz"]})


def _vec_to_json(v: Vector) -> list:
    return [format_number(x) for x in v]


def _vec_from_json(vals, parse) -> Vector:
    return tuple(parse(s) for s in vals)


def _mlp_to_json(mlp) -> list:
    out = []
    for op in mlp:
        if op == "relu":
            out.append("relu")
        else:
            out.append({"A": _matrix_to_json(op.A), "b": _vec_to_json(op.b)})
    return out


def _mlp_from_json(items, parse):
    out = []
    for it in items:
        if it == "relu":
            out.append("relu")
        else:
            out.append(LinOp(_matrix_from_json(it["A"], parse), _vec_from_json(it["b"], parse)))
    return tuple(out)


def _layer_to_json(layer) -> dict:
    if isinstance(layer, StateLayer):
        return {
            "type": "state",
            "A": _matrix_to_json(layer.A),
            "B": _matrix_to_json(layer.B),
            "b": _vec_to_json(layer.b),
            "s0": _vec_to_json(layer.s0),
            "phi": _mlp_to_json(layer.phi),
            "gamma": None if layer.gamma is None else _mlp_to_json(layer.gamma),
        }
    if isinstance(layer, GRULayer):
        d = {"type": "gru", "role": layer.role}
        for f in _GRU_FIELDS:
            v = getattr(layer, f)
            d[f] = _matrix_to_json(v) if isinstance(v, Matrix) else _vec_to_json(v)
        return d
    if isinstance(layer, LSTMLayer):
        d = {"type": "lstm", "role": layer.role}
        for f in _LSTM_FIELDS:
            v = getattr(layer, f)
            d[f] = _matrix_to_json(v) if isinstance(v, Matrix) else _vec_to_json(v)
        return d
    raise ModelError("unknown layer type")


def _layer_from_json(d: dict, parse):
    t = d["type"]
    if t == "state":
        return StateLayer(
            _matrix_from_json(d["A"], parse),
            _matrix_from_json(d["B"], parse),
            _vec_from_json(d["b"], parse),
            _vec_from_json(d["s0"], parse),
            _mlp_from_json(d["phi"], parse),
            None if d["gamma"] is None else _mlp_from_json(d["gamma"], parse),
        )
    if t == "gru":
        kw = {}
        for f in _GRU_FIELDS:
            kw[f] = (
                _vec_from_json(d[f], parse) if f in ("h0",) or f.startswith("b")
                else _matrix_from_json(d[f], parse)
            )
        return GRULayer(role=d.get("role", ""), **kw)
    if t == "lstm":
        kw = {}
        for f in _LSTM_FIELDS:
            kw[f] = (
                _vec_from_json(d[f], parse) if f in ("h0", "c0") or f.startswith("b")
                else _matrix_from_json(d[f], parse)
            )
        return LSTMLayer(role=d.get("role", ""), **kw)
    raise ModelError("unknown layer type %r in container" % t)


def model_to_json(model: RecurrentModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "backend": model.backend,
        "input_dim": model.input_dim,
        "output_dim": model.output_dim,
        "layers": [_layer_to_json(l) for l in model.layers],
        "readout": None if model.readout is None else _matrix_to_json(model.readout),
        "metadata": model.metadata,
    }


def model_from_json(doc: dict) -> RecurrentModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelError("unsupported container version %r" % doc.get("format_version"))
    kind = doc["kind"]
    if kind == HAWK_GRIFFIN_STACK:
        raise ModelError("kind %r is reserved and not implemented" % kind)
    backend = doc["backend"]
    if backend == F64:
        parse = lambda s: float(s)  # noqa: E731
    elif backend == EXACT:
        parse = lambda s: Fraction(s)  # noqa: E731
    else:
        raise ModelError("unknown backend %r in container" % backend)
    return RecurrentModel(
        kind=kind,
        input_dim=doc["input_dim"],
        output_dim=doc["output_dim"],
        layers=tuple(_layer_from_json(l, parse) for l in doc["layers"]),
        backend=backend,
        readout=None if doc["readout"] is None else _matrix_from_json(doc["readout"], parse),
        metadata=doc.get("metadata", {}),
    )


def save_model(model: RecurrentModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_json(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> RecurrentModel:
    with open(path) as fh:
        return model_from_json(json.load(fh))
