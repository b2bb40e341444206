"""Execution backends: exact rationals and 64-bit floats.

Graphs and models are immutable and shareable; a session is single-owner and
carries the only mutable state (the LinState / hidden vectors).  Sessions are
streaming: feed one token at a time, read one output per token.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, replace
from fractions import Fraction

from . import models as M
from .graph import CONCAT, INPUT, LIN, LINSTATE, MULTI, RELU, ComputationGraph, NodeId
from .linalg import (
    BACKENDS,
    EXACT,
    F64,
    BackendError,
    Matrix,
    Vector,
    as_exact,
    as_float,
    format_number,
    parse_number,
    relu_scalar,
    vec_add,
    vec_hadamard,
    vec_relu,
)


def _coerce_token(token, dim: int, backend: str) -> Vector:
    if isinstance(token, (int, float, Fraction)):
        token = (token,)
    if len(token) != dim:
        raise ValueError("token of dim %d where %d expected" % (len(token), dim))
    if backend == EXACT:
        return tuple(as_exact(v) for v in token)
    if backend == F64:
        return tuple(as_float(v) for v in token)
    raise BackendError("unknown backend %r" % backend)


def _zero(backend: str):
    return Fraction(0) if backend == EXACT else 0.0


def _one(backend: str):
    return Fraction(1) if backend == EXACT else 1.0


def _cast_matrix(m: Matrix, backend: str) -> Matrix:
    return m if backend == EXACT else m.to_float()


def _cast_vec(v, backend: str) -> Vector:
    return tuple(v) if backend == EXACT else tuple(as_float(x) for x in v)


# ---------------------------------------------------------------------------
# graph interpretation (the reference semantics)
# ---------------------------------------------------------------------------


class GraphSession:
    """Step-by-step evaluation of a computation DAG.

    Per token, nodes evaluate in topological order; a LinState node reads the
    state written at the previous step and its output this step is the
    freshly updated state.
    """

    def __init__(self, graph: ComputationGraph, backend: str = EXACT):
        if backend not in BACKENDS:
            raise BackendError("unknown backend %r" % backend)
        self.graph = graph
        self.backend = backend
        self.order = graph.topo_order()
        self.step_count = 0
        self._zero = _zero(backend)
        self._weights = {}
        self.states: dict[NodeId, Vector] = {}
        for nid in self.order:
            n = graph.nodes[nid]
            if n.kind == LIN:
                self._weights[nid] = (_cast_matrix(n.A, backend), _cast_vec(n.b, backend))
            elif n.kind == LINSTATE:
                self._weights[nid] = (
                    _cast_matrix(n.A, backend),
                    _cast_matrix(n.B, backend),
                    _cast_vec(n.b, backend),
                )
                self.states[nid] = _cast_vec(n.s0, backend)

    def step(self, token) -> Vector:
        g = self.graph
        x = _coerce_token(token, g.nodes[g.input_id].out_dim, self.backend)
        values: dict[NodeId, Vector] = {}
        for nid in self.order:
            n = g.nodes[nid]
            if n.kind == INPUT:
                values[nid] = x
            elif n.kind == LIN:
                A, b = self._weights[nid]
                values[nid] = vec_add(A.matvec(values[n.inputs[0]], self._zero), b)
            elif n.kind == RELU:
                values[nid] = vec_relu(values[n.inputs[0]])
            elif n.kind == LINSTATE:
                A, B, b = self._weights[nid]
                s = vec_add(
                    vec_add(A.matvec(self.states[nid], self._zero),
                            B.matvec(values[n.inputs[0]], self._zero)),
                    b,
                )
                self.states[nid] = s
                values[nid] = s
            elif n.kind == CONCAT:
                parts = []
                for src in n.inputs:
                    parts.extend(values[src])
                values[nid] = tuple(parts)
            elif n.kind == MULTI:
                v = values[n.inputs[0]]
                h = len(v) // 2
                values[nid] = vec_hadamard(v[:h], v[h:])
            else:
                raise ValueError("unknown node kind %r" % n.kind)
        self.step_count += 1
        return values[g.output_id]

    def state_of(self, nid: NodeId) -> Vector:
        return self.states[nid]


def interpret(graph: ComputationGraph, sequence, backend: str = EXACT) -> list[Vector]:
    """Reference semantics: outputs of the sink node, one per token."""
    sess = GraphSession(graph, backend)
    return [sess.step(tok) for tok in sequence]


# ---------------------------------------------------------------------------
# model execution
# ---------------------------------------------------------------------------


def apply_mlp(mlp, x: Vector, zero) -> Vector:
    for op in mlp:
        if op == "relu":
            x = vec_relu(x)
        else:
            x = vec_add(op.A.matvec(x, zero), op.b)
    return x


class ModelSession:
    """Streaming executor for any of the six model kinds."""

    def __init__(self, model: M.RecurrentModel, backend: str | None = None):
        if backend is not None and backend != model.backend:
            raise BackendError(
                "model is on backend %r, requested %r; use cast_model"
                % (model.backend, backend)
            )
        self.model = model
        self.backend = model.backend
        self._zero = _zero(self.backend)
        self._one = _one(self.backend)
        self.step_count = 0
        self.states: list = []
        for layer in model.layers:
            if isinstance(layer, M.StateLayer):
                self.states.append(layer.s0)
            elif isinstance(layer, M.GRULayer):
                self.states.append(layer.h0)
            else:
                self.states.append((layer.h0, layer.c0))

    def step(self, token) -> Vector:
        x = _coerce_token(token, self.model.input_dim, self.backend)
        kind = self.model.kind
        for idx, layer in enumerate(self.model.layers):
            if isinstance(layer, M.StateLayer):
                x = self._state_layer_step(idx, layer, x, kind)
            elif isinstance(layer, M.GRULayer):
                x = self._gru_step(idx, layer, x)
            else:
                x = self._lstm_step(idx, layer, x)
        if self.model.readout is not None:
            x = self.model.readout.matvec(x, self._zero)
        self.step_count += 1
        return x

    def _state_layer_step(self, idx, layer, x, kind) -> Vector:
        z = self._zero
        s = vec_add(
            vec_add(layer.A.matvec(self.states[idx], z), layer.B.matvec(x, z)), layer.b
        )
        if kind in (M.RNN, M.GATED_RNN):
            s = vec_relu(s)
        self.states[idx] = s
        y = apply_mlp(layer.phi, s, z)
        if kind in (M.GATED_LINEAR_RNN, M.GATED_RNN) and layer.gamma is not None:
            y = vec_hadamard(apply_mlp(layer.gamma, x, z), y)
        return y

    def _gru_step(self, idx, layer, a) -> Vector:
        z0, one = self._zero, self._one
        h = self.states[idx]

        def gate(W, U, b):
            return vec_relu(vec_add(vec_add(W.matvec(a, z0), U.matvec(h, z0)), b))

        zt = gate(layer.W_z, layer.U_z, layer.b_z)
        rt = gate(layer.W_r, layer.U_r, layer.b_r)
        hh = vec_relu(
            vec_add(
                vec_add(layer.W_h.matvec(a, z0), layer.U_h.matvec(vec_hadamard(rt, h), z0)),
                layer.b_h,
            )
        )
        h_new = tuple(
            (one - zi) * hi + zi * ci for zi, hi, ci in zip(zt, h, hh)
        )
        self.states[idx] = h_new
        return h_new

    def _lstm_step(self, idx, layer, a) -> Vector:
        z0 = self._zero
        h, c = self.states[idx]

        def gate(W, U, b):
            return vec_relu(vec_add(vec_add(W.matvec(a, z0), U.matvec(h, z0)), b))

        ft = gate(layer.W_f, layer.U_f, layer.b_f)
        it = gate(layer.W_i, layer.U_i, layer.b_i)
        ot = gate(layer.W_o, layer.U_o, layer.b_o)
        cc = gate(layer.W_c, layer.U_c, layer.b_c)
        c_new = vec_add(vec_hadamard(ft, c), vec_hadamard(it, cc))
        h_new = vec_hadamard(ot, vec_relu(c_new))
        self.states[idx] = (h_new, c_new)
        return h_new


def run_model(model: M.RecurrentModel, sequence, backend: str | None = None) -> list[Vector]:
    sess = ModelSession(model, backend)
    return [sess.step(tok) for tok in sequence]


# ---------------------------------------------------------------------------
# parameter noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """Multiplicative Gaussian noise on non-zero parameters only.

    Every non-zero weight p becomes p * (1 + eps) with eps ~ N(0, sigma^2),
    drawn layer-major then parameter-major (documented order in
    models.layer_param_names) then row-major within a matrix.  Structural
    zeros are never visited, so they stay exactly zero.
    """

    sigma: float
    seed: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def _perturb_matrix(m: Matrix, rng, sigma) -> Matrix:
    entries = {}
    for (i, j), v in m.nonzero_items():
        entries[(i, j)] = v * (1.0 + rng.gauss(0.0, sigma))
    return Matrix(m.rows, m.cols, entries)


def _perturb_vector(v, rng, sigma) -> Vector:
    out = []
    for x in v:
        if x == 0:
            out.append(x)
        else:
            out.append(x * (1.0 + rng.gauss(0.0, sigma)))
    return tuple(out)


def add_noise(model: M.RecurrentModel, spec: NoiseSpec) -> M.RecurrentModel:
    """A perturbed copy of the model; the input model is untouched.

    sigma = 0 returns the model unchanged (bit-identical).  sigma > 0
    requires the f64 backend: cast first.  The stack readout, being part of
    the output wiring rather than a learned-looking weight, is not perturbed.
    """
    if spec.sigma == 0:
        return model
    if model.backend != F64:
        raise BackendError("noise injection needs an f64 model; use cast_model first")
    rng = random.Random(spec.seed)
    new_layers = []
    for layer in model.layers:
        for name in M.layer_param_names(layer):
            param = M.get_layer_param(layer, name)
            if isinstance(param, M.LinOp):
                param = M.LinOp(
                    _perturb_matrix(param.A, rng, spec.sigma),
                    _perturb_vector(param.b, rng, spec.sigma),
                )
            elif isinstance(param, Matrix):
                param = _perturb_matrix(param, rng, spec.sigma)
            else:
                param = _perturb_vector(param, rng, spec.sigma)
            layer = M.set_layer_param(layer, name, param)
        new_layers.append(layer)
    return replace(model, layers=tuple(new_layers))


# ---------------------------------------------------------------------------
# sequence CSV files
# ---------------------------------------------------------------------------


def write_sequence(path, sequence, dim: int | None = None) -> None:
    """One token per row, header x0..x{d-1}; exact values print as p/q."""
    seq = list(sequence)
    if dim is None:
        if not seq:
            raise ValueError("cannot infer dim of an empty sequence; pass dim=")
        dim = len(seq[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x%d" % i for i in range(dim)])
        for tok in seq:
            if len(tok) != dim:
                raise ValueError("token width %d != %d" % (len(tok), dim))
            w.writerow([format_number(v) for v in tok])


def read_sequence(path) -> list[Vector]:
    """Tokens as exact rationals; cast at the session boundary as needed."""
    out: list[Vector] = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None:
            raise ValueError("sequence file %s has no header" % path)
        dim = len(header)
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            if len(row) != dim:
                raise ValueError("%s:%d: expected %d columns, got %d" % (path, lineno, dim, len(row)))
            out.append(tuple(parse_number(cell) for cell in row))
    return out
