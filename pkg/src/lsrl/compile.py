"""Lowering a path graph onto layered recurrent models.

A layer is one LinState (or one Multi, in the gated case) plus the maximal
run of Lin/ReLU nodes that follows it.  A stateless prefix becomes a dummy
layer whose state is just a copy of the token (A = 0, B = I), so executing
the stack step-by-step reproduces the path graph node-for-node.
"""

from __future__ import annotations

from .graph import CONCAT, INPUT, LIN, LINSTATE, MULTI, RELU, GraphError
from .linalg import Matrix, zeros_vec
from .models import (
    GATED_LINEAR_RNN,
    LINEAR_RNN,
    LinOp,
    RecurrentModel,
    StateLayer,
)
from .passes import PathGraph


class CompileError(GraphError):
    pass


def _stateless(in_dim: int, phi) -> StateLayer:
    return StateLayer(
        A=Matrix.zeros(in_dim, in_dim),
        B=Matrix.identity(in_dim),
        b=zeros_vec(in_dim),
        s0=zeros_vec(in_dim),
        phi=tuple(phi),
    )


def _segments(path: PathGraph):
    """Split the path after its Input into marker nodes and trailing op runs.

    Yields (kind, node_or_None, ops, in_dim, origin_ids) where kind is
    'prefix', 'state' or 'gate'.
    """
    g = path.graph
    order = path.order
    if g.nodes[order[0]].kind != INPUT:
        raise CompileError("path does not start with the input node")
    segs = []
    cur_kind, cur_node, cur_ops = "prefix", None, []
    cur_in = g.nodes[order[0]].out_dim
    cur_origin = set()
    prev_dim = cur_in
    for nid in order[1:]:
        n = g.nodes[nid]
        if n.kind == LIN:
            cur_ops.append(LinOp(n.A, n.b))
            cur_origin.update(n.origin)
            prev_dim = n.out_dim
        elif n.kind == RELU:
            cur_ops.append("relu")
            cur_origin.update(n.origin)
            prev_dim = n.out_dim
        elif n.kind in (LINSTATE, MULTI):
            segs.append((cur_kind, cur_node, cur_ops, cur_in, frozenset(cur_origin)))
            cur_kind = "state" if n.kind == LINSTATE else "gate"
            cur_node, cur_ops = n, []
            cur_in = prev_dim
            cur_origin = set(n.origin)
            prev_dim = n.out_dim
        elif n.kind == CONCAT:
            # a path node has one predecessor, so a surviving Concat must be
            # single-input; fusion normally removes these
            if len(n.inputs) != 1:
                raise CompileError("multi-input Concat survived debranching")
            d = g.nodes[n.inputs[0]].out_dim
            cur_ops.append(LinOp(Matrix.identity(d), zeros_vec(d)))
            cur_origin.update(n.origin)
            prev_dim = n.out_dim
        else:
            raise CompileError("unexpected node kind %r on path" % n.kind)
    segs.append((cur_kind, cur_node, cur_ops, cur_in, frozenset(cur_origin)))
    return segs


def _layerize(path: PathGraph, allow_multi: bool):
    segs = _segments(path)
    layers: list[StateLayer] = []
    provenance: list[list[int]] = []
    for kind, node, ops, in_dim, origin in segs:
        if kind == "prefix":
            if ops or len(segs) == 1:
                layers.append(_stateless(in_dim, ops))
                provenance.append(sorted(origin))
        elif kind == "state":
            layers.append(
                StateLayer(A=node.A, B=node.B, b=node.b, s0=node.s0, phi=tuple(ops))
            )
            provenance.append(sorted(origin))
        else:
            if not allow_multi:
                raise CompileError(
                    "program with Multi nodes cannot be compiled to a Linear RNN; "
                    "compile to a gated architecture instead"
                )
            d = in_dim
            k = d // 2
            left = LinOp(Matrix.selection(range(0, k), d), zeros_vec(k))
            right = LinOp(Matrix.selection(range(k, d), d), zeros_vec(k))
            gate = StateLayer(
                A=Matrix.zeros(d, d),
                B=Matrix.identity(d),
                b=zeros_vec(d),
                s0=zeros_vec(d),
                phi=(right,),
                gamma=(left,),
            )
            layers.append(gate)
            provenance.append(sorted(origin))
            if ops:
                layers.append(_stateless(k, ops))
                provenance.append(sorted(origin))
    return layers, provenance


def compile_linear(path: PathGraph) -> RecurrentModel:
    """Multi-free path -> Linear RNN whose execution equals the path graph."""
    layers, provenance = _layerize(path, allow_multi=False)
    g = path.graph
    return RecurrentModel(
        kind=LINEAR_RNN,
        input_dim=g.nodes[g.input_id].out_dim,
        output_dim=g.nodes[g.output_id].out_dim,
        layers=tuple(layers),
        metadata={"layer_provenance": provenance},
    )


def compile_gated(path: PathGraph) -> RecurrentModel:
    """Any path -> Gated Linear RNN; Multi nodes become gate layers where the
    layer input is split and the halves recombine as gamma(x) * phi(s)."""
    layers, provenance = _layerize(path, allow_multi=True)
    g = path.graph
    return RecurrentModel(
        kind=GATED_LINEAR_RNN,
        input_dim=g.nodes[g.input_id].out_dim,
        output_dim=g.nodes[g.output_id].out_dim,
        layers=tuple(layers),
        metadata={"layer_provenance": provenance},
    )
