"""Render a computation graph back to LSRL source.

Only core forms are emitted (sugar is already lowered), in topological
order, so rendering a parsed program and re-parsing the result is stable
byte-for-byte after the first normalization.
"""

from __future__ import annotations

import re

from .graph import CONCAT, INPUT, LIN, LINSTATE, MULTI, RELU, ComputationGraph
from .linalg import Matrix, format_number
from .parser import SourceProgram

_SAFE_NAME = re.compile(r"^[A-Za-z_][A-Za-z_0-9]*$")
_RESERVED = {
    "ForEach", "return", "for", "in", "Input", "Lin", "Linear", "ReLU", "LinState",
    "Concat", "Multi", "eye", "zeros", "ones", "true", "false",
}


def _matrix_text(m: Matrix) -> str:
    if m.is_identity():
        return "eye(%d)" % m.rows
    if m.is_zero:
        return "zeros(%d,%d)" % (m.rows, m.cols)
    rows = m.to_rows()
    return "[" + ", ".join("[" + ", ".join(format_number(v) for v in row) + "]" for row in rows) + "]"


def _vector_text(v) -> str:
    return "[" + ", ".join(format_number(x) for x in v) + "]"


def render(graph: ComputationGraph) -> SourceProgram:
    """Textual form that re-parses to an isomorphic graph."""
    order = graph.topo_order()
    names: dict[int, str] = {}
    used: set[str] = set()
    for nid in order:
        want = graph.nodes[nid].name
        if not want or not _SAFE_NAME.match(want) or want in _RESERVED or want in used:
            want = "n%d" % nid
            while want in used:
                want = "_" + want
        names[nid] = want
        used.add(want)
    lines = ["ForEach:"]
    for nid in order:
        n = graph.nodes[nid]
        name = names[nid]
        if n.kind == INPUT:
            lines.append("%s = Input(dim=%d)" % (name, n.out_dim))
        elif n.kind == LIN:
            lines.append(
                "%s = Lin(input=%s, A=%s, b=%s)"
                % (name, names[n.inputs[0]], _matrix_text(n.A), _vector_text(n.b))
            )
        elif n.kind == RELU:
            lines.append("%s = ReLU(%s)" % (name, names[n.inputs[0]]))
        elif n.kind == LINSTATE:
            lines.append(
                "%s = LinState(input=%s, A=%s, B=%s, b=%s, init_state=%s)"
                % (
                    name,
                    names[n.inputs[0]],
                    _matrix_text(n.A),
                    _matrix_text(n.B),
                    _vector_text(n.b),
                    _vector_text(n.s0),
                )
            )
        elif n.kind == CONCAT:
            lines.append("%s = Concat(%s)" % (name, ", ".join(names[s] for s in n.inputs)))
        elif n.kind == MULTI:
            lines.append("%s = Multi(%s)" % (name, names[n.inputs[0]]))
        else:
            raise ValueError("cannot render node kind %r" % n.kind)
    lines.append("return %s" % names[graph.output_id])
    return SourceProgram("\n".join(lines) + "\n", origin="<render>")
