"""Computation DAG for LSRL programs.

Six node kinds: Input, Lin, ReLU, LinState, Concat, Multi.  A program is a
DAG with a single source (the unique Input) and a single sink (the returned
node).  LinState is the only node carrying information across time steps.

Graphs handed out by the builder or parser are immutable by convention;
rewrite passes work on private copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

from .linalg import Matrix, Vector, format_number

NodeId = int

INPUT = "input"
LIN = "lin"
RELU = "relu"
LINSTATE = "linstate"
CONCAT = "concat"
MULTI = "multi"

KINDS = (INPUT, LIN, RELU, LINSTATE, CONCAT, MULTI)


class GraphError(ValueError):
    """Structural or dimensional violation while building a graph."""


class DimensionError(GraphError):
    pass


@dataclass
class Node:
    """One operation in the DAG.

    Field usage by kind:
      input:    out_dim
      lin:      A (out_dim x in_dim), b (len out_dim)
      relu:     none
      linstate: A (n x n), B (n x in_dim), b (len n), s0 (len n)
      concat:   inputs only (out_dim = sum of input dims)
      multi:    none (out_dim = in_dim / 2)
    """

    kind: str
    inputs: tuple[NodeId, ...]
    out_dim: int
    A: Matrix | None = None
    B: Matrix | None = None
    b: Vector | None = None
    s0: Vector | None = None
    name: str | None = None
    origin: frozenset[NodeId] = field(default_factory=frozenset)

    def clone(self) -> "Node":
        return replace(self)

    def is_selection_lin(self) -> bool:
        """A Lin that merely picks coordinates (slices, permutations, identity)."""
        return (
            self.kind == LIN
            and self.A is not None
            and self.A.is_selection()
            and all(v == 0 for v in self.b)
        )

    def is_zero_lin(self) -> bool:
        return self.kind == LIN and self.A.is_zero and all(v == 0 for v in self.b)

    def short(self) -> str:
        tag = self.kind
        if self.name:
            tag += ":" + self.name
        return tag


@dataclass
class Diagnostic:
    message: str
    severity: str = "error"
    line: int | None = None
    column: int | None = None

    def __str__(self) -> str:
        loc = "" if self.line is None else "line %d: " % self.line
        return "%s: %s%s" % (self.severity, loc, self.message)


class ComputationGraph:
    """Nodes plus edge structure; input/output designate source and sink."""

    def __init__(self, nodes: dict[NodeId, Node], input_id: NodeId, output_id: NodeId):
        self.nodes = nodes
        self.input_id = input_id
        self.output_id = output_id

    def __len__(self) -> int:
        return len(self.nodes)

    def out_dim(self, nid: NodeId) -> int:
        return self.nodes[nid].out_dim

    def consumers(self) -> dict[NodeId, list[tuple[NodeId, int]]]:
        """Map node -> [(consumer, input slot)] with deterministic order."""
        out: dict[NodeId, list[tuple[NodeId, int]]] = {nid: [] for nid in self.nodes}
        for cid in sorted(self.nodes):
            for slot, src in enumerate(self.nodes[cid].inputs):
                out[src].append((cid, slot))
        return out

    def topo_order(self) -> list[NodeId]:
        """Kahn topological order, ties broken by ascending NodeId."""
        import heapq

        indeg = {nid: len(n.inputs) for nid, n in self.nodes.items()}
        cons = self.consumers()
        ready = [nid for nid, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            nid = heapq.heappop(ready)
            order.append(nid)
            seen_edge: dict[NodeId, int] = {}
            for cid, _slot in cons[nid]:
                seen_edge[cid] = seen_edge.get(cid, 0) + 1
            for cid, cnt in sorted(seen_edge.items()):
                indeg[cid] -= cnt
                if indeg[cid] == 0:
                    heapq.heappush(ready, cid)
        if len(order) != len(self.nodes):
            raise GraphError("cycle detected in computation graph")
        return order

    # -- validation ----------------------------------------------------------

    def check_node_dims(self, nid: NodeId) -> list[str]:
        n = self.nodes[nid]
        problems = []
        in_dims = [self.nodes[s].out_dim for s in n.inputs if s in self.nodes]
        if any(s not in self.nodes for s in n.inputs):
            problems.append("node %d references missing input" % nid)
            return problems
        if n.kind == INPUT:
            if n.inputs:
                problems.append("Input node cannot have inputs")
            if n.out_dim < 1:
                problems.append("Input dim must be >= 1")
        elif n.kind == LIN:
            if len(n.inputs) != 1:
                problems.append("Lin takes one input")
            elif n.A.cols != in_dims[0]:
                problems.append(
                    "Lin %d: A has %d cols, input dim %d" % (nid, n.A.cols, in_dims[0])
                )
            if n.A.rows != len(n.b):
                problems.append("Lin %d: A rows %d != |b| %d" % (nid, n.A.rows, len(n.b)))
            if n.out_dim != n.A.rows:
                problems.append("Lin %d: out_dim mismatch" % nid)
        elif n.kind == RELU:
            if len(n.inputs) != 1:
                problems.append("ReLU takes one input")
            elif n.out_dim != in_dims[0]:
                problems.append("ReLU %d: out_dim mismatch" % nid)
        elif n.kind == LINSTATE:
            if len(n.inputs) != 1:
                problems.append("LinState takes one input")
            else:
                m = len(n.s0)
                if n.A.rows != m or n.A.cols != m:
                    problems.append("LinState %d: A must be %dx%d" % (nid, m, m))
                if n.B.rows != m:
                    problems.append("LinState %d: B must have %d rows" % (nid, m))
                if n.B.cols != in_dims[0]:
                    problems.append(
                        "LinState %d: B has %d cols, input dim %d" % (nid, n.B.cols, in_dims[0])
                    )
                if len(n.b) != m:
                    problems.append("LinState %d: |b| != state size" % nid)
                if n.out_dim != m:
                    problems.append("LinState %d: out_dim mismatch" % nid)
        elif n.kind == CONCAT:
            if not n.inputs:
                problems.append("Concat needs at least one input")
            elif n.out_dim != sum(in_dims):
                problems.append("Concat %d: out_dim != sum of input dims" % nid)
        elif n.kind == MULTI:
            if len(n.inputs) != 1:
                problems.append("Multi takes one input")
            elif in_dims[0] % 2 != 0:
                problems.append("Multi %d: input dim %d is odd" % (nid, in_dims[0]))
            elif n.out_dim != in_dims[0] // 2:
                problems.append("Multi %d: out_dim mismatch" % nid)
        else:
            problems.append("unknown node kind %r" % n.kind)
        return problems

    def validate(self) -> list[Diagnostic]:
        """All invariant violations as diagnostics (never raises)."""
        diags: list[Diagnostic] = []
        if self.input_id not in self.nodes:
            return [Diagnostic("missing input node")]
        if self.output_id not in self.nodes:
            return [Diagnostic("missing output node")]
        n_inputs = sum(1 for n in self.nodes.values() if n.kind == INPUT)
        if n_inputs != 1:
            diags.append(Diagnostic("program must declare exactly one Input, found %d" % n_inputs))
        try:
            order = self.topo_order()
        except GraphError as e:
            return diags + [Diagnostic(str(e))]
        for nid in order:
            for msg in self.check_node_dims(nid):
                diags.append(Diagnostic(msg))
        # reachability: forward from input, backward from output
        cons = self.consumers()
        fwd = {self.input_id}
        for nid in order:
            if nid in fwd:
                for cid, _ in cons[nid]:
                    fwd.add(cid)
        bwd = {self.output_id}
        for nid in reversed(order):
            if nid in bwd:
                bwd.update(self.nodes[nid].inputs)
        for nid in sorted(self.nodes):
            if nid not in fwd:
                diags.append(Diagnostic("node %d not reachable from the input" % nid))
            if nid not in bwd:
                diags.append(Diagnostic("node %d does not reach the output" % nid))
        return diags

    def require_valid(self) -> "ComputationGraph":
        diags = self.validate()
        if diags:
            raise GraphError("; ".join(str(d) for d in diags))
        return self

    def copy(self) -> "ComputationGraph":
        return ComputationGraph(
            {nid: n.clone() for nid, n in self.nodes.items()}, self.input_id, self.output_id
        )

    def max_consumers(self) -> int:
        cons = self.consumers()
        return max((len(v) for v in cons.values()), default=0)

    def is_path(self) -> bool:
        cons = self.consumers()
        return all(len(edges) <= 1 for edges in cons.values())

    def signature(self):
        """Canonical structural form: node tuples in topological order.

        Two graphs with equal signatures are isomorphic (same kinds, weights
        and edge structure under the topological relabeling).
        """
        order = self.topo_order()
        pos = {nid: i for i, nid in enumerate(order)}
        sig = []
        for nid in order:
            n = self.nodes[nid]
            sig.append(
                (
                    n.kind,
                    tuple(pos[s] for s in n.inputs),
                    n.out_dim,
                    n.A,
                    n.B,
                    n.b,
                    n.s0,
                    nid == self.input_id,
                    nid == self.output_id,
                )
            )
        return tuple(sig)

    def __repr__(self) -> str:
        return "ComputationGraph(%d nodes, in=%d, out=%d)" % (
            len(self.nodes),
            self.input_id,
            self.output_id,
        )


def describe_node(n: Node) -> str:
    bits = [n.kind, "dim=%d" % n.out_dim]
    if n.kind == LIN:
        bits.append("A=%r b=(%s)" % (n.A, ",".join(format_number(v) for v in n.b)))
    if n.kind == LINSTATE:
        bits.append("A=%r B=%r" % (n.A, n.B))
    return " ".join(bits)
