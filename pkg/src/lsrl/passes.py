"""Graph passes: validation, fusion, and debranching to a path graph.

Debranching repeatedly rewrites the first branching node (in topological
order, ties by ascending NodeId) until no node feeds more than one consumer.
Cases are labeled 1A..10 in the rewrite trace; `prep` entries are the
fusion steps.  Every rewrite preserves the program's semantics exactly,
which the test suite checks against the reference interpreter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .graph import (
    CONCAT,
    INPUT,
    LIN,
    LINSTATE,
    MULTI,
    RELU,
    ComputationGraph,
    Diagnostic,
    GraphError,
    Node,
    NodeId,
)
from .linalg import Matrix, vec_add, zeros_vec


class RewriteError(GraphError):
    """Internal error: the rewrite system failed to make progress."""


@dataclass
class RewriteTrace:
    steps: list = field(default_factory=list)

    def record(self, label: str, affected) -> None:
        self.steps.append((label, tuple(affected)))

    def labels(self) -> list[str]:
        return [lbl for lbl, _ in self.steps]

    def report(self) -> str:
        lines = []
        for i, (label, affected) in enumerate(self.steps):
            lines.append("%4d  %-4s  %s" % (i, label, ",".join(str(a) for a in affected)))
        return "\n".join(lines)


@dataclass
class PathGraph:
    """A debranched program: same node kinds, at most one consumer per node."""

    graph: ComputationGraph
    order: list  # NodeIds from input to sink
    provenance: dict  # NodeId -> frozenset of originating NodeIds
    trace: RewriteTrace


def validate(graph: ComputationGraph) -> list[Diagnostic]:
    """All ComputationGraph invariant violations, reported, never raised."""
    return graph.validate()


# ---------------------------------------------------------------------------
# working representation
# ---------------------------------------------------------------------------


class _Work:
    def __init__(self, graph: ComputationGraph, trace: RewriteTrace):
        self.nodes: dict[NodeId, Node] = {nid: n.clone() for nid, n in graph.nodes.items()}
        self.input_id = graph.input_id
        self.output_id = graph.output_id
        self._next = max(self.nodes) + 1
        self.trace = trace

    # -- bookkeeping -----------------------------------------------------------

    def fresh(self, node: Node, origin) -> NodeId:
        nid = self._next
        self._next += 1
        node.origin = frozenset(origin)
        self.nodes[nid] = node
        return nid

    def dim(self, nid: NodeId) -> int:
        return self.nodes[nid].out_dim

    def consumers(self) -> dict[NodeId, list[tuple[NodeId, int]]]:
        out: dict[NodeId, list[tuple[NodeId, int]]] = {nid: [] for nid in self.nodes}
        for cid in sorted(self.nodes):
            for slot, src in enumerate(self.nodes[cid].inputs):
                out[src].append((cid, slot))
        return out

    def graph(self) -> ComputationGraph:
        return ComputationGraph(self.nodes, self.input_id, self.output_id)

    def topo(self) -> list[NodeId]:
        return self.graph().topo_order()

    def reroute(self, old: NodeId, new: NodeId) -> None:
        """Point every consumer edge of `old` at `new`; keep the sink marker."""
        for n in self.nodes.values():
            if old in n.inputs:
                n.inputs = tuple(new if s == old else s for s in n.inputs)
        if self.output_id == old:
            self.output_id = new

    def remove(self, nid: NodeId) -> None:
        del self.nodes[nid]

    def gc(self) -> None:
        while True:
            cons = self.consumers()
            dead = [
                nid
                for nid in self.nodes
                if not cons[nid] and nid != self.output_id
            ]
            if not dead:
                return
            for nid in dead:
                self.remove(nid)

    def selection(self, src: NodeId, indices, origin) -> NodeId:
        A = Matrix.selection(list(indices), self.dim(src))
        return self.fresh(Node(LIN, (src,), A.rows, A=A, b=zeros_vec(A.rows)), origin)

    def identity_lin(self, src: NodeId, origin) -> NodeId:
        d = self.dim(src)
        return self.fresh(
            Node(LIN, (src,), d, A=Matrix.identity(d), b=zeros_vec(d)), origin
        )

    def relu_identity_chain(self, src: NodeId, origin) -> NodeId:
        """Exact identity as Lin [I;-I] -> ReLU -> Lin [I,-I] (sign split)."""
        d = self.dim(src)
        eye = Matrix.identity(d)
        pre = self.fresh(
            Node(LIN, (src,), 2 * d, A=Matrix.vstack([eye, eye.scale(Fraction(-1))]),
                 b=zeros_vec(2 * d)),
            origin,
        )
        act = self.fresh(Node(RELU, (pre,), 2 * d), origin)
        post = self.fresh(
            Node(LIN, (act,), d, A=Matrix.hstack([eye, eye.scale(Fraction(-1))]),
                 b=zeros_vec(d)),
            origin,
        )
        return post

    # -- fusion (preparation) ----------------------------------------------------

    def fuse_once(self, drop_identities: bool) -> bool:
        cons = self.consumers()
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            edges = cons[nid]
            # consecutive ReLU: the downstream one is redundant
            if n.kind == RELU and self.nodes[n.inputs[0]].kind == RELU:
                self.trace.record("prep", (nid,))
                self.reroute(nid, n.inputs[0])
                self.remove(nid)
                return True
            # Lin followed by a single Lin: compose
            if n.kind == LIN and len(edges) == 1 and self.nodes[edges[0][0]].kind == LIN:
                cid = edges[0][0]
                c = self.nodes[cid]
                c.A, c.b = c.A @ n.A, vec_add(c.A.matvec(n.b), c.b)
                c.inputs = n.inputs
                self.trace.record("prep", (nid, cid))
                self.remove(nid)
                return True
            # Lin followed by a single LinState: subsume into B and b
            if n.kind == LIN and len(edges) == 1 and self.nodes[edges[0][0]].kind == LINSTATE:
                cid = edges[0][0]
                c = self.nodes[cid]
                c.b = vec_add(c.B.matvec(n.b), c.b)
                c.B = c.B @ n.A
                c.inputs = n.inputs
                self.trace.record("prep", (nid, cid))
                self.remove(nid)
                return True
            # Concat whose inputs are all the same node: a duplication Lin
            if n.kind == CONCAT and len(set(n.inputs)) == 1:
                src = n.inputs[0]
                d = self.dim(src)
                copies = len(n.inputs)
                n.kind = LIN
                n.A = Matrix.vstack([Matrix.identity(d)] * copies)
                n.b = zeros_vec(d * copies)
                n.inputs = (src,)
                self.trace.record("prep", (nid,))
                return True
            if (
                drop_identities
                and n.kind == LIN
                and n.A.is_identity()
                and all(v == 0 for v in n.b)
                and n.inputs[0] != nid
            ):
                self.trace.record("prep", (nid,))
                self.reroute(nid, n.inputs[0])
                self.remove(nid)
                return True
        return False

    def fuse_all(self, drop_identities: bool) -> None:
        while self.fuse_once(drop_identities):
            pass


# ---------------------------------------------------------------------------
# case rewrites
# ---------------------------------------------------------------------------


def _first_branching(w: _Work) -> NodeId | None:
    cons = w.consumers()
    for nid in w.topo():
        if len(cons[nid]) > 1:
            return nid
    return None


def _case_dedupe_concat_edges(w: _Work, x: NodeId, cid: NodeId) -> None:
    """A Concat consuming x more than once: dedupe inputs, rearrange after."""
    c = w.nodes[cid]
    old_inputs = c.inputs
    unique: list[NodeId] = []
    for s in old_inputs:
        if s not in unique:
            unique.append(s)
    offsets = {}
    off = 0
    for s in unique:
        offsets[s] = off
        off += w.dim(s)
    rows: list[int] = []
    for s in old_inputs:
        rows.extend(range(offsets[s], offsets[s] + w.dim(s)))
    old_consumers = [e for e in w.consumers()[cid]]
    was_output = w.output_id == cid
    c.inputs = tuple(unique)
    c.out_dim = off
    sel = w.selection(cid, rows, c.origin)
    for ccid, slot in old_consumers:
        cc = w.nodes[ccid]
        cc.inputs = tuple(
            sel if (i == slot and s == cid) else s for i, s in enumerate(cc.inputs)
        )
    if was_output:
        w.output_id = sel
    w.trace.record("4", (x, cid, sel))


def _case_1a_all_multi(w: _Work, x: NodeId, edges) -> None:
    ids = sorted({cid for cid, _ in edges})
    keep = ids[0]
    for other in ids[1:]:
        w.reroute(other, keep)
        w.remove(other)
    w.trace.record("1A", (x, keep))


def _case_1b_multi_mix(w: _Work, x: NodeId, edges) -> None:
    """Bypass construction removing every Multi fed by x (directly or through
    a slice): one Lin stacks all the product operand pairs plus a full copy
    of x against a block of ones, one Multi evaluates everything, and slices
    distribute the products and the untouched x.  x ends with one consumer.
    """
    m = w.dim(x)
    one = Fraction(1)
    cons = w.consumers()
    # (multi id, selection from x to its input)
    units: list[tuple[NodeId, Matrix]] = []
    for cid, _slot in edges:
        c = w.nodes[cid]
        if c.kind == MULTI:
            units.append((cid, Matrix.identity(m)))
        elif c.kind == LIN and c.is_selection_lin():
            for mid, _ in cons[cid]:
                if w.nodes[mid].kind == MULTI:
                    units.append((mid, c.A))
    units.sort(key=lambda u: u[0])
    tops, bots, widths = [], [], []
    for _, S in units:
        half = S.rows // 2
        tops.append(Matrix.selection(range(0, half), S.rows) @ S)
        bots.append(Matrix.selection(range(half, S.rows), S.rows) @ S)
        widths.append(half)
    K = sum(widths)
    A = Matrix.vstack(tops + [Matrix.identity(m)] + bots + [Matrix.zeros(m, m)])
    bias = zeros_vec(K + m + K) + (one,) * m
    # layout [tops; x | bots; ones]: Multi yields [products; x]
    lin = w.fresh(Node(LIN, (x,), 2 * (K + m), A=A, b=bias), {x})
    mul = w.fresh(Node(MULTI, (lin,), K + m), {x})
    off = 0
    for (mid, _), width in zip(units, widths):
        if mid not in w.nodes:  # same multi served twice cannot happen, but be safe
            off += width
            continue
        sel = w.selection(mul, range(off, off + width), w.nodes[mid].origin)
        off += width
        w.reroute(mid, sel)
        w.remove(mid)
    s_pass = w.selection(mul, range(K, K + m), {x})
    for cid, slot in list(w.consumers()[x]):
        c = w.nodes[cid]
        if cid in (lin, s_pass):
            continue
        c.inputs = tuple(
            s_pass if (i == slot and s == x) else s for i, s in enumerate(c.inputs)
        )
    w.gc()
    w.trace.record("1B", (x, lin, mul))


def _case_2_linstates(w: _Work, x: NodeId, edges) -> None:
    ids = sorted({cid for cid, _ in edges})
    layers = [w.nodes[i] for i in ids]
    merged = Node(
        LINSTATE,
        (x,),
        sum(n.out_dim for n in layers),
        A=Matrix.block_diag([n.A for n in layers]),
        B=Matrix.vstack([n.B for n in layers]),
        b=tuple(v for n in layers for v in n.b),
        s0=tuple(v for n in layers for v in n.s0),
    )
    mid = w.fresh(merged, set().union(*[n.origin for n in layers]))
    off = 0
    for nid, n in zip(ids, layers):
        sel = w.selection(mid, range(off, off + n.out_dim), n.origin)
        off += n.out_dim
        w.reroute(nid, sel)
        w.remove(nid)
    w.trace.record("2", (x, mid))


def _case_3_relus(w: _Work, x: NodeId, edges) -> None:
    ids = sorted({cid for cid, _ in edges})
    keep = ids[0]
    for other in ids[1:]:
        w.reroute(other, keep)
        w.remove(other)
    w.trace.record("3", (x, keep))


def _case_6_dummy_states(w: _Work, x: NodeId, edges) -> None:
    m = w.dim(x)
    dummy = w.fresh(
        Node(
            LINSTATE,
            (x,),
            m,
            A=Matrix.zeros(m, m),
            B=Matrix.identity(m),
            b=zeros_vec(m),
            s0=zeros_vec(m),
        ),
        {x},
    )
    for cid, slot in edges:
        if w.nodes[cid].kind == LINSTATE or cid == dummy:
            continue
        c = w.nodes[cid]
        c.inputs = tuple(
            dummy if (i == slot and s == x) else s for i, s in enumerate(c.inputs)
        )
    w.trace.record("6", (x, dummy))


def _case_4_concats(w: _Work, x: NodeId, edges) -> None:
    """All consumers are Concat; at least one depends on x alone (see note).

    On a valid DAG the topologically first Concat consumer cannot have inputs
    beyond x: any other input would have to descend from x through a sibling
    Concat, contradicting its topological position.  Those all-x Concats
    become duplication Lins; mixed-input ones then merge via Case 8.
    """
    all_x = [cid for cid, _ in edges if all(s == x for s in w.nodes[cid].inputs)]
    all_x = sorted(set(all_x))
    if all_x:
        for cid in all_x:
            c = w.nodes[cid]
            copies = len(c.inputs)
            d = w.dim(x)
            c.kind = LIN
            c.A = Matrix.vstack([Matrix.identity(d)] * copies)
            c.b = zeros_vec(d * copies)
            c.inputs = (x,)
        w.trace.record("4", tuple([x] + all_x))
        return
    _case_merge_lin_concat(w, x, edges, label="4")


def _case_5a_slices(w: _Work, x: NodeId, edges) -> bool:
    """Fuse slices into Lin/LinState, swap past ReLU, collapse Concats whose
    every input is a slice of x, and rebuild slice->Multi pairs as one
    Lin + one Multi.

    A Concat with inputs from elsewhere is deferred: pushing a slice past it
    would just undo the merge that created the slice.  On a valid DAG the
    topologically first slice-fed Concat has no foreign inputs, so deferral
    never stalls; if nothing was rewritten the caller falls through to the
    mixed-kind handling.
    """
    slice_ids = sorted({cid for cid, _ in edges})
    slice_set = set(slice_ids)
    cons = w.consumers()
    shared_relu: NodeId | None = None
    collapse: list[NodeId] = []
    affected: list[NodeId] = [x]

    for sid in slice_ids:
        s_node = w.nodes[sid]
        for cid, slot in list(cons[sid]):
            c = w.nodes[cid]
            if c.kind == LIN:
                c.A = c.A @ s_node.A
                c.inputs = (x,)
                affected.append(cid)
            elif c.kind == LINSTATE:
                c.B = c.B @ s_node.A
                c.inputs = (x,)
                affected.append(cid)
            elif c.kind == RELU:
                if shared_relu is None:
                    shared_relu = w.fresh(Node(RELU, (x,), w.dim(x)), {x})
                new_slice = w.fresh(
                    Node(LIN, (shared_relu,), s_node.out_dim, A=s_node.A,
                         b=zeros_vec(s_node.out_dim)),
                    s_node.origin,
                )
                w.reroute(cid, new_slice)
                w.remove(cid)
                affected.append(new_slice)
            elif c.kind == CONCAT:
                if cid not in collapse and all(s in slice_set for s in c.inputs):
                    collapse.append(cid)
            # Multi consumers are handled by Case 1B before this case runs
    for cid in collapse:
        c = w.nodes[cid]
        c.kind = LIN
        c.A = Matrix.vstack([w.nodes[s].A for s in c.inputs])
        c.b = zeros_vec(c.out_dim)
        c.inputs = (x,)
        affected.append(cid)
    # drop slices that lost all consumers
    cons = w.consumers()
    for sid in slice_ids:
        if sid in w.nodes and not cons.get(sid) and sid != w.output_id:
            w.remove(sid)
    if len(affected) == 1:
        return False
    w.trace.record("5A", tuple(affected))
    return True


def _case_merge_lin_concat(w: _Work, x: NodeId, edges, label: str) -> None:
    """Merge all Lin consumers and Concat edges of x into one Lin + slices.

    Lin consumers contribute their (A, b) rows; every Concat edge gets an
    identity block whose slice then feeds that Concat slot.  x ends with a
    single consumer; the branch moves one node downstream.
    """
    lin_ids = sorted({cid for cid, _ in edges if w.nodes[cid].kind == LIN})
    concat_edges = sorted(
        (cid, slot) for cid, slot in edges if w.nodes[cid].kind == CONCAT
    )
    d = w.dim(x)
    blocks_A = [w.nodes[i].A for i in lin_ids] + [Matrix.identity(d)] * len(concat_edges)
    blocks_b = [w.nodes[i].b for i in lin_ids] + [zeros_vec(d)] * len(concat_edges)
    merged_A = Matrix.vstack(blocks_A)
    merged_b = tuple(v for b in blocks_b for v in b)
    origin = set().union({x}, *[w.nodes[i].origin for i in lin_ids])
    mid = w.fresh(Node(LIN, (x,), merged_A.rows, A=merged_A, b=merged_b), origin)
    off = 0
    for nid in lin_ids:
        n = w.nodes[nid]
        sel = w.selection(mid, range(off, off + n.out_dim), n.origin)
        off += n.out_dim
        w.reroute(nid, sel)
        w.remove(nid)
    for cid, slot in concat_edges:
        sel = w.selection(mid, range(off, off + d), w.nodes[cid].origin)
        off += d
        c = w.nodes[cid]
        c.inputs = tuple(
            sel if (i == slot and s == x) else s for i, s in enumerate(c.inputs)
        )
    w.trace.record(label, (x, mid))


def _case_5b_lins(w: _Work, x: NodeId, edges) -> None:
    _case_merge_lin_concat(w, x, edges, label="5B")


def _lin_followed_by_single_relu(w: _Work, cons, nid: NodeId) -> bool:
    edges = cons[nid]
    return len(edges) == 1 and w.nodes[edges[0][0]].kind == RELU


def _case_7a(w: _Work, x: NodeId, edges) -> None:
    made = [x]
    for cid, slot in edges:
        if w.nodes[cid].kind != RELU:
            continue
        bypass = w.identity_lin(x, {x, cid})
        c = w.nodes[cid]
        c.inputs = tuple(
            bypass if (i == slot and s == x) else s for i, s in enumerate(c.inputs)
        )
        made.append(bypass)
    w.trace.record("7A", tuple(made))


def _case_7b(w: _Work, x: NodeId, edges, cons) -> None:
    made = [x]
    for cid, slot in edges:
        c = w.nodes[cid]
        if c.kind != LIN or _lin_followed_by_single_relu(w, cons, cid):
            continue
        post = w.relu_identity_chain(x, {x, cid})
        c.inputs = tuple(
            post if (i == slot and s == x) else s for i, s in enumerate(c.inputs)
        )
        made.append(post)
    w.trace.record("7B", tuple(made))


def _bypass_edges(w: _Work, x: NodeId, edge_list, relu_based: bool) -> list[NodeId]:
    made = []
    for cid, slot in edge_list:
        if relu_based:
            bp = w.relu_identity_chain(x, {x, cid})
        else:
            bp = w.identity_lin(x, {x, cid})
        c = w.nodes[cid]
        c.inputs = tuple(
            bp if (i == slot and s == x) else s for i, s in enumerate(c.inputs)
        )
        made.append(bp)
    return made


def _debranch_step(w: _Work, x: NodeId) -> None:
    cons = w.consumers()
    edges = cons[x]
    kinds = {w.nodes[cid].kind for cid, _ in edges}

    # duplicated edges into one Concat first: dedupe inputs
    per_concat: dict[NodeId, int] = {}
    for cid, _ in edges:
        if w.nodes[cid].kind == CONCAT:
            per_concat[cid] = per_concat.get(cid, 0) + 1
    dupes = sorted(cid for cid, cnt in per_concat.items() if cnt > 1)
    if dupes:
        _case_dedupe_concat_edges(w, x, dupes[0])
        return

    if kinds == {MULTI}:
        _case_1a_all_multi(w, x, edges)
        return
    slice_fed_multi = any(
        w.nodes[cid].kind == LIN
        and w.nodes[cid].is_selection_lin()
        and any(w.nodes[m].kind == MULTI for m, _ in cons[cid])
        for cid, _ in edges
    )
    if MULTI in kinds or slice_fed_multi:
        _case_1b_multi_mix(w, x, edges)
        return
    if kinds == {LINSTATE}:
        _case_2_linstates(w, x, edges)
        return
    if LINSTATE in kinds:
        _case_6_dummy_states(w, x, edges)
        return
    if kinds == {RELU}:
        _case_3_relus(w, x, edges)
        return
    if kinds == {CONCAT}:
        _case_4_concats(w, x, edges)
        return
    if kinds == {LIN}:
        all_slices = all(w.nodes[cid].is_selection_lin() for cid, _ in edges)
        if all_slices:
            if not _case_5a_slices(w, x, edges):
                raise RewriteError(
                    "slice case stalled at node %d; graph violates the "
                    "single-source DAG assumptions" % x
                )
        else:
            _case_5b_lins(w, x, edges)
        return
    if kinds == {LIN, RELU}:
        lin_ids = [cid for cid, _ in edges if w.nodes[cid].kind == LIN]
        if all(_lin_followed_by_single_relu(w, cons, cid) for cid in lin_ids):
            _case_7a(w, x, edges)
        else:
            _case_7b(w, x, edges, cons)
        return
    if kinds == {LIN, CONCAT}:
        _case_merge_lin_concat(w, x, edges, label="8")
        return
    if kinds == {RELU, CONCAT}:
        made = _bypass_edges(
            w, x, [(c, s) for c, s in edges if w.nodes[c].kind == CONCAT], relu_based=True
        )
        w.trace.record("9", tuple([x] + made))
        return
    if kinds == {LIN, RELU, CONCAT}:
        targets = [(c, s) for c, s in edges if w.nodes[c].kind == CONCAT]
        for cid, slot in edges:
            if w.nodes[cid].kind == LIN and not _lin_followed_by_single_relu(w, cons, cid):
                targets.append((cid, slot))
        made = _bypass_edges(w, x, targets, relu_based=True)
        w.trace.record("10", tuple([x] + made))
        return
    raise RewriteError("no debranching case for consumer kinds %r of node %d" % (kinds, x))


# ---------------------------------------------------------------------------
# public passes
# ---------------------------------------------------------------------------


def fuse_prepare(graph: ComputationGraph) -> tuple[ComputationGraph, RewriteTrace]:
    """Fixpoint fusion: Lin∘Lin, ReLU∘ReLU, Lin into LinState, uniform Concat."""
    trace = RewriteTrace()
    w = _Work(graph, trace)
    w.fuse_all(drop_identities=True)
    w.gc()
    return w.graph().require_valid(), trace


def debranch(graph: ComputationGraph, budget_factor: int = 100) -> PathGraph:
    """Rewrite the DAG into a path graph, preserving semantics exactly.

    The step budget is quadratic in the prepared graph's size; exceeding it
    means a rewrite bug, and the trace is attached for diagnosis.
    """
    graph.require_valid()
    trace = RewriteTrace()
    w = _Work(graph, trace)
    w.fuse_all(drop_identities=True)
    w.gc()
    budget = budget_factor * max(4, len(w.nodes)) ** 2
    steps = 0
    while True:
        x = _first_branching(w)
        if x is None:
            break
        steps += 1
        if steps > budget:
            raise RewriteError(
                "debranch budget exceeded (%d steps); trace:\n%s" % (steps, trace.report())
            )
        _debranch_step(w, x)
        w.fuse_all(drop_identities=False)
        w.gc()
    w.fuse_all(drop_identities=True)
    w.gc()
    final = w.graph().require_valid()
    if not final.is_path():
        raise RewriteError("debranch finished but graph is not a path")
    order = _path_order(final)
    provenance = {nid: final.nodes[nid].origin for nid in order}
    return PathGraph(final, order, provenance, trace)


def _path_order(graph: ComputationGraph) -> list[NodeId]:
    cons = graph.consumers()
    order = [graph.input_id]
    seen = {graph.input_id}
    cur = graph.input_id
    while cons[cur]:
        nxt = cons[cur][0][0]
        if nxt in seen:
            raise RewriteError("cycle while walking path graph")
        order.append(nxt)
        seen.add(nxt)
        cur = nxt
    if cur != graph.output_id:
        raise RewriteError("path does not end at the output node")
    if len(order) != len(graph.nodes):
        raise RewriteError("path does not cover all nodes")
    return order
