"""Program builder: core primitives plus every sugar construction.

All sugar lowers to the six core node kinds immediately, so the graph handed
to the passes never contains anything but Input/Lin/ReLU/LinState/Concat/Multi.

Operand convention for the sugar helpers: an `int` argument is a NodeId;
constants must be Fraction / float / str / sequence (scalars broadcast to the
other operand's width).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .graph import (
    CONCAT,
    INPUT,
    LIN,
    LINSTATE,
    MULTI,
    RELU,
    ComputationGraph,
    DimensionError,
    GraphError,
    Node,
    NodeId,
)
from .linalg import (
    Matrix,
    Vector,
    as_exact,
    cos_half_angle_rational,
    cos_sin_rational,
    vec_exact,
    zeros_vec,
)

DEFAULT_MU = Fraction(10_000)

VARIANTS = (
    "original",
    "optimized",
    "step",
    "step_optimized",
    "multiplicative",
    "multiplicative_optimized",
)
RELU_VARIANTS = ("original", "optimized", "step", "step_optimized")
MULTIPLICATIVE_VARIANTS = ("multiplicative", "multiplicative_optimized")


@dataclass(frozen=True)
class ApproxParams:
    """Sharpness of the step ramp and the conditional magnitude bound.

    `mu` controls how narrow the f_step ramp is; `lam` must strictly exceed
    any absolute value the guarded branches can attain (only the ReLU-based
    f_ifelse variants need it).
    """

    mu: Fraction = DEFAULT_MU
    lam: Fraction | None = None

    def __post_init__(self):
        if as_exact(self.mu) <= 0:
            raise ValueError("mu must be positive")
        if self.lam is not None and as_exact(self.lam) <= 0:
            raise ValueError("lambda must be positive")


@dataclass(frozen=True)
class ValueBounds:
    """Declared facts about the two f_ifelse branches.

    Used by the optimized variants to drop ReLU terms; `abs_bound`, when
    given, lets the builder check that lambda really dominates the branches.
    """

    t_nonneg: bool = False
    f_nonneg: bool = False
    t_zero: bool = False
    f_zero: bool = False
    abs_bound: Fraction | None = None


class ProgramBuilder:
    """Single-owner, mutate-in-place builder for one program.

    Not safe to share across concurrent tasks; the finalized graph is
    immutable and freely shareable.
    """

    def __init__(self, input_dim: int):
        if input_dim < 1:
            raise DimensionError("input dim must be >= 1, got %d" % input_dim)
        self._nodes: dict[NodeId, Node] = {}
        self._next_id = 0
        self._output: NodeId | None = None
        self.input = self._add(Node(INPUT, (), input_dim, name="input"))

    # -- core ----------------------------------------------------------------

    def _add(self, node: Node) -> NodeId:
        nid = self._next_id
        self._next_id += 1
        node.origin = frozenset((nid,))
        self._nodes[nid] = node
        return nid

    def dim(self, nid: NodeId) -> int:
        return self._nodes[nid].out_dim

    def _check_sources(self, sources) -> None:
        for s in sources:
            if s not in self._nodes:
                raise GraphError("unknown source node %r" % (s,))

    def lin(self, src: NodeId, A: Matrix, b=None, name=None) -> NodeId:
        self._check_sources([src])
        if b is None:
            b = zeros_vec(A.rows)
        b = tuple(b)
        if A.cols != self.dim(src):
            raise DimensionError(
                "Lin: A has %d cols but source dim is %d" % (A.cols, self.dim(src))
            )
        if A.rows != len(b):
            raise DimensionError("Lin: A has %d rows but |b| = %d" % (A.rows, len(b)))
        return self._add(Node(LIN, (src,), A.rows, A=A, b=b, name=name))

    def relu(self, src: NodeId, name=None) -> NodeId:
        self._check_sources([src])
        return self._add(Node(RELU, (src,), self.dim(src), name=name))

    def linstate(self, src: NodeId, A: Matrix, B: Matrix, s0, b=None, name=None) -> NodeId:
        self._check_sources([src])
        s0 = tuple(s0)
        m = len(s0)
        if b is None:
            b = zeros_vec(m)
        b = tuple(b)
        if A.rows != m or A.cols != m:
            raise DimensionError("LinState: A must be %dx%d" % (m, m))
        if B.rows != m or B.cols != self.dim(src):
            raise DimensionError(
                "LinState: B must be %dx%d, got %dx%d" % (m, self.dim(src), B.rows, B.cols)
            )
        if len(b) != m:
            raise DimensionError("LinState: |b| must equal state size")
        return self._add(Node(LINSTATE, (src,), m, A=A, B=B, b=b, s0=s0, name=name))

    def concat(self, sources, name=None) -> NodeId:
        sources = tuple(sources)
        if not sources:
            raise GraphError("Concat needs at least one input")
        self._check_sources(sources)
        dim = sum(self.dim(s) for s in sources)
        return self._add(Node(CONCAT, sources, dim, name=name))

    def multi(self, src: NodeId, name=None) -> NodeId:
        self._check_sources([src])
        d = self.dim(src)
        if d % 2 != 0:
            raise DimensionError("Multi requires even input dim, got %d" % d)
        return self._add(Node(MULTI, (src,), d // 2, name=name))

    def add_primitive(self, kind: str, sources, **params) -> NodeId:
        """Generic node constructor used by the parser."""
        if kind == INPUT:
            raise GraphError("only one Input can be declared")
        if kind == LIN:
            return self.lin(sources[0], params["A"], params.get("b"), params.get("name"))
        if kind == RELU:
            return self.relu(sources[0], params.get("name"))
        if kind == LINSTATE:
            return self.linstate(
                sources[0], params["A"], params["B"], params["s0"], params.get("b"),
                params.get("name"),
            )
        if kind == CONCAT:
            return self.concat(sources, params.get("name"))
        if kind == MULTI:
            return self.multi(sources[0], params.get("name"))
        raise GraphError("unknown node kind %r" % kind)

    def ret(self, nid: NodeId) -> None:
        self._check_sources([nid])
        self._output = nid

    def finalize(self, output: NodeId | None = None) -> ComputationGraph:
        if output is not None:
            self.ret(output)
        if self._output is None:
            raise GraphError("program has no return node")
        g = ComputationGraph(dict(self._nodes), self.input, self._output)
        return g.require_valid()

    @property
    def graph(self) -> ComputationGraph:
        """Unvalidated view; tests only."""
        return ComputationGraph(dict(self._nodes), self.input, self._output or self.input)

    # -- small affine sugar ----------------------------------------------------

    def slice(self, src: NodeId, lo: int, hi: int, name=None) -> NodeId:
        d = self.dim(src)
        if not (0 <= lo < hi <= d):
            raise DimensionError("slice [%d:%d] outside dim %d" % (lo, hi, d))
        return self.lin(src, Matrix.selection(range(lo, hi), d), name=name)

    def _const_vec(self, value, dim: int) -> Vector:
        if isinstance(value, (list, tuple)):
            v = vec_exact(value)
            if len(v) != dim:
                raise DimensionError("constant of length %d where %d needed" % (len(v), dim))
            return v
        return (as_exact(value),) * dim

    def _is_node(self, operand) -> bool:
        return isinstance(operand, int) and not isinstance(operand, bool)

    def add(self, x: NodeId, y, name=None) -> NodeId:
        """x + y where y is a node of equal dim or a constant."""
        d = self.dim(x)
        if self._is_node(y):
            if self.dim(y) != d:
                raise DimensionError("add: dims %d vs %d" % (d, self.dim(y)))
            pair = self.concat((x, y))
            A = Matrix.hstack([Matrix.identity(d), Matrix.identity(d)])
            return self.lin(pair, A, name=name)
        return self.lin(x, Matrix.identity(d), self._const_vec(y, d), name=name)

    def sub(self, x, y, name=None) -> NodeId:
        """x - y; either side may be a constant, at least one is a node."""
        if self._is_node(x) and self._is_node(y):
            d = self.dim(x)
            if self.dim(y) != d:
                raise DimensionError("sub: dims %d vs %d" % (d, self.dim(y)))
            pair = self.concat((x, y))
            A = Matrix.hstack([Matrix.identity(d), Matrix.identity(d).scale(Fraction(-1))])
            return self.lin(pair, A, name=name)
        if self._is_node(x):
            d = self.dim(x)
            c = self._const_vec(y, d)
            return self.lin(x, Matrix.identity(d), tuple(-v for v in c), name=name)
        d = self.dim(y)
        c = self._const_vec(x, d)
        return self.lin(y, Matrix.identity(d).scale(Fraction(-1)), c, name=name)

    def scale(self, x: NodeId, c, name=None) -> NodeId:
        d = self.dim(x)
        return self.lin(x, Matrix.identity(d).scale(as_exact(c)), name=name)

    def f_constant(self, src: NodeId, c, name=None) -> NodeId:
        """Constant output regardless of the token: Lin with A = 0, b = c."""
        c = vec_exact(c) if isinstance(c, (list, tuple)) else (as_exact(c),)
        return self.lin(src, Matrix.zeros(len(c), self.dim(src)), c, name=name)

    # -- step / bump / logic -----------------------------------------------------

    def f_step(self, src: NodeId, mu=DEFAULT_MU, name=None) -> NodeId:
        """ReLU(mu*x) - mu*ReLU(x - 1/mu): exact 0 for x <= 0, exact 1 for x >= 1/mu."""
        mu = as_exact(mu)
        if mu <= 0:
            raise ValueError("mu must be positive")
        d = self.dim(src)
        eye = Matrix.identity(d)
        pre = self.lin(
            src,
            Matrix.vstack([eye.scale(mu), eye]),
            tuple(zeros_vec(d)) + (Fraction(-1, 1) / mu,) * d,
        )
        act = self.relu(pre)
        post = Matrix.hstack([eye, eye.scale(-mu)])
        return self.lin(act, post, name=name)

    def f_bump(self, src: NodeId, lower, upper, mu=DEFAULT_MU, name=None) -> NodeId:
        """1 between lower and upper, 0 outside; bounds may be nodes or constants."""
        if not self._is_node(lower) and not self._is_node(upper):
            lo = self._const_vec(lower, self.dim(src))
            hi = self._const_vec(upper, self.dim(src))
            if any(a >= b for a, b in zip(lo, hi)):
                raise ValueError("f_bump requires lower < upper elementwise")
        s_lo = self.f_step(self.sub(src, lower), mu)
        s_hi = self.f_step(self.sub(src, upper), mu)
        return self.sub(s_lo, s_hi, name=name)

    def f_not(self, src: NodeId, name=None) -> NodeId:
        d = self.dim(src)
        return self.lin(src, Matrix.identity(d).scale(Fraction(-1)), (Fraction(1),) * d, name=name)

    def f_and(self, x: NodeId, y: NodeId, mu=DEFAULT_MU, name=None) -> NodeId:
        sx = self.f_step(x, mu)
        sy = self.f_step(y, mu)
        summed = self.add(sx, sy)
        d = self.dim(summed)
        shifted = self.lin(summed, Matrix.identity(d), (Fraction(-1),) * d)
        return self.relu(shifted, name=name)

    def f_or(self, x: NodeId, y: NodeId, mu=DEFAULT_MU, name=None) -> NodeId:
        return self.f_step(self.add(x, y), mu, name=name)

    def f_larger(self, x: NodeId, y, mu=DEFAULT_MU, name=None) -> NodeId:
        """1 when x > y with margin >= 1/mu, 0 when x <= y."""
        return self.f_step(self.sub(x, y), mu, name=name)

    def f_smaller(self, x: NodeId, y, mu=DEFAULT_MU, name=None) -> NodeId:
        return self.f_step(self.sub(y, x), mu, name=name)

    def f_logic(self, kind: str, operands, mu=DEFAULT_MU, name=None) -> NodeId:
        operands = tuple(operands)
        if kind == "not":
            if len(operands) != 1:
                raise GraphError("f_not takes one operand")
            return self.f_not(operands[0], name=name)
        if len(operands) != 2:
            raise GraphError("f_%s takes two operands" % kind)
        if kind == "and":
            return self.f_and(operands[0], operands[1], mu, name=name)
        if kind == "or":
            return self.f_or(operands[0], operands[1], mu, name=name)
        raise GraphError("unknown logic kind %r" % kind)

    def f_compare(self, kind: str, x: NodeId, y, mu=DEFAULT_MU, name=None) -> NodeId:
        if kind == "larger":
            return self.f_larger(x, y, mu, name=name)
        if kind == "smaller":
            return self.f_smaller(x, y, mu, name=name)
        raise GraphError("unknown comparison kind %r" % kind)

    # -- conditional assignment ---------------------------------------------------

    def f_ifelse(
        self,
        cond: NodeId,
        t: NodeId,
        f: NodeId,
        params: ApproxParams | None = None,
        variant: str = "original",
        bounds: ValueBounds | None = None,
        name=None,
    ) -> NodeId:
        """Select t when cond = 1, f when cond = 0.

        cond must be scalar (broadcast) or match the branch width.  The four
        ReLU-based variants need params.lam to dominate |t| and |f|; the
        multiplicative variants use Concat + Multi and need no lambda.
        """
        if variant not in VARIANTS:
            raise GraphError("unknown f_ifelse variant %r" % variant)
        params = params or ApproxParams()
        bounds = bounds or ValueBounds()
        m = self.dim(t)
        if self.dim(f) != m:
            raise DimensionError("f_ifelse branches differ: %d vs %d" % (m, self.dim(f)))
        cdim = self.dim(cond)
        if cdim not in (1, m):
            raise DimensionError("cond dim %d incompatible with branch dim %d" % (cdim, m))

        # structurally-zero branches are safe to treat as declared zero
        t_zero = bounds.t_zero or self._nodes[t].is_zero_lin()
        f_zero = bounds.f_zero or self._nodes[f].is_zero_lin()
        t_nonneg = bounds.t_nonneg or t_zero
        f_nonneg = bounds.f_nonneg or f_zero

        if variant in MULTIPLICATIVE_VARIANTS:
            return self._ifelse_multiplicative(
                cond, t, f, variant == "multiplicative_optimized", t_zero, f_zero, name
            )

        lam = params.lam
        if lam is None:
            raise GraphError("f_ifelse variant %r requires lambda" % variant)
        lam = as_exact(lam)
        if bounds.abs_bound is not None and lam <= as_exact(bounds.abs_bound):
            raise GraphError("lambda must strictly exceed the declared branch bound")

        optimized = variant in ("optimized", "step_optimized")
        keep = {"T1": True, "T2": True, "T3": True, "T4": True}
        if optimized:
            if f_zero:
                keep["T1"] = keep["T3"] = False
            if t_zero:
                keep["T2"] = keep["T4"] = False
            if f_nonneg:
                keep["T3"] = False
            if t_nonneg:
                keep["T4"] = False
        kept = [k for k in ("T1", "T2", "T3", "T4") if keep[k]]
        if not kept:
            return self.f_constant(cond, zeros_vec(m), name=name)

        if variant in ("original", "optimized"):
            return self._ifelse_direct(cond, t, f, lam, kept, m, cdim, name)
        return self._ifelse_step(cond, t, f, lam, params.mu, kept, m, cdim, name)

    def _ifelse_direct(self, cond, t, f, lam, kept, m, cdim, name) -> NodeId:
        # pre-activations over Concat(cond, t, f):
        #   T1 = -lam*c + f      T2 = lam*c + t - lam
        #   T3 = -lam*c - f      T4 = lam*c - t - lam
        src = self.concat((cond, t, f))
        one = Fraction(1)
        entries: dict[tuple[int, int], Fraction] = {}
        bias: list[Fraction] = []
        row = 0
        for term in kept:
            c_coef = -lam if term in ("T1", "T3") else lam
            br_off = cdim if term in ("T2", "T4") else cdim + m
            br_sign = one if term in ("T1", "T2") else -one
            b_val = Fraction(0) if term in ("T1", "T3") else -lam
            for i in range(m):
                entries[(row, 0 if cdim == 1 else i)] = c_coef
                entries[(row, br_off + i)] = br_sign
                bias.append(b_val)
                row += 1
        pre = self.lin(src, Matrix(row, cdim + 2 * m, entries), tuple(bias))
        act = self.relu(pre)
        sign = {"T1": one, "T2": one, "T3": -one, "T4": -one}
        blocks = [Matrix.identity(m).scale(sign[term]) for term in kept]
        return self.lin(act, Matrix.hstack(blocks), name=name)

    def _ifelse_step(self, cond, t, f, lam, mu, kept, m, cdim, name) -> NodeId:
        # steps first:  s1 = f_step(1/2 - c), s2 = f_step(c - 1/2); then
        #   T1 = lam*s1 + f - lam    T2 = lam*s2 + t - lam
        #   T3 = lam*s1 - f - lam    T4 = lam*s2 - t - lam
        half = Fraction(1, 2)
        s1 = self.f_step(self.sub(half, cond), mu)
        s2 = self.f_step(self.sub(cond, half), mu)
        src = self.concat((s1, s2, t, f))
        one = Fraction(1)
        entries: dict[tuple[int, int], Fraction] = {}
        bias: list[Fraction] = []
        row = 0
        for term in kept:
            s_off = 0 if term in ("T1", "T3") else cdim
            br_off = 2 * cdim if term in ("T2", "T4") else 2 * cdim + m
            br_sign = one if term in ("T1", "T2") else -one
            for i in range(m):
                entries[(row, s_off + (0 if cdim == 1 else i))] = lam
                entries[(row, br_off + i)] = br_sign
                bias.append(-lam)
                row += 1
        pre = self.lin(src, Matrix(row, 2 * cdim + 2 * m, entries), tuple(bias))
        act = self.relu(pre)
        sign = {"T1": one, "T2": one, "T3": -one, "T4": -one}
        blocks = [Matrix.identity(m).scale(sign[term]) for term in kept]
        return self.lin(act, Matrix.hstack(blocks), name=name)

    def _ifelse_multiplicative(self, cond, t, f, optimized, t_zero, f_zero, name) -> NodeId:
        m = self.dim(t)

        def broadcast(c: NodeId) -> NodeId:
            if self.dim(c) == m:
                return c
            return self.lin(c, Matrix.ones(m, 1))

        terms: list[NodeId] = []
        if not (optimized and t_zero):
            terms.append(self.multi(self.concat((broadcast(cond), t))))
        if not (optimized and f_zero):
            nc = self.f_not(cond)
            terms.append(self.multi(self.concat((broadcast(nc), f))))
        if not terms:
            return self.f_constant(cond, zeros_vec(m), name=name)
        if len(terms) == 1:
            if name:
                self._nodes[terms[0]].name = name
            return terms[0]
        return self.add(terms[0], terms[1], name=name)

    # -- heavier gadgets --------------------------------------------------------

    def f_relu_identity(self, src: NodeId, name=None) -> NodeId:
        """Exact identity built from ReLUs via a positive/negative split."""
        d = self.dim(src)
        eye = Matrix.identity(d)
        split = self.lin(src, Matrix.vstack([eye, eye.scale(Fraction(-1))]))
        act = self.relu(split)
        return self.lin(act, Matrix.hstack([eye, eye.scale(Fraction(-1))]), name=name)

    def f_modulo_counter(self, src: NodeId, divisor: int, mu=DEFAULT_MU, name=None) -> NodeId:
        """Outputs t mod divisor at step t (0-indexed).

        A unit vector rotates 1/divisor of a revolution per step; an
        extractor of rotated unit vectors plus a threshold at cos(pi/divisor)
        one-hots the position, and an index row reads the integer out.
        Irrational entries are stored as rationals accurate to ~1e-45, far
        inside the threshold margin, so exact runs still saturate f_step.
        """
        if divisor < 1:
            raise ValueError("divisor must be >= 1")
        mu = as_exact(mu)
        c1, s1 = cos_sin_rational(1, divisor)
        rot = Matrix.from_rows([[c1, -s1], [s1, c1]])
        # first output should be position 0, so start one step before it
        init = (c1, -s1)  # inverse rotation applied to (1, 0)
        threshold = cos_half_angle_rational(divisor)
        if divisor > 2 and Fraction(1) - threshold < 2 / mu:
            raise ValueError(
                "mu=%s too small to separate %d cycler positions" % (mu, divisor)
            )
        cycler = self.linstate(src, rot, Matrix.zeros(2, self.dim(src)), init)
        rows = []
        for i in range(divisor):
            ci, si = cos_sin_rational(i, divisor)
            rows.append([ci, si])
        indicator = self.lin(cycler, Matrix.from_rows(rows))
        shifted = self.lin(
            indicator, Matrix.identity(divisor), (-threshold,) * divisor
        )
        one_hot = self.f_step(shifted, mu)
        index_row = Matrix(1, divisor, {(0, i): Fraction(i) for i in range(divisor)})
        return self.lin(one_hot, index_row, name=name)


def new_program(input_dim: int) -> ProgramBuilder:
    """Start a program: a graph holding exactly one Input of the given dim."""
    return ProgramBuilder(input_dim)
