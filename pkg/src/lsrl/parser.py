"""Parser for the textual LSRL source format.

Line-oriented: a `ForEach:` header, `name = Op(args)` assignments, one
`return`, `#` comments, and a parse-time unrolled `for i in a..b:` macro
(literal bounds; `i` substitutes as a number, `$i` inside identifiers).
Numbers are exact: integers, decimals and `p/q` all become rationals.
See docs/grammar.md for the full grammar.

Parsing is pure and reentrant; distinct sources can parse concurrently.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction

from .builder import ApproxParams, ProgramBuilder, ValueBounds, VARIANTS, DEFAULT_MU
from .graph import ComputationGraph, Diagnostic, GraphError
from .linalg import Matrix, vec_exact


@dataclass(frozen=True)
class SourceProgram:
    text: str
    origin: str = "<inline>"


class ParseError(GraphError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


@dataclass
class _Line:
    no: int
    text: str


_NAME = r"[A-Za-z_][A-Za-z_0-9]*"
_ASSIGN_RE = re.compile(r"^(%s)\s*=\s*(.+)$" % _NAME)
_FOR_RE = re.compile(r"^for\s+(%s)\s+in\s+(-?\d+)\s*\.\.\s*(-?\d+)\s*:$" % _NAME)
_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?(?:/\d+)?")

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>-?\d+\.\d+|-?\d+/\d+|-?\d+)|(?P<name>%s)|(?P<sym>[()\[\],:=*+\-]))" % _NAME
)


def _tokenize(text: str):
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip():
                raise ValueError("unexpected character %r" % text[pos])
            break
        pos = m.end()
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
    return out


class _Tokens:
    def __init__(self, items):
        self.items = items
        self.i = 0

    def peek(self, k: int = 0):
        j = self.i + k
        return self.items[j] if j < len(self.items) else (None, None)

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, sym: str):
        kind, val = self.next()
        if val != sym:
            raise ValueError("expected %r, found %r" % (sym, val))

    def done(self) -> bool:
        return self.i >= len(self.items)


class _Parser:
    def __init__(self, source: SourceProgram):
        self.source = source
        self.diags: list[Diagnostic] = []
        self.builder: ProgramBuilder | None = None
        self.names: dict[str, int] = {}
        self.output: int | None = None
        self.line_no = 0

    # -- diagnostics ---------------------------------------------------------

    def err(self, msg: str):
        self.diags.append(Diagnostic(msg, line=self.line_no, column=1))

    # -- entry ----------------------------------------------------------------

    def parse(self) -> ComputationGraph:
        raw = self.source.text.splitlines()
        lines: list[_Line] = []
        for i, text in enumerate(raw, start=1):
            body = text.split("#", 1)[0].rstrip()
            if body.strip():
                lines.append(_Line(i, body))
        if not lines:
            raise ParseError([Diagnostic("empty program")])
        head = lines[0]
        if head.text.strip() != "ForEach:":
            raise ParseError([Diagnostic("program must start with 'ForEach:'", line=head.no)])
        stmts = self._expand_macros(lines[1:])
        for line in stmts:
            self.line_no = line.no
            try:
                self._statement(line.text.strip())
            except (ValueError, GraphError) as e:
                self.err(str(e))
            if len(self.diags) > 20:
                break
        if self.diags:
            raise ParseError(self.diags)
        if self.builder is None:
            raise ParseError([Diagnostic("program declares no Input")])
        if self.output is None:
            raise ParseError([Diagnostic("program has no return statement")])
        try:
            return self.builder.finalize(self.output)
        except GraphError as e:
            raise ParseError([Diagnostic(str(e))])

    # -- macro expansion --------------------------------------------------------

    def _expand_macros(self, lines: list[_Line]) -> list[_Line]:
        out: list[_Line] = []
        i = 0
        while i < len(lines):
            line = lines[i]
            stripped = line.text.strip()
            m = _FOR_RE.match(stripped)
            if not m:
                out.append(line)
                i += 1
                continue
            var, lo, hi = m.group(1), int(m.group(2)), int(m.group(3))
            indent = len(line.text) - len(line.text.lstrip())
            body = []
            i += 1
            while i < len(lines):
                nxt = lines[i]
                nxt_indent = len(nxt.text) - len(nxt.text.lstrip())
                if nxt_indent <= indent:
                    break
                body.append(nxt)
                i += 1
            if not body:
                raise ParseError([Diagnostic("empty for-macro body", line=line.no)])
            for value in range(lo, hi + 1):
                for b in body:
                    out.append(_Line(b.no, _substitute(b.text, var, value)))
        return out

    # -- statements ---------------------------------------------------------------

    def _statement(self, text: str) -> None:
        if text.startswith("return"):
            expr = text[len("return"):].strip()
            if not expr:
                raise ValueError("return needs an expression")
            if self.output is not None:
                raise ValueError("only one return is allowed")
            self.output = self._expr(_Tokens(_tokenize(expr)))
            return
        m = _ASSIGN_RE.match(text)
        if not m:
            raise ValueError("expected 'name = expression' or 'return expression'")
        name, rhs = m.group(1), m.group(2)
        toks = _Tokens(_tokenize(rhs))
        if toks.peek()[1] == "Input":
            node = self._input_decl(toks)
        else:
            node = self._expr(toks)
        if not toks.done():
            raise ValueError("trailing tokens after expression")
        self.names[name] = node
        if self.builder is not None:
            self.builder._nodes[node].name = name

    def _input_decl(self, toks: _Tokens) -> int:
        toks.next()
        toks.expect("(")
        kind, val = toks.next()
        if val == "dim":
            toks.expect("=")
            kind, val = toks.next()
        if kind != "num":
            raise ValueError("Input needs dim=<integer>")
        toks.expect(")")
        if self.builder is not None:
            raise ValueError("only one Input can be declared")
        dim = int(Fraction(val))
        self.builder = ProgramBuilder(dim)
        return self.builder.input

    # -- expressions ----------------------------------------------------------------
    #
    # expr     := term (('+'|'-') term)*
    # term     := atom ('*' atom)?
    # atom     := call | name[slice] | name | number | '(' expr ')'

    def _expr(self, toks: _Tokens) -> int:
        node = self._term(toks)
        while toks.peek()[1] in ("+", "-"):
            op = toks.next()[1]
            rhs = self._term_or_const(toks)
            b = self._need_builder()
            if op == "+":
                node = b.add(node, rhs)
            else:
                node = b.sub(node, rhs)
        return node

    def _term_or_const(self, toks: _Tokens):
        # a constant operand stays a number so add/sub fold it into a Lin
        kind, val = toks.peek()
        if kind == "num" and toks.peek(1)[1] != "*":
            toks.next()
            return Fraction(val)
        return self._term(toks)

    def _term(self, toks: _Tokens) -> int:
        kind, val = toks.peek()
        if kind == "num":
            # number * node, e.g. 2 * x  (also 1 - x handled by _expr)
            toks.next()
            c = Fraction(val)
            if toks.peek()[1] == "*":
                toks.next()
                node = self._atom(toks)
                return self._need_builder().scale(node, c)
            raise ValueError("a bare number is not a variable; use f_constant")
        node = self._atom(toks)
        if toks.peek()[1] == "*":
            toks.next()
            kind, val = toks.peek()
            if kind == "num":
                toks.next()
                return self._need_builder().scale(node, Fraction(val))
            other = self._atom(toks)
            raise ValueError("variable * variable needs Multi; use Multi(Concat(..))")
        return node

    def _atom(self, toks: _Tokens) -> int:
        kind, val = toks.next()
        if val == "(":
            node = self._expr(toks)
            toks.expect(")")
            return node
        if kind != "name":
            raise ValueError("expected a name, found %r" % val)
        if toks.peek()[1] == "(":
            return self._call(val, toks)
        node = self.names.get(val)
        if node is None:
            raise ValueError("unknown identifier %r" % val)
        if toks.peek()[1] == "[":
            return self._slice(node, toks)
        return node

    def _slice(self, node: int, toks: _Tokens) -> int:
        toks.expect("[")
        b = self._need_builder()
        dim = b.dim(node)
        lo: int | None = None
        hi: int | None = None
        if toks.peek()[1] != ":":
            lo = self._int(toks)
        if toks.peek()[1] == ":":
            toks.next()
            if toks.peek()[1] != "]":
                hi = self._int(toks)
        else:
            hi = (lo + 1) if lo != -1 else None  # x[i] is the single element
            if lo == -1:
                lo, hi = dim - 1, dim
        toks.expect("]")
        lo = 0 if lo is None else (lo + dim if lo < 0 else lo)
        hi = dim if hi is None else (hi + dim if hi < 0 else hi)
        return b.slice(node, lo, hi)

    def _int(self, toks: _Tokens) -> int:
        sign = 1
        if toks.peek()[1] == "-":
            toks.next()
            sign = -1
        kind, val = toks.next()
        if kind != "num":
            raise ValueError("expected an integer index")
        f = Fraction(val)
        if f.denominator != 1:
            raise ValueError("slice indices must be integers")
        return sign * int(f)

    # -- calls -----------------------------------------------------------------------

    def _call(self, fname: str, toks: _Tokens) -> int:
        toks.expect("(")
        args: list = []
        kwargs: dict = {}
        while toks.peek()[1] != ")":
            if toks.peek()[0] == "name" and toks.peek(1)[1] == "=":
                key = toks.next()[1]
                toks.next()
                kwargs[key] = self._argument(toks)
            else:
                args.append(self._argument(toks))
            if toks.peek()[1] == ",":
                toks.next()
        toks.expect(")")
        return self._dispatch(fname, args, kwargs)

    def _argument(self, toks: _Tokens):
        kind, val = toks.peek()
        if val == "[":
            return self._matrix_literal(toks)
        if kind == "name" and val in ("eye", "zeros", "ones") and toks.peek(1)[1] == "(":
            return self._matrix_helper(toks)
        if kind == "num" and toks.peek(1)[1] in (",", ")"):
            toks.next()
            return Fraction(val)
        if val == "-" and toks.peek(1)[0] == "num":
            toks.next()
            return -Fraction(toks.next()[1])
        if kind == "name" and val in VARIANTS and toks.peek(1)[1] in (",", ")"):
            toks.next()
            return val
        if kind == "name" and val in ("true", "false") and toks.peek(1)[1] in (",", ")"):
            toks.next()
            return val == "true"
        return self._expr(toks)

    def _matrix_literal(self, toks: _Tokens):
        toks.expect("[")
        if toks.peek()[1] == "[":
            rows = []
            while True:
                rows.append(self._vector_literal(toks))
                if toks.peek()[1] == ",":
                    toks.next()
                    continue
                break
            toks.expect("]")
            return Matrix.from_rows(rows)
        # flat vector literal
        values = []
        while toks.peek()[1] != "]":
            values.append(self._number(toks))
            if toks.peek()[1] == ",":
                toks.next()
        toks.expect("]")
        return vec_exact(values)

    def _vector_literal(self, toks: _Tokens):
        toks.expect("[")
        values = []
        while toks.peek()[1] != "]":
            values.append(self._number(toks))
            if toks.peek()[1] == ",":
                toks.next()
        toks.expect("]")
        return values

    def _number(self, toks: _Tokens) -> Fraction:
        sign = 1
        if toks.peek()[1] == "-":
            toks.next()
            sign = -1
        kind, val = toks.next()
        if kind != "num":
            raise ValueError("expected a number, found %r" % val)
        return sign * Fraction(val)

    def _matrix_helper(self, toks: _Tokens):
        name = toks.next()[1]
        toks.expect("(")
        dims = [self._int(toks)]
        if toks.peek()[1] == ",":
            toks.next()
            dims.append(self._int(toks))
        toks.expect(")")
        if name == "eye":
            return Matrix.identity(dims[0])
        r, c = dims[0], dims[1] if len(dims) > 1 else 1
        if name == "zeros":
            return Matrix.zeros(r, c)
        return Matrix.ones(r, c)


    def _need_builder(self) -> ProgramBuilder:
        if self.builder is None:
            raise ValueError("Input must be declared before any other statement")
        return self.builder

    def _as_vector(self, value, what: str):
        if isinstance(value, Matrix):
            if value.cols == 1:
                return tuple(value.row(i)[0] for i in range(value.rows))
            if value.rows == 1:
                return value.row(0)
            raise ValueError("%s must be a vector" % what)
        if isinstance(value, tuple):
            return value
        if isinstance(value, Fraction):
            return (value,)
        raise ValueError("%s must be a vector" % what)

    def _dispatch(self, fname: str, args: list, kwargs: dict) -> int:
        b = self._need_builder()
        get = kwargs.get

        def arg(i, key, default=None):
            if key in kwargs:
                return kwargs[key]
            if i is not None and i < len(args):
                return args[i]
            if default is not None:
                return default
            raise ValueError("%s: missing argument %r" % (fname, key))

        if fname in ("Lin", "Linear"):
            src = arg(0, "input")
            A = arg(1, "A")
            bvec = get("b")
            return b.lin(src, A, None if bvec is None else self._as_vector(bvec, "b"))
        if fname == "ReLU":
            return b.relu(arg(0, "input"))
        if fname == "LinState":
            return b.linstate(
                arg(0, "input"),
                arg(1, "A"),
                arg(2, "B"),
                self._as_vector(arg(3, "init_state"), "init_state"),
                None if get("b") is None else self._as_vector(get("b"), "b"),
            )
        if fname == "Concat":
            sources = args if args else []
            for key in sorted(kwargs):
                sources.append(kwargs[key])
            return b.concat(sources)
        if fname == "Multi":
            return b.multi(arg(0, "input"))
        if fname == "f_constant":
            c = arg(1, "value")
            return b.f_constant(arg(0, "input"), self._as_vector(c, "value"))
        if fname == "f_step":
            return b.f_step(arg(0, "input"), arg(1, "mu", DEFAULT_MU))
        if fname == "f_bump":
            return b.f_bump(arg(0, "input"), arg(1, "lower"), arg(2, "upper"),
                            arg(3, "mu", DEFAULT_MU))
        if fname == "f_not":
            return b.f_not(arg(0, "input"))
        if fname in ("f_and", "f_or"):
            op = fname[2:]
            return b.f_logic(op, (arg(0, "x"), arg(1, "y")), arg(2, "mu", DEFAULT_MU))
        if fname in ("f_larger", "f_smaller"):
            return b.f_compare(fname[2:], arg(0, "x"), arg(1, "y"), arg(2, "mu", DEFAULT_MU))
        if fname == "f_ifelse":
            params = ApproxParams(
                mu=arg(None, "mu", DEFAULT_MU),
                lam=kwargs.get("lam"),
            )
            bounds = ValueBounds(
                t_nonneg=bool(kwargs.get("t_nonneg", False)),
                f_nonneg=bool(kwargs.get("f_nonneg", False)),
            )
            return b.f_ifelse(
                arg(0, "cond"),
                arg(1, "t"),
                arg(2, "f"),
                params=params,
                variant=kwargs.get("variant", "original"),
                bounds=bounds,
            )
        if fname == "f_modulo_counter":
            d = arg(1, "divisor")
            return b.f_modulo_counter(arg(0, "input"), int(d), arg(2, "mu", DEFAULT_MU))
        if fname == "f_relu_identity":
            return b.f_relu_identity(arg(0, "input"))
        raise ValueError("unknown operation %r" % fname)


def _substitute(text: str, var: str, value: int) -> str:
    # `$i` splices into identifiers, bare `i` becomes the literal value
    text = text.replace("$" + var, str(value))
    return re.sub(r"\b%s\b" % re.escape(var), str(value), text)


def parse(source: SourceProgram | str) -> ComputationGraph:
    """Parse LSRL text into a validated graph; raises ParseError with
    line-tagged diagnostics on any failure."""
    if isinstance(source, str):
        source = SourceProgram(source)
    return _Parser(source).parse()


def parse_diagnostics(source: SourceProgram | str) -> list[Diagnostic]:
    """Diagnostics-only entry point: empty list means the source parses."""
    try:
        parse(source)
        return []
    except ParseError as e:
        return e.diagnostics
