"""Sparse matrices and number helpers shared by the whole toolchain.

Weights are stored as exact rationals (`fractions.Fraction`) until a model is
explicitly cast to the f64 backend.  Matrices keep an explicit non-zero
structure: a zero that is never stored is a *structural* zero, which is what
the noise injector relies on to leave zero weights untouched.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Iterable, Iterator, Sequence, Union

import mpmath

Number = Union[Fraction, float]

EXACT = "exact"
F64 = "f64"
BACKENDS = (EXACT, F64)


class BackendError(TypeError):
    """Raised when values of one numeric backend leak into the other."""


def as_exact(value) -> Fraction:
    """Coerce ints / rationals / decimal strings to Fraction; reject floats."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value)
    if isinstance(value, float):
        raise BackendError("float value cannot enter the exact backend: %r" % value)
    raise BackendError("cannot interpret %r as an exact rational" % (value,))


def as_float(value) -> float:
    if isinstance(value, float):
        return value
    if isinstance(value, (int, Fraction)):
        return float(value)
    if isinstance(value, str):
        return float(Fraction(value))
    raise BackendError("cannot interpret %r as a float" % (value,))


def parse_number(text: str) -> Fraction:
    """Parse an integer, decimal or `p/q` literal into an exact rational."""
    return Fraction(text.strip())


def format_number(value: Number) -> str:
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return str(value.numerator)
        return "%d/%d" % (value.numerator, value.denominator)
    return repr(value)


def relu_scalar(value: Number) -> Number:
    # float: negatives land on +0.0, exact: Fraction(0)
    if isinstance(value, float):
        return value if value > 0.0 else 0.0
    return value if value > 0 else Fraction(0)


# ---------------------------------------------------------------------------
# vectors: plain tuples of numbers
# ---------------------------------------------------------------------------

Vector = tuple


def vec(values: Iterable) -> Vector:
    return tuple(as_exact(v) for v in values)


def zeros_vec(n: int) -> Vector:
    return (Fraction(0),) * n


def ones_vec(n: int) -> Vector:
    return (Fraction(1),) * n


def vec_add(a: Sequence[Number], b: Sequence[Number]) -> Vector:
    if len(a) != len(b):
        raise ValueError("vector length mismatch: %d vs %d" % (len(a), len(b)))
    return tuple(x + y for x, y in zip(a, b))


def vec_sub(a: Sequence[Number], b: Sequence[Number]) -> Vector:
    if len(a) != len(b):
        raise ValueError("vector length mismatch: %d vs %d" % (len(a), len(b)))
    return tuple(x - y for x, y in zip(a, b))


def vec_neg(a: Sequence[Number]) -> Vector:
    return tuple(-x for x in a)


def vec_hadamard(a: Sequence[Number], b: Sequence[Number]) -> Vector:
    if len(a) != len(b):
        raise ValueError("vector length mismatch: %d vs %d" % (len(a), len(b)))
    return tuple(x * y for x, y in zip(a, b))


def vec_relu(a: Sequence[Number]) -> Vector:
    return tuple(relu_scalar(x) for x in a)


def vec_float(a: Sequence[Number]) -> Vector:
    return tuple(as_float(x) for x in a)


def vec_exact(a: Sequence) -> Vector:
    return tuple(as_exact(x) for x in a)


# ---------------------------------------------------------------------------
# sparse matrices
# ---------------------------------------------------------------------------


class Matrix:
    """Immutable sparse matrix with deterministic (row-major) iteration.

    Stored zeros are dropped, so `nonzero_items` is exactly the set of
    parameters a noise pass may perturb.  All arithmetic preserves the entry
    type (Fraction or float); mixing backends inside one matrix is the
    caller's bug and will surface as a Fraction/float operation.
    """

    __slots__ = ("rows", "cols", "_items")

    def __init__(self, rows: int, cols: int, entries: dict | None = None):
        if rows < 0 or cols < 0:
            raise ValueError("negative matrix shape")
        self.rows = rows
        self.cols = cols
        items = []
        if entries:
            for (i, j), v in entries.items():
                if not (0 <= i < rows and 0 <= j < cols):
                    raise ValueError("entry (%d,%d) outside %dx%d" % (i, j, rows, cols))
                if v != 0:
                    items.append(((i, j), v))
        items.sort(key=lambda kv: kv[0])
        self._items = tuple(items)

    # -- constructors -------------------------------------------------------

    @staticmethod
    def from_rows(rows: Sequence[Sequence]) -> "Matrix":
        r = len(rows)
        c = len(rows[0]) if r else 0
        entries = {}
        for i, row in enumerate(rows):
            if len(row) != c:
                raise ValueError("ragged matrix literal")
            for j, v in enumerate(row):
                v = v if isinstance(v, (Fraction, float)) else as_exact(v)
                if v != 0:
                    entries[(i, j)] = v
        return Matrix(r, c, entries)

    @staticmethod
    def identity(n: int) -> "Matrix":
        return Matrix(n, n, {(i, i): Fraction(1) for i in range(n)})

    @staticmethod
    def zeros(rows: int, cols: int) -> "Matrix":
        return Matrix(rows, cols)

    @staticmethod
    def ones(rows: int, cols: int) -> "Matrix":
        one = Fraction(1)
        return Matrix(rows, cols, {(i, j): one for i in range(rows) for j in range(cols)})

    @staticmethod
    def selection(indices: Sequence[int], in_dim: int) -> "Matrix":
        """Rows picking the given source coordinates (slice / permutation)."""
        entries = {}
        for i, j in enumerate(indices):
            if not 0 <= j < in_dim:
                raise ValueError("selection index %d outside dim %d" % (j, in_dim))
            entries[(i, j)] = Fraction(1)
        return Matrix(len(indices), in_dim, entries)

    @staticmethod
    def vstack(blocks: Sequence["Matrix"]) -> "Matrix":
        if not blocks:
            raise ValueError("vstack of nothing")
        cols = blocks[0].cols
        entries = {}
        off = 0
        for b in blocks:
            if b.cols != cols:
                raise ValueError("vstack column mismatch")
            for (i, j), v in b._items:
                entries[(i + off, j)] = v
            off += b.rows
        return Matrix(off, cols, entries)

    @staticmethod
    def hstack(blocks: Sequence["Matrix"]) -> "Matrix":
        if not blocks:
            raise ValueError("hstack of nothing")
        rows = blocks[0].rows
        entries = {}
        off = 0
        for b in blocks:
            if b.rows != rows:
                raise ValueError("hstack row mismatch")
            for (i, j), v in b._items:
                entries[(i, j + off)] = v
            off += b.cols
        return Matrix(rows, off, entries)

    @staticmethod
    def block_diag(blocks: Sequence["Matrix"]) -> "Matrix":
        entries = {}
        roff = coff = 0
        for b in blocks:
            for (i, j), v in b._items:
                entries[(i + roff, j + coff)] = v
            roff += b.rows
            coff += b.cols
        return Matrix(roff, coff, entries)

    # -- access --------------------------------------------------------------

    def nonzero_items(self) -> Iterator[tuple[tuple[int, int], Number]]:
        return iter(self._items)

    def __getitem__(self, key: tuple[int, int]) -> Number:
        i, j = key
        if not (0 <= i < self.rows and 0 <= j < self.cols):
            raise IndexError(key)
        for (a, b), v in self._items:
            if (a, b) == (i, j):
                return v
        return Fraction(0)

    def row(self, i: int) -> Vector:
        out = [Fraction(0)] * self.cols
        for (a, j), v in self._items:
            if a == i:
                out[j] = v
        return tuple(out)

    def to_rows(self) -> list[list[Number]]:
        zero = Fraction(0)
        rows = [[zero] * self.cols for _ in range(self.rows)]
        for (i, j), v in self._items:
            rows[i][j] = v
        return rows

    @property
    def is_zero(self) -> bool:
        return not self._items

    def is_identity(self) -> bool:
        if self.rows != self.cols or len(self._items) != self.rows:
            return False
        return all(i == j and v == 1 for (i, j), v in self._items)

    def is_selection(self) -> bool:
        """Exactly one entry per row, equal to one: a coordinate pick."""
        seen = set()
        for (i, _), v in self._items:
            if v != 1 or i in seen:
                return False
            seen.add(i)
        return len(seen) == self.rows

    def selected_indices(self) -> list[int]:
        if not self.is_selection():
            raise ValueError("not a selection matrix")
        out = [0] * self.rows
        for (i, j), _ in self._items:
            out[i] = j
        return out

    # -- arithmetic -----------------------------------------------------------

    def matvec(self, x: Sequence[Number], zero: Number = Fraction(0)) -> Vector:
        """Multiply by a vector; `zero` fills rows with no contribution.

        Accumulation runs in sorted row-major entry order, which keeps float
        results bit-reproducible across runs.
        """
        if len(x) != self.cols:
            raise ValueError("matvec dim mismatch: %dx%d @ %d" % (self.rows, self.cols, len(x)))
        acc: dict[int, Number] = {}
        for (i, j), v in self._items:
            xv = x[j]
            if xv == 0:
                continue
            acc[i] = acc.get(i, zero) + v * xv
        return tuple(acc.get(i, zero) for i in range(self.rows))

    def __matmul__(self, other: "Matrix") -> "Matrix":
        if self.cols != other.rows:
            raise ValueError(
                "matmul dim mismatch: %dx%d @ %dx%d" % (self.rows, self.cols, other.rows, other.cols)
            )
        by_row: dict[int, list[tuple[int, Number]]] = {}
        for (k, j), v in other._items:
            by_row.setdefault(k, []).append((j, v))
        entries: dict[tuple[int, int], Number] = {}
        for (i, k), u in self._items:
            for j, v in by_row.get(k, ()):
                key = (i, j)
                entries[key] = entries.get(key, 0) + u * v
        return Matrix(self.rows, other.cols, entries)

    def __add__(self, other: "Matrix") -> "Matrix":
        if (self.rows, self.cols) != (other.rows, other.cols):
            raise ValueError("matrix add shape mismatch")
        entries = dict(self._items)
        for key, v in other._items:
            entries[key] = entries.get(key, 0) + v
        return Matrix(self.rows, self.cols, entries)

    def __neg__(self) -> "Matrix":
        return Matrix(self.rows, self.cols, {k: -v for k, v in self._items})

    def scale(self, c: Number) -> "Matrix":
        if c == 0:
            return Matrix.zeros(self.rows, self.cols)
        return Matrix(self.rows, self.cols, {k: c * v for k, v in self._items})

    def map_values(self, fn) -> "Matrix":
        return Matrix(self.rows, self.cols, {k: fn(v) for k, v in self._items})

    def to_float(self) -> "Matrix":
        return self.map_values(as_float)

    def to_exact(self) -> "Matrix":
        return self.map_values(as_exact)

    # -- comparison / repr -----------------------------------------------------

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Matrix)
            and self.rows == other.rows
            and self.cols == other.cols
            and self._items == other._items
        )

    def __hash__(self):
        return hash((self.rows, self.cols, self._items))

    def __repr__(self) -> str:
        return "Matrix(%dx%d, %d nz)" % (self.rows, self.cols, len(self._items))


# ---------------------------------------------------------------------------
# high precision trigonometric rationals for the modulo counter
# ---------------------------------------------------------------------------

APPROX_DIGITS = 45


def cos_sin_rational(k: int, divisor: int, digits: int = APPROX_DIGITS) -> tuple[Fraction, Fraction]:
    """cos/sin of 2*pi*k/divisor as rationals with error below 10**-digits.

    Angles that are multiples of pi/2 come out exact, so small divisors keep
    exact rotation matrices.
    """
    if divisor <= 0:
        raise ValueError("divisor must be positive")
    k = k % divisor
    # 2*pi*k/divisor is a multiple of pi/2 iff divisor divides 4*k
    if (4 * k) % divisor == 0:
        quarter = (4 * k) // divisor  # angle = quarter * pi/2
        c = [1, 0, -1, 0][quarter % 4]
        s = [0, 1, 0, -1][quarter % 4]
        return Fraction(c), Fraction(s)
    with mpmath.workdps(digits + 20):
        angle = 2 * mpmath.pi * k / divisor
        scale = mpmath.mpf(10) ** digits
        c = Fraction(int(mpmath.floor(mpmath.cos(angle) * scale)), 10**digits)
        s = Fraction(int(mpmath.floor(mpmath.sin(angle) * scale)), 10**digits)
    return c, s


def cos_half_angle_rational(divisor: int, digits: int = APPROX_DIGITS) -> Fraction:
    """cos(pi/divisor), the one-hot threshold for a `divisor`-step cycler."""
    if divisor <= 0:
        raise ValueError("divisor must be positive")
    if divisor == 1:
        return Fraction(-1)
    if divisor == 2:
        return Fraction(0)
    if divisor == 4:
        # cos(pi/4) is irrational; fall through to the approximation
        pass
    with mpmath.workdps(digits + 20):
        scale = mpmath.mpf(10) ** digits
        return Fraction(int(mpmath.floor(mpmath.cos(mpmath.pi / divisor) * scale)), 10**digits)
