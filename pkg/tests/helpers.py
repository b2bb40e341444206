"""Shared test machinery: random program generation and comparison helpers."""

from __future__ import annotations

import random
from fractions import Fraction

from lsrl import Matrix, new_program
from lsrl.builder import ProgramBuilder


def rand_fraction(rng: random.Random, span: int = 3, den: int = 3) -> Fraction:
    return Fraction(rng.randint(-span, span), rng.randint(1, den))


def rand_matrix(rng: random.Random, rows: int, cols: int, density: float = 0.7) -> Matrix:
    entries = {}
    for i in range(rows):
        for j in range(cols):
            if rng.random() < density:
                entries[(i, j)] = rand_fraction(rng)
    return Matrix(rows, cols, entries)


def rand_vec(rng: random.Random, n: int):
    return tuple(rand_fraction(rng) for _ in range(n))


def random_program(rng: random.Random, allow_multi: bool = True, max_extra: int = 14):
    """A random valid program exercising every node kind.

    Nodes are appended by consuming random existing nodes; dangling leaves
    are concatenated into the single sink at the end.
    """
    b = new_program(rng.randint(1, 4))
    pool = [b.input]
    n_extra = rng.randint(2, max_extra)
    for _ in range(n_extra):
        kind = rng.choice(
            ["lin", "lin", "lin", "relu", "relu", "linstate", "linstate", "concat", "multi", "slice"]
        )
        src = rng.choice(pool)
        d = b.dim(src)
        if kind == "lin":
            out = rng.randint(1, 5)
            pool.append(b.lin(src, rand_matrix(rng, out, d), rand_vec(rng, out)))
        elif kind == "relu":
            pool.append(b.relu(src))
        elif kind == "linstate":
            m = rng.randint(1, 3)
            pool.append(
                b.linstate(src, rand_matrix(rng, m, m), rand_matrix(rng, m, d),
                           rand_vec(rng, m), rand_vec(rng, m))
            )
        elif kind == "concat":
            others = [rng.choice(pool) for _ in range(rng.randint(1, 2))]
            pool.append(b.concat([src] + others))
        elif kind == "multi":
            if not allow_multi:
                continue
            if d % 2 == 1:
                src = b.concat([src, b.slice(src, 0, 1)])
            pool.append(b.multi(src))
        elif kind == "slice":
            if d > 1:
                lo = rng.randrange(0, d - 1)
                hi = rng.randint(lo + 1, d)
                pool.append(b.slice(src, lo, hi))
    # single sink: gather every leaf
    g = b.graph
    consumed = {s for n in g.nodes.values() for s in n.inputs}
    leaves = [nid for nid in g.nodes if nid not in consumed]
    if len(leaves) == 1:
        out = leaves[0]
    else:
        out = b.concat(leaves)
    return b.finalize(out)


def random_sequence(rng: random.Random, dim: int, length: int, span: int = 2):
    return [tuple(Fraction(rng.randint(-span, span), rng.randint(1, 2)) for _ in range(dim))
            for _ in range(length)]


def rel_close(a: float, b: float, tol: float = 1e-6) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))
