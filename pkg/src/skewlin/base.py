"""Symbolic base spaces and cylinder functions over them.

Two base kinds are supported: a finite set with a permutation, and a
two-sided subshift of finite type (SFT).  Continuous families over the base
are represented by *cylinder functions*: tables over admissible windows
``(a_{-d}, ..., a_d)`` of a fixed depth ``d``.

Window semantics.  The shift always moves symbols to the left,
``sigma(a)_i = a_{i+1}``.  Whenever a value is required beyond a window's
stored depth, the window is extended by the *canonical* rule (smallest
admissible successor to the right, smallest admissible predecessor to the
left).  The rule looks only at the boundary symbol, so extending a window
and then shifting gives the same symbols as shifting and then extending;
the fixed-point solvers and the pointwise evaluators rely on this to stay
consistent with each other at a truncated depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConvergenceError
from .jets import JetMap, jet_distance
from .scalars import Dual, abs_value, linear_solve

DEPTH_BUDGET = 12
WINDOW_BUDGET = 4096


class FiniteBase:
    """A finite set of points with a permutation acting on it."""

    kind = "finite"

    def __init__(self, points, sigma):
        self.points = tuple(points)
        if isinstance(sigma, dict):
            self._sigma = dict(sigma)
        else:
            self._sigma = {p: s for p, s in zip(self.points, sigma)}
        if set(self._sigma) != set(self.points) or set(self._sigma.values()) != set(self.points):
            raise ConfigError("sigma must be a permutation of the base points")
        self._sigma_inv = {v: k for k, v in self._sigma.items()}

    def __repr__(self):
        return f"FiniteBase({list(self.points)!r})"

    @property
    def size(self):
        return len(self.points)

    def sigma(self, p):
        return self._sigma[p]

    def sigma_inv(self, p):
        return self._sigma_inv[p]

    def windows(self, depth=0):
        return self.points

    def window_count(self, depth=0):
        return len(self.points)

    def itinerary(self, window, variant=None, rng=None):
        return FiniteItinerary(self, window)


class FiniteItinerary:
    """Orbit view of a single point of a finite base."""

    __slots__ = ("base", "point", "key")

    def __init__(self, base, point):
        self.base = base
        self.point = point
        self.key = (point, None)

    def symbol(self, t):
        p = self.point
        if t >= 0:
            for _ in range(t):
                p = self.base.sigma(p)
        else:
            for _ in range(-t):
                p = self.base.sigma_inv(p)
        return p

    def window_at(self, t, depth):
        return self.symbol(t)


class SFTBase:
    """Two-sided subshift of finite type on symbols ``0..m-1``.

    ``matrix[a][b] == 1`` means the word ``a b`` is admissible.  Every
    symbol must have at least one admissible successor and predecessor, so
    the shift and its inverse are total on the shift space.
    """

    kind = "sft"

    def __init__(self, symbols, matrix, depth=2):
        self.symbols = int(symbols)
        self.matrix = tuple(tuple(int(x) for x in row) for row in matrix)
        self.depth = int(depth)
        if len(self.matrix) != self.symbols or any(len(r) != self.symbols for r in self.matrix):
            raise ConfigError(f"transition matrix must be {symbols}x{symbols}")
        self._succ = tuple(tuple(b for b in range(self.symbols) if self.matrix[a][b])
                           for a in range(self.symbols))
        self._pred = tuple(tuple(a for a in range(self.symbols) if self.matrix[a][b])
                           for b in range(self.symbols))
        self._words_cache = {}
        for s in range(self.symbols):
            if not self._succ[s]:
                raise ConfigError(f"symbol {s} has no admissible successor")
            if not self._pred[s]:
                raise ConfigError(f"symbol {s} has no admissible predecessor")

    def __repr__(self):
        return f"SFTBase(symbols={self.symbols}, depth={self.depth})"

    def successors(self, s):
        return self._succ[s]

    def predecessors(self, s):
        return self._pred[s]

    def admissible_word(self, word):
        return all(self.matrix[a][b] for a, b in zip(word, word[1:]))

    def words(self, length):
        """All admissible words of a given length, lexicographically."""
        if length <= 0:
            return ((),)
        if length not in self._words_cache:
            out = [(s,) for s in range(self.symbols)]
            for _ in range(length - 1):
                out = [w + (s,) for w in out for s in self._succ[w[-1]]]
            self._words_cache[length] = tuple(out)
        return self._words_cache[length]

    def windows(self, depth=None):
        depth = self.depth if depth is None else depth
        return self.words(2 * depth + 1)

    def window_count(self, depth=None):
        depth = self.depth if depth is None else depth
        length = 2 * depth + 1
        m = np.array(self.matrix, dtype=np.int64)
        total = np.ones(self.symbols, dtype=np.int64)
        for _ in range(length - 1):
            total = m @ total
        return int(total.sum())

    def itinerary(self, window, variant=None, rng=None):
        return SFTItinerary(self, window, variant=variant, rng=rng)


class SFTItinerary:
    """A concrete bi-infinite admissible itinerary extending a window.

    Symbols beyond the window are produced on demand: canonically (smallest
    admissible continuation, boundary-local) or, when ``rng`` is given,
    uniformly among the admissible continuations.  ``key`` identifies the
    itinerary for memoization.
    """

    __slots__ = ("base", "key", "_syms", "_lo", "_hi", "_rng")

    def __init__(self, base, window, variant=None, rng=None):
        window = tuple(window)
        if len(window) % 2 != 1:
            raise ConfigError(f"window must have odd length, got {len(window)}")
        if not base.admissible_word(window):
            raise ConfigError(f"window {window} is not admissible")
        d = (len(window) - 1) // 2
        self.base = base
        self._syms = {i - d: s for i, s in enumerate(window)}
        self._lo = -d
        self._hi = d
        self._rng = rng
        self.key = (window, variant)

    def symbol(self, t):
        while t > self._hi:
            s = self.base.successors(self._syms[self._hi])
            choice = s[0] if self._rng is None else s[self._rng.randrange(len(s))]
            self._hi += 1
            self._syms[self._hi] = choice
        while t < self._lo:
            p = self.base.predecessors(self._syms[self._lo])
            choice = p[0] if self._rng is None else p[self._rng.randrange(len(p))]
            self._lo -= 1
            self._syms[self._lo] = choice
        return self._syms[t]

    def window_at(self, t, depth):
        return tuple(self.symbol(t + j) for j in range(-depth, depth + 1))


def default_distance(a, b):
    """Sup-style distance on the value types stored in cylinder tables."""
    if isinstance(a, JetMap):
        return jet_distance(a, b)
    if isinstance(a, (tuple, list, np.ndarray)):
        return max((default_distance(x, y) for x, y in zip(a, b)), default=0.0)
    return abs_value(a - b)


@dataclass(frozen=True)
class CylinderFunction:
    """A function on the base determined by a finite itinerary window.

    The table is total over the admissible windows of the stored depth.
    Values are immutable by convention; all combinators return new objects.
    """

    base: object
    depth: int
    table: dict = field(hash=False)

    @classmethod
    def constant(cls, base, value, depth=0):
        if base.kind == "finite":
            return cls(base, 0, {w: value for w in base.windows()})
        return cls(base, depth, {w: value for w in base.windows(depth)})

    @classmethod
    def tabulate(cls, base, depth, fn):
        """Table ``window -> fn(itinerary)`` over windows of ``depth``."""
        table = {}
        for w in base.windows(depth):
            table[w] = fn(base.itinerary(w))
        return cls(base, depth if base.kind == "sft" else 0, table)

    def value(self, window):
        """Look up a window of depth >= the stored depth (center restriction)."""
        if self.base.kind == "finite":
            return self.table[window]
        have = (len(window) - 1) // 2
        if have == self.depth:
            return self.table[window]
        if have < self.depth:
            raise KeyError(f"window depth {have} shallower than table depth {self.depth}")
        lo = have - self.depth
        return self.table[tuple(window[lo:lo + 2 * self.depth + 1])]

    def at(self, itin, t=0):
        """Value along an itinerary; extends canonically beyond the table."""
        return self.table[itin.window_at(t, self.depth)]

    def windows(self):
        return sorted(self.table)

    def map_values(self, fn):
        return CylinderFunction(self.base, self.depth, {w: fn(v) for w, v in self.table.items()})

    def zip_with(self, other, fn):
        if self.base is not other.base:
            raise ConfigError("cylinder functions live over different bases")
        depth = max(self.depth, other.depth)
        table = {}
        for w in self.base.windows(depth) if self.base.kind == "sft" else self.base.windows():
            table[w] = fn(self.value(w), other.value(w))
        return CylinderFunction(self.base, depth if self.base.kind == "sft" else 0, table)

    def refine(self, depth):
        """Re-tabulate at a deeper depth (values restricted from this table)."""
        if self.base.kind == "finite" or depth == self.depth:
            return self
        if depth < self.depth:
            raise ValueError("refine cannot reduce depth; use truncate")
        table = {w: self.value(w) for w in self.base.windows(depth)}
        return CylinderFunction(self.base, depth, table)

    def truncate(self, depth):
        """Re-tabulate at a shallower depth along canonical extensions."""
        if self.base.kind == "finite" or depth >= self.depth:
            return self
        base = self.base
        table = {}
        for w in base.windows(depth):
            ww = w
            while len(ww) < 2 * self.depth + 1:
                ww = (base.predecessors(ww[0])[0],) + ww + (base.successors(ww[-1])[0],)
            table[w] = self.table[ww]
        return CylinderFunction(self.base, depth, table)


def shift_pullback(q, direction="forward"):
    """The family ``a -> q(sigma(a))`` (or ``q(sigma^{-1}(a))``).

    For an SFT the output window must see one more symbol, so the depth
    grows by one; for a finite base the table is relabeled in place.
    """
    base = q.base
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if base.kind == "finite":
        if direction == "forward":
            table = {p: q.table[base.sigma(p)] for p in base.windows()}
        else:
            table = {p: q.table[base.sigma_inv(p)] for p in base.windows()}
        return CylinderFunction(base, 0, table)
    depth = q.depth + 1
    table = {}
    for w in base.windows(depth):
        # w covers positions -depth..depth; sigma(a) at q.depth needs
        # positions 1-q.depth..1+q.depth of a, i.e. slots 2.. of w
        if direction == "forward":
            table[w] = q.table[tuple(w[2:])]
        else:
            table[w] = q.table[tuple(w[:-2])]
    return CylinderFunction(base, depth, table)


def sup_distance(p, q, dist=None):
    """Sup over admissible windows of the value distance.

    Depths may differ; the shallower table is read through the deeper
    windows (cylinder restriction), so constants at different depths
    compare equal.
    """
    dist = dist or default_distance
    depth = max(p.depth, q.depth)
    windows = p.base.windows(depth) if p.base.kind == "sft" else p.base.windows()
    return max((dist(p.value(w), q.value(w)) for w in windows), default=0.0)


@dataclass
class FixedPointInfo:
    iterations: int
    increment: float
    depth: int
    truncated: bool
    truncation_bound: float
    method: str


def _is_scalar_value(v):
    return isinstance(v, (int, float, complex, Dual)) or hasattr(v, "numerator")


def _exact_affine_solve(op, zero):
    """Solve q = op(q) on a finite base by probing the affine structure."""
    base = zero.base
    points = list(base.windows())
    b = op(zero)
    columns = []
    for p in points:
        e = CylinderFunction(base, 0, {w: (1 if w == p else 0) for w in points})
        image = op(e)
        columns.append([image.table[w] - b.table[w] for w in points])
    # rows of (I - A)
    n = len(points)
    matrix = [[(1 if r == c else 0) - columns[c][r] for c in range(n)] for r in range(n)]
    rhs = [b.table[w] for w in points]
    sol = linear_solve(matrix, rhs)
    return CylinderFunction(base, 0, {w: sol[i] for i, w in enumerate(points)})


def solve_affine_fixed_point(op, zero, contraction, tol,
                             max_depth=DEPTH_BUDGET, max_windows=WINDOW_BUDGET,
                             method="auto", max_iter=None, dist=None):
    """Fixed point of an affine contraction on cylinder functions.

    ``op`` must be affine with linear part of sup-norm <= ``contraction``
    (caller-certified).  Iterates from ``zero`` until successive iterates
    are within ``tol * (1 - contraction)``; for an SFT the depth stops
    growing once ``max_depth`` or the window enumeration budget is hit, and
    the geometric tail bound of the cut is recorded.  On a finite base with
    at most 10^4 points the induced linear system is solved exactly instead
    (``method='iterate'`` forces iteration, e.g. for cross-checks).

    Returns ``(fixed_point, FixedPointInfo)``.
    """
    if not 0 <= contraction < 1:
        raise ValueError(f"contraction bound must be in [0, 1), got {contraction}")
    base = zero.base
    if method not in ("auto", "exact", "iterate"):
        raise ValueError(f"unknown method {method!r}")
    if base.kind == "finite" and method != "iterate":
        sample = next(iter(zero.table.values()))
        if base.size <= 10 ** 4 and _is_scalar_value(sample):
            q = _exact_affine_solve(op, zero)
            return q, FixedPointInfo(iterations=0, increment=0.0, depth=0,
                                     truncated=False, truncation_bound=0.0,
                                     method="exact")
        if method == "exact":
            raise ValueError("exact solve requires a small finite base with scalar values")

    if base.kind == "sft":
        cap = zero.depth
        while cap < max_depth and base.window_count(cap + 1) <= max_windows:
            cap += 1
    else:
        cap = 0

    q = zero
    first = op(zero)
    if first.depth > cap:
        first = first.truncate(cap)
    data_norm = sup_distance(first, zero, dist=dist)
    target = tol * (1 - contraction)
    if max_iter is None:
        if contraction == 0 or data_norm == 0:
            max_iter = 4
        else:
            need = math.log(max(target, 1e-300) / max(data_norm, 1e-300)) / math.log(contraction)
            max_iter = max(8, int(math.ceil(need)) + 30)
    truncated = False
    inc = data_norm
    q = first
    iterations = 1
    while inc > target and iterations < max_iter:
        q_next = op(q)
        if q_next.depth > cap:
            q_next = q_next.truncate(cap)
            truncated = True
        inc = sup_distance(q_next, q, dist=dist)
        q = q_next
        iterations += 1
    if inc > target:
        raise ConvergenceError(
            f"affine fixed point did not reach tol {tol} in {iterations} iterations "
            f"(achieved increment {inc})", achieved=inc)
    free_steps = max(cap - zero.depth, 0)
    bound = (contraction ** free_steps / (1 - contraction) * data_norm) if truncated else 0.0
    return q, FixedPointInfo(iterations=iterations, increment=inc, depth=q.depth,
                             truncated=truncated, truncation_bound=bound,
                             method="iterate")
