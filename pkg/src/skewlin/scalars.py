"""Scalar fields and generic scalar arithmetic.

All coefficient-level computation in the package is generic over the scalar
ring: Python floats and ``Fraction`` for real-field runs, ``complex`` for
complex-field runs, and :class:`Dual` numbers for forward-mode directional
derivatives.  Code that needs a plain number (pivoting, norms, stopping
tests) goes through :func:`value_of` / :func:`abs_value` so that it works
uniformly for all of them.
"""

from __future__ import annotations

from fractions import Fraction

from .errors import ConfigError

REAL = "real"
COMPLEX = "complex"
FIELDS = (REAL, COMPLEX)


class Dual:
    """Scalar carrying a value and one directional derivative.

    Supports the ring operations used by the jet and fixed-point code.
    Comparisons and ``abs`` act on the value part only.
    """

    __slots__ = ("val", "dot")

    def __init__(self, val, dot=0):
        self.val = val
        self.dot = dot

    def __repr__(self):
        return f"Dual({self.val!r}, {self.dot!r})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.dot + other.dot)
        return Dual(self.val + other, self.dot)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.dot)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val, self.val * other.dot + self.dot * other.val)
        return Dual(self.val * other, self.dot * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            v = self.val / other.val
            return Dual(v, (self.dot - v * other.dot) / other.val)
        return Dual(self.val / other, self.dot / other)

    def __rtruediv__(self, other):
        v = other / self.val
        return Dual(v, -v * self.dot / self.val)

    def __pow__(self, exponent):
        if not isinstance(exponent, int) or exponent < 0:
            raise TypeError("Dual powers are limited to non-negative integers")
        result = Dual(1, 0)
        for _ in range(exponent):
            result = result * self
        return result

    def __abs__(self):
        return abs(self.val)

    def __eq__(self, other):
        if isinstance(other, Dual):
            return self.val == other.val and self.dot == other.dot
        return self.val == other and self.dot == 0

    def __hash__(self):
        return hash((self.val, self.dot))


def value_of(x):
    """Value part of a scalar (identity for plain numbers)."""
    return x.val if isinstance(x, Dual) else x


def dot_of(x):
    """Derivative part of a scalar (zero for plain numbers)."""
    return x.dot if isinstance(x, Dual) else 0


def abs_value(x):
    """``abs`` of the value part; exact for Fractions."""
    return abs(value_of(x))


def is_exact(x):
    """True when the scalar belongs to the exact (rational) subring."""
    return isinstance(x, (int, Fraction)) and not isinstance(x, bool)


def to_float(x):
    """Numeric (float or complex) image of a scalar's value part."""
    v = value_of(x)
    if isinstance(v, complex):
        return v
    return float(v)


def parse_scalar(raw, field=REAL):
    """Parse a configuration scalar.

    Accepted forms: int/float literals, rational strings ``"p/q"`` and, for
    the complex field, strings like ``"0.3+0.2i"`` or two-element
    ``[re, im]`` arrays whose entries are themselves parseable.
    """
    if isinstance(raw, bool):
        raise ConfigError(f"boolean {raw!r} is not a scalar")
    if isinstance(raw, (int, float)):
        return raw
    if isinstance(raw, (list, tuple)):
        if field != COMPLEX:
            raise ConfigError(f"[re, im] pair {raw!r} requires field = 'complex'")
        if len(raw) != 2:
            raise ConfigError(f"complex pair must have two entries, got {raw!r}")
        re, im = (parse_scalar(part, REAL) for part in raw)
        return complex(re, im)
    if isinstance(raw, str):
        text = raw.strip()
        if "/" in text:
            try:
                return Fraction(text)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"bad rational literal {raw!r}: {exc}") from None
        if "i" in text or "j" in text:
            if field != COMPLEX:
                raise ConfigError(f"complex literal {raw!r} requires field = 'complex'")
            try:
                return complex(text.replace("i", "j").replace(" ", ""))
            except ValueError:
                raise ConfigError(f"bad complex literal {raw!r}") from None
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"bad numeric literal {raw!r}") from None
    raise ConfigError(f"cannot interpret {raw!r} as a scalar")


def check_field(field):
    if field not in FIELDS:
        raise ConfigError(f"unknown field {field!r}, expected one of {FIELDS}")
    return field


def reciprocal(x):
    """1/x in the scalar's own ring (ints promote to Fraction)."""
    if isinstance(x, int):
        return Fraction(1, x)
    return 1 / x


def linear_solve(matrix, rhs):
    """Solve a small dense linear system by Gaussian elimination.

    Generic over the scalar ring (Fractions stay exact, Duals propagate
    their derivative part).  ``matrix`` is a list of rows, ``rhs`` the
    right-hand-side entries.  Raises ``ZeroDivisionError`` on a
    (numerically) singular matrix.
    """
    n = len(matrix)
    aug = [list(row) + [rhs[i]] for i, row in enumerate(matrix)]
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs_value(aug[r][col]))
        if abs_value(aug[pivot][col]) == 0:
            raise ZeroDivisionError("singular linear system")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = reciprocal(aug[col][col])
        for r in range(n):
            if r == col:
                continue
            factor = aug[r][col] * inv
            if abs_value(factor) == 0:
                continue
            aug[r] = [a - factor * b for a, b in zip(aug[r], aug[col])]
    return [aug[i][n] * reciprocal(aug[i][i]) for i in range(n)]


def matrix_inverse(matrix):
    """Inverse of a small dense matrix over the generic scalar ring."""
    n = len(matrix)
    cols = []
    for j in range(n):
        unit = [1 if i == j else 0 for i in range(n)]
        cols.append(linear_solve(matrix, unit))
    return [[cols[j][i] for j in range(n)] for i in range(n)]
