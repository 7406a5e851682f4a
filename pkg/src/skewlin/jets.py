"""Exact arithmetic of truncated multivariate polynomial maps (r-jets).

A jet of dimension ``n`` and degree ``r`` represents a polynomial self-map
of n-space fixing the origin, written in the Taylor convention

    h(x) = sum_k  c_k . x^k / k!        (1 <= |k| <= r),

so the stored coefficient ``c_k`` of component ``i`` equals the partial
derivative of that component at 0.  Dense storage is indexed by the graded
lexicographic rank of the multiindex; dimensions and degrees stay at desk
scale (n <= 3, r <= 20) so density beats hashing.

All operations are pure and jets are immutable after construction, so
everything here is safe to share across threads.  Coefficients are generic
over the scalar ring: float, Fraction, complex and Dual all work; Fractions
make composition and inversion exact.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatchError, SingularJetError
from .scalars import Dual, abs_value, matrix_inverse, reciprocal, value_of


# ---------------------------------------------------------------------------
# multiindices

class MultiIndex:
    """A multiindex k = (k_1, ..., k_n) with its order and factorial.

    Order and factorial are always derived from the entries, so they cannot
    drift out of sync with them.
    """

    __slots__ = ("entries",)

    def __init__(self, entries):
        entries = tuple(int(e) for e in entries)
        if any(e < 0 for e in entries):
            raise ValueError(f"multiindex entries must be non-negative, got {entries}")
        self.entries = entries

    @property
    def order(self):
        return sum(self.entries)

    @property
    def factorial(self):
        return mi_factorial(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __eq__(self, other):
        other_entries = other.entries if isinstance(other, MultiIndex) else tuple(other)
        return self.entries == other_entries

    def __hash__(self):
        return hash(self.entries)

    def __repr__(self):
        return f"MultiIndex{self.entries}"

    def monomial(self, x):
        """x^k for a point x."""
        result = 1
        for xi, ki in zip(x, self.entries):
            for _ in range(ki):
                result = result * xi
        return result


def as_index(k):
    """Normalize a MultiIndex or plain sequence to a tuple."""
    if isinstance(k, MultiIndex):
        return k.entries
    return tuple(int(e) for e in k)


def mi_order(k):
    return sum(k)


def mi_factorial(k):
    out = 1
    for e in k:
        out *= math.factorial(e)
    return out


@lru_cache(maxsize=None)
def indices_of_order(n, order):
    """All multiindices of a given order, lexicographically, no duplicates."""
    if n == 1:
        return ((order,),)
    out = []
    for first in range(order + 1):
        out.extend((first,) + rest for rest in indices_of_order(n - 1, order - first))
    return tuple(out)


@lru_cache(maxsize=None)
def graded_indices(n, degree, min_order=1):
    """Multiindices with min_order <= |k| <= degree in graded-lex order."""
    out = []
    for order in range(min_order, degree + 1):
        out.extend(indices_of_order(n, order))
    return tuple(out)


@lru_cache(maxsize=None)
def graded_rank(n, degree, min_order=1):
    """Map multiindex -> position in :func:`graded_indices`."""
    return {k: pos for pos, k in enumerate(graded_indices(n, degree, min_order))}


def scaled_power(lams, k):
    """lambda^k for a vector of scalars (the cocycle weight of a multiindex)."""
    result = 1
    for lam, ki in zip(lams, k):
        for _ in range(ki):
            result = result * lam
    return result


# ---------------------------------------------------------------------------
# sparse helpers on monomial dictionaries {multiindex tuple: coefficient}

def _pmul(a, b, degree):
    """Truncated product of two sparse monomial tables."""
    out = {}
    for ka, ca in a.items():
        oa = mi_order(ka)
        for kb, cb in b.items():
            if oa + mi_order(kb) > degree:
                continue
            ks = tuple(x + y for x, y in zip(ka, kb))
            prod = ca * cb
            if ks in out:
                out[ks] = out[ks] + prod
            else:
                out[ks] = prod
    return out


def _padd(a, b, scale=1):
    out = dict(a)
    for k, c in b.items():
        term = c * scale if scale != 1 else c
        if k in out:
            out[k] = out[k] + term
        else:
            out[k] = term
    return out


def _compose_tables(outer_components, inner_components, n, degree):
    """Compose sparse monomial maps, truncating above ``degree``.

    ``inner_components`` must have no constant terms, so a term of outer
    order j contributes only orders >= j and the truncation is exact.
    """
    max_power = degree
    powers = []
    for comp in inner_components:
        plist = [{tuple(0 for _ in range(n)): 1}, comp]
        for _ in range(2, max_power + 1):
            plist.append(_pmul(plist[-1], comp, degree))
        powers.append(plist)
    result = []
    for comp in outer_components:
        acc = {}
        for k, c in comp.items():
            if abs_value(c) == 0:
                continue
            term = None
            for j, kj in enumerate(k):
                if kj == 0:
                    continue
                term = powers[j][kj] if term is None else _pmul(term, powers[j][kj], degree)
            if term is None:  # |k| = 0 cannot occur for jets
                continue
            acc = _padd(acc, term, c)
        result.append(acc)
    return result


def poly_substitute(outer_components, inner_components, n, degree):
    """Exact composition of sparse monomial tables.

    Unlike :func:`_compose_tables`, the inner components may carry constant
    terms; ``degree`` must genuinely bound the composition degree (e.g. the
    outer degree when the inner map is affine), so nothing is truncated.
    """
    zero = tuple(0 for _ in range(n))
    powers = []
    for comp in inner_components:
        plist = [{zero: 1}, dict(comp)]
        for _ in range(2, degree + 1):
            plist.append(_pmul(plist[-1], comp, degree))
        powers.append(plist)
    result = []
    for comp in outer_components:
        acc = {}
        for k, c in comp.items():
            if abs_value(c) == 0:
                continue
            if mi_order(k) == 0:
                acc = _padd(acc, {zero: 1}, c)
                continue
            term = None
            for j, kj in enumerate(k):
                if kj == 0:
                    continue
                term = powers[j][kj] if term is None else _pmul(term, powers[j][kj], degree)
            acc = _padd(acc, term, c)
        result.append(acc)
    return result


def monomial_values(x, indices):
    """Values of x^k for every k in ``indices`` (shared partial products).

    ``indices`` must be closed under decrementing one entry, which holds for
    the graded index lists used here.
    """
    n = len(x)
    values = {tuple(0 for _ in range(n)): 1}
    for k in indices:
        if k in values:
            continue
        j = next(i for i, e in enumerate(k) if e > 0)
        prev = list(k)
        prev[j] -= 1
        values[k] = values[tuple(prev)] * x[j]
    return values


# ---------------------------------------------------------------------------
# the jet type

class JetMap:
    """Degree-r truncation of a polynomial self-map fixing the origin.

    ``data[i][p]`` is the Taylor coefficient (coefficient of x^k/k!) of
    component ``i`` at the multiindex of graded-lex rank ``p``.
    """

    __slots__ = ("dim", "degree", "data", "_batch_cache", "_batch_1d")

    def __init__(self, dim, degree, data):
        self.dim = dim
        self.degree = degree
        self.data = tuple(tuple(row) for row in data)
        self._batch_cache = None
        self._batch_1d = None
        expected = len(graded_indices(dim, degree))
        for row in self.data:
            if len(row) != expected:
                raise DimensionMismatchError(
                    f"jet row has {len(row)} coefficients, expected {expected}")
        if len(self.data) != dim:
            raise DimensionMismatchError(
                f"jet has {len(self.data)} components, expected {dim}")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_coeffs(cls, dim, degree, coeffs):
        """Build from a mapping ``(i, multiindex) -> Taylor coefficient``.

        Component indices are 0-based; multiindices with |k| = 0 are
        rejected (jets fix the origin) and |k| > degree entries are dropped.
        """
        ranks = graded_rank(dim, degree)
        rows = [[0] * len(graded_indices(dim, degree)) for _ in range(dim)]
        for (i, k), c in coeffs.items():
            k = as_index(k)
            order = mi_order(k)
            if order == 0:
                raise ValueError("jets store no order-0 coefficients")
            if order > degree:
                continue
            rows[i][ranks[k]] = rows[i][ranks[k]] + c
        return cls(dim, degree, rows)

    @classmethod
    def identity(cls, dim, degree):
        return cls.diagonal([1] * dim, degree)

    @classmethod
    def diagonal(cls, lams, degree):
        dim = len(lams)
        return cls.from_coeffs(
            dim, degree,
            {(i, tuple(1 if j == i else 0 for j in range(dim))): lams[i]
             for i in range(dim)})

    # -- coefficient access --------------------------------------------------

    def coeff(self, i, k):
        """Taylor coefficient of component ``i`` at multiindex ``k``."""
        return self.data[i][graded_rank(self.dim, self.degree)[as_index(k)]]

    def indices(self):
        return graded_indices(self.dim, self.degree)

    def linear_matrix(self):
        """Linear part as a row-major matrix."""
        units = [tuple(1 if j == i else 0 for j in range(self.dim)) for i in range(self.dim)]
        return [[self.coeff(i, unit) for unit in units] for i in range(self.dim)]

    def diagonal_part(self):
        m = self.linear_matrix()
        return tuple(m[i][i] for i in range(self.dim))

    def is_linear_diagonal(self, tol=0.0):
        m = self.linear_matrix()
        return all(abs_value(m[i][j]) <= tol
                   for i in range(self.dim) for j in range(self.dim) if i != j)

    def is_flat_perturbation(self, tol=0.0):
        """True when all coefficients with 2 <= |k| <= degree vanish."""
        idx = self.indices()
        return all(abs_value(c) <= tol
                   for row in self.data
                   for k, c in zip(idx, row) if mi_order(k) >= 2)

    def has_unit_diagonal(self, tol=0.0):
        m = self.linear_matrix()
        return self.is_linear_diagonal(tol) and all(
            abs_value(m[i][i] - 1) <= tol for i in range(self.dim))

    # -- ring conversions ----------------------------------------------------

    def monomial_components(self):
        """Sparse per-component tables in the raw monomial convention."""
        idx = self.indices()
        comps = []
        for row in self.data:
            comp = {}
            for k, c in zip(idx, row):
                if abs_value(c) != 0:
                    comp[k] = c * reciprocal(mi_factorial(k))
            comps.append(comp)
        return comps

    @classmethod
    def from_monomial_components(cls, dim, degree, comps):
        coeffs = {}
        for i, comp in enumerate(comps):
            for k, c in comp.items():
                if mi_order(k) == 0 or mi_order(k) > degree:
                    continue
                coeffs[(i, k)] = c * mi_factorial(k)
        return cls.from_coeffs(dim, degree, coeffs)

    # -- pointwise use -------------------------------------------------------

    def _compiled(self):
        if self._batch_cache is None:
            idx = self.indices()
            exps = np.array(idx, dtype=np.int64)
            any_complex = any(isinstance(value_of(c), complex) for row in self.data for c in row)
            dtype = np.complex128 if any_complex else np.float64
            coeffs = np.array(
                [[complex(value_of(c)) if any_complex else float(value_of(c))
                  for c in row] for row in self.data], dtype=dtype)
            facts = np.array([mi_factorial(k) for k in idx], dtype=np.float64)
            self._batch_cache = (exps, coeffs / facts)
        return self._batch_cache

    def evaluate_batch(self, points):
        """Evaluate at an (m, n) array of points; returns an (m, n) array."""
        pts = np.asarray(points)
        squeeze = pts.ndim == 1
        if self.dim == 1:
            if self._batch_1d is None:
                exps, coeffs = self._compiled()
                dense = np.zeros(self.degree + 1, dtype=coeffs.dtype)
                for pos, k in enumerate(exps[:, 0]):
                    dense[k] = coeffs[0, pos]
                self._batch_1d = dense
            x = pts if squeeze else pts[:, 0]
            out = np.zeros_like(x, dtype=self._batch_1d.dtype)
            for c in self._batch_1d[::-1]:
                out = out * x + c
            return out if squeeze else out[:, None]
        exps, coeffs = self._compiled()
        pts = np.atleast_2d(pts)
        monos = np.prod(pts[:, None, :] ** exps[None, :, :], axis=2)
        out = monos @ coeffs.T
        return out[0] if squeeze else out


def _require_compatible(a, b):
    if a.dim != b.dim:
        raise DimensionMismatchError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.degree != b.degree:
        raise DimensionMismatchError(f"degree mismatch: {a.degree} vs {b.degree}")


def jet_compose(outer, inner):
    """Degree-r truncation of ``outer`` after ``inner``.

    Exact in coefficient arithmetic: with Fraction coefficients the result
    is the true truncated composition.
    """
    _require_compatible(outer, inner)
    comps = _compose_tables(outer.monomial_components(),
                            inner.monomial_components(),
                            outer.dim, outer.degree)
    return JetMap.from_monomial_components(outer.dim, outer.degree, comps)


def jet_invert(j):
    """Two-sided compositional inverse in the truncated semigroup.

    Writes j = L + N with L the linear part and solves g = L^{-1}(id - N o g)
    by iteration; each pass extends exactness by one degree, so degree - 1
    passes give the full truncated inverse.
    """
    L = j.linear_matrix()
    try:
        Linv = matrix_inverse(L)
    except ZeroDivisionError:
        raise SingularJetError("jet has singular linear part") from None
    n, r = j.dim, j.degree
    ident = [{tuple(1 if jj == i else 0 for jj in range(n)): 1} for i in range(n)]
    nonlinear = []
    for comp in j.monomial_components():
        nonlinear.append({k: c for k, c in comp.items() if mi_order(k) >= 2})

    def apply_matrix(mat, comps):
        out = []
        for i in range(n):
            acc = {}
            for jj in range(n):
                if abs_value(mat[i][jj]) == 0:
                    continue
                acc = _padd(acc, comps[jj], mat[i][jj])
            out.append(acc)
        return out

    g = apply_matrix(Linv, ident)
    for _ in range(max(r - 1, 0)):
        ng = _compose_tables(nonlinear, g, n, r)
        diff = [_padd(ident[i], ng[i], -1) for i in range(n)]
        g = apply_matrix(Linv, diff)
    return JetMap.from_monomial_components(n, r, g)


def jet_evaluate(j, x):
    """Evaluate the truncated polynomial at a point (scalar-ring generic)."""
    x = tuple(x)
    if len(x) != j.dim:
        raise DimensionMismatchError(f"point has dim {len(x)}, jet has dim {j.dim}")
    idx = j.indices()
    monos = monomial_values(x, idx)
    out = []
    for row in j.data:
        acc = 0
        for k, c in zip(idx, row):
            if abs_value(c) == 0:
                continue
            acc = acc + c * monos[k] * reciprocal(mi_factorial(k))
        out.append(acc)
    return tuple(out)


def jet_add(a, b, scale=1):
    """a + scale * b, coefficientwise."""
    _require_compatible(a, b)
    data = [[ca + scale * cb for ca, cb in zip(ra, rb)]
            for ra, rb in zip(a.data, b.data)]
    return JetMap(a.dim, a.degree, data)


def jet_sub(a, b):
    return jet_add(a, b, scale=-1)


def jet_truncate(j, degree):
    """Drop coefficients above ``degree`` (degree <= j.degree)."""
    if degree == j.degree:
        return j
    coeffs = {}
    idx = j.indices()
    for i, row in enumerate(j.data):
        for k, c in zip(idx, row):
            if mi_order(k) <= degree:
                coeffs[(i, k)] = c
    return JetMap.from_coeffs(j.dim, degree, coeffs)


def jet_max_coeff(j, min_order=1):
    """Largest coefficient magnitude at orders >= min_order."""
    idx = j.indices()
    worst = 0.0
    for row in j.data:
        for k, c in zip(idx, row):
            if mi_order(k) >= min_order:
                worst = max(worst, abs_value(c))
    return worst


def jet_distance(a, b):
    """Max coefficientwise magnitude of a - b."""
    _require_compatible(a, b)
    return max((abs_value(ca - cb)
                for ra, rb in zip(a.data, b.data)
                for ca, cb in zip(ra, rb)), default=0.0)


def jet_jacobian(j, x):
    """Jacobian matrix of the truncated polynomial at a point."""
    x = tuple(x)
    idx = j.indices()
    monos = monomial_values(x, idx)
    zero = tuple(0 for _ in range(j.dim))
    monos.setdefault(zero, 1)
    rows = []
    for row in j.data:
        jac_row = [0] * j.dim
        for k, c in zip(idx, row):
            if abs_value(c) == 0:
                continue
            inv_fact = reciprocal(mi_factorial(k))
            for v in range(j.dim):
                if k[v] == 0:
                    continue
                kd = list(k)
                kd[v] -= 1
                jac_row[v] = jac_row[v] + c * k[v] * monos[tuple(kd)] * inv_fact
        rows.append(jac_row)
    return rows


def jet_of_table(table, dim, degree):
    """Jet from a raw monomial coefficient table ``(i, k) -> coefficient``.

    Used to extract jets of fiber maps: the monomial coefficient of x^k
    becomes the Taylor coefficient after multiplication by k!.  Terms above
    ``degree`` are dropped; |k| = 0 terms are rejected.
    """
    coeffs = {}
    for (i, k), c in table.items():
        k = as_index(k)
        order = mi_order(k)
        if order == 0:
            raise ValueError("origin must be fixed: no order-0 coefficients")
        if order > degree:
            continue
        coeffs[(i, k)] = c * mi_factorial(k)
    return JetMap.from_coeffs(dim, degree, coeffs)
