"""Skew products of fiber contractions and the standing hypothesis battery.

Fiber maps are polynomial coefficient tables, so the algebraic hypotheses
(diagonal linear part, non-resonance with uniform sign across the base) are
decided exactly on coefficients, while the metric hypothesis (contraction
into the unit ball) is verified on a low-discrepancy sample.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .base import CylinderFunction
from .errors import ConfigError, ConvergenceError, DimensionMismatchError, HypothesisError
from .jets import (JetMap, as_index, graded_indices, indices_of_order, jet_compose,
                   jet_invert, mi_factorial, mi_order, monomial_values, scaled_power)
from .scalars import COMPLEX, REAL, abs_value, check_field, to_float, value_of


# ---------------------------------------------------------------------------
# polynomial maps

class PolyMap:
    """Polynomial map of n-space given by a raw monomial coefficient table.

    ``table[(i, k)]`` is the coefficient of x^k in component ``i``
    (0-based).  Constant terms are allowed here; :class:`FiberMap` forbids
    them.  Immutable by convention.
    """

    allow_constant = True

    def __init__(self, dim, table, radius=1.0):
        self.dim = int(dim)
        self.radius = float(radius)
        tbl = {}
        for (i, k), c in table.items():
            k = as_index(k)
            if len(k) != self.dim:
                raise DimensionMismatchError(
                    f"multiindex {k} has length {len(k)}, map has dimension {self.dim}")
            if not 0 <= i < self.dim:
                raise DimensionMismatchError(f"component {i} out of range for dim {self.dim}")
            if not self.allow_constant and mi_order(k) == 0:
                raise ConfigError("fiber maps must fix the origin (no order-0 terms)")
            if abs_value(c) != 0:
                tbl[(i, k)] = c
        self.table = tbl
        self.degree = max((mi_order(k) for (_, k) in tbl), default=0)
        self._batch = None
        self._batch_1d = None
        self._jac_batch = None
        self._lam_np = None

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim}, degree={self.degree})"

    def component(self, i):
        return {k: c for (j, k), c in self.table.items() if j == i}

    def map_coeffs(self, fn):
        return type(self)(self.dim, {key: fn(c) for key, c in self.table.items()},
                          radius=self.radius)

    def add(self, other, scale=1):
        if other.dim != self.dim:
            raise DimensionMismatchError("dimension mismatch in map sum")
        table = dict(self.table)
        for key, c in other.table.items():
            table[key] = table.get(key, 0) + scale * c
        return type(self)(self.dim, table, radius=min(self.radius, other.radius))

    # -- pointwise -----------------------------------------------------------

    def evaluate(self, x):
        """Evaluate at a point, generic over the scalar ring."""
        x = tuple(x)
        monos = monomial_values(x, graded_indices(self.dim, self.degree)) if self.degree else {}
        monos[tuple(0 for _ in range(self.dim))] = 1
        out = [0] * self.dim
        for (i, k), c in self.table.items():
            out[i] = out[i] + c * monos[k]
        return tuple(out)

    def _compiled(self):
        if self._batch is None:
            keys = sorted({k for (_, k) in self.table})
            exps = np.array(keys or [tuple(0 for _ in range(self.dim))], dtype=np.int64)
            any_complex = any(isinstance(value_of(c), complex) for c in self.table.values())
            dtype = np.complex128 if any_complex else np.float64
            coeffs = np.zeros((self.dim, len(exps)), dtype=dtype)
            pos = {k: p for p, k in enumerate(keys)}
            for (i, k), c in self.table.items():
                coeffs[i, pos[k]] = complex(value_of(c)) if any_complex else float(value_of(c))
            self._batch = (exps, coeffs)
        return self._batch

    def _compiled_1d(self):
        # dense power-ordered coefficients for Horner evaluation
        exps, coeffs = self._compiled()
        dense = np.zeros(self.degree + 1, dtype=coeffs.dtype)
        for pos, k in enumerate(exps[:, 0]):
            dense[k] = coeffs[0, pos]
        return dense

    def evaluate_batch(self, points):
        pts = np.asarray(points)
        squeeze = pts.ndim == 1
        if self.dim == 1:
            if self._batch_1d is None:
                self._batch_1d = self._compiled_1d()
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

    def jacobian(self, x):
        """Jacobian rows at a point (scalar-ring generic)."""
        x = tuple(x)
        rows = [[0] * self.dim for _ in range(self.dim)]
        for (i, k), c in self.table.items():
            for v in range(self.dim):
                if k[v] == 0:
                    continue
                kd = list(k)
                kd[v] -= 1
                mono = 1
                for xj, kj in zip(x, kd):
                    for _ in range(kj):
                        mono = mono * xj
                rows[i][v] = rows[i][v] + c * k[v] * mono
        return rows

    def _compiled_jacobian(self):
        if self._jac_batch is None:
            parts = []
            for v in range(self.dim):
                table = {}
                for (i, k), c in self.table.items():
                    if k[v] == 0:
                        continue
                    kd = list(k)
                    kd[v] -= 1
                    key = (i, tuple(kd))
                    table[key] = table.get(key, 0) + k[v] * c
                parts.append(PolyMap(self.dim, table))
            self._jac_batch = parts
        return self._jac_batch

    def jacobian_batch(self, points):
        """Stacked Jacobians, shape (m, dim, dim)."""
        pts = np.atleast_2d(np.asarray(points))
        parts = self._compiled_jacobian()
        cols = [p.evaluate_batch(pts) for p in parts]
        return np.stack(cols, axis=2)

    def derivative_table(self, alpha):
        """Coefficient table of the partial derivative d^alpha."""
        alpha = as_index(alpha)
        out = {}
        for (i, k), c in self.table.items():
            if any(kj < aj for kj, aj in zip(k, alpha)):
                continue
            kd = tuple(kj - aj for kj, aj in zip(k, alpha))
            factor = 1
            for kj, aj in zip(k, alpha):
                factor *= math.factorial(kj) // math.factorial(kj - aj)
            out[(i, kd)] = out.get((i, kd), 0) + c * factor
        return PolyMap(self.dim, out)

    def newton_invert(self, y, seed, tol=1e-13, max_iter=60):
        """Solve ``self(x) = y`` by Newton iteration from ``seed``."""
        y = np.asarray(y, dtype=complex if any(
            isinstance(value_of(c), complex) for c in self.table.values()) else float)
        x = np.asarray(seed, dtype=y.dtype).copy()
        for _ in range(max_iter):
            fx = np.asarray(self.evaluate_batch(x))
            res = fx - y
            if np.max(np.abs(res)) <= tol:
                return x
            jac = self.jacobian_batch(x[None, :])[0]
            x = x - np.linalg.solve(jac, res)
        raise ConvergenceError(f"Newton inversion stalled (residual {np.max(np.abs(res))})")


class FiberMap(PolyMap):
    """A polynomial fiber contraction fixing the origin."""

    allow_constant = False

    def linear_matrix(self):
        units = [tuple(1 if j == i else 0 for j in range(self.dim)) for i in range(self.dim)]
        return [[self.table.get((i, u), 0) for u in units] for i in range(self.dim)]

    def lam(self):
        """Diagonal of the linear part (the multipliers lambda_i)."""
        m = self.linear_matrix()
        return tuple(m[i][i] for i in range(self.dim))

    def off_diagonal_witness(self):
        m = self.linear_matrix()
        for i in range(self.dim):
            for j in range(self.dim):
                if i != j and abs_value(m[i][j]) != 0:
                    return (i, j, m[i][j])
        return None

    def is_linear(self):
        return self.degree <= 1

    def to_jet(self, degree):
        coeffs = {}
        for (i, k), c in self.table.items():
            if mi_order(k) <= degree:
                coeffs[(i, k)] = c * mi_factorial(k)
        return JetMap.from_coeffs(self.dim, degree, coeffs)

    @classmethod
    def from_jet(cls, jet, radius=1.0):
        table = {}
        for i, comp in enumerate(jet.monomial_components()):
            for k, c in comp.items():
                table[(i, k)] = c
        return cls(jet.dim, table, radius=radius)


# ---------------------------------------------------------------------------
# the skew system

class SkewSystem:
    """The skew product ``(a, x) -> (sigma(a), f_a(x))``.

    ``fibers`` is a cylinder function of :class:`FiberMap` (typically depth
    0: the fiber depends on the central symbol).  An optional ``lazy``
    provider with a ``fiber(itin, t)`` method supplies fibers along concrete
    itineraries beyond the tabled depth; the induced systems of Cantor
    models use this so that pointwise evaluation follows exact geometry.
    """

    def __init__(self, base, fibers, scalar_field=REAL, lazy=None):
        self.base = base
        self.fibers = fibers
        self.field = check_field(scalar_field)
        self.lazy = lazy
        sample = next(iter(fibers.table.values()))
        self.dim = sample.dim
        self.radius = min(f.radius for f in fibers.table.values())
        for f in fibers.table.values():
            if f.dim != self.dim:
                raise DimensionMismatchError("all fiber maps must share the dimension")

    def __repr__(self):
        return (f"SkewSystem(dim={self.dim}, field={self.field!r}, "
                f"base={self.base!r}, fiber_depth={self.fiber_depth})")

    @property
    def fiber_depth(self):
        return self.fibers.depth

    def windows(self, depth=None):
        if self.base.kind == "finite":
            return self.base.windows()
        return self.base.windows(self.fiber_depth if depth is None else depth)

    def fiber_at(self, itin, t=0):
        if self.lazy is not None:
            return self.lazy.fiber(itin, t)
        return self.fibers.at(itin, t)

    def lam_cf(self):
        return self.fibers.map_values(lambda f: f.lam())

    def is_linear(self):
        return all(f.is_linear() for f in self.fibers.table.values())

    def max_fiber_degree(self):
        return max(f.degree for f in self.fibers.table.values())

    def perturbed(self, direction, t):
        """The system with fibers ``f_a + t * g_a``.

        ``direction`` is a SkewSystem or a cylinder function of FiberMaps
        over the same base.  Passing a Dual ``t`` yields a system whose
        coefficients carry directional derivatives.
        """
        g = direction.fibers if isinstance(direction, SkewSystem) else direction
        fibers = self.fibers.zip_with(g, lambda f, d: f.add(d, scale=t))
        return SkewSystem(self.base, fibers, self.field, lazy=None)


# ---------------------------------------------------------------------------
# hypothesis battery

@dataclass
class H1Report:
    passed: bool
    sup_derivative_norm: float
    containment_margin: float
    witness_window: object
    samples: int


@dataclass
class H2Report:
    passed: bool
    witness: object = None  # (window, i, j, coefficient), 1-based components


@dataclass
class H3Report:
    passed: bool
    signs: dict = field(default_factory=dict)  # (i_0based, k) -> +1 | -1
    witness: object = None


@dataclass
class HypothesisReport:
    dim: int
    h1: H1Report
    h2: H2Report
    h3: H3Report
    h4_minimal_r: int
    mu: float
    lam_max: float

    @property
    def passed(self):
        return self.h1.passed and self.h2.passed and self.h3.passed

    def sign(self, i, k):
        """Sign of |lambda_i| - |lambda^k| (uniform over the base).

        ``i`` is 0-based.  For |k| >= h4_minimal_r the sign is +1 without a
        stored entry (that is what minimality of r certifies).
        """
        k = as_index(k)
        if mi_order(k) >= self.h4_minimal_r:
            return +1
        return self.h3.signs[(i, k)]


def ball_samples(dim, count, radius=1.0, is_complex=False, extra_axes=True):
    """Deterministic low-discrepancy sample of the radius-ball.

    Halton points in the cube, rejected to the ball; the axis extremes are
    appended so containment checks always probe the boundary directions.
    """
    real_dim = 2 * dim if is_complex else dim
    sampler = qmc.Halton(d=real_dim, scramble=False)
    kept = []
    want = max(count, 1)
    while len(kept) < want:
        block = sampler.random(max(2 * want, 64)) * 2.0 - 1.0
        if is_complex:
            block = block[:, :dim] + 1j * block[:, dim:]
        norms = np.linalg.norm(block, axis=1)
        kept.extend(block[norms <= 1.0])
    pts = np.array(kept[:want]) * radius
    if extra_axes:
        eye = np.eye(dim, dtype=pts.dtype) * radius
        pts = np.vstack([pts, eye, -eye, np.zeros((1, dim), dtype=pts.dtype)])
    return pts


def _norm_sup(fiber, points):
    """Sampled sup of the Jacobian operator norm and of |f(x)|."""
    jac = fiber.jacobian_batch(points)
    dnorm = float(np.max(np.linalg.svd(jac, compute_uv=False)[:, 0]))
    values = np.atleast_2d(fiber.evaluate_batch(points))
    vnorm = float(np.max(np.linalg.norm(values, axis=1)))
    return dnorm, vnorm


def check_hypotheses(sys, r_max=32, sample_count=10 ** 4):
    """Run the full hypothesis battery and locate the minimal flat degree.

    The contraction/containment check samples ``sample_count``
    low-discrepancy points of the unit ball; diagonality and non-resonance
    are decided exactly on coefficient tables.  The minimal degree r with
    ``Lambda_a^r < mu_a`` on every window bounds the exhaustive resonance
    scan: above it the comparison sign is + automatically.
    """
    if sample_count <= 0:
        raise ConfigError("sampling budget must be positive")
    windows = list(sys.windows())
    fibers = [sys.fibers.value(w) for w in windows]
    n = sys.dim

    # (H2) exact diagonality, and multipliers away from zero
    h2 = H2Report(passed=True)
    for w, f in zip(windows, fibers):
        witness = f.off_diagonal_witness()
        if witness is not None:
            i, j, c = witness
            h2 = H2Report(passed=False, witness=(w, i + 1, j + 1, c))
            break

    lam_abs = []
    for f in fibers:
        lam_abs.append(tuple(abs_value(l) for l in f.lam()))

    # (H1) sampled contraction and containment on the declared domain ball
    rho = sys.radius
    pts = ball_samples(n, sample_count, radius=rho, is_complex=(sys.field == COMPLEX))
    sup_d = -math.inf
    sup_v = -math.inf
    witness_window = None
    for w, f in zip(windows, fibers):
        dnorm, vnorm = _norm_sup(f, pts)
        if dnorm > sup_d:
            sup_d, witness_window = dnorm, w
        sup_v = max(sup_v, vnorm)
    degenerate = any(any(la == 0 for la in row) for row in lam_abs)
    h1 = H1Report(passed=(sup_d < 1.0 and sup_v <= rho and not degenerate),
                  sup_derivative_norm=sup_d,
                  containment_margin=rho - sup_v,
                  witness_window=witness_window,
                  samples=len(pts))

    # minimal r with Lambda^r < mu on every window
    h4 = None
    if h1.passed:
        mus = [min(row) for row in lam_abs]
        lams = [max(row) for row in lam_abs]
        for r in range(2, r_max + 1):
            if all(l ** r < m for l, m in zip(lams, mus)):
                h4 = r
                break
        if h4 is None:
            raise HypothesisError(
                f"no flatness degree up to r_max={r_max} dominates the multipliers")
        mu_global = min(mus)
        lam_global = max(lams)
    else:
        mu_global = min((min(row) for row in lam_abs), default=0.0)
        lam_global = max((max(row) for row in lam_abs), default=0.0)
        h4 = 0

    # (H3) exact non-resonance with uniform sign
    signs = {}
    witness = None
    passed = True
    for order in range(2, max(h4, 2)):
        for k in indices_of_order(n, order):
            for i in range(n):
                diffs = [row[i] - scaled_power(row, k) for row in lam_abs]
                if any(d == 0 for d in diffs):
                    w = windows[next(p for p, d in enumerate(diffs) if d == 0)]
                    witness = {"kind": "equality", "i": i + 1, "k": k, "window": w}
                    passed = False
                    break
                pos = [d > 0 for d in diffs]
                if all(pos):
                    signs[(i, k)] = +1
                elif not any(pos):
                    signs[(i, k)] = -1
                else:
                    wp = windows[pos.index(True)]
                    wn = windows[pos.index(False)]
                    witness = {"kind": "sign-flip", "i": i + 1, "k": k,
                               "window_positive": wp, "window_negative": wn}
                    passed = False
                    break
            if not passed:
                break
        if not passed:
            break
    h3 = H3Report(passed=passed, signs=signs, witness=witness)

    return HypothesisReport(dim=n, h1=h1, h2=h2, h3=h3, h4_minimal_r=h4,
                            mu=float(mu_global), lam_max=float(lam_global))


# ---------------------------------------------------------------------------
# conjugation and contraction diagnostics

def conjugate_by_jet(sys, h, degree=None):
    """Replace the fibers by ``h_{sigma(a)} o f_a o h_a^{-1}`` (truncated).

    ``h`` is a cylinder function of jets with unit diagonal linear part.
    The result is tabulated one symbol deeper than ``h`` so the shifted jet
    is determined by the window.
    """
    sample = next(iter(h.table.values()))
    degree = sample.degree if degree is None else degree
    for jet in h.table.values():
        if not jet.has_unit_diagonal(tol=1e-9):
            raise ConfigError("conjugating jets must have unit diagonal linear part")
    if sys.base.kind == "finite":
        depth = 0
    else:
        depth = max(sys.fiber_depth, h.depth + 1)
    table = {}
    for w in sys.windows(depth):
        itin = sys.base.itinerary(w)
        fiber = sys.fibers.at(itin, 0)
        f_jet = fiber.to_jet(degree)
        h0 = h.at(itin, 0)
        h1 = h.at(itin, 1)
        new_jet = jet_compose(h1, jet_compose(f_jet, jet_invert(h0)))
        table[w] = FiberMap.from_jet(new_jet, radius=fiber.radius)
    fibers = CylinderFunction(sys.base, depth if sys.base.kind == "sft" else 0, table)
    return SkewSystem(sys.base, fibers, sys.field)


@dataclass
class RatesReport:
    mu: CylinderFunction
    lam: CylinderFunction
    C: float
    degree: int
    delta: float


def contraction_rates(sys, delta, degree=None, sample_count=256):
    """Per-window multipliers and the flat-stage contraction constant.

    ``C = max_a sup_{|x| <= delta} mu_a^{-1} |D_x f_a|^r`` with the sup
    taken over a low-discrepancy sample of the delta-ball.
    """
    if delta > sys.radius:
        raise ConfigError(f"delta must be at most the domain radius {sys.radius}")
    if degree is None:
        degree = check_hypotheses(sys, sample_count=64).h4_minimal_r
    lam_cf = sys.lam_cf()
    mu_cf = lam_cf.map_values(lambda row: min(abs_value(l) for l in row))
    max_cf = lam_cf.map_values(lambda row: max(abs_value(l) for l in row))
    pts = ball_samples(sys.dim, sample_count, radius=delta,
                       is_complex=(sys.field == COMPLEX))
    worst = 0.0
    for w in sys.windows():
        f = sys.fibers.value(w)
        dnorm, _ = _norm_sup(f, pts)
        worst = max(worst, dnorm ** degree / to_float(mu_cf.value(w)))
    return RatesReport(mu=mu_cf, lam=max_cf, C=worst, degree=degree, delta=delta)


def _compositions(total, parts):
    """Ordered compositions of ``total`` into ``parts`` positive integers."""
    if parts == 1:
        yield (total,)
        return
    for first in range(1, total - parts + 2):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _derivative_norm_estimate(fiber, order, points):
    """Sampled sup of a crude symmetric-tensor norm of D^order f."""
    alphas = indices_of_order(fiber.dim, order)
    per_component = np.zeros((len(points), fiber.dim))
    for alpha in alphas:
        dtab = fiber.derivative_table(alpha)
        vals = np.abs(np.atleast_2d(dtab.evaluate_batch(points)))
        weight = math.factorial(order) / mi_factorial(alpha)
        per_component += weight * vals
    return float(np.max(np.linalg.norm(per_component, axis=1)))


@dataclass
class FlatCertificate:
    delta: float
    C: float
    M: float
    rate: float
    degree: int


def select_delta(sys, degree, sample_count=256, floor=2.0 ** -20):
    """Largest dyadic delta certifying the flat-stage contraction.

    Walks delta down the grid {0.5, 0.25, ...} until
    ``C(delta) + r * delta * M(delta) < 1``; the constant M bounds the
    lower-order terms of the chain-rule expansion of D^r (h o f), estimated
    by sampling the derivative polynomials up to order r - 1.
    """
    r = degree
    lam_cf = sys.lam_cf()
    mu_cf = lam_cf.map_values(lambda row: min(abs_value(l) for l in row))
    delta = 0.5
    while delta > sys.radius:
        delta /= 2.0
    while delta >= floor:
        rates = contraction_rates(sys, delta, degree=r, sample_count=sample_count)
        if rates.C < 1.0:
            pts = ball_samples(sys.dim, sample_count, radius=delta,
                               is_complex=(sys.field == COMPLEX))
            m_worst = 0.0
            for w in sys.windows():
                f = sys.fibers.value(w)
                # the one-factor term of the chain rule carries D^r f itself,
                # so the estimate samples derivative orders up to r
                sups = {1: _norm_sup(f, pts)[0]}
                for i in range(2, r + 1):
                    sups[i] = _derivative_norm_estimate(f, i, pts)
                mu_w = to_float(mu_cf.value(w))
                for parts in range(1, r):
                    total = 0.0
                    for comp in _compositions(r, parts):
                        coeff = math.factorial(r) / (
                            math.factorial(parts) * np.prod([math.factorial(i) for i in comp]))
                        term = coeff
                        for i in comp:
                            term *= sups[i]
                        total += term
                    m_worst = max(m_worst, total / mu_w)
            rate = rates.C + r * delta * m_worst
            if rate < 1.0:
                return FlatCertificate(delta=delta, C=rates.C, M=m_worst,
                                       rate=rate, degree=r)
        delta /= 2.0
    raise ConvergenceError(
        f"no delta above the grid floor {floor} certifies the flat contraction")
