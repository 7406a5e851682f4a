"""Expanding Cantor repellers: attractors, splittings, charts, continuation.

A model is a finite family of contracting polynomial inverse branches of an
expanding map g, with an admissibility matrix saying which compositions are
allowed.  The inverse limit of the repeller is realized as a two-sided
subshift on the branch labels; moving forward along the induced base map
means selecting one more g-preimage, so the induced fiber maps are the
inverse branches rescaled into moving frames.

Indexing convention.  A point of the repeller has the one-sided address
``(w_0, w_1, ...)`` with ``x in phi_{w_0}(phi_{w_1}(...))`` and
``adm[w_t][w_{t+1}] = 1``.  The base symbol sequence of the induced skew
product is the reversed word ``b_t = w_{-t}``: the shift on b is the inverse
of the natural extension of g, and the base SFT uses the transposed
admissibility matrix.  Anchor points satisfy ``A_t = phi_{b_t}(A_{t-1})``
and ``g(A_t) = A_{t-1}``.

Geometry along an itinerary (anchors, invariant frames, expansion factors)
is computed to machine precision from the itinerary's own symbols, so the
induced fibers queried by the orbit evaluator agree with the true rescaled
branches along every sampled itinerary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .base import CylinderFunction, SFTBase
from .errors import ConfigError, ConvergenceError, ScaleError, SplittingError
from .flat import evaluate_linearization, invert_linearization
from .jets import poly_substitute
from .scalars import REAL
from .skew import FiberMap, PolyMap, SkewSystem, ball_samples, _norm_sup


class ExpandingModel:
    """Finitely many contracting polynomial inverse branches on the ball."""

    def __init__(self, dim, branches, admissibility=None, radius=1.0, check_samples=256):
        self.dim = int(dim)
        self.radius = float(radius)
        self.branches = tuple(b if isinstance(b, PolyMap) else PolyMap(dim, b)
                              for b in branches)
        m = len(self.branches)
        if admissibility is None:
            admissibility = [[1] * m for _ in range(m)]
        self.admissibility = tuple(tuple(int(x) for x in row) for row in admissibility)
        if len(self.admissibility) != m or any(len(r) != m for r in self.admissibility):
            raise ConfigError("admissibility matrix must be square over the branches")
        self.contraction = 0.0
        pts = ball_samples(self.dim, check_samples, radius=self.radius)
        for idx, br in enumerate(self.branches):
            dnorm, vnorm = _norm_sup(br, pts)
            if dnorm >= 1.0:
                raise ConfigError(f"branch {idx} is not a contraction (sampled |D| = {dnorm:.3f})")
            if vnorm > self.radius:
                raise ConfigError(f"branch {idx} leaves the ball (sampled |value| = {vnorm:.3f})")
            self.contraction = max(self.contraction, dnorm)

    @property
    def branch_count(self):
        return len(self.branches)

    def words(self, length):
        """Admissible branch words of a given length (address order)."""
        if length <= 0:
            return [()]
        out = [(s,) for s in range(self.branch_count)]
        for _ in range(length - 1):
            out = [w + (s,) for w in out
                   for s in range(self.branch_count) if self.admissibility[w[-1]][s]]
        return out

    def sft_base(self, depth):
        """Base SFT of the induced skew product (transposed admissibility)."""
        m = self.branch_count
        transposed = [[self.admissibility[j][i] for j in range(m)] for i in range(m)]
        return SFTBase(m, transposed, depth=depth)

    def is_decoupled(self):
        """True when every branch component depends on its own variable only."""
        return all(all(e == 0 for j, e in enumerate(k) if j != i)
                   for br in self.branches for (i, k) in br.table)


def sample_attractor(model, depth):
    """All depth-d branch compositions applied to the ball center.

    Returns ``(words, points)``; the point of word ``(w_0, ..., w_{d-1})``
    is ``phi_{w_0}(... phi_{w_{d-1}}(0))``.
    """
    words = model.words(depth)
    center = np.zeros(model.dim)
    points = []
    for word in words:
        z = center
        for s in reversed(word):
            z = np.asarray(model.branches[s].evaluate_batch(z))
        points.append(z)
    return words, np.array(points)


class ModelGeometry:
    """Anchors, frames and expansion data along concrete itineraries.

    Everything is memoized per itinerary key and position; anchors are
    propagated exactly by ``A_t = phi_{b_t}(A_{t-1})`` after a bootstrap
    composition long enough for machine precision, so all consumers of the
    same itinerary see mutually consistent geometry.
    """

    def __init__(self, model, frame_tol=1e-12, frame_iter=200):
        self.model = model
        self.frame_tol = frame_tol
        self.frame_iter = frame_iter
        kappa = max(model.contraction, 1e-3)
        self.warmup = min(int(math.ceil(math.log(1e-17) / math.log(kappa))) + 4, 400)
        self._anchors = {}
        self._frames = {}

    # -- anchors -------------------------------------------------------------

    def anchor(self, itin, t):
        key = (itin.key, t)
        if key in self._anchors:
            return self._anchors[key]
        back = t
        while back > t - self.warmup and (itin.key, back - 1) not in self._anchors:
            back -= 1
        if (itin.key, back - 1) in self._anchors:
            z = self._anchors[(itin.key, back - 1)]
        else:
            # bootstrap: the composition contracts the seed below roundoff
            z = np.zeros(self.model.dim)
        for s in range(back, t + 1):
            z = np.asarray(self.model.branches[itin.symbol(s)].evaluate_batch(z))
            self._anchors[(itin.key, s)] = z
        return self._anchors[key]

    def branch_jacobian(self, itin, t):
        """D phi_{b_t} at A_{t-1} (maps the fiber at t-1 to the fiber at t)."""
        br = self.model.branches[itin.symbol(t)]
        return br.jacobian_batch(self.anchor(itin, t - 1)[None, :])[0]

    def dg(self, itin, t):
        """Derivative of g at the anchor A_t."""
        return np.linalg.inv(self.branch_jacobian(itin, t))

    # -- invariant frames ------------------------------------------------------

    def _stable_plane(self, itin, t, dim_sub):
        """E_{dim_sub} at position t: pullback products into the sigma-past.

        New factors attach on the right of the product, so the plane is
        recomputed with doubling depth until its span settles.
        """
        prev = None
        depth = 8
        while depth <= self.frame_iter * 2:
            q = np.linalg.qr(np.eye(self.model.dim)[:, :dim_sub])[0]
            for s in range(t - depth + 1, t + 1):
                q = np.linalg.qr(self.branch_jacobian(itin, s) @ q)[0]
            if prev is not None and _principal_angle(prev, q) <= self.frame_tol:
                return q
            prev = q
            depth *= 2
        raise SplittingError("no spectral gap detected for the stable flag")

    def _fast_plane(self, itin, t, dim_sub):
        """G at position t: pushforward products into the sigma-future."""
        prev = None
        depth = 8
        while depth <= self.frame_iter * 2:
            q = np.linalg.qr(np.eye(self.model.dim)[:, -dim_sub:])[0]
            for s in range(t + depth, t, -1):
                q = np.linalg.qr(np.linalg.inv(self.branch_jacobian(itin, s)) @ q)[0]
            if prev is not None and _principal_angle(prev, q) <= self.frame_tol:
                return q
            prev = q
            depth *= 2
        raise SplittingError("no spectral gap detected for the fast flag")

    def frame(self, itin, t):
        """Columns u_1..u_n spanning the invariant lines F_i at position t."""
        key = (itin.key, t)
        if key in self._frames:
            return self._frames[key]
        n = self.model.dim
        if n == 1:
            frame = np.array([[1.0]])
        elif self.model.is_decoupled():
            frame = np.eye(n)
        elif n > 3:
            raise SplittingError("splitting computation supports n <= 3 "
                                 "(higher n only for decoupled models)")
        else:
            cols = []
            for i in range(1, n + 1):
                e_i = self._stable_plane(itin, t, i)
                g_i = self._fast_plane(itin, t, n - i + 1)
                line = _intersect_line(e_i, g_i)
                cols.append(line)
            frame = np.column_stack(cols)
            if abs(np.linalg.det(frame)) < 1e-8:
                raise SplittingError("splitting frame is degenerate "
                                     f"(det {np.linalg.det(frame):.2e})")
        self._frames[key] = frame
        return frame

    def factors(self, itin, t):
        """Per-line expansion |D_{A_t} g | F_i|."""
        dg = self.dg(itin, t)
        frame = self.frame(itin, t)
        return tuple(float(np.linalg.norm(dg @ frame[:, i])) for i in range(self.model.dim))


def _principal_angle(q1, q2):
    s = np.clip(np.linalg.svd(q1.T @ q2, compute_uv=False), -1.0, 1.0)
    return float(np.arccos(np.min(s))) if s.size else 0.0


def _intersect_line(e_basis, g_basis):
    """Unit vector spanning the intersection of two subspaces."""
    stack = np.hstack([e_basis, -g_basis])
    _, svals, vt = np.linalg.svd(stack)
    null = vt[-1]
    vec = e_basis @ null[:e_basis.shape[1]]
    norm = np.linalg.norm(vec)
    if norm < 1e-10:
        raise SplittingError("subspace intersection is degenerate")
    vec = vec / norm
    first = np.flatnonzero(np.abs(vec) > 1e-12)[0]
    if vec[first] < 0:
        vec = -vec
    return vec


@dataclass
class SplittingFrame:
    """Tabulated invariant line decomposition over base windows."""

    base: SFTBase
    depth: int
    frames: CylinderFunction
    factors: CylinderFunction
    invariance_residual: float
    dominance_gap: float
    geometry: ModelGeometry

    def frame(self, window):
        return self.frames.value(window)

    def expansion(self, window):
        return self.factors.value(window)


def compute_splitting(model, depth, tol=1e-10, max_iter=200):
    """Invariant splitting of the repeller, tabulated at a window depth.

    The slow flag comes from pullback (graph-transform) iteration along the
    forward g-orbit, the fast flag from pushforward along the itinerary's
    past; their line intersections are normalized to unit vectors with the
    first nonzero coordinate positive.  The invariance residual is the
    largest angle between ``Dg F_i(a)`` and ``F_i`` at the shifted window.
    """
    geometry = ModelGeometry(model, frame_tol=min(tol, 1e-10), frame_iter=max_iter)
    base = model.sft_base(depth)
    frames = {}
    factors = {}
    residual = 0.0
    gap = math.inf
    for w in base.windows(depth):
        itin = base.itinerary(w)
        frame = geometry.frame(itin, 0)
        frames[w] = frame
        fac = geometry.factors(itin, 0)
        factors[w] = fac
        for i in range(model.dim - 1):
            gap = min(gap, fac[i + 1] / fac[i])
        dg = geometry.dg(itin, 0)
        prev_frame = geometry.frame(itin, -1)
        for i in range(model.dim):
            image = dg @ frame[:, i]
            image = image / np.linalg.norm(image)
            cosang = abs(float(np.dot(image, prev_frame[:, i])))
            residual = max(residual, math.acos(min(cosang, 1.0)))
    if model.dim > 1 and gap <= 1.0:
        raise SplittingError(f"expansion factors are not strictly dominated (gap {gap:.3f})")
    return SplittingFrame(base=base, depth=depth,
                          frames=CylinderFunction(base, depth, frames),
                          factors=CylinderFunction(base, depth, factors),
                          invariance_residual=residual,
                          dominance_gap=(gap if model.dim > 1 else math.inf),
                          geometry=geometry)


class CantorFiberFamily:
    """Lazy fiber provider: rescaled inverse branches in moving frames."""

    def __init__(self, model, geometry, scale, diag_tol=1e-7):
        self.model = model
        self.geometry = geometry
        self.scale = float(scale)
        self.diag_tol = diag_tol
        self._memo = {}

    def fiber(self, itin, t=0):
        key = (itin.key, t)
        if key in self._memo:
            return self._memo[key]
        geo = self.geometry
        n = self.model.dim
        s = self.scale
        anchor = geo.anchor(itin, t)
        frame_t = geo.frame(itin, t)
        frame_next = geo.frame(itin, t + 1)
        branch = self.model.branches[itin.symbol(t + 1)]
        inner_matrix = s * frame_t
        comps = poly_substitute([branch.component(i) for i in range(n)],
                                _affine_components(anchor, inner_matrix),
                                n, max(branch.degree, 1))
        left = np.linalg.inv(frame_next) / s
        table = {}
        zero = tuple(0 for _ in range(n))
        keys = sorted({k for comp in comps for k in comp if k != zero})
        for k in keys:
            vec = np.array([float(comp.get(k, 0)) for comp in comps])
            out = left @ vec
            for i in range(n):
                if out[i] != 0:
                    table[(i, k)] = float(out[i])
        fiber = _diagonalize_linear(FiberMap(n, table, radius=1.0), self.diag_tol)
        self._memo[key] = fiber
        return fiber


def _affine_components(const, matrix):
    n = len(const)
    comps = []
    for i in range(n):
        comp = {tuple(0 for _ in range(n)): float(const[i])}
        for j in range(n):
            if matrix[i][j] != 0:
                comp[tuple(1 if jj == j else 0 for jj in range(n))] = float(matrix[i][j])
        comps.append(comp)
    return comps


def _diagonalize_linear(fiber, diag_tol):
    """Zero sub-tolerance off-diagonal linear entries (frame roundoff)."""
    if fiber.off_diagonal_witness() is None:
        return fiber
    table = dict(fiber.table)
    worst = 0.0
    n = fiber.dim
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            unit = tuple(1 if jj == b else 0 for jj in range(n))
            worst = max(worst, abs(table.pop((a, unit), 0)))
    if worst > diag_tol:
        raise SplittingError(
            f"induced linear part has off-diagonal entry {worst:.2e} "
            f"above the tolerance {diag_tol:.0e}; refine the splitting")
    return FiberMap(fiber.dim, table, radius=fiber.radius)


def build_skew_from_model(model, scale=None, depth=4, splitting=None,
                          scalar_field=REAL, diag_tol=1e-7, check_samples=64):
    """Induced skew system over the branch-label SFT.

    The fibers are the inverse branches conjugated into the frame charts
    ``psi_a(x) = a_0 + s L_a x``; their linear parts are diagonal with
    entries of modulus ``1 / |Dg|F_i|`` at the shifted anchor.  ``scale``
    is halved from the ball radius until every sampled fiber maps the unit
    ball strictly inside itself (a given scale failing that raises).
    """
    geometry = splitting.geometry if splitting is not None else ModelGeometry(model)
    base = model.sft_base(depth)

    def admissible(s_try):
        family = CantorFiberFamily(model, geometry, s_try, diag_tol=diag_tol)
        pts = ball_samples(model.dim, check_samples, radius=1.0)
        for w in base.windows(min(depth, 2)):
            fiber = family.fiber(base.itinerary(w), 0)
            dnorm, vnorm = _norm_sup(fiber, pts)
            if dnorm >= 0.999 or vnorm >= 0.999:
                return None
        return family

    if scale is not None:
        family = admissible(scale)
        if family is None:
            raise ScaleError(f"scale {scale} does not map the chart ball inside itself")
    else:
        s_try = model.radius / 2.0
        family = None
        while s_try > 1e-9:
            family = admissible(s_try)
            if family is not None:
                break
            s_try /= 2.0
        if family is None:
            raise ScaleError("no admissible chart scale found")
    fibers = CylinderFunction.tabulate(base, depth, lambda itin: family.fiber(itin, 0))
    return SkewSystem(base, fibers, scalar_field, lazy=family)


@dataclass
class ChartFamily:
    """Linearizing charts ``phi_a = psi_a o h_a^{-1} o (D_0 psi_a)^{-1}``."""

    model: ExpandingModel
    lin: object
    geometry: ModelGeometry
    scale: float

    def psi(self, itin, x, t=0):
        anchor = self.geometry.anchor(itin, t)
        frame = self.geometry.frame(itin, t)
        return anchor + self.scale * (np.atleast_2d(x) @ frame.T)

    def chart_zero(self, window):
        itin = self._itin(window)
        return self.geometry.anchor(itin, 0)

    def _itin(self, window):
        if hasattr(window, "window_at"):
            return window
        return self.lin.system.base.itinerary(window)

    def chart(self, window, v, t=0, tol=1e-10):
        """phi_a(v) for tangent points v (anchored chart, derivative id)."""
        itin = self._itin(window)
        frame = self.geometry.frame(itin, t)
        u = np.atleast_2d(v) @ np.linalg.inv(self.scale * frame).T
        x = np.atleast_2d(invert_linearization(self.lin, itin, u, tol=tol, t0=t))
        return self.psi(itin, x, t=t)

    def conjugacy_defect(self, window, count=50, tol=1e-10, sample_radius=None):
        """Sampled defect of ``phi_{g^(a)} o D_{a_0} g = g o phi_a``.

        Points are taken as ``v = s L_a h_a(x)`` over sampled x, so the
        right side needs no inversion; the left side runs one Newton
        inversion at the shifted window.
        """
        itin = self._itin(window)
        geo = self.geometry
        delta = self.lin.certificate.delta
        rho = sample_radius if sample_radius is not None else 0.5 * delta
        pts = ball_samples(self.model.dim, count, radius=rho, extra_axes=False)
        hx = np.atleast_2d(evaluate_linearization(self.lin, itin, pts, tol=tol, t0=0))
        frame0 = geo.frame(itin, 0)
        frame_prev = geo.frame(itin, -1)
        dg = geo.dg(itin, 0)
        # u = L_{-1}^{-1} Dg L_0 h(x); the scale cancels
        u = hx @ (np.linalg.inv(frame_prev) @ dg @ frame0).T
        x_left = np.atleast_2d(invert_linearization(self.lin, itin, u, tol=tol, t0=-1))
        lhs = self.psi(itin, x_left, t=-1)
        # rhs: g(psi_a(x)) via Newton on the branch joining the anchors
        psi_x = self.psi(itin, pts, t=0)
        branch = self.model.branches[itin.symbol(0)]
        anchor_prev = geo.anchor(itin, -1)
        jac_inv = np.linalg.inv(geo.branch_jacobian(itin, 0))
        rhs = np.empty_like(psi_x)
        for row in range(psi_x.shape[0]):
            seed = anchor_prev + jac_inv @ (psi_x[row] - geo.anchor(itin, 0))
            rhs[row] = branch.newton_invert(psi_x[row], seed, tol=min(tol, 1e-12))
        return float(np.max(np.abs(lhs - rhs)))


def build_charts(model, splitting, lin):
    """Chart family from a solved linearization of the induced system.

    ``splitting`` documents the frame convention; the charts reuse the
    identical geometry object that produced the induced fibers, so the
    normalization ``phi_a(0) = a_0`` holds exactly by construction.
    """
    family = lin.system.lazy
    if family is None:
        raise ConfigError("linearization was not built from a Cantor model")
    return ChartFamily(model=model, lin=lin, geometry=family.geometry,
                       scale=family.scale)


@dataclass
class ContinuationResult:
    words: list
    points: np.ndarray
    continued: np.ndarray
    residuals: np.ndarray
    model: ExpandingModel

    @property
    def max_residual(self):
        return float(np.max(self.residuals)) if self.residuals.size else 0.0

    @property
    def max_displacement(self):
        return float(np.max(np.linalg.norm(self.continued - self.points, axis=1)))


def continue_hyperbolic(model, perturbed, tol=1e-12, depth=8):
    """Hyperbolic continuation of the repeller under a branch perturbation.

    For every admissible itinerary word the perturbed inverse branches are
    iterated along the (canonically extended) word from the ball center
    until the displacement increment drops below ``tol``; the resulting
    point map semi-conjugates g to the perturbed map on the samples.
    """
    if isinstance(perturbed, ExpandingModel):
        new_model = perturbed
    else:
        new_model = ExpandingModel(model.dim, perturbed, model.admissibility,
                                   radius=model.radius)
    if new_model.branch_count != model.branch_count:
        raise ConfigError("perturbed model must keep the branch count")

    words = model.words(depth)
    kappa = max(model.contraction, new_model.contraction)
    # the perturbed-branch constructor already certifies contraction, so a
    # fixed composition length reaches tol with a geometric tail bound
    steps = min(int(math.ceil(math.log(max(tol, 1e-300)) / math.log(max(kappa, 1e-6)))) + 6,
                600)
    tail_bound = kappa ** steps * model.radius / (1 - kappa)
    if tail_bound > tol:
        raise ConvergenceError(
            f"shadowing iteration cannot reach tol {tol} "
            f"(contraction {kappa:.3f}, tail bound {tail_bound:.2e})",
            achieved=tail_bound)

    def extend(word, length):
        out = list(word)
        while len(out) < length:
            last = out[-1]
            out.append(next(s for s in range(model.branch_count)
                            if model.admissibility[last][s]))
        return out

    def limit_point(branches, word):
        sym = extend(word, steps)
        z = np.zeros(model.dim)
        for pos in range(steps - 1, -1, -1):
            z = np.asarray(branches[sym[pos]].evaluate_batch(z))
        return z

    points = np.array([limit_point(model.branches, w) for w in words])
    continued = np.array([limit_point(new_model.branches, w) for w in words])

    residuals = np.zeros(len(words))
    shifted = {tuple(extend(w, depth + 1)[1:depth + 1]): None for w in words}
    for idx, w in enumerate(words):
        sh = tuple(extend(w, depth + 1)[1:depth + 1])
        if shifted[sh] is None:
            shifted[sh] = limit_point(new_model.branches, sh)
        target = shifted[sh]
        branch = new_model.branches[w[0]]
        g_tilde = branch.newton_invert(continued[idx], seed=target, tol=min(tol, 1e-13))
        residuals[idx] = float(np.max(np.abs(g_tilde - target)))
    return ContinuationResult(words=words, points=points, continued=continued,
                              residuals=residuals, model=new_model)
