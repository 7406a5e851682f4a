"""Degree-by-degree polynomial linearization of a skew system.

Produces the unique jet family ``h_a = id + sum q_{a,k} x^k / k!`` solving
the conjugacy equation up to the working degree.  Each degree j is handled
by conjugating the system with the jets found so far (so the fibers are
linear up to order j-1), comparing coefficients of x^k for |k| = j, and
solving one affine fixed-point equation per multiindex and component.  The
branch of the affine operator follows the uniform comparison sign between
|lambda_i| and |lambda^k|: the forward branch reads the coefficient family
along sigma, the backward branch along sigma^{-1}.

On an SFT the coefficient families are genuine infinite-depth objects; they
are tabulated at a common truncation depth, and every solver and the
residual evaluation read beyond that depth through the same canonical
window extension, which keeps the reported residual at the solver tolerance
(the distance to the untruncated family is recorded separately in the
per-coefficient solve info).
"""

from __future__ import annotations

from dataclasses import dataclass

from .base import (DEPTH_BUDGET, WINDOW_BUDGET, CylinderFunction, shift_pullback,
                   solve_affine_fixed_point)
from .errors import HypothesisError, ResonanceError
from .jets import (JetMap, indices_of_order, jet_compose, jet_max_coeff, jet_sub,
                   mi_factorial, scaled_power)
from .scalars import abs_value, reciprocal, to_float
from .skew import check_hypotheses, conjugate_by_jet


@dataclass
class FormalSolution:
    """Solved polynomial stage.

    ``jets`` is the cylinder family of conjugating jets (unit diagonal
    linear part), ``q`` maps each multiindex to the cylinder family of its
    coefficient vectors, ``residual`` is the largest jet coefficient of
    ``h_{sigma(a)} o f_a - D_0 f_a o h_a`` over the tabled windows.
    """

    degree: int
    jets: CylinderFunction
    q: dict
    residual: float
    report: object
    info: dict


def _common_depth_cap(base, max_depth, max_windows):
    if base.kind == "finite":
        return 0
    cap = 0
    while cap < max_depth and base.window_count(cap + 1) <= max_windows:
        cap += 1
    return cap


def _coefficient_data(sys, k, i):
    """Cylinder family of the Taylor coefficient of x^k in component i."""
    fact = mi_factorial(k)
    return sys.fibers.map_values(lambda fib: fib.table.get((i, k), 0) * fact)


def build_degree_operator(sys, k, i, sign):
    """The affine operator fixing the degree-|k| coefficient family.

    ``sign`` is the uniform sign of |lambda_i| - |lambda^k|: positive means
    the forward branch (pullback along sigma) contracts, otherwise the
    backward branch (pullback along sigma^{-1}) does.  Returns
    ``(op, contraction_bound, data)``.
    """
    lam_cf = sys.lam_cf()
    lam_i = lam_cf.map_values(lambda row: row[i])
    lam_k = lam_cf.map_values(lambda row: scaled_power(row, k))
    data = _coefficient_data(sys, k, i)

    if sign > 0:
        bound = max(to_float(abs_value(lam_k.value(w)) / abs_value(lam_i.value(w)))
                    for w in lam_cf.windows())

        def op(q):
            p = shift_pullback(q, "forward")
            out = p.zip_with(lam_k, lambda qs, lk: qs * lk)
            out = out.zip_with(data, lambda v, d: v + d)
            return out.zip_with(lam_i, lambda v, li: v * reciprocal(li))
    else:
        bound = max(to_float(abs_value(lam_i.value(w)) / abs_value(lam_k.value(w)))
                    for w in lam_cf.windows())

        def op(q):
            expr = q.zip_with(lam_i, lambda qv, li: qv * li)
            expr = expr.zip_with(data, lambda v, d: v - d)
            expr = expr.zip_with(lam_k, lambda v, lk: v * reciprocal(lk))
            return shift_pullback(expr, "backward")

    if bound >= 1.0:
        raise ResonanceError(
            f"operator for k={k}, i={i + 1} is not a contraction "
            f"(factor {bound}); resonance or sign flip across the base")
    return op, bound, data


def solve_formal(sys, degree, tol=1e-12, max_depth=DEPTH_BUDGET,
                 max_windows=WINDOW_BUDGET, report=None, method="auto"):
    """Solve the conjugacy equation up to ``degree``.

    Requires the hypothesis battery to pass (a report may be passed in to
    avoid re-checking).  ``tol`` is the per-coefficient fixed point
    tolerance; ``max_depth``/``max_windows`` bound the SFT tabulation depth.
    """
    if report is None:
        report = check_hypotheses(sys)
    if not report.passed:
        raise HypothesisError("system fails (H1)-(H3); see report", report=report)
    n = sys.dim
    base = sys.base
    cap = _common_depth_cap(base, max_depth, max_windows)

    jets_depth = 0
    identity = JetMap.identity(n, degree)
    cum = CylinderFunction.constant(base, identity, depth=0)
    current = sys
    q_families = {}
    info = {}

    for j in range(2, degree + 1):
        solved = {}
        for k in indices_of_order(n, j):
            comps = []
            for i in range(n):
                sign = report.sign(i, k)
                op, bound, _ = build_degree_operator(current, k, i, sign)
                zero = CylinderFunction.constant(base, 0, depth=0)
                q_ki, fp_info = solve_affine_fixed_point(
                    op, zero, bound, tol, max_depth=cap, max_windows=max_windows,
                    method=method)
                comps.append(q_ki)
                info[(k, i)] = fp_info
            solved[k] = comps
            depth_k = max(c.depth for c in comps)
            vec = CylinderFunction.tabulate(
                base, depth_k,
                lambda itin, _c=comps: tuple(c.at(itin, 0) for c in _c))
            q_families[k] = vec

        stage_depth = max((c.depth for comps in solved.values() for c in comps), default=0)
        jets_depth = max(jets_depth, stage_depth)

        def stage_jet(itin, _solved=solved):
            coeffs = {(i, tuple(1 if jj == i else 0 for jj in range(n))): 1
                      for i in range(n)}
            for k, comps in _solved.items():
                for i, c in enumerate(comps):
                    coeffs[(i, k)] = c.at(itin, 0)
            return JetMap.from_coeffs(n, degree, coeffs)

        h_j = CylinderFunction.tabulate(base, stage_depth, stage_jet)
        cum = cum.zip_with(h_j, lambda old, new: jet_compose(new, old))
        if j < degree:
            current = conjugate_by_jet(current, h_j, degree=degree)

    solution = FormalSolution(degree=degree, jets=cum, q=q_families,
                              residual=0.0, report=report, info=info)
    res_cf = residual_jet(sys, solution)
    solution.residual = max((jet_max_coeff(r) for r in res_cf.table.values()), default=0.0)
    return solution


def residual_jet(sys, sol):
    """The jet family ``h_{sigma(a)} o f_a - D_0 f_a o h_a`` (truncated).

    ``sol`` may be a FormalSolution or a plain cylinder family of jets.
    All lookups run along the canonical extension of each tabled window, so
    on a solved system the coefficients vanish to the solver tolerance.
    """
    jets = sol.jets if isinstance(sol, FormalSolution) else sol
    sample = next(iter(jets.table.values()))
    degree = sample.degree
    base = sys.base
    depth = jets.depth if base.kind == "sft" else 0
    table = {}
    for w in (base.windows(depth) if base.kind == "sft" else base.windows()):
        itin = base.itinerary(w)
        # read fibers from the tables the solver consumed (not a lazy
        # refinement), so the residual measures the solve itself
        fiber = sys.fibers.at(itin, 0)
        h0 = jets.at(itin, 0)
        h1 = jets.at(itin, 1)
        lhs = jet_compose(h1, fiber.to_jet(degree))
        rhs = jet_compose(JetMap.diagonal(fiber.lam(), degree), h0)
        table[w] = jet_sub(lhs, rhs)
    return CylinderFunction(base, depth, table)
