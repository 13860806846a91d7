"""Dense bounded-variable primal simplex.

Solves ``min c.x  s.t.  A x = b,  lower <= x <= upper`` with a two-phase
method. Nonbasic variables sit at one of their bounds; Bland's rule picks
both the entering and the leaving variable, so the method cannot cycle.
Sized for the decoy programs (tens of variables), not for general use.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


PIVOT_TOL = 1e-9


class LPError(RuntimeError):
    pass


@dataclass
class LPResult:
    status: str  # "optimal" or "infeasible"
    x: np.ndarray
    objective: float
    duals: np.ndarray
    reduced_costs: np.ndarray
    iterations: int
    infeasibility: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def cs_residual(self, lower, upper) -> float:
        """Largest |reduced cost x distance to the nearest bound| (0 at an exact optimum)."""
        gap = np.minimum(self.x - lower, upper - self.x)
        gap = np.where(np.isfinite(gap), gap, 0.0)
        return float(np.max(np.abs(self.reduced_costs) * np.abs(gap), initial=0.0))


def _iterate(c, A, b, lo, up, basis, at_upper, tol, max_iter):
    m, n = A.shape
    it = 0
    while True:
        it += 1
        if it > max_iter:
            raise LPError("simplex iteration limit reached")
        is_basic = np.zeros(n, dtype=bool)
        is_basic[basis] = True
        x = np.where(at_upper, up, lo)
        x[is_basic] = 0.0
        B = A[:, basis]
        try:
            xb = np.linalg.solve(B, b - A @ x)
            y = np.linalg.solve(B.T, c[basis])
        except np.linalg.LinAlgError:
            raise LPError("singular basis matrix") from None
        x[basis] = xb
        d = c - A.T @ y
        d[is_basic] = 0.0

        enter = -1
        for j in range(n):
            if is_basic[j] or lo[j] == up[j]:
                continue
            if (not at_upper[j] and d[j] < -tol) or (at_upper[j] and d[j] > tol):
                enter = j
                break
        if enter < 0:
            return x, y, d, basis, at_upper, it

        direction = -1.0 if at_upper[enter] else 1.0
        w = np.linalg.solve(B, A[:, enter]) * direction
        # tiny pivots would make the next basis numerically singular
        piv = PIVOT_TOL * max(1.0, float(np.max(np.abs(w))))
        # x_B(t) = xb - t*w; candidates are (step, variable index, basis row, leaves at upper)
        cands = [(up[enter] - lo[enter], enter, -1, False)]
        for i in range(m):
            k = basis[i]
            if w[i] > piv:
                cands.append((max((xb[i] - lo[k]) / w[i], 0.0), k, i, False))
            elif w[i] < -piv and np.isfinite(up[k]):
                cands.append((max((up[k] - xb[i]) / -w[i], 0.0), k, i, True))
        best_t = min(cand[0] for cand in cands)
        ties = [cand for cand in cands if cand[0] <= best_t + 1e-14 * max(1.0, abs(best_t))]
        _, _, leave_pos, leave_to_upper = min(ties, key=lambda cand: cand[1])
        if not np.isfinite(best_t):
            raise LPError("unbounded direction in a box-bounded program")
        if leave_pos < 0:
            at_upper[enter] = not at_upper[enter]
            continue
        k = basis[leave_pos]
        at_upper[k] = leave_to_upper
        at_upper[enter] = False
        basis = basis.copy()
        basis[leave_pos] = enter


def simplex(c, A_eq, b_eq, lower, upper, tol: float = 1e-9, max_iter: int = 5000) -> LPResult:
    c = np.asarray(c, dtype=float)
    A = np.atleast_2d(np.asarray(A_eq, dtype=float))
    b = np.asarray(b_eq, dtype=float)
    lo = np.asarray(lower, dtype=float)
    up = np.asarray(upper, dtype=float)
    m, n = A.shape
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(up))):
        raise LPError("all structural variables need finite bounds")
    if np.any(lo > up):
        return LPResult("infeasible", lo.copy(), np.nan, np.zeros(m), np.zeros(n), 0, float(np.max(lo - up)))

    # phase 1: artificials absorb the residual of the all-lower start
    r = b - A @ lo
    sign = np.where(r >= 0, 1.0, -1.0)
    A1 = np.hstack([A, np.diag(sign)])
    lo1 = np.concatenate([lo, np.zeros(m)])
    up1 = np.concatenate([up, np.full(m, np.inf)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    basis = np.arange(n, n + m)
    at_upper = np.zeros(n + m, dtype=bool)
    dtol = 1e-12
    x, y, d, basis, at_upper, it1 = _iterate(c1, A1, b, lo1, up1, basis, at_upper, dtol, max_iter)
    infeas = float(np.sum(x[n:]))
    # relative to the data scale: decoy gains can be ~1e-6
    if infeas > tol * float(np.max(np.abs(b), initial=0.0)) + 1e-15:
        return LPResult("infeasible", x[:n], np.nan, y, d[:n], it1, infeas)

    # phase 2: artificials pinned to zero
    up1[n:] = 0.0
    at_upper[n:] = False
    c2 = np.concatenate([c, np.zeros(m)])
    x, y, d, basis, at_upper, it2 = _iterate(c2, A1, b, lo1, up1, basis, at_upper, dtol, max_iter)
    xs = np.clip(x[:n], lo, up)
    return LPResult("optimal", xs, float(c @ xs), y, d[:n], it1 + it2, infeas)
