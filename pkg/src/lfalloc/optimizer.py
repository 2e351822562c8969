"""Two-step convex bit allocation.

Variables ``x`` are bits per frame (all-intra) or per GOP. Frame ``i``
depends on variable ``g(i)`` through ``d_i = coefficient_i * x[g(i)] ** exponent_i``.

Step (a) drops the smoothness penalty and solves the weighted distortion
problem exactly through its KKT conditions. Step (b) linearises every frame
model at the step-(a) point, which makes the penalty an affine function
inside a Euclidean norm, and minimises the composite convex objective by
accelerated projected gradient on the budget simplex.

The budget is imposed with equality. Every weighted frame's distortion
strictly falls with more bits, so unspent budget can always be spent to
lower the objective and the optimum uses all of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConvergenceError, InfeasibleError, InputError
from .grid import ScanOrder
from .metrics import neighbour_factor, confidence_weight

PER_FRAME = "per_frame"
PER_GOP = "per_gop"


# -- smoothness structure ----------------------------------------------------

def build_difference_matrix(n: int) -> np.ndarray:
    """Dense n^2 x n matrix; row ``r = i*n + j`` holds +1 at i and -1 at j."""
    if n < 1:
        raise InputError("n must be positive")
    diff_matrix = np.zeros((n * n, n))
    for r in range(n * n):
        i, j = divmod(r, n)
        if i != j:
            diff_matrix[r, i] = 1.0
            diff_matrix[r, j] = -1.0
    return diff_matrix


def _pair_weight(scan: ScanOrder, confs: np.ndarray, i: int, j: int) -> float:
    a, b = scan.cell(i), scan.cell(j)
    dl = neighbour_factor(a, b)
    if dl == 0:
        return 0.0
    return dl * confidence_weight(min(confs[a], confs[b]))


def _check_scan(scan: ScanOrder, confidence, n: int) -> np.ndarray:
    confs = np.asarray(getattr(confidence, "values", confidence), dtype=float)
    if scan.frame_count < n:
        raise InputError(f"scan order maps {scan.frame_count} frames, problem has {n}")
    if confs.shape != scan.dims.shape:
        raise InputError("confidence grid does not match the scan order's grid")
    return confs


def build_pair_weights(scan: ScanOrder, confidence, n: int) -> np.ndarray:
    """Diagonal of the n^2 x n^2 adjacency weight matrix, row order as in the difference matrix."""
    confs = _check_scan(scan, confidence, n)
    pair_weights = np.zeros(n * n)
    for r in range(n * n):
        i, j = divmod(r, n)
        if i != j:
            pair_weights[r] = _pair_weight(scan, confs, i, j)
    return pair_weights


@dataclass(frozen=True, eq=False)
class SpStructure:
    """Sparse form of the difference matrix and pair weights: only ordered pairs with a positive weight."""

    n: int
    i: np.ndarray
    j: np.ndarray
    pair_weights: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "SpStructure":
        z = np.zeros(0, dtype=int)
        return cls(n, z, z.copy(), np.zeros(0))

    @classmethod
    def from_scan(cls, scan: ScanOrder, confidence, n: int | None = None) -> "SpStructure":
        n = scan.frame_count if n is None else n
        confs = _check_scan(scan, confidence, n)
        rows = []
        for i in range(n):
            k, l = scan.cell(i)
            for dk in (-1, 0, 1):
                for dl in (-1, 0, 1):
                    if (dk, dl) == (0, 0) or not scan.is_mapped((k + dk, l + dl)):
                        continue
                    j = scan.frame((k + dk, l + dl))
                    if j >= n:
                        continue
                    p = _pair_weight(scan, confs, i, j)
                    if p > 0:
                        rows.append((i, j, p))
        rows.sort()
        if not rows:
            return cls.empty(n)
        i, j, p = zip(*rows)
        return cls(n, np.array(i), np.array(j), np.array(p, dtype=float))

    @property
    def is_empty(self) -> bool:
        return self.pair_weights.size == 0

    def penalty(self, d) -> float:
        d = np.asarray(d, dtype=float)
        diff = d[self.i] - d[self.j]
        return float(np.sum(self.pair_weights * diff * diff))

    def penalty_batch(self, dists: np.ndarray) -> np.ndarray:
        diff = dists[:, self.i] - dists[:, self.j]
        return (diff * diff) @ self.pair_weights

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Materialise the difference matrix and weight diagonal in the full n^2-row layout."""
        diff_matrix = build_difference_matrix(self.n)
        pair_weights = np.zeros(self.n * self.n)
        pair_weights[self.i * self.n + self.j] = self.pair_weights
        return diff_matrix, pair_weights

    def to_dict(self) -> dict:
        return {"n": self.n, "i": self.i.tolist(), "j": self.j.tolist(), "pair_weights": self.pair_weights.tolist()}

    @classmethod
    def from_dict(cls, d) -> "SpStructure":
        return cls(int(d["n"]), np.array(d["i"], dtype=int), np.array(d["j"], dtype=int),
                   np.array(d["pair_weights"], dtype=float))


# -- problem -----------------------------------------------------------------

def allocation_floor(budget: float, n_vars: int) -> float:
    return max(1e-6 * budget / n_vars, 1.0)


@dataclass(frozen=True, eq=False)
class AllocationProblem:
    coefficient: np.ndarray
    exponent: np.ndarray
    weights: np.ndarray
    budget: float
    smooth_weight: float = 0.0
    sp: SpStructure | None = None
    frame_to_var: np.ndarray | None = None
    n_vars: int | None = None
    n_sai: int | None = None
    pinned: np.ndarray | None = None
    variable_kind: str = PER_FRAME

    def __post_init__(self):
        a = np.asarray(self.coefficient, dtype=float)
        b = np.asarray(self.exponent, dtype=float)
        confs = np.asarray(self.weights, dtype=float)
        n = a.size
        if b.shape != (n,) or confs.shape != (n,) or a.shape != (n,):
            raise InputError("coefficient, exponent and weights must be 1-D arrays of equal length")
        if np.any(a <= 0):
            raise InputError("coefficient must be positive")
        if np.any(b >= 0):
            raise InputError("every exponent must be negative for a convex problem")
        if np.any(confs < 0):
            raise InputError("weights must be non-negative")
        if not self.budget > 0:
            raise InputError("budget must be positive")
        if self.smooth_weight < 0:
            raise InputError("lambda must be non-negative")
        g = np.arange(n) if self.frame_to_var is None else np.asarray(self.frame_to_var, dtype=int)
        m = int(g.max()) + 1 if self.n_vars is None else int(self.n_vars)
        if g.shape != (n,) or g.min() < 0 or g.max() >= m:
            raise InputError("frame_to_var must map every frame to a variable")
        if np.bincount(g, minlength=m).min() == 0:
            raise InputError("every variable must own at least one frame")
        sp = SpStructure.empty(n) if self.sp is None else self.sp
        if sp.n != n:
            raise InputError("smoothness structure size does not match the frame count")
        pinned = np.zeros(m, dtype=bool) if self.pinned is None else np.asarray(self.pinned, dtype=bool)
        if pinned.shape != (m,):
            raise InputError("pinned mask must have one entry per variable")
        for name, val in (("coefficient", a), ("exponent", b), ("weights", confs), ("frame_to_var", g), ("pinned", pinned)):
            val = val.copy()
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "sp", sp)
        object.__setattr__(self, "n_vars", m)
        object.__setattr__(self, "n_sai", n if self.n_sai is None else int(self.n_sai))
        if m * self.floor >= self.budget:
            raise InfeasibleError(f"budget {self.budget} cannot cover the floor of {self.floor} bits for {m} variables")

    @property
    def n(self) -> int:
        return self.coefficient.size

    @property
    def floor(self) -> float:
        return allocation_floor(self.budget, self.n_vars)

    @property
    def pinned_share(self) -> float:
        return self.budget / self.n_vars

    def distortion(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.coefficient * np.power(x[..., self.frame_to_var], self.exponent)

    def weighted_term(self, x) -> np.ndarray:
        """Sum of confidence-weighted modelled distortions (batch-aware)."""
        return self.distortion(x) @ self.weights

    def exact_objective(self, x):
        x = np.asarray(x, dtype=float)
        d = self.distortion(x)
        wt = d @ self.weights
        if x.ndim == 1:
            return float(wt + self.smooth_weight * math.sqrt(self.sp.penalty(d)))
        return wt + self.smooth_weight * np.sqrt(self.sp.penalty_batch(d))

    def check_feasible(self, x, rtol: float = 1e-9) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_vars,):
            raise InfeasibleError(f"allocation must have {self.n_vars} entries")
        if np.any(x <= 0) or x.sum() > self.budget * (1 + rtol):
            raise InfeasibleError("allocation violates positivity or the budget")
        return x

    def with_lambda(self, smooth_weight: float) -> "AllocationProblem":
        return AllocationProblem(self.coefficient, self.exponent, self.weights, self.budget, smooth_weight, self.sp,
                                 self.frame_to_var, self.n_vars, self.n_sai, self.pinned, self.variable_kind)

    def with_budget(self, budget: float) -> "AllocationProblem":
        return AllocationProblem(self.coefficient, self.exponent, self.weights, budget, self.smooth_weight, self.sp,
                                 self.frame_to_var, self.n_vars, self.n_sai, self.pinned, self.variable_kind)

    def to_dict(self) -> dict:
        return {
            "variable_kind": self.variable_kind,
            "budget": self.budget,
            "lambda": self.smooth_weight,
            "n_sai": self.n_sai,
            "n_vars": self.n_vars,
            "coefficient": self.coefficient.tolist(),
            "exponent": self.exponent.tolist(),
            "weights": self.weights.tolist(),
            "frame_to_var": self.frame_to_var.tolist(),
            "pinned": self.pinned.tolist(),
            "sp": self.sp.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "AllocationProblem":
        return cls(d["coefficient"], d["exponent"], d["weights"], d["budget"], d["lambda"],
                   SpStructure.from_dict(d["sp"]), d["frame_to_var"], d["n_vars"], d["n_sai"],
                   d["pinned"], d["variable_kind"])


@dataclass(frozen=True, eq=False)
class AllocationSolution:
    x: np.ndarray
    objective: float
    converged: bool
    iterations: int
    kkt_residual: float = float("nan")
    multiplier: float = float("nan")
    trace: tuple = field(default=(), repr=False)

    def to_dict(self, with_trace: bool = False) -> dict:
        d = {"x": self.x.tolist(), "objective": self.objective, "converged": self.converged,
             "iterations": self.iterations, "kkt_residual": self.kkt_residual,
             "multiplier": self.multiplier}
        if with_trace:
            d["trace"] = list(self.trace)
        return d


def predict_target(problem: AllocationProblem, x) -> float:
    """Target value implied by the exact (non-linearised) models at ``x``."""
    x = problem.check_feasible(x)
    d = problem.distortion(x)
    wmse = float(d @ problem.weights) / problem.n_sai
    return wmse + problem.smooth_weight * math.sqrt(problem.sp.penalty(d)) / problem.n_sai


# -- step (a) ----------------------------------------------------------------

def _weighted_gradient(problem: AllocationProblem, x: np.ndarray) -> np.ndarray:
    xf = x[problem.frame_to_var]
    terms = problem.weights * problem.coefficient * problem.exponent * np.power(xf, problem.exponent - 1.0)
    return np.bincount(problem.frame_to_var, weights=terms, minlength=problem.n_vars)


def kkt_residual(problem: AllocationProblem, x, smooth_weight_penalty_grad=None) -> tuple[float, float]:
    """Largest relative spread of the marginal gains over coordinates above the floor.

    Returns ``(residual, multiplier)``. Zero residual means every active
    coordinate sits at the same marginal distortion reduction per bit.
    """
    x = np.asarray(x, dtype=float)
    g = -_weighted_gradient(problem, x)
    if smooth_weight_penalty_grad is not None:
        g = g - smooth_weight_penalty_grad
    active = ~problem.pinned & (x > problem.floor * (1 + 1e-9))
    if not active.any():
        return 0.0, float("nan")
    mu = float(np.mean(g[active]))
    if mu == 0:
        return 0.0, 0.0
    return float(np.max(np.abs(g[active] - mu)) / abs(mu)), mu


def _pinned_split(problem: AllocationProblem):
    free = ~problem.pinned
    if not free.any():
        raise InfeasibleError("every variable is pinned; nothing to optimise")
    free_budget = problem.budget - problem.pinned_share * problem.pinned.sum()
    return free, free_budget


def solve_step_a(problem: AllocationProblem) -> AllocationSolution:
    """Minimise the weighted modelled distortion on the budget simplex.

    The objective is separable and strictly decreasing in each variable, so
    the budget is met with equality and every coordinate above the floor
    satisfies ``-df/dx_v = mu``. Each variable's marginal gain is monotone
    in ``x_v``, which lets ``mu`` be found by bisection in log space.
    """
    free, free_budget = _pinned_split(problem)
    floor = problem.floor
    m = problem.n_vars
    x = np.full(m, problem.pinned_share)

    g = problem.frame_to_var
    coef = problem.weights * problem.coefficient * -problem.exponent
    use = free[g] & (coef > 0)
    has_terms = np.bincount(g[use], minlength=m) > 0
    active_vars = free & has_terms
    idle_vars = free & ~has_terms

    n_free = int(free.sum())
    if n_free * floor >= free_budget:
        raise InfeasibleError("free budget does not cover the allocation floor")

    if not active_vars.any():
        x[free] = free_budget / n_free
        return AllocationSolution(x, float(problem.weighted_term(x)), True, 0, 0.0, 0.0)

    c_t, e_t, v_t = coef[use], problem.exponent[use] - 1.0, g[use]
    log_lo_x, log_hi_x = math.log(floor), math.log(free_budget)

    def marginal(log_x):
        # marginal gain of each variable, evaluated at exp(log_x)
        return np.bincount(v_t, weights=c_t * np.exp(e_t * log_x[v_t]), minlength=m)

    def alloc(log_mu):
        lo = np.full(m, log_lo_x)
        hi = np.full(m, log_hi_x)
        for _ in range(90):
            mid = 0.5 * (lo + hi)
            too_small = np.log(np.maximum(marginal(mid), 1e-300)) > log_mu
            lo = np.where(too_small, mid, lo)
            hi = np.where(too_small, hi, mid)
        out = np.exp(0.5 * (lo + hi))
        at_floor = np.log(np.maximum(marginal(np.full(m, log_lo_x)), 1e-300)) <= log_mu
        out[at_floor] = floor
        return out

    base = np.log(np.maximum(marginal(np.full(m, log_lo_x)), 1e-300))
    top = np.log(np.maximum(marginal(np.full(m, log_hi_x)), 1e-300))
    log_mu_hi = float(base[active_vars].max()) + 1.0
    log_mu_lo = float(top[active_vars].min()) - 1.0
    idle_total = floor * idle_vars.sum()
    iters = 0
    for iters in range(1, 201):
        log_mu = 0.5 * (log_mu_lo + log_mu_hi)
        total = alloc(log_mu)[active_vars].sum() + idle_total
        if total > free_budget:
            log_mu_lo = log_mu
        else:
            log_mu_hi = log_mu
        if log_mu_hi - log_mu_lo < 1e-14:
            break
    log_mu = 0.5 * (log_mu_lo + log_mu_hi)
    xa = alloc(log_mu)
    x[idle_vars] = floor
    x[active_vars] = xa[active_vars]

    # absorb the bisection's residual budget error into the interior coordinates
    interior = active_vars & (x > floor)
    excess = free_budget - x[free].sum()
    if interior.any():
        x[interior] += excess * x[interior] / x[interior].sum()
    res, mu = kkt_residual(problem, x)
    return AllocationSolution(x, float(problem.weighted_term(x)), True, iters, res, mu)


# -- linearisation ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Linearization:
    """Tangent of every frame model at ``expansion_point``.

    The slope matrix is stored as one slope per frame; frame ``i``'s slope multiplies
    variable ``frame_to_var[i]``.
    """

    intercept: np.ndarray
    slope: np.ndarray
    frame_to_var: np.ndarray
    expansion_point: np.ndarray

    @property
    def n_vars(self) -> int:
        return self.expansion_point.size

    def slope_matrix(self) -> np.ndarray:
        n = self.intercept.size
        out = np.zeros((n, self.n_vars))
        out[np.arange(n), self.frame_to_var] = self.slope
        return out

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.intercept + self.slope * x[..., self.frame_to_var]


def tangent(coefficient, exponent, point):
    """Intercept and slope of ``coefficient * r**exponent`` at ``r = point``."""
    coefficient, exponent, point = (np.asarray(v, dtype=float) for v in (coefficient, exponent, point))
    if np.any(point <= 0):
        raise InputError("expansion point must be strictly positive")
    return coefficient * (1.0 - exponent) * np.power(point, exponent), coefficient * exponent * np.power(point, exponent - 1.0)


def linearize(problem: AllocationProblem, point) -> Linearization:
    point = np.asarray(point, dtype=float)
    if point.shape != (problem.n_vars,):
        raise InputError(f"expansion point must have {problem.n_vars} entries")
    intercept, slope = tangent(problem.coefficient, problem.exponent, point[problem.frame_to_var])
    return Linearization(intercept, slope, problem.frame_to_var, point.copy())


# -- step (b) -----------------------------------------------------------------

def project_simplex(v: np.ndarray, total: float, lower: float) -> np.ndarray:
    """Euclidean projection onto {x : sum x = total, x >= lower}."""
    n = v.size
    u = v - lower
    mass = total - n * lower
    s = np.sort(u)[::-1]
    css = np.cumsum(s) - mass
    idx = np.arange(1, n + 1)
    rho = np.nonzero(s - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(u - theta, 0.0) + lower


class StepBObjective:
    """Weighted exact distortion plus lambda times the linearised penalty norm."""

    def __init__(self, problem: AllocationProblem, lin: Linearization):
        self.p = problem
        self.lin = lin
        sp = problem.sp
        self.root_pair_weights = np.sqrt(sp.pair_weights)
        scale = float(np.max(np.abs(lin.intercept))) * float(np.sqrt(sp.pair_weights.max())) if not sp.is_empty else 1.0
        self.eps = 1e-12 * max(scale, 1.0)

    def residual(self, x) -> np.ndarray:
        d = self.lin(x)
        sp = self.p.sp
        return self.root_pair_weights * (d[..., sp.i] - d[..., sp.j])

    def __call__(self, x):
        v = self.residual(x)
        return self.p.weighted_term(x) + self.p.smooth_weight * np.sqrt(np.sum(v * v, axis=-1) + self.eps ** 2)

    def penalty_gradient(self, x: np.ndarray) -> np.ndarray:
        p, lin, sp = self.p, self.lin, self.p.sp
        v = self.residual(x)
        norm = math.sqrt(float(v @ v) + self.eps ** 2)
        coef = v * self.root_pair_weights / norm
        g = lin.frame_to_var
        grad = np.bincount(g[sp.i], weights=coef * lin.slope[sp.i], minlength=p.n_vars)
        grad -= np.bincount(g[sp.j], weights=coef * lin.slope[sp.j], minlength=p.n_vars)
        return p.smooth_weight * grad

    def value_and_grad(self, x: np.ndarray):
        return float(self(x)), _weighted_gradient(self.p, x) + self.penalty_gradient(x)

    def jacobian(self) -> np.ndarray:
        """d residual / d x, one row per adjacent pair."""
        p, lin, sp = self.p, self.lin, self.p.sp
        jac = np.zeros((sp.pair_weights.size, p.n_vars))
        rows = np.arange(sp.pair_weights.size)
        np.add.at(jac, (rows, lin.frame_to_var[sp.i]), self.root_pair_weights * lin.slope[sp.i])
        np.add.at(jac, (rows, lin.frame_to_var[sp.j]), -self.root_pair_weights * lin.slope[sp.j])
        return jac

    def stationarity(self, x) -> float:
        """Relative KKT residual at ``x``, valid at the norm's kink too.

        Where the linearised residual vanishes the penalty has no gradient;
        any ``smooth_weight * jac' u`` with ``|u| <= 1`` is a subgradient, and the one that
        best equalises the marginal gains on the active coordinates is used.
        """
        p = self.p
        x = np.asarray(x, dtype=float)
        v = self.residual(x)
        if math.sqrt(float(v @ v)) > 1e3 * self.eps:
            return kkt_residual(p, x, self.penalty_gradient(x))[0]
        active = ~p.pinned & (x > p.floor * (1 + 1e-9))
        if not active.any():
            return 0.0
        g = -_weighted_gradient(p, x)[active]
        sub = p.smooth_weight * self.jacobian()[:, active].T
        # residual of the gains after the mean is removed: b + centred u, |u| <= 1
        b = g - g.mean()
        centred = sub - sub.mean(axis=0)
        left, s, vt = np.linalg.svd(centred, full_matrices=False)
        proj = left.T @ b
        keep = s > s.max() * 1e-12 if s.size else s.astype(bool)

        def u_of(nu):
            coef = np.zeros_like(s)
            coef[keep] = s[keep] * proj[keep] / (s[keep] ** 2 + nu)
            return vt.T @ coef

        u = u_of(0.0)
        if u @ u > 1.0:
            lo, hi = 0.0, max(float(s.max() * np.abs(proj).sum()), 1.0)
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if u_of(mid) @ u_of(mid) > 1.0 else (lo, mid)
            u = u_of(hi)
        gains = g - sub @ u
        mu = float(gains.mean())
        return float(np.max(np.abs(gains - mu)) / abs(mu)) if mu != 0 else 0.0


def _accelerated_pg(f_grad: Callable, f: Callable, x0: np.ndarray, total: float, lower: float,
                    max_iter: int, pg_tol: float = 1e-8, rel_tol: float = 1e-13, keep_trace: bool = False):
    """FISTA with backtracking and adaptive restart on {sum x = total, x >= lower}.

    Stops when the gradient mapping's sup-norm falls below ``pg_tol`` or the
    relative objective change stays below ``rel_tol`` for 20 iterations.
    """
    y = x0.copy()
    fy, gy = f_grad(y)
    z, fz, gz = y, fy, gy
    t, lipschitz = 1.0, 1.0
    trace = [fy] if keep_trace else []
    quiet = 0
    for it in range(1, max_iter + 1):
        while True:
            cand = project_simplex(z - gz / lipschitz, total, lower)
            diff = cand - z
            fc = float(f(cand))
            if math.isfinite(fc) and fc <= fz + float(gz @ diff) + 0.5 * lipschitz * float(diff @ diff) + 1e-15 * abs(fz):
                break
            lipschitz *= 2.0
            if lipschitz > 1e30:
                break
        if fc > fy:
            if z is y:
                # already restarted: a step from y cannot beat y beyond roundoff
                if fc - fy <= 1e-12 * max(abs(fy), 1e-300):
                    return y, fy, True, it, trace
                lipschitz *= 2.0
                continue
            # restart momentum from the last accepted iterate
            t, z, fz, gz = 1.0, y, fy, gy
            continue
        _, gc = f_grad(cand)
        mapping = np.max(np.abs(cand - project_simplex(cand - gc / lipschitz, total, lower))) * lipschitz
        rel = abs(fy - fc) / max(abs(fy), 1e-300)
        quiet = quiet + 1 if rel <= rel_tol else 0
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        z = cand + ((t - 1.0) / t_next) * (cand - y)
        z = np.maximum(z, lower)
        y, fy, gy = cand, fc, gc
        t = t_next
        fz, gz = f_grad(z)
        lipschitz *= 0.9
        if keep_trace:
            trace.append(fy)
        if mapping <= pg_tol or quiet >= 20:
            return y, fy, True, it, trace
    return y, fy, False, max_iter, trace


def solve_step_b(problem: AllocationProblem, lin: Linearization, start: AllocationSolution | None = None,
                 max_iter: int = 10000, keep_trace: bool = False) -> AllocationSolution:
    """Minimise the weighted distortion plus the linearised smoothness penalty.

    Runs in normalised coordinates (bits / budget, objective / start value)
    so the tolerances are scale free. With ``lambda = 0`` or no adjacent
    frame pairs the step-(a) point is returned unchanged.
    """
    if start is None:
        start = solve_step_a(problem)
    if problem.smooth_weight == 0 or problem.sp.is_empty:
        return start

    free, free_budget = _pinned_split(problem)
    obj = StepBObjective(problem, lin)
    budget = problem.budget
    x_full = start.x.copy()
    f0 = float(obj(x_full))
    scale = abs(f0) if f0 != 0 else 1.0

    def embed(yf):
        x = x_full.copy()
        x[free] = yf * budget
        return x

    def f(yf):
        return obj(embed(yf)) / scale

    def f_grad(yf):
        val, grad = obj.value_and_grad(embed(yf))
        return val / scale, grad[free] * budget / scale

    y, fy, ok, iters, trace = _accelerated_pg(
        f_grad, f, x_full[free] / budget, free_budget / budget, problem.floor / budget, max_iter, keep_trace=keep_trace)
    x = embed(y)
    x[free] *= free_budget / x[free].sum()
    sol = AllocationSolution(x, float(obj(x)), ok, iters,
                             obj.stationarity(x),
                             trace=tuple(v * scale for v in trace))
    if not ok:
        raise ConvergenceError(f"step (b) did not converge in {max_iter} iterations", best=sol)
    return sol


def solve_two_step(problem: AllocationProblem, max_iter: int = 10000, keep_trace: bool = False):
    """Step (a), linearisation at its solution, step (b). Returns all three."""
    a = solve_step_a(problem)
    lin = linearize(problem, a.x)
    b = solve_step_b(problem, lin, a, max_iter=max_iter, keep_trace=keep_trace)
    return a, lin, b


# -- oracle -------------------------------------------------------------------

MAX_ORACLE_DIM = 4
MAX_ORACLE_STEPS = 400


def _compositions(total: int, parts: int) -> np.ndarray:
    """All non-negative integer vectors of length ``parts`` summing to ``total``."""
    if parts == 1:
        return np.array([[total]])
    if parts == 2:
        a = np.arange(total + 1)
        return np.stack([a, total - a], axis=1)
    a, b = np.meshgrid(np.arange(total + 1), np.arange(total + 1), indexing="ij")
    keep = (a + b) <= total
    a, b = a[keep], b[keep]
    if parts == 3:
        return np.stack([a, b, total - a - b], axis=1)
    raise ValueError("parts > 3 is expanded by the caller")


def brute_force_oracle(objective: Callable[[np.ndarray], np.ndarray], budget: float, n: int,
                       grid_steps: int, floor: float = 0.0) -> tuple[np.ndarray, float]:
    """Exhaustive minimum over the discretised simplex.

    Grid points are ``floor + (budget - n*floor) * k / grid_steps`` with
    integer ``k`` summing to ``grid_steps``; ``objective`` maps an (N, n)
    batch of allocations to N values.
    """
    if not 1 <= n <= MAX_ORACLE_DIM:
        raise InputError(f"oracle supports 1..{MAX_ORACLE_DIM} variables, got {n}")
    if not 1 <= grid_steps <= MAX_ORACLE_STEPS:
        raise InputError(f"oracle supports at most {MAX_ORACLE_STEPS} grid steps")
    span = budget - n * floor
    if span <= 0:
        raise InfeasibleError("floor exceeds budget")
    best_val, best_x = math.inf, None
    heads = [None] if n <= 3 else range(grid_steps + 1)
    for head in heads:
        if head is None:
            counts = _compositions(grid_steps, n)
        else:
            tail = _compositions(grid_steps - head, n - 1)
            counts = np.column_stack([np.full(len(tail), head), tail])
        points = floor + span * counts / grid_steps
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            vals = np.asarray(objective(points), dtype=float)
        vals = np.where(np.isnan(vals), np.inf, vals)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best_x = float(vals[k]), points[k].copy()
    return best_x, best_val
