"""Importance metrics, their dual certificates, and the pruning operator.

The importance of basis function j within a set is

    delta_j = max_X  min_{i != j}  w_i(X) - w_j(X)

measured here over the spectral-norm unit ball B(n) (the convex hull of
the unitary group; the optimum over B(n) is attained at a unitary, so
nothing is lost by convexifying).  A negative metric means the basis is
dominated everywhere and can be removed without changing the pointwise
min.

Each difference w_i - w_j is affine with linear part A_i = P_i - P_j, so
for any simplex weight vector alpha,

    max_X min_i (<A_i, X> + b_i)  <=  ||sum_i alpha_i A_i||_* + alpha.b

because the nuclear norm is the support function of B(n).  Minimizing
the right-hand side over the simplex is a certificate-producing dual
solved here by multiplicative-weights mirror descent; any alpha visited
yields a valid upper bound, and the polar factor of sum_i alpha_i A_i
is a feasible (unitary) primal point, so the solver certifies itself.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import constants, linalg
from .basis import BasisSet

log = logging.getLogger(__name__)

STATUS_CONVERGED = "converged"
STATUS_ITERATION_CAP = "iteration-cap"
STATUS_INACCURATE = "infeasible-accuracy"


# ---------------------------------------------------------------------------
# instance
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class MetricInstance:
    """Affine differences (A_i, b_i) of all other bases against basis j.

    su_constrained marks the determinant-constrained variant of the
    problem; only the brute-force oracle solver accepts it.
    """

    j: int
    A: np.ndarray                 # (k, n, n)
    b: np.ndarray                 # (k,)
    n: int
    source_indices: np.ndarray    # (k,) indices into the originating set
    su_constrained: bool = False

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.complex128)
        self.b = np.asarray(self.b, dtype=float)
        if self.A.ndim != 3 or self.A.shape[0] == 0:
            raise ValueError("need a nonempty stack of difference matrices")
        if self.A.shape[1:] != (self.n, self.n):
            raise ValueError("difference shape mismatch")
        if self.b.shape != (self.A.shape[0],):
            raise ValueError("offset vector length mismatch")
        # flattened conjugate view used by all hot loops
        self._A_flat = self.A.reshape(self.A.shape[0], -1)
        self._A_flat_conj = self._A_flat.conj()

    @property
    def num_cuts(self) -> int:
        return self.A.shape[0]

    def cut_values(self, x) -> np.ndarray:
        """<A_i, X> + b_i for every i, shape (k,)."""
        x = np.asarray(x, dtype=np.complex128)
        return (self._A_flat_conj @ x.ravel()).real + self.b

    def objective(self, x) -> tuple[float, int]:
        """min_i cut value and the first position attaining it."""
        vals = self.cut_values(x)
        pos = int(np.argmin(vals))
        return float(vals[pos]), pos

    def combine(self, alpha) -> np.ndarray:
        """sum_i alpha_i A_i."""
        return (np.asarray(alpha, dtype=float) @ self._A_flat).reshape(self.n, self.n)

    def cut_norms(self) -> np.ndarray:
        return np.linalg.norm(self._A_flat, axis=1).real

    def is_degenerate(self, tol: float = 1e-14) -> bool:
        return bool(np.max(self.cut_norms(), initial=0.0) <= tol)

    def restricted(self, positions) -> "MetricInstance":
        positions = np.asarray(positions, dtype=int)
        return MetricInstance(
            j=self.j,
            A=self.A[positions],
            b=self.b[positions],
            n=self.n,
            source_indices=self.source_indices[positions],
            su_constrained=self.su_constrained,
        )


def make_instance(s: BasisSet, j: int, su_constrained: bool = False) -> MetricInstance:
    """Differences of every other basis against basis j, in index order."""
    m = len(s)
    if m < 2:
        raise ValueError("importance metric is undefined for a singleton set")
    if not 0 <= j < m:
        raise ValueError(f"index {j} out of range for a set of {m}")
    keep = np.array([i for i in range(m) if i != j])
    a = s.p_stack[keep] - s.p_stack[j]
    b = s.c_vec[keep] - s.c_vec[j]
    return MetricInstance(j=j, A=a, b=b, n=s.n,
                          source_indices=keep, su_constrained=su_constrained)


# ---------------------------------------------------------------------------
# dual certificate
# ---------------------------------------------------------------------------

def dual_value(inst: MetricInstance, alpha) -> float:
    """Upper bound ||sum alpha_i A_i||_* + alpha.b for simplex weights alpha."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (inst.num_cuts,):
        raise ValueError("alpha length must equal the cut count")
    if np.any(alpha < -1e-12) or abs(float(alpha.sum()) - 1.0) > 1e-9:
        raise ValueError("alpha must lie on the probability simplex")
    return linalg.nuclear_norm(inst.combine(alpha)) + float(alpha @ inst.b)


@dataclass
class DualResult:
    alpha: np.ndarray
    bound: float
    iterations: int
    converged: bool
    primal_value: float
    optimizer: np.ndarray | None
    wall_time_s: float


def solve_dual(inst: MetricInstance, tol: float = 1e-6,
               max_iter: int = constants.DUAL_MAX_ITER,
               alpha0=None, target: float | None = None,
               primal_every: int = 5) -> DualResult:
    """Minimize the dual bound over the simplex by multiplicative weights.

    The subgradient at alpha has components <A_i, W> + b_i where W is the
    polar factor of sum alpha_i A_i; W is unitary, hence primal feasible,
    and evaluating the cuts at it yields a lower bound that tightens the
    internal stopping test best_bound - best_primal <= tol.  Step sizes
    follow the Polyak rule against the best available lower bound, which
    on these piecewise-smooth duals converges geometrically.  Fully
    deterministic.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if inst.su_constrained:
        raise ValueError("determinant-constrained instances are oracle-only")
    t0 = time.perf_counter()
    k = inst.num_cuts
    if alpha0 is None:
        alpha = np.full(k, 1.0 / k)
    else:
        alpha = np.asarray(alpha0, dtype=float).copy()
        if alpha.shape != (k,) or np.any(alpha < 0) or alpha.sum() <= 0:
            raise ValueError("alpha0 must be a nonnegative vector of matching length")
        alpha /= alpha.sum()

    if inst.is_degenerate():
        pos = int(np.argmin(inst.b))
        alpha = np.zeros(k)
        alpha[pos] = 1.0
        val = float(inst.b[pos])
        return DualResult(alpha, val, 0, True, val,
                          np.zeros((inst.n, inst.n), dtype=np.complex128),
                          time.perf_counter() - t0)

    best_bound = math.inf
    best_alpha = alpha.copy()
    best_primal = -math.inf
    best_x = None
    floor = -math.inf if target is None else float(target)

    # vertex sweep: single-cut weights are cheap and catch vertex-optimal
    # duals exactly, where multiplicative updates only converge in the limit
    vertex_bounds = np.array([linalg.nuclear_norm(a) for a in inst.A]) + inst.b
    vpos = int(np.argmin(vertex_bounds))
    if float(vertex_bounds[vpos]) < best_bound:
        best_bound = float(vertex_bounds[vpos])
        best_alpha = np.zeros(k)
        best_alpha[vpos] = 1.0
    wv = linalg.polar_factor(inst.A[vpos])
    pv, _ = inst.objective(wv)
    if pv > best_primal:
        best_primal, best_x = pv, wv
    if best_bound - max(best_primal, floor) <= tol:
        return DualResult(best_alpha, best_bound, 0, True, best_primal,
                          best_x, time.perf_counter() - t0)

    for it in range(1, max_iter + 1):
        m_mat = inst.combine(alpha)
        f = linalg.nuclear_norm(m_mat) + float(alpha @ inst.b)
        w = linalg.polar_factor(m_mat)
        if f < best_bound:
            best_bound, best_alpha = f, alpha.copy()
        if it % primal_every == 1 or f <= best_bound:
            pv, _ = inst.objective(w)
            if pv > best_primal:
                best_primal, best_x = pv, w
        lower = max(best_primal, floor)
        if best_bound - lower <= tol:
            return DualResult(best_alpha, best_bound, it, True, best_primal,
                              best_x, time.perf_counter() - t0)
        g = (inst._A_flat_conj @ w.ravel()).real + inst.b
        gmax = float(np.max(np.abs(g)))
        if gmax == 0.0:
            break
        if lower > -math.inf:
            eta = (f - lower) / (gmax * gmax)
        else:
            eta = math.sqrt(2.0 * math.log(max(k, 2)) / it) / gmax
        z = -eta * (g - g.min())
        alpha = alpha * np.exp(np.maximum(z, -700.0))
        ssum = float(alpha.sum())
        if ssum <= 0 or not np.isfinite(ssum):
            alpha = np.full(k, 1.0 / k)
        else:
            alpha /= ssum

    converged = best_bound - max(best_primal, floor) <= tol
    return DualResult(best_alpha, best_bound, max_iter, converged, best_primal,
                      best_x, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# metric results and configuration
# ---------------------------------------------------------------------------

@dataclass
class MetricResult:
    value: float
    optimizer: np.ndarray | None
    dual_bound: float
    gap: float
    iterations: int
    wall_time_s: float
    status: str

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED


@dataclass
class PruningConfig:
    """How a propagation step prunes: selection rule plus metric solver."""

    mode: str = "keep-top-k"        # keep-top-k | drop-negative | both
    budget: int = 1
    solver: str = "bundle"          # bundle | dual-only | oracle
    bundle_params: object | None = None   # bundle.BundleParams; default built lazily
    dual_tol: float = 1e-6
    dual_max_iter: int = constants.DUAL_MAX_ITER
    gap_tol: float = constants.DUAL_GAP_TOL
    safety_margin: float = constants.PRUNE_SAFETY_MARGIN
    oracle_grid: int = constants.ORACLE_GRID_PER_AXIS
    oracle_refine: int = constants.ORACLE_REFINE_ITERS
    workers: int | None = None

    def __post_init__(self):
        if self.mode not in ("keep-top-k", "drop-negative", "both"):
            raise ValueError(f"unknown pruning mode {self.mode!r}")
        if self.solver not in ("bundle", "dual-only", "oracle"):
            raise ValueError(f"unknown metric solver {self.solver!r}")
        if self.mode in ("keep-top-k", "both") and self.budget < 1:
            raise ValueError("budget must be >= 1 in top-k modes")

    def resolved_bundle_params(self):
        from .bundle import BundleParams
        if self.bundle_params is None:
            self.bundle_params = BundleParams()
        return self.bundle_params


def importance_metric(s: BasisSet, j: int, config: PruningConfig) -> MetricResult:
    """Certified importance metric of basis j, solved over B(n)."""
    inst = make_instance(s, j)
    t0 = time.perf_counter()

    if inst.is_degenerate():
        # all difference matrices vanish: the objective is the constant min b
        val = float(np.min(inst.b))
        return MetricResult(
            value=val,
            optimizer=np.zeros((inst.n, inst.n), dtype=np.complex128),
            dual_bound=val, gap=0.0, iterations=0,
            wall_time_s=time.perf_counter() - t0, status=STATUS_CONVERGED)

    if config.solver == "bundle":
        from .bundle import bundle_solve
        return bundle_solve(inst, config.resolved_bundle_params())

    if config.solver == "dual-only":
        res = solve_dual(inst, tol=config.dual_tol, max_iter=config.dual_max_iter)
        gap = res.bound - res.primal_value
        if res.converged and gap <= config.gap_tol:
            status = STATUS_CONVERGED
        elif gap <= config.gap_tol:
            status = STATUS_CONVERGED
        elif res.iterations >= config.dual_max_iter:
            status = STATUS_ITERATION_CAP
        else:
            status = STATUS_INACCURATE
        return MetricResult(
            value=res.primal_value, optimizer=res.optimizer,
            dual_bound=res.bound, gap=gap, iterations=res.iterations,
            wall_time_s=time.perf_counter() - t0, status=status)

    # oracle solver: exhaustive unitary-group search, n <= 2
    from .oracle import brute_force_unitary
    bf = brute_force_unitary(inst, grid_per_axis=config.oracle_grid,
                             refine_iters=config.oracle_refine)
    value = bf.su_value if inst.su_constrained else bf.value
    dual = solve_dual(inst, tol=config.dual_tol,
                      max_iter=config.dual_max_iter, target=bf.value)
    gap = dual.bound - value
    ok = gap <= config.gap_tol + bf.resolution
    return MetricResult(
        value=value, optimizer=bf.maximizer, dual_bound=dual.bound,
        gap=gap, iterations=dual.iterations,
        wall_time_s=time.perf_counter() - t0,
        status=STATUS_CONVERGED if ok else STATUS_INACCURATE)


def pruning_is_noop(s: BasisSet, config: PruningConfig) -> bool:
    """True when pruning cannot remove anything, so metrics can be skipped."""
    if len(s) < 2:
        return True
    return config.mode == "keep-top-k" and len(s) <= config.budget


def compute_all_metrics(s: BasisSet, config: PruningConfig,
                        solver_override=None):
    """Metric results for every basis; a failed computation yields None.

    Results are collected by index regardless of completion order, so the
    output is deterministic even with workers > 1.
    """
    solve = solver_override or (lambda ss, j: importance_metric(ss, j, config))

    def one(j):
        try:
            return solve(s, j)
        except Exception:
            log.exception("metric computation failed for basis %d; retaining it", j)
            return None

    if config.workers and config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(one, range(len(s))))
    else:
        results = [one(j) for j in range(len(s))]
    failures = sum(r is None for r in results)
    return results, failures


@dataclass
class PruneReport:
    kept: list[int]
    removed: list[int]
    removed_values: list[float]


def prune(s: BasisSet, metrics, config: PruningConfig) -> tuple[BasisSet, PruneReport]:
    """Apply the configured selection rule; failed metrics are always kept.

    keep-top-k keeps the k largest metrics (lower index wins ties);
    drop-negative removes every basis with metric < -safety_margin;
    both applies drop-negative first, then the budget.
    """
    m = len(s)
    if len(metrics) != m:
        raise ValueError("need one metric entry per basis")
    values = np.array([math.inf if r is None else r.value for r in metrics])

    keep_mask = np.ones(m, dtype=bool)
    if config.mode in ("drop-negative", "both"):
        keep_mask &= ~(values < -config.safety_margin)
        if not keep_mask.any():
            # metric of the best basis is >= 0 whenever a duplicate-free set
            # has any point where it attains the min, so this is defensive
            keep_mask[int(np.argmax(values))] = True
    if config.mode in ("keep-top-k", "both"):
        candidates = np.flatnonzero(keep_mask)
        if candidates.size > config.budget:
            order = candidates[np.argsort(-values[candidates], kind="stable")]
            keep_mask = np.zeros(m, dtype=bool)
            keep_mask[order[:config.budget]] = True

    kept_idx = [int(i) for i in np.flatnonzero(keep_mask)]
    removed_idx = [int(i) for i in np.flatnonzero(~keep_mask)]
    report = PruneReport(
        kept=kept_idx,
        removed=removed_idx,
        removed_values=[float(values[i]) for i in removed_idx],
    )
    return s.subset(kept_idx), report


# ---------------------------------------------------------------------------
# feasibility diagnostics
# ---------------------------------------------------------------------------

def schur_feasibility(x) -> float:
    """Minimum eigenvalue of [[I, X], [X*, I]]; >= 0 iff ||X||_2 <= 1.

    The block matrix's spectrum is {1 +- s_i(X)}, so this agrees in sign
    with 1 - ||X||_2.
    """
    x = linalg.as_matrix(x)
    n = linalg.require_square(x)
    block = np.block([[np.eye(n), x], [x.conj().T, np.eye(n)]])
    return float(np.linalg.eigvalsh(block)[0])
