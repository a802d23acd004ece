"""Independent ground-truth generators used to validate the solvers.

Nothing here shares code paths with the solvers it checks: the
unitary-group optimum comes from a dense parameter-chart grid search
with coordinate-descent refinement, propagators are cross-checked by
Runge-Kutta integration, and the relaxation-exactness test drives the
smoothed objective over the spectral ball and unitarizes its optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import constants, linalg
from .basis import AffineBasis, BasisSet, format_basis_set
from .metric import MetricInstance


# ---------------------------------------------------------------------------
# explicit charts of U(1) and U(2)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UnitaryChart:
    """Surjective angle parametrization of U(n) for n in {1, 2}.

    n=1: theta -> [[e^{i theta}]].
    n=2: (phi, theta, alpha, beta) -> e^{i phi} * [[e^{i alpha} cos t,
    e^{i beta} sin t], [-e^{-i beta} sin t, e^{-i alpha} cos t]]; the
    bracketed factor covers SU(2), the phase covers the determinant, so
    fixing phi = 0 gives the determinant-one sub-chart.
    """

    n: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("charts are available for n in {1, 2} only")

    def param_count(self, su: bool = False) -> int:
        if self.n == 1:
            return 0 if su else 1
        return 3 if su else 4

    def ranges(self, su: bool = False) -> list[tuple[float, float, bool]]:
        """(low, high, periodic) per axis."""
        full = (0.0, 2.0 * math.pi, True)
        mix = (0.0, 0.5 * math.pi, False)
        if self.n == 1:
            return [] if su else [full]
        axes = [full, mix, full, full]
        return axes[1:] if su else axes

    def map_batch(self, params: np.ndarray, su: bool = False) -> np.ndarray:
        """(G, p) parameter rows -> (G, n, n) unitaries."""
        params = np.atleast_2d(np.asarray(params, dtype=float))
        g = params.shape[0]
        if params.shape[1] != self.param_count(su):
            raise ValueError("parameter count mismatch")
        if self.n == 1:
            if su:
                return np.ones((g, 1, 1), dtype=np.complex128)
            return np.exp(1j * params[:, 0]).reshape(g, 1, 1)
        if su:
            phi = np.zeros(g)
            theta, alpha, beta = params.T
        else:
            phi, theta, alpha, beta = params.T
        ph = np.exp(1j * phi)
        c, s = np.cos(theta), np.sin(theta)
        out = np.empty((g, 2, 2), dtype=np.complex128)
        out[:, 0, 0] = ph * np.exp(1j * alpha) * c
        out[:, 0, 1] = ph * np.exp(1j * beta) * s
        out[:, 1, 0] = -ph * np.exp(-1j * beta) * s
        out[:, 1, 1] = ph * np.exp(-1j * alpha) * c
        return out

    def map(self, params, su: bool = False) -> np.ndarray:
        return self.map_batch(np.atleast_2d(params), su)[0]

    def frobenius_step_factor(self) -> float:
        """||dU/dp||_F bound per axis (sqrt(2) for n=2, 1 for n=1)."""
        return math.sqrt(2.0) if self.n == 2 else 1.0


# ---------------------------------------------------------------------------
# brute-force optimization over U(n) and SU(n)
# ---------------------------------------------------------------------------

@dataclass
class BruteForceResult:
    value: float
    maximizer: np.ndarray
    su_value: float
    su_maximizer: np.ndarray
    resolution: float
    evaluations: int


def _objective_batch(inst: MetricInstance, us: np.ndarray) -> np.ndarray:
    flat = us.reshape(us.shape[0], -1)
    vals = (inst._A_flat_conj @ flat.T).real + inst.b[:, None]
    return vals.min(axis=0)


def _refine(inst, chart, params, spacings, iters, shrink, su):
    """Coordinate-descent polish around one chart point; returns final spacings."""
    p = np.array(params, dtype=float)
    h = np.array(spacings, dtype=float)
    best = float(_objective_batch(inst, chart.map_batch(p[None, :], su))[0])
    offsets = np.array([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0])
    evals = 0
    for _ in range(iters):
        for ax in range(p.size):
            cand = np.tile(p, (offsets.size, 1))
            cand[:, ax] += offsets * h[ax]
            vals = _objective_batch(inst, chart.map_batch(cand, su))
            evals += offsets.size
            top = int(np.argmax(vals))
            if vals[top] > best:
                best = float(vals[top])
                p = cand[top]
        h /= shrink
    return p, best, h, evals


def brute_force_unitary(inst: MetricInstance,
                        grid_per_axis: int = constants.ORACLE_GRID_PER_AXIS,
                        refine_iters: int = constants.ORACLE_REFINE_ITERS,
                        num_starts: int = 6,
                        shrink: float = constants.ORACLE_REFINE_SHRINK) -> BruteForceResult:
    """Grid + coordinate-descent search of max_X min_i(<A_i,X>+b_i) over U(n).

    Returns the unitary-group value (a guaranteed lower bound on the true
    optimum), the determinant-one value over the sub-chart, and the
    resolution K * (final cell diameter) with K the largest cut norm,
    valid once the coarse grid has located the optimum's basin.
    Deterministic.  n <= 2 only.
    """
    if inst.n > 2:
        raise ValueError("brute force is unsupported beyond n = 2")
    if grid_per_axis < 2 or refine_iters < 1:
        raise ValueError("need grid_per_axis >= 2 and refine_iters >= 1")
    chart = UnitaryChart(inst.n)
    kmax = float(np.max(inst.cut_norms()))
    evals = 0

    def search(su: bool):
        nonlocal evals
        axes = chart.ranges(su)
        if not axes:  # SU(1) is the single point 1
            u = chart.map_batch(np.zeros((1, 0)), su=True)
            val = float(_objective_batch(inst, u)[0])
            evals += 1
            return val, u[0], 0.0
        pts = []
        spacing = []
        for lo, hi, periodic in axes:
            n_ax = grid_per_axis if su or len(axes) > 1 else max(grid_per_axis, 200_000)
            pts.append(np.linspace(lo, hi, n_ax, endpoint=not periodic))
            spacing.append((hi - lo) / n_ax)
        mesh = np.meshgrid(*pts, indexing="ij")
        grid = np.stack([m.ravel() for m in mesh], axis=1)
        vals = _objective_batch(inst, chart.map_batch(grid, su))
        evals += grid.shape[0]
        order = np.argsort(-vals, kind="stable")[:num_starts]
        best_val, best_p, best_h = -math.inf, None, None
        for idx in order:
            p, val, h, ev = _refine(inst, chart, grid[idx], spacing,
                                    refine_iters, shrink, su)
            evals += ev
            if val > best_val:
                best_val, best_p, best_h = val, p, h
        u = chart.map(best_p, su)
        res = kmax * chart.frobenius_step_factor() * float(np.sum(best_h))
        return best_val, u, res

    value, maximizer, res_u = search(su=False)
    su_value, su_maximizer, res_su = search(su=True)
    return BruteForceResult(value=value, maximizer=maximizer,
                            su_value=su_value, su_maximizer=su_maximizer,
                            resolution=max(res_u, res_su),
                            evaluations=evals)


# ---------------------------------------------------------------------------
# unitarization (singular factor replaced by the identity)
# ---------------------------------------------------------------------------

def unitarize(x) -> np.ndarray:
    """Drop the singular-value factor of the SVD: X = U S Vh -> U Vh."""
    return linalg.polar_factor(x)


# ---------------------------------------------------------------------------
# smoothed optimization over the spectral ball (for the exactness check)
# ---------------------------------------------------------------------------

def maximize_smoothed_over_ball(inst: MetricInstance, beta_final: float,
                                max_iters: int = 6000) -> tuple[np.ndarray, float]:
    """Projected gradient ascent of the soft-min objective over ||X||_2 <= 1.

    Runs a geometric beta continuation up to beta_final; returns the final
    iterate and its smoothed objective value at beta_final.
    """
    from .bundle import softmin  # smoothing helper shared deliberately

    x = np.zeros((inst.n, inst.n), dtype=np.complex128)
    betas = []
    b = 10.0
    while b < beta_final:
        betas.append(b)
        b *= 10.0
    betas.append(beta_final)
    kmax2 = max(float(np.max(inst.cut_norms())), 1e-300) ** 2
    iters = 0
    step = None
    for beta in betas:
        if step is None:
            step = 1.0 / (beta * kmax2)
        stage_vtol = 1e-16 if beta == betas[-1] else 0.01 / beta
        while iters < max_iters:
            vals = inst.cut_values(x)
            val, w = softmin(vals, beta)
            grad = (w @ inst._A_flat).reshape(inst.n, inst.n)
            s = 2.0 * step
            accepted = False
            while s >= 1e-18:
                trial = linalg.project_spectral_ball(x + s * grad)
                tval, _ = softmin(inst.cut_values(trial), beta)
                if tval >= val + 1e-4 * linalg.real_inner(grad, trial - x):
                    accepted = True
                    break
                s *= 0.5
            iters += 1
            if not accepted:
                break
            x, step = trial, s
            if tval - val <= stage_vtol:
                break
    final_val, _ = softmin(inst.cut_values(x), betas[-1])
    return x, float(final_val)


# ---------------------------------------------------------------------------
# relaxation exactness check
# ---------------------------------------------------------------------------

@dataclass
class ExactnessReport:
    passed: bool
    bundle_value: float
    bundle_gap: float
    unitary_value: float
    su_value: float
    resolution: float
    relax_diff: float
    smoothed_value: float
    smoothed_unitarized: float
    smoothed_diff: float
    dump_path: str | None = None

    def summary(self) -> str:
        lines = [
            f"passed              {self.passed}",
            f"bundle_value        {self.bundle_value:.12g}",
            f"bundle_gap          {self.bundle_gap:.3e}",
            f"unitary_value       {self.unitary_value:.12g}",
            f"su_value            {self.su_value:.12g}",
            f"oracle_resolution   {self.resolution:.3e}",
            f"relax_diff          {self.relax_diff:.3e}",
            f"smoothed_value      {self.smoothed_value:.12g}",
            f"smoothed_unitarized {self.smoothed_unitarized:.12g}",
            f"smoothed_diff       {self.smoothed_diff:.3e}",
        ]
        return "\n".join(lines)


def exactness_check(inst: MetricInstance, tol: float = 1e-3,
                    beta: float = 1e6, smooth_tol: float = 1e-6,
                    grid_per_axis: int = constants.ORACLE_GRID_PER_AXIS,
                    refine_iters: int = constants.ORACLE_REFINE_ITERS,
                    dump_dir=None, dump_basis: BasisSet | None = None,
                    label: str = "instance") -> ExactnessReport:
    """Verify the spectral-ball optimum is attained on the unitary group.

    Compares the bundle value over the ball against the brute-force
    unitary-group value, and separately checks that unitarizing the
    smoothed problem's optimizer does not lose objective value.  On
    failure, writes the instance and all computed values under dump_dir.
    """
    from .bundle import BundleParams, bundle_solve, softmin

    if inst.n > 2:
        raise ValueError("exactness check needs the n <= 2 brute-force oracle")
    res = bundle_solve(inst, BundleParams())
    bf = brute_force_unitary(inst, grid_per_axis=grid_per_axis,
                             refine_iters=refine_iters)
    relax_diff = abs(res.value - bf.value)
    relax_ok = relax_diff <= tol + bf.resolution + res.gap

    x_smooth, smooth_val = maximize_smoothed_over_ball(inst, beta)
    u_smooth = unitarize(x_smooth)
    unit_val, _ = softmin(inst.cut_values(u_smooth), beta)
    unit_val = float(unit_val)
    best_smooth = max(smooth_val, unit_val)
    smooth_diff = best_smooth - unit_val
    smooth_ok = smooth_diff <= smooth_tol

    passed = relax_ok and smooth_ok
    dump_path = None
    if not passed and dump_dir is not None:
        dump_path = _dump_counterexample(
            Path(dump_dir), label, inst, dump_basis,
            {
                "bundle_value": res.value,
                "bundle_gap": res.gap,
                "unitary_value": bf.value,
                "su_value": bf.su_value,
                "resolution": bf.resolution,
                "relax_diff": relax_diff,
                "smoothed_value": smooth_val,
                "smoothed_unitarized": unit_val,
            })
    return ExactnessReport(
        passed=passed,
        bundle_value=res.value,
        bundle_gap=res.gap,
        unitary_value=bf.value,
        su_value=bf.su_value,
        resolution=bf.resolution,
        relax_diff=relax_diff,
        smoothed_value=smooth_val,
        smoothed_unitarized=unit_val,
        smoothed_diff=smooth_diff,
        dump_path=str(dump_path) if dump_path else None,
    )


def _dump_counterexample(dump_dir: Path, label: str, inst: MetricInstance,
                         basis_set: BasisSet | None, values: dict) -> Path:
    dump_dir.mkdir(parents=True, exist_ok=True)
    report = dump_dir / f"{label}.report.txt"
    with open(report, "w") as fh:
        fh.write(f"counterexample {label}\n")
        fh.write(f"j = {inst.j}, n = {inst.n}, cuts = {inst.num_cuts}\n")
        for key, val in values.items():
            fh.write(f"{key} = {val!r}\n")
    if basis_set is None:
        # reassemble a basis set view of the instance: w_j = identity basis,
        # w_i = (A_i + I, b_i); only the differences matter to the metric
        eye = np.eye(inst.n, dtype=np.complex128)
        bases = [AffineBasis(eye, 0.0, unitary_tol=math.inf)]
        for a, b in zip(inst.A, inst.b):
            bases.append(AffineBasis(a + eye, float(b), unitary_tol=math.inf))
        basis_set = BasisSet(inst.n, bases)
    with open(dump_dir / f"{label}.bset", "w") as fh:
        fh.write(format_basis_set(basis_set))
    return report


# ---------------------------------------------------------------------------
# Runge-Kutta reference integrator for the propagator dynamics
# ---------------------------------------------------------------------------

def integrate_schrodinger(h, t: float, u0, steps: int) -> np.ndarray:
    """Classical RK4 for dU/ds = i H U from U(0) = u0 over [0, t]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = linalg.as_matrix(h)
    linalg.require_hermitian(h)
    u = linalg.as_matrix(u0).copy()
    dt = t / steps
    ih = 1j * h
    for _ in range(steps):
        k1 = ih @ u
        k2 = ih @ (u + 0.5 * dt * k1)
        k3 = ih @ (u + 0.5 * dt * k2)
        k4 = ih @ (u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return u


# ---------------------------------------------------------------------------
# seeded instance generation
# ---------------------------------------------------------------------------

def haar_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed unitary: QR of a complex Gaussian with phase fix."""
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / math.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def propagation_set(seed: int, steps: int, n: int = 2) -> BasisSet:
    """Unpruned propagation of a seeded problem, harvested after `steps`."""
    from . import semigroup

    rng = np.random.default_rng(seed)
    target = haar_unitary(n, rng)
    if n == 2:
        problem = semigroup.default_su2_problem(steps=steps, target=target)
    elif n == 4:
        problem = semigroup.default_su4_problem(steps=steps, target=target)
    else:
        raise ValueError("propagation harvest supports n in {2, 4}")
    props = semigroup.build_propagators(problem)
    s = semigroup.terminal_basis(problem)
    for _ in range(steps):
        s = semigroup.propagate_step(s, props)
    return s


def random_instance(n: int, m: int, seed: int, mode: str = "synthetic") -> BasisSet:
    """Seeded basis set: Haar-random synthetic or propagation-harvested.

    synthetic: m independent Haar unitaries with offsets uniform in [0, 1].
    propagation: run the stock problem (Haar target from the seed) long
    enough to reach m bases and keep the first m.  Deterministic per seed.
    """
    if n < 1 or m < 2:
        raise ValueError("need n >= 1 and m >= 2")
    if mode == "synthetic":
        rng = np.random.default_rng(seed)
        bases = [AffineBasis(haar_unitary(n, rng), float(rng.uniform(0.0, 1.0)))
                 for _ in range(m)]
        return BasisSet(n, bases)
    if mode == "propagation":
        controls = 4 if n == 2 else 16
        steps = 1
        while controls ** steps < m:
            steps += 1
        full = propagation_set(seed, steps, n=n)
        return full.subset(range(m))
    raise ValueError(f"unknown mode {mode!r}")
