"""Gate-synthesis control instances and the basis-propagation loop.

A problem instance carries Hermitian generators H_1..H_M, a diagonal
control-weight matrix R, a time step tau and a target gate.  One
propagation step maps each basis function w(U) = <P, U> + c to
M+1 successors, one per discrete control m in {0, 1, .., M}:

    P' = exp(i*tau*H_m) @ P,      c' = c + tau*sqrt(R_mm)

(the m=0 control is "do nothing": identity propagator, zero cost).
Repeating for N steps multiplies the basis count by (M+1) each time,
which is why a pruning operation is interleaved.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import constants, linalg
from .basis import AffineBasis, BasisSet

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# generator and target presets
# ---------------------------------------------------------------------------

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)

HADAMARD = np.array([[1, 1], [1, -1]], dtype=np.complex128) / math.sqrt(2)
CNOT = np.array([[1, 0, 0, 0],
                 [0, 1, 0, 0],
                 [0, 0, 0, 1],
                 [0, 0, 1, 0]], dtype=np.complex128)


def pauli_generators() -> list[np.ndarray]:
    return [SIGMA_X.copy(), SIGMA_Y.copy(), SIGMA_Z.copy()]


def gellmann_generators(n: int) -> list[np.ndarray]:
    """Generalized Gell-Mann basis of traceless Hermitian n x n matrices.

    n*n - 1 matrices: symmetric and antisymmetric pair matrices for each
    j < k, then the diagonal ladder.  For n = 2 this reproduces the Pauli
    matrices up to ordering.
    """
    if n < 2:
        raise ValueError("gellmann generators need n >= 2")
    gens = []
    for j in range(n):
        for k in range(j + 1, n):
            sym = np.zeros((n, n), dtype=np.complex128)
            sym[j, k] = sym[k, j] = 1.0
            gens.append(sym)
            asym = np.zeros((n, n), dtype=np.complex128)
            asym[j, k] = -1j
            asym[k, j] = 1j
            gens.append(asym)
    for l in range(1, n):
        d = np.zeros((n, n), dtype=np.complex128)
        scale = math.sqrt(2.0 / (l * (l + 1)))
        for j in range(l):
            d[j, j] = scale
        d[l, l] = -l * scale
        gens.append(d)
    return gens


# ---------------------------------------------------------------------------
# problem definition
# ---------------------------------------------------------------------------

@dataclass
class GateSynthesisProblem:
    n: int
    generators: list[np.ndarray]
    r_diag: np.ndarray
    tau: float
    target: np.ndarray
    horizon_steps: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        self.generators = [linalg.as_matrix(h) for h in self.generators]
        if not self.generators:
            raise ValueError("at least one generator is required")
        for h in self.generators:
            if h.shape != (self.n, self.n):
                raise ValueError(f"generator shape {h.shape} != ({self.n}, {self.n})")
            linalg.require_hermitian(h)
        self.r_diag = np.asarray(self.r_diag, dtype=float)
        if self.r_diag.shape != (len(self.generators),):
            raise ValueError("r_diag length must match the generator count")
        if np.any(self.r_diag <= 0):
            raise ValueError("r_diag entries must be positive")
        self.target = linalg.as_matrix(self.target)
        if self.target.shape != (self.n, self.n):
            raise ValueError("target shape mismatch")
        linalg.require_unitary(self.target, constants.UNITARY_TOL)

    @property
    def num_controls(self) -> int:
        return len(self.generators)


@dataclass(frozen=True)
class Propagator:
    """One-step action of a fixed control: G = exp(i*tau*H_m), plus its cost."""

    G: np.ndarray
    cost_increment: float
    m: int

    def __post_init__(self):
        g = linalg.as_matrix(self.G)
        linalg.require_unitary(g, constants.UNITARY_TOL)
        if self.cost_increment < 0:
            raise ValueError("cost_increment must be nonnegative")
        g = g.copy()
        g.setflags(write=False)
        object.__setattr__(self, "G", g)


def terminal_basis(problem: GateSynthesisProblem) -> BasisSet:
    """Terminal cost (1/2)||U - target||_F^2 as a single affine basis.

    On unitaries the squared distance expands to <-target, U> + n exactly,
    so the terminal cost sits inside the affine basis class.
    """
    b = AffineBasis(-problem.target, float(problem.n))
    return BasisSet(problem.n, [b], labels=[""])


def build_propagators(problem: GateSynthesisProblem) -> list[Propagator]:
    """Index 0 is the idle control (identity, zero cost); index m covers H_m."""
    props = [Propagator(np.eye(problem.n, dtype=np.complex128), 0.0, 0)]
    for m, h in enumerate(problem.generators, start=1):
        g = linalg.unitary_propagator(h, problem.tau)
        cost = problem.tau * math.sqrt(problem.r_diag[m - 1])
        props.append(Propagator(g, cost, m))
    return props


def propagate_step(s: BasisSet, props: list[Propagator]) -> BasisSet:
    """One step of the evolution: |S| * |props| successors.

    Output ordering is propagator-major then basis index, so successor
    (i, m) lands at position m*|S| + i.  Labels append the control index.
    """
    bases = []
    labels = []
    for prop in props:
        for i, b in enumerate(s.bases):
            bases.append(AffineBasis(prop.G @ b.P, b.c + prop.cost_increment))
            old = s.label(i)
            labels.append(f"{old}.{prop.m}" if old else str(prop.m))
    return BasisSet(s.n, bases, labels)


# ---------------------------------------------------------------------------
# propagation with interleaved pruning
# ---------------------------------------------------------------------------

@dataclass
class StepStats:
    step: int
    count_before: int
    count_after: int
    min_metric: float
    max_metric: float
    prune_time_s: float
    removed: list[int] = field(default_factory=list)
    metric_failures: int = 0


@dataclass
class PropagationReport:
    problem_n: int
    steps: list[StepStats]
    final_set: BasisSet
    step_sets: list[BasisSet] | None
    total_time_s: float

    def counts(self) -> list[int]:
        return [st.count_after for st in self.steps]

    def csv_rows(self) -> list[dict]:
        return [
            {
                "step": st.step,
                "count_before": st.count_before,
                "count_after": st.count_after,
                "min_metric": st.min_metric,
                "max_metric": st.max_metric,
                "prune_time_s": st.prune_time_s,
            }
            for st in self.steps
        ]


def propagate_with_pruning(problem: GateSynthesisProblem, pruner,
                           metric_solver=None,
                           keep_steps: bool = False) -> PropagationReport:
    """Run horizon_steps propagation steps, pruning after each one.

    pruner is a PruningConfig; metric_solver optionally overrides the
    configured solver with a callable (basis_set, j) -> MetricResult,
    which tests use to inject oracles.  A basis whose metric computation
    raises is retained (conservative) and the failure is counted.
    """
    from . import metric as metric_mod

    props = build_propagators(problem)
    s = terminal_basis(problem)
    stats: list[StepStats] = []
    step_sets: list[BasisSet] = []
    t_total = time.perf_counter()
    for step in range(1, problem.horizon_steps + 1):
        s = propagate_step(s, props)
        before = len(s)
        t0 = time.perf_counter()
        if metric_mod.pruning_is_noop(s, pruner):
            kept, report = s, None
            metrics = []
            failures = 0
        else:
            metrics, failures = metric_mod.compute_all_metrics(
                s, pruner, solver_override=metric_solver)
            kept, report = metric_mod.prune(s, metrics, pruner)
        dt = time.perf_counter() - t0
        values = [r.value for r in metrics if r is not None]
        stats.append(StepStats(
            step=step,
            count_before=before,
            count_after=len(kept),
            min_metric=min(values) if values else math.nan,
            max_metric=max(values) if values else math.nan,
            prune_time_s=dt,
            removed=report.removed if report is not None else [],
            metric_failures=failures,
        ))
        s = kept
        if keep_steps:
            step_sets.append(s)
    return PropagationReport(
        problem_n=problem.n,
        steps=stats,
        final_set=s,
        step_sets=step_sets if keep_steps else None,
        total_time_s=time.perf_counter() - t_total,
    )


# ---------------------------------------------------------------------------
# stock problems and the key-value config format
# ---------------------------------------------------------------------------

def default_su2_problem(steps: int = 4, tau: float = 0.2,
                        target: np.ndarray | None = None) -> GateSynthesisProblem:
    """Pauli generators, unit weights, Hadamard target by default."""
    return GateSynthesisProblem(
        n=2,
        generators=pauli_generators(),
        r_diag=np.ones(3),
        tau=tau,
        target=HADAMARD if target is None else target,
        horizon_steps=steps,
    )


def default_su4_problem(steps: int = 2, tau: float = 0.1,
                        target: np.ndarray | None = None) -> GateSynthesisProblem:
    """Full Gell-Mann generator set on n=4 (15 controls + idle), CNOT target."""
    gens = gellmann_generators(4)
    return GateSynthesisProblem(
        n=4,
        generators=gens,
        r_diag=np.ones(len(gens)),
        tau=tau,
        target=CNOT if target is None else target,
        horizon_steps=steps,
    )


def load_kv_config(path) -> dict[str, str]:
    """Parse a `key = value` text file; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _resolve_target(spec: str, n: int) -> np.ndarray:
    if spec == "identity":
        return np.eye(n, dtype=np.complex128)
    if spec == "hadamard":
        if n != 2:
            raise ValueError("hadamard target requires n = 2")
        return HADAMARD.copy()
    if spec == "cnot":
        if n != 4:
            raise ValueError("cnot target requires n = 4")
        return CNOT.copy()
    if spec.startswith("haar:"):
        from .oracle import haar_unitary
        seed = int(spec.split(":", 1)[1])
        return haar_unitary(n, np.random.default_rng(seed))
    return linalg.read_matrix(spec)


def _resolve_generators(spec: str, n: int) -> list[np.ndarray]:
    if spec == "pauli":
        if n != 2:
            raise ValueError("pauli generators require n = 2")
        return pauli_generators()
    if spec == "gellmann":
        return gellmann_generators(n)
    return [linalg.read_matrix(p.strip()) for p in spec.split(",") if p.strip()]


def problem_from_config(cfg: dict[str, str]) -> GateSynthesisProblem:
    n = int(cfg.get("n", "2"))
    generators = _resolve_generators(cfg.get("generators", "pauli" if n == 2 else "gellmann"), n)
    if "r_diag" in cfg:
        r = np.array([float(v) for v in cfg["r_diag"].split(",")])
    else:
        r = np.ones(len(generators))
    return GateSynthesisProblem(
        n=n,
        generators=generators,
        r_diag=r,
        tau=float(cfg.get("tau", "0.2")),
        target=_resolve_target(cfg.get("target", "identity"), n),
        horizon_steps=int(cfg.get("steps", "4")),
    )
