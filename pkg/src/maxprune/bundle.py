"""Trust-region bundle solver for the importance-metric problem.

Maximizes phi(X) = min_i (<A_i, X> + b_i) over the spectral-norm unit
ball by maintaining a cutting-plane model phi_CP = min over an active
subset J of the same cuts.  Each outer iteration maximizes the model
inside a Frobenius trust ball around the current center; a serious step
moves the center when the true objective gains at least gamma times the
model's predicted gain, otherwise the cut active at the trial point is
added (null step).  At most one new cut enters per iteration after
deduplication, so the model stays small and each subproblem is cheap:
the total work is a sum over iterations of (small model solve + one
O(m) scan of all cuts).

Subproblem engines:

* "exact" (default).  While the spectral constraint is slack the trust
  subproblem is max over a Frobenius ball of a piecewise-linear min,
  whose dual  min_alpha alpha.d + mu*sqrt(alpha' G alpha)  over the
  simplex (G the cut Gram matrix) is solved by a finite active-set
  method with closed-form stationary values; the recovered maximizer is
  feasible and attains the dual value, so these solves carry a zero
  internal gap.  When the spectral ball interferes, the active-set value
  is kept as an upper bound and the iterate is polished by projected
  Polyak supergradient steps on the exact model inside the lens
  (spectral ball ∩ trust ball).

* "smoothed": projected gradient ascent on the soft-min

      phi_beta(X) = -(1/beta) * log( sum_i exp(-beta*(<A_i,X> + b_i)) )

  with beta on a geometric schedule and Dykstra projections onto the
  lens.  phi_beta <= phi <= phi_beta + log(k)/beta bounds the smoothing
  error, and the residual slack log|J|/beta_final + pg*mu is reported.
  First-order steps cannot push the error far below that slack, so this
  engine is for moderate accuracy and cross-checks.

Certification: at candidate optima the first-order conditions say the
optimizer is unitary and U^* sum(alpha_i A_i) is Hermitian positive
semidefinite, which pins alpha down to a constrained least-squares fit;
the resulting simplex weights give a weak-duality bound that typically
matches the primal value to 1e-9.  The multiplicative-weights dual is
the independent fallback.  Everything is deterministic.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import constants, linalg
from .metric import (
    STATUS_CONVERGED,
    STATUS_INACCURATE,
    STATUS_ITERATION_CAP,
    MetricInstance,
    MetricResult,
    dual_value,
    solve_dual,
)


@dataclass
class InnerParams:
    """Subproblem engine settings (beta schedule applies to "smoothed")."""

    beta_start: float = constants.INNER_BETA_START
    beta_factor: float = constants.INNER_BETA_FACTOR
    beta_cap: float = constants.INNER_BETA_CAP
    grad_tol: float = constants.INNER_GRAD_TOL
    max_inner: int = constants.INNER_MAX_ITER
    polish_steps: int = 40          # primal polish budget on lens-edge solves


@dataclass
class BundleParams:
    mu: float = constants.BUNDLE_MU
    epsilon: float = constants.BUNDLE_EPSILON
    gamma: float = constants.BUNDLE_GAMMA
    max_outer: int = constants.BUNDLE_MAX_OUTER
    inner: InnerParams = field(default_factory=InnerParams)
    seed: int = 0
    inner_method: str = "exact"        # exact | smoothed
    cert_mode: str = "active-set"      # active-set | full
    cert_tol: float = constants.DUAL_GAP_TOL
    cert_max_iter: int = constants.DUAL_MAX_ITER

    def __post_init__(self):
        if self.mu <= 0 or self.epsilon <= 0 or not 0 < self.gamma < 1:
            raise ValueError("need mu > 0, epsilon > 0 and gamma in (0, 1)")
        if self.inner_method not in ("exact", "smoothed"):
            raise ValueError(f"unknown inner_method {self.inner_method!r}")
        if self.cert_mode not in ("active-set", "full"):
            raise ValueError(f"unknown cert_mode {self.cert_mode!r}")


# ---------------------------------------------------------------------------
# soft-min smoothing
# ---------------------------------------------------------------------------

def softmin(z, beta: float):
    """Smoothed minimum of the entries of z and its softmax weights.

    Returns (value, weights) with value <= min(z) <= value + log(len)/beta.
    """
    z = np.asarray(z, dtype=float)
    zmin = float(z.min())
    e = np.exp(-beta * (z - zmin))
    s = float(e.sum())
    return zmin - math.log(s) / beta, e / s


def smoothed_objective(inst: MetricInstance, x, beta: float) -> float:
    """phi_beta over all cuts of the instance."""
    val, _ = softmin(inst.cut_values(x), beta)
    return val


def full_objective(inst: MetricInstance, x) -> tuple[float, int]:
    """Exact min over all cuts and the lowest position attaining it."""
    return inst.objective(x)


# ---------------------------------------------------------------------------
# cutting-plane model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CutModel:
    """Ordered, duplicate-free subset of an instance's cuts."""

    inst: MetricInstance
    positions: list[int] = field(default_factory=list)

    def __post_init__(self):
        self._seen = set(self.positions)
        self._stale = True

    def add(self, pos: int) -> bool:
        """Append a cut position; returns False if already present."""
        if pos in self._seen:
            return False
        self._seen.add(pos)
        self.positions.append(pos)
        self._stale = True
        return True

    def __len__(self) -> int:
        return len(self.positions)

    def _refresh(self):
        if self._stale:
            idx = np.asarray(self.positions, dtype=int)
            self._a_flat = self.inst._A_flat[idx]
            self._a_conj = self.inst._A_flat_conj[idx]
            self._b = self.inst.b[idx]
            self._max_norm = float(np.max(np.linalg.norm(self._a_flat, axis=1).real))
            self._stale = False

    def cut_values(self, x) -> np.ndarray:
        self._refresh()
        return (self._a_conj @ np.asarray(x, dtype=np.complex128).ravel()).real + self._b

    def value_min(self, x) -> float:
        """Exact piecewise-linear model value at x."""
        return float(self.cut_values(x).min())

    def combine(self, weights) -> np.ndarray:
        self._refresh()
        return (np.asarray(weights, dtype=float) @ self._a_flat).reshape(
            self.inst.n, self.inst.n)

    def max_cut_norm(self) -> float:
        self._refresh()
        return self._max_norm


# ---------------------------------------------------------------------------
# exact support of the lens (spectral ball ∩ trust ball)
# ---------------------------------------------------------------------------

def lens_support(m_mat: np.ndarray, center: np.ndarray, mu: float,
                 rel_tol: float = 1e-13, lam_hint: float | None = None):
    """max <M, X> over {||X||_2 <= 1} ∩ {||X - center||_F <= mu}, exactly.

    Dualizing the trust constraint gives a one-dimensional convex problem
    in the multiplier lam, with inner maximizer Proj_ball(center + M/(2*lam))
    and a radius monotone in lam; secant steps inside a bisection bracket
    find the root.  The returned point is feasible and attains the value.

    Returns (value, maximizer, lam).
    """
    nm = float(np.linalg.norm(m_mat))
    if nm < 1e-300:
        return 0.0, center.copy(), 0.0

    # trust constraint inactive: the spectral-ball maximizer already fits
    w = linalg.polar_factor(m_mat)
    if float(np.linalg.norm(w - center)) <= mu:
        return linalg.real_inner(m_mat, w), w, 0.0

    def radius(lam):
        x = linalg.project_spectral_ball(center + m_mat / (2.0 * lam))
        return float(np.linalg.norm(x - center)), x

    lam_lo = None   # radius > mu side
    lam_hi = None   # radius <= mu side
    lam = lam_hint if lam_hint and lam_hint > 0 else nm / (2.0 * mu)
    r, x = radius(lam)
    for _ in range(200):
        if r > mu:
            lam_lo, r_lo = lam, r
            if lam_hi is not None:
                break
            lam *= 4.0
        else:
            lam_hi, r_hi = lam, r
            if lam_lo is not None:
                break
            lam /= 4.0
        r, x = radius(lam)
    if lam_lo is None or lam_hi is None:  # pragma: no cover - defensive
        raise linalg.NumericalError("trust multiplier bracketing failed")

    for _ in range(200):
        if lam_hi - lam_lo <= rel_tol * lam_hi:
            break
        denom = r_hi - r_lo
        if abs(denom) > 1e-300:
            lam = lam_lo + (mu - r_lo) * (lam_hi - lam_lo) / denom
        else:
            lam = 0.5 * (lam_lo + lam_hi)
        width = lam_hi - lam_lo
        lam = min(max(lam, lam_lo + 1e-3 * width), lam_hi - 1e-3 * width)
        r, x = radius(lam)
        if r > mu:
            lam_lo, r_lo = lam, r
        else:
            lam_hi, r_hi = lam, r
    _, x = radius(lam_hi)
    # snap radially onto the trust sphere; the segment to the center stays
    # inside the spectral ball, so the snapped point is feasible
    x = linalg.project_frobenius_ball(x, center, mu)
    return linalg.real_inner(m_mat, x), x, lam_hi


def lens_project(x, center, mu: float) -> np.ndarray:
    """Projection onto the lens, via the exact single-projection shortcuts
    with a Dykstra fallback."""
    pf = linalg.project_frobenius_ball(x, center, mu)
    if linalg.spectral_norm(pf) <= 1.0:
        return pf
    ps = linalg.project_spectral_ball(x)
    if float(np.linalg.norm(ps - center)) <= mu:
        return ps
    return linalg.dykstra_intersect(x, center, mu, tol=1e-12).point


# ---------------------------------------------------------------------------
# exact trust subproblem (spectral constraint slack)
# ---------------------------------------------------------------------------

def _frob_trust_activeset(a_flat, b, center, mu: float, max_rounds: int = 200):
    """max of min_i(<A_i,X>+b_i) over the Frobenius ball, by dual active set.

    The dual  min_alpha alpha.d + mu*sqrt(alpha' G alpha)  has stationary
    values on an active set S solving a scalar quadratic, so the method is
    finite.  Returns (value, X, alpha, exact) where exact marks a verified
    optimality certificate (the value is always a valid upper bound for
    the ball problem restricted to any subset of the ball).
    """
    k = len(b)
    d = (a_flat.conj() @ center.ravel()).real + b
    gram = (a_flat.conj() @ a_flat.T).real
    n = center.shape[0]
    start = int(np.argmin(d + mu * np.sqrt(np.maximum(np.diag(gram), 0.0))))
    s_idx = [start]
    alpha_s = np.array([1.0])
    t = float(d[start])
    for _ in range(max_rounds):
        gs = gram[np.ix_(s_idx, s_idx)]
        ds = d[s_idx]
        ones = np.ones(len(s_idx))
        try:
            u = np.linalg.solve(gs, ones)
            w = np.linalg.solve(gs, ds)
        except np.linalg.LinAlgError:
            u = np.linalg.lstsq(gs, ones, rcond=None)[0]
            w = np.linalg.lstsq(gs, ds, rcond=None)[0]
        a2 = float(ones @ u)
        a1 = float(ones @ w)
        a0 = float(ds @ w)
        if a2 <= 1e-300:
            break
        disc = a1 * a1 - a2 * (a0 - mu * mu)
        if disc < 0:
            break
        t = (a1 + math.sqrt(disc)) / a2    # maximization branch
        alpha_s = t * u - w
        ssum = float(alpha_s.sum())
        if ssum <= 0:
            break
        alpha_s = alpha_s / ssum
        if np.any(alpha_s < -1e-13):
            s_idx.pop(int(np.argmin(alpha_s)))
            continue
        alpha_s = np.maximum(alpha_s, 0.0)
        alpha_s /= alpha_s.sum()
        alpha = np.zeros(k)
        alpha[s_idx] = alpha_s
        m_mat = (alpha @ a_flat).reshape(n, n)
        r = float(np.linalg.norm(m_mat))
        x = center + (mu / r) * m_mat if r > 1e-300 else center.copy()
        vals = (a_flat.conj() @ x.ravel()).real + b
        viol = t - vals
        worst = int(np.argmax(viol))
        if viol[worst] <= 1e-11 * max(1.0, abs(t)):
            return t, x, alpha, True
        if worst in s_idx:
            break
        s_idx.append(worst)
    alpha = np.zeros(k)
    alpha[s_idx] = np.maximum(alpha_s, 0.0)
    if alpha.sum() <= 0:
        alpha[start] = 1.0
    alpha /= alpha.sum()
    m_mat = (alpha @ a_flat).reshape(n, n)
    r = float(np.linalg.norm(m_mat))
    x = center + (mu / max(r, 1e-300)) * m_mat if r > 1e-300 else center.copy()
    return t, x, alpha, False


@dataclass
class InnerResult:
    y: np.ndarray
    w: float                 # exact model value at y (feasible)
    weights: np.ndarray      # simplex weights over the model cuts
    iterations: int
    bound: float             # upper bound on the subproblem optimum
    gap: float               # bound - w
    beta_final: float
    pg_norm: float
    delta_inner: float       # reported model-optimality slack
    feasible_excess: float
    flagged: bool


def solve_model_exact(model: CutModel, center, mu: float,
                      inner: InnerParams | None = None,
                      extra_candidates=()) -> InnerResult:
    """Trust subproblem via the finite active-set dual, lens-aware.

    When the active-set maximizer respects the spectral constraint the
    solve is exact (zero gap).  Otherwise its value remains an upper
    bound (the Frobenius ball contains the lens) and the iterate is
    pulled into the lens and improved by Polyak supergradient steps on
    the exact model, leaving an honest residual gap.  extra_candidates
    are additional points whose lens projections compete for the result.
    """
    if inner is None:
        inner = InnerParams()
    if len(model) == 0:
        raise ValueError("model must contain at least one cut")
    center = np.asarray(center, dtype=np.complex128)
    model._refresh()
    a_flat, b = model._a_flat, model._b

    t, x, alpha, exact_ok = _frob_trust_activeset(a_flat, b, center, mu)
    spec = linalg.spectral_norm(x)
    if exact_ok and spec <= 1.0 + 1e-12:
        w = model.value_min(x)
        return InnerResult(y=x, w=w, weights=alpha, iterations=1, bound=t,
                           gap=max(t - w, 0.0), beta_final=math.inf,
                           pg_norm=0.0, delta_inner=max(t - w, 0.0),
                           feasible_excess=max(spec - 1.0, 0.0), flagged=False)

    # lens-edge: the Frobenius-ball value only bounds the subproblem from
    # above.  The spectral constraint is now the interesting one, so run
    # the first-order refinement on the model over the whole ball; its
    # bound is valid for the lens, and when its unitary candidate lies
    # inside the trust ball the subproblem is solved outright.  Otherwise
    # tighten further with exact lens-support evaluations along a short
    # multiplicative-weights descent and polish the incumbent by Polyak
    # supergradient steps.
    n = model.inst.n
    k = len(model)
    scale = max(1.0, model.max_cut_norm())
    sub = model.inst.restricted(model.positions)
    ref = complementarity_certificate(sub, center, extra_starts=(x,))
    bound = min(t, ref.bound)
    y = lens_project(x, center, mu)
    best_w = model.value_min(y)
    best_y = y
    for cand in extra_candidates:
        yc = lens_project(np.asarray(cand, dtype=np.complex128), center, mu)
        wc = model.value_min(yc)
        if wc > best_w:
            best_w, best_y = wc, yc
    if ref.u is not None:
        in_trust = float(np.linalg.norm(ref.u - center)) <= mu
        yu = ref.u if in_trust else lens_project(ref.u, center, mu)
        wu = model.value_min(yu)
        if wu > best_w:
            best_w, best_y = wu, yu
        if in_trust and ref.alpha is not None \
                and bound - wu <= 1e-9 * scale:
            return InnerResult(y=yu, w=wu, weights=ref.alpha, iterations=1,
                               bound=bound, gap=max(bound - wu, 0.0),
                               beta_final=math.inf, pg_norm=0.0,
                               delta_inner=max(bound - wu, 0.0),
                               feasible_excess=0.0, flagged=False)
    if ref.alpha is not None:
        alpha = np.maximum(ref.alpha, 1e-16)
        alpha /= alpha.sum()
    elif alpha.sum() <= 0:
        alpha = np.full(k, 1.0 / k)
    lam = None
    iters = 0
    for _ in range(inner.polish_steps):
        iters += 1
        sup, xc, lam = lens_support(model.combine(alpha), center, mu,
                                    lam_hint=lam)
        f = sup + float(alpha @ b)
        bound = min(bound, f)
        wc = model.value_min(xc)
        if wc > best_w:
            best_w, best_y = wc, xc
        if bound - best_w <= 1e-11 * scale:
            break
        g = model.cut_values(xc)
        gmax = float(np.max(np.abs(g)))
        if gmax == 0.0:
            break
        level = best_w + 0.5 * (bound - best_w)
        eta = max(f - level, 0.0) / (gmax * gmax)
        if eta > 0:
            alpha = alpha * np.exp(np.maximum(-eta * (g - g.min()), -700.0))
            ssum = float(alpha.sum())
            alpha = alpha / ssum if ssum > 0 and np.isfinite(ssum) \
                else np.full(k, 1.0 / k)
    y = best_y
    for _ in range(inner.polish_steps):
        vals = model.cut_values(y)
        h = float(vals.min())
        if h > best_w:
            best_w, best_y = h, y
        if bound - best_w <= 1e-11 * scale:
            break
        iters += 1
        arg = int(np.argmin(vals))
        g = model._a_flat[arg].reshape(n, n)
        gn2 = float(np.linalg.norm(g)) ** 2
        if gn2 <= 0:
            break
        target = best_w + 0.5 * (bound - best_w)
        y = lens_project(y + ((target - h) / gn2) * g, center, mu)
    gap = max(bound - best_w, 0.0)
    return InnerResult(y=best_y, w=best_w, weights=alpha, iterations=iters,
                       bound=bound, gap=gap, beta_final=math.inf,
                       pg_norm=0.0, delta_inner=gap, feasible_excess=0.0,
                       flagged=False)


def smoothed_model_solve(model: CutModel, center, mu: float,
                         inner: InnerParams | None = None) -> InnerResult:
    """Maximize the model over the lens by smoothing + projected gradient.

    Projected gradient ascent on phi_beta with Armijo step doubling and a
    geometric beta continuation; projections go through Dykstra's scheme
    (with its exact single-projection shortcuts).  Returns the exact
    (unsmoothed) model value at the final iterate and the slack
    log|J|/beta_final + pg*mu by which the model optimum may exceed it.
    """
    if inner is None:
        inner = InnerParams()
    if len(model) == 0:
        raise ValueError("model must contain at least one cut")
    center = np.asarray(center, dtype=np.complex128)
    k = len(model)
    kmax2 = max(model.max_cut_norm(), 1e-300) ** 2

    # when the whole trust ball sits inside the spectral ball the projection
    # is the closed-form radial one; no SVDs needed
    frob_only = linalg.spectral_norm(center) + mu <= 1.0 - 1e-12
    worst_excess = 0.0

    def project(x):
        nonlocal worst_excess
        if frob_only:
            return linalg.project_frobenius_ball(x, center, mu)
        res = linalg.dykstra_intersect(x, center, mu)
        worst_excess = max(worst_excess, res.spectral_excess, res.frobenius_excess)
        return res.point

    betas = []
    beta = inner.beta_start
    while True:
        betas.append(min(beta, inner.beta_cap))
        if beta >= inner.beta_cap:
            break
        beta *= inner.beta_factor
    per_stage = max(20, inner.max_inner // len(betas))

    y = project(center.copy())
    iters = 0
    pg = math.inf
    step = None
    weights = np.full(k, 1.0 / k)
    budget_out = False
    logk = math.log(k) if k > 1 else 0.0

    for stage, beta in enumerate(betas):
        last_stage = stage == len(betas) - 1
        # a stage only needs the precision the next beta can resolve
        stage_vtol = 0.0 if last_stage else 0.05 * logk / (beta * inner.beta_factor)
        stage_iters = 0
        if step is None:
            step = 1.0 / (beta * kmax2)
        while stage_iters < per_stage:
            if iters >= inner.max_inner:
                budget_out = True
                break
            val, weights = softmin(model.cut_values(y), beta)
            grad = model.combine(weights)
            s = 2.0 * step
            accepted = False
            while s >= 1e-18:
                trial = project(y + s * grad)
                tval, _ = softmin(model.cut_values(trial), beta)
                gain_ref = linalg.real_inner(grad, trial - y)
                if tval >= val + 1e-4 * gain_ref:
                    accepted = True
                    break
                s *= 0.5
            iters += 1
            stage_iters += 1
            if not accepted:
                pg = 0.0
                break
            move = float(np.linalg.norm(trial - y))
            pg = move / s
            improvement = tval - val
            y = trial
            step = s
            if pg <= inner.grad_tol or improvement <= stage_vtol:
                break
        if budget_out:
            break

    w_exact = model.value_min(y)
    beta_final = betas[min(len(betas) - 1, stage)]
    delta = logk / beta_final + pg * mu
    return InnerResult(
        y=y, w=w_exact, weights=weights, iterations=iters,
        bound=w_exact + delta, gap=delta, beta_final=beta_final, pg_norm=pg,
        delta_inner=delta, feasible_excess=worst_excess,
        flagged=budget_out and pg > inner.grad_tol,
    )


# ---------------------------------------------------------------------------
# complementarity certificate
# ---------------------------------------------------------------------------

@dataclass
class KktRefinement:
    bound: float            # weak-duality upper bound (always valid)
    alpha: np.ndarray | None
    u: np.ndarray | None    # best unitary candidate found
    primal: float           # exact objective value at u


def _smoothed_ball_ascent(inst: MetricInstance, x, beta_final: float = 3e5,
                          max_iters: int = 500) -> np.ndarray:
    """Ascend the soft-min objective over the spectral ball (not the group).

    The ball is convex and the objective concave, so this cannot be
    trapped in a spurious basin; moderate smoothing accuracy suffices
    because the result only seeds the local group refinement.
    """
    kmax2 = max(float(np.max(inst.cut_norms())), 1e-300) ** 2
    x = linalg.project_spectral_ball(np.asarray(x, dtype=np.complex128))
    betas = [1e1]
    while betas[-1] < beta_final:
        betas.append(min(betas[-1] * 10.0, beta_final))
    iters = 0
    step = None
    for beta in betas:
        if step is None:
            step = 1.0 / (beta * kmax2)
        stage_vtol = 1e-10 if beta == betas[-1] else 0.01 / beta
        while iters < max_iters:
            val, wts = softmin(inst.cut_values(x), beta)
            grad = (wts @ inst._A_flat).reshape(inst.n, inst.n)
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
    return x


def _smoothed_group_ascent(inst: MetricInstance, u, beta_final: float = 1e6,
                           max_iters: int = 400):
    """Ascend the soft-min objective along the unitary group.

    Armijo-doubled gradient steps retracted by the polar factor, with a
    geometric beta continuation; the smooth gradient removes the active-cut
    zigzag of plain supergradient steps.  Every iterate is unitary, hence
    feasible; only evaluated objective values are trusted downstream.
    """
    kmax2 = max(float(np.max(inst.cut_norms())), 1e-300) ** 2
    betas = [1e2]
    while betas[-1] < beta_final:
        betas.append(min(betas[-1] * 10.0, beta_final))
    iters = 0
    step = None
    for beta in betas:
        if step is None:
            step = 1.0 / (beta * kmax2)
        stage_vtol = 1e-16 if beta == betas[-1] else 0.01 / beta
        while iters < max_iters:
            val, wts = softmin(inst.cut_values(u), beta)
            grad = (wts @ inst._A_flat).reshape(inst.n, inst.n)
            s = 2.0 * step
            accepted = False
            while s >= 1e-18:
                trial = linalg.polar_factor(u + s * grad)
                tval, _ = softmin(inst.cut_values(trial), beta)
                if tval >= val + 1e-4 * linalg.real_inner(grad, trial - u):
                    accepted = True
                    break
                s *= 0.5
            iters += 1
            if not accepted:
                break
            u, step = trial, s
            if tval - val <= stage_vtol:
                break
    best, _ = inst.objective(u)
    return u, best


def _herm_from_params(p, n):
    h = np.zeros((n, n), dtype=np.complex128)
    idx = 0
    for i in range(n):
        h[i, i] = p[idx]
        idx += 1
    for i in range(n):
        for j in range(i + 1, n):
            h[i, j] = p[idx] + 1j * p[idx + 1]
            h[j, i] = p[idx] - 1j * p[idx + 1]
            idx += 2
    return h


def _antiherm_params(s_mat, n):
    a = 0.5 * (s_mat - s_mat.conj().T)
    out = np.empty(n * n)
    idx = 0
    for i in range(n):
        out[idx] = a[i, i].imag
        idx += 1
    for i in range(n):
        for j in range(i + 1, n):
            out[idx] = a[i, j].real
            out[idx + 1] = a[i, j].imag
            idx += 2
    return out


def _unitary_exp(h):
    w, v = np.linalg.eigh(h)
    return (v * np.exp(1j * w)) @ v.conj().T


def _kkt_newton(inst: MetricInstance, u0, active, alpha0, iters: int = 10):
    """Square Newton solve of the stationarity system at a candidate optimum.

    Unknowns: a Hermitian generator H (the optimizer is u0 exp(iH)), the
    free simplex weights on the active cuts, and the common cut value t.
    Equations: the active cuts all equal t, and u^* sum(alpha_i A_i) is
    Hermitian (group stationarity).  Quadratic local convergence turns a
    ~1e-4 candidate into a ~1e-12 one; failures are reported, not used.

    Returns (u, alpha_active, value) or None.
    """
    n = inst.n
    s = len(active)
    a_stack = inst.A[active]
    af = a_stack.reshape(s, -1)
    dim = n * n + s          # H params + (alpha_2..alpha_s) + t
    z = np.zeros(dim)
    z[n * n:n * n + s - 1] = alpha0[1:]
    vals0 = (af.conj() @ u0.ravel()).real + inst.b[active]
    z[-1] = float(vals0 @ alpha0)

    def residual(zv):
        h = _herm_from_params(zv[:n * n], n)
        u = u0 @ _unitary_exp(h)
        alpha = np.empty(s)
        alpha[1:] = zv[n * n:n * n + s - 1]
        alpha[0] = 1.0 - alpha[1:].sum()
        t = zv[-1]
        cuts = (af.conj() @ u.ravel()).real + inst.b[active] - t
        m_mat = (alpha @ af).reshape(n, n)
        s_mat = u.conj().T @ m_mat
        return np.concatenate([cuts, _antiherm_params(s_mat, n)]), u, alpha, t

    r, u, alpha, t = residual(z)
    scale = max(1.0, float(np.max(np.abs(inst.b))), float(np.max(inst.cut_norms())))
    for _ in range(iters):
        rnorm = float(np.linalg.norm(r))
        if rnorm <= 1e-13 * scale:
            break
        jac = np.empty((r.size, dim))
        eps = 1e-7
        for c in range(dim):
            zp = z.copy()
            zp[c] += eps
            rp, *_ = residual(zp)
            jac[:, c] = (rp - r) / eps
        try:
            step = np.linalg.lstsq(jac, -r, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        norm = float(np.linalg.norm(step))
        if norm > 0.5:
            step *= 0.5 / norm
        # damp until the residual actually shrinks
        improved = False
        for _ in range(20):
            r_new, u_new, alpha_new, t_new = residual(z + step)
            if float(np.linalg.norm(r_new)) < rnorm:
                improved = True
                break
            step *= 0.5
        if not improved:
            return None
        z = z + step
        r, u, alpha, t = r_new, u_new, alpha_new, t_new
    if np.linalg.norm(r) > 1e-9 * scale or np.any(alpha < -1e-9):
        return None
    alpha = np.maximum(alpha, 0.0)
    if alpha.sum() <= 0:
        return None
    alpha /= alpha.sum()
    value, _ = inst.objective(u)
    return u, alpha, value


def complementarity_certificate(inst: MetricInstance, x,
                                rounds: int = 12,
                                bound_hint: float | None = None,
                                extra_starts=()) -> KktRefinement:
    """Dual bound and unitary candidate from first-order structure.

    At an optimum the maximizer is unitary and U^* sum(alpha_i A_i) is
    Hermitian PSD with the weights supported on active cuts, so alpha is
    recovered by minimizing the anti-Hermitian residual over the simplex
    (an equality-constrained least squares, clipped), and the unitary is
    realigned to the polar factor of the recovered combination; smoothed
    group ascent and a damped Newton solve of the stationarity system
    finish the refinement.  The pipeline is run from the polar factor of
    x and of every extra start (refinement is local, so dual-informed
    extra starts matter).  Any simplex alpha yields a valid weak-duality
    bound, so the bound is sound even far from optima; it is only tight
    near them.
    """
    scale = max(1.0, float(np.max(inst.cut_norms())))
    state = {
        "bound": math.inf if bound_hint is None else float(bound_hint),
        "alpha": None,
    }
    best_primal = -math.inf
    best_u = None
    for start in (x, *extra_starts):
        u0 = linalg.polar_factor(np.asarray(start, dtype=np.complex128))
        res = _refine_from(inst, u0, rounds, scale, state)
        if res[1] > best_primal:
            best_primal, best_u = res[1], res[0]
        if state["bound"] - best_primal <= 1e-11 * scale:
            break
    return KktRefinement(state["bound"], state["alpha"], best_u, best_primal)


def _refine_from(inst: MetricInstance, u, rounds: int, scale: float, state: dict):
    best_primal, _ = inst.objective(u)
    best_u = u

    def lsq_bound(u_pt, active):
        """Least-squares multiplier fit on an active set; returns its alpha."""
        a_stack = inst.A[active]
        k = active.size
        bmats = np.einsum("ij,kjl->kil", u_pt.conj().T, a_stack)
        banti = 0.5 * (bmats - np.transpose(bmats.conj(), (0, 2, 1)))
        bf = banti.reshape(k, -1)
        gram = (bf @ bf.conj().T).real
        ones = np.ones(k)
        try:
            sol = np.linalg.lstsq(gram + 1e-15 * np.eye(k), ones, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        denom = float(ones @ sol)
        if abs(denom) < 1e-300:
            return None
        alpha = np.maximum(sol / denom, 0.0)
        if alpha.sum() <= 0:
            return None
        alpha /= alpha.sum()
        emb = np.zeros(inst.num_cuts)
        emb[active] = alpha
        bound = dual_value(inst, emb)
        if bound < state["bound"]:
            state["bound"], state["alpha"] = bound, emb
        return alpha

    # phase 1: alternate multiplier fits with polar realignment
    tol_active = 0.03 * scale
    for _ in range(rounds):
        vals = inst.cut_values(u)
        vmin = float(vals.min())
        active = np.flatnonzero(vals - vmin <= tol_active)
        if active.size == 0:
            break
        alpha = lsq_bound(u, active)
        if alpha is None:
            break
        m_mat = (alpha @ inst._A_flat[active]).reshape(inst.n, inst.n)
        uu, sv, vh = np.linalg.svd(m_mat)
        rank = int(np.sum(sv > 1e-9 * max(float(sv[0]), 1e-300)))
        if rank == inst.n:
            u = uu @ vh
        else:
            # free rotations on the null block stay aligned with the iterate
            un, vn = uu[:, rank:], vh[rank:, :]
            q = linalg.polar_factor(un.conj().T @ u @ vn.conj().T)
            u = uu[:, :rank] @ vh[:rank, :] + un @ q @ vn
        pu, _ = inst.objective(u)
        if pu > best_primal:
            best_primal, best_u = pu, u
        tol_active = max(0.3 * tol_active, 1e-7)
        if state["bound"] - best_primal <= 1e-12 * max(1.0, abs(state["bound"])):
            return best_u, best_primal

    # phase 2: smoothed ascent along the group removes supergradient zigzag
    u2, p2 = _smoothed_group_ascent(inst, best_u)
    if p2 > best_primal:
        best_primal, best_u = p2, u2
    vals = inst.cut_values(best_u)
    vmin = float(vals.min())
    spreads = np.sort(vals - vmin)

    # phase 3: damped Newton on candidate active-set clusterings
    cuts_sorted = np.argsort(vals - vmin, kind="stable")
    sizes = []
    for i in range(1, min(spreads.size, inst.n * inst.n + 1)):
        lo = max(spreads[i - 1], 1e-12 * scale)
        if spreads[i] > 50.0 * lo and spreads[i] > 1e-8 * scale:
            sizes.append(i)
    if not sizes and spreads.size > 1:
        sizes = [min(spreads.size, inst.n + 2)]
    for size in sizes[:3]:
        if size < 2:
            continue
        sel = np.sort(cuts_sorted[:size])
        a0 = np.full(size, 1.0 / size)
        if state["alpha"] is not None and state["alpha"][sel].sum() > 0.5:
            a0 = state["alpha"][sel] / state["alpha"][sel].sum()
        polished = _kkt_newton(inst, best_u, sel, a0)
        if polished is None:
            continue
        u_n, alpha_n, val_n = polished
        if val_n > best_primal:
            best_primal, best_u = val_n, u_n
        emb = np.zeros(inst.num_cuts)
        emb[sel] = alpha_n
        bound_n = dual_value(inst, emb)
        if bound_n < state["bound"]:
            state["bound"], state["alpha"] = bound_n, emb
        if state["bound"] - best_primal <= 1e-11 * scale:
            break
    # final multiplier fit at the best point found
    vals = inst.cut_values(best_u)
    vmin = float(vals.min())
    for tol in (1e-9, 1e-7, 1e-5):
        active = np.flatnonzero(vals - vmin <= tol * scale)
        if active.size > 1:
            lsq_bound(best_u, active)
    return best_u, best_primal


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    k: int
    v: float
    w: float
    step_type: str           # serious | null | stop
    model_size: int
    inner_iters: int
    time_s: float


def bundle_solve(inst: MetricInstance, params: BundleParams | None = None,
                 trace: list[TraceRow] | None = None) -> MetricResult:
    """Run the trust-region bundle method on a metric instance.

    Starts from the zero matrix with an empty model.  Each iteration adds
    the cut active at the center, maximizes the model in the trust ball,
    and tests for a serious step.  The loop stops when the model gain
    falls below epsilon with the trial point strictly inside the trust
    ball and a certificate confirms the remaining optimality gap, or when
    the certificate alone already shows the gap is below epsilon (which
    covers maximizers pinned to the trust boundary, where the in-ball
    test can never fire).  A certificate check that fails instead feeds
    the model a cut at the certificate's own maximizer and the loop
    continues.  The returned value always carries a certified gap.
    """
    if params is None:
        params = BundleParams()
    if inst.su_constrained:
        raise ValueError("determinant-constrained instances are oracle-only")
    t0 = time.perf_counter()

    if inst.is_degenerate():
        val = float(np.min(inst.b))
        return MetricResult(value=val,
                            optimizer=np.zeros((inst.n, inst.n), np.complex128),
                            dual_bound=val, gap=0.0, iterations=0,
                            wall_time_s=time.perf_counter() - t0,
                            status=STATUS_CONVERGED)

    x = np.zeros((inst.n, inst.n), dtype=np.complex128)
    model = CutModel(inst)
    v, active = inst.objective(x)
    stopped = False
    last_inner: InnerResult | None = None
    best_bound = math.inf
    best_alpha = None
    cert_u = None
    k = 0

    def refresh_certificate():
        """Tighten the upper bound on the optimum; sound at all times."""
        nonlocal best_bound, best_alpha, cert_u
        hint = best_bound if math.isfinite(best_bound) else None
        extra = [_smoothed_ball_ascent(inst, x)]
        if best_alpha is not None:
            extra.append(inst.combine(best_alpha))
        if last_inner is not None:
            extra.append(last_inner.y)
        ref = complementarity_certificate(inst, x, bound_hint=hint,
                                          extra_starts=tuple(extra))
        if ref.bound < best_bound:
            best_bound, best_alpha = ref.bound, ref.alpha
        if ref.u is not None:
            cert_u = ref.u
        if best_bound - v > params.epsilon:
            sub = inst if params.cert_mode == "full" \
                else inst.restricted(model.positions)
            alpha0 = None
            if params.cert_mode == "active-set" and last_inner is not None \
                    and last_inner.weights.shape == (len(model),):
                alpha0 = np.maximum(last_inner.weights, 1e-16)
            res = solve_dual(sub, tol=min(params.cert_tol, 1e-6),
                             max_iter=params.cert_max_iter,
                             alpha0=alpha0, target=v)
            if res.bound < best_bound:
                emb = res.alpha
                if params.cert_mode == "active-set":
                    emb = np.zeros(inst.num_cuts)
                    emb[np.asarray(model.positions, dtype=int)] = res.alpha
                best_bound, best_alpha = res.bound, emb

    def learn_from_certificate() -> bool:
        """Feed the model the cuts active at the certificate's optimizer
        and dual direction; returns whether anything new was learned."""
        fresh = False
        if cert_u is not None:
            _, cut_u = inst.objective(cert_u)
            fresh |= model.add(cut_u)
        if best_alpha is not None:
            w_dir = linalg.polar_factor(inst.combine(best_alpha))
            _, cut_w = inst.objective(w_dir)
            fresh |= model.add(cut_w)
        return fresh

    no_progress = 0
    for k in range(1, params.max_outer + 1):
        t_iter = time.perf_counter()
        model.add(active)
        if params.inner_method == "smoothed":
            inner = smoothed_model_solve(model, x, params.mu, params.inner)
        else:
            cands = (cert_u,) if cert_u is not None else ()
            inner = solve_model_exact(model, x, params.mu, params.inner,
                                      extra_candidates=cands)
        last_inner = inner
        y, w = inner.y, inner.w
        dist = float(np.linalg.norm(y - x))
        gain = w - v

        # the trust subproblem carries a certified bound, so the stop test
        # cannot fire on an under-resolved subproblem
        if inner.bound - v < params.epsilon and dist < params.mu:
            refresh_certificate()
            if best_bound - v <= params.epsilon:
                stopped = True
                if trace is not None:
                    trace.append(TraceRow(k, v, w, "stop", len(model),
                                          inner.iterations,
                                          time.perf_counter() - t_iter))
                break
            # no progress available in the trust ball yet a global gap
            # remains: the model is missing the optimal region, learn it
            if learn_from_certificate():
                no_progress = 0
            else:
                no_progress += 1
            if trace is not None:
                trace.append(TraceRow(k, v, w, "null", len(model),
                                      inner.iterations,
                                      time.perf_counter() - t_iter))
            if no_progress >= 2:
                stopped = best_bound - v <= params.cert_tol
                break
            continue

        phi_y, cut_y = inst.objective(y)
        if gain > 0 and phi_y - v > params.gamma * gain:
            x = y
            v, active = phi_y, cut_y
            step_type = "serious"
            no_progress = 0
        else:
            step_type = "null"
            added = model.add(cut_y)
            if not added:
                # the inner engine could not realize the certified gain
                # with the current model; learn from the certificate
                refresh_certificate()
                if best_bound - v <= params.epsilon:
                    stopped = True
                    if trace is not None:
                        trace.append(TraceRow(k, v, w, "stop", len(model),
                                              inner.iterations,
                                              time.perf_counter() - t_iter))
                    break
                if learn_from_certificate():
                    no_progress = 0
                else:
                    no_progress += 1
                if no_progress >= 2:
                    stopped = best_bound - v <= params.cert_tol
                    if trace is not None:
                        trace.append(TraceRow(k, v, w, "stop", len(model),
                                              inner.iterations,
                                              time.perf_counter() - t_iter))
                    break
        if trace is not None:
            trace.append(TraceRow(k, v, w, step_type, len(model),
                                  inner.iterations, time.perf_counter() - t_iter))

    refresh_certificate()
    gap = best_bound - v

    if stopped:
        status = STATUS_CONVERGED if gap <= params.cert_tol else STATUS_INACCURATE
    else:
        status = STATUS_ITERATION_CAP
    return MetricResult(value=v, optimizer=x, dual_bound=best_bound,
                        gap=gap, iterations=k,
                        wall_time_s=time.perf_counter() - t0, status=status)
