"""Dense complex matrix kernel.

M_n(C) is treated as a real Hilbert space with inner product
<X, Y> = Re(trace(X* Y)).  Everything downstream (basis evaluation,
metric solvers, projections) is built on the operations here.

Matrix factorizations are delegated to LAPACK through numpy
(Golub-Kahan bidiagonalization SVD, Hermitian eigendecomposition);
they are deterministic for a fixed input, which the solvers rely on.
All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import constants


class NumericalError(RuntimeError):
    """A factorization or iteration failed to converge."""


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------

def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D complex128 array and reject non-finite entries."""
    a = np.asarray(x, dtype=np.complex128)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a.real)) or not np.all(np.isfinite(a.imag)):
        raise ValueError("matrix entries must be finite")
    return a


def require_square(x: np.ndarray) -> int:
    if x.shape[0] != x.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {x.shape}")
    return x.shape[0]


def require_same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def hermitian_defect(x: np.ndarray) -> float:
    return float(np.linalg.norm(x - x.conj().T))


def unitary_defect(x: np.ndarray) -> float:
    n = x.shape[0]
    return float(np.linalg.norm(x @ x.conj().T - np.eye(n)))


def require_hermitian(x: np.ndarray, tol: float = constants.HERMITIAN_TOL) -> None:
    d = hermitian_defect(x)
    if d > tol:
        raise ValueError(f"matrix is not Hermitian within {tol:g} (defect {d:.3e})")


def require_unitary(x: np.ndarray, tol: float = constants.UNITARY_TOL) -> None:
    d = unitary_defect(x)
    if d > tol:
        raise ValueError(f"matrix is not unitary within {tol:g} (defect {d:.3e})")


# ---------------------------------------------------------------------------
# inner product and norms
# ---------------------------------------------------------------------------

def real_inner(x, y) -> float:
    """Real inner product Re(trace(X* Y)) on M_n(C)."""
    x = np.asarray(x, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    require_same_shape(x, y)
    return float(np.real(np.sum(x.conj() * y)))


def frobenius_norm(x) -> float:
    return float(np.linalg.norm(x))


def spectral_norm(x) -> float:
    return float(np.linalg.norm(x, 2))


def nuclear_norm(x) -> float:
    """Sum of singular values; the support function of the spectral unit ball."""
    x = as_matrix(x)
    require_square(x)
    try:
        s = np.linalg.svd(x, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed on {x.shape} input: {exc}") from exc
    return float(np.sum(s))


# ---------------------------------------------------------------------------
# factorizations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SvdFactors:
    """SVD X = left @ diag(singular_values) @ right with unitary factors."""

    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular_values) @ self.right


def svd(x, max_dim: int = constants.MAX_SVD_DIM) -> SvdFactors:
    """Full SVD of a small square complex matrix.

    Singular values are returned in nonincreasing order.  Raises
    NumericalError with the achieved residual if LAPACK fails to converge.
    """
    x = as_matrix(x)
    n = require_square(x)
    if n > max_dim:
        raise ValueError(f"matrix dimension {n} exceeds the configured max {max_dim}")
    try:
        u, s, vh = np.linalg.svd(x)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for {n}x{n} input: {exc}") from exc
    factors = SvdFactors(u, s, vh)
    residual = float(np.linalg.norm(factors.reconstruct() - x))
    if not np.isfinite(residual):
        raise NumericalError(f"SVD produced non-finite factors (residual {residual})")
    return factors


def polar_factor(x) -> np.ndarray:
    """Nearest-unitary factor U @ Vh from the SVD of x.

    Maximizes <W, x> over the spectral unit ball, attaining nuclear_norm(x).
    """
    f = svd(x)
    return f.left @ f.right


def unitary_propagator(h, t: float) -> np.ndarray:
    """exp(i*t*H) for Hermitian H, via eigendecomposition.

    The eigendecomposition route keeps the result unitary to roundoff,
    unlike scaling-and-squaring on i*t*H.
    """
    h = as_matrix(h)
    require_square(h)
    require_hermitian(h)
    w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    return (v * np.exp(1j * t * w)) @ v.conj().T


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def project_spectral_ball(x) -> np.ndarray:
    """Frobenius-nearest matrix with spectral norm <= 1 (singular values clipped)."""
    x = as_matrix(x)
    require_square(x)
    f = svd(x)
    if f.singular_values.size and f.singular_values[0] <= 1.0:
        return x
    clipped = np.minimum(f.singular_values, 1.0)
    return (f.left * clipped) @ f.right


def project_frobenius_ball(x, center, mu: float) -> np.ndarray:
    """Projection onto {Y : ||Y - center||_F <= mu} (radial scaling)."""
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    x = np.asarray(x, dtype=np.complex128)
    center = np.asarray(center, dtype=np.complex128)
    require_same_shape(x, center)
    d = x - center
    nd = float(np.linalg.norm(d))
    if nd <= mu:
        return x
    return center + (mu / nd) * d


@dataclass(frozen=True)
class DykstraResult:
    point: np.ndarray
    converged: bool
    spectral_excess: float
    frobenius_excess: float
    sweeps: int


def dykstra_intersect(x, center, mu: float,
                      tol: float = constants.DYKSTRA_TOL,
                      max_sweeps: int = constants.DYKSTRA_MAX_SWEEPS) -> DykstraResult:
    """Project x onto {||Y||_2 <= 1} ∩ {||Y - center||_F <= mu}.

    Requires center inside the spectral ball so the intersection is nonempty.
    When a single projection already lands in the other set it is returned
    directly (that point is the exact intersection projection); otherwise
    Dykstra's alternating scheme with correction terms runs until the iterate
    is within tol of both sets.  If the sweep cap is hit the best iterate is
    returned flagged inexact, with the achieved excesses.
    """
    if tol <= 0 or mu <= 0:
        raise ValueError("tol and mu must be positive")
    x = as_matrix(x)
    require_square(x)
    center = as_matrix(center)
    require_same_shape(x, center)
    if spectral_norm(center) > 1.0 + tol:
        raise ValueError("center must lie in the spectral unit ball")

    def excesses(y):
        return (max(0.0, spectral_norm(y) - 1.0),
                max(0.0, frobenius_norm(y - center) - mu))

    e_spec, e_frob = excesses(x)
    if e_spec <= tol and e_frob <= tol:
        return DykstraResult(x, True, e_spec, e_frob, 0)

    # single-projection shortcuts are exact when they land in the other set
    pf = project_frobenius_ball(x, center, mu)
    if spectral_norm(pf) <= 1.0:
        return DykstraResult(pf, True, 0.0, 0.0, 0)
    ps = project_spectral_ball(x)
    if frobenius_norm(ps - center) <= mu:
        return DykstraResult(ps, True, 0.0, 0.0, 0)

    y = x.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    best = y
    best_ex = (np.inf, np.inf)
    for sweep in range(1, max_sweeps + 1):
        t = project_spectral_ball(y + p)
        p = y + p - t
        y = project_frobenius_ball(t + q, center, mu)
        q = t + q - y
        e_spec, e_frob = excesses(y)
        if e_spec + e_frob < sum(best_ex):
            best, best_ex = y, (e_spec, e_frob)
        if e_spec <= tol and e_frob <= tol:
            return DykstraResult(y, True, e_spec, e_frob, sweep)
    return DykstraResult(best, False, best_ex[0], best_ex[1], max_sweeps)


# ---------------------------------------------------------------------------
# text format:  "rows cols" header, then rows of re:im pairs
# ---------------------------------------------------------------------------

def format_matrix(x) -> str:
    """Serialize with 17 significant digits so round-trips are bit-faithful."""
    x = as_matrix(x)
    lines = [f"{x.shape[0]} {x.shape[1]}"]
    for row in x:
        lines.append(" ".join(f"{v.real:.17g}:{v.imag:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty matrix text")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"bad matrix header: {lines[0]!r}")
    rows, cols = int(header[0]), int(header[1])
    if rows <= 0 or cols <= 0:
        raise ValueError("matrix dimensions must be positive")
    if len(lines) != rows + 1:
        raise ValueError(f"expected {rows} rows, found {len(lines) - 1}")
    out = np.empty((rows, cols), dtype=np.complex128)
    for i, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) != cols:
            raise ValueError(f"row {i}: expected {cols} entries, found {len(parts)}")
        for j, tok in enumerate(parts):
            re_s, _, im_s = tok.partition(":")
            if not _:
                raise ValueError(f"row {i} entry {j}: missing ':' in {tok!r}")
            out[i, j] = complex(float(re_s), float(im_s))
    return as_matrix(out)


def write_matrix(x, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_matrix(x))


def read_matrix(path) -> np.ndarray:
    with open(path) as fh:
        return parse_matrix(fh.read())
