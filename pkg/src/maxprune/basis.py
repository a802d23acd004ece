"""Value-function approximation as a pointwise minimum of affine functions.

Each basis function is w(X) = <P, X> + c with a unitary linear part P;
a BasisSet is an ordered collection of them and approximates a value
function by its pointwise min.  Objects are immutable after construction
and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import constants, linalg


@dataclass(frozen=True)
class AffineBasis:
    """One basis function X -> <P, X> + c, P unitary."""

    P: np.ndarray
    c: float
    unitary_tol: float = field(default=constants.UNITARY_TOL, repr=False, compare=False)

    def __post_init__(self):
        p = linalg.as_matrix(self.P)
        linalg.require_square(p)
        linalg.require_unitary(p, self.unitary_tol)
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "P", p)
        object.__setattr__(self, "c", float(self.c))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def eval(self, x) -> float:
        return linalg.real_inner(self.P, x) + self.c


@dataclass(eq=False)
class BasisSet:
    """Ordered, nonempty collection of same-dimension affine bases.

    labels optionally record provenance (e.g. propagation path strings);
    they are carried along and ignored by all numerics.
    """

    n: int
    bases: list[AffineBasis]
    labels: list[str] | None = None

    def __post_init__(self):
        if not self.bases:
            raise ValueError("a basis set must be nonempty")
        for b in self.bases:
            if b.n != self.n:
                raise ValueError(f"basis dimension {b.n} != set dimension {self.n}")
        if self.labels is not None and len(self.labels) != len(self.bases):
            raise ValueError("labels length must match basis count")

    def __len__(self) -> int:
        return len(self.bases)

    @cached_property
    def p_stack(self) -> np.ndarray:
        """(m, n, n) stacked linear parts, for vectorized evaluation."""
        out = np.stack([b.P for b in self.bases])
        out.setflags(write=False)
        return out

    @cached_property
    def c_vec(self) -> np.ndarray:
        out = np.array([b.c for b in self.bases])
        out.setflags(write=False)
        return out

    def values_at(self, x) -> np.ndarray:
        """All basis values at one point, shape (m,)."""
        x = np.asarray(x, dtype=np.complex128)
        if x.shape != (self.n, self.n):
            raise ValueError(f"point shape {x.shape} != ({self.n}, {self.n})")
        return np.einsum("mjk,jk->m", self.p_stack.conj(), x).real + self.c_vec

    def values_at_batch(self, xs) -> np.ndarray:
        """Basis values at a batch of points (p, n, n) -> (m, p)."""
        xs = np.asarray(xs, dtype=np.complex128)
        return np.einsum("mjk,pjk->mp", self.p_stack.conj(), xs).real \
            + self.c_vec[:, None]

    def eval_min(self, x) -> tuple[float, int]:
        """Pointwise min and its argmin index (lowest index on ties)."""
        vals = self.values_at(x)
        idx = int(np.argmin(vals))  # np.argmin returns the first minimiser
        return float(vals[idx]), idx

    def min_at_batch(self, xs) -> np.ndarray:
        return self.values_at_batch(xs).min(axis=0)

    def subset(self, indices) -> "BasisSet":
        indices = list(indices)
        if not indices:
            raise ValueError("cannot build an empty subset")
        labels = None
        if self.labels is not None:
            labels = [self.labels[i] for i in indices]
        return BasisSet(self.n, [self.bases[i] for i in indices], labels)

    def label(self, i: int) -> str:
        return self.labels[i] if self.labels is not None else ""


# ---------------------------------------------------------------------------
# file format: "n m" header, then per basis the matrix text block and "c <val>"
# ---------------------------------------------------------------------------

def format_basis_set(s: BasisSet) -> str:
    parts = [f"{s.n} {len(s)}"]
    for b in s.bases:
        parts.append(linalg.format_matrix(b.P).rstrip("\n"))
        parts.append(f"c {b.c:.17g}")
    return "\n".join(parts) + "\n"


def parse_basis_set(text: str) -> BasisSet:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty basis-set text")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"bad basis-set header: {lines[0]!r}")
    n, m = int(header[0]), int(header[1])
    if n <= 0 or m <= 0:
        raise ValueError("basis-set header values must be positive")
    bases = []
    pos = 1
    for _ in range(m):
        block = lines[pos:pos + n + 1]
        if len(block) != n + 1:
            raise ValueError("truncated basis-set file")
        p = linalg.parse_matrix("\n".join(block))
        pos += n + 1
        if pos >= len(lines) or not lines[pos].startswith("c "):
            raise ValueError("missing offset line after matrix block")
        c = float(lines[pos].split(maxsplit=1)[1])
        pos += 1
        bases.append(AffineBasis(p, c))
    if pos != len(lines):
        raise ValueError("trailing content after last basis")
    return BasisSet(n, bases)


def write_basis_set(s: BasisSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_basis_set(s))


def read_basis_set(path) -> BasisSet:
    with open(path) as fh:
        return parse_basis_set(fh.read())
