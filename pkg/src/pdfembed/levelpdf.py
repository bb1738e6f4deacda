"""Turn an integer replication level into a discrete supervision distribution.

Three peaked families are supported over the grid ``x_i = i / N``:

* gaussian     ``A * exp(-(x - mu)^2 / (2 sigma^2))``
* linear       ``A - beta * |x - mu|``
* exponential  ``A * lam * exp(-lam * |x - mu|)``

``A`` is chosen by the caller; the spread parameter is solved so that the
values sum to one. Nothing is clipped or renormalised: if a family cannot
satisfy the constraints for the requested amplitude an exception is raised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DegenerateSlope,
    LevelOutOfRange,
    NonnegativityViolated,
    ShapeViolation,
    Unsolvable,
)

FAMILIES = ("gaussian", "linear", "exponential")
_ALIASES = {"gauss": "gaussian", "exp": "exponential", "lin": "linear"}

DEFAULT_AMPLITUDE = {"gaussian": 0.5, "linear": 0.3, "exponential": 1.0}

RESIDUAL_TOL = 1e-10
MAX_ITER = 200
EXP_BRACKET = (1e-6, 1e3)
SHAPE_TOL = 1e-12


def canonical_family(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in FAMILIES:
        raise ValueError(f"unknown pdf family {kind!r}; expected one of {FAMILIES}")
    return kind


@dataclass(frozen=True)
class LevelGrid:
    """The N+1 normalised levels ``0, 1/N, ..., 1``."""

    N: int = 5
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"max level must be a positive integer, got {self.N!r}")
        object.__setattr__(self, "N", int(self.N))
        pts = np.arange(self.N + 1, dtype=np.float64) / self.N
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.N + 1


@dataclass(frozen=True)
class PdfFamily:
    kind: str
    amplitude: float

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_family(self.kind))
        if not (self.amplitude > 0 and math.isfinite(self.amplitude)):
            raise ValueError(f"amplitude must be positive and finite, got {self.amplitude!r}")


@dataclass(frozen=True)
class SupervisionPdf:
    values: np.ndarray
    mu_index: int
    solved_param: float
    family: PdfFamily

    def to_dict(self) -> dict:
        return {
            "family": self.family.kind,
            "A": self.family.amplitude,
            "level": self.mu_index,
            "solved_param": self.solved_param,
            "values": [float(v) for v in self.values],
        }


def normalize_level(s_l: int, grid: LevelGrid) -> float:
    if int(s_l) != s_l or not 0 <= s_l <= grid.N:
        raise LevelOutOfRange(f"level {s_l!r} outside [0, {grid.N}]")
    return int(s_l) / grid.N


def _mu_index(p_l: float, grid: LevelGrid) -> int:
    idx = int(round(p_l * grid.N))
    if not 0 <= idx <= grid.N or abs(grid.points[idx] - p_l) > 1e-12:
        raise LevelOutOfRange(f"normalized level {p_l!r} is not a grid point of N={grid.N}")
    return idx


def _distances(p_l: float, grid: LevelGrid):
    idx = _mu_index(p_l, grid)
    # Use the grid point itself as the centre so |x_mu - mu| is exactly 0.
    mu = grid.points[idx]
    return idx, np.abs(grid.points - mu)


def bisect_root(f: Callable[[float], float], lo: float, hi: float,
                tol: float = RESIDUAL_TOL, max_iter: int = MAX_ITER) -> float:
    """Bisection for an increasing residual with ``f(lo) < 0 < f(hi)``.

    Stops once ``|f(mid)| <= tol``; raises ``Unsolvable`` if the iteration cap
    is hit first.
    """
    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo < 0 < f_hi):
        raise Unsolvable(f"no sign change on [{lo:g}, {hi:g}] (f={f_lo:.3g}, {f_hi:.3g})")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if abs(f_mid) <= tol:
            return mid
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    raise Unsolvable(f"bisection did not reach |residual| <= {tol:g} in {max_iter} iterations")


def _check_peak(values: np.ndarray, idx: int, expected: float) -> None:
    # g(mu) = A exactly because the centre lies on the grid; assert it.
    if values[idx] != expected:
        raise AssertionError(f"peak value {values[idx]!r} != {expected!r}")


def linear_amplitude_range(p_l: float, grid: LevelGrid) -> tuple[float, float]:
    """Closed interval of amplitudes for which the linear family is a valid pdf."""
    _, d = _distances(p_l, grid)
    s, d_max, n = d.sum(), d.max(), grid.size
    lo = 1.0 / n
    denom = n * d_max - s
    hi = d_max / denom if denom > 0 else math.inf
    return lo, hi


def solve_linear(p_l: float, A: float, grid: LevelGrid, numeric: bool = False) -> SupervisionPdf:
    """Linear pdf. ``beta`` comes from the closed form, or by bisection when
    ``numeric`` is set (used as a cross-check)."""
    family = PdfFamily("linear", A)
    idx, d = _distances(p_l, grid)
    n = grid.size
    s = d.sum()
    if s == 0:
        raise DegenerateSlope("sum of |x - mu| is zero")
    if A * n < 1 - 1e-15:
        raise Unsolvable(f"linear amplitude {A} < 1/(N+1); the peak would not sit at the level")
    if numeric:
        if A * n - 1 <= RESIDUAL_TOL:
            beta = 0.0
        else:
            # residual decreases in beta; negate for the increasing-root helper
            beta = bisect_root(lambda b: -(np.sum(A - b * d) - 1.0), 0.0, 2 * A * n / s)
    else:
        beta = max((n * A - 1.0) / s, 0.0)
    values = A - beta * d
    if np.any(values < 0):
        bad = int(np.argmin(values))
        raise NonnegativityViolated(
            f"linear amplitude {A} too large for level {idx}: value[{bad}] = {values[bad]:.3g}")
    _check_peak(values, idx, A)
    return SupervisionPdf(values, idx, float(beta), family)


def solve_gaussian(p_l: float, A: float, grid: LevelGrid) -> SupervisionPdf:
    family = PdfFamily("gaussian", A)
    idx, d = _distances(p_l, grid)
    n = grid.size
    if not (1.0 / n < A < 1.0):
        raise Unsolvable(f"gaussian amplitude must lie in (1/{n}, 1), got {A}")
    d2 = d * d

    def residual(sigma):
        return float(np.sum(A * np.exp(-d2 / (2.0 * sigma * sigma)))) - 1.0

    lo, hi = 1e-3 / grid.N, 1.0
    while residual(hi) <= 0:
        hi *= 2.0
        if hi > 1e12:
            raise Unsolvable(f"gaussian amplitude {A} too close to 1/(N+1)")
    sigma = bisect_root(residual, lo, hi)
    values = A * np.exp(-d2 / (2.0 * sigma * sigma))
    _check_peak(values, idx, A)
    return SupervisionPdf(values, idx, float(sigma), family)


def solve_exponential(p_l: float, A: float, grid: LevelGrid) -> SupervisionPdf:
    family = PdfFamily("exponential", A)
    idx, d = _distances(p_l, grid)

    def residual(lam):
        return float(np.sum(A * lam * np.exp(-lam * d))) - 1.0

    lam = bisect_root(residual, *EXP_BRACKET)
    values = A * lam * np.exp(-lam * d)
    _check_peak(values, idx, A * lam)
    return SupervisionPdf(values, idx, float(lam), family)


_SOLVERS = {
    "gaussian": solve_gaussian,
    "linear": solve_linear,
    "exponential": solve_exponential,
}


def solve(family: PdfFamily | str, level: int, grid: LevelGrid,
          amplitude: float | None = None) -> SupervisionPdf:
    """Supervision pdf for an integer ``level``."""
    if not isinstance(family, PdfFamily):
        kind = canonical_family(family)
        family = PdfFamily(kind, DEFAULT_AMPLITUDE[kind] if amplitude is None else amplitude)
    p_l = normalize_level(level, grid)
    return _SOLVERS[family.kind](p_l, family.amplitude, grid)


def target_table(family: PdfFamily, grid: LevelGrid) -> np.ndarray:
    """``(N+1, N+1)`` array whose row ``s`` is the pdf for level ``s``."""
    return np.stack([solve(family, s, grid).values for s in range(grid.size)])


@dataclass
class ShapeReport:
    family: str
    second_diff: dict[int, float]
    checked: list[int]
    ok: bool = True

    def to_dict(self) -> dict:
        return {"family": self.family, "ok": self.ok, "checked": self.checked,
                "second_diff": {str(k): v for k, v in self.second_diff.items()}}


def second_differences(values: np.ndarray) -> np.ndarray:
    """``v[i-1] - 2 v[i] + v[i+1]`` for interior ``i``; entry ``k`` is index ``k+1``."""
    v = np.asarray(values, dtype=np.float64)
    return v[:-2] - 2.0 * v[1:-1] + v[2:]


def validate_shape(pdf: SupervisionPdf, family: PdfFamily | None = None,
                   grid: LevelGrid | None = None, tol: float = SHAPE_TOL) -> ShapeReport:
    """Check curvature on the grid: concave near the centre (gaussian, within one
    sigma), flat (linear) or convex (exponential) on each side of the centre."""
    family = family or pdf.family
    grid = grid or LevelGrid(len(pdf.values) - 1)
    if family.kind != pdf.family.kind:
        raise ValueError(f"pdf was produced by {pdf.family.kind}, not {family.kind}")
    dd = second_differences(pdf.values)
    mu = grid.points[pdf.mu_index]
    interior = range(1, grid.N)
    if family.kind == "gaussian":
        sigma = pdf.solved_param
        checked = [i for i in interior if abs(grid.points[i] - mu) <= sigma]

        def bad(x):
            return x > tol
    elif family.kind == "linear":
        checked = [i for i in interior if i != pdf.mu_index]

        def bad(x):
            return abs(x) > tol
    else:
        checked = [i for i in interior if i != pdf.mu_index]

        def bad(x):
            return x < -tol

    report = ShapeReport(family.kind, {i: float(dd[i - 1]) for i in checked}, checked)
    for i in checked:
        if bad(dd[i - 1]):
            report.ok = False
            raise ShapeViolation(
                f"{family.kind} second difference at index {i} is {dd[i - 1]:.3e}", i)
    return report
