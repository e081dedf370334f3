"""2D position estimation from range measurements.

Minimizes sum_i (||p - a_i|| - d_i)^2 over the tag position p with a damped
Gauss-Newton iteration, seeded by a linearization that differences squared
range equations against the first anchor. The residual is the unsquared
range error, not the squared-range form.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class ConditionFlag(enum.Enum):
    OK = "ok"
    NEAR_COLLINEAR = "near_collinear"
    MAX_ITERATIONS = "max_iterations"


class SolveError(Exception):
    pass


class InitError(Exception):
    """Raised when the linear initializer's normal system is rank deficient
    (collinear anchors); carries the best solution along the anchor line."""

    def __init__(self, message: str, line_solution: np.ndarray | None = None):
        super().__init__(message)
        self.line_solution = line_solution


@dataclass(frozen=True)
class RangeSet:
    """Anchor positions (N x 2) paired with measured distances (N)."""

    anchors: np.ndarray
    distances: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.anchors, dtype=float)
        d = np.asarray(self.distances, dtype=float)
        if a.ndim != 2 or a.shape[1] != 2 or d.shape != (a.shape[0],):
            raise ValueError("anchors must be (N,2), distances (N,)")
        if not np.all(np.isfinite(a)) or not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("anchors and distances must be finite, distances ≥ 0")
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "distances", d)

    @classmethod
    def from_pairs(cls, pairs: list[tuple[tuple[float, float], float]]) -> "RangeSet":
        anchors = np.array([p[0] for p in pairs], dtype=float)
        dists = np.array([p[1] for p in pairs], dtype=float)
        return cls(anchors, dists)

    def __len__(self) -> int:
        return int(self.anchors.shape[0])


@dataclass(frozen=True)
class Fix2D:
    x: float
    y: float
    rms_residual: float
    iterations: int
    condition_flag: ConditionFlag

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class SolverParams:
    lambda_init: float = 1e-3
    lambda_down: float = 0.3
    lambda_up: float = 10.0
    step_tol_m: float = 1e-6
    max_iterations: int = 50
    collinear_sv_ratio: float = 1e-3


DEFAULT_PARAMS = SolverParams()


def linear_init(rs: RangeSet) -> np.ndarray:
    """Closed-form start: 2(a_i - a_1) . p = (|a_i|^2 - |a_1|^2) - (d_i^2 - d_1^2)."""
    if len(rs) < 3:
        raise SolveError(f"need ≥3 ranges, got {len(rs)}")
    a = rs.anchors
    d = rs.distances
    A = 2.0 * (a[1:] - a[0])
    b = (np.sum(a[1:] ** 2, axis=1) - np.sum(a[0] ** 2)) - (d[1:] ** 2 - d[0] ** 2)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] < 1e-9 * sv[0]:
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        raise InitError("anchors are collinear: position underdetermined", line_solution=sol)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    return sol


def _residuals(p: np.ndarray, rs: RangeSet) -> np.ndarray:
    return np.hypot(*(p - rs.anchors).T) - rs.distances


def trilaterate(
    rs: RangeSet,
    init: np.ndarray | tuple[float, float] | None = None,
    params: SolverParams = DEFAULT_PARAMS,
) -> Fix2D:
    """Damped Gauss-Newton fit of the range cost. Deterministic: identical
    inputs yield bit-identical fixes."""
    n = len(rs)
    if n < 3:
        raise SolveError(f"need ≥3 ranges, got {n}")

    if init is not None:
        p = np.array(init, dtype=float)
    else:
        try:
            p = linear_init(rs)
        except InitError as e:
            p = e.line_solution if e.line_solution is not None else rs.anchors.mean(axis=0)

    lam = params.lambda_init
    r = _residuals(p, rs)
    cost = float(r @ r)
    flag = ConditionFlag.OK
    iterations = 0
    converged = False

    for iterations in range(1, params.max_iterations + 1):
        delta = p - rs.anchors
        dist = np.hypot(delta[:, 0], delta[:, 1])
        dist = np.where(dist < 1e-12, 1e-12, dist)  # guard anchor-coincident point
        J = delta / dist[:, None]

        sv = np.linalg.svd(J, compute_uv=False)
        if sv[-1] < params.collinear_sv_ratio * sv[0]:
            flag = ConditionFlag.NEAR_COLLINEAR

        g = J.T @ r
        H = J.T @ J
        Hd = H + lam * np.diag(np.diag(H))
        try:
            step = np.linalg.solve(Hd, -g)
        except np.linalg.LinAlgError:
            lam *= params.lambda_up
            continue
        candidate = p + step
        rc = _residuals(candidate, rs)
        cc = float(rc @ rc)
        if cc < cost:
            p, r, cost = candidate, rc, cc
            lam *= params.lambda_down
            if float(np.linalg.norm(step)) < params.step_tol_m:
                converged = True
                break
        else:
            lam *= params.lambda_up

    if not converged and iterations >= params.max_iterations and flag is ConditionFlag.OK:
        flag = ConditionFlag.MAX_ITERATIONS

    return Fix2D(
        x=float(p[0]),
        y=float(p[1]),
        rms_residual=float(np.sqrt(cost / n)),
        iterations=iterations,
        condition_flag=flag,
    )


@dataclass(frozen=True)
class ResidualStats:
    per_anchor: tuple[float, ...]
    mean: float
    max_abs: float


def residual_stats(fix: Fix2D, rs: RangeSet) -> ResidualStats:
    r = _residuals(fix.position, rs)
    return ResidualStats(
        per_anchor=tuple(float(v) for v in r),
        mean=float(np.mean(r)),
        max_abs=float(np.max(np.abs(r))),
    )
