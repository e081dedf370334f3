"""Anchor self-localization from pairwise distance measurements.

Distances alone determine geometry only up to rigid motion and reflection,
so three designated anchors fix the gauge: the origin anchor sits at (0,0),
the x-axis anchor on the positive x axis, and the orientation anchor in the
upper half plane. Remaining anchors are placed incrementally by
trilateration in ascending id order, then a joint least-squares pass over
every measured pair refines all placed anchors with the gauge held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import solver


class FrameError(Exception):
    pass


class DistanceMatrix:
    """Pairwise anchor distances with missing entries. Directed measurements
    are stored as offered; the symmetric view averages the two directions
    when both exist. The diagonal is implicitly zero and never stored."""

    def __init__(self, ids: Iterable[int]):
        self.ids: list[int] = sorted(set(ids))
        self._directed: dict[tuple[int, int], float] = {}

    @property
    def n(self) -> int:
        return len(self.ids)

    def add(self, src: int, dst: int, distance_m: float) -> None:
        if src == dst:
            return
        if not math.isfinite(distance_m) or distance_m < 0:
            raise ValueError(f"invalid distance {distance_m!r}")
        self._directed[(src, dst)] = distance_m

    def get(self, a: int, b: int) -> float | None:
        fwd = self._directed.get((a, b))
        rev = self._directed.get((b, a))
        if fwd is not None and rev is not None:
            return 0.5 * (fwd + rev)
        if fwd is not None:
            return fwd
        return rev

    def symmetric(self) -> dict[tuple[int, int], float]:
        out: dict[tuple[int, int], float] = {}
        for i, a in enumerate(self.ids):
            for b in self.ids[i + 1 :]:
                d = self.get(a, b)
                if d is not None:
                    out[(a, b)] = d
        return out

    @classmethod
    def from_positions(cls, positions: dict[int, tuple[float, float]]) -> "DistanceMatrix":
        dm = cls(positions.keys())
        ids = dm.ids
        for i, a in enumerate(ids):
            for b in ids[i + 1 :]:
                dm.add(a, b, math.dist(positions[a], positions[b]))
        return dm


@dataclass(frozen=True)
class AnchorFrame:
    origin_id: int
    x_axis_id: int
    orientation_id: int
    positions: dict[int, tuple[float, float]]
    rms_residual: float = 0.0
    unplaced: tuple[int, ...] = ()
    degenerate: bool = False
    refinement_warning: bool = False

    def position_array(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self.positions[i] for i in ids], dtype=float)


def fix_frame(
    dm: DistanceMatrix,
    origin_id: int,
    x_axis_id: int,
    orientation_id: int,
    slack_m: float = 0.0,
) -> AnchorFrame:
    """Place the three gauge anchors from their pairwise distances.

    The orientation anchor lands at x = (d01^2 + d02^2 - d12^2) / (2 d01),
    y = +sqrt(d02^2 - x^2). A slightly negative discriminant within slack_m
    is treated as collinear (y = 0, flagged degenerate); beyond the slack
    the triangle is inconsistent and a FrameError is raised.
    """
    d01 = dm.get(origin_id, x_axis_id)
    d02 = dm.get(origin_id, orientation_id)
    d12 = dm.get(x_axis_id, orientation_id)
    if d01 is None or d02 is None or d12 is None:
        missing = [
            name
            for name, v in (
                (f"{origin_id}-{x_axis_id}", d01),
                (f"{origin_id}-{orientation_id}", d02),
                (f"{x_axis_id}-{orientation_id}", d12),
            )
            if v is None
        ]
        raise FrameError(f"missing pairwise distances: {', '.join(missing)}")
    if d01 <= 0:
        raise FrameError("origin and x-axis anchors are coincident")

    x2 = (d01**2 + d02**2 - d12**2) / (2 * d01)
    disc = d02**2 - x2**2
    degenerate = False
    if disc < 0:
        if math.sqrt(-disc) > max(slack_m, 1e-9):
            raise FrameError(
                f"inconsistent triangle: d01={d01}, d02={d02}, d12={d12}"
            )
        disc = 0.0
    y2 = math.sqrt(disc)
    if y2 == 0.0:
        degenerate = True

    positions = {
        origin_id: (0.0, 0.0),
        x_axis_id: (d01, 0.0),
        orientation_id: (x2, y2),
    }
    return AnchorFrame(
        origin_id=origin_id,
        x_axis_id=x_axis_id,
        orientation_id=orientation_id,
        positions=positions,
        degenerate=degenerate,
    )


def estimate_all(dm: DistanceMatrix, frame: AnchorFrame) -> AnchorFrame:
    """Place every anchor in the frame's coordinate system.

    Anchors beyond the gauge three are appended in ascending id order, each
    trilaterated against the anchors already placed; any anchor with fewer
    than three usable distances stays unplaced. A joint damped Gauss-Newton
    pass over all measured pairs then refines the placed anchors with the
    gauge constraints pinned; if the refinement fails to improve the fit,
    the incremental solution is returned with a warning flag.
    """
    sym = dm.symmetric()
    positions = dict(frame.positions)
    unplaced: list[int] = []

    for aid in dm.ids:
        if aid in positions:
            continue
        pairs = []
        for placed_id, ppos in positions.items():
            key = (min(aid, placed_id), max(aid, placed_id))
            if key in sym:
                pairs.append((ppos, sym[key]))
        if len(pairs) < 3:
            unplaced.append(aid)
            continue
        rs = solver.RangeSet.from_pairs(pairs)
        fix = solver.trilaterate(rs)
        positions[aid] = (fix.x, fix.y)

    refined, rms, warning = _refine(sym, positions, frame)
    refined = _normalize_gauge(refined, frame)
    return AnchorFrame(
        origin_id=frame.origin_id,
        x_axis_id=frame.x_axis_id,
        orientation_id=frame.orientation_id,
        positions=refined,
        rms_residual=rms,
        unplaced=tuple(unplaced),
        degenerate=frame.degenerate,
        refinement_warning=warning,
    )


def _refine(
    sym: dict[tuple[int, int], float],
    positions: dict[int, tuple[float, float]],
    frame: AnchorFrame,
) -> tuple[dict[int, tuple[float, float]], float, bool]:
    """Joint least squares over measured pairs among placed anchors. The
    origin stays at (0,0) and the x-axis anchor keeps y=0 (its x is free)."""
    placed = sorted(positions)
    pairs = [(a, b, d) for (a, b), d in sorted(sym.items()) if a in positions and b in positions]
    if not pairs:
        return positions, 0.0, False

    # Parameter layout: x of the x-axis anchor, then (x, y) per other anchor.
    index: dict[int, tuple[int | None, int | None]] = {}
    k = 0
    for aid in placed:
        if aid == frame.origin_id:
            index[aid] = (None, None)
        elif aid == frame.x_axis_id:
            index[aid] = (k, None)
            k += 1
        else:
            index[aid] = (k, k + 1)
            k += 2
    n_params = k

    coords = {aid: np.array(positions[aid], dtype=float) for aid in placed}

    def pack() -> np.ndarray:
        v = np.zeros(n_params)
        for aid, (ix, iy) in index.items():
            if ix is not None:
                v[ix] = coords[aid][0]
            if iy is not None:
                v[iy] = coords[aid][1]
        return v

    def unpack(v: np.ndarray) -> dict[int, np.ndarray]:
        out = {}
        for aid, (ix, iy) in index.items():
            x = v[ix] if ix is not None else (0.0 if aid == frame.origin_id else coords[aid][0])
            y = v[iy] if iy is not None else 0.0
            if aid == frame.origin_id:
                x, y = 0.0, 0.0
            out[aid] = np.array([x, y])
        return out

    def residuals(c: dict[int, np.ndarray]) -> np.ndarray:
        return np.array([np.linalg.norm(c[a] - c[b]) - d for a, b, d in pairs])

    v = pack()
    c = unpack(v)
    r = residuals(c)
    cost = float(r @ r)
    initial_cost = cost
    lam = 1e-3
    for _ in range(100):
        J = np.zeros((len(pairs), n_params))
        for row, (a, b, _) in enumerate(pairs):
            diff = c[a] - c[b]
            norm = float(np.linalg.norm(diff))
            if norm < 1e-12:
                continue
            u = diff / norm
            ixa, iya = index[a]
            ixb, iyb = index[b]
            if ixa is not None:
                J[row, ixa] = u[0]
            if iya is not None:
                J[row, iya] = u[1]
            if ixb is not None:
                J[row, ixb] = -u[0]
            if iyb is not None:
                J[row, iyb] = -u[1]
        g = J.T @ r
        H = J.T @ J
        Hd = H + lam * np.diag(np.diag(H).clip(min=1e-12))
        try:
            step = np.linalg.solve(Hd, -g)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        vc = v + step
        cc_coords = unpack(vc)
        rc = residuals(cc_coords)
        cc = float(rc @ rc)
        if cc < cost:
            v, c, r, cost = vc, cc_coords, rc, cc
            lam *= 0.3
            if float(np.linalg.norm(step)) < 1e-9:
                break
        else:
            lam *= 10

    if not math.isfinite(cost) or cost > initial_cost:
        r0 = residuals({aid: np.array(positions[aid]) for aid in placed})
        return positions, float(np.sqrt(np.mean(r0**2))), True
    out = {aid: (float(p[0]), float(p[1])) for aid, p in c.items()}
    return out, float(np.sqrt(cost / len(pairs))), False


def _normalize_gauge(
    positions: dict[int, tuple[float, float]], frame: AnchorFrame
) -> dict[int, tuple[float, float]]:
    """Mirror the solution if refinement drifted across a gauge boundary;
    reflections preserve all pairwise distances."""
    out = dict(positions)
    if out[frame.x_axis_id][0] < 0:
        out = {aid: (-x, y) for aid, (x, y) in out.items()}
    if frame.orientation_id in out and out[frame.orientation_id][1] < 0:
        out = {aid: (x, -y) for aid, (x, y) in out.items()}
    return out


def detect_displacement(
    history: Sequence[DistanceMatrix],
    threshold_m: float = 0.5,
    recent: int = 3,
    min_window: int = 5,
) -> set[int]:
    """Flag anchors whose geometry shifted: compare the median of each pair
    distance over the newest `recent` periods against the median over the
    prior window; an anchor with ≥2 shifted pairs is flagged."""
    if len(history) < min_window:
        raise ValueError(f"need ≥{min_window} periods of history, got {len(history)}")
    prior, newest = history[:-recent], history[-recent:]
    shifted_count: dict[int, int] = {}
    all_ids = sorted({i for dm in history for i in dm.ids})
    for idx, a in enumerate(all_ids):
        for b in all_ids[idx + 1 :]:
            new_vals = [v for dm in newest if (v := dm.get(a, b)) is not None]
            old_vals = [v for dm in prior if (v := dm.get(a, b)) is not None]
            if not new_vals or not old_vals:
                continue
            if abs(_median(new_vals) - _median(old_vals)) > threshold_m:
                shifted_count[a] = shifted_count.get(a, 0) + 1
                shifted_count[b] = shifted_count.get(b, 0) + 1
    return {aid for aid, c in shifted_count.items() if c >= 2}


def _median(values: list[float]) -> float:
    s = sorted(values)
    n = len(s)
    mid = n // 2
    return s[mid] if n % 2 else 0.5 * (s[mid - 1] + s[mid])


@dataclass(frozen=True)
class GaugeTransform:
    """Rigid motion (+ optional reflection) mapping world coordinates into a
    frame's gauge convention; lets ground truth be compared against
    distance-only estimates."""

    rotation: np.ndarray
    translation: np.ndarray
    reflect_y: bool

    def apply(self, x: float, y: float) -> tuple[float, float]:
        p = self.rotation @ (np.array([x, y]) + self.translation)
        if self.reflect_y:
            p = np.array([p[0], -p[1]])
        return float(p[0]), float(p[1])


def gauge_align(
    true_positions: dict[int, tuple[float, float]],
    origin_id: int,
    x_axis_id: int,
    orientation_id: int,
) -> GaugeTransform:
    o = np.array(true_positions[origin_id], dtype=float)
    ax = np.array(true_positions[x_axis_id], dtype=float) - o
    theta = math.atan2(ax[1], ax[0])
    rot = np.array(
        [[math.cos(-theta), -math.sin(-theta)], [math.sin(-theta), math.cos(-theta)]]
    )
    orient = rot @ (np.array(true_positions[orientation_id], dtype=float) - o)
    return GaugeTransform(rotation=rot, translation=-o, reflect_y=bool(orient[1] < 0))
