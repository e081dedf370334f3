"""Shared domain types, units, and scenario configuration.

Unit conventions used across the package: meters, seconds, milliwatts and
millijoules internally; the uplink wire format carries centimeters. Global
simulation time is integer nanoseconds since scenario start.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field

import yaml

from . import schedule as _schedule


class Role(enum.Enum):
    MASTER_ANCHOR = "master"
    RELAY_ANCHOR = "relay"
    PASSIVE_ANCHOR = "passive"
    TAG = "tag"

    @property
    def is_anchor(self) -> bool:
        return self is not Role.TAG


ANCHOR_ROLES = (Role.MASTER_ANCHOR, Role.RELAY_ANCHOR, Role.PASSIVE_ANCHOR)


@dataclass(frozen=True)
class NodeId:
    """Identity of a node: a 16-bit id plus its protocol role."""

    id: int
    role: Role

    def __post_init__(self) -> None:
        if not 0 <= self.id <= 0xFFFF:
            raise ValueError(f"node id {self.id} outside u16 range")


@dataclass(frozen=True)
class Position2D:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite position ({self.x}, {self.y})")

    def distance_to(self, other: "Position2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def check_distance(value: float) -> float:
    """Validate a distance in meters: finite and non-negative."""
    if not math.isfinite(value) or value < 0.0:
        raise ValueError(f"invalid distance {value!r}")
    return value


@dataclass(frozen=True)
class ChannelModel:
    """Radio link abstraction: hard range cutoff, bernoulli loss per message,
    gaussian timestamp noise, gaussian CFO-estimate noise, and optional
    per-link constant NLOS bias. Propagation is at vacuum light speed."""

    range_limit_m: float = 150.0
    loss_prob: float = 0.0
    timestamp_noise_s: float = 0.3e-9
    cfo_noise_ppm: float = 0.1
    nlos_bias_m: dict[tuple[int, int], float] = field(default_factory=dict)

    def bias(self, a: int, b: int) -> float:
        key = (a, b) if a <= b else (b, a)
        return self.nlos_bias_m.get(key, 0.0)


@dataclass(frozen=True)
class Waypoint:
    t: float  # seconds from scenario start
    x: float
    y: float


@dataclass(frozen=True)
class MotionScript:
    """Piecewise-linear waypoint path; position is held at the endpoints."""

    waypoints: tuple[Waypoint, ...]

    def position_at(self, t: float) -> Position2D:
        wps = self.waypoints
        if t <= wps[0].t:
            return Position2D(wps[0].x, wps[0].y)
        for a, b in zip(wps, wps[1:]):
            if t <= b.t:
                if b.t == a.t:
                    continue
                f = (t - a.t) / (b.t - a.t)
                return Position2D(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y))
        return Position2D(wps[-1].x, wps[-1].y)


@dataclass(frozen=True)
class AnchorSpec:
    node: NodeId
    position: Position2D


@dataclass(frozen=True)
class TagSpec:
    node: NodeId
    motion: MotionScript


@dataclass(frozen=True)
class FrameSpec:
    """Gauge-fixing anchors for self-localization: origin at (0,0), x-axis
    anchor on +x, orientation anchor in the upper half plane."""

    origin: int
    x_axis: int
    orientation: int


@dataclass(frozen=True)
class DeploymentConfig:
    name: str
    anchors: tuple[AnchorSpec, ...]
    tags: tuple[TagSpec, ...]
    localization_period_s: float
    channel: ChannelModel = ChannelModel()
    drift_bound_ppm: float = 20.0
    reply_delay_s: float = 1e-3
    frame: FrameSpec | None = None
    seed: int = 0

    @property
    def anchor_ids(self) -> list[int]:
        return [a.node.id for a in self.anchors]

    @property
    def tag_ids(self) -> list[int]:
        return [t.node.id for t in self.tags]

    def anchor_position(self, node_id: int) -> Position2D:
        for a in self.anchors:
            if a.node.id == node_id:
                return a.position
        raise KeyError(node_id)

    def frame_spec(self) -> FrameSpec:
        """Configured gauge anchors, defaulting to the three lowest ids."""
        if self.frame is not None:
            return self.frame
        ids = sorted(self.anchor_ids)
        if len(ids) < 3:
            raise ValueError("frame spec needs at least 3 anchors")
        return FrameSpec(origin=ids[0], x_axis=ids[1], orientation=ids[2])


def validate(config: DeploymentConfig) -> list[str]:
    """Check deployment invariants. Returns one message per violation;
    an empty list means the simulator will load the config without error."""
    violations: list[str] = []

    if len(config.anchors) < 1:
        violations.append("anchors: need at least 1")
    if len(config.anchors) < 3:
        violations.append("anchors: need ≥3 for 2D")

    masters = [a for a in config.anchors if a.node.role is Role.MASTER_ANCHOR]
    if len(config.anchors) >= 1 and len(masters) != 1:
        violations.append(f"anchors: exactly one master required, found {len(masters)}")
    for a in config.anchors:
        if a.node.role is Role.TAG:
            violations.append(f"anchors: node {a.node.id} has tag role")
    for t in config.tags:
        if t.node.role is not Role.TAG:
            violations.append(f"tags: node {t.node.id} has anchor role")

    all_ids = config.anchor_ids + config.tag_ids
    if len(set(all_ids)) != len(all_ids):
        dupes = sorted({i for i in all_ids if all_ids.count(i) > 1})
        violations.append(f"ids: duplicate node ids {dupes}")

    if config.localization_period_s <= 0:
        violations.append("period: must be positive")
    elif len(config.anchors) >= 3 and len(config.tags) >= 1:
        active_s = _schedule.active_duration_ms(len(config.anchors), len(config.tags)) / 1000.0
        if config.localization_period_s < active_s:
            violations.append(f"period < active phase {active_s:.1f} s")
        else:
            n_slots = max(len(config.anchors) - 1, 0)
            budget = 2 * _schedule.INTRA_SLOT_GUARD_S + n_slots * exchange_spacing_s(config.reply_delay_s)
            if budget > _schedule.ANCHOR_SLOT_MS / 1000.0:
                violations.append(
                    f"reply_delay: {len(config.anchors)} anchors do not fit a "
                    f"{_schedule.ANCHOR_SLOT_MS} ms self-localization slot"
                )
            tag_budget = 2 * _schedule.INTRA_SLOT_GUARD_S + len(config.anchors) * exchange_spacing_s(
                config.reply_delay_s
            )
            if tag_budget > _schedule.TAG_SLOT_MS / 1000.0:
                violations.append(
                    f"reply_delay: ranging to {len(config.anchors)} anchors does not fit a "
                    f"{_schedule.TAG_SLOT_MS} ms tag slot"
                )

    if not 0.0 <= config.channel.loss_prob <= 1.0:
        violations.append(f"channel.loss_prob: {config.channel.loss_prob} outside [0,1]")
    if config.channel.range_limit_m <= 0:
        violations.append("channel.range_limit_m: must be positive")
    if config.channel.timestamp_noise_s < 0:
        violations.append("channel.timestamp_noise_s: must be ≥ 0")
    if config.channel.cfo_noise_ppm < 0:
        violations.append("channel.cfo_noise_ppm: must be ≥ 0")
    if config.drift_bound_ppm < 0:
        violations.append("drift_bound_ppm: must be ≥ 0")
    if config.reply_delay_s <= 0:
        violations.append("reply_delay_s: must be positive")

    for t in config.tags:
        wps = t.motion.waypoints
        if not wps:
            violations.append(f"tags: node {t.node.id} has empty motion script")
            continue
        times = [w.t for w in wps]
        if times != sorted(times):
            violations.append(f"tags: node {t.node.id} waypoints not time-ordered")

    if config.frame is not None:
        anchor_ids = set(config.anchor_ids)
        named = {config.frame.origin, config.frame.x_axis, config.frame.orientation}
        if len(named) != 3:
            violations.append("frame: origin/x_axis/orientation must be distinct anchors")
        missing = sorted(named - anchor_ids)
        if missing:
            violations.append(f"frame: unknown anchor ids {missing}")

    return violations


def exchange_spacing_s(reply_delay_s: float) -> float:
    """Per-peer spacing inside a ranging slot: reply delay plus margin for
    propagation and turnaround."""
    return reply_delay_s + 1e-3


# -- scenario file (YAML) ----------------------------------------------------

_ROLE_NAMES = {r.value: r for r in Role if r is not Role.TAG}


def config_to_dict(config: DeploymentConfig) -> dict:
    d: dict = {
        "name": config.name,
        "seed": config.seed,
        "localization_period_s": config.localization_period_s,
        "drift_bound_ppm": config.drift_bound_ppm,
        "reply_delay_s": config.reply_delay_s,
        "channel": {
            "range_limit_m": config.channel.range_limit_m,
            "loss_prob": config.channel.loss_prob,
            "timestamp_noise_s": config.channel.timestamp_noise_s,
            "cfo_noise_ppm": config.channel.cfo_noise_ppm,
            "nlos_bias_m": [
                {"a": a, "b": b, "bias_m": v}
                for (a, b), v in sorted(config.channel.nlos_bias_m.items())
            ],
        },
        "anchors": [
            {"id": a.node.id, "role": a.node.role.value, "x": a.position.x, "y": a.position.y}
            for a in config.anchors
        ],
        "tags": [
            {
                "id": t.node.id,
                "waypoints": [{"t": w.t, "x": w.x, "y": w.y} for w in t.motion.waypoints],
            }
            for t in config.tags
        ],
    }
    if config.frame is not None:
        d["frame"] = {
            "origin": config.frame.origin,
            "x_axis": config.frame.x_axis,
            "orientation": config.frame.orientation,
        }
    return d


def config_from_dict(d: dict) -> DeploymentConfig:
    ch = d.get("channel", {})
    nlos: dict[tuple[int, int], float] = {}
    for entry in ch.get("nlos_bias_m", []):
        a, b = int(entry["a"]), int(entry["b"])
        key = (a, b) if a <= b else (b, a)
        nlos[key] = float(entry["bias_m"])
    channel = ChannelModel(
        range_limit_m=float(ch.get("range_limit_m", 150.0)),
        loss_prob=float(ch.get("loss_prob", 0.0)),
        timestamp_noise_s=float(ch.get("timestamp_noise_s", 0.3e-9)),
        cfo_noise_ppm=float(ch.get("cfo_noise_ppm", 0.1)),
        nlos_bias_m=nlos,
    )
    anchors = []
    for a in d.get("anchors", []):
        role = _ROLE_NAMES.get(str(a.get("role", "passive")))
        if role is None:
            raise ValueError(f"unknown anchor role {a.get('role')!r}")
        anchors.append(
            AnchorSpec(NodeId(int(a["id"]), role), Position2D(float(a["x"]), float(a["y"])))
        )
    tags = []
    for t in d.get("tags", []):
        wps = tuple(
            Waypoint(float(w["t"]), float(w["x"]), float(w["y"])) for w in t.get("waypoints", [])
        )
        tags.append(TagSpec(NodeId(int(t["id"]), Role.TAG), MotionScript(wps)))
    frame = None
    if "frame" in d:
        f = d["frame"]
        frame = FrameSpec(int(f["origin"]), int(f["x_axis"]), int(f["orientation"]))
    return DeploymentConfig(
        name=str(d.get("name", "scenario")),
        anchors=tuple(anchors),
        tags=tuple(tags),
        localization_period_s=float(d["localization_period_s"]),
        channel=channel,
        drift_bound_ppm=float(d.get("drift_bound_ppm", 20.0)),
        reply_delay_s=float(d.get("reply_delay_s", 1e-3)),
        frame=frame,
        seed=int(d.get("seed", 0)),
    )


def dump_config(config: DeploymentConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=True)


def load_config(path: str) -> DeploymentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh))


def config_hash(config: DeploymentConfig) -> str:
    """Stable hash of the effective configuration (not of file formatting)."""
    return hashlib.sha256(dump_config(config).encode()).hexdigest()
