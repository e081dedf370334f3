"""Deterministic discrete-event simulation of the time-slotted ranging system.

A single-threaded event loop drives per-node clock models, the sync
protocol, slotted SS-TWR exchanges, and uplink emission over any number of
localization periods. Events are totally ordered by (time, insertion
sequence), every random draw comes from a per-node stream or the channel
stream (all derived from the master seed by stable labels), so a (config,
seed) pair replays to byte-identical reports.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import energy, schedule as sched, selfloc, uplink
from .model import (
    DeploymentConfig,
    MotionScript,
    Position2D,
    Role,
    config_hash,
    exchange_spacing_s,
    validate,
)
from .ranging import (
    SPEED_OF_LIGHT,
    NodeClock,
    RangingSample,
    exchange_duration_s,
    sstwr_exchange,
)

REPORT_MAGIC = "SLOTLOC-REPORT"
REPORT_VERSION = 1

_NODE_STREAM = 1
_CHANNEL_STREAM = 0


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class TxRecord:
    """One transmission for schedule-conformance checking (true time, ns)."""

    period: int
    node: int
    kind: str  # "sync:<label>" or "ranging"
    start_ns: int
    end_ns: int


@dataclass(frozen=True)
class RangeEntry:
    anchor_id: int
    distance_m: float
    valid: bool


@dataclass
class PeriodRecord:
    index: int
    anchor_matrix: selfloc.DistanceMatrix
    tag_ranges: dict[int, list[RangeEntry]] = field(default_factory=dict)
    anchor_reports: dict[int, list[tuple[int, RangingSample]]] = field(default_factory=dict)
    frames: list[tuple[int, bytes]] = field(default_factory=list)  # (rx_ns, raw)
    traces: dict[int, energy.StateTrace] = field(default_factory=dict)
    sync_status: dict[int, sched.SyncStatus] = field(default_factory=dict)
    tag_truth: dict[int, tuple[int, float, float]] = field(default_factory=dict)


@dataclass
class SimReport:
    seed: int
    config_digest: str
    period_s: float
    n_periods: int
    periods: list[PeriodRecord] = field(default_factory=list)
    tx_log: list[TxRecord] = field(default_factory=list)
    s1_true_ns: dict[int, int] = field(default_factory=dict)
    deliveries: list[tuple[int, int, float]] = field(default_factory=list)  # (tx, rx, dist)

    def all_frames(self) -> list[tuple[int, bytes]]:
        out = []
        for p in self.periods:
            out.extend(p.frames)
        return sorted(out, key=lambda fr: (fr[0], fr[1]))

    def to_lines(self) -> list[str]:
        lines = [
            f"{REPORT_MAGIC} v{REPORT_VERSION}",
            f"seed {self.seed}",
            f"config {self.config_digest}",
            f"period_s {self.period_s!r}",
            f"periods {self.n_periods}",
        ]
        for p in self.periods:
            for rx, raw in sorted(p.frames, key=lambda fr: (fr[0], fr[1])):
                lines.append(f"U {rx} {raw.hex()}")
            for tag in sorted(p.tag_truth):
                t_ns, x, y = p.tag_truth[tag]
                lines.append(f"T {p.index} {tag} {t_ns} {x!r} {y!r}")
            for node in sorted(p.traces):
                for state, dur in p.traces[node].segments:
                    lines.append(f"E {p.index} {node} {state.value} {dur!r}")
            for node in sorted(p.sync_status):
                lines.append(f"Y {p.index} {node} {p.sync_status[node].value}")
        return lines

    def to_bytes(self) -> bytes:
        return ("\n".join(self.to_lines()) + "\n").encode()

    def write(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def replay_check(report_a: SimReport, report_b: SimReport) -> bool:
    """True iff the two reports serialize to identical bytes."""
    return report_a.to_bytes() == report_b.to_bytes()


def read_report_frames(lines: Iterable[str]) -> list[tuple[int, bytes]]:
    """Parse uplink records out of a report stream. Accepts the `U` records
    written by SimReport and bare `<rx_ns> <hex>` lines (the live ingest
    grammar); other record types are skipped."""
    frames = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if lineno == 1 and parts[0] == REPORT_MAGIC:
            if parts[1] != f"v{REPORT_VERSION}":
                raise SimulationError(f"unsupported report version {parts[1]}")
            continue
        if parts[0] in ("seed", "config", "period_s", "periods", "T", "E", "Y"):
            continue
        if parts[0] == "U":
            parts = parts[1:]
        if len(parts) != 2:
            continue
        try:
            frames.append((int(parts[0]), bytes.fromhex(parts[1])))
        except ValueError as e:
            raise SimulationError(f"bad uplink record on line {lineno}: {e}") from None
    return frames


def load_report_frames(path: str) -> list[tuple[int, bytes]]:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith(REPORT_MAGIC):
            raise SimulationError(f"{path}: not a report file")
        fh.seek(0)
        return read_report_frames(fh)


class _Node:
    """Simulation-internal node state."""

    def __init__(
        self,
        node_id: int,
        role: Role,
        clock: NodeClock,
        rng: np.random.Generator,
        position: Position2D | None,
        motion: MotionScript | None,
    ):
        self.id = node_id
        self.role = role
        self.clock = clock
        self.rng = rng
        self._position = position
        self._motion = motion
        self.sync = sched.SyncState()
        self.relay = sched.RelayState()
        self.awake = True
        self.awake_since: int = 0
        self.awake_intervals: list[tuple[int, int]] = []
        self.slot_intervals: list[tuple[int, int]] = []
        self.uplink_times: list[int] = []
        self.seq = 0
        self.activities_period: int = -1
        self.advanced_boundary: int = 0
        self.prev_status: sched.SyncStatus = sched.SyncStatus.UNSYNCED

    @property
    def is_anchor(self) -> bool:
        return self.role is not Role.TAG

    @property
    def is_master(self) -> bool:
        return self.role is Role.MASTER_ANCHOR

    def position_at(self, t_ns: int) -> Position2D:
        if self._position is not None:
            return self._position
        assert self._motion is not None
        return self._motion.position_at(t_ns * 1e-9)

    def wake(self, t_ns: int) -> None:
        if not self.awake:
            self.awake = True
            self.awake_since = t_ns

    def sleep(self, t_ns: int) -> None:
        if self.awake:
            self.awake_intervals.append((self.awake_since, t_ns))
            self.awake = False

    def awake_seconds_in(self, a_ns: int, b_ns: int, now_ns: int) -> float:
        total = 0
        intervals = list(self.awake_intervals)
        if self.awake:
            intervals.append((self.awake_since, now_ns))
        for s, e in intervals:
            total += max(0, min(e, b_ns) - max(s, a_ns))
        return total * 1e-9

    def slot_seconds_in(self, a_ns: int, b_ns: int) -> float:
        total = 0
        for s, e in self.slot_intervals:
            total += max(0, min(e, b_ns) - max(s, a_ns))
        return total * 1e-9

    def advance_period(self, period_s: float, boundary: int) -> None:
        self.prev_status = self.sync.status
        self.advanced_boundary = boundary
        if self.is_master:
            assert self.sync.origin_local_s is not None
            self.sync = sched.SyncState(
                status=sched.SyncStatus.VERIFIED,
                origin_local_s=self.sync.origin_local_s + period_s,
            )
        else:
            self.sync = self.sync.advance_period(period_s)
        self.relay.new_period()


class Simulator:
    """Event engine over one deployment. Use run() for the whole scenario."""

    def __init__(self, config: DeploymentConfig, seed: int | None = None, n_periods: int = 1):
        problems = validate(config)
        if problems:
            raise SimulationError("invalid config: " + "; ".join(problems))
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.n_periods = n_periods
        self.period_ns = int(round(config.localization_period_s * 1e9))
        self.horizon_ns = self.period_ns * n_periods
        self.schedule = sched.build_schedule(
            len(config.anchors),
            len(config.tags),
            config.localization_period_s,
            anchor_ids=config.anchor_ids,
            tag_ids=config.tag_ids,
        )
        self.timing = self.schedule.sync_timing()
        self.channel = config.channel
        self.channel_rng = np.random.default_rng(
            np.random.SeedSequence((self.seed, _CHANNEL_STREAM))
        )
        self.nodes: dict[int, _Node] = {}
        for a in config.anchors:
            self.nodes[a.node.id] = self._make_node(a.node.id, a.node.role, a.position, None)
        for t in config.tags:
            self.nodes[t.node.id] = self._make_node(t.node.id, Role.TAG, None, t.motion)
        self.master_id = next(
            a.node.id for a in config.anchors if a.node.role is Role.MASTER_ANCHOR
        )
        self.anchor_ids = sorted(config.anchor_ids)
        self.tag_ids = sorted(config.tag_ids)

        self._heap: list[tuple[int, int, str, Callable[[], None]]] = []
        self._seq = 0
        self._now = 0
        self.report = SimReport(
            seed=self.seed,
            config_digest=config_hash(config),
            period_s=config.localization_period_s,
            n_periods=n_periods,
        )
        self._period_records = [
            PeriodRecord(index=k, anchor_matrix=selfloc.DistanceMatrix(self.anchor_ids))
            for k in range(n_periods)
        ]

    def _make_node(
        self, node_id: int, role: Role, position: Position2D | None, motion: MotionScript | None
    ) -> _Node:
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, _NODE_STREAM, node_id)))
        bound = self.config.drift_bound_ppm
        clock = NodeClock(
            freq_offset_ppm=float(rng.uniform(-bound, bound)),
            phase_offset_s=float(rng.uniform(0.0, 1.0)),
        )
        return _Node(node_id, role, clock, rng, position, motion)

    # -- event machinery ------------------------------------------------------

    def _push(self, t_ns: float, kind: str, fn: Callable[[], None], force: bool = False) -> None:
        t = int(round(t_ns))
        if t >= self.horizon_ns and not force:
            return
        if t < self._now:
            t = self._now
        heapq.heappush(self._heap, (t, self._seq, kind, fn))
        self._seq += 1

    def run(self) -> SimReport:
        master = self.nodes[self.master_id]
        master.sync = sched.SyncState(
            status=sched.SyncStatus.VERIFIED, origin_local_s=master.clock.local_seconds(0)
        )
        self._schedule_master_broadcasts(0)
        self._schedule_period_activities(master, 0)
        for k in range(self.n_periods):
            self._push((k + 1) * self.period_ns, "finalize", self._finalizer(k), force=True)

        while self._heap:
            t, _, _, fn = heapq.heappop(self._heap)
            self._now = t
            fn()

        self.report.periods = self._period_records
        return self.report

    # -- master schedule -------------------------------------------------------

    def _schedule_master_broadcasts(self, k: int) -> None:
        master = self.nodes[self.master_id]
        origin = master.sync.origin_local_s
        assert origin is not None
        self.report.s1_true_ns[k] = int(round(master.clock.true_time_ns(origin)))
        for label, offset in (
            (sched.S1, 0.0),
            (sched.S2, self.timing.s2_offset_s),
            (sched.S3, self.timing.s3_time_s),
        ):
            t = master.clock.true_time_ns(origin + offset)
            self._push(t, f"sync{label}", self._sync_broadcaster(master, label, 0, k))

    def _sync_broadcaster(self, sender: _Node, label: int, hop: int, k: int) -> Callable[[], None]:
        def fire() -> None:
            self._broadcast_sync(sender, label, hop, k)

        return fire

    def _broadcast_sync(self, sender: _Node, label: int, hop: int, k: int) -> None:
        t = self._now
        self.report.tx_log.append(
            TxRecord(period=k, node=sender.id, kind=f"sync:{label}", start_ns=t, end_ns=t)
        )
        spos = sender.position_at(t)
        for nid in sorted(self.nodes):
            if nid == sender.id:
                continue
            node = self.nodes[nid]
            dist = spos.distance_to(node.position_at(t))
            if dist > self.channel.range_limit_m:
                continue
            lost = self.channel_rng.random() < self.channel.loss_prob
            if lost:
                continue
            rx = t + dist / SPEED_OF_LIGHT * 1e9
            self.report.deliveries.append((t, int(round(rx)), dist))
            msg = sched.SyncMessage(label=label, hop_count=hop, master_id=self.master_id)
            self._push(rx, "sync_rx", self._sync_receiver(node, msg, k))

    def _sync_receiver(self, node: _Node, msg: sched.SyncMessage, k: int) -> Callable[[], None]:
        def fire() -> None:
            if not node.awake:
                return
            rx_local = node.clock.local_seconds(self._now)
            stamped = sched.SyncMessage(
                label=msg.label, hop_count=msg.hop_count, master_id=msg.master_id,
                rx_local_s=rx_local,
            )
            result = sched.sync_step(node.sync, stamped, self.timing)
            node.sync = result.state
            if node.role is Role.RELAY_ANCHOR:
                retx = sched.relay_step(node.relay, stamped)
                if retx is not None:
                    t_retx = node.clock.true_time_ns(
                        rx_local + self.timing.rebroadcast_offset_s
                    )
                    self._push(
                        t_retx,
                        "relay",
                        self._sync_broadcaster(node, retx.label, retx.hop_count, k),
                    )
            if result.origin_changed:
                self._schedule_period_activities(node, k)

        return fire

    # -- per-period node activity -----------------------------------------------

    def _schedule_period_activities(self, node: _Node, k: int) -> None:
        if node.activities_period >= k or node.sync.origin_local_s is None:
            return
        node.activities_period = k
        origin = node.sync.origin_local_s
        clock = node.clock

        window = self.schedule.window_for(node.id)
        slot_start_local = origin + window.start_ms / 1000.0
        slot_true = clock.true_time_ns(slot_start_local)
        if slot_true >= self._now:
            node.slot_intervals.append(
                (
                    int(round(slot_true)),
                    int(round(clock.true_time_ns(origin + window.end_ms / 1000.0))),
                )
            )
            peers = (
                [a for a in self.anchor_ids if a != node.id]
                if node.is_anchor
                else list(self.anchor_ids)
            )
            spacing = exchange_spacing_s(self.config.reply_delay_s)
            for i, peer in enumerate(peers):
                ex_local = slot_start_local + sched.INTRA_SLOT_GUARD_S + i * spacing
                self._push(
                    clock.true_time_ns(ex_local),
                    "exchange",
                    self._exchanger(node, peer, k),
                )
            up_local = slot_start_local + sched.INTRA_SLOT_GUARD_S + len(peers) * spacing
            self._push(clock.true_time_ns(up_local), "uplink", self._uplinker(node, k))

        sleep_local = origin + self.schedule.active_duration_s
        self._push(
            max(clock.true_time_ns(sleep_local), self._now),
            "sleep",
            self._sleeper(node, k),
        )

    def _exchanger(self, node: _Node, peer_id: int, k: int) -> Callable[[], None]:
        def fire() -> None:
            self._run_exchange(node, peer_id, k)

        return fire

    def _run_exchange(self, node: _Node, peer_id: int, k: int) -> None:
        t = self._now
        peer = self.nodes[peer_id]
        dist = node.position_at(t).distance_to(peer.position_at(t))
        reply = self.config.reply_delay_s
        in_range = dist <= self.channel.range_limit_m
        tof_ns = dist / SPEED_OF_LIGHT * 1e9
        peer_awake = peer.awake  # responder must be listening when the poll lands
        if in_range and peer_awake:
            sample = sstwr_exchange(
                node.clock,
                peer.clock,
                dist,
                reply,
                self.channel,
                node.rng,
                start_ns=t,
                initiator_id=node.id,
                responder_id=peer_id,
            )
        else:
            sample = RangingSample(
                initiator=node.id, responder=peer_id, t_round_s=0.0, t_reply_s=0.0,
                cfo_ratio=0.0, distance_m=0.0, valid=False,
            )
        end = t + exchange_duration_s(dist if in_range else 0.0, reply) * 1e9
        self.report.tx_log.append(
            TxRecord(period=k, node=node.id, kind="ranging", start_ns=t, end_ns=int(round(end)))
        )
        rec = self._period_records[k]
        if node.is_anchor:
            if sample.valid:
                rec.anchor_matrix.add(node.id, peer_id, sample.distance_m)
            rec.anchor_reports.setdefault(node.id, []).append((peer_id, sample))
        else:
            rec.tag_ranges.setdefault(node.id, []).append(
                RangeEntry(anchor_id=peer_id, distance_m=sample.distance_m, valid=sample.valid)
            )

    def _uplinker(self, node: _Node, k: int) -> Callable[[], None]:
        def fire() -> None:
            self._emit_uplink(node, k)

        return fire

    def _emit_uplink(self, node: _Node, k: int) -> None:
        t = self._now
        rec = self._period_records[k]
        records: list[tuple[int, int | None]] = []
        if node.is_anchor:
            for peer_id, sample in rec.anchor_reports.get(node.id, []):
                records.append(
                    (peer_id, uplink.cm_from_m(sample.distance_m) if sample.valid else None)
                )
            msg_type = uplink.MsgType.ANCHOR_SELFLOC
        else:
            for entry in rec.tag_ranges.get(node.id, []):
                records.append(
                    (entry.anchor_id, uplink.cm_from_m(entry.distance_m) if entry.valid else None)
                )
            msg_type = uplink.MsgType.TAG_LOC
            # Truth snapshot at the midpoint of the tag's ranging exchanges.
            entries = rec.tag_ranges.get(node.id, [])
            if entries:
                spacing = exchange_spacing_s(self.config.reply_delay_s)
                mid_ns = int(round(t - spacing * (len(entries) + 1) * 0.5e9))
                pos = node.position_at(mid_ns)
                rec.tag_truth[node.id] = (mid_ns, pos.x, pos.y)
        records.sort(key=lambda r: r[0])
        frames = uplink.split_report(
            device_id=node.id,
            msg_type=msg_type,
            records=records,
            battery_mv=3700,
            first_seq=node.seq,
        )
        node.seq = (node.seq + len(frames)) & 0xFF
        airtime_ns = energy.DEFAULT_PROFILE.lora_tx_s * 1e9
        for i, frame in enumerate(frames):
            rx = int(round(t + (i + 1) * airtime_ns))
            rec.frames.append((rx, uplink.encode(frame)))
            node.uplink_times.append(int(round(t + i * airtime_ns)))

    def _sleeper(self, node: _Node, k: int) -> Callable[[], None]:
        def fire() -> None:
            wake_local = sched.wakeup_time(
                self.schedule, node.sync, self.config.drift_bound_ppm
            )
            if wake_local is None:
                return  # unsynced: keep listening
            node.sleep(self._now)
            self._push(node.clock.true_time_ns(wake_local), "wake", self._waker(node, k + 1))

        return fire

    def _waker(self, node: _Node, k: int) -> Callable[[], None]:
        def fire() -> None:
            node.wake(self._now)
            node.advance_period(self.config.localization_period_s, boundary=k)
            if node.is_master:
                self._schedule_master_broadcasts(k)
            self._schedule_period_activities(node, k)

        return fire

    # -- period finalization ----------------------------------------------------

    def _finalizer(self, k: int) -> Callable[[], None]:
        def fire() -> None:
            a, b = k * self.period_ns, (k + 1) * self.period_ns
            rec = self._period_records[k]
            period_s = self.config.localization_period_s
            for nid in sorted(self.nodes):
                node = self.nodes[nid]
                if node.advanced_boundary == k + 1:
                    status = node.prev_status
                else:
                    status = node.sync.status
                    node.advance_period(period_s, boundary=k + 1)
                rec.sync_status[nid] = status
                slot_s = node.slot_seconds_in(a, b)
                awake_s = node.awake_seconds_in(a, b, now_ns=self._now)
                uplinks = sum(1 for ut in node.uplink_times if a <= ut < b)
                rec.traces[nid] = energy.trace_from_simulation(
                    node=nid,
                    is_anchor=node.is_anchor,
                    listen_s=max(0.0, awake_s - slot_s) if node.is_anchor else 0.0,
                    own_slot_s=slot_s,
                    n_uplinks=uplinks,
                    period_s=period_s,
                    profile=energy.DEFAULT_PROFILE,
                )

        return fire


def run(config: DeploymentConfig, n_periods: int, seed: int | None = None) -> SimReport:
    """Simulate n_periods of the deployment and return the full report."""
    return Simulator(config, seed=seed, n_periods=n_periods).run()
