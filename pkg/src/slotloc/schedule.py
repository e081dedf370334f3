"""Active-phase slot layout and the three-message synchronization protocol.

Each localization period opens with a sync window in which the master
broadcasts S1 at t=0 and S2 at t=200 ms, then one 200 ms self-localization
slot per anchor, one 100 ms localization slot per tag, a guard gap, and a
closing window with the S3 broadcast 100 ms before the active phase ends.
Relay anchors retransmit sync messages once per label with a fixed offset
so nodes outside the master's range can still anchor their timers.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

# Layout constants (milliseconds). For 10 anchors and 10 tags the active
# phase must come out at exactly 3900 ms: 400 + 10*200 + 10*100 + 400 + 100.
SYNC_WINDOW_MS = 400
S2_OFFSET_MS = 200
ANCHOR_SLOT_MS = 200
TAG_SLOT_MS = 100
GUARD_MS = 400
FINAL_SYNC_MS = 100

# Seconds. Guard tolerance bounds the S2/S3 verification check; the intra
# slot guard keeps ranging clear of slot edges despite residual drift.
SYNC_VERIFY_TOL_S = 0.005
REBROADCAST_OFFSET_S = 0.010
INTRA_SLOT_GUARD_S = 0.002
WAKE_MARGIN_S = 0.020


class SlotKind(enum.Enum):
    SYNC_A = "sync_a"
    ANCHOR_SELFLOC = "anchor_selfloc"
    TAG_LOC = "tag_loc"
    GUARD = "guard"
    SYNC_D = "sync_d"


class ScheduleError(Exception):
    pass


@dataclass(frozen=True)
class SlotWindow:
    kind: SlotKind
    start_ms: int
    duration_ms: int
    owner: int | None = None  # node id; None for sync/guard windows

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.duration_ms


@dataclass(frozen=True)
class Schedule:
    windows: tuple[SlotWindow, ...]
    active_duration_ms: int
    period_s: float

    @property
    def s1_time_s(self) -> float:
        return 0.0

    @property
    def s2_time_s(self) -> float:
        return S2_OFFSET_MS / 1000.0

    @property
    def s3_time_s(self) -> float:
        return (self.active_duration_ms - FINAL_SYNC_MS) / 1000.0

    @property
    def active_duration_s(self) -> float:
        return self.active_duration_ms / 1000.0

    def window_for(self, node_id: int) -> SlotWindow:
        for w in self.windows:
            if w.owner == node_id:
                return w
        raise KeyError(f"node {node_id} owns no slot")

    def sync_timing(self) -> "SyncTiming":
        return SyncTiming(
            s2_offset_s=self.s2_time_s,
            s3_time_s=self.s3_time_s,
            tolerance_s=SYNC_VERIFY_TOL_S,
            rebroadcast_offset_s=REBROADCAST_OFFSET_S,
        )


def active_duration_ms(n_anchors: int, n_tags: int) -> int:
    return SYNC_WINDOW_MS + ANCHOR_SLOT_MS * n_anchors + TAG_SLOT_MS * n_tags + GUARD_MS + FINAL_SYNC_MS


def build_schedule(
    n_anchors: int,
    n_tags: int,
    period_s: float,
    anchor_ids: list[int] | None = None,
    tag_ids: list[int] | None = None,
) -> Schedule:
    """Lay out the active phase. Slots are assigned in ascending id order."""
    if n_anchors < 3:
        raise ScheduleError(f"need ≥3 anchors, got {n_anchors}")
    if n_tags < 1:
        raise ScheduleError(f"need ≥1 tag, got {n_tags}")
    anchor_ids = sorted(anchor_ids) if anchor_ids is not None else list(range(n_anchors))
    tag_ids = sorted(tag_ids) if tag_ids is not None else list(range(n_anchors, n_anchors + n_tags))
    if len(anchor_ids) != n_anchors or len(tag_ids) != n_tags:
        raise ScheduleError("id list lengths do not match node counts")

    total_ms = active_duration_ms(n_anchors, n_tags)
    if period_s < total_ms / 1000.0:
        raise ScheduleError(
            f"period {period_s} s shorter than active phase {total_ms / 1000.0:.1f} s"
        )

    windows: list[SlotWindow] = [SlotWindow(SlotKind.SYNC_A, 0, SYNC_WINDOW_MS)]
    t = SYNC_WINDOW_MS
    for aid in anchor_ids:
        windows.append(SlotWindow(SlotKind.ANCHOR_SELFLOC, t, ANCHOR_SLOT_MS, owner=aid))
        t += ANCHOR_SLOT_MS
    for tid in tag_ids:
        windows.append(SlotWindow(SlotKind.TAG_LOC, t, TAG_SLOT_MS, owner=tid))
        t += TAG_SLOT_MS
    windows.append(SlotWindow(SlotKind.GUARD, t, GUARD_MS))
    t += GUARD_MS
    windows.append(SlotWindow(SlotKind.SYNC_D, t, FINAL_SYNC_MS))
    t += FINAL_SYNC_MS
    assert t == total_ms
    return Schedule(windows=tuple(windows), active_duration_ms=total_ms, period_s=period_s)


# -- synchronization state machine -------------------------------------------

S1, S2, S3 = 1, 2, 3


class SyncStatus(enum.Enum):
    UNSYNCED = "unsynced"
    SYNCED = "synced"
    VERIFIED = "verified"


@dataclass(frozen=True)
class SyncTiming:
    s2_offset_s: float
    s3_time_s: float
    tolerance_s: float = SYNC_VERIFY_TOL_S
    rebroadcast_offset_s: float = REBROADCAST_OFFSET_S

    def label_time_s(self, label: int) -> float:
        return {S1: 0.0, S2: self.s2_offset_s, S3: self.s3_time_s}[label]


@dataclass(frozen=True)
class SyncMessage:
    """Simulated sync wire message plus its local receive timestamp."""

    label: int  # S1 | S2 | S3
    hop_count: int
    master_id: int
    rx_local_s: float = 0.0


class Timeout:
    """A full period elapsed without hearing any sync message."""


@dataclass(frozen=True)
class SyncState:
    status: SyncStatus = SyncStatus.UNSYNCED
    origin_local_s: float | None = None  # local clock reading of active-phase start
    last_label: int | None = None
    heard_this_period: int = 0
    anomalies: int = 0
    duplicates: int = 0

    def advance_period(self, period_s: float) -> "SyncState":
        """Roll the state into the next period: the origin estimate advances
        by one period, verification resets, timeout demotes to Unsynced."""
        if self.heard_this_period == 0 or self.origin_local_s is None:
            return SyncState(anomalies=self.anomalies, duplicates=self.duplicates)
        return SyncState(
            status=SyncStatus.SYNCED,
            origin_local_s=self.origin_local_s + period_s,
            last_label=None,
            heard_this_period=0,
            anomalies=self.anomalies,
            duplicates=self.duplicates,
        )


@dataclass(frozen=True)
class SyncStepResult:
    state: SyncState
    origin_changed: bool


def sync_step(state: SyncState, event: SyncMessage | Timeout, timing: SyncTiming) -> SyncStepResult:
    """Advance the sync state machine by one received message or timeout.

    S1 re-anchors the active-phase origin. S2/S3 either anchor it (when the
    node has no origin yet) or verify it against the known broadcast times;
    a second in-order message with a passing check upgrades to Verified.
    Retransmitted messages are compensated by hop_count times the fixed
    re-broadcast offset. Out-of-order labels are anomalies, never fatal.
    """
    if isinstance(event, Timeout):
        if state.heard_this_period == 0:
            return SyncStepResult(
                SyncState(anomalies=state.anomalies, duplicates=state.duplicates), False
            )
        return SyncStepResult(state, False)

    msg = event
    if msg.label not in (S1, S2, S3):
        return SyncStepResult(replace(state, anomalies=state.anomalies + 1), False)
    if state.last_label is not None:
        if msg.label == state.last_label:
            return SyncStepResult(replace(state, duplicates=state.duplicates + 1), False)
        if msg.label < state.last_label:
            return SyncStepResult(replace(state, anomalies=state.anomalies + 1), False)

    rx_eff = msg.rx_local_s - msg.hop_count * timing.rebroadcast_offset_s
    heard = state.heard_this_period + 1

    if msg.label == S1:
        new = replace(
            state,
            status=SyncStatus.VERIFIED if state.status is SyncStatus.VERIFIED else SyncStatus.SYNCED,
            origin_local_s=rx_eff,
            last_label=S1,
            heard_this_period=heard,
        )
        return SyncStepResult(new, True)

    expected = timing.label_time_s(msg.label)
    if state.origin_local_s is None or state.status is SyncStatus.UNSYNCED:
        new = replace(
            state,
            status=SyncStatus.SYNCED,
            origin_local_s=rx_eff - expected,
            last_label=msg.label,
            heard_this_period=heard,
        )
        return SyncStepResult(new, True)

    err = abs((rx_eff - state.origin_local_s) - expected)
    if err <= timing.tolerance_s:
        status = SyncStatus.VERIFIED if heard >= 2 else state.status
        new = replace(state, status=status, last_label=msg.label, heard_this_period=heard)
        return SyncStepResult(new, False)
    new = replace(
        state, last_label=msg.label, heard_this_period=heard, anomalies=state.anomalies + 1
    )
    return SyncStepResult(new, False)


# -- relay behavior -----------------------------------------------------------

@dataclass
class RelayState:
    sent_labels: set[int]

    def __init__(self) -> None:
        self.sent_labels = set()

    def new_period(self) -> None:
        self.sent_labels.clear()


def relay_step(relay: RelayState, msg: SyncMessage) -> SyncMessage | None:
    """Decide whether a relay retransmits: at most once per label per period,
    after REBROADCAST_OFFSET_S, with the hop count incremented."""
    if msg.label in relay.sent_labels:
        return None
    relay.sent_labels.add(msg.label)
    return SyncMessage(label=msg.label, hop_count=msg.hop_count + 1, master_id=msg.master_id)


# -- wake scheduling ----------------------------------------------------------

def wake_margin_s(period_s: float, drift_bound_ppm: float) -> float:
    """Early-wake margin covering worst-case drift over one period."""
    return max(WAKE_MARGIN_S, drift_bound_ppm * 1e-6 * period_s)


def wakeup_time(schedule: Schedule, sync_state: SyncState, drift_bound_ppm: float) -> float | None:
    """Local clock time at which to wake for the next period's sync window,
    or None when unsynced (listen continuously instead)."""
    if sync_state.origin_local_s is None or sync_state.status is SyncStatus.UNSYNCED:
        return None
    return sync_state.origin_local_s + schedule.period_s - wake_margin_s(
        schedule.period_s, drift_bound_ppm
    )


# -- sync message wire layout: label u8, hop u8, master id u16 BE --------------

def encode_sync(msg: SyncMessage) -> bytes:
    return struct.pack(">BBH", msg.label, msg.hop_count, msg.master_id)


def decode_sync(data: bytes) -> SyncMessage:
    label, hop, master = struct.unpack(">BBH", data)
    return SyncMessage(label=label, hop_count=hop, master_id=master)
