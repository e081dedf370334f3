"""Server-side pipeline: ingest uplink frames, persist them to an
append-only log, maintain the anchor coordinate frame from inter-anchor
distance reports, and solve tag positions.

Frames are bucketed into localization periods by receive time; a period is
processed when the first frame of the next bucket arrives (or on an
explicit flush / 1.5x-period timeout in live mode). Anchor positions fed to
the tag solver are running medians of the per-period self-localization
estimates, so a single noisy period cannot drag fixes around; a detected
anchor displacement resets that history and bumps the frame version.
"""

from __future__ import annotations

import logging
import socketserver
import struct
from collections import deque
from dataclasses import dataclass, field

from . import selfloc, solver, uplink
from .model import FrameSpec

LOG_MAGIC = b"SLOG"
LOG_VERSION = 1
DEDUP_WINDOW_S = 60.0

logger = logging.getLogger(__name__)


class LogError(Exception):
    def __init__(self, message: str, version_mismatch: bool = False):
        super().__init__(message)
        self.version_mismatch = version_mismatch


@dataclass(frozen=True)
class IngestRecord:
    rx_time_ns: int
    raw: bytes
    frame: uplink.UplinkFrame | None
    error: str | None = None
    duplicate: bool = False


@dataclass(frozen=True)
class PositionRecord:
    node: int
    time_ns: int
    x: float
    y: float
    rms_residual: float
    n_anchors_used: int
    frame_version: int


@dataclass
class _PendingTagReport:
    record: IngestRecord
    age: int = 0


class IngestLogWriter:
    """Append-only store: 4-byte magic, 1-byte version, then length-prefixed
    records of (u64 rx_time_ns, raw frame bytes)."""

    def __init__(self, path: str):
        self.path = path
        try:
            with open(path, "rb") as fh:
                header = fh.read(5)
            if header[:4] != LOG_MAGIC:
                raise LogError(f"{path}: not an ingest log")
            if header[4] != LOG_VERSION:
                raise LogError(
                    f"{path}: log version {header[4]} != {LOG_VERSION}", version_mismatch=True
                )
            self._fh = open(path, "ab")
        except FileNotFoundError:
            self._fh = open(path, "ab")
            self._fh.write(LOG_MAGIC + bytes([LOG_VERSION]))
            self._fh.flush()

    def append(self, rx_time_ns: int, raw: bytes) -> None:
        payload = struct.pack(">Q", rx_time_ns) + raw
        self._fh.write(struct.pack(">I", len(payload)) + payload)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_log(path: str) -> list[tuple[int, bytes]]:
    """All (rx_time_ns, raw) records in arrival order."""
    with open(path, "rb") as fh:
        header = fh.read(5)
        if len(header) < 5 or header[:4] != LOG_MAGIC:
            raise LogError(f"{path}: not an ingest log")
        if header[4] != LOG_VERSION:
            raise LogError(
                f"{path}: log version {header[4]} != {LOG_VERSION}", version_mismatch=True
            )
        out = []
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) < 4:
                raise LogError(f"{path}: truncated record header")
            (length,) = struct.unpack(">I", head)
            payload = fh.read(length)
            if len(payload) < length or length < 8:
                raise LogError(f"{path}: truncated record payload")
            (rx_ns,) = struct.unpack(">Q", payload[:8])
            out.append((rx_ns, payload[8:]))
        return out


class Collector:
    """One deployment's ingest/solve pipeline. Single-writer: ingest and
    process_period must be called from one thread; query/export read
    committed results only."""

    def __init__(
        self,
        period_s: float,
        frame_spec: FrameSpec,
        store_path: str | None = None,
        displacement_threshold_m: float = 0.5,
        displacement_window: int = 10,
        triangle_slack_m: float = 0.3,
        solver_params: solver.SolverParams = solver.DEFAULT_PARAMS,
    ):
        self.period_ns = int(round(period_s * 1e9))
        self.frame_spec = frame_spec
        self.displacement_threshold_m = displacement_threshold_m
        self.displacement_window = displacement_window
        self.triangle_slack_m = triangle_slack_m
        self.solver_params = solver_params
        self._store = IngestLogWriter(store_path) if store_path else None

        self.ingest_records: list[IngestRecord] = []
        self.positions: list[PositionRecord] = []
        self.anchor_frame: selfloc.AnchorFrame | None = None
        self.frame_version = 0

        self._seen: dict[tuple[int, int], int] = {}  # (device, seq) -> rx_ns
        self._bucket: int | None = None
        self._bucket_anchor_frames: list[uplink.UplinkFrame] = []
        self._pending_tags: list[_PendingTagReport] = []
        self._matrix_history: deque[selfloc.DistanceMatrix] = deque(
            maxlen=displacement_window
        )
        self._coord_history: dict[int, deque[tuple[float, float]]] = {}
        self.current_positions: dict[int, tuple[float, float]] = {}

    # -- ingest -----------------------------------------------------------------

    def ingest(self, raw: bytes, rx_time_ns: int) -> IngestRecord:
        """Persist and route one payload. Raw bytes are always logged, even
        when decoding fails; duplicates are logged but not re-processed."""
        if self._store is not None:
            self._store.append(rx_time_ns, raw)
        try:
            frame = uplink.decode(raw)
            error = None
        except uplink.DecodeError as e:
            frame, error = None, str(e)

        duplicate = False
        if frame is not None:
            key = (frame.device_id, frame.seq)
            last = self._seen.get(key)
            if last is not None and rx_time_ns - last <= DEDUP_WINDOW_S * 1e9:
                duplicate = True
            else:
                self._seen[key] = rx_time_ns

        record = IngestRecord(
            rx_time_ns=rx_time_ns, raw=raw, frame=frame, error=error, duplicate=duplicate
        )
        self.ingest_records.append(record)
        if frame is None or duplicate:
            return record

        bucket = rx_time_ns // self.period_ns
        if self._bucket is None:
            self._bucket = bucket
        elif bucket > self._bucket:
            self.process_period()
            self._bucket = bucket

        if frame.msg_type is uplink.MsgType.ANCHOR_SELFLOC:
            self._bucket_anchor_frames.append(frame)
        elif frame.msg_type is uplink.MsgType.TAG_LOC:
            self._pending_tags.append(_PendingTagReport(record))
        return record

    def maybe_timeout(self, now_ns: int) -> None:
        """Process the open bucket when no new bucket started for 1.5 periods."""
        if self._bucket is None:
            return
        if now_ns - (self._bucket + 1) * self.period_ns >= 0.5 * self.period_ns:
            self.process_period()
            self._bucket = now_ns // self.period_ns

    def flush(self) -> None:
        if self._bucket is not None:
            self.process_period()
            self._bucket = None

    # -- period processing --------------------------------------------------------

    def process_period(self) -> tuple[selfloc.AnchorFrame | None, list[PositionRecord]]:
        """Fold the completed bucket: update the anchor frame from anchor
        reports, check for displacement, then solve queued tag reports."""
        frame_update = self._update_anchor_frame()
        new_records = self._solve_tags()
        self.positions.extend(new_records)
        self._bucket_anchor_frames = []
        return frame_update, new_records

    def _update_anchor_frame(self) -> selfloc.AnchorFrame | None:
        if not self._bucket_anchor_frames:
            return None
        ids = sorted(
            {f.device_id for f in self._bucket_anchor_frames}
            | {peer for f in self._bucket_anchor_frames for peer, _ in f.records}
        )
        dm = selfloc.DistanceMatrix(ids)
        for f in self._bucket_anchor_frames:
            for peer, dist_cm in f.records:
                if dist_cm is not None:
                    dm.add(f.device_id, peer, uplink.m_from_cm(dist_cm))
        self._matrix_history.append(dm)

        spec = self.frame_spec
        try:
            base = selfloc.fix_frame(
                dm, spec.origin, spec.x_axis, spec.orientation, slack_m=self.triangle_slack_m
            )
            frame = selfloc.estimate_all(dm, base)
        except selfloc.FrameError as e:
            logger.warning("anchor frame not estimable this period: %s", e)
            return None

        for aid, pos in sorted(frame.positions.items()):
            self._coord_history.setdefault(
                aid, deque(maxlen=self.displacement_window)
            ).append(pos)

        if len(self._matrix_history) >= 5:
            flagged = selfloc.detect_displacement(
                list(self._matrix_history), threshold_m=self.displacement_threshold_m
            )
            if flagged:
                logger.info("anchor displacement detected: %s", sorted(flagged))
                self.frame_version += 1
                recent = list(self._matrix_history)[-3:]
                self._matrix_history.clear()
                self._matrix_history.extend(recent)
                for aid in flagged:
                    hist = self._coord_history.get(aid)
                    if hist is not None and aid in frame.positions:
                        hist.clear()
                        hist.append(frame.positions[aid])

        if self.frame_version == 0:
            self.frame_version = 1
        self.current_positions = {
            aid: (
                _median([p[0] for p in hist]),
                _median([p[1] for p in hist]),
            )
            for aid, hist in sorted(self._coord_history.items())
            if hist
        }
        self.anchor_frame = frame
        return frame

    def _solve_tags(self) -> list[PositionRecord]:
        out: list[PositionRecord] = []
        still_pending: list[_PendingTagReport] = []
        frame_usable = len(self.current_positions) >= 3
        for pending in self._pending_tags:
            frame = pending.record.frame
            assert frame is not None
            if not frame_usable:
                if pending.age == 0:
                    pending.age = 1
                    still_pending.append(pending)
                else:
                    logger.warning(
                        "dropping tag report from %d: no usable anchor frame", frame.device_id
                    )
                continue
            pairs = [
                (self.current_positions[peer], uplink.m_from_cm(dist_cm))
                for peer, dist_cm in frame.records
                if dist_cm is not None and peer in self.current_positions
            ]
            if len(pairs) < 3:
                logger.warning(
                    "tag %d report at %d: insufficient ranges (%d valid)",
                    frame.device_id,
                    pending.record.rx_time_ns,
                    len(pairs),
                )
                continue
            fix = solver.trilaterate(solver.RangeSet.from_pairs(pairs), params=self.solver_params)
            out.append(
                PositionRecord(
                    node=frame.device_id,
                    time_ns=pending.record.rx_time_ns,
                    x=fix.x,
                    y=fix.y,
                    rms_residual=fix.rms_residual,
                    n_anchors_used=len(pairs),
                    frame_version=self.frame_version,
                )
            )
        self._pending_tags = still_pending
        return out

    # -- queries ------------------------------------------------------------------

    def query(self, node: int | None, t0_ns: int, t1_ns: int) -> list[PositionRecord]:
        """Records in [t0, t1), sorted by time. Inverted ranges are empty."""
        return sorted(
            (
                r
                for r in self.positions
                if t0_ns <= r.time_ns < t1_ns and (node is None or r.node == node)
            ),
            key=lambda r: (r.time_ns, r.node),
        )

    def export_csv(self, path: str, t0_ns: int | None = None, t1_ns: int | None = None) -> int:
        records = self.query(
            None,
            t0_ns if t0_ns is not None else 0,
            t1_ns if t1_ns is not None else (1 << 63),
        )
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(CSV_HEADER + "\n")
            for r in records:
                fh.write(
                    f"{r.time_ns},{r.node},{r.x!r},{r.y!r},{r.rms_residual!r},"
                    f"{r.n_anchors_used},{r.frame_version}\n"
                )
        return len(records)


CSV_HEADER = "time,node,x,y,rms_residual,n_anchors,frame_version"


def read_csv(path: str) -> list[PositionRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise LogError(f"{path}: unexpected CSV header {header!r}")
        for line in fh:
            t, node, x, y, rms, n, ver = line.strip().split(",")
            out.append(
                PositionRecord(
                    node=int(node),
                    time_ns=int(t),
                    x=float(x),
                    y=float(y),
                    rms_residual=float(rms),
                    n_anchors_used=int(n),
                    frame_version=int(ver),
                )
            )
    return out


def replay_log(path: str, period_s: float, frame_spec: FrameSpec, **kwargs) -> Collector:
    """Rebuild collector state by re-ingesting a persisted log."""
    collector = Collector(period_s, frame_spec, store_path=None, **kwargs)
    for rx_ns, raw in read_log(path):
        collector.ingest(raw, rx_ns)
    collector.flush()
    return collector


def _median(values: list[float]) -> float:
    s = sorted(values)
    n = len(s)
    mid = n // 2
    return s[mid] if n % 2 else 0.5 * (s[mid - 1] + s[mid])


# -- live ingest socket ----------------------------------------------------------

class _IngestHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        collector: Collector = self.server.collector  # type: ignore[attr-defined]
        for line in self.rfile:
            text = line.decode("ascii", errors="replace").strip()
            if not text:
                continue
            parts = text.split()
            if parts and parts[0] == "U":
                parts = parts[1:]
            if len(parts) != 2:
                logger.warning("ignoring malformed ingest line: %r", text)
                continue
            try:
                rx_ns = int(parts[0])
                raw = bytes.fromhex(parts[1])
            except ValueError:
                logger.warning("ignoring malformed ingest line: %r", text)
                continue
            collector.ingest(raw, rx_ns)
            collector.maybe_timeout(rx_ns)


class IngestServer(socketserver.TCPServer):
    """Newline-framed `<rx_time_ns> <hex-payload>` ingest endpoint."""

    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], collector: Collector):
        super().__init__(address, _IngestHandler)
        self.collector = collector
