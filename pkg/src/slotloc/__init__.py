"""Time-slotted, battery-powered UWB ranging system: deterministic
simulator, uplink codec, server-side collector, and analysis tools."""

from .model import (
    AnchorSpec,
    ChannelModel,
    DeploymentConfig,
    FrameSpec,
    MotionScript,
    NodeId,
    Position2D,
    Role,
    TagSpec,
    Waypoint,
    load_config,
    validate,
)
from .ranging import NodeClock, RangingSample, sstwr_exchange
from .schedule import Schedule, SlotWindow, SyncState, build_schedule
from .selfloc import AnchorFrame, DistanceMatrix, estimate_all, fix_frame
from .sim import SimReport, Simulator, run
from .solver import Fix2D, RangeSet, trilaterate
from .uplink import UplinkFrame, decode, encode

__version__ = "0.1.0"

__all__ = [
    "AnchorFrame",
    "AnchorSpec",
    "ChannelModel",
    "DeploymentConfig",
    "DistanceMatrix",
    "Fix2D",
    "FrameSpec",
    "MotionScript",
    "NodeClock",
    "NodeId",
    "Position2D",
    "RangeSet",
    "RangingSample",
    "Role",
    "Schedule",
    "SimReport",
    "Simulator",
    "SlotWindow",
    "SyncState",
    "TagSpec",
    "UplinkFrame",
    "Waypoint",
    "build_schedule",
    "decode",
    "encode",
    "estimate_all",
    "fix_frame",
    "load_config",
    "run",
    "sstwr_exchange",
    "trilaterate",
    "validate",
]
