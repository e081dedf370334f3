"""Single-sided two-way ranging between two drifting clocks.

One exchange: the initiator transmits a poll, the responder answers after a
fixed turnaround measured on its own clock, and the initiator derives the
time of flight from the round-trip minus the reply time. The raw estimate is
biased by the relative oscillator offset times half the reply time; the
measured carrier-frequency ratio cancels that bias.

Timestamps are quantized to the UWB transceiver timebase of
1/(128 * 499.2 MHz) ~ 15.65 ps (~4.7 mm one-way), matching DW3000-class
hardware. All timestamp arithmetic is done in integer ticks so that
differences of large absolute times stay exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import ChannelModel

SPEED_OF_LIGHT = 299_792_458.0  # m/s, vacuum; air correction is < 100 ppm
TICK_S = 1.0 / (128 * 499.2e6)  # UWB timestamp quantum
DEFAULT_REPLY_DELAY_S = 1e-3


@dataclass(frozen=True)
class NodeClock:
    """Free-running oscillator: local = phase + (1 + ppm*1e-6) * true."""

    freq_offset_ppm: float = 0.0
    phase_offset_s: float = 0.0
    tick_s: float = TICK_S

    def __post_init__(self) -> None:
        if self.tick_s <= 0:
            raise ValueError("tick must be positive")

    @property
    def rate(self) -> float:
        return 1.0 + self.freq_offset_ppm * 1e-6

    def local_ticks(self, true_time_ns: float, noise_s: float = 0.0) -> int:
        raw = self.phase_offset_s + self.rate * (true_time_ns * 1e-9) + noise_s
        return round(raw / self.tick_s)

    def local_seconds(self, true_time_ns: float) -> float:
        return self.local_ticks(true_time_ns) * self.tick_s

    def true_time_ns(self, local_s: float) -> float:
        """Invert the clock projection (no quantization); used for scheduling."""
        return (local_s - self.phase_offset_s) / self.rate * 1e9


def local_timestamp(clock: NodeClock, true_time_ns: float) -> float:
    """Project global true time onto a node clock, quantized to its tick."""
    return clock.local_seconds(true_time_ns)


def quantize(value_s: float, tick_s: float = TICK_S) -> float:
    return round(value_s / tick_s) * tick_s


class CorrectedTof(NamedTuple):
    tof_s: float
    clamped: bool


def cfo_corrected_tof(t_round: float, t_reply: float, cfo_ratio: float) -> CorrectedTof:
    """ToF = (t_round - (1 + k) * t_reply) / 2 with k the measured clock
    frequency ratio offset (positive when the initiator's oscillator runs
    fast relative to the responder's). Marginally negative results from
    quantization are clamped to zero and flagged."""
    if not (math.isfinite(t_round) and math.isfinite(t_reply) and math.isfinite(cfo_ratio)):
        raise ValueError("non-finite input to cfo_corrected_tof")
    tof = (t_round - (1.0 + cfo_ratio) * t_reply) / 2.0
    if tof < 0.0:
        return CorrectedTof(0.0, True)
    return CorrectedTof(tof, False)


def uncorrected_tof(t_round: float, t_reply: float) -> float:
    """Plain SS-TWR estimate, kept for bias diagnostics."""
    return (t_round - t_reply) / 2.0


def distance_from_tof(tof_s: float) -> float:
    if not math.isfinite(tof_s) or tof_s < 0.0:
        raise ValueError(f"invalid time of flight {tof_s!r}")
    return SPEED_OF_LIGHT * tof_s


def tof_from_distance(distance_m: float) -> float:
    return distance_m / SPEED_OF_LIGHT


@dataclass(frozen=True)
class RangingSample:
    """Outcome of one SS-TWR exchange. When any message was lost, valid is
    False and the timing fields are meaningless."""

    initiator: int | None
    responder: int | None
    t_round_s: float
    t_reply_s: float
    cfo_ratio: float
    distance_m: float
    valid: bool
    clamped: bool = False


def sstwr_exchange(
    initiator: NodeClock,
    responder: NodeClock,
    true_distance_m: float,
    reply_delay_s: float,
    channel: ChannelModel,
    rng: np.random.Generator,
    start_ns: float = 0.0,
    initiator_id: int | None = None,
    responder_id: int | None = None,
) -> RangingSample:
    """Simulate one poll/response exchange starting at global time start_ns.

    The responder turns the poll around after reply_delay_s measured on its
    own clock. All four timestamps receive gaussian measurement noise and
    tick quantization; the CFO estimate is the exact frequency ratio of the
    two oscillators plus gaussian estimation noise. Message loss is drawn
    per message; the RNG draw sequence is fixed regardless of outcomes so
    that identical seeds replay identically.
    """
    if true_distance_m < 0:
        raise ValueError("distance must be ≥ 0")
    if reply_delay_s <= 0:
        raise ValueError("reply delay must be positive")

    lost_poll = rng.random() < channel.loss_prob
    lost_resp = rng.random() < channel.loss_prob
    g = rng.standard_normal(5)

    if initiator_id is not None and responder_id is not None:
        true_distance_m += channel.bias(initiator_id, responder_id)

    sigma = channel.timestamp_noise_s
    tof_ns = tof_from_distance(true_distance_m) * 1e9
    # True event times (ns): poll tx, poll rx, response tx, response rx.
    t_poll_tx = start_ns
    t_poll_rx = t_poll_tx + tof_ns
    t_resp_tx = t_poll_rx + reply_delay_s / responder.rate * 1e9
    t_resp_rx = t_resp_tx + tof_ns

    ts1 = initiator.local_ticks(t_poll_tx, g[0] * sigma)
    ts2 = responder.local_ticks(t_poll_rx, g[1] * sigma)
    ts3 = responder.local_ticks(t_resp_tx, g[2] * sigma)
    ts4 = initiator.local_ticks(t_resp_rx, g[3] * sigma)

    t_round = (ts4 - ts1) * initiator.tick_s
    t_reply = (ts3 - ts2) * responder.tick_s
    cfo = initiator.rate / responder.rate - 1.0 + g[4] * channel.cfo_noise_ppm * 1e-6

    valid = not (lost_poll or lost_resp)
    tof, clamped = cfo_corrected_tof(t_round, t_reply, cfo)
    return RangingSample(
        initiator=initiator_id,
        responder=responder_id,
        t_round_s=t_round,
        t_reply_s=t_reply,
        cfo_ratio=cfo,
        distance_m=distance_from_tof(tof) if valid else 0.0,
        valid=valid,
        clamped=clamped,
    )


def exchange_duration_s(true_distance_m: float, reply_delay_s: float) -> float:
    """Wall-clock span of one exchange, for slot budgeting."""
    return 2 * tof_from_distance(true_distance_m) + reply_delay_s
