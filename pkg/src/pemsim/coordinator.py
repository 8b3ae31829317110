"""The packet coordinator: anonymous accept/reject, packet timers, demand reconstruction.

The coordinator never learns which device sent a request. It keeps one timer
per accepted packet, keyed by the request nonce, so the live sum of timers is a
reconstruction of fleet demand that needs no metering.
"""
from __future__ import annotations

import bisect
import enum
import heapq
from dataclasses import dataclass, field

from .protocol import Kind, PacketMessage


class FeedbackPolicy(str, enum.Enum):
    MEASURED = "MEASURED"
    RECONSTRUCTED = "RECONSTRUCTED"
    BLEND = "BLEND"


class ContractViolation(RuntimeError):
    pass


@dataclass
class CoordinatorConfig:
    """``rule='strict'`` accepts a charge iff P_error > threshold_charge and a
    discharge iff P_error < -threshold_discharge. ``rule='literal'`` uses the
    one-sided form P_error >= threshold_charge for charge and
    P_error < 0 and P_error + P_discharge >= -threshold_discharge for discharge.
    """

    threshold_charge: float = 0.0
    threshold_discharge: float = 0.0
    rule: str = "strict"
    policy: FeedbackPolicy = FeedbackPolicy.BLEND
    base_load: float = 0.0
    history_window: float = 600.0  # s of estimate history kept for re-anchoring

    def __post_init__(self):
        if self.rule not in ("strict", "literal"):
            raise ValueError(f"unknown acceptance rule {self.rule!r}")
        self.policy = FeedbackPolicy(self.policy)


def decide(p_error: float, direction: int, rated_power: float, cfg: CoordinatorConfig) -> bool:
    """Accept/reject as a pure function of the tracking error and the request's
    direction and rated power. No other input exists, by construction."""
    if direction > 0:
        if cfg.rule == "literal":
            return p_error >= cfg.threshold_charge
        return p_error > cfg.threshold_charge
    if direction < 0:
        if cfg.rule == "literal":
            return p_error < 0 and p_error + rated_power >= -cfg.threshold_discharge
        return p_error < -cfg.threshold_discharge
    return False


@dataclass(order=True)
class Timer:
    expiry: float
    nonce: str = field(compare=False)
    rated_power: float = field(compare=False)
    direction: int = field(compare=False)
    started: float = field(compare=False, default=0.0)


@dataclass
class Report:
    """Aggregates over one reporting interval ``(start, end]``."""

    start: float
    end: float
    demand: float
    n_req_c: int
    n_req_d: int
    n_optout: int
    n_acc_c: int
    n_acc_d: int
    n_expired_c: int
    n_expired_d: int
    active_c_start: int
    active_d_start: int

    @property
    def beta_c(self) -> float | None:
        return self.n_acc_c / self.n_req_c if self.n_req_c else None

    @property
    def beta_d(self) -> float | None:
        return self.n_acc_d / self.n_req_d if self.n_req_d else None

    @property
    def expire_c(self) -> float:
        return min(1.0, self.n_expired_c / self.active_c_start) if self.active_c_start else 0.0

    @property
    def expire_d(self) -> float:
        return min(1.0, self.n_expired_d / self.active_d_start) if self.active_d_start else 0.0


class Coordinator:
    def __init__(self, config: CoordinatorConfig | None = None, reference: float = 0.0,
                 record_events: bool = False):
        self.config = config or CoordinatorConfig()
        self.reference = float(reference)
        self.measured: float | None = None
        self.measured_sent: float | None = None
        self.offset = 0.0
        self._heap: list[Timer] = []
        self._timers: dict[str, Timer] = {}
        self._controlled = 0.0  # signed kW of live timers
        self._hist_t: list[float] = []
        self._hist_v: list[float] = []
        self._hist_head = 0
        self.now = 0.0
        self.malformed = 0
        self.unknown_cancels = 0
        self.record_events = record_events
        self.events: list[tuple[float, float]] = []
        self._interval_start = 0.0
        self._reset_counters()

    # -------------------------------------------------------------- state
    def _reset_counters(self):
        self.n_req_c = self.n_req_d = 0
        self.n_acc_c = self.n_acc_d = 0
        self.n_optout = 0
        self.n_expired_c = self.n_expired_d = 0
        self.active_c_start = sum(1 for t in self._timers.values() if t.direction > 0)
        self.active_d_start = len(self._timers) - self.active_c_start

    @property
    def estimate(self) -> float:
        """Timer reconstruction of fleet demand (kW), including the configured base."""
        return self._controlled + self.config.base_load

    @property
    def active_timers(self) -> int:
        return len(self._timers)

    def timers(self) -> list[Timer]:
        return sorted(self._timers.values())

    def _change(self, now: float, kw: float):
        self._controlled += kw
        self._hist_t.append(now)
        self._hist_v.append(self._controlled)
        horizon = now - self.config.history_window
        head = self._hist_head
        while head + 1 < len(self._hist_t) and self._hist_t[head + 1] <= horizon:
            head += 1
        if head > 4096 and head > len(self._hist_t) // 2:
            del self._hist_t[:head], self._hist_v[:head]
            head = 0
        self._hist_head = head
        if self.record_events:
            self.events.append((now, kw))

    def _estimate_at(self, t: float) -> float:
        """Reconstruction as it stood at time ``t`` (within the history window)."""
        if not self._hist_t or t >= self._hist_t[-1]:
            return self.estimate
        i = bisect.bisect_right(self._hist_t, t, lo=self._hist_head) - 1
        value = self._hist_v[max(i, self._hist_head)]
        return value + self.config.base_load

    def _start_timer(self, now, nonce, rated_power, direction, length):
        if nonce in self._timers:
            raise ContractViolation(f"duplicate timer nonce {nonce}")
        timer = Timer(now + length, nonce, float(rated_power), int(direction), now)
        self._timers[nonce] = timer
        heapq.heappush(self._heap, timer)
        self._change(now, direction * rated_power)
        return timer

    def seed_timers(self, seeds, now: float = 0.0):
        """Warm start from ``(end_time, rated_power, direction, nonce)`` tuples."""
        for end, power, direction, nonce in seeds:
            self._start_timer(now, nonce, power, direction, end - now)
        self._reset_counters()

    # ------------------------------------------------------------ timers
    def on_timer_expiry(self, timer: Timer, now: float | None = None):
        live = self._timers.get(timer.nonce)
        if live is not timer:
            raise ContractViolation(f"timer {timer.nonce} already expired or cancelled")
        del self._timers[timer.nonce]
        if timer.direction > 0:
            self.n_expired_c += 1
        else:
            self.n_expired_d += 1
        self._change(timer.expiry if now is None else now, -timer.direction * timer.rated_power)

    def advance(self, now: float):
        """Expire every timer whose expiry is at or before ``now``."""
        if now < self.now:
            now = self.now
        heap = self._heap
        while heap and heap[0].expiry <= now:
            timer = heapq.heappop(heap)
            if self._timers.get(timer.nonce) is timer:
                self.on_timer_expiry(timer)
        self.now = now

    def next_expiry(self) -> float | None:
        while self._heap and self._timers.get(self._heap[0].nonce) is not self._heap[0]:
            heapq.heappop(self._heap)
        return self._heap[0].expiry if self._heap else None

    def _cancel(self, nonce, now) -> bool:
        timer = self._timers.pop(nonce, None)
        if timer is None:
            self.unknown_cancels += 1
            return False
        self._change(now, -timer.direction * timer.rated_power)
        return True

    # ------------------------------------------------------------ feedback
    def feedback(self, now: float | None = None) -> float:
        if now is not None:
            self.advance(now)
        policy = self.config.policy
        if policy is FeedbackPolicy.MEASURED:
            return self.measured if self.measured is not None else self.estimate
        if policy is FeedbackPolicy.RECONSTRUCTED:
            return self.estimate
        return self.estimate + self.offset

    def tracking_error(self, now: float | None = None) -> float:
        return self.reference - self.feedback(now)

    def set_reference(self, value: float):
        self.reference = float(value)

    # ------------------------------------------------------------ messages
    def handle(self, msg: PacketMessage, now: float) -> list[PacketMessage]:
        """Dispatch one inbound message; returns outbound messages (responses)."""
        self.advance(now)
        if msg.kind is Kind.REQUEST:
            return [self.handle_request(msg, now)]
        if msg.kind is Kind.OPT_OUT_NOTICE:
            self.handle_opt_out(msg, now)
        elif msg.kind is Kind.RELEASE:
            self.handle_release(msg, now)
        elif msg.kind is Kind.DEMAND_MEASUREMENT:
            self.handle_measurement(msg, now)
        return []

    def handle_request(self, msg: PacketMessage, now: float) -> PacketMessage:
        self.advance(now)
        direction, power, length = msg.direction, msg.rated_power, msg.packet_length
        if (direction not in (-1, 1) or power is None or not power > 0 or length is None
                or not length > 0 or msg.correlation_nonce is None
                or msg.correlation_nonce in self._timers):
            self.malformed += 1
            return PacketMessage.response(False, msg.correlation_nonce or "")
        if direction > 0:
            self.n_req_c += 1
        else:
            self.n_req_d += 1
        accept = decide(self.tracking_error(), direction, power, self.config)
        if accept:
            self._start_timer(now, msg.correlation_nonce, power, direction, length)
            if direction > 0:
                self.n_acc_c += 1
            else:
                self.n_acc_d += 1
        return PacketMessage.response(accept, msg.correlation_nonce)

    def handle_opt_out(self, msg: PacketMessage, now: float):
        """A positive packet length announces a forced packet; zero cancels one early."""
        self.n_optout += 1
        if msg.packet_length and msg.packet_length > 0:
            if msg.correlation_nonce is None or msg.correlation_nonce in self._timers:
                self.malformed += 1
                return
            self._start_timer(now, msg.correlation_nonce, msg.rated_power or 0.0,
                              msg.direction or 1, msg.packet_length)
        elif msg.correlation_nonce is not None:
            self._cancel(msg.correlation_nonce, now)

    def handle_release(self, msg: PacketMessage, now: float):
        self._cancel(msg.correlation_nonce, now)

    def handle_measurement(self, msg: PacketMessage, now: float):
        """Store the value (last received wins) and re-anchor the blend offset
        against the reconstruction at the time the meter read it."""
        value = msg.measured_demand
        if value is None:
            self.malformed += 1
            return
        self.measured = float(value)
        sent = msg.timestamp_sent if msg.timestamp_sent is not None else now
        self.measured_sent = sent
        self.offset = self.measured - self._estimate_at(sent)

    # ------------------------------------------------------------ reporting
    def report_measurements(self, now: float) -> Report:
        """Interval aggregates since the previous report; resets the counters."""
        self.advance(now)
        rep = Report(self._interval_start, now, self.feedback(), self.n_req_c, self.n_req_d,
                     self.n_optout, self.n_acc_c, self.n_acc_d, self.n_expired_c,
                     self.n_expired_d, self.active_c_start, self.active_d_start)
        self._interval_start = now
        self._reset_counters()
        return rep
