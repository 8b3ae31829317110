"""Vectorised engine advancing many device actors on a shared tick.

Each device follows exactly the rules of ``devices.device_tick``; state lives
in flat numpy arrays so thousands of devices step in one pass. Devices never
read each other's state; interaction goes only through the returned messages.
"""
from __future__ import annotations

import math

import numpy as np

from .devices import DeviceClass, DeviceParams, Mode, request_probability_arrays, split_request
from .protocol import Kind, PacketMessage

CHARGE, DISCHARGE, STANDBY, OPT_OUT_LOW, OPT_OUT_HIGH = range(5)
MODE_NAMES = (Mode.CHARGE, Mode.DISCHARGE, Mode.STANDBY, Mode.OPT_OUT_LOW, Mode.OPT_OUT_HIGH)


def _nonces(rng: np.random.Generator, count: int) -> list[str]:
    return [f"{int(v):016x}" for v in rng.integers(0, 2**63, size=count)]


class Fleet:
    """A population of devices with per-device parameters.

    ``clock`` is the time of the last completed tick. Deliveries between ticks
    take effect at their exact time; ``power(now)`` honours packets that ended
    between the last tick and ``now``.
    """

    def __init__(self, params: list[DeviceParams], soc, rng: np.random.Generator,
                 dt: float = 1.0, response_timeout: float = math.inf, start: float = 0.0,
                 record_events: bool = False):
        if not params:
            raise ValueError("fleet needs at least one device")
        n = len(params)
        self.params = list(params)
        self.n = n
        self.dt = float(dt)
        self.rng = rng
        self.response_timeout = float(response_timeout)
        self.clock = float(start)

        def col(fn):
            return np.array([fn(p) for p in params], dtype=float)

        self.is_ewh = np.array([p.device_class is DeviceClass.EWH for p in params])
        self.p_charge = col(lambda p: p.charge_power)
        self.p_discharge = col(lambda p: p.discharge_power)
        self.rate_c = col(lambda p: p.charge_rate())
        self.rate_d = col(lambda p: p.discharge_rate())
        self.lower = col(lambda p: p.lower)
        self.upper = col(lambda p: p.upper)
        self.setpoint = col(lambda p: p.setpoint)
        self.m_r = col(lambda p: p.mean_time_to_request)
        self.len_c = col(lambda p: p.packet_charge)
        self.len_d = col(lambda p: p.packet_discharge)
        self.can_discharge = np.array([p.can_discharge for p in params])
        self.ambient = col(lambda p: p.ambient)
        self.loss_coef = np.where(self.is_ewh, col(lambda p: 1.0 / p.loss_time_constant), 0.0)
        self.inv_mass = col(lambda p: 1.0 / p.thermal_mass if p.device_class is DeviceClass.EWH else 0.0)
        self.draw_rate = col(lambda p: p.draw.pulse_rate if p.draw and p.device_class is DeviceClass.EWH else 0.0)
        self.draw_mean = col(lambda p: p.draw.mean_energy if p.draw else 0.0)
        self.draw_cv = col(lambda p: p.draw.energy_cv if p.draw else 0.0)
        self.draw_flow = col(lambda p: p.draw.flow_power if p.draw else 0.0)
        self.has_draws = bool(np.any(self.draw_rate > 0))

        self.soc = np.asarray(soc, dtype=float).copy()
        if self.soc.shape != (n,):
            raise ValueError("soc must have one entry per device")
        self.switch = np.zeros(n, dtype=np.int8)
        self.mode = np.full(n, STANDBY, dtype=np.int8)
        self.remaining = np.zeros(n)
        self.segment = np.zeros(n)
        self.duty = np.zeros(n)
        self.backlog = np.zeros(n)
        self.pending_dir = np.zeros(n, dtype=np.int8)
        self.pending_age = np.zeros(n)
        self.packet_nonce = np.full(n, None, dtype=object)
        self._pending: dict[str, int] = {}
        self._abandoned: dict[str, tuple[int, int]] = {}
        self.stray_responses = 0
        self.late_accepts = 0
        self.record_events = record_events
        self.events: list[tuple[float, float]] = []  # (time, signed kW change)
        self._mode_from_soc()

    # ------------------------------------------------------------ setup
    def _mode_from_soc(self):
        high = (self.mode == STANDBY) & (self.soc > self.upper)
        self.mode[high] = OPT_OUT_HIGH

    def start_packets(self, idx, direction: int, remaining) -> list[tuple[float, float, int, str]]:
        """Put devices ``idx`` mid-packet (initial conditions). Returns timer seeds
        ``(end_time, rated_power, direction, nonce)`` for a coordinator warm start."""
        idx = np.asarray(idx, dtype=int)
        remaining = np.broadcast_to(np.asarray(remaining, dtype=float), idx.shape)
        nonces = _nonces(self.rng, len(idx))
        out = []
        for i, rem, nonce in zip(idx, remaining, nonces):
            self.switch[i] = direction
            self.mode[i] = CHARGE if direction > 0 else DISCHARGE
            self.remaining[i] = rem
            self.packet_nonce[i] = nonce
            power = self.p_charge[i] if direction > 0 else self.p_discharge[i]
            out.append((self.clock + float(rem), float(power), direction, nonce))
        return out

    # ------------------------------------------------------------ queries
    def power(self, now: float | None = None) -> float:
        """True aggregate electrical power (kW) at ``now`` (default: the clock)."""
        live = self.switch != 0
        if now is not None and now > self.clock:
            live &= self.remaining > now - self.clock
        return float(self.p_charge[live & (self.switch > 0)].sum()
                     - self.p_discharge[live & (self.switch < 0)].sum())

    def modes(self) -> np.ndarray:
        return self.mode.copy()

    @property
    def pending_count(self) -> int:
        return len(self._pending)

    def _log(self, t, kw):
        if self.record_events:
            self.events.append((float(t), float(kw)))

    # ------------------------------------------------------------ messages
    def deliver(self, msg: PacketMessage, now: float) -> list[PacketMessage]:
        """Deliver one message at absolute time ``now``; returns outbound replies."""
        if msg.kind is not Kind.RESPONSE:
            return []
        nonce = msg.correlation_nonce
        i = self._pending.pop(nonce, None)
        if i is None:
            hit = self._abandoned.pop(nonce, None)
            if hit is None:
                self.stray_responses += 1
                return []
            i, direction = hit
            if msg.accept:
                self.late_accepts += 1
                return [PacketMessage.release(direction, self._rated(i, direction), nonce)]
            return []
        direction = int(self.pending_dir[i])
        self.pending_dir[i] = 0
        self.pending_age[i] = 0.0
        if not msg.accept:
            return []
        mode = self.mode[i]
        if mode == STANDBY or (mode == OPT_OUT_HIGH and direction < 0):
            offset = max(now - self.clock, 0.0)
            self.duty[i] += self.switch[i] * (offset - self.segment[i])
            self.segment[i] = offset
            self.switch[i] = direction
            self.mode[i] = CHARGE if direction > 0 else DISCHARGE
            length = self.len_c[i] if direction > 0 else self.len_d[i]
            self.remaining[i] = offset + length
            self.packet_nonce[i] = nonce
            self._log(self.clock + offset, direction * self._rated(i, direction))
            return []
        self.late_accepts += 1
        return [PacketMessage.release(direction, self._rated(i, direction), nonce)]

    def _rated(self, i, direction):
        return float(self.p_charge[i] if direction > 0 else self.p_discharge[i])

    # ------------------------------------------------------------ tick
    def tick(self) -> list[PacketMessage]:
        """Advance every device over ``(clock, clock + dt]``; returns outbound messages."""
        dt = self.dt
        n = self.n
        out: list[PacketMessage] = []

        in_packet = (self.mode == CHARGE) | (self.mode == DISCHARGE) | (self.mode == OPT_OUT_LOW)
        ending = in_packet & (self.remaining <= dt)
        end_at = np.maximum(self.remaining, self.segment)
        seg_end = np.where(ending, end_at, dt)
        self.duty += self.switch * (seg_end - self.segment)
        if self.record_events and ending.any():
            for i in np.flatnonzero(ending & (self.switch != 0)):
                self._log(self.clock + end_at[i], -int(self.switch[i]) * self._rated(i, int(self.switch[i])))
        self.switch[ending] = 0
        self.mode[ending] = STANDBY
        self.packet_nonce[ending] = None
        self.remaining = np.maximum(0.0, self.remaining - dt)

        drained = 0.0
        if self.has_draws:
            arrivals = self.rng.poisson(self.draw_rate * dt)
            hit = arrivals > 0
            if hit.any():
                k = arrivals[hit]
                cv = self.draw_cv[hit]
                mean = self.draw_mean[hit]
                energy = k * mean
                rnd = cv > 0
                if rnd.any():
                    shape = 1.0 / cv[rnd] ** 2
                    energy[rnd] = self.rng.gamma(shape * k[rnd], mean[rnd] / shape)
                self.backlog[hit] += energy
            drained = np.minimum(self.backlog, self.draw_flow * dt)
            self.backlog -= drained

        drive = self.rate_c * np.maximum(self.duty, 0.0) - self.rate_d * np.maximum(-self.duty, 0.0)
        loss = -self.loss_coef * (self.soc - self.ambient) * dt
        self.soc = self.soc + drive + loss - drained * self.inv_mass
        self.clock += dt
        self.duty[:] = 0.0
        self.segment[:] = 0.0
        now = self.clock

        if self._pending and math.isfinite(self.response_timeout):
            waiting = self.pending_dir != 0
            self.pending_age[waiting] += dt
            timed_out = waiting & (self.pending_age >= self.response_timeout)
            if timed_out.any():
                self._abandon(np.flatnonzero(timed_out))

        x = self.soc
        cut_high = (x > self.upper) & (self.switch > 0)
        cut_low = (x < self.lower) & (self.switch < 0)
        for i in np.flatnonzero(cut_high | cut_low):
            direction = int(self.switch[i])
            out.append(PacketMessage.opt_out(direction, self._rated(i, direction), 0.0,
                                             self.packet_nonce[i]))
            self._log(now, -direction * self._rated(i, direction))
        self.mode[cut_high] = OPT_OUT_HIGH
        self.mode[cut_low] = STANDBY
        cut = cut_high | cut_low
        self.switch[cut] = 0
        self.remaining[cut] = 0.0
        self.packet_nonce[cut] = None

        back = (self.mode == OPT_OUT_HIGH) & (x <= self.upper)
        self.mode[back] = STANDBY
        self.mode[(self.mode == STANDBY) & (x > self.upper)] = OPT_OUT_HIGH

        forced = (self.mode == STANDBY) & (x < self.lower)
        if forced.any():
            idx = np.flatnonzero(forced)
            self._abandon(idx[self.pending_dir[idx] != 0])
            self.mode[idx] = OPT_OUT_LOW
            self.switch[idx] = 1
            self.remaining[idx] = self.len_c[idx]
            for i, nonce in zip(idx, _nonces(self.rng, len(idx))):
                self.packet_nonce[i] = nonce
                out.append(PacketMessage.opt_out(1, self.p_charge[i], self.len_c[i], nonce))
                self._log(now, self.p_charge[i])

        u = self.rng.random(n)
        eligible = (self.pending_dir == 0) & ((self.mode == STANDBY) | (self.mode == OPT_OUT_HIGH))
        g_c = np.where(self.mode == STANDBY, request_probability_arrays(
            x, self.lower, self.upper, self.setpoint, self.m_r, dt, 1), 0.0)
        g_d = np.where(self.can_discharge, request_probability_arrays(
            x, self.lower, self.upper, self.setpoint, self.m_r, dt, -1), 0.0)
        direction = np.where(eligible, split_request(u, g_c, g_d), 0)
        # devices are not clock-synchronised, so requests made in the same tick
        # reach the coordinator in random order
        idx = self.rng.permutation(np.flatnonzero(direction))
        if len(idx):
            for i, nonce in zip(idx, _nonces(self.rng, len(idx))):
                d = int(direction[i])
                self.pending_dir[i] = d
                self.pending_age[i] = 0.0
                self._pending[nonce] = int(i)
                length = self.len_c[i] if d > 0 else self.len_d[i]
                out.append(PacketMessage.request(d, self._rated(i, d), length, nonce))
        return out

    def _abandon(self, idx):
        if len(idx) == 0:
            return
        lookup = {i: nonce for nonce, i in self._pending.items()}
        for i in idx:
            nonce = lookup.get(int(i))
            if nonce is not None:
                del self._pending[nonce]
                self._abandoned[nonce] = (int(i), int(self.pending_dir[i]))
            self.pending_dir[i] = 0
            self.pending_age[i] = 0.0


def sample_initial_state(model, aged_state, count: int, rng: np.random.Generator):
    """Draw device SoCs and packet ages from an age-resolved macromodel state.

    Returns ``(soc, charging_idx, charge_remaining, discharging_idx, discharge_remaining)``.
    SoC is uniform inside the sampled bin; packet remaining time is uniform
    inside the sampled age slot.
    """
    n, width = model.n, model.grid.width
    v = np.maximum(aged_state.vector(), 0.0)
    v = v / v.sum()
    lc, ld = model.slots_c, model.slots_d
    cells = rng.choice(len(v), size=count, p=v)
    bins = cells % n
    soc = model.grid.lower + width * (bins + rng.random(count))
    slot = cells // n
    is_c = slot < lc
    is_d = slot > lc
    slot_dt = model.dt
    age_c = slot[is_c]
    rem_c = model.params.packet_charge - slot_dt * (age_c + rng.random(is_c.sum()))
    age_d = slot[is_d] - lc - 1
    rem_d = model.params.packet_discharge - slot_dt * (age_d + rng.random(is_d.sum()))
    rem_c = np.clip(rem_c, 1e-3, model.params.packet_charge)
    rem_d = np.clip(rem_d, 1e-3, model.params.packet_discharge) if ld else rem_d
    return soc, np.flatnonzero(is_c), rem_c, np.flatnonzero(is_d), rem_d


def binned_pmf(fleet: Fleet, grid, members=None) -> np.ndarray:
    """Empirical 3n_b occupancy (charge | standby | discharge) of a fleet subset."""
    members = np.arange(fleet.n) if members is None else np.asarray(members)
    idx = grid.index(fleet.soc[members])
    sw = fleet.switch[members]
    n = grid.n_bins
    offset = np.where(sw > 0, 0, np.where(sw < 0, 2 * n, n))
    counts = np.bincount(offset + idx, minlength=3 * n).astype(float)
    return counts / len(members)
