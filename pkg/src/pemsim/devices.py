"""Per-device models for packetized DERs: SoC dynamics, request law, mode logic.

Units: EWH state of charge is tank temperature in degC; ESS state of charge is
percent of capacity. Powers are kW, energies kJ, times seconds.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

SPECIFIC_HEAT = 4.186  # kJ / (kg degC)
WATER_DENSITY = 0.990  # kg / L near 50 degC


class DeviceClass(str, enum.Enum):
    EWH = "EWH"
    ESS = "ESS"


class Mode(str, enum.Enum):
    CHARGE = "CHARGE"
    DISCHARGE = "DISCHARGE"
    STANDBY = "STANDBY"
    OPT_OUT_LOW = "OPT_OUT_LOW"
    OPT_OUT_HIGH = "OPT_OUT_HIGH"


class ContractViolation(ValueError):
    """Raised when an operation is called outside its precondition."""


@dataclass(frozen=True)
class DrawParams:
    """Hot-water draw process: Poisson pulse arrivals delivered at a fixed flow rate.

    ``pulse_rate`` is arrivals per second, ``mean_energy`` the mean pulse size in
    kJ, ``energy_cv`` the coefficient of variation of pulse size (gamma
    distributed), ``flow_power`` the rate (kJ/s) at which a pulse drains heat.
    """

    pulse_rate: float = 1.0 / 300.0
    mean_energy: float = 333.0
    energy_cv: float = 0.3
    flow_power: float = 10.0

    @property
    def mean_power(self) -> float:
        """Long-run heat extraction in kW."""
        return self.pulse_rate * self.mean_energy


@dataclass(frozen=True)
class DeviceParams:
    device_class: DeviceClass
    charge_power: float  # kW
    setpoint: float
    lower: float
    upper: float
    discharge_power: float = 0.0
    charge_efficiency: float = 1.0
    discharge_efficiency: float = 1.0
    tank_liters: float = 0.0
    capacity_kwh: float = 0.0
    mean_time_to_request: float = 1.0 / 200.0  # rate constant m_R, 1/s
    packet_charge: float = 240.0  # s
    packet_discharge: float = 240.0  # s
    ambient: float = 21.0
    loss_time_constant: float = 150.0 * 3600.0
    draw: DrawParams | None = None

    def __post_init__(self):
        if not self.lower < self.setpoint < self.upper:
            raise ContractViolation("deadband must satisfy lower < setpoint < upper")
        if self.charge_power <= 0:
            raise ContractViolation("charge_power must be positive")
        if self.device_class is DeviceClass.EWH and self.discharge_power != 0:
            raise ContractViolation("EWH cannot discharge")
        for eff in (self.charge_efficiency, self.discharge_efficiency):
            if not 0 < eff <= 1:
                raise ContractViolation("efficiencies must lie in (0, 1]")
        if self.packet_charge <= 0 or self.packet_discharge <= 0 or self.mean_time_to_request <= 0:
            raise ContractViolation("packet lengths and m_R must be positive")
        if self.device_class is DeviceClass.EWH and self.tank_liters <= 0:
            raise ContractViolation("EWH needs a positive tank size")
        if self.device_class is DeviceClass.ESS and self.capacity_kwh <= 0:
            raise ContractViolation("ESS needs a positive capacity")

    @classmethod
    def ewh(cls, power: float = 4.5, liters: float = 275.0, setpoint: float = 52.0,
            deadband: tuple[float, float] = (48.9, 55.1), **kw) -> "DeviceParams":
        kw.setdefault("draw", DrawParams())
        return cls(DeviceClass.EWH, power, setpoint, deadband[0], deadband[1],
                   tank_liters=liters, **kw)

    @classmethod
    def ess(cls, power: float = 5.0, capacity_kwh: float = 13.5, setpoint: float = 75.0,
            deadband: tuple[float, float] = (55.0, 95.0), efficiency: float = 1.0,
            **kw) -> "DeviceParams":
        return cls(DeviceClass.ESS, power, setpoint, deadband[0], deadband[1],
                   discharge_power=power, charge_efficiency=efficiency,
                   discharge_efficiency=efficiency, capacity_kwh=capacity_kwh, **kw)

    @property
    def can_discharge(self) -> bool:
        return self.device_class is DeviceClass.ESS and self.discharge_power > 0

    @property
    def thermal_mass(self) -> float:
        """kJ per degC of tank contents."""
        return SPECIFIC_HEAT * WATER_DENSITY * self.tank_liters

    def charge_rate(self) -> float:
        """SoC units per second while charging at rated power."""
        if self.device_class is DeviceClass.EWH:
            return self.charge_efficiency * self.charge_power / self.thermal_mass
        return self.charge_efficiency * self.charge_power / (self.capacity_kwh * 3600.0) * 100.0

    def discharge_rate(self) -> float:
        if not self.can_discharge:
            return 0.0
        return self.discharge_efficiency * self.discharge_power / (self.capacity_kwh * 3600.0) * 100.0

    def loss_rate(self, x):
        """Standing-loss drift (SoC units / s); negative above ambient."""
        if self.device_class is DeviceClass.ESS:
            return 0.0 * x
        return -(x - self.ambient) / self.loss_time_constant

    def mean_draw_rate(self) -> float:
        """Mean end-use drift (SoC units / s), non-positive."""
        if self.device_class is DeviceClass.ESS or self.draw is None:
            return 0.0
        return -self.draw.mean_power / self.thermal_mass

    def packet_length(self, direction: int) -> float:
        return self.packet_charge if direction > 0 else self.packet_discharge

    def rated_power(self, direction: int) -> float:
        return self.charge_power if direction > 0 else self.discharge_power


@dataclass
class DrawProcess:
    params: DrawParams
    backlog: float = 0.0  # kJ still to be drained by active pulses

    @property
    def active_pulse_remaining(self) -> float:
        return self.backlog / self.params.flow_power if self.params.flow_power > 0 else 0.0


@dataclass
class DeviceState:
    """State owned by one device actor.

    ``packet_time_remaining`` is measured from ``local_clock``. Switch changes
    inside a tick (a response delivered mid-tick) are tracked through
    ``segment_start`` and ``duty`` so the energy integral is exact.
    """

    soc: float
    switch: int = 0
    mode: Mode = Mode.STANDBY
    packet_time_remaining: float = 0.0
    local_clock: float = 0.0
    packet_nonce: str | None = None
    pending_nonce: str | None = None
    pending_direction: int = 0
    pending_age: float = 0.0
    segment_start: float = 0.0
    duty: float = 0.0  # signed switch-seconds accumulated this tick
    draw: DrawProcess | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)
    abandoned: dict = field(default_factory=dict)  # timed-out nonce -> direction
    stray_responses: int = 0
    late_accepts: int = 0


def step_soc(state: DeviceState, params: DeviceParams, q_draw: float, dt: float,
             duty: float | None = None) -> DeviceState:
    """Advance SoC over one tick.

    The switch is held at ``state.switch`` for the whole tick unless ``duty``
    (time-averaged switch position in [-1, 1]) is given. ``q_draw`` is heat in
    kJ removed by end use during the tick.
    """
    if not dt > 0 or not math.isfinite(dt):
        raise ContractViolation(f"dt must be positive and finite, got {dt}")
    if not math.isfinite(state.soc):
        raise ContractViolation(f"non-finite SoC {state.soc}")
    zeta = state.switch if duty is None else duty
    drive = params.charge_rate() * max(zeta, 0.0) - params.discharge_rate() * max(-zeta, 0.0)
    end_use = 0.0
    if params.device_class is DeviceClass.EWH and q_draw:
        end_use = -q_draw / (params.thermal_mass * dt)
    return replace(state, soc=state.soc + dt * (drive + params.loss_rate(state.soc) + end_use))


def _charge_mu(x, lower, upper, setpoint, m_r):
    span = (setpoint - lower) / (upper - setpoint)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = m_r * (upper - x) / (x - lower) * span
    return np.where(x >= upper, 0.0, np.where(x <= lower, np.inf, mu))


def _discharge_mu(x, lower, upper, setpoint, m_r):
    # mirror image of the charge law, written out so the edges stay exact
    span = (upper - setpoint) / (setpoint - lower)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = m_r * (x - lower) / (upper - x) * span
    return np.where(x <= lower, 0.0, np.where(x >= upper, np.inf, mu))


def request_probability_arrays(x, lower, upper, setpoint, m_r, dt, direction):
    """Array form of ``request_probability`` for heterogeneous fleets."""
    if direction > 0:
        mu = _charge_mu(x, lower, upper, setpoint, m_r)
    else:
        mu = _discharge_mu(x, lower, upper, setpoint, m_r)
    inf = np.isinf(mu)
    return np.where(inf, 1.0, -np.expm1(-np.where(inf, 0.0, mu) * dt))


def request_rate(x, params: DeviceParams, direction: int = 1):
    """Rate parameter mu(x) of the request law, vectorised over ``x``.

    Discharge mirrors the charge law so the rate grows toward the upper edge.
    """
    x = np.asarray(x, dtype=float)
    m_r = params.mean_time_to_request
    if direction > 0:
        return _charge_mu(x, params.lower, params.upper, params.setpoint, m_r)
    return _discharge_mu(x, params.lower, params.upper, params.setpoint, m_r)


def request_probability(x, params: DeviceParams, dt: float, direction: int = 1):
    """Probability 1 - exp(-mu(x) dt) of a request within ``dt``; exactly 1 below the band."""
    if not dt > 0:
        raise ContractViolation("dt must be positive")
    mu = request_rate(x, params, direction)
    inf = np.isinf(mu)
    p = np.where(inf, 1.0, -np.expm1(-np.where(inf, 0.0, mu) * dt))
    return p if p.ndim else float(p)


def split_request(u, g_c, g_d):
    """Map a uniform draw to +1 (charge), -1 (discharge) or 0; never both."""
    return np.where(u < g_c, 1, np.where(u < g_c + (1.0 - g_c) * g_d, -1, 0))


def sample_draw(draw: DrawProcess, dt: float, rng: np.random.Generator) -> tuple[DrawProcess, float]:
    """Add Poisson pulse arrivals and return the heat drained during ``dt`` (kJ)."""
    if not dt > 0:
        raise ContractViolation("dt must be positive")
    p = draw.params
    backlog = draw.backlog
    if p.pulse_rate > 0:
        arrivals = int(rng.poisson(p.pulse_rate * dt))
        if arrivals:
            backlog += float(pulse_energy(rng, p, arrivals))
    drained = min(backlog, p.flow_power * dt)
    return DrawProcess(p, backlog - drained), drained


def pulse_energy(rng, p: DrawParams, count):
    """Total energy of ``count`` gamma-distributed pulses (vectorised over count)."""
    count = np.asarray(count)
    if p.energy_cv <= 0:
        return count * p.mean_energy
    shape = 1.0 / p.energy_cv ** 2
    out = np.zeros(count.shape)
    pos = count > 0
    out[pos] = rng.gamma(shape * count[pos], p.mean_energy / shape)
    return out if out.ndim else float(out)


def new_nonce(rng: np.random.Generator) -> str:
    return f"{int(rng.integers(0, 2**63)):016x}"


def _set_switch(st: DeviceState, value: int, offset: float) -> None:
    st.duty += st.switch * (offset - st.segment_start)
    st.segment_start = offset
    st.switch = value


def device_deliver(state: DeviceState, params: DeviceParams, msg, now: float):
    """Handle a message delivered at absolute time ``now`` (between ticks).

    Returns ``(state, outbound)``. Only RESPONSE messages matter to a device.
    """
    from .protocol import Kind, PacketMessage

    st = replace(state)
    out = []
    if msg.kind is not Kind.RESPONSE:
        return st, out
    offset = min(max(now - st.local_clock, 0.0), 1e9)
    nonce = msg.correlation_nonce
    if st.pending_nonce is not None and nonce == st.pending_nonce:
        direction = st.pending_direction
        st.pending_nonce, st.pending_direction, st.pending_age = None, 0, 0.0
        if msg.accept and st.mode in (Mode.STANDBY, Mode.OPT_OUT_HIGH) and not (
                st.mode is Mode.OPT_OUT_HIGH and direction > 0):
            _set_switch(st, direction, offset)
            st.mode = Mode.CHARGE if direction > 0 else Mode.DISCHARGE
            st.packet_time_remaining = offset + params.packet_length(direction)
            st.packet_nonce = nonce
        elif msg.accept:
            st.late_accepts += 1
            out.append(PacketMessage.release(direction, params.rated_power(direction), nonce))
    elif nonce in st.abandoned:
        direction = st.abandoned.pop(nonce)
        if msg.accept:
            st.late_accepts += 1
            out.append(PacketMessage.release(direction, params.rated_power(direction), nonce))
    else:
        st.stray_responses += 1
    return st, out


def device_tick(state: DeviceState, params: DeviceParams, inbox, dt: float,
                response_timeout: float = float("inf")):
    """Advance one device actor over ``(local_clock, local_clock + dt]``.

    Messages in ``inbox`` are handled as if delivered at the start of the tick.
    The tick integrates SoC (packet expiry inside the tick is exact), then at
    the new clock applies opt-out rules and samples at most one request.
    Returns ``(state, outbound)``.
    """
    from .protocol import PacketMessage

    if not dt > 0:
        raise ContractViolation("dt must be positive")
    out: list = []
    st = state
    for msg in inbox:
        st, extra = device_deliver(st, params, msg, st.local_clock)
        out.extend(extra)
    st = replace(st)

    if st.mode in (Mode.CHARGE, Mode.DISCHARGE, Mode.OPT_OUT_LOW) and st.packet_time_remaining <= dt:
        _set_switch(st, 0, max(st.packet_time_remaining, st.segment_start))
        st.mode, st.packet_nonce = Mode.STANDBY, None
    st.packet_time_remaining = max(0.0, st.packet_time_remaining - dt)
    _set_switch(st, st.switch, dt)
    duty = st.duty / dt

    q = 0.0
    if st.draw is not None:
        st.draw, q = sample_draw(st.draw, dt, st.rng)
    st = step_soc(st, params, q, dt, duty=duty)
    st.local_clock += dt
    st.duty, st.segment_start = 0.0, 0.0

    if st.pending_nonce is not None:
        st.pending_age += dt
        if st.pending_age >= response_timeout:
            st.abandoned[st.pending_nonce] = st.pending_direction
            st.pending_nonce, st.pending_direction, st.pending_age = None, 0, 0.0

    x = st.soc
    if x > params.upper and st.switch > 0:
        out.append(PacketMessage.opt_out(1, params.charge_power, 0.0, st.packet_nonce))
        st.mode, st.switch, st.packet_time_remaining, st.packet_nonce = Mode.OPT_OUT_HIGH, 0, 0.0, None
    elif x < params.lower and st.switch < 0:
        out.append(PacketMessage.opt_out(-1, params.discharge_power, 0.0, st.packet_nonce))
        st.mode, st.switch, st.packet_time_remaining, st.packet_nonce = Mode.STANDBY, 0, 0.0, None

    if st.mode is Mode.OPT_OUT_HIGH and x <= params.upper:
        st.mode = Mode.STANDBY
    elif st.mode is Mode.STANDBY and x > params.upper:
        st.mode = Mode.OPT_OUT_HIGH
    if st.mode is Mode.STANDBY and x < params.lower:
        if st.pending_nonce is not None:
            st.abandoned[st.pending_nonce] = st.pending_direction
            st.pending_nonce, st.pending_direction, st.pending_age = None, 0, 0.0
        nonce = new_nonce(st.rng)
        st.mode, st.switch = Mode.OPT_OUT_LOW, 1
        st.packet_time_remaining = params.packet_charge
        st.packet_nonce = nonce
        out.append(PacketMessage.opt_out(1, params.charge_power, params.packet_charge, nonce))

    if st.pending_nonce is None and st.mode in (Mode.STANDBY, Mode.OPT_OUT_HIGH):
        u = st.rng.random()
        g_c = request_probability(x, params, dt, 1) if st.mode is Mode.STANDBY else 0.0
        g_d = request_probability(x, params, dt, -1) if params.can_discharge else 0.0
        direction = int(split_request(u, g_c, g_d))
        if direction:
            nonce = new_nonce(st.rng)
            st.pending_nonce, st.pending_direction, st.pending_age = nonce, direction, 0.0
            out.append(PacketMessage.request(direction, params.rated_power(direction),
                                             params.packet_length(direction), nonce))
    return st, out


def device_power(state: DeviceState, params: DeviceParams) -> float:
    """Instantaneous electrical power (kW, positive = consumption)."""
    if state.switch > 0:
        return params.charge_power
    if state.switch < 0:
        return -params.discharge_power
    return 0.0
