"""Reduced two-area frequency model with droop, tie-line flow and AGC.

Everything is per unit on ``base_mw`` with frequency in per unit of
``nominal_hz``. The internal area holds the local generators, a bulk battery
and the DER fleet; the external area holds one lumped import generator.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np


class GridError(RuntimeError):
    pass


class IngestionError(ValueError):
    def __init__(self, row: int, detail: str):
        super().__init__(f"row {row}: {detail}")
        self.row = row


@dataclass(frozen=True)
class Resource:
    name: str
    area: int  # 0 internal, 1 external
    capacity: float  # MW
    scheduled: float  # MW
    droop: float | None  # per unit on own capacity; None = no primary response
    gain: float  # AGC integral gain k
    kind: str = "generator"  # generator | battery | der


@dataclass
class GridParams:
    base_mw: float = 609.0
    nominal_hz: float = 60.0
    inertia: tuple = (10.0, 10.0)  # M per area, s
    damping: tuple = (1.0, 1.0)  # D per area, pu/pu
    tie_coefficient: float = 0.1  # T, pu/s
    bias: tuple = (1.0, 1.0)  # B per area
    # "natural": B multiplies the area's own frequency response D + sum(cap/R);
    # a number multiplies B directly
    bias_scale: float | str = "natural"
    governor_lag: float = 0.5  # s
    der_lag: float = 2.0  # s, used when the fleet is represented by a lag
    agc_scale: float = 0.02  # 1/s, multiplies every integral gain k
    droop_scale: float = 0.001  # converts the droop numbers below to per unit
    battery_energy_mwh: float = 45.0
    battery_power_mw: float = 20.0
    battery_initial_fraction: float = 0.5
    der_margin: float = 0.2  # fraction of the SoC range over which w ramps to 0
    # a coupled fleet's AGC setpoint may lead its delivered output by at most
    # this much (MW); stops the integrator winding up on undeliverable requests
    der_windup_mw: float = 1.0
    resources: tuple = field(default_factory=lambda: (
        Resource("external", 1, 240.0, 218.0, 33, 1.0),
        Resource("local1", 0, 130.0, 86.2, 33, 1.0),
        Resource("local2", 0, 35.0, 26.6, 33, 1.0),
        Resource("battery", 0, 20.0, 0.0, None, 1.0, "battery"),
        Resource("der", 0, 18.0, 4.68, 20, 5.1, "der"),
    ))

    def __post_init__(self):
        if min(self.inertia) <= 0 or min(self.damping) <= 0:
            raise ValueError("inertia and damping must be positive")
        for r in self.resources:
            if r.droop is not None and r.droop <= 0:
                raise ValueError(f"droop of {r.name} must be positive")

    def droop_pu(self, r: Resource) -> float | None:
        return None if r.droop is None else r.droop * self.droop_scale

    @classmethod
    def from_config(cls, cfg: dict | None) -> "GridParams":
        cfg = dict(cfg or {})
        res = cfg.pop("resources", None)
        for key in ("inertia", "damping", "bias"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        params = cls(**cfg)
        if res is not None:
            params = replace(params, resources=tuple(Resource(**r) for r in res))
        return params


@dataclass
class GridState:
    t: float
    freq: np.ndarray  # per-unit frequency deviation per area
    tie: float  # per-unit export from internal to external area
    mech: np.ndarray  # per-resource output deviation (MW)
    setpoint: np.ndarray  # per-resource AGC setpoint deviation (MW)
    battery_energy: float  # MWh
    der_reference: float = 0.0  # MW deviation requested from the fleet

    def copy(self) -> "GridState":
        return GridState(self.t, self.freq.copy(), self.tie, self.mech.copy(),
                         self.setpoint.copy(), self.battery_energy, self.der_reference)

    def freq_hz(self, params: GridParams) -> np.ndarray:
        return self.freq * params.nominal_hz

    def output_mw(self, params: GridParams) -> np.ndarray:
        sched = np.array([r.scheduled for r in params.resources])
        return sched + self.mech


def frequency_response(params: GridParams, area: int) -> float:
    """Per-unit stiffness D + sum(capacity / R) of one area."""
    stiff = params.damping[area]
    for r in params.resources:
        droop = params.droop_pu(r)
        if r.area == area and droop is not None:
            stiff += r.capacity / droop / params.base_mw
    return stiff


def compute_ace(state: GridState, params: GridParams, area: int = 0) -> float:
    """B*df + dP_tie for the internal area (export positive), mirrored for the external one."""
    tie = state.tie if area == 0 else -state.tie
    scale = params.bias_scale
    if scale == "natural":
        scale = frequency_response(params, area)
    return params.bias[area] * float(scale) * state.freq[area] + tie


def der_weight(z_hat: float | None, z_lower: float, z_upper: float, charging: bool,
               margin: float = 0.2) -> float:
    """SoC-aware DER participation in [0, 1].

    Full weight away from the limits; linear ramp to zero over the last
    ``margin`` of the range toward the limit the requested motion approaches.
    """
    if z_hat is None:
        return 1.0
    band = margin * (z_upper - z_lower)
    if band <= 0:
        return 1.0
    room = (z_upper - z_hat) if charging else (z_hat - z_lower)
    return float(np.clip(room / band, 0.0, 1.0))


def agc_dispatch(ace: float, params: GridParams, setpoint: np.ndarray, dt: float,
                 z_hat: float | None = None, limits=(0.0, 1.0), state: GridState | None = None):
    """Integrate -k*ACE into every participant's setpoint for ``dt``.

    ``setpoint`` entries are output deviations in MW (the DER entry is an
    injection, so a negative value means more consumption). Returns the new
    setpoint vector and the DER weight used.
    """
    new = setpoint.copy()
    weight = 1.0
    for i, r in enumerate(params.resources):
        if r.area != 0 and r.kind != "generator":
            continue
        area_ace = ace if r.area == 0 else (compute_ace(state, params, 1) if state is not None else 0.0)
        k = r.gain * params.agc_scale
        if r.kind == "der":
            weight = der_weight(z_hat, limits[0], limits[1], charging=area_ace > 0,
                                margin=params.der_margin)
            k *= weight
        step = -k * area_ace * params.base_mw * dt
        lo, hi = -r.scheduled, r.capacity - r.scheduled
        if r.kind == "battery":
            lo, hi = -r.capacity, r.capacity
        if r.kind == "der":
            lo, hi = -(r.capacity - r.scheduled), r.scheduled
        new[i] = float(np.clip(new[i] + step, lo, hi))
    return new, weight


class TwoAreaGrid:
    """Owns a GridState and advances it with RK4 at the grid step."""

    def __init__(self, params: GridParams | None = None, agc: bool = True):
        self.params = params or GridParams()
        self.agc = agc
        p = self.params
        self.n_res = len(p.resources)
        self.area = np.array([r.area for r in p.resources])
        self.kind = [r.kind for r in p.resources]
        self.der_index = next((i for i, r in enumerate(p.resources) if r.kind == "der"), None)
        self.battery_index = next((i for i, r in enumerate(p.resources) if r.kind == "battery"), None)
        self.droop_gain = np.array([
            0.0 if p.droop_pu(r) is None else r.capacity / p.droop_pu(r) / p.base_mw
            for r in p.resources])  # pu power per pu frequency
        self.state = GridState(0.0, np.zeros(2), 0.0, np.zeros(self.n_res), np.zeros(self.n_res),
                               p.battery_energy_mwh * p.battery_initial_fraction)
        self.der_weight = 1.0
        self.last_residual = 0.0

    # --------------------------------------------------------------- physics
    def _injections(self, freq, mech, setpoint, der_actual):
        """Per-resource injection deviation in pu (what enters the swing equation)."""
        base = self.params.base_mw
        inj = mech / base
        if self.der_index is not None and der_actual is not None:
            inj[self.der_index] = der_actual / base
        return inj

    def derivatives(self, freq, tie, mech, setpoint, der_actual, disturbance):
        """Returns (dfreq, dtie, dmech) and the power-balance terms of the internal area."""
        p = self.params
        base = p.base_mw
        inj = self._injections(freq, mech, setpoint, der_actual)
        net = np.array([inj[self.area == 0].sum(), inj[self.area == 1].sum()])
        net[0] += disturbance[0] / base
        net[1] += disturbance[1] / base
        flow = np.array([tie, -tie])
        damping = np.array(p.damping) * freq
        dfreq = (net - flow - damping) / np.array(p.inertia)
        dtie = p.tie_coefficient * (freq[0] - freq[1])
        target = setpoint - self.droop_gain * freq[self.area] * base
        dmech = np.zeros(self.n_res)
        for i, kind in enumerate(self.kind):
            if kind == "generator":
                dmech[i] = (target[i] - mech[i]) / p.governor_lag
            elif kind == "der":
                dmech[i] = (target[i] - mech[i]) / p.der_lag
        return dfreq, dtie, dmech, (net, flow, damping)

    def step(self, dt: float = 0.1, solar_mw: float = 0.0, load_mw: float = 0.0,
             external_load_mw: float = 0.0, der_actual: float | None = None,
             z_hat: float | None = None, limits=(0.0, 1.0)) -> GridState:
        """Advance by ``dt``. ``der_actual`` (MW injection deviation) overrides the
        DER lag when a real fleet is coupled in."""
        if not dt > 0 or dt > 0.1 + 1e-12:
            raise GridError("grid step must satisfy 0 < dt <= 0.1 s")
        p = self.params
        st = self.state
        dist = (solar_mw - load_mw, -external_load_mw)

        if self.battery_index is not None:
            b = self.battery_index
            energy = st.battery_energy
            cap = p.battery_power_mw
            hi = min(cap, energy / (dt / 3600.0))
            lo = max(-cap, -(p.battery_energy_mwh - energy) / (dt / 3600.0))
            st.mech[b] = float(np.clip(st.setpoint[b], lo, hi))

        y0 = (st.freq, st.tie, st.mech)

        def f(freq, tie, mech):
            d = self.derivatives(freq, tie, mech, st.setpoint, der_actual, dist)
            return d[0], d[1], d[2]

        k1 = f(*y0)
        k2 = f(st.freq + 0.5 * dt * k1[0], st.tie + 0.5 * dt * k1[1], st.mech + 0.5 * dt * k1[2])
        k3 = f(st.freq + 0.5 * dt * k2[0], st.tie + 0.5 * dt * k2[1], st.mech + 0.5 * dt * k2[2])
        k4 = f(st.freq + dt * k3[0], st.tie + dt * k3[1], st.mech + dt * k3[2])
        freq = st.freq + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        tie = st.tie + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        mech = st.mech + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if self.battery_index is not None:
            mech[self.battery_index] = st.mech[self.battery_index]
        if not (np.all(np.isfinite(freq)) and math.isfinite(tie) and np.all(np.isfinite(mech))):
            raise GridError(f"non-finite grid state at t={st.t:.3f}")

        energy = st.battery_energy
        if self.battery_index is not None:
            energy -= mech[self.battery_index] * dt / 3600.0
            energy = min(max(energy, 0.0), p.battery_energy_mwh)

        new = GridState(st.t + dt, freq, float(tie), mech, st.setpoint.copy(), energy)
        if der_actual is not None and self.der_index is not None:
            new.mech[self.der_index] = der_actual
        if self.agc:
            ace = compute_ace(new, p, 0)
            new.setpoint, self.der_weight = agc_dispatch(ace, p, new.setpoint, dt, z_hat, limits, new)
            if der_actual is not None and self.der_index is not None:
                i = self.der_index
                band = p.der_windup_mw
                new.setpoint[i] = float(np.clip(new.setpoint[i], der_actual - band, der_actual + band))
        if self.der_index is not None:
            i = self.der_index
            new.der_reference = new.setpoint[i] - self.droop_gain[i] * new.freq[0] * p.base_mw
        self.state = new
        return new

    def power_balance_residual(self, der_actual=None, solar_mw=0.0, load_mw=0.0) -> float:
        """Residual of M*df/dt = sum(injections) - tie - D*df for the internal area."""
        st = self.state
        dist = (solar_mw - load_mw, 0.0)
        dfreq, _, _, (net, flow, damping) = self.derivatives(
            st.freq, st.tie, st.mech, st.setpoint, der_actual, dist)
        return float(abs(self.params.inertia[0] * dfreq[0] - (net[0] - flow[0] - damping[0])))

    def droop_steady_state(self, disturbance_mw: float) -> float:
        """Closed-form per-unit frequency deviation with AGC off."""
        p = self.params
        stiffness = sum(p.damping) + float(self.droop_gain.sum())
        return disturbance_mw / p.base_mw / stiffness

    @property
    def der_consumption_delta(self) -> float:
        """MW of extra fleet consumption requested (negative injection)."""
        return -self.state.der_reference


def ingest_solar_profile(path, dt: float = 0.1, baseline: float | str | None = "first"):
    """Read ``timestamp,MW`` rows and resample onto a ``dt`` grid.

    Timestamps are seconds (float) or ISO-8601 times. Returns ``(t, mw)`` with
    ``t`` starting at zero. ``baseline`` is subtracted: "first" uses the first
    sample, a number is used as is, None keeps absolute values.
    """
    from datetime import datetime

    times, values = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header_seen = False
        for row_no, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if len(row) < 2:
                raise IngestionError(row_no, "expected two columns (timestamp, MW)")
            raw_t, raw_v = row[0].strip(), row[1].strip()
            try:
                value = float(raw_v)
            except ValueError:
                if not header_seen and not times:
                    header_seen = True
                    continue
                raise IngestionError(row_no, f"bad MW value {raw_v!r}") from None
            try:
                t = float(raw_t)
            except ValueError:
                try:
                    t = datetime.fromisoformat(raw_t).timestamp()
                except ValueError:
                    raise IngestionError(row_no, f"bad timestamp {raw_t!r}") from None
            if not (math.isfinite(t) and math.isfinite(value)):
                raise IngestionError(row_no, "non-finite value")
            if times and t <= times[-1]:
                raise IngestionError(row_no, "timestamps must increase strictly")
            times.append(t)
            values.append(value)
    if len(times) < 2:
        raise IngestionError(0, "need at least two samples")
    src_t = np.array(times) - times[0]
    src_v = np.array(values)
    if baseline == "first":
        src_v = src_v - src_v[0]
    elif baseline is not None:
        src_v = src_v - float(baseline)
    n = int(math.floor(src_t[-1] / dt + 1e-9))
    grid_t = np.arange(n + 1) * dt
    if grid_t[-1] < src_t[-1]:
        grid_t = np.append(grid_t, src_t[-1])
    return grid_t, np.interp(grid_t, src_t, src_v)
