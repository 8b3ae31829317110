"""Co-simulation of fleet, channel, coordinator, estimator and grid on one scheduler."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as mx
from .coordinator import Coordinator, CoordinatorConfig
from .devices import DeviceClass
from .estimator import FleetEstimator, NoiseConfig, total_variation
from .fleet import OPT_OUT_HIGH, OPT_OUT_LOW, Fleet, binned_pmf, sample_initial_state
from .grid import GridParams, TwoAreaGrid, compute_ace, ingest_solar_profile
from .macromodel import Macromodel, fleet_soc, pmf_soc
from .protocol import DROPPED, ChannelModel, Kind, PacketMessage, send
from .scenario import GroupSpec, ScenarioError, build_params, resolve
from .scheduler import Priority, Scheduler

ESS_PRIOR_BETA = 0.5  # symmetric acceptance used for the ESS warm start


class SimulationError(RuntimeError):
    """A module error raised during a run, tagged with the scenario and time."""


@dataclass
class GroupModel:
    spec: GroupSpec
    model: Macromodel
    beta: tuple
    baseline_kw: float
    state: object  # age-resolved stationary MacroState


def group_model(spec: GroupSpec, n_bins: int = 20, dt: float = 60.0, device_dt: float = 1.0) -> GroupModel:
    """Macromodel of a group's mean device and its baseline operating point.

    EWH groups use the baseline optimisation. Lossless storage has a flat
    baseline objective, so ESS groups start from a symmetric acceptance.
    """
    model = Macromodel(spec.mean_params, n_bins, dt, device_dt, n_devices=spec.count)
    if spec.mean_params.device_class is DeviceClass.EWH:
        bc, bd, p_nom, st = model.baseline_optimization()
    else:
        bc = bd = ESS_PRIOR_BETA
        st = model.stationary_distribution(bc, bd)
        p_nom = model.h_dem(st.q)
    return GroupModel(spec, model, (bc, bd), float(p_nom), st)


def _reference_function(data: dict, baseline_kw: float):
    ref = data["reference"]
    kind = ref["kind"]
    offset = float(ref.get("offset", 0.0))
    base = baseline_kw if ref.get("relative_to_baseline", kind in ("baseline", "grid")) else 0.0
    if kind in ("baseline", "grid"):
        return lambda t: base + offset
    if kind == "steps":
        times = np.array([s[0] for s in ref["steps"]], dtype=float)
        values = np.array([s[1] for s in ref["steps"]], dtype=float) * float(ref.get("scale", 1.0))
        if np.any(np.diff(times) <= 0):
            raise ScenarioError("reference steps must have increasing times")

        def steps(t):
            i = int(np.searchsorted(times, t, side="right")) - 1
            return base + offset + (values[max(i, 0)])
        return steps
    raw = np.loadtxt(resolve(data, ref["file"]), delimiter=",", skiprows=1, ndmin=2)
    if raw.shape[1] < 2 or np.any(np.diff(raw[:, 0]) <= 0):
        raise ScenarioError(f"reference file {ref['file']}: need increasing (t, value) rows")
    scale = float(ref.get("scale", 1.0))
    return lambda t: base + offset + scale * float(np.interp(t, raw[:, 0], raw[:, 1]))


@dataclass
class RunResult:
    metrics: mx.RunMetrics
    tables: dict  # name -> (header, rows)
    files: list = field(default_factory=list)
    wall_seconds: float = 0.0
    max_lag: float = 0.0


class CoSimulation:
    """Builds every module from a validated scenario and runs it."""

    def __init__(self, data: dict, seed: int | None = None, time_mode: str | None = None,
                 speedup: float | None = None):
        self.data = data
        self.seed = int(data.get("seed", 0) if seed is None else seed)
        self.duration = float(data["duration"])
        self.device_dt = float(data.get("device_dt", 1.0))
        self.warmup = float(data.get("warmup", 600.0))
        self.record_period = float(data.get("record_period", 1.0))
        mode = time_mode or data.get("time_mode", "VIRTUAL")
        self.scheduler = Scheduler(mode, speedup if speedup is not None else data.get("speedup"))

        ss = np.random.SeedSequence(self.seed)
        rng_params, rng_init, rng_fleet, rng_channel = (np.random.default_rng(s) for s in ss.spawn(4))
        self.rng_channel = rng_channel

        params, groups = build_params(data, rng_params)
        est_cfg = data.get("estimator", {})
        n_bins = int(est_cfg.get("n_bins", 20))
        report_dt = float(est_cfg.get("dt", 60.0))
        self.report_dt = report_dt
        self.groups = [group_model(g, n_bins, report_dt, self.device_dt) for g in groups]
        self.baseline_kw = sum(g.baseline_kw for g in self.groups)

        coord_cfg = dict(data.get("coordinator", {}))
        self.meter_period = float(coord_cfg.pop("meter_period", 1.0))
        timeout = float(coord_cfg.pop("response_timeout", 10.0))
        metric_cfg = data.get("metrics", {})
        self.track_reconstruction = bool(metric_cfg.get("reconstruction", False))
        self.step_transient = float(metric_cfg.get("step_transient", 300.0))

        soc, seeds = self._initial_state(params, rng_init, data["fleet"].get("initial", "stationary"))
        self.fleet = Fleet(params, soc, rng_fleet, self.device_dt, timeout,
                           record_events=self.track_reconstruction)
        timer_seeds = []
        for direction, idx, rem in seeds:
            timer_seeds += self.fleet.start_packets(idx, direction, rem)
        self.coordinator = Coordinator(CoordinatorConfig(**coord_cfg), record_events=self.track_reconstruction)
        self.coordinator.seed_timers(timer_seeds, 0.0)
        self.coordinator.events.clear()
        self.initial_power = self.fleet.power()
        self.initial_estimate = self.coordinator.estimate

        self.channel = ChannelModel.from_config(data.get("channel"))
        self.reference = _reference_function(data, self.baseline_kw)
        self.coordinator.set_reference(self.reference(0.0))

        self.estimator = None
        self.limits = None
        if est_cfg.get("enabled", False):
            g = self.groups[0]
            self.limits = g.model.limits()
            shape = est_cfg.get("expiry_shape", "fixed")
            if shape != "uniform":
                g.model.calibrate_expiry(g.state, adaptive=shape == "adaptive")
            noise = NoiseConfig(demand_fraction=float(est_cfg.get("demand_fraction", 0.01)),
                                process=float(est_cfg.get("process", 1e-6)),
                                count_dispersion=float(est_cfg.get("count_dispersion", 1.0)),
                                count_relative=float(est_cfg.get("count_relative", 0.0)),
                                use_optout=bool(est_cfg.get("use_optout", False)))
            self.estimator = FleetEstimator(g.model, g.state.q, noise, max(g.baseline_kw, 1.0), self.limits)
        self.checkpoints = est_cfg.get("checkpoints")
        if self.checkpoints is None:
            self.checkpoints = list(np.arange(3600.0, self.duration + 1e-9, 3600.0))

        self.grid = None
        grid_cfg = data.get("grid", {})
        if grid_cfg.get("enabled", False):
            self._build_grid(grid_cfg)

        self.trace_rows: list = []
        self.est_rows: list = []
        self.grid_rows: list = []
        self.reports: list = []
        self.message_counts = {"sent": 0, "dropped": 0}

    # ------------------------------------------------------------ setup
    def _initial_state(self, params, rng, how):
        n = len(params)
        soc = np.empty(n)
        seeds = []
        for g in self.groups:
            spec = g.spec
            p = spec.mean_params
            if how == "stationary":
                s, ic, rc, idd, rd = sample_initial_state(g.model, g.state, spec.count, rng)
                soc[spec.start:spec.stop] = s
                if len(ic):
                    seeds.append((1, spec.start + ic, rc))
                if len(idd):
                    seeds.append((-1, spec.start + idd, rd))
            elif how == "uniform":
                soc[spec.start:spec.stop] = rng.uniform(p.lower, p.upper, spec.count)
            else:
                soc[spec.start:spec.stop] = p.setpoint
        return soc, seeds

    def _build_grid(self, cfg):
        params = GridParams.from_config(cfg.get("params"))
        self.grid = TwoAreaGrid(params, agc=bool(cfg.get("agc", True)))
        self.grid_dt = float(cfg.get("dt", 0.1))
        self.grid_record = float(cfg.get("record_period", 1.0))
        self.der_scale = float(cfg.get("der_scale", 1.0))
        self.coupled = self.data["reference"]["kind"] == "grid"
        if self.coupled and self.limits is None:
            g = self.groups[0]
            self.limits = g.model.limits()
        solar = None
        if "solar_file" in cfg:
            t, mw = ingest_solar_profile(resolve(self.data, cfg["solar_file"]), self.grid_dt)
            mw = mw * float(cfg.get("solar_scale", 1.0))
            start = float(cfg.get("solar_start", 0.0))
            base = float(np.interp(start, t, mw))
            solar = (t - start, mw - base)
        step = cfg.get("solar_step")

        def solar_mw(now):
            value = 0.0
            if solar is not None:
                value += float(np.interp(now, solar[0], solar[1]))
            if step is not None and now >= step["time"]:
                value += float(step["mw"])
            return value
        self.solar_mw = solar_mw

    # ------------------------------------------------------------ messaging
    def _transmit(self, msg, now, handler):
        self.message_counts["sent"] += 1
        out = send(msg, self.channel, now, self.rng_channel)
        if out is DROPPED:
            self.message_counts["dropped"] += 1
            return
        msg, at = out
        self.scheduler.at(at, Priority.CHANNEL, handler, msg)

    def _to_coordinator(self, now, msg):
        for reply in self.coordinator.handle(msg, now):
            self._transmit(reply, now, self._to_fleet)

    def _to_fleet(self, now, msg):
        for reply in self.fleet.deliver(msg, now):
            self._transmit(reply, now, self._to_coordinator)

    # ------------------------------------------------------------ events
    def _device_tick(self, now):
        out = self.fleet.tick()
        if abs(self.fleet.clock - now) > 1e-6:
            self.fleet.clock = now
        k = round(now / self.meter_period)
        if abs(k * self.meter_period - now) < 1e-9:
            reading = self.fleet.power(now) + self.coordinator.config.base_load
            self._transmit(PacketMessage.measurement(reading), now, self._to_coordinator)
        for msg in out:
            self._transmit(msg, now, self._to_coordinator)

    def _reference_tick(self, now):
        if self.grid is None or not self.coupled:
            self.coordinator.set_reference(self.reference(now))

    def _grid_tick(self, now):
        # the grid integrates over (now, now + dt] with the fleet held at ``now``
        z_hat = None
        if self.coupled:
            if self.estimator is not None:
                z_hat = self.estimator.estimated_soc().z
            else:
                g = self.groups[0]
                z_hat = fleet_soc(self.fleet.soc[g.spec.start:g.spec.stop], g.model.grid)
        der_actual = None
        if self.coupled:
            der_actual = -(self.fleet.power(now) - self.baseline_kw) / 1000.0 / self.der_scale
        self.grid.step(self.grid_dt, solar_mw=self.solar_mw(now), der_actual=der_actual,
                       z_hat=z_hat, limits=self.limits or (0.0, 1.0))
        if self.coupled:
            delta_kw = self.grid.der_consumption_delta * 1000.0 * self.der_scale
            self.coordinator.set_reference(self.baseline_kw + delta_kw)
        k = round(self.grid.state.t / self.grid_record)
        if abs(k * self.grid_record - self.grid.state.t) < 1e-6:
            st = self.grid.state
            p = self.grid.params
            out = st.output_mw(p)
            self.grid_rows.append([round(st.t, 6), *(st.freq_hz(p)), st.tie * p.base_mw,
                                   compute_ace(st, p, 0), *out, st.der_reference,
                                   self.solar_mw(now), self.grid.der_weight, st.battery_energy])

    def _report(self, now):
        rep = self.coordinator.report_measurements(now)
        self.reports.append(rep)
        if self.estimator is None:
            return
        self.estimator.on_report(rep)
        g = self.groups[0]
        members = slice(g.spec.start, g.spec.stop)
        est = self.estimator.estimated_soc()
        z_true = fleet_soc(self.fleet.soc[members], g.model.grid)
        empirical = binned_pmf(self.fleet, g.model.grid, np.arange(g.spec.start, g.spec.stop))
        tv = total_variation(self.estimator.q, empirical)
        self.est_rows.append([now, est.z, z_true, est.z - z_true, tv, rep.demand,
                              rep.beta_c if rep.beta_c is not None else math.nan,
                              rep.beta_d if rep.beta_d is not None else math.nan,
                              rep.n_req_c, rep.n_req_d, rep.n_optout])

    def _record(self, now):
        coord = self.coordinator
        coord.advance(now)
        fleet = self.fleet
        row = [now, coord.reference, fleet.power(now), coord.estimate, coord.feedback()]
        for g in self.groups:
            x = fleet.soc[g.spec.start:g.spec.stop]
            p10, p90 = np.percentile(x, [10, 90])
            row += [float(x.mean()), float(p10), float(p90)]
        sw = fleet.switch
        mode = fleet.mode
        row += [int((sw > 0).sum()), int((sw < 0).sum()),
                int(((mode == OPT_OUT_LOW) | (mode == OPT_OUT_HIGH)).sum())]
        self.trace_rows.append(row)

    # ------------------------------------------------------------ run
    def trace_header(self) -> list[str]:
        h = ["t", "reference_kw", "demand_kw", "reconstructed_kw", "feedback_kw"]
        for g in self.groups:
            h += [f"soc_mean_{g.spec.name}", f"soc_p10_{g.spec.name}", f"soc_p90_{g.spec.name}"]
        return h + ["n_charging", "n_discharging", "n_opted_out"]

    def grid_header(self) -> list[str]:
        names = [f"{r.name}_mw" for r in self.grid.params.resources]
        return ["t", "freq_hz_internal", "freq_hz_external", "tie_mw", "ace_pu", *names,
                "der_reference_mw", "solar_mw", "der_weight", "battery_energy_mwh"]

    EST_HEADER = ["t", "z_hat", "z_true", "z_error", "tv_error", "demand_kw", "beta_c", "beta_d",
                  "n_req_c", "n_req_d", "n_optout"]

    def schedule(self):
        sch = self.scheduler
        end = self.duration
        if end <= 0:
            return
        if self.grid is not None:
            sch.every(self.grid_dt, Priority.GRID, self._grid_tick, start=0.0, until=end - self.grid_dt / 2)
        sch.every(self.device_dt, Priority.GRID, self._reference_tick, start=0.0, until=end)
        sch.every(self.device_dt, Priority.DEVICES, self._device_tick, start=self.device_dt, until=end)
        sch.every(self.report_dt, Priority.ESTIMATOR, self._report, start=0.0, until=end)
        sch.every(self.record_period, Priority.RECORDER, self._record, start=self.record_period, until=end)

    def run(self) -> RunResult:
        wall = time.perf_counter()
        self.schedule()
        try:
            self.scheduler.run(self.duration)
        except Exception as exc:
            raise SimulationError(f"scenario {self.data.get('name')!r} failed at "
                                  f"t={self.scheduler.now:.3f}s: {exc}") from exc
        result = RunResult(self.compute_metrics(), self.tables(), wall_seconds=time.perf_counter() - wall,
                           max_lag=self.scheduler.max_lag)
        return result

    def tables(self) -> dict:
        out = {"trace": (self.trace_header(), self.trace_rows)}
        if self.estimator is not None:
            out["estimator"] = (self.EST_HEADER, self.est_rows)
        if self.grid is not None:
            out["grid"] = (self.grid_header(), self.grid_rows)
        return out

    def trace_columns(self) -> dict:
        header = self.trace_header()
        arr = np.array(self.trace_rows, dtype=float).reshape(-1, len(header))
        return {h: arr[:, i] for i, h in enumerate(header)}

    def compute_metrics(self) -> mx.RunMetrics:
        ref = self.data["reference"]
        steps = None
        if ref["kind"] == "steps":
            steps = [(s[0], s[1]) for s in ref["steps"]]
        deadbands = {g.spec.name: (g.spec.mean_params.lower, g.spec.mean_params.upper) for g in self.groups}
        m = mx.compute_metrics(self.trace_columns(), self.warmup, self.baseline_kw, steps,
                               self.step_transient, self.duration, deadbands)
        totals = {"requests_charge": 0, "requests_discharge": 0, "accepted_charge": 0,
                  "accepted_discharge": 0, "opt_out_notices": 0}
        for r in self.reports:
            totals["requests_charge"] += r.n_req_c
            totals["requests_discharge"] += r.n_req_d
            totals["accepted_charge"] += r.n_acc_c
            totals["accepted_discharge"] += r.n_acc_d
            totals["opt_out_notices"] += r.n_optout
        totals.update(messages_sent=self.message_counts["sent"], messages_dropped=self.message_counts["dropped"],
                      malformed=self.coordinator.malformed, late_accepts=self.fleet.late_accepts,
                      delay_clamps=self.channel.clamp_count)
        m.counts = totals
        if self.est_rows:
            m.estimator = estimator_summary(np.array(self.est_rows, dtype=float), self.warmup, self.checkpoints)
        if self.grid_rows:
            m.grid = grid_summary(np.array(self.grid_rows, dtype=float), self.grid_header())
        if self.track_reconstruction:
            m.reconstruction = self.reconstruction_metrics()
        return m

    def reconstruction_metrics(self) -> dict:
        truth = mx.step_series(0.0, self.initial_power, self.fleet.events)
        estimate = mx.step_series(0.0, self.initial_estimate - self.coordinator.config.base_load,
                                  self.coordinator.events)
        start = min(self.warmup, self.duration)
        cols = self.trace_columns()
        err = cols["reconstructed_kw"] - self.coordinator.config.base_load - cols["demand_kw"]
        post = cols["t"] > self.warmup
        rated = float(np.mean(self.fleet.p_charge))
        out = {
            "rms_kw": mx.continuous_rms(estimate, truth, start, self.duration),
            "bias_kw": mx.continuous_mean(estimate, truth, start, self.duration),
            "tick_rms_kw": mx.rms(err[post], np.zeros(post.sum())),
            "within_rated_fraction": float(np.mean(np.abs(err[post]) <= rated + 1e-9)) if post.any() else math.nan,
            "rated_kw": rated,
        }
        if self.baseline_kw:
            out["rms_pct"] = 100.0 * out["rms_kw"] / self.baseline_kw
        return out

    def write(self, result: RunResult, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        files = []
        for name, (header, rows) in result.tables.items():
            files.append(mx.write_csv(out_dir / f"{name}.csv", header, rows))
        files.append(mx.write_csv(out_dir / "summary.csv", ["metric", "value"], result.metrics.rows()))
        result.files = files
        return files


def estimator_summary(rows: np.ndarray, warmup: float, checkpoints) -> dict:
    rows = rows.reshape(-1, len(CoSimulation.EST_HEADER))
    t, err, tv = rows[:, 0], rows[:, 3], rows[:, 4]
    post = t > warmup
    out = {"max_abs_z_error": float(np.abs(err[post]).max()) if post.any() else math.nan,
           "mean_abs_z_error": float(np.abs(err[post]).mean()) if post.any() else math.nan}
    tvs = []
    for c in checkpoints:
        i = np.flatnonzero(np.isclose(t, c))
        if len(i):
            tvs.append(float(tv[i[0]]))
    out["max_checkpoint_tv"] = max(tvs) if tvs else math.nan
    out["checkpoints"] = len(tvs)
    return out


def grid_summary(rows: np.ndarray, header: list[str]) -> dict:
    rows = rows.reshape(-1, len(header))
    col = {h: rows[:, i] for i, h in enumerate(header)}
    tail = col["t"] >= col["t"][-1] - 60.0 if len(rows) else np.zeros(0, bool)
    out = {"max_abs_freq_dev_hz": float(np.abs(col["freq_hz_internal"]).max()) if len(rows) else math.nan,
           "final_freq_dev_hz": float(np.abs(col["freq_hz_internal"][tail]).max()) if len(rows) else math.nan,
           "final_tie_mw": float(np.abs(col["tie_mw"][tail]).max()) if len(rows) else math.nan}
    if "external_mw" in col and len(rows):
        out["final_external_mw"] = float(col["external_mw"][-1])
    return out


def run_scenario(data: dict, out_dir=None, seed=None, time_mode=None, speedup=None):
    """Run a validated scenario; writes CSVs to ``out_dir`` when given."""
    sim = CoSimulation(data, seed, time_mode, speedup)
    result = sim.run()
    if out_dir is not None:
        sim.write(result, out_dir)
    return result, sim


def scripted_macro_check(model: Macromodel, betas, n_devices: int, rng, duration: float):
    """Mean-SoC trajectories of a device fleet and the macromodel under a fixed
    acceptance schedule ``betas(t) -> (beta_c, beta_d)``.

    The fleet answers every request with an independent Bernoulli draw, so no
    coordinator is involved. Returns ``(times, z_fleet, z_macro)``.
    """
    state = model.stationary_distribution(*betas(0.0))
    soc, ic, rc, idd, rd = sample_initial_state(model, state, n_devices, rng)
    fleet = Fleet([model.params] * n_devices, soc, rng, model.device_dt)
    if len(ic):
        fleet.start_packets(ic, 1, rc)
    if len(idd):
        fleet.start_packets(idd, -1, rd)
    steps = int(round(duration / model.dt))
    per = model.substeps
    times = [0.0]
    z_fleet = [fleet_soc(fleet.soc, model.grid)]
    z_macro = [pmf_soc(state.q, model.grid)]
    for k in range(steps):
        bc, bd = betas(k * model.dt)
        for _ in range(per):
            for msg in fleet.tick():
                if msg.kind is not Kind.REQUEST:
                    continue
                beta = bc if msg.direction > 0 else bd
                fleet.deliver(PacketMessage.response(bool(rng.random() < beta), msg.correlation_nonce),
                              fleet.clock)
        state, _, _ = model.step(state, bc, bd)
        times.append((k + 1) * model.dt)
        z_fleet.append(fleet_soc(fleet.soc, model.grid))
        z_macro.append(pmf_soc(state.q, model.grid))
    return np.array(times), np.array(z_fleet), np.array(z_macro)
