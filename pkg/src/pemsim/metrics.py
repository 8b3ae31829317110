"""Run metrics computed from recorded time series."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MisalignedSeriesError(ValueError):
    pass


def rms(reference, demand) -> float:
    ref = np.asarray(reference, dtype=float)
    dem = np.asarray(demand, dtype=float)
    if ref.shape != dem.shape:
        raise MisalignedSeriesError(f"series lengths differ: {ref.shape} vs {dem.shape}")
    if ref.size == 0:
        return math.nan
    return float(np.sqrt(np.mean((ref - dem) ** 2)))


def step_series(t0: float, v0: float, events):
    """Cumulative piecewise-constant signal from ``(time, delta)`` events."""
    if not events:
        return np.array([t0]), np.array([v0])
    ev = np.array(sorted(events, key=lambda e: e[0]), dtype=float)
    times = np.concatenate([[t0], ev[:, 0]])
    values = v0 + np.concatenate([[0.0], np.cumsum(ev[:, 1])])
    return times, values


def _value_at(times, values, grid):
    idx = np.searchsorted(times, grid, side="right") - 1
    return values[np.maximum(idx, 0)]


def continuous_rms(a, b, start: float, stop: float) -> float:
    """Time-averaged RMS of a - b for two piecewise-constant ``(times, values)`` signals."""
    if not stop > start:
        return math.nan
    knots = np.union1d(np.concatenate([a[0], b[0]]), [start, stop])
    knots = knots[(knots >= start) & (knots <= stop)]
    diff = _value_at(*a, knots[:-1]) - _value_at(*b, knots[:-1])
    widths = np.diff(knots)
    return float(np.sqrt(np.sum(diff ** 2 * widths) / (stop - start)))


def continuous_mean(a, b, start: float, stop: float) -> float:
    if not stop > start:
        return math.nan
    knots = np.union1d(np.concatenate([a[0], b[0]]), [start, stop])
    knots = knots[(knots >= start) & (knots <= stop)]
    diff = _value_at(*a, knots[:-1]) - _value_at(*b, knots[:-1])
    return float(np.sum(diff * np.diff(knots)) / (stop - start))


@dataclass
class RunMetrics:
    baseline_kw: float = math.nan
    rms_kw: float = math.nan  # post-warmup
    rms_pct: float = math.nan
    rms_full_kw: float = math.nan  # whole run, warmup included
    rms_full_pct: float = math.nan
    samples: int = 0
    step_rms_kw: list = field(default_factory=list)  # (start, stop, reference, rms)
    soc: dict = field(default_factory=dict)  # group -> {mean, p10_min, p90_max, ...}
    counts: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    reconstruction: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        out = [("baseline_kw", self.baseline_kw), ("rms_kw", self.rms_kw),
               ("rms_pct", self.rms_pct), ("rms_full_kw", self.rms_full_kw),
               ("rms_full_pct", self.rms_full_pct), ("samples", self.samples)]
        for i, (a, b, ref, value) in enumerate(self.step_rms_kw):
            out += [(f"step{i}.start", a), (f"step{i}.stop", b), (f"step{i}.reference_kw", ref),
                    (f"step{i}.rms_kw", value)]
        for prefix, table in (("soc", self.soc), ("counts", self.counts),
                              ("estimator", self.estimator), ("grid", self.grid),
                              ("reconstruction", self.reconstruction)):
            for key, value in table.items():
                if isinstance(value, dict):
                    out += [(f"{prefix}.{key}.{k}", v) for k, v in value.items()]
                else:
                    out.append((f"{prefix}.{key}", value))
        return out

    def as_dict(self) -> dict:
        return dict(self.rows())


def soc_groups(columns) -> list[str]:
    return [c[len("soc_mean_"):] for c in columns if c.startswith("soc_mean_")]


def compute_metrics(trace: dict, warmup: float = 600.0, baseline_kw: float | None = None,
                    steps=None, step_transient: float = 300.0, duration: float | None = None,
                    deadbands: dict | None = None) -> RunMetrics:
    """Tracking and SoC statistics from a recorder trace.

    ``trace`` maps column names to equal-length arrays and must hold ``t``,
    ``reference_kw`` and ``demand_kw``. ``steps`` is a list of ``(time, kW)``
    reference changes; each step window drops its first ``step_transient``
    seconds.
    """
    t = np.asarray(trace.get("t", []), dtype=float)
    ref = np.asarray(trace.get("reference_kw", []), dtype=float)
    dem = np.asarray(trace.get("demand_kw", []), dtype=float)
    if not (len(t) == len(ref) == len(dem)):
        raise MisalignedSeriesError("t, reference_kw and demand_kw differ in length")
    for name, col in trace.items():
        if len(col) != len(t):
            raise MisalignedSeriesError(f"column {name} has {len(col)} rows, expected {len(t)}")
    m = RunMetrics(samples=int(len(t)))
    if baseline_kw is not None:
        m.baseline_kw = float(baseline_kw)
    post = t > warmup
    m.rms_kw = rms(ref[post], dem[post])
    m.rms_full_kw = rms(ref, dem)
    if baseline_kw:
        m.rms_pct = 100.0 * m.rms_kw / baseline_kw
        m.rms_full_pct = 100.0 * m.rms_full_kw / baseline_kw
    if steps:
        end = duration if duration is not None else (t[-1] if len(t) else 0.0)
        edges = [s[0] for s in steps] + [end]
        for i, ((start, value), stop) in enumerate(zip(steps, edges[1:])):
            # a sample taken at the next step time already sees the new reference
            last = i == len(steps) - 1
            win = (t > start + step_transient) & ((t <= stop) if last else (t < stop))
            m.step_rms_kw.append((float(start), float(stop), float(ref[win][0]) if win.any() else float(value),
                                  rms(ref[win], dem[win])))
    for g in soc_groups(trace):
        mean = np.asarray(trace[f"soc_mean_{g}"])[post]
        p10 = np.asarray(trace[f"soc_p10_{g}"])[post]
        p90 = np.asarray(trace[f"soc_p90_{g}"])[post]
        stats = {"mean": float(mean.mean()) if mean.size else math.nan,
                 "p10_min": float(p10.min()) if p10.size else math.nan,
                 "p90_max": float(p90.max()) if p90.size else math.nan}
        if deadbands and g in deadbands:
            lo, hi = deadbands[g]
            stats["inside_deadband"] = float(bool(p10.size) and p10.min() >= lo and p90.max() <= hi)
        m.soc[g] = stats
    return m


# ------------------------------------------------------------------ CSV
def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".10g")


def write_csv(path: Path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [[] for _ in header]
        for row in reader:
            if len(row) != len(header):
                raise MisalignedSeriesError(f"{path}: row with {len(row)} fields, expected {len(header)}")
            for c, v in zip(cols, row):
                c.append(float(v))
    return {h: np.array(c) for h, c in zip(header, cols)}
