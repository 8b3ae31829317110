"""Regenerate the synthetic input files under scenarios/data.

agc_trace.csv: a normalised regulation-style signal in [-1, 1] (sum of slow
sinusoids plus low-pass filtered noise), 10 s resolution, 4 hours.
solar_day.csv: a clear-sky-shaped solar output with cloud dips, 5 minute
resolution, 05:00 to 21:00, peak 150 MW.
"""
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "scenarios" / "data"


def agc_trace(rng, hours=4.0, step=10.0):
    t = np.arange(0.0, hours * 3600.0 + step, step)
    slow = (0.5 * np.sin(2 * np.pi * t / 1800.0) + 0.3 * np.sin(2 * np.pi * t / 660.0 + 1.0)
            + 0.2 * np.sin(2 * np.pi * t / 290.0 + 2.0))
    noise = np.zeros_like(t)
    for i in range(1, len(t)):
        noise[i] = 0.9 * noise[i - 1] + 0.1 * rng.normal()
    signal = slow + 2.0 * noise
    return t, signal / np.abs(signal).max()


def solar_day(rng, peak=150.0, step=300.0):
    t = np.arange(5 * 3600.0, 21 * 3600.0 + step, step)
    hour = t / 3600.0
    shape = np.clip(np.sin(np.pi * (hour - 6.0) / 14.0), 0.0, None) ** 1.5
    clouds = 1.0 - 0.25 * (rng.random(len(t)) < 0.08) * rng.random(len(t))
    return t, peak * shape * clouds


def main():
    rng = np.random.default_rng(2024)
    OUT.mkdir(parents=True, exist_ok=True)
    t, s = agc_trace(rng)
    np.savetxt(OUT / "agc_trace.csv", np.column_stack([t, s]), delimiter=",",
               header="t_s,signal", comments="", fmt=["%.1f", "%.6f"])
    t, mw = solar_day(rng)
    np.savetxt(OUT / "solar_day.csv", np.column_stack([t, mw]), delimiter=",",
               header="t_s,solar_mw", comments="", fmt=["%.1f", "%.4f"])


if __name__ == "__main__":
    main()
