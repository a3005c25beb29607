#!/usr/bin/env python3
"""Generate the bundled 1440-step day profiles (repo data).

Irradiance: clear-sky bell centered mid-day, zero at night.  Load: a
residential shape with a morning shoulder and an evening peak, normalized so
the evening peak is 1.0.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cellgrid.profiles import Profile, write_profile

STEPS = 1440


def irradiance() -> Profile:
    t = (np.arange(1, STEPS + 1) - 0.5) / 60.0  # hour of day at step center
    irr = np.exp(-((t - 12.5) / 3.0) ** 2)
    irr[np.abs(t - 12.5) > 6.5] = 0.0
    return Profile(np.round(irr, 6), step_seconds=60.0, name="irradiance_day")


def residential_load() -> Profile:
    t = (np.arange(1, STEPS + 1) - 0.5) / 60.0
    shape = (0.52
             + 0.18 * np.exp(-((t - 8.0) / 2.0) ** 2)
             + 0.30 * np.exp(-((t - 19.0) / 2.4) ** 2)
             - 0.10 * np.exp(-((t - 3.0) / 2.5) ** 2))
    shape = shape / shape.max()
    return Profile(np.round(shape, 6), step_seconds=60.0, name="load_day")


if __name__ == "__main__":
    data = os.path.join(os.path.dirname(__file__), "..", "src", "cellgrid", "data")
    write_profile(irradiance(), os.path.join(data, "irradiance_day.csv"))
    write_profile(residential_load(), os.path.join(data, "load_day.csv"))
    print("wrote irradiance_day.csv and load_day.csv")
