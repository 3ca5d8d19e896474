"""Forecast profiles and multiplicative error scenarios.

An error scenario scales the whole PV forecast by ``rho_pv`` and the whole
load forecast by ``rho_load``; probabilities must sum to one.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import Decimal
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "FORECAST",
    "Profile",
    "ErrorScenario",
    "ScenarioSet",
    "RealizedTables",
    "ScenarioError",
    "PRESETS",
    "preset",
    "apply_factor",
    "realize",
    "validate_probabilities",
    "default_profiles",
    "read_profiles",
    "parse_profiles",
    "select_hours",
    "scenarios_from_csv",
    "preset_to_csv",
]

PROB_TOL = 1e-12

FORECAST = "forecast"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    hours: tuple
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "hours", tuple(int(h) for h in self.hours))
        if vals.ndim != 1 or len(vals) != len(self.hours):
            raise ScenarioError("profile length must match its horizon")
        if np.any(vals < 0):
            raise ScenarioError("profile values must be non-negative")

    def __len__(self):
        return len(self.hours)

    def __eq__(self, other):
        if not isinstance(other, Profile):
            return NotImplemented
        return self.hours == other.hours and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.hours, self.values.tobytes()))

    def at(self, hours):
        idx = [self.hours.index(h) for h in hours]
        return Profile(tuple(hours), self.values[idx])


@dataclass(frozen=True)
class ErrorScenario:
    probability: float
    rho_load: float
    rho_pv: float

    def __post_init__(self):
        if not self.probability > 0:
            raise ScenarioError(f"scenario probability must be positive, got {self.probability}")
        if not (self.rho_load > 0 and self.rho_pv > 0):
            raise ScenarioError("scenario factors must be positive")


@dataclass(frozen=True)
class ScenarioSet:
    forecast_pv: Profile
    forecast_load: Profile
    scenarios: tuple

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        if not self.scenarios:
            raise ScenarioError("a scenario set needs at least one scenario")
        if self.forecast_pv.hours != self.forecast_load.hours:
            raise ScenarioError("PV and load forecasts must share a horizon")

    @property
    def hours(self):
        return self.forecast_pv.hours

    @property
    def probabilities(self):
        return np.array([s.probability for s in self.scenarios])

    def __len__(self):
        return len(self.scenarios)

    def with_horizon(self, horizon):
        hours = select_hours(horizon, self.hours)
        return ScenarioSet(self.forecast_pv.at(hours), self.forecast_load.at(hours),
                           self.scenarios)


# Table values kept as decimal strings so CSV export is exact.
_S5 = [("0.1", "0.85", "0.8"), ("0.2", "0.96", "0.95"), ("0.4", "1.02", "1.02"),
       ("0.2", "1.06", "1.1"), ("0.1", "1.1", "1.2")]
_S10 = [("0.02", "0.85", "0.8"), ("0.03", "0.9", "0.85"), ("0.05", "0.95", "0.9"),
        ("0.1", "0.96", "0.95"), ("0.3", "0.98", "0.98"), ("0.3", "1.02", "1.02"),
        ("0.1", "1.04", "1.05"), ("0.05", "1.06", "1.1"), ("0.03", "1.07", "1.15"),
        ("0.02", "1.1", "1.2")]
_S20 = [("0.001", "0.85", "0.8"), ("0.002", "0.86", "0.81"), ("0.0045", "0.87", "0.82"),
        ("0.01", "0.88", "0.83"), ("0.02", "0.9", "0.85"), ("0.05", "0.92", "0.86"),
        ("0.1", "0.95", "0.87"), ("0.15", "0.96", "0.9"), ("0.3", "0.97", "0.92"),
        ("0.15", "0.98", "0.95"), ("0.1", "0.99", "0.97"), ("0.05", "1.02", "0.98"),
        ("0.02", "1.03", "1.01"), ("0.015", "1.04", "1.02"), ("0.01", "1.05", "1.05"),
        ("0.008", "1.06", "1.07"), ("0.004", "1.07", "1.1"), ("0.003", "1.09", "1.12"),
        ("0.0015", "1.1", "1.15"), ("0.001", "1.12", "1.2")]

PRESETS = {
    "DET": [("1", "1", "1")],
    "S5": _S5,
    "S10": _S10,
    "S20": _S20,
}


def select_hours(horizon, hours=tuple(range(24))):
    """Pick ``horizon`` evenly spaced hours out of ``hours``."""
    n = len(hours)
    if not 1 <= horizon <= n:
        raise ScenarioError(f"horizon must be between 1 and {n}, got {horizon}")
    step = n / horizon
    return tuple(hours[int(k * step)] for k in range(horizon))


def read_profiles(path):
    """Read a ``hour,pv,load`` CSV file into (pv, load) profiles."""
    return parse_profiles(Path(path).read_text())


def parse_profiles(text):
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["hour", "pv", "load"]:
        raise ScenarioError("profile CSV header must be 'hour,pv,load'")
    hours, pv, load = [], [], []
    for row in reader:
        hours.append(int(row["hour"]))
        pv.append(float(row["pv"]))
        load.append(float(row["load"]))
    return Profile(hours, pv), Profile(hours, load)


def default_profiles():
    text = resources.files("sopf.data").joinpath("profiles.csv").read_text()
    return parse_profiles(text)


def preset(name, horizon=24, profiles=None):
    """Scenario set for ``DET``, ``S5``, ``S10`` or ``S20`` on the bundled forecast."""
    key = str(name).upper()
    if key not in PRESETS:
        raise ScenarioError(f"unknown scenario preset {name!r}; expected one of {sorted(PRESETS)}")
    pv, load = profiles or default_profiles()
    scen = [ErrorScenario(float(p), float(rl), float(rp)) for p, rl, rp in PRESETS[key]]
    return ScenarioSet(pv, load, scen).with_horizon(horizon)


def preset_to_csv(name):
    rows = ["scenario,pi,rho_load,rho_pv"]
    for k, (p, rl, rp) in enumerate(PRESETS[str(name).upper()], start=1):
        rows.append(f"s{k},{p},{rl},{rp}")
    return "\n".join(rows) + "\n"


def scenarios_from_csv(path, horizon=24, profiles=None):
    """Custom scenario table with the same header as :func:`preset_to_csv`."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        scen = [ErrorScenario(float(r["pi"]), float(r["rho_load"]), float(r["rho_pv"]))
                for r in reader]
    pv, load = profiles or default_profiles()
    out = ScenarioSet(pv, load, scen).with_horizon(horizon)
    validate_probabilities(out)
    return out


def apply_factor(profile, rho):
    if not rho > 0:
        raise ScenarioError(f"scaling factor must be positive, got {rho}")
    return Profile(profile.hours, profile.values * rho)


def validate_probabilities(scenario_set):
    """Raise :class:`ScenarioError` unless probabilities sum to one (to 1e-12)."""
    # exact decimal sum avoids binary rounding noise on table values like 0.0045
    total = sum(Decimal(repr(s.probability)) for s in scenario_set.scenarios)
    dev = float(total - 1)
    if abs(dev) > PROB_TOL:
        raise ScenarioError(f"scenario probabilities sum to {float(total)!r} "
                            f"(deviation {dev:+.3g})")
    return True


@dataclass(frozen=True)
class RealizedTables:
    """Per-device, per-hour data for one stage.

    ``pv_avail`` has shape (n_pv, T), in the order of ``model.pvs``;
    ``load_p`` / ``load_q`` have shape (n_bus, T) in the order of ``model.buses``.
    """

    hours: tuple
    pv_avail: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray


def realize(scenario_set, model, s=FORECAST):
    """Available PV and load tables for the forecast or scenario index ``s``."""
    if s == FORECAST:
        rho_pv = rho_load = 1.0
    else:
        if not isinstance(s, (int, np.integer)) or not 0 <= s < len(scenario_set.scenarios):
            raise ScenarioError(f"scenario index {s!r} out of range "
                                f"(0..{len(scenario_set.scenarios) - 1})")
        sc = scenario_set.scenarios[s]
        rho_pv, rho_load = sc.rho_pv, sc.rho_load
    pv_shape = scenario_set.forecast_pv.values
    ld_shape = scenario_set.forecast_load.values
    if rho_pv != 1.0:
        pv_shape = apply_factor(scenario_set.forecast_pv, rho_pv).values
    if rho_load != 1.0:
        ld_shape = apply_factor(scenario_set.forecast_load, rho_load).values
    cap = np.array([g.p_max for g in model.pvs], dtype=float)
    pp = np.array([b.load_p_base for b in model.buses], dtype=float)
    qq = np.array([b.load_q_base for b in model.buses], dtype=float)
    out = RealizedTables(
        scenario_set.hours,
        np.outer(cap, pv_shape),
        np.outer(pp, ld_shape),
        np.outer(qq, ld_shape),
    )
    for arr in (out.pv_avail, out.load_p, out.load_q):
        arr.setflags(write=False)
    return out
