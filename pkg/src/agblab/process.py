"""Reduced biomass-growth dynamics and their analytic sensitivities.

The growth law composes Beer-law light interception with a radiation-use
efficiency and a multiplicative water-stress factor:

    increment = rue * par * (1 - exp(-k * lai)) * fw        [g/m^2/day]

Daily biomass follows the discrete recurrence agb[t+1] = agb[t] + increment,
and the residual of a candidate increment against the law is the quantity
penalized during process-informed training. The forward simulator here is
exact and doubles as the verification oracle for everything downstream.

Internal mass unit is g/m^2; reports convert to t/ha only at the boundary.
All functions accept scalars or numpy arrays and are pure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ArgumentError, DataSchemaError, DomainError

G_M2_TO_T_HA = 0.01


def g_m2_to_t_ha(x):
    return np.asarray(x, dtype=np.float64) * G_M2_TO_T_HA


def t_ha_to_g_m2(x):
    return np.asarray(x, dtype=np.float64) / G_M2_TO_T_HA


@dataclass(frozen=True)
class ProcessParams:
    """Fixed coefficients of the growth law.

    k : light-extinction coefficient of the canopy (dimensionless, > 0).
    rue_bounds : admissible radiation-use efficiency range in g/MJ.
    agb_unit : internal mass unit tag; conversion happens at reporting only.
    """

    k: float = 0.6
    rue_bounds: tuple = (0.5, 4.0)
    agb_unit: str = "g/m2"

    def __post_init__(self):
        if not self.k > 0:
            raise DomainError("k", f"must be > 0, got {self.k}")
        lo, hi = self.rue_bounds
        if not (0 < lo <= hi):
            raise DomainError("rue_bounds", f"need 0 < lo <= hi, got {self.rue_bounds}")
        if self.agb_unit != "g/m2":
            raise DomainError("agb_unit", f"only 'g/m2' is supported, got {self.agb_unit!r}")


@dataclass(frozen=True)
class LatentState:
    """The four physiological drivers of one day's growth.

    lai : leaf area index (m^2/m^2, >= 0)
    par : photosynthetically active radiation (MJ/m^2/day, >= 0)
    rue : radiation-use efficiency (g/MJ, > 0; bounded by ProcessParams)
    fw  : water-stress factor in [0, 1]
    """

    lai: float
    par: float
    rue: float
    fw: float

    def validate(self, rue_bounds=None):
        if np.any(np.asarray(self.lai) < 0):
            raise DomainError("lai", "must be >= 0")
        if np.any(np.asarray(self.par) < 0):
            raise DomainError("par", "must be >= 0")
        if np.any(np.asarray(self.rue) <= 0):
            raise DomainError("rue", "must be > 0")
        fw = np.asarray(self.fw)
        if np.any(fw < 0) or np.any(fw > 1):
            raise DomainError("fw", "must lie in [0, 1]")
        if rue_bounds is not None:
            lo, hi = rue_bounds
            rue = np.asarray(self.rue)
            if np.any(rue < lo) or np.any(rue > hi):
                raise DomainError("rue", f"must lie in [{lo}, {hi}]")


@dataclass(frozen=True)
class Trajectory:
    """One location-season: daily biomass plus the series that produced it.

    agb has T+1 entries (biomass at the start of each day, then the final
    state); latent and forcing have T entries each. Immutable once built.
    """

    location_id: str
    agb: np.ndarray
    latent: tuple
    forcing: Optional[tuple] = None

    def __post_init__(self):
        agb = np.asarray(self.agb, dtype=np.float64)
        object.__setattr__(self, "agb", agb)
        object.__setattr__(self, "latent", tuple(self.latent))
        if self.forcing is not None:
            object.__setattr__(self, "forcing", tuple(self.forcing))
        if agb.ndim != 1 or agb.size < 2:
            raise ArgumentError("trajectory needs at least one day of biomass")
        if len(self.latent) != agb.size - 1:
            raise ArgumentError(
                f"latent series length {len(self.latent)} != days {agb.size - 1}"
            )
        if self.forcing is not None and len(self.forcing) != len(self.latent):
            raise ArgumentError(
                f"forcing series length {len(self.forcing)} != days {len(self.latent)}"
            )
        if agb[0] < 0:
            raise DomainError("agb", "initial biomass must be >= 0")

    @property
    def days(self):
        return self.agb.size - 1


def growth_law(rue, par, lai, fw, k, exp=np.exp):
    """The growth increment formula, generic over the exp implementation.

    Passing an autodiff exp builds the identical expression as a graph, so
    the simulator and the trainable residual share one formula.
    """
    return rue * par * (1.0 - exp(-k * lai)) * fw


def _check_k(k):
    if np.any(np.asarray(k) <= 0):
        raise DomainError("k", "must be > 0")


def intercepted_radiation(par, lai, k):
    """Beer-law interception: par * (1 - exp(-k*lai)), in [0, par]."""
    if np.any(np.asarray(par) < 0):
        raise DomainError("par", "must be >= 0")
    if np.any(np.asarray(lai) < 0):
        raise DomainError("lai", "must be >= 0")
    _check_k(k)
    return par * (1.0 - np.exp(-k * np.asarray(lai, dtype=np.float64)))


def growth_increment(latent, k):
    """Daily biomass increment of the growth law, g/m^2/day."""
    latent.validate()
    _check_k(k)
    return growth_law(latent.rue, latent.par, latent.lai, latent.fw, k)


def step(agb, latent, k):
    """One day of the recurrence: agb + increment."""
    if np.any(np.asarray(agb) < 0):
        raise DomainError("agb", "must be >= 0")
    return agb + growth_increment(latent, k)


def residual(delta_agb, latent, k):
    """Deviation of a candidate increment from the growth law.

    Positive means the candidate grows faster than the process law allows.
    """
    return delta_agb - growth_increment(latent, k)


def simulate(initial_agb, latent_series, params, forcing=None, location_id="sim"):
    """Run the recurrence forward from initial_agb over a latent series."""
    latent_series = tuple(latent_series)
    if not latent_series:
        raise ArgumentError("simulate requires a nonempty latent series")
    if np.any(np.asarray(initial_agb) < 0):
        raise DomainError("agb", "initial biomass must be >= 0")
    agb = np.empty(len(latent_series) + 1, dtype=np.float64)
    agb[0] = initial_agb
    for t, state in enumerate(latent_series):
        state.validate(params.rue_bounds)
        agb[t + 1] = agb[t] + growth_law(state.rue, state.par, state.lai,
                                         state.fw, params.k)
    return Trajectory(location_id=location_id, agb=agb,
                      latent=latent_series, forcing=forcing)


def trajectory_residuals(trajectory, params):
    """Residual of every consecutive biomass pair; ~0 for simulator output."""
    deltas = np.diff(trajectory.agb)
    increments = np.array([
        growth_increment(state, params.k) for state in trajectory.latent
    ])
    return deltas - increments


def elasticity_lai(latent, k):
    """d(increment)/d(lai) = rue * par * fw * k * exp(-k*lai)."""
    latent.validate()
    _check_k(k)
    return latent.rue * latent.par * latent.fw * k * np.exp(-k * np.asarray(latent.lai))


def elasticity_log_par(latent, k):
    """d(increment)/d(log par), which equals the increment itself."""
    if np.any(np.asarray(latent.par) == 0):
        raise DomainError("par", "log-derivative undefined at par = 0")
    return growth_increment(latent, k)


# ---------------------------------------------------------------------------
# Trajectory CSV: one row per day, final row carries biomass only.
# ---------------------------------------------------------------------------

TRAJECTORY_COLUMNS = [
    "location_id", "day", "agb_g_m2", "lai", "par_mj_m2", "rue_g_mj", "fw",
    "radiation", "t_min", "t_max", "precipitation", "soil_code", "treatment",
    "residual_g_m2_day",
]


def _fmt(x):
    return repr(float(x))


def write_trajectory_csv(trajectory, path, params=None):
    """Write a trajectory, latent fields, forcing, and per-day residuals."""
    residuals = (trajectory_residuals(trajectory, params)
                 if params is not None else None)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for t in range(trajectory.days + 1):
            row = [trajectory.location_id, t, _fmt(trajectory.agb[t])]
            if t < trajectory.days:
                state = trajectory.latent[t]
                row += [_fmt(state.lai), _fmt(state.par), _fmt(state.rue),
                        _fmt(state.fw)]
                if trajectory.forcing is not None:
                    f = trajectory.forcing[t]
                    row += [_fmt(f.radiation), _fmt(f.t_min), _fmt(f.t_max),
                            _fmt(f.precipitation), f.soil_code, f.treatment]
                else:
                    row += [""] * 6
                row.append(_fmt(residuals[t]) if residuals is not None else "")
            else:
                row += [""] * 11
            writer.writerow(row)


def read_trajectory_csv(path):
    """Inverse of write_trajectory_csv; forcing restored when present."""
    from .data import ForcingRecord  # local import avoids a module cycle

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAJECTORY_COLUMNS:
            raise DataSchemaError(
                f"unexpected trajectory header {header}", line=1)
        rows = list(reader)
    if len(rows) < 2:
        raise DataSchemaError("trajectory needs at least two rows", line=2)
    location_id = rows[0][0]
    agb = np.array([float(r[2]) for r in rows])
    latent, forcing = [], []
    has_forcing = any(rows[0][7:13])
    for i, r in enumerate(rows[:-1]):
        try:
            latent.append(LatentState(lai=float(r[3]), par=float(r[4]),
                                      rue=float(r[5]), fw=float(r[6])))
            if has_forcing:
                forcing.append(ForcingRecord(
                    day_of_season=int(r[1]), radiation=float(r[7]),
                    t_min=float(r[8]), t_max=float(r[9]),
                    precipitation=float(r[10]), soil_code=int(r[11]),
                    treatment=r[12]))
        except ValueError as err:
            raise DataSchemaError(str(err), line=i + 2)
    return Trajectory(location_id=location_id, agb=agb, latent=latent,
                      forcing=tuple(forcing) if has_forcing else None)
