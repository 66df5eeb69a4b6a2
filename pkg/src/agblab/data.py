"""Synthetic forcing, ground-truth latent policies, dataset assembly and I/O.

The generator stands in for real climate driver data: seasonal sinusoids
with seeded noise for radiation and temperature, and a precipitation regime
keyed to the water treatment (shelter: none; rainfed: intermittent events;
irrigated: rainfed plus a fixed supplement schedule). Ground-truth latents
follow a simple policy - PAR as a fixed fraction of radiation, a logistic
canopy curve, constant radiation-use efficiency, and a bucket water balance
mapped smoothly onto [0, 1] for the stress factor. The exact simulator then
produces biomass, and observation noise is applied to the targets only.

Ground-truth latents are returned as separate trajectories and never enter
the training-facing dataset.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ArgumentError, DataSchemaError, DomainError
from .process import LatentState, ProcessParams, Trajectory, simulate

TREATMENTS = ("shelter", "rainfed", "irrigated")
N_SOIL_CODES = 3

DATASET_COLUMNS = [
    "location_id", "day", "treatment", "radiation", "t_min", "t_max",
    "precipitation", "soil_code", "agb_obs_g_m2", "split",
]
SIDECAR_COLUMNS = ["location_id", "day", "lai", "par", "rue", "fw"]


@dataclass(frozen=True)
class ForcingRecord:
    """One day of exogenous drivers at one location."""

    day_of_season: int
    radiation: float
    t_min: float
    t_max: float
    precipitation: float
    soil_code: int
    treatment: str

    def __post_init__(self):
        if self.day_of_season < 0:
            raise DomainError("day_of_season", "must be >= 0")
        if self.radiation < 0:
            raise DomainError("radiation", "must be >= 0")
        if self.precipitation < 0:
            raise DomainError("precipitation", "must be >= 0")
        if self.t_min > self.t_max:
            raise DomainError("t_min", f"t_min {self.t_min} > t_max {self.t_max}")
        if self.treatment not in TREATMENTS:
            raise DomainError("treatment", f"unknown treatment {self.treatment!r}")


@dataclass(frozen=True)
class ScenarioParams:
    """Constants of the ground-truth latent policy for synthetic data."""

    par_fraction: float = 0.5
    rue: float = 3.0
    lai_max: float = 6.0
    lai_rate: float = 0.12
    lai_mid_frac: float = 0.45
    bucket_capacity_mm: float = 60.0
    stress_full_mm: float = 30.0      # bucket level above which fw = 1
    et_coeff: float = 0.22            # mm of demand per MJ of radiation
    initial_agb: float = 1.0


def _season_phase(day, days):
    return np.pi * (day + 0.5) / days


def generate_forcing(seed, days, treatment, soil_code=None):
    """Seeded seasonal weather for one location under one treatment."""
    if days < 1:
        raise ArgumentError("days must be >= 1")
    if treatment not in TREATMENTS:
        raise DomainError("treatment", f"unknown treatment {treatment!r}")
    rng = np.random.default_rng(seed)
    if soil_code is None:
        soil_code = int(rng.integers(0, N_SOIL_CODES))
    records = []
    for day in range(days):
        phase = _season_phase(day, days)
        radiation = max(0.5, 4.0 + 18.0 * np.sin(phase) + rng.normal(0.0, 2.5))
        t_mean = 6.0 + 14.0 * np.sin(phase) + rng.normal(0.0, 1.5)
        spread = max(2.0, 8.0 + rng.normal(0.0, 1.0))
        if treatment == "shelter":
            precipitation = 0.0
        else:
            wet = rng.random() < 0.3
            precipitation = float(rng.exponential(7.0)) if wet else 0.0
            if treatment == "irrigated" and day % 3 == 0:
                precipitation += 9.0
        records.append(ForcingRecord(
            day_of_season=day,
            radiation=float(radiation),
            t_min=float(t_mean - spread / 2.0),
            t_max=float(t_mean + spread / 2.0),
            precipitation=precipitation,
            soil_code=soil_code,
            treatment=treatment,
        ))
    return records


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def forcing_to_latent(forcing, scenario):
    """Ground-truth latent policy driving the simulator.

    PAR is a fixed fraction of radiation; LAI follows a logistic canopy
    curve in day of season; RUE is constant; the stress factor comes from a
    running bucket of precipitation minus radiation-driven demand, mapped
    smoothly to [0, 1] (exactly 1 whenever the bucket stays above the
    stress-free level).
    """
    forcing = list(forcing)
    if not forcing:
        raise ArgumentError("forcing_to_latent requires a nonempty sequence")
    days = len(forcing)
    mid = scenario.lai_mid_frac * days
    bucket = scenario.bucket_capacity_mm
    states = []
    for record in forcing:
        day = record.day_of_season
        lai = scenario.lai_max / (1.0 + np.exp(-scenario.lai_rate * (day - mid)))
        par = scenario.par_fraction * record.radiation
        demand = scenario.et_coeff * record.radiation * (0.2 + 0.8 * lai / scenario.lai_max)
        bucket = min(scenario.bucket_capacity_mm,
                     max(0.0, bucket + record.precipitation - demand))
        fw = float(_smoothstep(bucket / scenario.stress_full_mm))
        states.append(LatentState(lai=float(lai), par=float(par),
                                  rue=scenario.rue, fw=fw))
    return states


@dataclass
class LocationSeries:
    """Raw per-day table for one location: forcing plus noisy targets."""

    location_id: str
    treatment: str
    forcing: list
    agb_obs: np.ndarray
    split: str = ""

    @property
    def days(self):
        return len(self.forcing)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    unscaled: tuple
    target_mean: float
    target_std: float

    def to_dict(self):
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "unscaled": list(self.unscaled),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64),
                   unscaled=tuple(d["unscaled"]),
                   target_mean=float(d["target_mean"]),
                   target_std=float(d["target_std"]))


@dataclass
class SampleSet:
    """Materialized windows of one split: X (n, window, features), y (n, window)."""

    X: np.ndarray
    y: np.ndarray
    location_ids: list
    treatments: list
    starts: list

    def __len__(self):
        return self.X.shape[0]


@dataclass
class Dataset:
    """Per-day location series plus windowing and normalization metadata."""

    locations: list
    window: int
    stride: int
    feature_names: tuple
    days: int
    norm_stats: Optional[NormStats] = None
    normalized: bool = False
    warnings: list = field(default_factory=list)

    def split_locations(self, split):
        return [loc for loc in self.locations if loc.split == split]

    def location_features(self, loc):
        """Feature matrix (days, features) in the canonical layout."""
        return location_features(loc, self.feature_names)

    def window_starts(self, n_days):
        if n_days < self.window:
            raise ArgumentError(
                f"season of {n_days} days shorter than window {self.window}")
        return list(range(0, n_days - self.window + 1, self.stride))

    def samples(self, split=None):
        """Windowed training view; ground-truth latents are not part of it."""
        xs, ys, ids, treats, starts = [], [], [], [], []
        for loc in self.locations:
            if split is not None and loc.split != split:
                continue
            feats = self.location_features(loc)
            if self.normalized and self.norm_stats is not None:
                feats = _apply_norm(feats, self.norm_stats)
            for s in self.window_starts(loc.days):
                xs.append(feats[s:s + self.window])
                ys.append(loc.agb_obs[s:s + self.window])
                ids.append(loc.location_id)
                treats.append(loc.treatment)
                starts.append(s)
        if not xs:
            raise ArgumentError(f"no samples for split {split!r}")
        return SampleSet(X=np.stack(xs), y=np.stack(ys), location_ids=ids,
                         treatments=treats, starts=starts)

    def content_hash(self):
        """SHA-256 of the canonical CSV bytes; pure function of (seed, config)."""
        return hashlib.sha256(_dataset_csv_bytes(self)).hexdigest()


def location_features(loc, feature_names):
    """Per-day driver matrix (days, features); treatments and soils one-hot."""
    rows = np.zeros((loc.days, len(feature_names)))
    index = {name: i for i, name in enumerate(feature_names)}
    for t, f in enumerate(loc.forcing):
        rows[t, index["day_of_season"]] = f.day_of_season
        rows[t, index["radiation"]] = f.radiation
        rows[t, index["t_min"]] = f.t_min
        rows[t, index["t_max"]] = f.t_max
        rows[t, index["precipitation"]] = f.precipitation
        rows[t, index[f"treat_{f.treatment}"]] = 1.0
        rows[t, index[f"soil_{f.soil_code}"]] = 1.0
    return rows


def apply_normalization(feats, stats):
    """Standardize a raw feature matrix with stored train-split statistics."""
    return _apply_norm(feats, stats)


DEFAULT_FRACTIONS = {"train": 0.65, "val": 0.15, "test": 0.2}


def build_dataset(n_locations, days, params=None, noise_std=0.05, seed=42,
                  scenario=None, treatments=TREATMENTS, window=32, stride=16,
                  feature_names=None):
    """Generate forcing, latents, and simulated biomass for many locations.

    Observation noise is multiplicative Gaussian on the targets only
    (std = noise_std times the local biomass value); the noise-free
    trajectories with their latents are returned alongside for evaluation
    and are structurally separate from the dataset.
    """
    if n_locations < 1:
        raise ArgumentError("n_locations must be >= 1")
    params = params or ProcessParams()
    scenario = scenario or ScenarioParams()
    if feature_names is None:
        from .backbone import DEFAULT_FEATURES
        feature_names = DEFAULT_FEATURES
    locations, truths = [], []
    for i in range(n_locations):
        treatment = treatments[i % len(treatments)]
        rng = np.random.default_rng((seed, i))
        forcing = generate_forcing((seed, i, 1), days, treatment)
        latents = forcing_to_latent(forcing, scenario)
        location_id = f"L{i:04d}"
        truth = simulate(scenario.initial_agb, latents, params,
                         forcing=forcing, location_id=location_id)
        noise = rng.normal(0.0, 1.0, size=days)
        agb_obs = truth.agb[:days] * (1.0 + noise_std * noise)
        locations.append(LocationSeries(
            location_id=location_id, treatment=treatment,
            forcing=forcing, agb_obs=np.maximum(agb_obs, 0.0)))
        truths.append(truth)
    dataset = Dataset(locations=locations, window=window, stride=stride,
                      feature_names=tuple(feature_names), days=days)
    return dataset, truths


def split_stratified(dataset, fractions=None, strata_keys=("treatment",), seed=42):
    """Assign locations to splits, proportionally within each stratum.

    Strata smaller than the number of splits fall back to global random
    assignment; the fallback is recorded in dataset.warnings.
    """
    fractions = dict(fractions or DEFAULT_FRACTIONS)
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise ArgumentError(f"split fractions must sum to 1, got {total}")
    split_names = list(fractions)
    rng = np.random.default_rng((seed, 0x5B117))
    groups = {}
    for loc in dataset.locations:
        key = tuple(getattr(loc, k) for k in strata_keys)
        groups.setdefault(key, []).append(loc)
    leftovers = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < len(split_names):
            leftovers.extend(members)
            dataset.warnings.append(
                f"stratum {key} smaller than split count; assigned globally")
            continue
        _assign(members, fractions, split_names, rng)
    if leftovers:
        _assign(leftovers, fractions, split_names, rng)
    return dataset


def _assign(members, fractions, split_names, rng):
    order = rng.permutation(len(members))
    counts = _proportional_counts(len(members), fractions, split_names)
    pos = 0
    for name in split_names:
        for j in range(counts[name]):
            members[order[pos]].split = name
            pos += 1


def _proportional_counts(n, fractions, split_names):
    """Largest-remainder rounding of n * fraction per split."""
    raw = {name: n * fractions[name] for name in split_names}
    counts = {name: int(np.floor(raw[name])) for name in split_names}
    short = n - sum(counts.values())
    remainders = sorted(split_names, key=lambda s: raw[s] - counts[s], reverse=True)
    for name in remainders[:short]:
        counts[name] += 1
    return counts


def _compute_norm_stats(dataset):
    train = [loc for loc in dataset.locations if loc.split == "train"]
    if not train:
        raise ArgumentError("normalization requires a nonempty train split")
    feats = np.concatenate([dataset.location_features(loc) for loc in train])
    targets = np.concatenate([loc.agb_obs for loc in train])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    unscaled = []
    for i, name in enumerate(dataset.feature_names):
        if std[i] < 1e-12:
            unscaled.append(name)
            mean[i] = 0.0
            std[i] = 1.0
    return NormStats(mean=mean, std=std, unscaled=tuple(unscaled),
                     target_mean=float(targets.mean()),
                     target_std=float(targets.std()))


def _apply_norm(feats, stats):
    return (feats - stats.mean) / stats.std


def normalize(dataset):
    """Standardize features with train-split statistics (targets untouched)."""
    if dataset.normalized:
        return dataset
    stats = _compute_norm_stats(dataset)
    dataset.norm_stats = stats
    dataset.normalized = True
    for name in stats.unscaled:
        dataset.warnings.append(f"feature {name} has zero variance; left unscaled")
    return dataset


def denormalize(dataset):
    """Exact inverse of normalize (feature views revert to raw values)."""
    dataset.normalized = False
    return dataset


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def _dataset_csv_bytes(dataset):
    lines = [",".join(DATASET_COLUMNS)]
    for loc in dataset.locations:
        for t, f in enumerate(loc.forcing):
            lines.append(",".join([
                loc.location_id, str(t), loc.treatment, _fmt(f.radiation),
                _fmt(f.t_min), _fmt(f.t_max), _fmt(f.precipitation),
                str(f.soil_code), _fmt(loc.agb_obs[t]), loc.split,
            ]))
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_dataset_csv(dataset, path):
    with open(path, "wb") as fh:
        fh.write(_dataset_csv_bytes(dataset))


def read_dataset_csv(path, window=32, stride=16, feature_names=None):
    """Rebuild a Dataset from its CSV; missing numeric cells are imputed
    with the column mean and the imputation is recorded as a warning."""
    if feature_names is None:
        from .backbone import DEFAULT_FEATURES
        feature_names = DEFAULT_FEATURES
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataSchemaError("empty file", line=1)
        missing = [c for c in DATASET_COLUMNS if c not in header]
        if missing:
            raise DataSchemaError(f"missing column {missing[0]!r}", line=1,
                                  column=missing[0])
        col = {name: header.index(name) for name in DATASET_COLUMNS}
        rows = [(i + 2, r) for i, r in enumerate(reader) if r]

    numeric = ("radiation", "t_min", "t_max", "precipitation", "agb_obs_g_m2")
    values = {name: [] for name in numeric}
    blanks = {name: 0 for name in numeric}
    for line_no, r in rows:
        if len(r) != len(header):
            raise DataSchemaError(f"expected {len(header)} cells, got {len(r)}",
                                  line=line_no)
        for name in numeric:
            cell = r[col[name]]
            if cell == "":
                blanks[name] += 1
                continue
            try:
                values[name].append(float(cell))
            except ValueError:
                raise DataSchemaError(f"not a number: {cell!r}", line=line_no,
                                      column=name)
    means = {name: (float(np.mean(v)) if v else 0.0) for name, v in values.items()}

    def cell_value(r, name, line_no):
        cell = r[col[name]]
        if cell == "":
            return means[name]
        return float(cell)

    per_location = {}
    order = []
    for line_no, r in rows:
        loc_id = r[col["location_id"]]
        if loc_id not in per_location:
            per_location[loc_id] = []
            order.append(loc_id)
        per_location[loc_id].append((line_no, r))

    locations = []
    warnings = [f"imputed {n} missing {name} cells with the column mean"
                for name, n in blanks.items() if n]
    for loc_id in order:
        entries = sorted(per_location[loc_id], key=lambda e: int(e[1][col["day"]]))
        forcing, obs = [], []
        split = entries[0][1][col["split"]]
        treatment = entries[0][1][col["treatment"]]
        for expected_day, (line_no, r) in enumerate(entries):
            day = int(r[col["day"]])
            if day != expected_day:
                raise DataSchemaError(f"non-contiguous day {day}", line=line_no,
                                      column="day")
            try:
                forcing.append(ForcingRecord(
                    day_of_season=day,
                    radiation=cell_value(r, "radiation", line_no),
                    t_min=cell_value(r, "t_min", line_no),
                    t_max=cell_value(r, "t_max", line_no),
                    precipitation=cell_value(r, "precipitation", line_no),
                    soil_code=int(r[col["soil_code"]]),
                    treatment=r[col["treatment"]],
                ))
            except DomainError as err:
                raise DataSchemaError(str(err), line=line_no, column=err.field)
            obs.append(cell_value(r, "agb_obs_g_m2", line_no))
        locations.append(LocationSeries(
            location_id=loc_id, treatment=treatment, forcing=forcing,
            agb_obs=np.asarray(obs), split=split))
    days = locations[0].days if locations else 0
    return Dataset(locations=locations, window=window, stride=stride,
                   feature_names=tuple(feature_names), days=days,
                   warnings=warnings)


def write_latent_sidecar(truths, path):
    """Ground-truth latent series keyed like the dataset CSV."""
    lines = [",".join(SIDECAR_COLUMNS)]
    for truth in truths:
        for t, state in enumerate(truth.latent):
            lines.append(",".join([
                truth.location_id, str(t), _fmt(state.lai), _fmt(state.par),
                _fmt(state.rue), _fmt(state.fw),
            ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_latent_sidecar(path):
    """Returns {location_id: {"lai": array, "par": ..., "rue": ..., "fw": ...}}."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SIDECAR_COLUMNS:
            raise DataSchemaError(f"unexpected sidecar header {header}", line=1)
        out = {}
        for i, r in enumerate(reader):
            if not r:
                continue
            loc = out.setdefault(r[0], {"lai": [], "par": [], "rue": [], "fw": []})
            try:
                for j, name in enumerate(("lai", "par", "rue", "fw")):
                    loc[name].append(float(r[2 + j]))
            except ValueError as err:
                raise DataSchemaError(str(err), line=i + 2)
    return {
        loc: {name: np.asarray(vals) for name, vals in series.items()}
        for loc, series in out.items()
    }
