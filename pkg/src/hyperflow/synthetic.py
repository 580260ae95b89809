"""Deterministic virtual basins for end-to-end checks.

Each basin draws a set of attributes, derives daily forcing from them
(seasonal cycle plus random storms), and produces discharge with the
two-bucket structure whose parameters are smooth functions of the
attributes, plus Gaussian noise clipped at zero.

Random streams come from Philox keyed by ``(master_seed, basin_index,
purpose)`` so any basin can be generated alone and in any order.

Even-indexed basins sit at a location that grows with their slope and soil
attributes; odd-indexed basins sit at the mirrored location, scattered
widely. A basin's nearest neighbour is therefore often hydrologically
unlike it, which keeps distance-based and attribute-based transfer
distinguishable.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .core_data import (
    AttributeTable,
    BasinRecord,
    DateIndex,
    DischargeSeries,
    ForcingSeries,
    write_attributes,
    write_discharge,
    write_forcing,
    write_manifest,
)
from .ensemble import MemberSpec, run_structure
from .errors import DataError
from .reservoir import philox

DEFAULT_ATTRIBUTE_RANGES: dict[str, tuple[float, float]] = {
    "precip_mean": (1.5, 7.0),
    "precip_seasonality": (0.0, 0.8),
    "temp_mean": (4.0, 16.0),
    "slope": (0.0, 1.0),
    "soil_depth": (0.0, 1.0),
    "forest_frac": (0.0, 1.0),
    "clay_frac": (0.0, 1.0),
    "lake_frac": (0.0, 0.2),
}

_ATTRS, _STORMS, _NOISE, _PLACE = 0, 1, 2, 3
EXTENT = 100.0
JITTER = (2.0, 25.0)  # location noise std for even / odd basins
WET_FRACTION = 0.35


@dataclass(frozen=True)
class SyntheticSpec:
    n_basins: int
    years: int
    master_seed: int
    noise_std: float = 0.5
    attribute_ranges: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_ATTRIBUTE_RANGES))
    start: dt.date = dt.date(1993, 1, 1)
    n_regions: int = 4

    def __post_init__(self):
        if self.n_basins < 2:
            raise DataError("n_basins must be >= 2")
        if self.years < 2:
            raise DataError("years must be >= 2")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if not 0 <= self.master_seed < 2**64:
            raise DataError("master_seed must be a 64-bit unsigned integer")
        if self.n_regions < 1:
            raise DataError("n_regions must be >= 1")
        ranges = {}
        for name in DEFAULT_ATTRIBUTE_RANGES:
            lo, hi = self.attribute_ranges.get(name, DEFAULT_ATTRIBUTE_RANGES[name])
            if not lo < hi:
                raise DataError(f"attribute range for {name} must have min < max")
            ranges[name] = (float(lo), float(hi))
        extra = set(self.attribute_ranges) - set(DEFAULT_ATTRIBUTE_RANGES)
        if extra:
            raise DataError(f"unknown synthetic attributes {sorted(extra)}")
        object.__setattr__(self, "attribute_ranges", ranges)

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(DEFAULT_ATTRIBUTE_RANGES)

    @property
    def index(self) -> DateIndex:
        end = dt.date(self.start.year + self.years, self.start.month, self.start.day) - dt.timedelta(days=1)
        return DateIndex.between(self.start, end)


def basin_id(i: int) -> str:
    return f"B{i:03d}"


def _unit(attrs: Mapping[str, float], name: str) -> float:
    """Position of an attribute inside its default range, clamped to [0, 1]."""
    lo, hi = DEFAULT_ATTRIBUTE_RANGES[name]
    return min(max((attrs[name] - lo) / (hi - lo), 0.0), 1.0)


def truth_params(attrs: Mapping[str, float]) -> dict[str, float]:
    """Two-bucket parameters implied by a basin's attributes."""
    slope, soil = _unit(attrs, "slope"), _unit(attrs, "soil_depth")
    forest, clay = _unit(attrs, "forest_frac"), _unit(attrs, "clay_frac")
    return {
        "k_fast": 0.05 + 0.45 * slope,
        "k_perc": (0.1 + 0.4 * soil) * (1.0 - 0.5 * clay),
        "k_slow": 0.01 + 0.03 * (1.0 - soil),
        "et_coef": 0.4 + 0.8 * forest,
    }


def truth_member(attrs: Mapping[str, float], member_id: str = "truth") -> MemberSpec:
    return MemberSpec(member_id, "two-bucket", truth_params(attrs))


def draw_attributes(spec: SyntheticSpec, i: int) -> dict[str, float]:
    rng = philox(spec.master_seed, i, _ATTRS)
    return {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in spec.attribute_ranges.items()}


def make_forcing(spec: SyntheticSpec, i: int, attrs: Mapping[str, float]) -> ForcingSeries:
    index = spec.index
    rng = philox(spec.master_seed, i, _STORMS)
    doy = np.array([d.timetuple().tm_yday for d in index.dates], dtype=float)
    phase = 2 * np.pi * doy / 365.25
    season = np.sin(phase - np.pi / 2)  # -1 in early January, +1 in early July
    p_wet = np.clip(WET_FRACTION * (1 + attrs["precip_seasonality"] * season), 0.02, 0.95)
    wet = rng.random(index.length) < p_wet
    amounts = rng.exponential(attrs["precip_mean"] / WET_FRACTION, size=index.length)
    precip = np.where(wet, amounts, 0.0)
    temp = attrs["temp_mean"] + 8.0 * season + rng.normal(0.0, 1.5, size=index.length)
    pet = np.maximum(0.8 + 0.12 * (attrs["temp_mean"] + 8.0 * season), 0.0)
    return ForcingSeries(index, precip, temp, pet)


def truth_discharge(attrs: Mapping[str, float], forcing: ForcingSeries, initial_storage=(0.0, 0.0)):
    """Noise-free truth outflow, actual ET and final storage."""
    q, et, final = run_structure("two-bucket", truth_params(attrs), forcing, initial_storage)
    return q[:, 0], et[:, 0], float(final[0])


def place(spec: SyntheticSpec, i: int, attrs: Mapping[str, float]) -> tuple[tuple[float, float], str]:
    rng = philox(spec.master_seed, i, _PLACE)
    u, v = _unit(attrs, "slope"), _unit(attrs, "soil_depth")
    if i % 2:
        u, v = 1.0 - u, 1.0 - v
    sd = JITTER[i % 2]
    x = EXTENT * u + rng.normal(0.0, sd)
    y = EXTENT * v + rng.normal(0.0, sd)
    band = min(max(int(x / EXTENT * spec.n_regions), 0), spec.n_regions - 1)
    return (float(x), float(y)), f"R{band + 1}"


def generate_basin(spec: SyntheticSpec, basin_index: int,
                   forcing_override: ForcingSeries | None = None) -> tuple[BasinRecord, np.ndarray]:
    """One virtual basin and its attribute row (in ``spec.attribute_names`` order)."""
    if not 0 <= basin_index < spec.n_basins:
        raise DataError(f"basin index {basin_index} outside 0..{spec.n_basins - 1}")
    attrs = draw_attributes(spec, basin_index)
    forcing = forcing_override if forcing_override is not None else make_forcing(spec, basin_index, attrs)
    q, _, _ = truth_discharge(attrs, forcing)
    if spec.noise_std > 0:
        rng = philox(spec.master_seed, basin_index, _NOISE)
        q = q + rng.normal(0.0, spec.noise_std, size=q.size)
    q = np.maximum(q, 0.0)
    centroid, region = place(spec, basin_index, attrs)
    record = BasinRecord(basin_id(basin_index), centroid, forcing, region,
                         DischargeSeries(forcing.index, q))
    return record, np.array([attrs[n] for n in spec.attribute_names])


def generate_study(spec: SyntheticSpec) -> tuple[list[BasinRecord], AttributeTable]:
    basins, rows = [], []
    for i in range(spec.n_basins):
        b, a = generate_basin(spec, i)
        basins.append(b)
        rows.append(a)
    table = AttributeTable(tuple(b.basin_id for b in basins), spec.attribute_names, np.vstack(rows))
    return basins, table


def write_study(spec: SyntheticSpec, out_dir) -> Path:
    """Write manifest, forcing, discharge and attribute files; returns the manifest path."""
    out = Path(out_dir)
    basins, table = generate_study(spec)
    rows = []
    for b in basins:
        fpath = f"forcing/{b.basin_id}.csv"
        qpath = f"discharge/{b.basin_id}.csv"
        write_forcing(out / fpath, b.forcing)
        write_discharge(out / qpath, b.discharge)
        rows.append((b.basin_id, b.centroid[0], b.centroid[1], b.region, fpath, qpath))
    write_attributes(out / "attributes.csv", table)
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
