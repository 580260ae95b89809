"""Flat ``key = value`` configuration files.

Lines are UTF-8; ``#`` starts a comment; blank lines are ignored. Unknown
or repeated keys are rejected. Relative paths resolve against the
directory of the file that names them.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .core_data import DateIndex
from .errors import ConfigError, DataError
from .reservoir import ReservoirSpec
from .synthetic import DEFAULT_ATTRIBUTE_RANGES, SyntheticSpec


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _pair(text: str) -> tuple[float, float]:
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def _log_level(text: str) -> str:
    t = text.strip().upper()
    if t not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise ValueError(f"unknown log level {text!r}")
    return t


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return v


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str
    path: bool = False


KEYS: dict[str, Key] = {
    # study
    "manifest": Key(str, None, "basin manifest CSV", path=True),
    "attributes": Key(str, None, "attribute CSV (needed by exp2-exp4 and regression transfer)", path=True),
    "ensemble": Key(str, "builtin", "'builtin' or a directory of <basin_id>.csv ensemble files", path=True),
    "train_start": Key(_date, dt.date(1993, 1, 1), "first training day"),
    "train_end": Key(_date, dt.date(2000, 12, 31), "last training day"),
    "predict_start": Key(_date, dt.date(2001, 1, 1), "first prediction day"),
    "predict_end": Key(_date, dt.date(2006, 12, 31), "last prediction day"),
    "clip_nonnegative": Key(_bool, False, "clip HYPER/RC output at zero"),
    "master_seed": Key(_seed, 0, "seed for sampling and synthetic data"),
    "exclude_spinup": Key(_bool, True, "leave the members' first 365 days out of the BMA fit"),
    "bma_temperature": Key(float, 1.0, "divides BMA log-likelihoods; 1.0 is plain BMA"),
    # reservoirs
    "reservoir_seed": Key(_seed, 0, "seed of the shared reservoir realization"),
    "washout": Key(int, 365, "reservoir rows dropped before readout regression"),
    "gauged_size": Key(int, 700, "gauged reservoir size D"),
    "gauged_density": Key(float, 0.0006, "gauged adjacency density"),
    "gauged_spectral_radius": Key(float, 0.4, "gauged spectral radius"),
    "gauged_input_scale": Key(float, 0.5, "gauged input scale"),
    "gauged_ridge": Key(float, 0.001, "gauged ridge parameter"),
    "ungauged_size": Key(int, 200, "ungauged reservoir size D"),
    "ungauged_density": Key(float, 0.0006, "ungauged adjacency density"),
    "ungauged_spectral_radius": Key(float, 0.4, "ungauged spectral radius"),
    "ungauged_input_scale": Key(float, 0.5, "ungauged input scale"),
    "ungauged_ridge": Key(float, 1.0, "ungauged ridge parameter"),
    # transfer and experiments
    "lasso_lambda": Key(float, 0.1, "lasso penalty"),
    "lasso_convention": Key(str, "scaled", "'scaled' (RSS/(2s) + a|b|) or 'raw' (RSS + l|b|)"),
    "n_components": Key(int, 3, "principal components kept"),
    "k_folds": Key(int, 12, "exp2 fold count"),
    "n_test": Key(int, 17, "exp3/exp4 fixed test-set size"),
    "n_list": Key(_int_list, (3, 10, 20, 30, 50, 70), "exp3 gauged-set sizes"),
    "iterations": Key(int, 100, "exp3 iterations per size; exp4 random-baseline draws"),
    # runtime
    "workers": Key(int, None, "worker processes (default: available CPUs)"),
    "log_level": Key(_log_level, "INFO", "DEBUG, INFO, WARNING or ERROR"),
    # synthetic studies
    "n_basins": Key(int, 20, "synthetic basin count"),
    "years": Key(int, 14, "synthetic record length in years"),
    "noise_std": Key(float, 0.5, "synthetic discharge noise std, mm/day"),
    "n_regions": Key(int, 4, "synthetic region count (bands along x)"),
    "synth_start": Key(_date, dt.date(1993, 1, 1), "first synthetic day"),
}
for _name in DEFAULT_ATTRIBUTE_RANGES:
    KEYS[f"range_{_name}"] = Key(_pair, DEFAULT_ATTRIBUTE_RANGES[_name], f"synthetic {_name} range 'lo, hi'")

RUNTIME_KEYS = ("workers", "log_level")


def parse_lines(lines, origin: str = "<config>", base: Path | None = None) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}:{n}: key {key!r} given twice")
        values[key] = parse_value(key, text, origin=f"{origin}:{n}", base=base)
    return values


def parse_value(key: str, text: str, origin: str = "<override>", base: Path | None = None):
    if key not in KEYS:
        raise ConfigError(f"{origin}: unknown key {key!r}")
    spec = KEYS[key]
    try:
        value = spec.parse(text)
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {key}: {exc}") from None
    if spec.path and base is not None and not (key == "ensemble" and value == "builtin"):
        p = Path(value)
        value = str(p if p.is_absolute() else base / p)
    return value


def load_config(path=None, overrides: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    values = {k: s.default for k, s in KEYS.items()}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        text = path.read_text(encoding="utf-8")
        values.update(parse_lines(text.splitlines(), str(path), path.parent))
    for key, text in (overrides or {}).items():
        values[key] = parse_value(key, text, base=Path.cwd())
    return values


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def reservoir_spec(values: Mapping[str, Any], mode: str) -> ReservoirSpec:
    try:
        return ReservoirSpec(
            size=values[f"{mode}_size"], density=values[f"{mode}_density"],
            spectral_radius=values[f"{mode}_spectral_radius"], input_scale=values[f"{mode}_input_scale"],
            ridge=values[f"{mode}_ridge"], seed=values["reservoir_seed"], washout=values["washout"],
        )
    except DataError as exc:
        raise ConfigError(f"{mode} reservoir: {exc}") from None


def _window(values, prefix: str) -> DateIndex:
    first, last = values[f"{prefix}_start"], values[f"{prefix}_end"]
    if last < first:
        raise ConfigError(f"{prefix}_end precedes {prefix}_start")
    return DateIndex.between(first, last)


def study_config(values: Mapping[str, Any], workers: int | None = None):
    from .experiments import StudyConfig, default_workers

    if values["manifest"] is None:
        raise ConfigError("no manifest given (set 'manifest' in the config or pass --manifest)")
    w = workers or values["workers"] or default_workers()
    return StudyConfig(
        manifest=Path(values["manifest"]),
        attributes=None if values["attributes"] is None else Path(values["attributes"]),
        ensemble=values["ensemble"],
        gauged=reservoir_spec(values, "gauged"),
        ungauged=reservoir_spec(values, "ungauged"),
        train_window=_window(values, "train"),
        predict_window=_window(values, "predict"),
        clip=values["clip_nonnegative"],
        master_seed=values["master_seed"],
        exclude_spinup=values["exclude_spinup"],
        bma_temperature=values["bma_temperature"],
        lasso_lambda=values["lasso_lambda"],
        lasso_convention=values["lasso_convention"],
        n_components=values["n_components"],
        k_folds=values["k_folds"],
        n_test=values["n_test"],
        n_list=values["n_list"],
        iterations=values["iterations"],
        workers=w,
    )


def synthetic_spec(values: Mapping[str, Any]) -> SyntheticSpec:
    ranges = {name: values[f"range_{name}"] for name in DEFAULT_ATTRIBUTE_RANGES}
    try:
        return SyntheticSpec(
            n_basins=values["n_basins"], years=values["years"], master_seed=values["master_seed"],
            noise_std=values["noise_std"], attribute_ranges=ranges, start=values["synth_start"],
            n_regions=values["n_regions"],
        )
    except DataError as exc:
        raise ConfigError(f"synthetic spec: {exc}") from None


def defaults_text() -> str:
    lines = []
    for k, s in KEYS.items():
        d = s.default
        if isinstance(d, tuple):
            d = ", ".join(str(v) for v in d)
        lines.append(f"  {k} = {'' if d is None else d}    # {s.doc}")
    return "\n".join(lines)


def serializable(values: Mapping[str, Any]) -> dict[str, Any]:
    out = {}
    for k, v in values.items():
        if isinstance(v, dt.date):
            v = v.isoformat()
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def configure_logging(level: str, config_hash: str = "-"):
    """Structured ``key=value`` log lines on stderr tagged with the config hash."""

    class _Tag(logging.Filter):
        def filter(self, record):
            record.config_hash = config_hash
            return True

    handler = logging.StreamHandler()
    handler.addFilter(_Tag())
    handler.setFormatter(logging.Formatter(
        'level=%(levelname)s config=%(config_hash)s logger=%(name)s msg="%(message)s"'))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)
