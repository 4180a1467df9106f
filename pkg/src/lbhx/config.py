"""Flat key-value run configuration: file parsing, flag and env overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .kernels import PERIODIC, BoundaryPolicy
from .layouts import (Clustering, Family, Geometry, LayoutDescriptor,
                      clustering_from_name, family_from_name)
from .model import ModelParams, builtin_model

ENV_OVERRIDES = {
    "LBHX_HOST_WORKERS": "pool.host_workers",
    "LBHX_DEVICE_WORKERS": "pool.device_workers",
    "LBHX_DEVICE_THROTTLE": "pool.device_throttle",
}

DEFAULTS: dict[str, str] = {
    "lattice.lx": "48",
    "lattice.ly": "64",
    "model": "d2q9",
    "layout": "caosoa",
    "vl": "4",
    "clustering": "interleaved",
    "tau": "0.8",
    "bc.y": PERIODIC,
    "hetero.m": "0",
    "hetero.autotune": "false",
    "pool.host_workers": "1",
    "pool.device_workers": "1",
    "pool.device_throttle": "1",
    "run.iterations": "10",
    "run.dump_every": "0",
    "run.seed": "1",
    "ranks.endpoints": "",
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | None = None,
                overrides: dict[str, str] | None = None,
                use_env: bool = True) -> dict[str, str]:
    """Merge defaults, config file, environment and explicit overrides."""
    values = dict(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            file_values = parse_config_text(fh.read())
        unknown = set(file_values) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    if use_env:
        for env, key in ENV_OVERRIDES.items():
            if env in os.environ:
                values[key] = os.environ[env]
    if overrides:
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        values.update(overrides)
    return values


def _as_int(values: dict[str, str], key: str) -> int:
    try:
        return int(values[key])
    except ValueError:
        raise ConfigurationError(f"{key} must be an integer, got {values[key]!r}") \
            from None


def _as_float(values: dict[str, str], key: str) -> float:
    try:
        return float(values[key])
    except ValueError:
        raise ConfigurationError(f"{key} must be a number, got {values[key]!r}") \
            from None


def _as_bool(values: dict[str, str], key: str) -> bool:
    v = values[key].lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key} must be a boolean, got {values[key]!r}")


@dataclass
class RunConfig:
    """Validated, typed view of a run configuration."""

    lx: int
    ly: int
    model_name: str
    layout: LayoutDescriptor
    tau: float
    policy: BoundaryPolicy
    m: int
    autotune_m: bool
    host_workers: int
    device_workers: int
    device_throttle: float
    iterations: int
    dump_every: int
    seed: int
    endpoints: list[str] = field(default_factory=list)
    raw: dict[str, str] = field(default_factory=dict)

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.lx, self.ly, halo=3)


def build_run_config(values: dict[str, str]) -> RunConfig:
    family = family_from_name(values["layout"])
    if family in (Family.CSOA, Family.CAOSOA):
        desc = LayoutDescriptor(family, _as_int(values, "vl"),
                                clustering_from_name(values["clustering"]))
    else:
        desc = LayoutDescriptor(family)
    model = builtin_model(values["model"])  # validates the model name
    geom = Geometry(_as_int(values, "lattice.lx"), _as_int(values, "lattice.ly"),
                    halo=3)
    geom.check_vl(desc)
    if geom.halo < model.R:
        raise ConfigurationError("halo narrower than the model stencil reach")
    m = _as_int(values, "hetero.m")
    autotune_m = _as_bool(values, "hetero.autotune")
    if autotune_m and m != 0:
        raise ConfigurationError(
            "hetero.m and hetero.autotune are mutually exclusive")
    if 2 * m > geom.lx:
        raise ConfigurationError(f"hetero.m={m} exceeds LX/2")
    params = ModelParams(tau=_as_float(values, "tau"))  # validates tau
    endpoints = [e.strip() for e in values["ranks.endpoints"].split(",")
                 if e.strip()]
    iterations = _as_int(values, "run.iterations")
    if iterations < 0:
        raise ConfigurationError("run.iterations must be >= 0")
    return RunConfig(
        lx=geom.lx, ly=geom.ly,
        model_name=values["model"],
        layout=desc,
        tau=params.tau,
        policy=BoundaryPolicy(values["bc.y"]),
        m=m,
        autotune_m=autotune_m,
        host_workers=_as_int(values, "pool.host_workers"),
        device_workers=_as_int(values, "pool.device_workers"),
        device_throttle=_as_float(values, "pool.device_throttle"),
        iterations=iterations,
        dump_every=_as_int(values, "run.dump_every"),
        seed=_as_int(values, "run.seed"),
        endpoints=endpoints,
        raw=dict(values),
    )
