"""Execution-time model for the host+accelerator split, and its auto-tuner.

The per-iteration time of one rank is modeled as

    t_exe  = max(t_acc, t_host + t_mpi) + t_swap
    t_acc  = (LX - 2M) * LY * tau_d
    t_host = (2M) * LY * tau_h
    t_mpi  = tau_c

with M the border width (columns computed on the host, per side).  t_exe is
minimized where accelerator and host+communication times balance; the
continuous optimum is

    M_opt = (LX * LY * tau_d - tau_c) / (2 * LY * (tau_d + tau_h)).

tau_c is modeled as M-independent.  The tuner recovers the four parameters
from timed mini-benchmarks: least-squares slopes of time vs sites processed
for tau_h and tau_d, medians of repeated transfers for tau_c and t_swap.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .errors import ConfigurationError, TuningError

#: measurement acceptance threshold (coefficient of variation per point)
CV_LIMIT = 0.05


@dataclass(frozen=True)
class PerfProfile:
    """Per-site and per-iteration cost parameters, all in seconds."""

    tau_d: float
    tau_h: float
    tau_c: float = 0.0
    t_swap: float = 0.0
    meta: tuple[tuple[str, str], ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.tau_d <= 0 or self.tau_h <= 0:
            raise ConfigurationError("tau_d and tau_h must be positive")
        if self.tau_c < 0 or self.t_swap < 0:
            raise ConfigurationError("tau_c and t_swap must be non-negative")

    def with_overrides(self, **kw) -> "PerfProfile":
        return replace(self, **kw)


@dataclass(frozen=True)
class Prediction:
    m: int
    t_acc: float
    t_host: float
    t_mpi: float
    t_swap: float
    t_exe: float
    mlups: float


def mlups(lx: int, ly: int, seconds_per_iteration: float) -> float:
    """Million lattice-site updates per second."""
    if seconds_per_iteration <= 0:
        raise ConfigurationError("iteration time must be positive")
    return lx * ly / (seconds_per_iteration * 1e6)


def predict(profile: PerfProfile, lx: int, ly: int, m: int) -> Prediction:
    """Evaluate the time model for border width m."""
    if m < 0 or 2 * m > lx:
        raise ConfigurationError(f"border width M={m} outside [0, LX/2]")
    t_acc = (lx - 2 * m) * ly * profile.tau_d
    t_host = 2 * m * ly * profile.tau_h
    t_mpi = profile.tau_c
    t_exe = max(t_acc, t_host + t_mpi) + profile.t_swap
    return Prediction(m, t_acc, t_host, t_mpi, profile.t_swap, t_exe,
                      mlups(lx, ly, t_exe))


def optimal_m(profile: PerfProfile, lx: int, ly: int) -> int:
    """Integer border width minimizing t_exe; ties broken toward smaller M.

    Rounds the continuous balance point and compares against the clamp
    endpoints, which is exact because t_exe is unimodal in M.
    """
    m_cont = (lx * ly * profile.tau_d - profile.tau_c) / \
        (2 * ly * (profile.tau_d + profile.tau_h))
    m_cont = min(max(m_cont, 0.0), lx / 2)
    candidates = {0, lx // 2, int(math.floor(m_cont)), int(math.ceil(m_cont))}
    best_m, best_t = None, None
    for m in sorted(c for c in candidates if 0 <= 2 * c <= lx):
        t = predict(profile, lx, ly, m).t_exe
        if best_t is None or t < best_t:  # ascending order: ties keep smaller M
            best_m, best_t = m, t
    return best_m


def whatif(profile: PerfProfile, lx: int, ly: int,
           overrides: dict[str, float] | None = None,
           m_step: int = 1) -> list[Prediction]:
    """Prediction sweep over M in [0, LX/2] with substituted parameters.

    At M=0 the curve is independent of tau_h, so measured M=0 points from the
    current hardware remain valid anchors for a substituted host.
    """
    overrides = overrides or {}
    for key in overrides:
        if key not in ("tau_d", "tau_h", "tau_c", "t_swap"):
            raise ConfigurationError(f"unknown profile parameter {key!r}")
        if overrides[key] < 0:
            raise ConfigurationError(f"override {key} must be non-negative")
    prof = profile.with_overrides(**overrides)
    return [predict(prof, lx, ly, m) for m in range(0, lx // 2 + 1, m_step)]


class TuningRunner(Protocol):
    """Benchmark harness contract used by autotune."""

    def compute_sizes(self, pool: str) -> list[int]:
        """Region sizes (sites) to sample on the given pool (host/device)."""

    def time_compute(self, pool: str, sites: int) -> float:
        """Seconds for one propagate+bc+collide iteration on `sites` sites."""

    def time_comm(self) -> float:
        """Seconds for one inter-rank halo exchange."""

    def time_swap(self) -> float:
        """Seconds for one host<->device halo swap."""


def _timed_medians(fns: list[Callable[[], float]], warmup: int, iters: int
                   ) -> tuple[list[float], list[float]]:
    """Median and coefficient of variation per timed function.

    Samples are taken round-robin across the functions so that slow drift of
    the machine during the measurement biases every size equally instead of
    tilting the fitted slope.
    """
    for fn in fns:
        for _ in range(warmup):
            fn()
    samples: list[list[float]] = [[] for _ in fns]
    for _ in range(iters):
        for i, fn in enumerate(fns):
            samples[i].append(fn())
    medians = [statistics.median(s) for s in samples]
    cvs = [statistics.pstdev(s) / m if m > 0 else 0.0
           for s, m in zip(samples, medians)]
    return medians, cvs


def _fit_slope(sites: list[int], times: list[float]) -> float:
    """Least-squares slope of time vs sites (affine fit, intercept dropped)."""
    slope, _intercept = np.polyfit(np.asarray(sites, dtype=np.float64),
                                   np.asarray(times, dtype=np.float64), 1)
    return float(slope)


def autotune(runner: TuningRunner, *, warmup: int = 5, iters: int = 20,
             comm_samples: int = 20) -> PerfProfile:
    """Measure a PerfProfile with the runner's mini-benchmarks.

    Raises TuningError for degenerate inputs: fewer than 3 region sizes per
    pool, non-monotone median timings, or a non-positive fitted slope.
    """
    slopes: dict[str, float] = {}
    flags: list[str] = []
    for pool in ("device", "host"):
        sizes = sorted(runner.compute_sizes(pool))
        if len(sizes) < 3 or any(s <= 0 for s in sizes):
            raise TuningError(
                f"{pool} pool: need >= 3 positive region sizes, got {sizes}")
        medians, cvs = _timed_medians(
            [lambda s=sites: runner.time_compute(pool, s) for sites in sizes],
            warmup, iters)
        for sites, cv in zip(sizes, cvs):
            if cv > CV_LIMIT:
                flags.append(f"{pool}@{sites}:cv={cv:.3f}")
        # degenerate if the trend is not increasing overall, or any step
        # decreases by more than measurement jitter can explain
        if medians[-1] <= medians[0] or any(
                b < 0.8 * a for a, b in zip(medians, medians[1:])):
            raise TuningError(
                f"{pool} pool: non-monotone timings {medians} for sizes {sizes}")
        slope = _fit_slope(sizes, medians)
        if slope <= 0:
            raise TuningError(f"{pool} pool: non-positive fitted slope {slope}")
        slopes[pool] = slope
    tau_c = statistics.median(runner.time_comm() for _ in range(comm_samples))
    t_swap = statistics.median(runner.time_swap() for _ in range(comm_samples))
    meta = [("source", "autotune")]
    if flags:
        meta.append(("unstable", ";".join(flags)))
    return PerfProfile(tau_d=slopes["device"], tau_h=slopes["host"],
                       tau_c=max(tau_c, 0.0), t_swap=max(t_swap, 0.0),
                       meta=tuple(meta))


# -- profile (de)serialization: flat key-value text --------------------------

_FIELDS = ("tau_d", "tau_h", "tau_c", "t_swap")


def format_profile(profile: PerfProfile) -> str:
    lines = [f"{k} = {getattr(profile, k)!r}" for k in _FIELDS]
    lines += [f"meta.{k} = {v}" for k, v in profile.meta]
    return "\n".join(lines) + "\n"


def parse_profile(text: str) -> PerfProfile:
    values: dict[str, float] = {}
    meta: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"profile line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("meta."):
            meta.append((key[5:], value))
        elif key in _FIELDS:
            try:
                values[key] = float(value)
            except ValueError:
                raise ConfigurationError(
                    f"profile line {lineno}: bad float {value!r}") from None
        else:
            raise ConfigurationError(f"profile line {lineno}: unknown key {key!r}")
    missing = [k for k in ("tau_d", "tau_h") if k not in values]
    if missing:
        raise ConfigurationError(f"profile is missing {missing}")
    return PerfProfile(meta=tuple(meta), **values)


def save_profile(path, profile: PerfProfile) -> None:
    with open(path, "w") as fh:
        fh.write(format_profile(profile))


def load_profile(path) -> PerfProfile:
    with open(path) as fh:
        return parse_profile(fh.read())


#: Illustrative what-if profiles, derived from public peak-bandwidth figures
#: (e.g. 2x240 GB/s for a K80-class GPU, ~59 GB/s for a Haswell-class host)
#: assuming ~1.2 kB of memory traffic per site update at 37 populations.
#: These document the workflow; they are NOT measurements of this machine.
SAMPLE_PROFILES: dict[str, PerfProfile] = {
    "k80_like": PerfProfile(tau_d=2.5e-9, tau_h=2.0e-8, tau_c=2e-4, t_swap=8e-4,
                            meta=(("source", "illustrative registry"),)),
    "knc_like": PerfProfile(tau_d=3.4e-9, tau_h=2.0e-8, tau_c=2e-4, t_swap=8e-4,
                            meta=(("source", "illustrative registry"),)),
    "balanced": PerfProfile(tau_d=1.0e-8, tau_h=1.0e-8, tau_c=0.0, t_swap=1e-4,
                            meta=(("source", "illustrative registry"),)),
}
