"""One rank's timestep split between a host pool and an emulated accelerator.

The lattice slice is partitioned into left border, bulk and right border.
The bulk lives in a separate buffer owned by the "device" pool (a dedicated
worker thread, optionally throttled to emulate a slower or faster
accelerator); the borders live in the host buffer.  Each step:

  1. the host exchanges rank halos (periodic wrap when running standalone),
  2. the bulk kernels are enqueued on the device's ordered queue,
  3. the host runs the same kernels on both borders concurrently,
  4. barrier, then the H columns adjacent to each bulk boundary are swapped
     between the two buffers in both directions.

When M < H the bulk stencil reaches into the rank halo columns, so those are
additionally pushed host->device right after the exchange, before the device
kernels launch.  The end state is bit-identical for every legal M and pool
configuration.
"""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeoutError
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, RuntimeFault
from .kernels import (BoundaryPolicy, Region, apply_bc, collide_region,
                      interior_region, propagate_region)
from .layouts import FieldBuffer, Geometry, LayoutDescriptor
from .model import LatticeModel, ModelParams


@dataclass(frozen=True)
class PartitionPlan:
    """Host/device column split of one rank's interior."""

    m: int
    geom: Geometry
    left: Region | None
    bulk: Region | None
    right: Region | None

    @property
    def border_sites(self) -> int:
        total = 0
        for r in (self.left, self.right):
            if r is not None:
                total += r.sites
        return total

    @property
    def bulk_sites(self) -> int:
        return self.bulk.sites if self.bulk is not None else 0


def make_partition(geom: Geometry, m: int) -> PartitionPlan:
    """Left border [H, H+M), bulk [H+M, H+LX-M), right border [H+LX-M, H+LX)."""
    if m < 0 or 2 * m > geom.lx:
        raise ConfigurationError(f"border width M={m} outside [0, LX/2]")
    h, lx, ly = geom.halo, geom.lx, geom.ly
    left = Region(h, h + m, 0, ly) if m > 0 else None
    right = Region(h + lx - m, h + lx, 0, ly) if m > 0 else None
    bulk = None
    if lx - 2 * m > 0:
        bulk = Region(h + m, h + lx - m, 0, ly)
    return PartitionPlan(m=m, geom=geom, left=left, bulk=bulk, right=right)


@dataclass(frozen=True)
class PoolConfig:
    host_workers: int = 1
    device_workers: int = 1
    device_throttle: float = 1.0

    def __post_init__(self):
        if self.host_workers < 1 or self.device_workers < 1:
            raise ConfigurationError("worker counts must be >= 1")
        if self.device_throttle < 1.0:
            raise ConfigurationError("device_throttle must be >= 1")


@dataclass
class TimestepTiming:
    t_acc: float = 0.0
    t_host: float = 0.0
    t_mpi: float = 0.0
    t_swap: float = 0.0
    t_exe: float = 0.0


#: Kernel work is issued in fixed-width column tiles so the temporaries of one
#: dispatch have a size-independent cache footprint; this keeps the measured
#: per-site cost linear in region size, which the time model assumes.
TILE_COLUMNS = 32


def _tile_columns(region: Region, tile: int = TILE_COLUMNS) -> list[Region]:
    return [Region(x0, min(x0 + tile, region.x_end),
                   region.y_begin, region.y_end)
            for x0 in range(region.x_begin, region.x_end, tile)]


class HeteroRuntime:
    """Orchestrates one rank's buffers, pools and halo movement.

    `rank_exchange` is called with the host buffer at the start of every step
    and must refresh the outer halo columns; the default performs a periodic
    X wrap (single-rank operation).  One runtime per rank; not reentrant.
    """

    def __init__(self, model: LatticeModel, params: ModelParams,
                 desc: LayoutDescriptor, geom: Geometry,
                 pools: PoolConfig | None = None,
                 policy: BoundaryPolicy | None = None,
                 rank_exchange=None, flop_scale: int = 1,
                 propagate_path: str = "fast",
                 watchdog_timeout: float = 120.0):
        if geom.halo < model.R:
            raise ConfigurationError(
                f"halo width {geom.halo} < model reach {model.R}")
        self.model = model
        self.params = params
        self.pools = pools or PoolConfig()
        self.policy = policy or BoundaryPolicy()
        self.flop_scale = flop_scale
        self.propagate_path = propagate_path
        self.watchdog_timeout = watchdog_timeout
        self.host_buf = FieldBuffer(desc, geom, model.Q)
        self.device_buf = FieldBuffer(desc, geom, model.Q)
        self.rank_exchange = rank_exchange or self._periodic_exchange
        # single dispatcher thread = the accelerator's ordered logical queue
        self._device_queue = ThreadPoolExecutor(
            max_workers=1, thread_name_prefix="lbhx-device")
        self._host_pool = ThreadPoolExecutor(
            max_workers=self.pools.host_workers, thread_name_prefix="lbhx-host")
        self._lock = threading.Lock()
        self.halo_generation = 0

    # -- lifecycle -----------------------------------------------------------

    def close(self) -> None:
        self._device_queue.shutdown(wait=True)
        self._host_pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- state access --------------------------------------------------------

    @property
    def geom(self) -> Geometry:
        return self.host_buf.geom

    def load_state(self, canonical: np.ndarray) -> None:
        """Install a canonical (Q, LX, LY) state and synchronize all halos."""
        self.host_buf.set_canonical(canonical, "prv")
        self.device_buf.set_canonical(canonical, "prv")
        self.rank_exchange(self.host_buf)
        self._push_rank_halos_to_device()
        self.halo_generation += 1

    def state(self, plan: PartitionPlan) -> np.ndarray:
        """Merged canonical state: borders from host, bulk from device."""
        merged = self.device_buf.canonical("prv")
        if plan.m > 0:
            host = self.host_buf.canonical("prv")
            merged[:, :plan.m, :] = host[:, :plan.m, :]
            merged[:, -plan.m:, :] = host[:, -plan.m:, :]
        return merged

    # -- halo movement -------------------------------------------------------

    def _periodic_exchange(self, buf: FieldBuffer) -> None:
        from .kernels import update_x_halos_periodic
        update_x_halos_periodic(buf, "prv")

    def _push_rank_halos_to_device(self) -> None:
        g = self.geom
        h = g.halo
        if h == 0:
            return
        self.device_buf.copy_columns(0, 0, h, "prv", src=self.host_buf)
        self.device_buf.copy_columns(h + g.lx, h + g.lx, h, "prv",
                                     src=self.host_buf)

    def halo_swap_device_host(self, plan: PartitionPlan) -> None:
        """Swap the H columns adjacent to each bulk boundary, both directions."""
        g = self.geom
        h, lx, m = g.halo, g.lx, plan.m
        if h == 0 or plan.bulk is None:
            return
        # host -> device: the H columns just outside the bulk
        self.device_buf.copy_columns(m, m, h, "prv", src=self.host_buf)
        self.device_buf.copy_columns(h + lx - m, h + lx - m, h, "prv",
                                     src=self.host_buf)
        # device -> host: the H columns just inside the bulk edges
        self.host_buf.copy_columns(h + m, h + m, h, "prv", src=self.device_buf)
        self.host_buf.copy_columns(lx - m, lx - m, h, "prv",
                                   src=self.device_buf)
        self.halo_generation += 1

    # -- kernel execution ----------------------------------------------------

    def _run_kernels(self, buf: FieldBuffer, regions: list[Region],
                     pool: ThreadPoolExecutor | None, workers: int) -> None:
        """propagate, bc, collide over disjoint regions with kernel barriers."""
        chunks: list[Region] = []
        for region in regions:
            chunks.extend(_tile_columns(region))

        def over_chunks(fn):
            if pool is None or workers <= 1 or len(chunks) == 1:
                for ch in chunks:
                    fn(ch)
                return
            futures = [pool.submit(fn, ch) for ch in chunks]
            for fut in futures:
                fut.result()

        over_chunks(lambda ch: propagate_region(
            self.model, buf, ch, path=self.propagate_path))
        over_chunks(lambda ch: apply_bc(self.model, buf, self.policy, ch))
        over_chunks(lambda ch: collide_region(
            self.model, self.params, buf, ch, flop_scale=self.flop_scale))

    def _device_compute(self, plan: PartitionPlan) -> float:
        """Bulk kernels on the device buffer; returns the thread CPU time.

        CPU time rather than wall time, so that host work sharing the cores
        with the emulated device does not leak into the device cost.
        """
        if plan.bulk is None:
            return 0.0
        t0 = time.thread_time()
        self._run_kernels(self.device_buf, [plan.bulk], None,
                          self.pools.device_workers)
        return time.thread_time() - t0


    def _host_phase(self, plan: PartitionPlan) -> float:
        regions = [r for r in (plan.left, plan.right) if r is not None]
        if not regions:
            return 0.0
        t0 = time.perf_counter()
        self._run_kernels(self.host_buf, regions, self._host_pool,
                          self.pools.host_workers)
        return time.perf_counter() - t0

    # -- the step ------------------------------------------------------------

    def run_timestep(self, plan: PartitionPlan,
                     skip_halo_swap: bool = False) -> TimestepTiming:
        """One full step per the concurrent control flow; state ends in prv.

        The device phase runs concurrently on its dispatcher thread while the
        main thread does the rank exchange and the host borders.  The device
        cost is its thread CPU time scaled by the throttle, and the step waits
        out the remainder of that busy window with a main-thread sleep, so the
        measured wall time stays faithful to max(t_acc, t_host + t_mpi) +
        t_swap even when both phases share cores.
        """
        timing = TimestepTiming()
        t_begin = time.perf_counter()
        h = self.geom.halo
        early_exchange = plan.m < h  # bulk stencil reaches the rank halos

        if early_exchange:
            t0 = time.perf_counter()
            self.rank_exchange(self.host_buf)
            timing.t_mpi = time.perf_counter() - t0
            self._push_rank_halos_to_device()

        t_launch = time.perf_counter()
        compute_future = self._device_queue.submit(self._device_compute, plan)

        if not early_exchange:
            t0 = time.perf_counter()
            self.rank_exchange(self.host_buf)
            timing.t_mpi = time.perf_counter() - t0
        timing.t_host = self._host_phase(plan)

        try:
            compute_cpu = compute_future.result(timeout=self.watchdog_timeout)
        except FutureTimeoutError:
            raise RuntimeFault(
                f"device queue did not drain within {self.watchdog_timeout}s "
                f"(phase: bulk kernels, M={plan.m})") from None
        timing.t_acc = compute_cpu * max(self.pools.device_throttle, 1.0)

        # the device stays busy for throttle x its compute time; if the host
        # track finished first, wait out the rest of the device window
        pad = timing.t_acc - (time.perf_counter() - t_launch)
        if pad > 0:
            time.sleep(pad)

        if not skip_halo_swap:
            t0 = time.perf_counter()
            self.halo_swap_device_host(plan)
            timing.t_swap = time.perf_counter() - t0
        timing.t_exe = time.perf_counter() - t_begin
        return timing


# -- auto-tuning harness -----------------------------------------------------

class HeteroTuningRunner:
    """perf_model.TuningRunner backed by a live runtime's pools.

    Times the full kernel pipeline on scratch regions of varying width, the
    rank-halo exchange, and the device<->host halo swap, without touching the
    runtime's simulation state.
    """

    def __init__(self, runtime: HeteroRuntime, widths: list[int] | None = None):
        self.rt = runtime
        g = runtime.geom
        if widths is None:
            lo = max(2, g.lx // 8)
            widths = sorted({lo, max(lo + 1, g.lx // 4), max(lo + 2, g.lx // 2)})
        if any(w > g.lx for w in widths):
            raise ConfigurationError("tuning width exceeds the interior")
        self.widths = widths
        self._scratch = FieldBuffer(runtime.host_buf.desc, g, runtime.model.Q)
        rng = np.random.default_rng(1234)
        self._scratch.prv[:] = 0.5 + 0.01 * rng.random(self._scratch.size)
        self._plan = make_partition(g, min(g.halo, g.lx // 2))

    def _region(self, width: int) -> Region:
        g = self.rt.geom
        return Region(g.halo, g.halo + width, 0, g.ly)

    def compute_sizes(self, pool: str) -> list[int]:
        return [w * self.rt.geom.ly for w in self.widths]

    def time_compute(self, pool: str, sites: int) -> float:
        width = sites // self.rt.geom.ly
        region = self._region(width)
        rt = self.rt

        def body() -> float:
            t0 = time.perf_counter()
            rt._run_kernels(self._scratch, [region], None, 1)
            return time.perf_counter() - t0

        if pool == "host":
            return body()
        if pool == "device":
            # device cost is thread CPU time x throttle, matching the step's
            # accounting; no concurrency is exercised here, so sleeping the
            # padding out would only add noise
            def cpu_body() -> float:
                t0 = time.thread_time()
                rt._run_kernels(self._scratch, [region], None, 1)
                return time.thread_time() - t0
            elapsed = rt._device_queue.submit(cpu_body).result()
            return elapsed * max(rt.pools.device_throttle, 1.0)
        raise ConfigurationError(f"unknown pool {pool!r}")

    def time_comm(self) -> float:
        t0 = time.perf_counter()
        self.rt.rank_exchange(self._scratch)
        return time.perf_counter() - t0

    def time_swap(self) -> float:
        t0 = time.perf_counter()
        self.rt.halo_swap_device_host(self._plan)
        return time.perf_counter() - t0


@dataclass
class BalancePoint:
    """One row of a border-width sweep: measured vs predicted step time."""

    m: int
    measured: float
    predicted: float

    @property
    def rel_error(self) -> float:
        return (self.measured - self.predicted) / self.predicted


def balance_experiment(runtime: HeteroRuntime, widths: list[int],
                       m_points: list[int], *, warmup: int = 3,
                       rounds: int = 30
                       ) -> tuple["PerfProfile", list[BalancePoint]]:
    """Tune a profile and sweep border widths, sampled in one interleaved loop.

    Every measurand -- the tuning regions on both pools, the exchange and swap
    transfers, and each sweep point's full timestep -- is sampled once per
    round, in an order reshuffled every round, and aggregated by the mean of
    its three fastest rounds.  On a shared host, interference only ever adds
    time, so the fastest samples estimate the undisturbed cost; shuffling
    removes the systematic effect of what ran just before each sample, and
    taking the same statistic for both the fitted profile and the measured
    sweep keeps the comparison between them meaningful.
    """
    import random as _random

    from .perf_model import PerfProfile, _fit_slope, predict

    runner = HeteroTuningRunner(runtime, widths)
    g = runtime.geom
    plans = {m: make_partition(g, m) for m in m_points}
    sizes = runner.compute_sizes("device")

    measurands: list[tuple[str, object]] = (
        [("device", s) for s in sizes] + [("host", s) for s in sizes]
        + [("comm", None), ("swap", None)] + [("step", m) for m in m_points])

    def sample(kind, arg) -> float:
        if kind in ("device", "host"):
            return runner.time_compute(kind, arg)
        if kind == "comm":
            return runner.time_comm()
        if kind == "swap":
            return runner.time_swap()
        return runtime.run_timestep(plans[arg]).t_exe

    for kind, arg in measurands:
        for _ in range(warmup):
            sample(kind, arg)
    samples: dict[tuple, list[float]] = {key: [] for key in measurands}
    shuffler = _random.Random(20240)
    order = list(measurands)
    for _ in range(rounds):
        shuffler.shuffle(order)
        for key in order:
            # untimed twin first: the timed sample then runs with caches and
            # predictors in its own state, not the previous measurand's
            sample(*key)
            samples[key].append(sample(*key))

    best = {key: sum(sorted(vals)[:3]) / 3 for key, vals in samples.items()}
    profile = PerfProfile(
        tau_d=_fit_slope(sizes, [best[("device", s)] for s in sizes]),
        tau_h=_fit_slope(sizes, [best[("host", s)] for s in sizes]),
        tau_c=max(best[("comm", None)], 0.0),
        t_swap=max(best[("swap", None)], 0.0),
        meta=(("source", "balance_experiment"),))
    points = [BalancePoint(m, best[("step", m)],
                           predict(profile, g.lx, g.ly, m).t_exe)
              for m in m_points]
    return profile, points


# -- whole-run driver --------------------------------------------------------

def random_state(model: LatticeModel, lx: int, ly: int, seed: int) -> np.ndarray:
    """Seeded positive canonical state: weights plus a small perturbation."""
    rng = np.random.default_rng(seed)
    w = model.w[:, None, None]
    return w * (1.0 + 0.1 * rng.random((model.Q, lx, ly)))


def runtime_from_config(cfg, rank_exchange=None) -> HeteroRuntime:
    from .model import builtin_model
    model = builtin_model(cfg.model_name)
    return HeteroRuntime(
        model=model,
        params=ModelParams(tau=cfg.tau),
        desc=cfg.layout,
        geom=cfg.geometry,
        pools=PoolConfig(cfg.host_workers, cfg.device_workers,
                         cfg.device_throttle),
        policy=cfg.policy,
        rank_exchange=rank_exchange,
    )


def run_simulation(cfg, initial_state: np.ndarray | None = None,
                   tuning_iters: int = 8):
    """Execute a configured run: optional M auto-tuning, N timesteps, report.

    Returns (BenchReport, final canonical state, dumps) where dumps is a list
    of (iteration, canonical array) captured every `run.dump_every` steps.
    """
    import statistics

    from .perf_model import autotune, mlups, optimal_m
    from .report import BenchReport

    with runtime_from_config(cfg) as rt:
        model = rt.model
        state = initial_state
        if state is None:
            state = random_state(model, cfg.lx, cfg.ly, cfg.seed)
        rt.load_state(state)

        m = cfg.m
        profile = None
        if cfg.autotune_m:
            profile = autotune(HeteroTuningRunner(rt),
                               warmup=2, iters=tuning_iters)
            m = optimal_m(profile, cfg.lx, cfg.ly)
        plan = make_partition(rt.geom, m)

        report = BenchReport("run", metadata={
            "model": model.name,
            "layout": cfg.layout.family.name.lower(),
            "vl": str(cfg.layout.vl),
            "lx": str(cfg.lx), "ly": str(cfg.ly),
            "m": str(m),
            "autotuned": str(cfg.autotune_m).lower(),
            "device_throttle": str(cfg.device_throttle),
            "seed": str(cfg.seed),
        })
        if profile is not None:
            report.metadata["profile.tau_d"] = repr(profile.tau_d)
            report.metadata["profile.tau_h"] = repr(profile.tau_h)

        dumps: list[tuple[int, np.ndarray]] = []
        times: list[float] = []
        if cfg.dump_every > 0:
            dumps.append((0, rt.state(plan)))
        for it in range(cfg.iterations):
            timing = rt.run_timestep(plan)
            times.append(timing.t_exe)
            report.add_row(iteration=it, t_acc=timing.t_acc,
                           t_host=timing.t_host, t_mpi=timing.t_mpi,
                           t_swap=timing.t_swap, t_exe=timing.t_exe)
            if cfg.dump_every > 0 and (it + 1) % cfg.dump_every == 0:
                dumps.append((it + 1, rt.state(plan)))
        if times:
            median_t = statistics.median(times)
            report.metadata["median_t_exe"] = repr(median_t)
            report.metadata["mlups"] = repr(mlups(cfg.lx, cfg.ly, median_t))
        final = rt.state(plan)
    return report, final, dumps
