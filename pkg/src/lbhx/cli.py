"""Command-line front end: benchmark tables, balance/VL sweeps, scaling runs,
validation, prediction and state dumps, all emitting machine-readable CSV.

Exit status: 0 success, 1 configuration error, 2 runtime fault, 3 validation
failure.
"""
from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from .config import DEFAULTS, build_run_config, load_config
from .errors import (CommunicationFault, ConfigurationError, LbhxError,
                     RuntimeFault, ValidationFailure)
from .hetero import (HeteroRuntime, HeteroTuningRunner, PoolConfig,
                     balance_experiment, make_partition, random_state,
                     run_simulation, runtime_from_config)
from .kernels import (collide_region, interior_region, propagate_region,
                      step_region, update_x_halos_periodic)
from .layouts import (Family, FieldBuffer, LayoutDescriptor,
                      clustering_from_name, family_from_name, read_dump,
                      write_dump)
from .model import ModelParams, builtin_model, validate_moments
from .perf_model import (SAMPLE_PROFILES, autotune, load_profile, mlups,
                         optimal_m, save_profile, whatif)
from .report import BenchReport


def _key_to_flag(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def _common_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("-c", "--config", metavar="FILE",
                        help="flat key = value configuration file")
    parent.add_argument("--set", metavar="KEY=VALUE", action="append",
                        default=[], help="override any configuration key")
    for key in DEFAULTS:
        parent.add_argument(_key_to_flag(key), dest=f"cfg::{key}",
                            metavar="V", help=f"override {key}")
    parent.add_argument("-o", "--output", metavar="FILE",
                        help="write the report CSV here instead of stdout")
    return parent


def _collect_config(args) -> dict:
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    for key in DEFAULTS:
        value = getattr(args, f"cfg::{key}", None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _emit(report: BenchReport, args) -> None:
    text = report.to_csv()
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _layout_descriptor(name: str, vl: int, clustering: str) -> LayoutDescriptor:
    family = family_from_name(name)
    if family in (Family.CSOA, Family.CAOSOA):
        return LayoutDescriptor(family, vl, clustering_from_name(clustering))
    return LayoutDescriptor(family)


# -- bench -------------------------------------------------------------------

KERNELS = ("propagate", "collide", "step")
LAYOUT_NAMES = ("aos", "soa", "csoa", "caosoa")


def cmd_bench_kernels(cfg, args) -> BenchReport:
    """Kernel x layout timing table: median ms per iteration, CV, MLUPS."""
    if args.iters <= 0:
        raise ConfigurationError("bench needs --iters >= 1")
    kernels = args.kernels.split(",")
    layouts = args.layouts.split(",")
    for k in kernels:
        if k not in KERNELS:
            raise ConfigurationError(f"unknown kernel {k!r}")
    model = builtin_model(cfg.model_name)
    params = ModelParams(tau=cfg.tau)
    geom = cfg.geometry
    # validate every layout/VL combination before any timing run
    descs = [_layout_descriptor(name, cfg.layout.vl,
                                cfg.layout.clustering.name.lower())
             for name in layouts]
    for desc in descs:
        geom.check_vl(desc)
    throttle = max(cfg.device_throttle, 1.0)
    pool = args.pool
    scale = throttle if pool == "device" else 1.0

    report = BenchReport("bench", metadata={
        "model": model.name, "lx": str(cfg.lx), "ly": str(cfg.ly),
        "pool": pool, "device_throttle": str(cfg.device_throttle),
        "iters": str(args.iters),
    })
    region = interior_region(geom)
    unstable = []
    for name, desc in zip(layouts, descs):
        buf = FieldBuffer(desc, geom, model.Q)
        buf.set_canonical(random_state(model, cfg.lx, cfg.ly, cfg.seed))
        update_x_halos_periodic(buf)
        bodies = {
            "propagate": lambda: propagate_region(model, buf, region,
                                                  path="fast"),
            "collide": lambda: collide_region(model, params, buf, region),
            "step": lambda: (update_x_halos_periodic(buf),
                             step_region(model, params, buf, region,
                                         cfg.policy, path="fast")),
        }
        for kernel in kernels:
            body = bodies[kernel]
            if kernel == "collide":  # collide reads nxt; keep it populated
                buf.nxt[:] = buf.prv
            for _ in range(max(args.warmup, 1)):
                body()
            samples = []
            for _ in range(args.iters):
                t0 = time.perf_counter()
                body()
                samples.append((time.perf_counter() - t0) * scale)
            med = statistics.median(samples)
            cv = statistics.pstdev(samples) / med if med > 0 else 0.0
            if cv > 0.05:
                unstable.append(f"{kernel}/{name}")
            report.add_row(kernel=kernel, layout=name, vl=desc.vl,
                           lx=cfg.lx, ly=cfg.ly, pool=pool,
                           t_ms=med * 1e3, cv=cv,
                           mlups=mlups(cfg.lx, cfg.ly, med))
    if unstable:
        report.metadata["unstable_cells"] = ";".join(unstable)
    return report


# -- sweep-balance -----------------------------------------------------------

def cmd_sweep_balance(cfg, args) -> BenchReport:
    """Measured vs predicted MLUPS over a border-fraction grid, plus M*."""
    lx, ly = cfg.lx, cfg.ly
    step = max(args.frac_step, 0.01)
    fracs = [round(f * step, 10) for f in range(int(0.5 / step) + 1)]
    m_points = sorted({min(int(round(f * lx / 2)), lx // 2) for f in fracs})
    widths = sorted({max(2, lx // 4), lx // 2, 3 * lx // 4, lx})
    with runtime_from_config(cfg) as rt:
        rt.load_state(random_state(rt.model, lx, ly, cfg.seed))
        profile, points = balance_experiment(rt, widths, m_points,
                                             rounds=args.rounds)
    m_star = optimal_m(profile, lx, ly)
    report = BenchReport("sweep-balance", metadata={
        "model": cfg.model_name, "lx": str(lx), "ly": str(ly),
        "device_throttle": str(cfg.device_throttle),
        "m_star": str(m_star), "m_star_frac": repr(2 * m_star / lx),
        "profile.tau_d": repr(profile.tau_d),
        "profile.tau_h": repr(profile.tau_h),
        "profile.tau_c": repr(profile.tau_c),
        "profile.t_swap": repr(profile.t_swap),
    })
    for p in points:
        report.add_row(m=p.m, m_frac=2 * p.m / lx,
                       mlups_meas=mlups(lx, ly, p.measured),
                       mlups_pred=mlups(lx, ly, p.predicted),
                       t_meas_us=p.measured * 1e6,
                       t_pred_us=p.predicted * 1e6)
    return report


# -- sweep-vl ----------------------------------------------------------------

def cmd_sweep_vl(cfg, args) -> BenchReport:
    """Best-balance MLUPS per cluster size VL."""
    vls = [int(v) for v in args.vls.split(",")]
    family = cfg.layout.family
    if family not in (Family.CSOA, Family.CAOSOA):
        raise ConfigurationError("sweep-vl needs a clustered layout "
                                 "(csoa or caosoa)")
    for vl in vls:
        desc = LayoutDescriptor(family, vl, cfg.layout.clustering)
        cfg.geometry.check_vl(desc)  # VL=1 or non-divisor rejected here
    report = BenchReport("sweep-vl", metadata={
        "model": cfg.model_name, "lx": str(cfg.lx), "ly": str(cfg.ly),
        "layout": family.name.lower(),
        "device_throttle": str(cfg.device_throttle),
    })
    best_vl, best_mlups = None, -1.0
    lx, ly = cfg.lx, cfg.ly
    for vl in vls:
        desc = LayoutDescriptor(family, vl, cfg.layout.clustering)
        model = builtin_model(cfg.model_name)
        with HeteroRuntime(model, ModelParams(tau=cfg.tau), desc,
                           cfg.geometry,
                           pools=PoolConfig(cfg.host_workers,
                                            cfg.device_workers,
                                            cfg.device_throttle),
                           policy=cfg.policy) as rt:
            rt.load_state(random_state(model, lx, ly, cfg.seed))
            profile = autotune(HeteroTuningRunner(rt), warmup=2,
                               iters=args.rounds)
            m_best = optimal_m(profile, lx, ly)
            plan = make_partition(cfg.geometry, m_best)
            for _ in range(3):
                rt.run_timestep(plan)
            t = min(rt.run_timestep(plan).t_exe for _ in range(args.rounds))
        rate = mlups(lx, ly, t)
        if rate > best_mlups:
            best_vl, best_mlups = vl, rate
        report.add_row(vl=vl, best_m_frac=2 * m_best / lx, mlups=rate)
    report.metadata["argmax_vl"] = str(best_vl)
    return report


# -- scale -------------------------------------------------------------------

def cmd_scale(cfg, args) -> BenchReport:
    """Multi-rank MLUPS/speedup, accelerator-only (v1) vs balanced (v2)."""
    from .distributed import run_distributed

    rank_counts = [int(r) for r in args.ranks.split(",")]
    model = builtin_model(cfg.model_name)
    state = random_state(model, cfg.lx, cfg.ly, cfg.seed)

    m_star = cfg.m
    if m_star == 0:
        with runtime_from_config(cfg) as rt:
            rt.load_state(state)
            profile = autotune(HeteroTuningRunner(rt), warmup=2, iters=8)
        m_star = optimal_m(profile, cfg.lx, cfg.ly)

    report = BenchReport("scale", metadata={
        "model": cfg.model_name, "lx": str(cfg.lx), "ly": str(cfg.ly),
        "transport": args.transport, "m_star": str(m_star),
        "device_throttle": str(cfg.device_throttle),
    })
    finals: dict[tuple, np.ndarray] = {}
    base: dict[str, float] = {}
    for mode, m in (("v1", 0), ("v2", m_star)):
        for n in rank_counts:
            import copy
            c = copy.copy(cfg)
            c.m = min(m, (cfg.lx // n) // 2)
            _, merged, results = run_distributed(
                c, n, args.transport, initial_state=state)
            finals[(mode, n)] = merged
            t = statistics.median(
                t for r in results for t in r.iteration_times)
            rate = mlups(cfg.lx, cfg.ly, t)
            base.setdefault(mode, rate)
            report.add_row(ranks=n, mode=mode, mlups=rate,
                           speedup=rate / base[mode])
    reference = finals[("v1", rank_counts[0])]
    for key, merged in finals.items():
        if not np.array_equal(merged, reference):
            raise RuntimeFault(
                f"final state for {key} deviates from the reference run")
    report.metadata["finals_identical"] = "true"
    return report


# -- validate ----------------------------------------------------------------

def cmd_validate(cfg, args) -> int:
    from .validate import run_suite

    results = run_suite(quick=args.quick, inject=args.inject)
    for res in results:
        print(res.line())
    failures = [r for r in results if not r.passed]
    if failures:
        raise ValidationFailure(
            f"{len(failures)} of {len(results)} checks failed: "
            + ", ".join(r.name for r in failures))
    print(f"all {len(results)} checks passed")
    return 0


# -- predict -----------------------------------------------------------------

def cmd_predict(cfg, args) -> BenchReport:
    if args.profile:
        profile = load_profile(args.profile)
        source = args.profile
    elif args.registry:
        if args.registry not in SAMPLE_PROFILES:
            raise ConfigurationError(
                f"unknown registry profile {args.registry!r}; "
                f"available: {sorted(SAMPLE_PROFILES)}")
        profile = SAMPLE_PROFILES[args.registry]
        source = f"registry:{args.registry}"
    else:
        raise ConfigurationError("predict needs --profile FILE or "
                                 "--registry NAME")
    overrides: dict[str, float] = {}
    for item in args.override or []:
        if "=" not in item:
            raise ConfigurationError(
                f"--override expects PARAM=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        try:
            overrides[key.strip()] = float(value)
        except ValueError:
            raise ConfigurationError(
                f"--override {key}: bad number {value!r}") from None

    lx, ly = cfg.lx, cfg.ly
    curves = {"base": whatif(profile, lx, ly, m_step=args.m_step)}
    if overrides:
        curves["override"] = whatif(profile, lx, ly, overrides,
                                    m_step=args.m_step)
    report = BenchReport("predict", metadata={
        "lx": str(lx), "ly": str(ly), "profile": source,
        "overrides": ";".join(f"{k}={v}" for k, v in overrides.items()),
    })
    for name, preds in curves.items():
        for p in preds:
            report.add_row(curve=name, m=p.m, m_frac=2 * p.m / lx,
                           t_exe=p.t_exe, mlups=p.mlups)
    if args.dat_prefix:
        for name, preds in curves.items():
            path = f"{args.dat_prefix}_{name}.dat"
            with open(path, "w") as fh:
                fh.write(f"# 2M/LX  MLUPS  ({source}, {lx}x{ly})\n")
                for p in preds:
                    fh.write(f"{2 * p.m / lx:.6f} {p.mlups:.6f}\n")
    return report


# -- autotune ----------------------------------------------------------------

def cmd_autotune(cfg, args) -> BenchReport:
    with runtime_from_config(cfg) as rt:
        rt.load_state(random_state(rt.model, cfg.lx, cfg.ly, cfg.seed))
        profile = autotune(HeteroTuningRunner(rt), warmup=args.warmup,
                           iters=args.iters)
    m_star = optimal_m(profile, cfg.lx, cfg.ly)
    if args.save:
        save_profile(args.save, profile)
    report = BenchReport("autotune", metadata={
        "model": cfg.model_name, "lx": str(cfg.lx), "ly": str(cfg.ly),
        "device_throttle": str(cfg.device_throttle),
    })
    report.add_row(tau_d=profile.tau_d, tau_h=profile.tau_h,
                   tau_c=profile.tau_c, t_swap=profile.t_swap,
                   m_star=m_star, m_star_frac=2 * m_star / cfg.lx)
    return report


# -- model show --------------------------------------------------------------

def cmd_model_show(cfg, args) -> int:
    model = builtin_model(args.name or cfg.model_name)
    print(f"model {model.name}: D={model.D} Q={model.Q} R={model.R}")
    print(f"cs2 = {model.cs2!r}")
    shells: dict[float, list[int]] = {}
    for i, (cx, cy) in enumerate(model.velocities):
        shells.setdefault(cx * cx + cy * cy, []).append(i)
    for c2 in sorted(shells):
        members = shells[c2]
        w = model.weights[members[0]]
        print(f"  |c|^2={c2:g}: {len(members)} velocities, weight {w!r}")
    residuals = validate_moments(model, max_order=4)
    for order, res in sorted(residuals.items()):
        print(f"  moment order {order}: max residual {res:.3e}")
    return 0


# -- dump / load -------------------------------------------------------------

def cmd_dump(cfg, args) -> int:
    report, final, dumps = run_simulation(cfg)
    buf = FieldBuffer(cfg.layout, cfg.geometry, builtin_model(cfg.model_name).Q)
    buf.set_canonical(final)
    write_dump(args.out, buf)
    print(f"wrote {args.out}: {cfg.model_name} {cfg.lx}x{cfg.ly} after "
          f"{cfg.iterations} iterations"
          + (f", mlups={float(report.metadata['mlups']):.3f}"
             if "mlups" in report.metadata else ""))
    return 0


def cmd_load(cfg, args) -> int:
    state, meta = read_dump(args.path)
    nq, lx, ly = state.shape
    print(f"{args.path}: Q={nq} lattice {lx}x{ly} "
          f"family={meta['family'].name.lower()} vl={meta['vl']} "
          f"clustering={meta['clustering'].name.lower()}")
    rho = state.sum(axis=0)
    print(f"rho: mean={rho.mean():.6f} min={rho.min():.6f} "
          f"max={rho.max():.6f}")
    if args.export_csv:
        np.savetxt(args.export_csv, state.reshape(nq, -1).T, delimiter=",")
        print(f"wrote {args.export_csv}")
    return 0


# -- driver ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="lbhx", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", parents=[common],
                       help="kernel x layout timing table")
    p.add_argument("--kernels", default="propagate,collide",
                   help="comma list from propagate,collide,step")
    p.add_argument("--layouts", default="aos,soa,csoa,caosoa")
    p.add_argument("--iters", type=int, default=11)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--pool", choices=("host", "device"), default="host")

    p = sub.add_parser("sweep-balance", parents=[common],
                       help="measured vs predicted MLUPS over border widths")
    p.add_argument("--frac-step", type=float, default=0.05,
                   help="grid step in 2M/LX")
    p.add_argument("--rounds", type=int, default=20)

    p = sub.add_parser("sweep-vl", parents=[common],
                       help="best-balance MLUPS per cluster size")
    p.add_argument("--vls", default="2,4,8")
    p.add_argument("--rounds", type=int, default=8)

    p = sub.add_parser("scale", parents=[common],
                       help="multi-rank scaling, accelerator-only vs balanced")
    p.add_argument("--ranks", default="1,2,4")
    p.add_argument("--transport", choices=("in_memory", "tcp"),
                   default="in_memory")

    p = sub.add_parser("validate", parents=[common],
                       help="run the validation suite")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--inject", choices=("skip-halo-swap",),
                   help="negative control: plant a fault, expect a failure")

    p = sub.add_parser("predict", parents=[common],
                       help="prediction sweep from a stored profile")
    p.add_argument("--profile", help="profile file from `lbhx autotune`")
    p.add_argument("--registry", help="named illustrative profile")
    p.add_argument("--override", action="append", metavar="PARAM=VALUE")
    p.add_argument("--m-step", type=int, default=1)
    p.add_argument("--dat-prefix",
                   help="also write gnuplot two-column files "
                        "PREFIX_<curve>.dat")

    p = sub.add_parser("autotune", parents=[common],
                       help="measure a performance profile on this machine")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--iters", type=int, default=11)
    p.add_argument("--save", metavar="FILE")

    p = sub.add_parser("model", parents=[common], help="model inspection")
    msub = p.add_subparsers(dest="model_command", required=True)
    ps = msub.add_parser("show", parents=[common])
    ps.add_argument("--name", help="model to show (default: configured)")

    p = sub.add_parser("dump", parents=[common],
                       help="run the configured simulation, dump final state")
    p.add_argument("--out", required=True)

    p = sub.add_parser("load", parents=[common], help="inspect a state dump")
    p.add_argument("path")
    p.add_argument("--export-csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_run_config(_collect_config(args))
        if args.command == "bench":
            _emit(cmd_bench_kernels(cfg, args), args)
        elif args.command == "sweep-balance":
            _emit(cmd_sweep_balance(cfg, args), args)
        elif args.command == "sweep-vl":
            _emit(cmd_sweep_vl(cfg, args), args)
        elif args.command == "scale":
            _emit(cmd_scale(cfg, args), args)
        elif args.command == "validate":
            cmd_validate(cfg, args)
        elif args.command == "predict":
            _emit(cmd_predict(cfg, args), args)
        elif args.command == "autotune":
            _emit(cmd_autotune(cfg, args), args)
        elif args.command == "model":
            cmd_model_show(cfg, args)
        elif args.command == "dump":
            cmd_dump(cfg, args)
        elif args.command == "load":
            cmd_load(cfg, args)
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeFault, CommunicationFault) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return 2
    except ValidationFailure as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 3
    except LbhxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
