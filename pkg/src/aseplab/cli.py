"""Command-line interface.

Subcommands: ``simulate`` (one desk-scale trajectory), ``check`` (run one
experiment spec file), ``suite`` (run a directory of spec files),
``oracle`` (exact computations), ``scaling`` (moment series plus exponent
fit).  Exit codes: 0 all PASS, 1 any FAIL, 2 usage or configuration
error.  Stochastic runs require an explicit seed.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments, figures, oracle
from .engine import NearestNeighbor, run
from .experiments import ExperimentSpec, ResultRow, emit, parse_spec_file, run_experiment
from .lattice import Configuration, DensityProfile, Rates, Ring, Segment, sample_config
from .rng import RngStream


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="aseplab",
        description="Exact ASEP simulation and verification experiments",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, seed_required=True):
        sp.add_argument("--seed", type=int, required=seed_required, help="master seed (u64)")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", type=Path, default=None, help="output file path")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--no-figures", action="store_true",
                        help="skip rendering figures next to the output")

    sim = sub.add_parser("simulate", help="run one trajectory and summarize it")
    common(sim)
    sim.add_argument("--rho", type=float, required=True)
    sim.add_argument("--p", type=float, required=True)
    sim.add_argument("--q", type=float, default=None)
    sim.add_argument("--t", type=float, required=True)
    sim.add_argument("--window", type=int, default=30, help="half-width of the segment")
    sim.add_argument("--ring", type=int, default=None, help="use a ring of this many sites")

    chk = sub.add_parser("check", help="run one experiment spec file")
    common(chk, seed_required=False)
    chk.add_argument("specfile", type=Path)
    chk.add_argument("--replicas", type=int, default=None, help="override replica count")
    chk.add_argument("--window", type=int, default=None, help="override window half-width")

    ste = sub.add_parser("suite", help="run every .spec file in a directory")
    common(ste, seed_required=False)
    ste.add_argument("specdir", type=Path)

    orc = sub.add_parser("oracle", help="exact desk-scale computations")
    orc.add_argument("kind", choices=("distribution", "second-class", "walk-pi"))
    orc.add_argument("--p", type=float, required=True)
    orc.add_argument("--q", type=float, default=None)
    orc.add_argument("--t", type=float, default=1.0)
    orc.add_argument("--rho", type=float, default=0.5)
    orc.add_argument("--ring", type=int, default=6)
    orc.add_argument("--particles", type=int, default=3)
    orc.add_argument("--half-width", type=int, default=5)
    orc.add_argument("--out", type=Path, default=None)

    sca = sub.add_parser("scaling", help="moment series and exponent fit")
    common(sca)
    sca.add_argument("--rho", type=float, required=True)
    sca.add_argument("--p", type=float, required=True)
    sca.add_argument("--q", type=float, default=None)
    sca.add_argument("--t-list", type=str, required=True, help="comma-separated times")
    sca.add_argument("--replicas", type=int, required=True)
    sca.add_argument("--window", type=int, default=None)
    return ap


def _exit_code(rows) -> int:
    return 1 if any(r.verdict == "FAIL" for r in rows) else 0


def _emit_and_render(rows, arts_list, args) -> None:
    out = args.out
    if out is None:
        for row in rows:
            print(",".join(experiments._fmt(v) for v in row.emitted_values()))
        return
    emit(rows, args.format, out)
    print(f"wrote {out}")
    if not args.no_figures:
        for arts in arts_list:
            base = out if len(arts_list) == 1 else out.with_name(
                f"{out.stem}_{arts.get('kind', 'figure')}{out.suffix}"
            )
            fig = figures.render(arts, base)
            if fig is not None:
                print(f"wrote {fig}")


def _cmd_simulate(args) -> int:
    rates = Rates(args.p, args.q) if args.q is not None else Rates(args.p)
    if args.ring is not None:
        topo = Ring(args.ring)
    else:
        topo = Segment(-args.window, args.window)
    stream = RngStream(args.seed)
    cfg = sample_config(topo, DensityProfile.constant(args.rho), stream.child(0))
    traj = run(cfg, NearestNeighbor(rates), args.t, stream.child(1))
    moved = int(traj.effected.sum())
    rows = [
        ResultRow(experiment="simulate", rho=args.rho, p=rates.p, q=rates.q, t=args.t,
                  seed=args.seed, estimate=float(moved), stderr=0.0,
                  reference_source="effected moves"),
        ResultRow(experiment="simulate", rho=args.rho, p=rates.p, q=rates.q, t=args.t,
                  seed=args.seed, estimate=float(traj.final.n_particles), stderr=0.0,
                  reference=float(cfg.n_particles), verdict="PASS",
                  reference_source="particle conservation"),
    ]
    if args.out is not None:
        emit(rows, args.format, args.out)
        print(f"wrote {args.out}")
        if not args.no_figures:
            fig = figures.render_worldlines(traj, args.out.with_suffix(".png"))
            print(f"wrote {fig}")
    else:
        print(f"events={traj.n_events} moved={moved} particles={traj.final.n_particles}")
    return 0


def _cmd_check(args) -> int:
    spec = parse_spec_file(args.specfile)
    if args.seed is not None:
        spec.params["seed"] = args.seed
        spec.seed = args.seed
    if args.replicas is not None:
        spec.params["replicas"] = args.replicas
    if args.window is not None:
        spec.params["window"] = args.window
    if args.out is None and spec.out:
        args.out = Path(spec.out)
    rows, arts = run_experiment(spec, workers=args.workers)
    _emit_and_render(rows, [arts], args)
    return _exit_code(rows)


def _cmd_suite(args) -> int:
    files = sorted(args.specdir.glob("*.spec"))
    if not files:
        print(f"no .spec files under {args.specdir}", file=sys.stderr)
        return 2
    all_rows, all_arts = [], []
    for f in files:
        spec = parse_spec_file(f)
        rows, arts = run_experiment(spec, workers=args.workers)
        for row in rows:
            print(f"{f.name}: {row.experiment} {row.verdict}")
        all_rows.extend(rows)
        all_arts.append(arts)
    if args.out is not None:
        _emit_and_render(all_rows, all_arts, args)
    return _exit_code(all_rows)


def _cmd_oracle(args) -> int:
    rates = Rates(args.p, args.q) if args.q is not None else Rates(args.p)
    rows = []
    if args.kind == "distribution":
        ring = Ring(args.ring)
        sites = [round(i * args.ring / args.particles) for i in range(args.particles)]
        init = Configuration.from_sites(ring, sites)
        dist = oracle.exact_distribution(init, NearestNeighbor(rates), ring, args.t, 1e-12)
        marg = oracle.occupancy_marginal(dist, args.ring)
        for i, v in enumerate(marg):
            rows.append(ResultRow(experiment="oracle-distribution", p=rates.p, q=rates.q,
                                  t=args.t, z=i, estimate=float(v),
                                  reference_source="exact occupancy marginal"))
    elif args.kind == "second-class":
        ex = oracle.exact_second_class(args.half_width, args.rho, rates, args.t, 1e-12)
        for j, qv, cv in zip(ex.sites, ex.q_law, ex.covariance):
            rows.append(ResultRow(experiment="oracle-second-class", rho=args.rho,
                                  p=rates.p, q=rates.q, t=args.t, z=int(j),
                                  estimate=float(cv), reference=float(args.rho * (1 - args.rho) * qv),
                                  verdict="PASS" if ex.identity_residual() <= 1e-10 else "FAIL",
                                  reference_source="exact pair-chain member"))
    else:
        for j in range(0, 16):
            rows.append(ResultRow(experiment="oracle-walk-pi", p=rates.p, q=rates.q, z=j,
                                  estimate=oracle.geometric_pi(j, rates),
                                  reference_source="reflected-walk stationary law"))
    if args.out is not None:
        emit(rows, "csv", args.out)
        print(f"wrote {args.out}")
    else:
        for row in rows:
            print(",".join(experiments._fmt(v) for v in row.emitted_values()))
    return _exit_code(rows)


def _cmd_scaling(args) -> int:
    t_list = [float(v) for v in args.t_list.split(",")]
    params = {"rho": args.rho, "p": args.p, "t": t_list,
              "replicas": args.replicas, "seed": args.seed}
    if args.q is not None:
        params["q"] = args.q
    if args.window is not None:
        params["window"] = args.window
    spec = ExperimentSpec("scaling-psi", params)
    rows, arts = run_experiment(spec, workers=args.workers)
    _emit_and_render(rows, [arts], args)
    return _exit_code(rows)


_COMMANDS = {
    "simulate": _cmd_simulate,
    "check": _cmd_check,
    "suite": _cmd_suite,
    "oracle": _cmd_oracle,
    "scaling": _cmd_scaling,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
