"""Command-line front end.

    tim-admission gen-topology --users 8 --links 45 --seed 1 -o net.txt
    tim-admission solve net.txt --rank 3 --emit json
    tim-admission oracle net.txt --rank 3
    tim-admission sweep --ranks 1-8 --realizations 50 --jobs 4 -o dof.csv
    tim-admission check

Exit status is 0 on success, 1 when a solve or check fails and 2 for
unusable input (bad arguments or an unreadable topology file).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .admission import AdmissionConfig, StageError, exhaustive_oracle
from .diagnostics import geometry_report, report_passes
from .harness import (
    ExperimentSpec,
    gen_topology,
    read_topology,
    run_sweep,
    solve_report,
    sweep_to_csv,
    format_topology,
)
from .objectives import SmoothedL1Params
from .trust_region import NumericalFailure, TrustRegionConfig

log = logging.getLogger("tim_admission")

# (K, r) pairs of the default geometry suite
CHECK_CONFIGS = [
    (1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (4, 2), (5, 3), (6, 1), (6, 3), (8, 2),
    (8, 4), (8, 8), (10, 5), (12, 3), (12, 6), (16, 1), (16, 4), (16, 6), (20, 2), (24, 5),
    (24, 6), (32, 1), (32, 3), (32, 6),
]


class InputError(Exception):
    pass


def int_list(text):
    """Parse ``"1-8"``, ``"1,2,5"`` or a mix such as ``"1-3,6"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return tuple(out)


def float_list(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return vals


def _solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--lambda", dest="lam", type=float, default=0.5, help="diagonal weight of the sparsity cost")
    g.add_argument("--rho", type=float, default=0.01, help="weight of the diagonal terms")
    g.add_argument("--epsilon", type=float, default=0.01, help="smoothing of |X_ii|")
    g.add_argument("--grad-tol", type=float, default=1e-6)
    g.add_argument("--max-iters", type=int, default=500)
    g.add_argument("--feas-tol", type=float, default=1e-3, help="normalized completion residual for feasibility")
    g.add_argument("--restarts", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scan", action="store_true", help="linear prefix scan instead of bisection")


def _config(args, r):
    return AdmissionConfig(
        r=r,
        params=SmoothedL1Params(lam=args.lam, rho=args.rho, epsilon=args.epsilon),
        feasibility_tol=args.feas_tol,
        restarts=args.restarts,
        tr_config=TrustRegionConfig(grad_tol=args.grad_tol, max_outer_iters=args.max_iters),
        seed=args.seed,
        scan=args.scan,
    )


def _read(path):
    try:
        return read_topology(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _write(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)


def cmd_gen_topology(args):
    try:
        topo = gen_topology(args.users, args.links, args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    _write(format_topology(topo), args.output)
    return 0


def _summary(data):
    lines = [
        f"N0 = {data['N0']}",
        "admitted users: " + (" ".join(map(str, data["admitted"])) or "(none)"),
        "priority order: " + " ".join(map(str, data["priority"])),
        f"residual ||P(UV^T) - I||_F = {data['feasibility_residual']:.3e}",
        "prefix checks: " + ", ".join(f"{m}:{'ok' if v else 'no'}" for m, v in data["prefix_checks"].items()),
    ]
    for stage, iters in data["iterations"].items():
        lines.append(f"iterations [{stage}]: {' '.join(map(str, iters)) or '-'}")
    return "\n".join(lines) + "\n"


def cmd_solve(args):
    topo = _read(args.topology)
    cfg = _config(args, args.rank)
    if args.rank > topo.K:
        raise InputError(f"rank {args.rank} exceeds the number of users {topo.K}")
    if args.emit:
        _write(solve_report(topo, cfg, args.emit), args.output)
    else:
        _write(_summary(json.loads(solve_report(topo, cfg, "json"))), args.output)
    return 0


def cmd_oracle(args):
    topo = _read(args.topology)
    cfg = _config(args, args.rank)
    try:
        nmax, best = exhaustive_oracle(topo, cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.emit == "json":
        text = json.dumps({"K": topo.K, "r": args.rank, "N_max": nmax, "users": best}, sort_keys=True, indent=2) + "\n"
    elif args.emit == "csv":
        text = "K,r,N_max,users\n" + f"{topo.K},{args.rank},{nmax},{' '.join(map(str, best))}\n"
    else:
        text = f"N_max = {nmax}\nusers: {' '.join(map(str, best))}\n"
    _write(text, args.output)
    return 0


def cmd_sweep(args):
    try:
        spec = ExperimentSpec(
            K=args.users,
            link_count=args.links,
            r_values=args.ranks,
            lambda_values=args.lambdas if args.lambdas else (args.lam,),
            realizations=args.realizations,
            seed=args.seed,
            mode=args.mode,
            base=_config(args, 1),
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    rows, samples = run_sweep(spec, jobs=args.jobs)
    _write(sweep_to_csv(rows), args.output)
    failed = sum(v is None for vals in samples.values() for v in vals)
    if failed:
        print(f"{failed} solves failed and were excluded from the means", file=sys.stderr)
    return 0


def cmd_check(args):
    configs = CHECK_CONFIGS if args.configs is None else [(K, r) for K in args.configs for r in args.ranks if r <= K]
    all_ok = True
    for K, r in configs:
        for seed in range(args.seed, args.seed + args.repeats):
            rep = geometry_report(K, r, seed)
            verdict = report_passes(rep)
            ok = all(verdict.values())
            all_ok &= ok
            bad = [k for k, v in verdict.items() if not v]
            worst_slope = min(rep["taylor_sparsity"], rep["taylor_completion"])
            worst_grad = max(rep["gradient_sparsity"], rep["gradient_completion"])
            worst_sym = max(rep["symmetry_sparsity"], rep["symmetry_completion"])
            print(
                f"K={K:3d} r={r:2d} seed={seed:3d}  grad {worst_grad:.1e}  sym {worst_sym:.1e}  "
                f"slope {worst_slope:5.2f}  {'ok' if ok else 'FAIL ' + ','.join(bad)}"
            )
    print("all checks passed" if all_ok else "some checks FAILED")
    return 0 if all_ok else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="tim-admission", description="User admission control by low-rank alignment.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-topology", help="random topology file")
    p.add_argument("--users", "-K", type=int, default=8)
    p.add_argument("--links", "-L", type=int, default=45)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen_topology)

    for name, func, helptext in (
        ("solve", cmd_solve, "run the admission pipeline on a topology file"),
        ("oracle", cmd_oracle, "largest feasible user set by exhaustive search"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("topology")
        p.add_argument("--rank", "-r", type=int, required=True)
        p.add_argument("--emit", choices=("json", "csv"))
        p.add_argument("-o", "--output")
        _solver_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="batch experiment, CSV of mean admitted users")
    p.add_argument("--users", "-K", type=int, default=8)
    p.add_argument("--links", "-L", type=int, default=45)
    p.add_argument("--ranks", type=int_list, default=tuple(range(1, 9)), help="e.g. 1-8 or 2,4")
    p.add_argument("--lambdas", type=float_list, help="comma-separated; overrides --lambda")
    p.add_argument("--realizations", "-n", type=int, default=50)
    p.add_argument("--mode", choices=("pipeline", "oracle", "baseline", "all"), default="all")
    p.add_argument("--jobs", "-j", type=int, default=1)
    p.add_argument("-o", "--output")
    _solver_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="finite-difference and invariant checks of the geometry")
    p.add_argument("--configs", type=int_list, help="matrix sizes K to test (default: built-in list)")
    p.add_argument("--ranks", type=int_list, default=(1, 2, 4, 6))
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StageError, NumericalFailure) as exc:
        print(f"solve failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
