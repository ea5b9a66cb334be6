"""Command-line interface: ``python -m coalsis <command> ...``."""

import argparse
import dataclasses
import logging
import os
import sys

from . import experiments as ex


def _config(args):
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    over = {}
    for key in ("data", "model", "model_file", "proposal", "output", "workers", "seed",
                "replicates", "huw_table"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "thetas", None):
        over["thetas"] = ex._floats(args.thetas)
    if getattr(args, "schedules", None):
        over["schedules"] = ex._strs(args.schedules)
    if "seed" not in over and os.environ.get("COALSIS_SEED"):
        over["seed"] = int(os.environ["COALSIS_SEED"])
    return dataclasses.replace(cfg, **over).validate()


def _common(p):
    p.add_argument("--config", help="flat key=value config file (needs 'version = 1')")
    p.add_argument("--data", help="data file or builtin:<name>")
    p.add_argument("--model", choices=("finite-alleles", "ism"))
    p.add_argument("--model-file", dest="model_file")
    p.add_argument("--proposal", help="GT, SD, PIM_OPTIMAL or HUW")
    p.add_argument("--output", help="output directory (default: results)")
    p.add_argument("--workers", type=int, help="worker processes (default: 1)")
    p.add_argument("--seed", type=int, help="master seed (default: $COALSIS_SEED or 0)")
    p.add_argument("--replicates", type=int)
    p.add_argument("--huw-table", dest="huw_table", help="precomputed HUW table file")
    p.add_argument("--plot", action="store_true", help="also write an SVG plot")


def build_parser():
    ap = argparse.ArgumentParser(prog="coalsis", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("surface", help="likelihood estimates over a theta grid")
    _common(p)
    p.add_argument("--thetas", help="e.g. '0.1 0.2 0.3'")
    p.add_argument("--schedules", help="subset of S1 S2 S3 S4 (default S1)")

    p = sub.add_parser("varcurve", help="weight variance by remaining lineages")
    _common(p)
    p.add_argument("--thetas", help="single theta (defaults to the data's value)")
    p.add_argument("--proposals", help="several proposals, e.g. 'GT SD'")

    p = sub.add_parser("costconv", help="truncated cost against its large-n limit")
    _common(p)
    p.add_argument("--n-values", dest="n_values", default=None)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--proposals", help="e.g. 'GT SD'")

    p = sub.add_parser("makedata", help="simulate benchmark data")
    p.add_argument("kind", choices=("fa", "ism"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sites", type=int, default=20, help="sites of the flip model (fa)")
    p.add_argument("--nested", default="", help="nested subsample sizes (fa)")
    p.add_argument("--r-target", dest="r_target", type=int, help="condition on r (ism)")
    p.add_argument("--prefix")
    p.add_argument("--output", default="data")

    p = sub.add_parser("huwtable", help="precompute and save a HUW table")
    p.add_argument("--smax", type=int, required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--reading", choices=("mutant_count", "allele_count"),
                   default="mutant_count")
    p.add_argument("--output", required=True)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "surface":
            out = ex.cmd_likelihood_surface(_config(args))
            if args.plot:
                ex.plot_surface(out, out[:-4] + ".svg")
        elif args.command == "varcurve":
            props = ex._strs(args.proposals) if args.proposals else None
            out = ex.cmd_variance_curve(_config(args), props)
            if args.plot:
                ex.plot_varcurve(out, out[:-4] + ".svg")
        elif args.command == "costconv":
            cfg = _config(args)
            over = {}
            if args.n_values:
                over["n_values"] = ex._ints(args.n_values)
            if args.t is not None:
                over["t"] = args.t
            cfg = dataclasses.replace(cfg, **over).validate()
            props = ex._strs(args.proposals) if args.proposals else None
            out = ex.cmd_cost_convergence(cfg, props)
        elif args.command == "makedata":
            paths = ex.cmd_make_data(args.kind, args.output, args.n, args.theta, args.seed,
                                     sites=args.sites, nested=ex._ints(args.nested),
                                     r_target=args.r_target, prefix=args.prefix)
            out = " ".join(paths)
        else:
            ex.cmd_huw_table(args.smax, args.theta, args.output, args.reading)
            out = args.output
    except (ex.ConfigError, ValueError, LookupError, OSError) as e:
        print(f"coalsis: error: {e}", file=sys.stderr)
        return 2
    print(out)
    return 0
