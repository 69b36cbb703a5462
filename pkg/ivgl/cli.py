# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

"""
Command line tool: ``ivgl {simulate,fit,screen,laplacian,compare} ...``

Usage and input errors exit with status 2, with a message on stderr.
``IVGL_SEED`` in the environment overrides ``--seed``.
"""

import argparse
import logging
import os
import sys

from pathlib import Path

import numpy as np
import pandas as pd

from ivgl import __version__
from ivgl.cache import ReplicateCache
from ivgl.conf import is_debug_activated, setting
from ivgl.estimators import Estimator, get_estimator
from ivgl.exceptions import IVGLError, InvalidInputError
from ivgl.graph import LAPLACIAN_KINDS, NORMALIZED, build_distance_graph, laplacian
from ivgl.io import (
    FLOAT_FORMAT,
    RunManifest,
    load_dataset,
    read_coords_csv,
    read_edges_tsv,
    read_matrix_csv,
    write_dataset,
    write_json,
)
from ivgl.simulate import SimConfig, generate, run_grid
from ivgl.solver import SolverConfig
from ivgl.two_stage import Dataset, sis_scores, sis_screen, stage1_fit


logger = logging.getLogger("ivgl.cli")

COMPARED_METHODS = ("gl", "ivgl", "ivgls")
OUTPUT_TABLES = ("summary.csv", "replicates.csv", "mcc_long.csv")


class UsageError(InvalidInputError):
    pass


def resolve_seed(args):
    value = os.environ.get("IVGL_SEED")
    if not value:
        return args.seed
    try:
        return int(value)
    except ValueError:
        raise UsageError("IVGL_SEED must be an integer, got %r" % value)


def solver_config(args, seed):
    changes = {"rng_seed": seed}
    for name in ("cv_folds", "lambda_grid_size"):
        if getattr(args, name, None) is not None:
            changes[name] = getattr(args, name)
    if getattr(args, "lambda2_grid", None):
        changes["lambda2_grid"] = tuple(args.lambda2_grid)
    return SolverConfig().replace(**changes)


def read_graph(args, p=None, required=True):
    """Graph from ``--edges``, or from ``--coords`` and ``--threshold``."""
    if args.edges and args.coords:
        raise UsageError("Use either --edges or --coords, not both")
    if args.edges:
        return read_edges_tsv(args.edges, p)
    if args.coords:
        if args.threshold is None:
            raise UsageError("--coords needs --threshold")
        coords = read_coords_csv(args.coords)
        if p is not None and coords.shape[0] != p:
            raise InvalidInputError(
                "%s has %d rows but there are %d nodes" % (args.coords, coords.shape[0], p)
            )
        return build_distance_graph(coords, args.threshold)
    if required:
        raise UsageError("One of --edges or --coords/--threshold is required")
    return None


def _methods(value):
    methods = [name.strip() for name in value.split(",") if name.strip()]
    for name in methods:
        get_estimator(name)
    return methods


def cmd_simulate(args):
    seed = resolve_seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    methods = _methods(args.methods)
    solver_cfg = solver_config(args, seed)

    sizes = {name: getattr(args, name) for name in ("n", "p", "q", "n_invalid")}
    cfg = SimConfig(
        setup=args.setup,
        si=args.si[0],
        s0=args.s0[0],
        n_replicates=args.reps,
        base_seed=seed,
        fixed_graph=args.fixed_graph,
        **{name: value for name, value in sizes.items() if value is not None},
    )
    cache = ReplicateCache.using_directory(args.cache_dir) if args.cache_dir else None

    manifest = RunManifest(
        command="simulate",
        config={
            "simulation": cfg.as_dict(),
            "si": list(args.si),
            "s0": list(args.s0),
            "methods": methods,
            "solver": solver_cfg.as_dict(),
        },
        seed=seed,
    )
    table = run_grid(
        cfg, args.si, args.s0, methods, solver_cfg=solver_cfg, n_jobs=args.jobs, cache=cache
    )
    table.to_csv(out)

    failed = int((~table.replicates["ok"].astype(bool)).sum())
    if failed:
        logger.warning("%d fit(s) failed, see the error column of replicates.csv", failed)
        print("%d fit(s) failed; n_ok is below the number of replicates" % failed, file=sys.stderr)

    if args.write_data:
        first = cfg.replace(si=args.si[0], s0=args.s0[0])
        sim = generate(first, first.replicate_seeds()[0])
        data_dir = out / "data"
        paths = write_dataset(sim, data_dir)
        RunManifest(
            command="simulate --write-data", config={"simulation": first.as_dict()}, seed=sim.seed
        ).write(data_dir, outputs=paths.values())

    manifest.write(out, outputs=[out / name for name in OUTPUT_TABLES])
    print(table.summary.to_string(index=False))
    return 0


def _fit_document(result, ds, seed):
    instrument_names = ds.get_instrument_names() if ds.Z is not None else None
    return result.as_dict(ds.get_node_names(), instrument_names, seed)


def _input_manifest(command, seed, config, paths):
    manifest = RunManifest(command=command, config=config, seed=seed)
    for path in paths:
        manifest.add_input(path)
    return manifest


def cmd_fit(args):
    seed = resolve_seed(args)
    estimator_class = get_estimator(args.method)
    if estimator_class.options.instrumented and not args.z:
        raise UsageError("Method %s needs --z" % args.method)

    ds = load_dataset(args.y, args.x, args.z)
    graph = read_graph(args, ds.p, required=estimator_class.options.graph_penalty)
    L = None if graph is None else laplacian(graph, args.laplacian)
    solver_cfg = solver_config(args, seed)
    manifest = _input_manifest(
        "fit",
        seed,
        {"method": args.method, "laplacian": args.laplacian, "solver": solver_cfg.as_dict()},
        [args.y, args.x, args.z, args.edges, args.coords],
    )

    result = estimator_class(solver_cfg).fit(ds, L)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(_fit_document(result, ds, seed), out)
    manifest.write(out.parent, outputs=[out])
    logger.info("%s fit written to %s", result.method_tag, out)
    return 0


def cmd_screen(args):
    Z, instrument_names = read_matrix_csv(args.z)
    X, _ = read_matrix_csv(args.x)
    if Z.shape[0] != X.shape[0]:
        raise InvalidInputError(
            "Row counts differ: %s has %d, %s has %d" % (args.z, Z.shape[0], args.x, X.shape[0])
        )
    if args.top > Z.shape[1]:
        raise UsageError("--top %d is larger than the %d instruments" % (args.top, Z.shape[1]))

    scores = sis_scores(Z, X, aggregate=args.aggregate)
    selected = sis_screen(Z, X, args.top, aggregate=args.aggregate)
    frame = pd.DataFrame(
        {
            "instrument": [instrument_names[l] for l in selected],
            "index": selected + 1,
            "score": scores[selected],
        }
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format=FLOAT_FORMAT)
    _input_manifest(
        "screen", None, {"top": args.top, "aggregate": args.aggregate}, [args.z, args.x]
    ).write(out.parent, outputs=[out])
    return 0


def cmd_laplacian(args):
    graph = read_graph(args, args.p)
    if graph.isolated_nodes:
        logger.warning(
            "Isolated node(s) %s: their rows of the Laplacian are zero",
            ", ".join(str(j + 1) for j in graph.isolated_nodes),
        )
    L = laplacian(graph, args.kind)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    labels = [str(j + 1) for j in range(L.p)]
    pd.DataFrame(L.matrix, columns=labels).to_csv(out, index=False, float_format=FLOAT_FORMAT)
    _input_manifest(
        "laplacian",
        None,
        {"kind": args.kind, "threshold": args.threshold},
        [args.edges, args.coords],
    ).write(out.parent, outputs=[out])

    low, high = L.eigenvalue_range()
    print("nodes: %d, edges: %d" % (graph.p, len(graph.edges)))
    print("eigenvalues: [%.6g, %.6g]" % (low, high))
    print("max |row sum|: %.3g" % float(np.abs(L.matrix.sum(axis=1)).max()))
    return 0


def cmd_compare(args):
    seed = resolve_seed(args)
    ds = load_dataset(args.y, args.x, args.z)
    if args.screen:
        keep = np.sort(sis_screen(ds.Z, ds.X, args.screen, aggregate=args.aggregate))
        names = ds.get_instrument_names()
        ds = Dataset(
            Y=ds.Y,
            X=ds.X,
            Z=ds.Z[:, keep],
            node_names=ds.node_names,
            instrument_names=tuple(names[l] for l in keep),
        )
        logger.info("Kept %d instruments after screening", keep.size)
    L = laplacian(read_graph(args, ds.p), args.laplacian)
    solver_cfg = solver_config(args, seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _input_manifest(
        "compare",
        seed,
        {
            "screen": args.screen,
            "aggregate": args.aggregate,
            "laplacian": args.laplacian,
            "solver": solver_cfg.as_dict(),
        },
        [args.y, args.x, args.z, args.edges, args.coords],
    )

    table = pd.DataFrame({"node": ds.get_node_names()})
    outputs = []
    stage1 = stage1_fit(ds.Z, ds.X, solver_cfg)
    for name in COMPARED_METHODS:
        result = get_estimator(name)(solver_cfg).fit(ds, L, stage1=stage1)
        table[name] = result.beta
        path = out / ("fit_%s.json" % name)
        write_json(_fit_document(result, ds, seed), path)
        outputs.append(path)

    path = out / "selection.csv"
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    outputs.append(path)
    manifest.write(out, outputs=outputs)
    print(table[(table[list(COMPARED_METHODS)] != 0).any(axis=1)].to_string(index=False))
    return 0


def _add_graph_arguments(parser):
    parser.add_argument("--edges", help="TSV edge list (src, dst, weight; 1-based)")
    parser.add_argument("--coords", help="CSV of node coordinates (x, y, z)")
    parser.add_argument("--threshold", type=float, help="Distance threshold used with --coords")


def _add_solver_arguments(parser):
    parser.add_argument("--seed", type=int, default=setting("IVGL_SEED", 0))
    parser.add_argument("--folds", dest="cv_folds", type=int, help="Cross-validation folds")
    parser.add_argument("--grid-size", dest="lambda_grid_size", type=int, help="L1 grid size")
    parser.add_argument(
        "--lambda2", dest="lambda2_grid", type=float, nargs="+", help="Graph penalty grid"
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ivgl", description="Instrumental-variable regression on graphs of exposures."
    )
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress")
    commands = parser.add_subparsers(dest="command", required=True)
    methods = sorted(Estimator.registered())

    simulate = commands.add_parser("simulate", help="Run a simulation sweep")
    simulate.add_argument("--setup", type=int, choices=(1, 2), required=True)
    simulate.add_argument("--si", type=float, nargs="+", default=[1.0])
    simulate.add_argument("--s0", type=int, nargs="+", default=[4])
    simulate.add_argument("--reps", type=int, default=100)
    simulate.add_argument("--methods", default="ivl,ivgl", help="Comma-separated methods")
    simulate.add_argument("--out", required=True)
    simulate.add_argument("--jobs", type=int, default=setting("IVGL_N_JOBS", 1))
    simulate.add_argument("--cache-dir", help="Reuse replicates stored in this directory")
    simulate.add_argument("--write-data", action="store_true", help="Export the first replicate")
    simulate.add_argument("--fixed-graph", action="store_true", help="One graph for all replicates")
    simulate.add_argument("--n", type=int)
    simulate.add_argument("--p", type=int)
    simulate.add_argument("--q", type=int)
    simulate.add_argument("--n-invalid", dest="n_invalid", type=int)
    _add_solver_arguments(simulate)
    simulate.set_defaults(handler=cmd_simulate)

    fit = commands.add_parser("fit", help="Fit one method on a dataset")
    fit.add_argument("--y", required=True)
    fit.add_argument("--x", required=True)
    fit.add_argument("--z")
    _add_graph_arguments(fit)
    fit.add_argument("--method", choices=methods, required=True)
    fit.add_argument("--laplacian", choices=LAPLACIAN_KINDS, default=NORMALIZED)
    fit.add_argument("--out", required=True)
    _add_solver_arguments(fit)
    fit.set_defaults(handler=cmd_fit)

    screen = commands.add_parser("screen", help="Rank instruments by screening score")
    screen.add_argument("--z", required=True)
    screen.add_argument("--x", required=True)
    screen.add_argument("--top", type=int, default=300)
    screen.add_argument("--aggregate", choices=("mean", "max"), default="mean")
    screen.add_argument("--out", required=True)
    screen.set_defaults(handler=cmd_screen)

    laplacian_parser = commands.add_parser("laplacian", help="Write the Laplacian of a graph")
    _add_graph_arguments(laplacian_parser)
    laplacian_parser.add_argument("--p", type=int, help="Number of nodes (default: from edges)")
    laplacian_parser.add_argument("--kind", choices=LAPLACIAN_KINDS, default=NORMALIZED)
    laplacian_parser.add_argument("--out", required=True)
    laplacian_parser.set_defaults(handler=cmd_laplacian)

    compare = commands.add_parser("compare", help="Fit GL, IVGL and IVGL-S on one dataset")
    compare.add_argument("--y", required=True)
    compare.add_argument("--x", required=True)
    compare.add_argument("--z", required=True)
    _add_graph_arguments(compare)
    compare.add_argument("--laplacian", choices=LAPLACIAN_KINDS, default=NORMALIZED)
    compare.add_argument("--screen", type=int, help="Keep the K best instruments first")
    compare.add_argument("--aggregate", choices=("mean", "max"), default="mean")
    compare.add_argument("--out", required=True)
    _add_solver_arguments(compare)
    compare.set_defaults(handler=cmd_compare)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as error:
        return error.code

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except InvalidInputError as error:
        print("%s %s: error: %s" % (parser.prog, args.command, error), file=sys.stderr)
        return 2
    except IVGLError:
        if is_debug_activated():
            raise
        logger.exception("ivgl %s failed", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
