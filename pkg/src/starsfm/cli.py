"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure (the failing
stage is named on standard error).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bundle import BundleAdjuster, build_problem
from .evaluation import evaluate
from .overlap import OverlapResult, compute_overlaps, filter_edges, pair_weights
from .pipeline import (
    ConfigError,
    PipelineInputs,
    StageError,
    _stage_averaging,
    _stage_viewgraph,
    load_config,
    read_inputs,
    registration_subset,
    run_pipeline,
    simulate_stars,
    synthetic_inputs,
    write_inputs,
)
from .reconstruction import GlobalReconstruction, load_star_bundles, load_tracks
from .sampling import sample_subsequences
from .viewgraph import CandidateScores, ViewGraph, decompose_stars, graph_stats


def _read_json(path):
    return json.loads(Path(path).read_text())


def _write_json(path, data):
    text = json.dumps(data, indent=1)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def cmd_synth(args, cfg, spec):
    inputs = synthetic_inputs(spec, cfg.seed)
    graph = _stage_viewgraph(cfg, inputs)
    stars = simulate_stars(inputs.scene, decompose_stars(graph, cfg.neighbor_cap), spec.noise, cfg.seed,
                           canonical=False)
    write_inputs(args.out, inputs, stars)
    _write_json(Path(args.out) / "synthetic.json", spec.to_dict())


def cmd_viewgraph(args, cfg, spec):
    scores = CandidateScores.from_json(_read_json(args.scores))
    g = _stage_viewgraph(cfg, PipelineInputs(scores))
    g.save(args.out)
    stats = graph_stats(g)
    print(json.dumps({"vertices": len(g.vertices), "edges": len(g.edges), "radius": stats.radius,
                      "fiedler": stats.fiedler}))


def cmd_overlap(args, cfg, spec):
    stars = load_star_bundles(args.stars)
    results = compute_overlaps(stars, cfg.tau, cfg.overlap_stride, cfg.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "overlaps.json", [r.to_json() for r in results])
    if args.graph:
        filter_edges(ViewGraph.load(args.graph), results, cfg.min_overlap).save(out / "viewgraph.json")


def cmd_average(args, cfg, spec):
    stars = load_star_bundles(args.stars)
    overlaps = [OverlapResult.from_json(d) for d in _read_json(args.overlaps)]
    graph = ViewGraph.load(args.graph)
    camera_of = {int(k): int(v) for k, v in _read_json(args.cameras).items()} if args.cameras else {}
    registered = registration_subset(graph, cfg.registration_min_overlap)
    tree, avg = _stage_averaging(cfg, stars, pair_weights(overlaps), set(graph.edges), registered, camera_of)
    avg.save(args.out)
    if args.tree_out:
        tree.save(args.tree_out)


def cmd_ba(args, cfg, spec):
    recon = GlobalReconstruction.load(args.recon)
    tracks = load_tracks(args.tracks)
    problem = build_problem(recon, tracks)
    ba = BundleAdjuster(cfg.huber_px, cfg.arctan_px, cfg.ba_max_iter, cfg.ba_function_tol,
                        cfg.ba_gradient_tol, 1e-16, cfg.ba_initial_damping, cfg.refine_focals,
                        cfg.workers).fit(problem)
    ba.reconstruction_.save(args.out)
    if args.report:
        ba.report_.save(args.report)


def cmd_pipeline(args, cfg, spec):
    if args.input:
        try:
            inputs = read_inputs(args.input)
        except Exception as exc:
            raise StageError("input", exc) from exc
    else:
        inputs = synthetic_inputs(spec, cfg.seed)
    result = run_pipeline(cfg, inputs, args.out)
    if result.report is not None:
        print(json.dumps({k: r.auc for k, r in result.reports.items()}))


def cmd_eval(args, cfg, spec):
    est = GlobalReconstruction.load(args.estimate)
    truth = GlobalReconstruction.load(args.truth)
    stats = graph_stats(ViewGraph.load(args.graph)) if args.graph else None
    report = evaluate(est, truth, cfg.auc_thresholds, stats)
    _write_json(args.out, report.to_json())
    if args.out not in (None, "-"):
        print(json.dumps(report.auc))


def cmd_sample(args, cfg, spec):
    windows = sample_subsequences(args.length, cfg.seed)
    _write_json(args.out, [w._asdict() for w in windows])


COMMANDS = {
    "synth": cmd_synth,
    "viewgraph": cmd_viewgraph,
    "overlap": cmd_overlap,
    "average": cmd_average,
    "ba": cmd_ba,
    "pipeline": cmd_pipeline,
    "eval": cmd_eval,
    "sample": cmd_sample,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted keys for synthetic.*)")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--workers", type=int, help="worker threads")

    p = argparse.ArgumentParser(prog="starsfm", description="Star-graph global structure from motion.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic ingestion directory")
    s.add_argument("--out", required=True)

    s = sub.add_parser("viewgraph", parents=[common], help="build the view graph from scores")
    s.add_argument("--scores", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("overlap", parents=[common], help="star overlaps and edge filtering")
    s.add_argument("--stars", required=True, help="directory of star_<l> bundles")
    s.add_argument("--graph", help="view graph to filter")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("average", parents=[common], help="rotation and similarity averaging")
    s.add_argument("--stars", required=True)
    s.add_argument("--overlaps", required=True)
    s.add_argument("--graph", required=True, help="filtered view graph")
    s.add_argument("--cameras", help="image -> physical camera JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--tree-out", help="also write the spanning-tree initialization")

    s = sub.add_parser("ba", parents=[common], help="bundle adjustment")
    s.add_argument("--recon", required=True)
    s.add_argument("--tracks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")

    s = sub.add_parser("pipeline", parents=[common], help="run every stage")
    s.add_argument("--input", help="ingestion directory (default: synthetic oracle)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", parents=[common], help="pairwise errors and AUC")
    s.add_argument("--estimate", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--graph")
    s.add_argument("--out", default="-")

    s = sub.add_parser("sample", parents=[common], help="subsequence windows")
    s.add_argument("--length", type=int, required=True)
    s.add_argument("--out", default="-")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    try:
        cfg, spec = load_config(args.config, overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args, cfg, spec)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"stage failed: {exc.stage}: {exc.cause}", file=sys.stderr)
        return 3
    except Exception as exc:
        print(f"stage failed: {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
