"""Command-line surface: index, retrieve, match-pair, eval, and utilities.

Every failure exits nonzero after printing a single machine-parseable
`error: <kind>: <message>` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from patchrank import retrieval, tensorio
from patchrank.config import PRESETS, RunConfig, preset
from patchrank.matching import mutual_nn
from patchrank.patches import extract_multiscale
from patchrank.scoring import derive_seed, fuse_scores, score_match_set
from patchrank.synthetic import SyntheticSpec, gen_synthetic
from patchrank.types import validate_model


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = tensorio.load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = preset(args.preset)
    else:
        cfg = RunConfig()
    overrides = {}
    for name in ("scorer", "k", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides["rng_seed" if name == "seed" else name] = value
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


def _apply_proj_dim(model, cfg: RunConfig):
    if cfg.proj_dim is not None and cfg.proj_dim < model.proj_dim:
        return model.truncated(cfg.proj_dim)
    return model


def cmd_index(args) -> int:
    manifest = tensorio.load_manifest(args.manifest)
    model = tensorio.load_model(args.model)
    index = retrieval.build_index(manifest, model)
    paths = [entry.path for entry in manifest.references]
    tensorio.save_index(index.image_ids, index.descriptors, paths, args.out)
    print(f"indexed {len(index.image_ids)} references -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _load_run_config(args)
    model = _apply_proj_dim(tensorio.load_model(args.model), cfg)
    ids, descriptors, paths = tensorio.load_index(args.index)
    index = retrieval.GlobalIndex(image_ids=tuple(ids), descriptors=descriptors)

    def provider(image_id: str):
        return tensorio.read_feature_map(paths[image_id], image_id)

    query_path = Path(args.query)
    if query_path.suffix == ".json":
        manifest = tensorio.load_manifest(query_path)
        query_entries = [(e.image_id, e.path) for e in manifest.queries]
    else:
        query_entries = [(query_path.stem, str(query_path))]

    results = []
    for image_id, path in query_entries:
        fmap = tensorio.read_feature_map(path, image_id)
        short_ids, short_dists = retrieval.shortlist(
            retrieval.global_descriptor(fmap, model), index, cfg.k)
        results.append(retrieval.rerank(
            fmap, short_ids, short_dists, cfg, model, provider))
    retrieval.save_results(results, args.out)
    print(f"retrieved {len(results)} queries -> {args.out}")
    return 0


def cmd_match_pair(args) -> int:
    cfg = _load_run_config(args)
    model = _apply_proj_dim(tensorio.load_model(args.model), cfg)
    fmap_a = tensorio.read_feature_map(args.a)
    fmap_b = tensorio.read_feature_map(args.b)
    patch_cfg = cfg.patch_config()
    sets_a = extract_multiscale(fmap_a, model, patch_cfg, strategy=cfg.pooling)
    sets_b = extract_multiscale(fmap_b, model, patch_cfg, strategy=cfg.pooling)
    per_scale = []
    for set_a, set_b in zip(sets_a, sets_b):
        matches = mutual_nn(set_a, set_b)
        params = cfg.ransac_params(rng_seed=derive_seed(
            cfg.rng_seed, fmap_b.image_id, fmap_a.image_id, set_a.patch_size))
        score, inliers = score_match_set(
            matches, set_a.grid, set_b.grid, cfg.scorer, params,
            cfg.max_abs_displacement)
        per_scale.append(float(score))
        detail = f"{len(matches)} matches"
        if inliers is not None:
            detail += f", {len(inliers)} inliers"
        print(f"scale {set_a.patch_size}: {score:.6f} "
              f"({detail}, {set_b.grid.count} patches)")
        if args.dump_matches:
            for (i, j), (rx, ry), (qx, qy) in zip(
                    matches.pairs, matches.ref_coords, matches.query_coords):
                print(f"  match scale={set_a.patch_size} a={i} b={j} "
                      f"a_xy=({rx:g},{ry:g}) b_xy=({qx:g},{qy:g})")
    fused = fuse_scores(per_scale, patch_cfg.fusion_weights)
    print(f"fused: {fused:.6f}")
    return 0


def cmd_eval(args) -> int:
    results = retrieval.load_results(args.results)
    manifest = tensorio.load_manifest(args.manifest)
    report = retrieval.evaluate(results, manifest)
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=1, sort_keys=True))
    if args.csv:
        print("N,recall_percent")
        for n, pct in report.recall_at:
            print(f"{n},{pct:.4f}")
        if report.pose_buckets is not None:
            print("meters,degrees,percent")
            for m, d, pct in report.pose_buckets:
                print(f"{m:g},{d:g},{pct:.4f}")
    else:
        print(f"evaluated: {report.evaluated} queries "
              f"({len(report.excluded)} excluded)")
        for n, pct in report.recall_at:
            print(f"recall@{n}: {pct:.1f}")
        if report.pose_buckets is not None:
            for m, d, pct in report.pose_buckets:
                print(f"within {m:g}m/{d:g}deg: {pct:.1f}")
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        num_references=args.references,
        num_queries=args.queries,
        height=args.height,
        width=args.width,
        depth=args.depth,
        clusters=args.clusters,
        proj_dim=args.proj_dim,
        tile_count=args.tiles,
        jitter=args.jitter,
        noise=args.noise,
        shuffle_fraction=args.shuffle_fraction,
        max_shift_x=args.max_shift_x,
        max_shift_y=args.max_shift_y,
        seed=args.seed,
    )
    manifest_path = gen_synthetic(spec, args.out)
    print(f"wrote synthetic dataset -> {manifest_path}")
    return 0


def cmd_validate_model(args) -> int:
    doc_path = Path(args.model)
    try:
        model = tensorio.load_model(doc_path)
    except ValueError as exc:
        print(f"invalid: {exc}")
        return 1
    problems = validate_model(model)
    if problems:
        for p in problems:
            print(f"violation: {p}")
        return 1
    print(f"ok: K={model.num_clusters} D={model.feature_dim} "
          f"D_proj={model.proj_dim}")
    return 0


def cmd_info(args) -> int:
    for path in args.paths:
        header = tensorio.tensor_header(path)
        dims = "x".join(str(d) for d in header["dims"])
        print(f"{path}: rank={header['rank']} dims={dims} "
              f"dtype={header['dtype']} payload={header['payload_bytes']}B")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchrank",
        description="Place recognition via patch-level VLAD re-ranking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build a global descriptor index")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="shortlist and re-rank queries")
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True,
                   help="a feature-map .pvt or a manifest .json (all queries)")
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--scorer", choices=("ransac", "rapid"))
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("match-pair", help="score one image pair")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--scorer", choices=("ransac", "rapid"))
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-matches", action="store_true")
    p.set_defaults(func=cmd_match_pair)

    p = sub.add_parser("eval", help="evaluate retrieval results")
    p.add_argument("--results", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--csv", action="store_true",
                   help="emit plot-ready (N, recall) and (m, deg, pct) rows")
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--references", type=int, default=100)
    p.add_argument("--queries", type=int, default=50)
    p.add_argument("--height", type=int, default=12)
    p.add_argument("--width", type=int, default=12)
    p.add_argument("--depth", type=int, default=16)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--proj-dim", type=int, default=128)
    p.add_argument("--tiles", type=int, default=6)
    p.add_argument("--jitter", type=float, default=0.08)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--shuffle-fraction", type=float, default=0.4)
    p.add_argument("--max-shift-x", type=int, default=3)
    p.add_argument("--max-shift-y", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("validate-model", help="check a model file")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_validate_model)

    p = sub.add_parser("info", help="dump tensor file headers")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_info)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single machine-parseable failure line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
