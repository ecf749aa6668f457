"""Offline export CLI: feature maps and aggregation models for the engine."""

from __future__ import annotations

import argparse
import sys

from featbridge.backbone import DEFAULT_RESIZE, Vgg16Trunk
from featbridge.export import (
    ExportJob,
    corpus_from_images,
    export_features,
    export_model,
)
from featbridge.netvlad import VladHead


def _parse_resize(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise ValueError(f"resize must look like 640x480, got {text!r}") from exc


def cmd_export_features(args) -> int:
    job = ExportJob(
        image_dir=args.images,
        out_dir=args.out,
        resize=_parse_resize(args.resize),
        layer=args.layer,
        checkpoint=args.weights,
        seed=args.seed,
    )
    entries = export_features(job)
    print(f"exported {len(entries)} feature maps -> {args.out}")
    return 0


def cmd_export_model(args) -> int:
    trunk = Vgg16Trunk(layer=args.layer, checkpoint=args.weights,
                       seed=args.seed)
    head = VladHead(num_clusters=args.clusters, feature_dim=512,
                    seed=args.seed)
    flats = corpus_from_images(
        trunk, head, args.corpus_images, _parse_resize(args.corpus_resize))
    export_model(head, flats, args.proj_dim, args.out)
    print(f"exported model (K={args.clusters}, D_proj={args.proj_dim}) "
          f"-> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featbridge",
        description="Export CNN feature maps and VLAD models to engine formats")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-features", help="images -> .pvt feature maps")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resize", default="%dx%d" % DEFAULT_RESIZE)
    p.add_argument("--layer", default="conv5_3",
                   choices=("conv5_1", "conv5_2", "conv5_3"))
    p.add_argument("--weights", default=None,
                   help="trunk checkpoint; omitted -> seeded random init")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("export-model",
                       help="fit PCA on a corpus and write a model file")
    p.add_argument("--corpus-images", required=True)
    p.add_argument("--corpus-resize", default="%dx%d" % DEFAULT_RESIZE)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", default="conv5_3",
                   choices=("conv5_1", "conv5_2", "conv5_3"))
    p.add_argument("--weights", default=None)
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--proj-dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_model)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
