"""Command-line entry point.

Every flat config key is also a flag of the same name, so
``sketchcolor train --config run.cfg --w_b 0.5`` overrides the file value.
Device selection comes from the ``SKETCHCOLOR_DEVICE`` environment variable
(default cpu); everything else goes through config or flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig
from .data import (
    COCO_CATEGORY,
    DatasetSpec,
    EXPECTED_COUNTS,
    materialize_coco_split,
    validate_dataset,
)
from .edges import XdogParams, extract_sketch_dir
from .experiment import (
    ablate,
    emit_sample_grid,
    format_ablation,
    format_report,
    report,
    survey_export,
    train_run,
)
from .fid import compute_fid, make_extractor

logger = logging.getLogger(__name__)


def device_from_env() -> str:
    return os.environ.get("SKETCHCOLOR_DEVICE", "cpu")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for key in RunConfig.FLAT_KEYS:
        parser.add_argument(f"--{key}", default=None, metavar="V")


def _resolved_config(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key) for key in RunConfig.FLAT_KEYS}
    return RunConfig.load(args.config, overrides)


# --------------------------------------------------------------------------
# Subcommand handlers
# --------------------------------------------------------------------------

def cmd_prepare_data(args) -> int:
    out_root = Path(args.out)
    if args.dataset in COCO_CATEGORY:
        if not args.coco_annotations:
            print("error: --coco-annotations is required for COCO-derived "
                  "datasets (train file first, then test)", file=sys.stderr)
            return 2
        category = COCO_CATEGORY[args.dataset]
        if len(args.images or []) != len(args.coco_annotations):
            print("error: give one --images directory per --coco-annotations "
                  "file", file=sys.stderr)
            return 2
        splits = ["trainB", "testB"][:len(args.coco_annotations)]
        for split, ann, images in zip(splits, args.coco_annotations, args.images):
            n = materialize_coco_split(ann, images, out_root / split, category)
            print(f"{split}: {n} images")
    else:
        print(f"{args.dataset}: no curation step; place color images under "
              f"{out_root}/trainB and {out_root}/testB")

    spec = DatasetSpec.for_dataset(args.dataset, out_root, scheme=args_scheme(args))
    if out_root.is_dir():
        for line in validate_dataset(spec).lines():
            print(line)
    print("sketch sides (trainA/testA) come from `sketchcolor prepare-sketches`")
    return 0


def args_scheme(args):
    from .config import Scheme
    return Scheme(args.scheme) if getattr(args, "scheme", None) else Scheme.UNPAIRED


def cmd_prepare_sketches(args) -> int:
    params = XdogParams(sigma=args.sigma, k=args.k, gamma=args.gamma,
                        epsilon=args.epsilon, phi=args.phi)
    result = extract_sketch_dir(args.src, args.dst, backend=args.backend,
                                params=params, hed_weights=args.hed_weights,
                                image_size=args.image_size)
    print(f"wrote {result.written} sketches to {args.dst}"
          + (f" ({result.skipped} skipped)" if result.skipped else ""))
    return 0


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    manifest = train_run(cfg, device=device_from_env(), max_steps=args.max_steps)
    print(f"run {manifest.run_id}: {manifest.status}, "
          f"last epoch {manifest.last_epoch}, "
          f"{len(manifest.checkpoints)} checkpoint files")
    return 0 if manifest.status in ("complete", "paused") else 1


def cmd_evaluate(args) -> int:
    from .data import list_images
    extractor = make_extractor(args.extractor, seed=args.seed)
    fid = compute_fid(args.real, args.fake, extractor, image_size=args.image_size)
    print(f"{fid:.6f}")
    payload = {
        "real_dir": str(args.real),
        "fake_dir": str(args.fake),
        "n_real": len(list_images(args.real)),
        "n_fake": len(list_images(args.fake)),
        "fid": fid,
        "extractor": getattr(extractor, "spec_id", args.extractor),
    }
    Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolved_config(args)
    grid = [float(w) for w in args.grid.split(",") if w.strip()]
    rows = ablate(cfg, grid, device=device_from_env(),
                  extractor_spec=args.extractor, max_steps=args.max_steps)
    print(format_ablation(rows))
    return 0 if all(r.fid is not None for r in rows) else 1


def cmd_sample(args) -> int:
    out = emit_sample_grid(args.checkpoint, args.sketches, args.out,
                           columns=args.columns, limit=args.limit)
    print(out)
    return 0


def cmd_report(args) -> int:
    rows = report(args.run_dirs, out_dir=args.out, extractor_spec=args.extractor)
    print(format_report(rows))
    if not rows or all(r["fid"] is None for r in rows):
        return 1
    return 0


def cmd_survey_export(args) -> int:
    counts = survey_export(args.dataset, args.sketches, args.baseline_ckpt,
                           args.ours_ckpt, args.content_root, limit=args.limit)
    for model, n in counts.items():
        print(f"{args.dataset}/{model}: {n} images")
    return 0


def cmd_survey_serve(args) -> int:
    import uvicorn
    from .survey import build_app
    app = build_app(content_root=args.content_root, log_path=args.log,
                    seed=args.seed, static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketchcolor",
        description="Sketch colorization with segmentation-guided "
                    "adversarial training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="curate and validate a dataset")
    p.add_argument("--dataset", required=True, choices=sorted(EXPECTED_COUNTS))
    p.add_argument("--coco-annotations", action="append", metavar="JSON",
                   help="COCO instance file; give twice (train, then test)")
    p.add_argument("--images", action="append", metavar="DIR",
                   help="image directory matching each annotation file")
    p.add_argument("--out", required=True, help="dataset root to populate")
    p.add_argument("--scheme", choices=["paired", "unpaired"], default=None)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("prepare-sketches",
                       help="extract sketch images from a color directory")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--backend", default="xdog", choices=["xdog", "hed"])
    p.add_argument("--hed-weights", default=None,
                   help="TorchScript edge-detector file (hed backend)")
    p.add_argument("--image-size", type=int, default=None)
    d = XdogParams()
    p.add_argument("--sigma", type=float, default=d.sigma)
    p.add_argument("--k", type=float, default=d.k)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--epsilon", type=float, default=d.epsilon)
    p.add_argument("--phi", type=float, default=d.phi)
    p.set_defaults(func=cmd_prepare_sketches)

    p = sub.add_parser("train", help="train one run to completion (resumable)")
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--max-steps", type=int, default=None,
                   help="stop after this many training steps, then pause")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="FID between two image directories")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--extractor", default="small",
                   help="small[:dim] or inception")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="fid_report.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep the auxiliary weight w_b = w_m")
    p.add_argument("--config", default=None)
    p.add_argument("--grid", default="0.1,0.5,1.0,5.0,10.0")
    p.add_argument("--extractor", default="small")
    p.add_argument("--max-steps", type=int, default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sample", help="render an (input, output) pair grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sketches", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--columns", type=int, default=4)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("report", help="FID comparison table across runs")
    p.add_argument("run_dirs", nargs="*")
    p.add_argument("--out", default=None, help="directory for report.csv/md")
    p.add_argument("--extractor", default="small")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("survey-export",
                       help="generate both models' images for the user study")
    p.add_argument("--dataset", required=True)
    p.add_argument("--sketches", required=True)
    p.add_argument("--baseline-ckpt", required=True)
    p.add_argument("--ours-ckpt", required=True)
    p.add_argument("--content-root", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_survey_export)

    p = sub.add_parser("survey-serve", help="run the user-study web service")
    p.add_argument("--content-root", required=True)
    p.add_argument("--log", default="votes.jsonl")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--static", default=None,
                   help="directory with the built browser client (served at /)")
    p.set_defaults(func=cmd_survey_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SKETCHCOLOR_LOGLEVEL", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
