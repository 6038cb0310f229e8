"""Command line driver: ``lpn synth | train | embed | eval``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
Environment: ``LPN_OUTPUT_DIR`` overrides the output directory of ``train``;
``LPN_WORKERS`` sets the number of torch threads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import torch

from .config import derive_seeds, format_config, parse_config, parse_value
from .data import DatasetManifest, SyntheticSceneSpec, generate_synthetic, scan_pairs_layout, scan_university_layout
from .errors import ConfigError, DataError, NumericalError
from .model import ModelConfig, load_checkpoint
from .objective import TrainConfig, train
from .retrieval import (
    ReportRow,
    embed_manifest,
    embeddings_to_csv,
    evaluate,
    inject_distractors,
    load_images,
    probe_part_combination,
    probe_rotation,
    probe_shift,
    rank,
    read_embeddings,
    write_embeddings,
    write_report,
)

logger = logging.getLogger("lpn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# filled in from the data (or from the aerial partition) unless set explicitly
_DERIVED_KEYS = ("model.num_classes", "model.platforms", "model.ground_partition.strategy",
                 "model.ground_partition.n")


def default_run_config() -> dict:
    values = {"seed": 0, "output_dir": "runs/default", "data.root": None, "data.pairs": None,
              "data.platforms": ("satellite", "drone")}
    values.update(ModelConfig(num_classes=1).to_dict())
    for key in _DERIVED_KEYS:
        values.pop(key, None)
    values.update(TrainConfig().to_dict())
    return values


def resolve_run_config(path=None, overrides=()) -> dict:
    values = default_run_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        loaded = parse_config(path.read_text(), source=str(path))
        unknown = [k for k in loaded if k not in values and k not in _DERIVED_KEYS]
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        values.update(loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in values and key not in _DERIVED_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(value)
    if os.environ.get("LPN_OUTPUT_DIR"):
        values["output_dir"] = os.environ["LPN_OUTPUT_DIR"]
    return values


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# locations only; the files they point to are hashed by content
_UNHASHED_KEYS = ("output_dir", "data.root", "data.pairs")


def content_hash(values: dict, manifests) -> str:
    """sha256 over the resolved settings and every training file (relative path + content digest)."""
    h = hashlib.sha256(format_config({k: v for k, v in values.items() if k not in _UNHASHED_KEYS}).encode())
    for m in manifests:
        for (rel, cid), path in zip(m.entries, m.paths):
            h.update(f"{m.platform}\0{rel}\0{cid}\0{_file_digest(path)}\n".encode())
    return h.hexdigest()


def _load_training_manifests(values: dict) -> dict:
    plats = values["data.platforms"]
    plats = (plats,) if isinstance(plats, str) else tuple(plats)
    if values.get("data.pairs"):
        ground, sat = scan_pairs_layout(values["data.pairs"], values.get("data.root"))
        found = {"ground": ground, "satellite": sat}
    elif values.get("data.root"):
        found = {plat: m for (split, plat), m in scan_university_layout(values["data.root"]).items()
                 if split == "train"}
    else:
        raise ConfigError("set data.root (university layout) or data.pairs (pair list)")
    missing = [p for p in plats if p not in found]
    if missing:
        raise DataError(f"training data has no platforms {missing}; found {sorted(found)}")
    return {p: found[p] for p in plats}


# --------------------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    spec = SyntheticSceneSpec(num_classes=args.num_classes, image_size=args.image_size,
                              drone_views=args.drone_views, query_views=args.query_views,
                              gallery_distractors=args.distractors, layout_twins=not args.no_twins,
                              seed=args.seed)
    manifests = generate_synthetic(spec, out)
    (out / "manifests").mkdir(exist_ok=True)
    for (split, plat), m in sorted(manifests.items()):
        m.to_csv(out / "manifests" / f"{split}_{plat}.csv")
        print(f"{split:8s} {plat:10s} {len(m):6d} images {len({c for _, c in m.entries}):5d} classes")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.print_config:
        sys.stdout.write(format_config(resolve_run_config(args.config, args.set)))
        return EXIT_OK
    values = resolve_run_config(args.config, args.set)
    if args.output:
        values["output_dir"] = args.output
    # fail on bad settings before touching the data
    train_cfg = TrainConfig.from_dict(values)
    ModelConfig.from_dict({"model.num_classes": 1, **values})
    manifests = _load_training_manifests(values)
    values.setdefault("model.num_classes", next(iter(manifests.values())).num_classes)
    values["model.platforms"] = tuple(m.platform for m in manifests.values())
    model_cfg = ModelConfig.from_dict(values)
    seed = int(values["seed"])

    out = Path(values["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    config_text = format_config(values)
    (out / "config.cfg").write_text(config_text)
    run_info = {"seed": seed, "derived_seeds": derive_seeds(seed),
                "input_hash": content_hash(values, manifests.values()),
                "resumed_from": str(args.resume) if args.resume else None}
    (out / "run.json").write_text(json.dumps(run_info, indent=2) + "\n")
    for plat, m in manifests.items():
        m.to_csv(out / f"train_{plat}.csv")

    def show(row):
        print(f"epoch {row['epoch']:4d}  loss {row['mean_loss']:.4f}  "
              f"lr {row['lr_backbone']:.2g}/{row['lr_new']:.2g}", flush=True)

    result = train(manifests, train_cfg, model_cfg, out_dir=out, seed=seed, resume=args.resume, progress=show)
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _manifest_from_args(args) -> DatasetManifest:
    if args.manifest:
        return DatasetManifest.from_csv(args.manifest, root=args.root)
    if not (args.root and args.split and args.platform):
        raise ConfigError("pass --manifest, or --root with --split and --platform")
    manifests = scan_university_layout(args.root)
    key = (args.split, args.platform)
    if key not in manifests:
        raise DataError(f"no {args.split}/{args.platform} images under {args.root}")
    return manifests[key]


def cmd_embed(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    manifest = _manifest_from_args(args)
    es = embed_manifest(model, manifest, batch_size=args.batch_size)
    write_embeddings(args.out, es)
    if args.csv:
        embeddings_to_csv(args.csv, es)
    print(f"wrote {len(es)} x {es.dim} ({es.n_parts} parts) to {args.out}")
    return EXIT_OK


def _parse_parts(text: str) -> tuple[list[int], list[int]]:
    q, _, g = text.partition("/")
    qp = [int(v) for v in q.split(",") if v.strip()]
    gp = [int(v) for v in g.split(",") if v.strip()] if g else qp
    return qp, gp


def cmd_eval(args) -> int:
    queries = read_embeddings(args.query)
    gallery = read_embeddings(args.gallery)
    if queries.dim != gallery.dim:
        raise DataError(f"query embeddings have D={queries.dim} but gallery has D={gallery.dim}")
    task = args.task or f"{queries.platform or 'query'}->{gallery.platform or 'gallery'}"
    rows: list[ReportRow] = []

    if args.distractors:
        extra = read_embeddings(args.distractors)
        gallery_d = inject_distractors(gallery, extra)
        rows.append(ReportRow(task, "distractors", str(len(extra)), evaluate(rank(queries, gallery_d))))
    for combo in args.parts or []:
        qp, gp = _parse_parts(combo)
        label = ",".join(map(str, qp)) + "/" + ",".join(map(str, gp))
        rows.append(ReportRow(task, "parts", label, probe_part_combination(queries, gallery, qp, gp)))
    if args.rotate or args.shift:
        if not (args.checkpoint and (args.query_manifest or args.query_root)):
            raise ConfigError("--rotate/--shift re-embed query images: pass --checkpoint and --query-manifest")
        model, _ = load_checkpoint(args.checkpoint)
        if args.query_manifest:
            qm = DatasetManifest.from_csv(args.query_manifest, root=args.query_root)
        else:
            raise ConfigError("--query-root needs --query-manifest")
        images = load_images(qm, model.cfg.input_size)
        ids = qm.labels
        for angle, metrics in probe_rotation(model, images, ids, gallery, args.rotate or [], qm.platform_id).items():
            rows.append(ReportRow(task, "rotate", f"{angle:g}", metrics))
        for px, metrics in probe_shift(model, images, ids, gallery, args.shift or [], qm.platform_id).items():
            rows.append(ReportRow(task, "shift", str(px), metrics))
    if not rows:
        rows.append(ReportRow(task, "none", "", evaluate(rank(queries, gallery))))
    write_report(args.out, rows)
    for row in rows:
        m = row.metrics
        print(f"{row.task} {row.transform} {row.param}: R@1 {m['R@1']:.4f} R@5 {m['R@5']:.4f} "
              f"R@10 {m['R@10']:.4f} R@top1% {m['R@top1pct']:.4f} AP {m['AP']:.4f}")
    return EXIT_OK


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpn", description="Part-based cross-view geo-localization pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic satellite/drone dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, default=50)
    p.add_argument("--drone-views", type=int, default=4)
    p.add_argument("--query-views", type=int, default=2)
    p.add_argument("--distractors", type=int, default=0, help="extra gallery-only scenes")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--no-twins", action="store_true", help="do not pair scenes by shared objects")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", help="config file (dotted keys, see --print-config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--output", help="run directory (overrides output_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write descriptors for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="manifest CSV (path, class_id, platform, split)")
    p.add_argument("--root", help="dataset root (paths are relative to it)")
    p.add_argument("--split")
    p.add_argument("--platform")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also write a CSV copy")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="rank queries against a gallery and write a metric report")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task")
    p.add_argument("--parts", action="append", metavar="Q[/G]",
                   help="part combination, e.g. 1,2,3 or 1,2,3/2,3,4 (repeatable)")
    p.add_argument("--distractors", help="embedding file appended to the gallery as non-matches")
    p.add_argument("--rotate", type=_float_list, help="query rotation angles, e.g. 0,90")
    p.add_argument("--shift", type=_int_list, help="query left shifts in pixels, e.g. 0,10,20")
    p.add_argument("--checkpoint", help="needed by --rotate/--shift")
    p.add_argument("--query-manifest", help="query images for --rotate/--shift")
    p.add_argument("--query-root")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if os.environ.get("LPN_WORKERS"):
        torch.set_num_threads(max(1, int(os.environ["LPN_WORKERS"])))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
