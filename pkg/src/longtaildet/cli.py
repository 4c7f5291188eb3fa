"""Command-line entry point wiring the pipeline modules into batch commands.

Subcommands: stats, augment, sample, swa, fuse, gre-demo. Every command that
takes --seed writes bit-deterministic outputs; --json switches reports to
machine-readable form. Verbosity via the LONGTAIL_LOG environment variable.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical-check
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import anchors as anchor_mod
from . import augment as aug
from . import class_balance, dataset, gre_fpn, tta, train_utils
from .geometry import BBox

log = logging.getLogger("longtaildet")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

_CONFIG_SECTIONS = {"stats", "augment", "sample", "swa", "fuse", "gre_demo", "seed"}


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    unknown = set(cfg) - _CONFIG_SECTIONS
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _section(cfg: dict, name: str, known: set[str]) -> dict:
    sec = cfg.get(name, {})
    unknown = set(sec) - known
    if unknown:
        raise ValueError(f"unknown keys in config section '{name}': {sorted(unknown)}")
    return sec


def _dump_json(obj, path: str | Path | None = None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_stats(args) -> int:
    cfg = _section(_load_config(args.config), "stats", {"threshold"})
    threshold = args.threshold if args.threshold is not None \
        else cfg.get("threshold", 200)
    ds = dataset.load_dataset(args.dataset)
    counts = dataset.class_counts(ds)
    many, few = dataset.split_shot(counts, threshold)
    report = {
        "images": len(ds.images),
        "annotations": len(ds.annotations),
        "categories": len(ds.categories),
        "clamped_boxes": ds.clamped_boxes,
        "dropped_boxes": ds.dropped_boxes,
        "threshold": threshold,
        "class_counts": {str(c): n for c, n in sorted(counts.items())},
        "many_shot": sorted(many),
        "few_shot": sorted(few),
    }
    if args.json:
        _dump_json(report)
    else:
        print(f"images: {report['images']}  annotations: {report['annotations']}  "
              f"categories: {report['categories']}")
        print(f"clamped boxes: {ds.clamped_boxes}  dropped boxes: {ds.dropped_boxes}")
        print(f"few-shot classes (< {threshold} boxes): {len(few)}  "
              f"many-shot: {len(many)}")
        for c, n in sorted(counts.items()):
            tag = "few" if c in few else "many"
            print(f"  class {c}: {n} boxes ({tag})")
    return EXIT_OK


def _duckfill_config(sec: dict) -> aug.DuckFillConfig:
    kw = {}
    if "pastes_per_image" in sec:
        kw["pastes_per_image"] = tuple(sec["pastes_per_image"])
    for key in ("scale_range", "alpha_range"):
        if key in sec:
            kw[key] = tuple(sec[key])
    if "max_overlap_iou" in sec:
        kw["max_overlap_iou"] = sec["max_overlap_iou"]
    return aug.DuckFillConfig(**kw)


def cmd_augment(args) -> int:
    known = {"threshold", "duck_fill", "mixup"}
    sec = _section(_load_config(args.config), "augment", known)
    threshold = sec.get("threshold", 200)
    df_cfg = _duckfill_config(sec.get("duck_fill", {}))
    mix_sec = sec.get("mixup", {})
    mix_enabled = mix_sec.get("enabled", False)
    beta_param = mix_sec.get("beta", 1.5)
    max_pairs = mix_sec.get("max_pairs", 8)

    ds = dataset.load_dataset(args.dataset)
    images_dir = Path(args.images_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    counts = dataset.class_counts(ds)
    _, few = dataset.split_shot(counts, threshold)

    def loader(image_id: int) -> np.ndarray:
        return aug.load_image(images_dir / ds.image(image_id).file_name)

    images = list(ds.images)
    annotations = list(ds.annotations)
    extra_fields: dict[int, dict] = {}
    next_ann = max((a.id for a in ds.annotations), default=0) + 1
    next_img = max((im.id for im in ds.images), default=0) + 1

    # duck filling into images with no annotations
    bank = aug.extract_patches(ds, few, loader)
    if len(bank):
        for img_id in dataset.unannotated_image_ids(ds):
            im = ds.image(img_id)
            result = aug.duck_fill(loader(img_id), bank, df_cfg,
                                   rng_seed=args.seed * 1_000_003 + img_id)
            if not result.annotations:
                continue
            name = f"duck_{img_id}.png"
            aug.save_image(result.image, out_dir / name)
            new_img = dataset.ImageInfo(next_img, im.width, im.height, name)
            images.append(new_img)
            for t in result.annotations:
                annotations.append(dataset.Annotation(next_ann, new_img.id,
                                                      t.class_id, t.bbox))
                extra_fields[next_ann] = {"source_image_id": t.source_image_id,
                                          "paste_alpha": t.weight}
                next_ann += 1
            next_img += 1

    # mix-up over consecutive annotated image pairs
    if mix_enabled:
        ids = dataset.annotated_image_ids(ds)
        pairs = list(zip(ids[0::2], ids[1::2]))[:max_pairs]
        for pid, (ia, ib) in enumerate(pairs):
            im_a, im_b = ds.image(ia), ds.image(ib)
            img_a = loader(ia)
            img_b = aug.bilinear_resize(loader(ib), img_a.shape[0], img_a.shape[1])
            sx = im_a.width / im_b.width
            sy = im_a.height / im_b.height
            anns_a = [aug.TaggedBox(a.bbox, a.class_id, 1.0, ia)
                      for a in ds.annotations_of(ia)]
            anns_b = [aug.TaggedBox(BBox(a.bbox.x1 * sx, a.bbox.y1 * sy,
                                         a.bbox.x2 * sx, a.bbox.y2 * sy),
                                    a.class_id, 1.0, ib)
                      for a in ds.annotations_of(ib)]
            mixed, tagged, lam = aug.mixup(img_a, anns_a, img_b, anns_b,
                                           beta_param=beta_param,
                                           rng_seed=args.seed * 9_000_001 + pid)
            name = f"mix_{ia}_{ib}.png"
            aug.save_image(mixed, out_dir / name)
            new_img = dataset.ImageInfo(next_img, im_a.width, im_a.height, name)
            images.append(new_img)
            for t in tagged:
                annotations.append(dataset.Annotation(next_ann, new_img.id,
                                                      t.class_id, t.bbox))
                extra_fields[next_ann] = {"source_image_id": t.source_image_id,
                                          "mix_lambda": t.weight}
                next_ann += 1
            next_img += 1

    merged = dataset.Dataset(images, annotations, ds.categories)
    dataset.save_dataset(merged, out_dir / "augmented.json",
                         extra_ann_fields=extra_fields)
    log.info("wrote %s (%d images, %d annotations)",
             out_dir / "augmented.json", len(images), len(annotations))
    return EXIT_OK


def cmd_sample(args) -> int:
    known = {"threshold", "grid", "sampler"}
    sec = _section(_load_config(args.config), "sample", known)
    if args.mode == "balance":
        ds = dataset.load_dataset(args.dataset)
        try:
            sw = class_balance.compute_weights(ds)
        except class_balance.NoAnnotationsError as e:
            log.warning("%s", e)
            _dump_json({"warning": str(e), "weights": {}}, args.out)
            return EXIT_OK
        report = {
            "weights": {str(i): w for i, w in sorted(sw.weights.items())},
            "probabilities": {str(i): p for i, p in sorted(sw.probabilities().items())},
            "rarest_class": {str(i): c for i, c in sorted(sw.rarest_class.items())},
        }
        if args.draws:
            report["epoch"] = class_balance.sample_epoch(ds, args.seed, args.draws)
        _dump_json(report, args.out)
        return EXIT_OK

    # anchors mode: positional path is a synthetic target file
    doc = json.loads(Path(args.dataset).read_text(encoding="utf-8"))
    targets = [BBox(*t) for t in doc["targets"]]
    grid_sec = {**doc.get("grid", {}), **sec.get("grid", {})}
    grid = anchor_mod.AnchorGridConfig(
        image_size=tuple(doc["image_size"]),
        strides=grid_sec.get("strides", [8, 16]),
        scales=grid_sec.get("scales", [2.0, 4.0]),
        ratios=grid_sec.get("ratios", [0.5, 1.0, 2.0]))
    scfg = anchor_mod.SamplerConfig(**sec.get("sampler", {}))
    cands = anchor_mod.classify_candidates(
        anchor_mod.generate_anchors(grid), targets, scfg)
    batch = anchor_mod.sample_batch(cands, scfg, rng_seed=args.seed)
    violations = sum(1 for c in batch.negatives
                     if not (c.max_iou < scfg.neg_iou_upper
                             and c.nearest_target_distance < c.nearest_target_diag))
    report = dict(batch.diagnostics)
    report["constraint_violations"] = violations
    if not batch.negatives and not batch.positives:
        log.warning("empty candidate pools")
    _dump_json(report, args.out)
    return EXIT_NUMERIC if violations else EXIT_OK


def cmd_swa(args) -> int:
    snaps = [train_utils.load_snapshot(p) for p in args.snapshots]
    avg = train_utils.swa_average(snaps)
    if args.binary:
        train_utils.save_snapshot_binary(avg, args.out)
    else:
        train_utils.save_snapshot_json(avg, args.out)
    log.info("wrote %s (%d entries)", args.out, len(avg.entries))
    return EXIT_OK


def cmd_fuse(args) -> int:
    sets = [tta.load_detections(p) for p in args.detections]
    fused = tta.fuse(sets, iou_thresh=args.thresh, mode=args.mode)
    tta.save_detections(fused, args.out)
    log.info("wrote %s (%d boxes)", args.out, len(fused.boxes))
    return EXIT_OK


def _load_pyramid_snapshot(path: str) -> gre_fpn.Pyramid:
    snap = train_utils.load_snapshot(path)
    if "strides" not in snap.entries:
        raise ValueError("pyramid snapshot needs a 'strides' entry")
    strides = [int(s) for s in snap.entries["strides"].reshape(-1)]
    levels = []
    for i, stride in enumerate(strides):
        name = f"level_{i}"
        if name not in snap.entries:
            raise ValueError(f"pyramid snapshot missing '{name}'")
        levels.append((snap.entries[name], stride))
    return gre_fpn.Pyramid(levels=levels)


def cmd_gre_demo(args) -> int:
    pyr = _load_pyramid_snapshot(args.pyramid)
    rois = [BBox(*r) for r in
            json.loads(Path(args.rois).read_text(encoding="utf-8"))]
    psnap = train_utils.load_snapshot(args.params)
    params = gre_fpn.GREParams(weights=psnap.entries["weights"],
                               bias=psnap.entries["bias"])
    out_size = (args.out_size, args.out_size)
    out = gre_fpn.gre_extract(pyr, rois, out_size, params)
    rng = np.random.default_rng(args.seed)
    upstream = rng.standard_normal(out.shape)
    err = gre_fpn.gradient_check(pyr, rois, out_size, params, upstream)
    report = {
        "output_shape": list(out.shape),
        "output_mean": float(out.mean()) if out.size else 0.0,
        "output_std": float(out.std()) if out.size else 0.0,
        "output_min": float(out.min()) if out.size else 0.0,
        "output_max": float(out.max()) if out.size else 0.0,
        "max_gradient_rel_error": err,
    }
    if args.json:
        _dump_json(report)
    else:
        print(f"output shape {tuple(out.shape)}  mean {report['output_mean']:.6g}  "
              f"std {report['output_std']:.6g}")
        print(f"max finite-difference relative error: {err:.3e}")
    return EXIT_OK if err <= 1e-5 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="longtail",
        description="Long-tail detection pipeline toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, jsonf=False, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file with per-command sections")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if jsonf:
            sp.add_argument("--json", action="store_true",
                            help="machine-readable output")

    sp = sub.add_parser("stats", help="dataset class statistics and shot split")
    sp.add_argument("dataset")
    sp.add_argument("--threshold", type=int, default=None)
    common(sp, seed=False, jsonf=True)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("augment", help="duck-fill and mix-up a dataset")
    sp.add_argument("dataset")
    sp.add_argument("images_dir")
    sp.add_argument("out_dir")
    common(sp)
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("sample", help="class-balance weights or anchor batches")
    sp.add_argument("dataset", help="annotation file (balance) or target file (anchors)")
    sp.add_argument("--mode", choices=["balance", "anchors"], default="balance")
    sp.add_argument("--draws", type=int, default=0,
                    help="also emit a sampled epoch of this length")
    sp.add_argument("--out", help="write the JSON report here instead of stdout")
    common(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("swa", help="average weight snapshots")
    sp.add_argument("out")
    sp.add_argument("snapshots", nargs="+")
    sp.add_argument("--binary", action="store_true",
                    help="write manifest + raw payload instead of pure JSON")
    common(sp, seed=False, config=False)
    sp.set_defaults(func=cmd_swa)

    sp = sub.add_parser("fuse", help="fuse detection sets from TTA branches")
    sp.add_argument("out")
    sp.add_argument("detections", nargs="+")
    sp.add_argument("--thresh", type=float, default=0.5)
    sp.add_argument("--mode", choices=["nms", "avg"], default="nms")
    common(sp, seed=False, config=False)
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("gre-demo", help="multi-level RoI extraction + gradient check")
    sp.add_argument("pyramid", help="pyramid snapshot (level_<i> entries + strides)")
    sp.add_argument("rois", help="JSON list of [x1, y1, x2, y2]")
    sp.add_argument("params", help="snapshot with 'weights' and 'bias' entries")
    sp.add_argument("--out-size", type=int, default=7)
    common(sp, jsonf=True, config=False)
    sp.set_defaults(func=cmd_gre_demo)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LONGTAIL_LOG", "WARNING").upper())
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        log.error("file not found: %s", e)
        return EXIT_IO
    except (OSError, json.JSONDecodeError) as e:
        log.error("I/O failure: %s", e)
        return EXIT_IO
    except (dataset.DatasetError, train_utils.IncompatibleSnapshotsError,
            ValueError, KeyError) as e:
        log.error("validation failure: %s", e)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
