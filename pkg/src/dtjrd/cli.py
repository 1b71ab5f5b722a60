"""Command-line entry point.

Every subcommand is deterministic given its flags and seed, writes a
run-manifest JSON next to its outputs recording the resolved flags, and
removes partially-written artifacts when it fails.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    group_split,
    load_dataset,
    load_manifest,
    save_manifest,
    split_records,
    SPLIT_NAMES,
)
from .errors import ContractError, ValidationError
from .labels import make_labels
from .metrics import (
    RateAccuracyCurve,
    bd_metric,
    bd_rate,
    load_curve,
    load_detections,
    mae_ea,
    mae_range,
    map_at_iou,
    save_curve,
)
from .model import DTJRDModel, ModelConfig
from .train import TrainConfig, fit, predict_dataset, save_epoch_log
from .vcm import (
    ExternalCodec,
    ProxyCodec,
    build_qpmap,
    load_qpmap,
    run_rate_accuracy,
    save_qpmap,
)

TOY_CONFIG = ModelConfig()

FULL_CONFIG = ModelConfig(
    image_size=384, patch_size=32, dim=1024, depth=24, heads=16, mlp_dim=4096
)


class _Run:
    """Tracks created artifacts so a failed run leaves nothing behind."""

    def __init__(self):
        self.tracked: list[tuple[Path, bool]] = []

    def track(self, path) -> Path:
        path = Path(path)
        self.tracked.append((path, path.exists()))
        return path

    def cleanup(self) -> None:
        for path, existed in reversed(self.tracked):
            if existed or not path.exists():
                continue
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            else:
                path.unlink(missing_ok=True)

    def outputs(self) -> list[str]:
        return [str(p) for p, _ in self.tracked]


def _resolved_flags(args) -> dict:
    flags = {}
    for key, value in vars(args).items():
        if key == "func":
            continue
        flags[key] = value if isinstance(value, (str, int, float, bool, list, type(None))) else str(value)
    return flags


def _write_run_manifest(run: _Run, args, primary) -> None:
    primary = Path(primary)
    path = primary / "run_manifest.json" if primary.is_dir() else Path(str(primary) + ".run.json")
    manifest = {
        "subcommand": args.subcommand,
        "version": __version__,
        "flags": _resolved_flags(args),
        "seed": getattr(args, "seed", None),
        "outputs": run.outputs(),
    }
    run.track(path)
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {exc}")


def _model_config(name: str) -> ModelConfig:
    if name == "toy":
        return TOY_CONFIG
    if name == "full":
        return FULL_CONFIG
    raise argparse.ArgumentTypeError(f"config must be 'toy' or 'full', got {name!r}")


def _filtered_records(manifest_path, splits_path, split_name):
    records = load_manifest(manifest_path)
    if splits_path is None:
        return records
    assignment = json.loads(Path(splits_path).read_text())
    return split_records(records, assignment)[split_name]


# -- subcommands ---------------------------------------------------------


def cmd_synth_data(args, run: _Run) -> None:
    from .data import synth_dataset

    out_dir = run.track(Path(args.out_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    records, textures = synth_dataset(args.n, args.seed, out_dir)
    manifest_path = run.track(out_dir / "manifest.jsonl")
    save_manifest(records, manifest_path)
    texture_path = run.track(out_dir / "texture.json")
    texture_path.write_text(json.dumps(textures, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(run, args, out_dir)
    print(f"wrote {len(records)} objects to {manifest_path}")


def cmd_make_splits(args, run: _Run) -> None:
    records = load_manifest(args.manifest)
    assignment = group_split(records, seed=args.seed)
    out = run.track(Path(args.out))
    out.write_text(json.dumps(assignment, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(run, args, out)
    counts = {name: sum(1 for v in assignment.values() if v == name) for name in SPLIT_NAMES}
    print(f"split {len(assignment)} source images: {counts}")


def cmd_labels(args, run: _Run) -> None:
    probs = make_labels(args.mu, kind=args.kind, sigma=args.sigma,
                        eps=args.eps, n=args.n)
    lines = ["class,prob"] + [f"{i},{repr(float(p))}" for i, p in enumerate(probs)]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = run.track(Path(args.out))
        out.write_text(text)
        _write_run_manifest(run, args, out)
    else:
        sys.stdout.write(text)


def cmd_train(args, run: _Run) -> None:
    records = load_manifest(args.manifest)
    assignment = json.loads(Path(args.splits).read_text())
    splits = split_records(records, assignment)
    model_config = _model_config(args.config)
    train_data = load_dataset(splits["train"], model_config.image_size)
    val_data = load_dataset(splits["val"], model_config.image_size) if splits["val"] else None

    train_config = TrainConfig(
        strategy=args.strategy, label_kind=args.label_kind, lr0=args.lr0,
        momentum=args.momentum, weight_decay=args.weight_decay,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
        sigma=args.sigma, eps=args.eps,
    )
    model = DTJRDModel(model_config, seed=args.seed)
    model, log = fit(model, train_data, val_data, train_config)

    ckpt_path = run.track(Path(args.checkpoint_out))
    save_checkpoint(model, ckpt_path, extra={"train_flags": _resolved_flags(args)})
    log_path = run.track(Path(args.log_out or str(args.checkpoint_out) + ".log.csv"))
    save_epoch_log(log, log_path)
    _write_run_manifest(run, args, ckpt_path)
    if log:
        best = min((e["val_EA"] for e in log if e["val_EA"] == e["val_EA"]), default=float("nan"))
        print(f"trained {args.epochs} epochs; best val E_A = {best:.4f}")
    else:
        print("trained 0 epochs; model saved at initialization")


def cmd_predict(args, run: _Run) -> None:
    model = load_checkpoint(args.checkpoint)
    records = _filtered_records(args.manifest, args.splits, args.split)
    if not records:
        raise ContractError("no records selected for prediction")
    data = load_dataset(records, model.config.image_size)
    preds = predict_dataset(model, data.images, batch_size=args.batch_size)

    out = run.track(Path(args.out))
    with open(out, "w") as fh:
        fh.write("object_id,image_id,jrd\n")
        for oid, iid, p in zip(data.object_ids, data.image_ids, preds):
            fh.write(f"{oid},{iid},{int(p)}\n")
    gt_out = run.track(Path(args.gt_out or str(args.out) + ".gt.csv"))
    with open(gt_out, "w") as fh:
        fh.write("object_id,image_id,jrd\n")
        for oid, iid, j in zip(data.object_ids, data.image_ids, data.jrd):
            fh.write(f"{oid},{iid},{int(j)}\n")
    _write_run_manifest(run, args, out)
    print(f"wrote {len(preds)} predictions to {out}")


def _read_jrd_csv(path) -> dict[str, tuple[str, int]]:
    rows: dict[str, tuple[str, int]] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "object_id,image_id,jrd":
            raise ValidationError(f"{path}: expected header 'object_id,image_id,jrd'")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{lineno}: malformed row {line!r}")
            rows[parts[0]] = (parts[1], int(parts[2]))
    return rows


def cmd_metrics(args, run: _Run) -> None:
    pred = _read_jrd_csv(args.pred)
    gt = _read_jrd_csv(args.gt)
    if set(pred) != set(gt):
        raise ValidationError("prediction and ground-truth object ids differ")
    ids = sorted(gt)
    p = np.array([pred[i][1] for i in ids], dtype=np.float64)
    g = np.array([gt[i][1] for i in ids], dtype=np.float64)
    image_ids = [gt[i][0] for i in ids]
    report = {"E_A": mae_ea(p, g, image_ids)}
    try:
        report["E_range"] = mae_range(p, g, args.lo, args.hi)
    except ContractError:
        report["E_range"] = None
    print(f"E_A: {report['E_A']:.4f}")
    if report["E_range"] is None:
        print(f"E_[{args.lo},{args.hi}]: n/a (no ground truth in range)")
    else:
        print(f"E_[{args.lo},{args.hi}]: {report['E_range']:.4f}")
    if args.out:
        out = run.track(Path(args.out))
        out.write_text(json.dumps(report, indent=2) + "\n")
        _write_run_manifest(run, args, out)


def cmd_qpmap(args, run: _Run) -> None:
    bboxes = json.loads(Path(args.bboxes).read_text())
    jrds = [int(v) for v in Path(args.jrd).read_text().split()]
    qpmap = build_qpmap(args.width, args.height, [tuple(b) for b in bboxes],
                        jrds, delta_qp=args.delta_qp, qp_b=args.qp_b)
    out = run.track(Path(args.out))
    save_qpmap(qpmap, out)
    _write_run_manifest(run, args, out)
    print(f"wrote {qpmap.rows}x{qpmap.cols} QP map to {out}")


def cmd_proxy_encode(args, run: _Run) -> None:
    with Image.open(args.image) as img:
        rgb = np.asarray(img.convert("RGB"))
    qpmap = load_qpmap(args.qpmap)
    bits, recon = ProxyCodec().encode(rgb, qpmap)
    out = run.track(Path(args.out))
    Image.fromarray(recon).save(out)
    bits_path = run.track(Path(str(out) + ".bits"))
    bits_path.write_text(f"{bits}\n")
    _write_run_manifest(run, args, out)
    print(f"bits {bits}")


def cmd_map(args, run: _Run) -> None:
    dets = load_detections(args.dets, with_scores=True)
    gts = load_detections(args.gt, with_scores=False)
    value = map_at_iou(dets, gts, args.iou)
    print(f"mAP@{args.iou:.2f}: {value:.2f}%")
    if args.out:
        out = run.track(Path(args.out))
        out.write_text(json.dumps({"iou": args.iou, "map_percent": value}, indent=2) + "\n")
        _write_run_manifest(run, args, out)


def cmd_bdrate(args, run: _Run) -> None:
    anchor = load_curve(args.anchor)
    test = load_curve(args.test)
    rate = bd_rate(anchor, test)
    metric = bd_metric(anchor, test)
    print(f"BD-rate: {rate:+.2f}%")
    print(f"BD-metric: {metric:+.4f}")
    if args.out:
        out = run.track(Path(args.out))
        out.write_text(json.dumps(
            {"bd_rate_percent": rate, "bd_metric": metric, "fit": "cubic-polynomial"},
            indent=2) + "\n")
        _write_run_manifest(run, args, out)


def cmd_curve(args, run: _Run) -> None:
    records = _filtered_records(args.manifest, args.splits, args.split)
    if not records:
        raise ContractError("no records selected for the sweep")
    if args.use_gt_labels:
        jrds = {r.object_id: r.jrd for r in records}
    elif args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        data = load_dataset(records, model.config.image_size)
        preds = predict_dataset(model, data.images, batch_size=args.batch_size)
        jrds = dict(zip(data.object_ids, (int(p) for p in preds)))
    else:
        raise ContractError("need --checkpoint or --use-gt-labels")
    codec = ExternalCodec(args.codec_template) if args.codec_template else ProxyCodec()

    out_dir = run.track(Path(args.out_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_rate_accuracy(records, jrds, args.base_qps, args.delta_qps,
                             codec, out_dir=out_dir)
    settings_path = run.track(out_dir / "settings.csv")
    with open(settings_path, "w") as fh:
        fh.write("base_qp,delta_qp,rate_bpp,metric\n")
        for row in rows:
            fh.write(f"{row['base_qp']},{row['delta_qp']},"
                     f"{repr(row['bpp'])},{repr(row['metric'])}\n")

    ordered = sorted(rows, key=lambda r: r["bpp"])
    points = []
    for row in ordered:
        if points and row["bpp"] <= points[-1][0]:
            continue
        points.append((row["bpp"], row["metric"]))
    curve_path = run.track(out_dir / "curve.csv")
    save_curve(RateAccuracyCurve(tuple(points)), curve_path)
    _write_run_manifest(run, args, out_dir)
    print(f"wrote {len(rows)} settings ({len(points)} curve points) to {out_dir}")


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtjrd",
        description="QP-threshold prediction and QP-map coding pipeline",
    )
    parser.add_argument("--version", action="version", version=f"dtjrd {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic object dataset")
    p.add_argument("--n", type=int, required=True, help="number of objects")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("make-splits", help="assign source images to train/val/test")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_splits)

    p = sub.add_parser("labels", help="dump one label distribution as CSV")
    p.add_argument("--mu", type=int, required=True)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--kind", choices=("one_hot", "smooth", "gdsl"), default="gdsl")
    p.add_argument("--eps", type=float, default=0.9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("train", help="train a model on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--strategy", choices=("LP", "FF", "DAFT"), default="DAFT")
    p.add_argument("--label-kind", choices=("one_hot", "smooth", "gdsl"), default="gdsl")
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--eps", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr0", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", choices=("toy", "full"), default="toy",
                   help="'toy' (96px) or 'full' (384px)")
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--log-out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict QP thresholds for manifest objects")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits")
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--gt-out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("metrics", help="prediction error report from two CSVs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--lo", type=int, default=27)
    p.add_argument("--hi", type=int, default=51)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("qpmap", help="build a QP-map sidecar from boxes and JRDs")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--bboxes", required=True, help="JSON array of [x1,y1,x2,y2]")
    p.add_argument("--jrd", required=True, help="file with one JRD per line")
    p.add_argument("--delta-qp", type=int, default=0)
    p.add_argument("--qp-b", type=int, default=63)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_qpmap)

    p = sub.add_parser("proxy-encode", help="encode an image with the proxy codec")
    p.add_argument("--image", required=True)
    p.add_argument("--qpmap", required=True)
    p.add_argument("--out", required=True, help="reconstruction PNG path")
    p.set_defaults(func=cmd_proxy_encode)

    p = sub.add_parser("map", help="mean average precision at one IoU threshold")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("bdrate", help="Bjontegaard deltas between two curve CSVs")
    p.add_argument("anchor")
    p.add_argument("test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("curve", help="rate-accuracy sweep over QP settings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits")
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--use-gt-labels", action="store_true")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--base-qps", type=_int_list, default=[25, 27, 29, 31, 33])
    p.add_argument("--delta-qps", type=_int_list, default=[-4, -3, -2, -1, 0])
    p.add_argument("--codec-template",
                   help="external encoder command with {input} {qpmap} {output}")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_curve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    run = _Run()
    try:
        args.func(args, run)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # surface the message, drop partial outputs
        run.cleanup()
        print(f"dtjrd {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
