"""Command-line entry point: ``mixnet-pad <command> [options]``.

Every command writes ``run.json`` (the fully resolved configuration) into its
output directory. Domain errors exit with status 1 and a single
``error: ...`` line on stderr; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

BACKBONES = {"small-cnn": "small_cnn", "resnet50": "resnet50", "densenet121": "densenet121"}
METHODS = ("mixnet", "vanilla", "lbp-hog-svm", "mslbp-svm")


class CliError(Exception):
    pass


# -- argument helpers -------------------------------------------------------------

def _alphas(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"alphas must be comma-separated numbers, got {text!r}")
    if len(vals) not in (3, 4):
        raise argparse.ArgumentTypeError("give 4 alphas (3 for a two-branch model)")
    return vals


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0, help="global random seed (default 0)")
    p.add_argument("--threads", type=_positive, default=1, help="worker threads (default 1)")
    p.add_argument("--out", required=out_required, help="output directory")


def _model_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHODS, default="mixnet",
                   help="model family (default mixnet)")
    p.add_argument("--backbone", choices=list(BACKBONES), default="small-cnn")
    p.add_argument("--weights", help="backbone weights file (never downloaded)")
    p.add_argument("--pretrained-source", choices=("none", "imagenet", "vggface2"), default="none",
                   help="provenance label of --weights")
    p.add_argument("--input-size", type=_positive, default=64, help="square input side (default 64)")
    p.add_argument("--alphas", type=_alphas, help="loss coefficients a1,a2,a3,a4")
    p.add_argument("--combine", choices=("joint", "max", "average"), default="joint",
                   help="joint = MixNet; max/average = independently trained specialists")
    p.add_argument("--fusion", choices=("trainable", "max"), default="trainable")
    p.add_argument("--epochs", type=_positive, default=10)
    p.add_argument("--batch-size", type=_positive, help="default 16 (56 for vanilla)")
    p.add_argument("--lr", type=float, default=0.01, help="SGD learning rate (default 0.01)")
    p.add_argument("--momentum", type=float, default=0.0, help="SGD momentum (default 0)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixnet-pad", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--videos-per-class", type=_positive, default=3)
    p.add_argument("--frames-per-video", type=_positive, default=4)
    p.add_argument("--size", type=int, default=64, help="square image side (>= 32)")
    p.add_argument("--strength", type=float, default=1.0, help="class signature strength in (0, 1]")
    p.add_argument("--unseen", action="store_true", help="emit genuine + held-out mask subtypes")
    p.add_argument("--include-silicone", action="store_true",
                   help="with --unseen, also emit the training mask subtype")
    p.add_argument("--classes", default="genuine,print,replay,mask",
                   help="comma-separated classes for the training set")

    p = sub.add_parser("folds", help="assign stratified video-level folds")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=_positive, default=3)

    p = sub.add_parser("features", help="extract handcrafted descriptors")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--descriptor", choices=("lbp59+hog324", "mslbp"), default="lbp59+hog324")

    p = sub.add_parser("train", help="train one model on a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--exclude-fold", type=int, help="hold out this fold")
    _model_opts(p)

    p = sub.add_parser("evaluate", help="run an evaluation protocol")
    _common(p)
    p.add_argument("--protocol", choices=("intra", "cross-unseen", "predefined"), required=True)
    p.add_argument("--manifest", required=True, help="training manifest (with folds for intra)")
    p.add_argument("--unseen-manifest", help="cross-unseen test manifest")
    p.add_argument("--test-manifest", help="predefined-split test manifest")
    p.add_argument("--metric", choices=("acer", "hter", "eer"), default="acer")
    p.add_argument("--aggregate", choices=("frame", "video"), default="frame")
    _model_opts(p)

    p = sub.add_parser("ablate", help="joint MixNet vs independent specialists")
    _common(p)
    p.add_argument("--manifest", required=True)
    _model_opts(p)

    p = sub.add_parser("cam", help="class activation maps of one branch")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--branch", default="print")
    p.add_argument("--sample-id", action="append", help="repeatable; default: all samples")
    p.add_argument("--genuine-weights", action="store_true",
                   help="weight maps with the genuine-class head row")

    p = sub.add_parser("scatter", help="export the 3D branch-score scatter")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("roc", help="plot ROC curves from metrics.json files")
    _common(p)
    p.add_argument("series", nargs="+", metavar="LABEL=METRICS_JSON")
    return ap


# -- commands -------------------------------------------------------------------

def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise CliError(f"no such file: {p}")


def _backbone(args):
    from .mixnet import BackboneSpec
    return BackboneSpec(BACKBONES[args.backbone], args.pretrained_source,
                        (args.input_size, args.input_size, 3), args.weights)


def _train_config(args):
    from .trainer import TrainConfig
    batch = args.batch_size or (56 if args.method == "vanilla" else 16)
    return TrainConfig(args.lr, batch, args.epochs, args.seed, args.alphas, args.momentum,
                       args.threads)


def _factory(args):
    from . import protocols
    bb = _backbone(args)
    if args.method == "mixnet":
        if args.combine == "joint":
            return protocols.mixnet_factory(bb, args.alphas, args.fusion)
        return protocols.independent_factory(bb, args.combine)
    if args.combine != "joint":
        raise CliError(f"--combine {args.combine} only applies to --method mixnet")
    if args.method == "vanilla":
        return protocols.vanilla_factory(bb)
    return protocols.svm_factory("lbp59+hog324" if args.method == "lbp-hog-svm" else "mslbp")


def cmd_synth(args, out: Path) -> dict:
    from . import synthdata
    spec = synthdata.SynthSpec(args.seed, (args.size, args.size), args.videos_per_class,
                               args.frames_per_video, args.strength)
    if args.unseen:
        m = synthdata.generate_unseen_masks(spec, out, args.include_silicone)
    else:
        m = synthdata.generate(spec, out, tuple(c.strip() for c in args.classes.split(",")))
    return {"manifest": str(out / "manifest.jsonl"), "records": len(m)}


def cmd_folds(args, out: Path) -> dict:
    from .datamodel import assign_folds, class_composition, load_manifest, save_manifest
    m = load_manifest(args.manifest)
    folded = assign_folds(m, args.k, args.seed)
    # keep image paths valid from the new location
    root = Path(m.root).resolve()
    if root != out.resolve():
        from dataclasses import replace
        folded = folded.with_records(replace(r, media_path=str(root / r.media_path))
                                     for r in folded.records)
    path = save_manifest(folded, out / "manifest.jsonl")
    comp = {k: class_composition(folded.subset(lambda r, k=k: r.fold == k)) for k in range(args.k)}
    return {"manifest": str(path), "composition": comp}


def cmd_features(args, out: Path) -> dict:
    from .datamodel import load_manifest
    from .features import extract_manifest, save_features
    m = load_manifest(args.manifest)
    x = extract_manifest(m, args.descriptor)
    data, meta = save_features(x, args.descriptor, out / "features")
    (out / "sample_ids.txt").write_text("".join(r.sample_id + "\n" for r in m.records))
    return {"features": str(data), "sidecar": str(meta), "shape": list(x.shape)}


def cmd_train(args, out: Path) -> dict:
    from . import protocols
    from .datamodel import load_manifest
    m = load_manifest(args.manifest)
    if args.exclude_fold is not None:
        m = m.subset(lambda r: r.fold != args.exclude_fold)
    if not len(m):
        raise CliError("no training records")
    model = _factory(args)(m, args.seed)
    seen = protocols._fit(model, m, _train_config(args), out)
    return {"checkpoint": str(out / "checkpoint"), "trained_on": len(seen)}


def cmd_evaluate(args, out: Path) -> dict:
    from . import protocols
    from .datamodel import load_manifest
    _require(args.unseen_manifest, args.test_manifest)
    m = load_manifest(args.manifest)
    cfg, factory = _train_config(args), _factory(args)
    if args.protocol == "predefined":
        if args.test_manifest is None:
            raise CliError("--protocol predefined needs --test-manifest")
        if args.metric == "acer":
            raise CliError("--protocol predefined reports --metric hter or eer")
        report = protocols.run_predefined(m, load_manifest(args.test_manifest), factory, cfg,
                                          args.metric, out_dir=out)
        return {"metrics": str(out / "runs" / "predefined" / "metrics.json"),
                args.metric: report.hter if args.metric == "hter" else report.test_eer.mean}
    if args.metric != "acer":
        raise CliError(f"--protocol {args.protocol} reports --metric acer")
    if args.protocol == "cross-unseen" and args.unseen_manifest is None:
        raise CliError("--protocol cross-unseen needs --unseen-manifest")
    intra = protocols.run_intra(m, factory, cfg, out, "intra", args.aggregate)
    result = {"metrics": str(out / "runs" / "intra" / "metrics.json"),
              "acer": intra.report.acer.mean}
    if args.protocol == "cross-unseen":
        report = protocols.run_cross_unseen(intra, load_manifest(args.unseen_manifest),
                                            out_dir=out)
        result = {"metrics": str(out / "runs" / "cross-unseen" / "metrics.json"),
                  "attack_wise_apcer": report.attack_wise_apcer}
    return result


def cmd_ablate(args, out: Path) -> dict:
    from . import protocols
    from .datamodel import load_manifest
    if args.method != "mixnet" or args.combine != "joint":
        raise CliError("ablate always compares joint MixNet with independent specialists")
    res, _, _ = protocols.run_ablation(load_manifest(args.manifest), _train_config(args),
                                       _backbone(args), out, alphas=args.alphas)
    sys.stdout.write(res.table)
    if res.flagged:
        sys.stdout.write(f"note: MixNet APCER <= independent-max on only {res.mixnet_wins} "
                         f"of {len(res.attacks)} attacks\n")
    return {"table": str(out / "runs" / "ablate" / "table.txt"), "mixnet_wins": res.mixnet_wins,
            "flagged": res.flagged}


def _load_model(path):
    from .mixnet import load_checkpoint
    model, _ = load_checkpoint(path)
    return model


def cmd_cam(args, out: Path) -> dict:
    from .datamodel import load_manifest
    from .diagnostics import cam, write_cam_png
    from .imaging import load_batch
    from .mixnet import MixNetModel
    _require(args.checkpoint)
    model = _load_model(args.checkpoint)
    if not isinstance(model, MixNetModel):
        raise CliError("CAM needs a MixNet checkpoint")
    m = load_manifest(args.manifest)
    wanted = set(args.sample_id or [])
    idx = [i for i, r in enumerate(m.records) if not wanted or r.sample_id in wanted]
    missing = wanted - {m.records[i].sample_id for i in idx}
    if missing:
        raise CliError(f"sample id(s) not in manifest: {sorted(missing)}")
    rows = {}
    for i in idx:
        rec = m.records[i]
        x = load_batch(m, [i])[0]
        amap = cam(model, x, args.branch, not args.genuine_weights, rec.sample_id)
        write_cam_png(amap, out / f"{rec.sample_id}_{args.branch}.png", x)
        rows[rec.sample_id] = str(out / f"{rec.sample_id}_{args.branch}.png")
    return {"maps": rows}


def cmd_scatter(args, out: Path) -> dict:
    from .datamodel import load_manifest
    from .diagnostics import score_scatter_export
    from .protocols import score
    _require(args.checkpoint)
    model = _load_model(args.checkpoint)
    m = load_manifest(args.manifest)
    q = score(model, m)
    path = score_scatter_export([(r.sample_id, s, r.attack_class) for r, s in zip(m.records, q)],
                                out / "scatter.csv", out / "scatter", args.seed)
    return {"table": str(path), "figures": [str(out / "scatter.png"), str(out / "scatter.svg")]}


def cmd_roc(args, out: Path) -> dict:
    from .diagnostics import roc_plot
    series = {}
    for item in args.series:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).parent.name or item, item
        _require(path)
        series[label] = [tuple(p) for p in json.loads(Path(path).read_text())["roc"]]
    files = roc_plot(series, out / "roc", args.seed)
    return {"figures": [str(f) for f in files]}


COMMANDS = {"synth": cmd_synth, "folds": cmd_folds, "features": cmd_features, "train": cmd_train,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "cam": cmd_cam,
            "scatter": cmd_scatter, "roc": cmd_roc}


def run(args) -> dict:
    _require(getattr(args, "manifest", None))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in sorted(vars(args).items()) if k != "verbose"}
    config["version"] = __version__
    (out / "run.json").write_text(json.dumps(config, sort_keys=True, indent=1) + "\n")
    import torch
    torch.set_num_threads(args.threads)
    return COMMANDS[args.command](args, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (CliError, FileNotFoundError, ValueError, KeyError, RuntimeError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, FileNotFoundError) and exc.filename and exc.filename not in msg:
            msg = f"{msg}: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
