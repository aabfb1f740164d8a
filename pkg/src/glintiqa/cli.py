"""Command-line entry point.

Subcommands: build-dataset, train, score, evaluate, cross-eval,
analyze-semantic, gmad. Exit status is 0 on success, 1 on a domain error
(printed with its module-qualified code) and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import difflib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import config_hash, load_config, model_config_from_run
from .errors import ConfigError, GlintError, InputError

log = logging.getLogger("glintiqa")

SUBCOMMANDS = ("build-dataset", "train", "score", "evaluate", "cross-eval", "analyze-semantic", "gmad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------- parsing helpers


def _levels(text: str) -> list[int]:
    """``1..5`` or ``1,3,5``."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            return list(range(int(a), int(b) + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}; use 1..5 or 1,2,3") from None


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML/YAML file; its values override flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="use deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=("full", "surrogate"), default="full",
                   help="full-size network or the downsized surrogate")
    p.add_argument("--fusion-order", choices=("clfe_to_vgfe", "vgfe_to_clfe"))
    p.add_argument("--img-size", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pretrained", action="store_true",
                   help="load ImageNet backbone weights from $GLINT_CACHE")
    g.add_argument("--random-init", action="store_true", help="random backbone weights")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("finetune", "pretrain"), default="finetune")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--patches", type=int, help="crops averaged per image at evaluation")


def build_parser() -> _Parser:
    parser = _Parser(prog="glintiqa", description="Blind image quality assessment toolkit.", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("build-dataset", help="label degraded high-quality images by semantic matching",
                       allow_abbrev=False)
    p.add_argument("--hq", type=Path, required=True, help="directory of high-quality images")
    p.add_argument("--corpus", type=Path, required=True,
                   help="labeled pristine corpus CSV (pristine_id,pristine_path,type,level,mos)")
    p.add_argument("--corpus-format", choices=("csv", "kadid"), default="csv")
    p.add_argument("--corpus-root", type=Path)
    p.add_argument("--mos-range", type=_pair, help="raw MOS range LO,HI mapped onto [0, 9]")
    p.add_argument("--families", type=_list, required=True)
    p.add_argument("--levels", type=_levels, default=[1, 2, 3, 4, 5])
    p.add_argument("--extractor", choices=("resnet101", "resnet50"), default="resnet101")
    p.add_argument("--extractor-weights", default="random", help="random, imagenet or a weight file")
    p.add_argument("--shard-size", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, required=True, help="manifest path (.jsonl)")
    _add_common(p)

    p = sub.add_parser("train", help="train a quality model", allow_abbrev=False)
    p.add_argument("--data", type=Path, required=True, help="labels CSV or SAQT manifest")
    p.add_argument("--val", type=Path, help="validation labels CSV or manifest")
    p.add_argument("--root", type=Path, help="image root for labels CSVs")
    p.add_argument("--run-dir", type=Path, help="default: runs/<config hash>")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--init", type=Path, help="checkpoint whose weights start the run (fine-tuning)")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("score", help="predict the quality of one image", allow_abbrev=False)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--patches", type=int, default=25)
    _add_common(p)

    p = sub.add_parser("evaluate", help="SROCC/PLCC of a checkpoint or the repeated split protocol",
                       allow_abbrev=False)
    p.add_argument("--data", type=Path, help="labels CSV or SAQT manifest")
    p.add_argument("--root", type=Path)
    p.add_argument("--ckpt", type=Path, help="score a trained checkpoint on --data")
    p.add_argument("--oracle", action="store_true", help="self-test with the label-echo predictor")
    p.add_argument("--protocol", action="store_true", help="train and test over repeated 8:2 splits")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--ablation", action="store_true", help="compare both fusion orders on one split")
    p.add_argument("--out", type=Path, help="report stem; .json and .csv are written")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("cross-eval", help="evaluate source-trained checkpoints on unseen datasets",
                       allow_abbrev=False)
    p.add_argument("--ckpt", type=Path, action="append", required=True, help="repeat per training re-run")
    p.add_argument("--source", required=True, help="tag of the training dataset")
    p.add_argument("--target", type=Path, action="append", required=True, help="labels CSV or manifest")
    p.add_argument("--patches", type=int, default=25)
    p.add_argument("--out", type=Path)
    _add_common(p)

    p = sub.add_parser("analyze-semantic", help="PLCC of MOS vectors vs semantic distance",
                       allow_abbrev=False)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--corpus-format", choices=("csv", "kadid"), default="csv")
    p.add_argument("--corpus-root", type=Path)
    p.add_argument("--extractor", choices=("resnet101", "resnet50"), default="resnet101")
    p.add_argument("--extractor-weights", default="random")
    p.add_argument("--bin-width", type=float, default=0.07)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("gmad", help="gMAD pair selection between two score sets", allow_abbrev=False)
    p.add_argument("--defender", type=Path, required=True, help="CSV id,score")
    p.add_argument("--attacker", type=Path, required=True, help="CSV id,score")
    p.add_argument("--levels", type=int, default=6)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_common(p)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser | None:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def _check_unknown(parser, argv: list[str]) -> None:
    """Reject unknown flags with a closest-match suggestion."""
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv and not argv[0].startswith("-"):
            hint = difflib.get_close_matches(argv[0], SUBCOMMANDS, n=1)
            extra = f"; did you mean {hint[0]!r}?" if hint else ""
            parser.error(f"unknown command {argv[0]!r}{extra}")
        return
    sp = _subparser(parser, argv[0])
    known = set(sp._option_string_actions)
    for tok in argv[1:]:
        if tok.startswith("--"):
            flag = tok.split("=", 1)[0]
            if flag not in known:
                hint = difflib.get_close_matches(flag, sorted(known), n=1)
                extra = f"; did you mean {hint[0]}?" if hint else ""
                sp.error(f"unrecognized argument {flag}{extra}")


def _config_path(argv: list[str]) -> Path | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def _relax_required(parser, command: str, keys) -> None:
    """Options supplied by the config file need not appear on the command line."""
    sp = _subparser(parser, command)
    dests = {k.replace("-", "_") for k in keys}
    for action in sp._actions:
        if action.dest in dests:
            action.required = False


def _apply_config(args: argparse.Namespace, data: dict) -> dict:
    """Overlay config-file values onto the parsed flags. A ``[model]`` table
    is kept aside for the network config."""
    if not data:
        return {}
    data = dict(data)
    model_table = data.pop("model", {}) or {}
    dests = set(vars(args))
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest not in dests or dest in ("command", "config"):
            raise ConfigError(f"config key {key!r} is not an option of {args.command}", module="cli_app")
        if dest in ("hq", "corpus", "data", "val", "root", "out", "run_dir", "ckpt", "image", "resume",
                    "init", "corpus_root", "defender", "attacker", "target"):
            value = [Path(v) for v in value] if isinstance(value, list) else Path(value)
            if dest in ("ckpt", "target") and args.command == "cross-eval" and not isinstance(value, list):
                value = [value]
        elif dest == "levels" and isinstance(value, str):
            value = _levels(value)
        elif dest == "families" and isinstance(value, str):
            value = _list(value)
        setattr(args, dest, value)
    return model_table


# --------------------------------------------------------------------------- shared builders


def _dataset(path: Path, root=None, tag=None):
    from .datasets import IQADataset

    if not path.is_file():
        raise InputError(f"dataset file not found: {path}", module="cli_app")
    if path.suffix == ".jsonl":
        return IQADataset.from_manifest(path, tag)
    return IQADataset.from_labels_csv(path, root, tag)


def _corpus(args):
    from .saqt import LabeledCorpus

    if not args.corpus.is_file():
        raise InputError(f"corpus file not found: {args.corpus}", module="cli_app")
    if args.corpus_format == "kadid":
        return LabeledCorpus.from_kadid(args.corpus, args.corpus_root, getattr(args, "mos_range", None) or (1.0, 5.0))
    return LabeledCorpus.from_csv(args.corpus, args.corpus_root, getattr(args, "mos_range", None))


def _model_config(args, model_table: dict):
    from .model import ModelConfig, surrogate_config

    base = surrogate_config() if args.arch == "surrogate" else ModelConfig()
    cfg = model_config_from_run(model_table, base) if model_table else base
    d = cfg.to_dict()
    if args.fusion_order:
        d["fusion_order"] = args.fusion_order
    if args.img_size:
        d["backbone"]["img_size"] = args.img_size
    if args.pretrained:
        d["backbone"]["vit_weights"] = d["backbone"]["cnn_weights"] = "imagenet"
    if args.random_init:
        d["backbone"]["vit_weights"] = d["backbone"]["cnn_weights"] = None
    return ModelConfig.from_dict(d)


def _train_config(args, model_cfg):
    from .training import TrainConfig

    cfg = TrainConfig.pretrain() if args.mode == "pretrain" else TrainConfig()
    over = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "crop_size": args.crop_size or model_cfg.backbone.img_size,
        "eval_interval": args.eval_interval,
        "eval_patches": args.patches,
        "seed": args.seed,
        "deterministic": args.deterministic,
    }
    return replace(cfg, **{k: v for k, v in over.items() if v is not None})


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- subcommands


def cmd_build_dataset(args, model_table) -> int:
    from .saqt import SAQTConfig, build_dataset

    corpus = _corpus(args)
    cfg = SAQTConfig(args.families, args.levels, args.seed, args.extractor, args.extractor_weights,
                     args.shard_size, args.workers)
    manifest, summary = build_dataset(args.hq, corpus, cfg, args.out)
    print(f"wrote {len(manifest.records)} records to {args.out} "
          f"(config {manifest.header['config_hash']}, mean distance {summary['mean']:.4f})")
    if summary["errors"]:
        print(f"skipped {len(summary['errors'])} unreadable images; see {args.out.with_suffix('.summary.json')}")
    return 0


def cmd_train(args, model_table) -> int:
    from .model import build_model
    from .training import load_checkpoint, train

    model_cfg = _model_config(args, model_table)
    train_cfg = _train_config(args, model_cfg)
    data = _dataset(args.data, args.root)
    val = _dataset(args.val, args.root).samples if args.val else ()
    chash = config_hash({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()})
    run_dir = args.run_dir or Path("runs") / chash
    model = build_model(model_cfg, seed=train_cfg.seed)
    if args.init:
        model.load_state_dict(load_checkpoint(args.init)["model"])
    result = train(model, data.samples, train_cfg, val, run_dir, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"run {run_dir}: epochs {result.last_epoch}, final loss {last.get('loss', float('nan')):.4f}, "
          f"best val srocc {result.best_metric} at epoch {result.best_epoch}")
    return 0


def cmd_score(args, model_table) -> int:
    from .images import load_image
    from .training import infer_patch_averaged, model_from_checkpoint

    if not args.image.is_file():
        raise InputError(f"image not found: {args.image}", module="cli_app")
    model = model_from_checkpoint(args.ckpt)
    print(f"{infer_patch_averaged(model, load_image(args.image), args.patches, args.seed):.6f}")
    return 0


def _oracle_dataset(seed: int):
    from .datasets import IQADataset, Sample

    rng = np.random.default_rng(seed)
    labels = rng.uniform(0, 9, 50)
    return IQADataset("oracle", [Sample(f"img{i:03d}", float(v), content_id=f"c{i // 5}") for i, v in
                                 enumerate(labels)])


def cmd_evaluate(args, model_table) -> int:
    from .evaluation.metrics import plcc, srocc
    from .evaluation.protocol import (checkpoint_predictor, fusion_order_ablation, oracle_factory,
                                      run_protocol, trained_factory, write_ablation)

    if args.oracle:
        data = _dataset(args.data, args.root) if args.data else _oracle_dataset(args.seed)
        report = run_protocol(oracle_factory, data, args.repeats, args.seed, model_tag="oracle")
        med = report.medians[data.tag]
        if args.out:
            report.write(args.out)
        print(f"srocc={med['srocc']:.3f} plcc={med['plcc']:.3f}")
        return 0
    if not args.data:
        raise UsageError("evaluate: --data is required unless --oracle is given")
    data = _dataset(args.data, args.root)
    if args.ckpt:
        preds = checkpoint_predictor(args.ckpt, args.patches or 25, args.seed)(data.samples)
        truth = [s.label for s in data.samples]
        s, p = srocc(preds, truth), plcc(preds, truth)
        if args.out:
            _write_json(args.out.with_suffix(".json"), {
                "dataset": data.tag, "checkpoint": str(args.ckpt), "srocc": s, "plcc": p,
                "config_hash": config_hash({"ckpt": str(args.ckpt), "data": str(args.data),
                                            "patches": args.patches, "seed": args.seed}),
            })
        print(f"{data.tag}: srocc={s:.4f} plcc={p:.4f}")
        return 0
    model_cfg = _model_config(args, model_table)
    train_cfg = _train_config(args, model_cfg)
    if args.ablation:
        rows = fusion_order_ablation(data, model_cfg, train_cfg, seed=args.seed)
        if args.out:
            write_ablation(rows, args.out)
        for r in rows:
            print(f"{r['fusion_order']}: test srocc={r['test_srocc']:.4f} plcc={r['test_plcc']:.4f}")
        return 0
    if not args.protocol:
        raise UsageError("evaluate: choose one of --oracle, --ckpt, --protocol or --ablation")
    report = run_protocol(trained_factory(model_cfg, train_cfg), data, args.repeats, args.seed,
                          model_tag=model_cfg.fusion_order.value,
                          extra_config={"model": model_cfg.to_dict(), "train": train_cfg.to_dict()})
    if args.out:
        report.write(args.out)
    for err in report.errors:
        print(f"repeat {err['repeat']} failed: {err['error']}", file=sys.stderr)
    med = report.medians[data.tag]
    if med["srocc"] is None:
        print(f"{data.tag}: every repeat failed")
        return 1
    print(f"{data.tag}: median srocc={med['srocc']:.4f} plcc={med['plcc']:.4f} over {med['n_repeats']} repeats")
    return 0


def cmd_cross_eval(args, model_table) -> int:
    from .evaluation.protocol import checkpoint_predictor, cross_eval

    targets = [_dataset(t) for t in args.target]
    predictors = [checkpoint_predictor(c, args.patches, args.seed) for c in args.ckpt]
    report = cross_eval(predictors, args.source, targets)
    if args.out:
        report.write(args.out)
    for tag, med in report.medians.items():
        if med["srocc"] is None:
            print(f"{args.source} -> {tag}: failed")
        else:
            print(f"{args.source} -> {tag}: median srocc={med['srocc']:.4f} plcc={med['plcc']:.4f}")
    return 0


def cmd_analyze_semantic(args, model_table) -> int:
    from .evaluation.analysis import analyze_distance_quality
    from .images import load_image
    from .saqt import EmbeddingExtractor

    corpus = _corpus(args)
    extractor = EmbeddingExtractor(args.extractor, args.extractor_weights, args.seed)
    emb = {}
    for e in corpus.entries:
        if not e.image_path:
            raise InputError(f"pristine {e.id!r} has no image path", module="cli_app")
        emb[e.id] = extractor(load_image(e.image_path), e.id).vector
    table = analyze_distance_quality(emb, {e.id: e.mos for e in corpus.entries}, args.bin_width)
    args.out.mkdir(parents=True, exist_ok=True)
    table.write_csv(args.out / "distance_quality.csv")
    table.plot(args.out / "distance_quality.png")
    _write_json(args.out / "distance_quality.json", {
        "config_hash": config_hash({"corpus": str(args.corpus), "extractor": extractor.tag,
                                    "bin_width": args.bin_width}),
        "extractor_tag": extractor.tag,
        "n_pairs": len(table.pairs),
        "skipped_incomplete": table.skipped_incomplete,
        "skipped_undefined": table.skipped_undefined,
        "bins": [vars(b) for b in table.bins],
    })
    print(f"{len(table.pairs)} pairs in {len(table.bins)} bins; wrote {args.out}")
    return 0


def _read_scores(path: Path) -> dict[str, float]:
    if not path.is_file():
        raise InputError(f"score file not found: {path}", module="cli_app")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"id", "score"} <= set(reader.fieldnames or ()):
            raise InputError(f"{path} needs columns id,score", module="cli_app")
        return {r["id"]: float(r["score"]) for r in reader}


def cmd_gmad(args, model_table) -> int:
    from .evaluation.gmad import gmad_pairs, plot_gmad

    d, a = _read_scores(args.defender), _read_scores(args.attacker)
    pairs = gmad_pairs(d, a, args.levels)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(args.out / "gmad_pairs.json", {
        "config_hash": config_hash({"defender": str(args.defender), "attacker": str(args.attacker),
                                    "levels": args.levels}),
        "pairs": [vars(p) for p in pairs],
    })
    plot_gmad(d, a, pairs, args.out / "gmad.png")
    for p in pairs:
        print(f"level {p.level}: {p.low} vs {p.high} (attacker gap {p.attacker_gap:.4f})")
    return 0


_DISPATCH = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "cross-eval": cmd_cross_eval,
    "analyze-semantic": cmd_analyze_semantic,
    "gmad": cmd_gmad,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _check_unknown(parser, argv)
        cfg_path = _config_path(argv)
        file_cfg = load_config(cfg_path) if cfg_path and argv[0] in SUBCOMMANDS else {}
        if file_cfg:
            _relax_required(parser, argv[0], file_cfg)
        args = parser.parse_args(argv)
        if not args.command:
            parser.error("a subcommand is required")
        model_table = _apply_config(args, file_cfg)
        missing = [a.option_strings[0] for a in _subparser(parser, args.command)._actions
                   if a.dest in {k.replace("-", "_") for k in file_cfg} and getattr(args, a.dest) is None]
        if missing:
            parser.error(f"missing values for {', '.join(missing)}")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except GlintError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import torch

    previous = torch.are_deterministic_algorithms_enabled()
    if args.deterministic:
        from .training import set_deterministic

        set_deterministic(True)
    try:
        return _DISPATCH[args.command](args, model_table)
    except UsageError as exc:
        print(f"{exc}\n{_subparser(parser, args.command).format_usage()}", file=sys.stderr)
        return 2
    except GlintError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1
    finally:
        torch.use_deterministic_algorithms(previous)


if __name__ == "__main__":
    sys.exit(main())
