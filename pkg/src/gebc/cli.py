"""Command-line entry points: generate, train, predict, evaluate.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import torch
import yaml

from gebc.datamodel import CaptionKind, ModelConfig, atomic_write_text, load_annotations
from gebc.errors import ConfigError, DataError, GEBCError, NumericError
from gebc.features import feature_path, load_feature_file, num_workers, prepare_dataset
from gebc.metrics import aggregate, load_predictions, score_predictions
from gebc.model import VideoTensors, load_checkpoint
from gebc.synthetic import SyntheticSpec, generate
from gebc.training import TrainConfig, kind_targets, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _read_structured(path: str | os.PathLike, what: str) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse {what}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: {what} must be a mapping")
    return data


def load_run_config(path: str | None) -> tuple[dict, dict]:
    data = _read_structured(path, "config") if path else {}
    unknown = sorted(set(data) - {"model", "train"})
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(unknown))
    model, train_ = data.get("model") or {}, data.get("train") or {}
    for name, section in (("model", model), ("train", train_)):
        if not isinstance(section, dict):
            raise ConfigError(f"{name} must be a mapping")
    return model, train_


def _infer_dims(model_cfg: dict, records, data_dir: str) -> dict:
    """Fill frame/region dims the config leaves unset from the first feature file."""
    model_cfg = dict(model_cfg)
    if records and ("frame_dims" not in model_cfg or "region_dim" not in model_cfg):
        ff = load_feature_file(feature_path(data_dir, records[0].video_id))
        model_cfg.setdefault("frame_dims", [int(b.shape[1]) for b in ff.frame_blocks])
        dims = {int(r.shape[1]) for r in ff.regions if r.ndim == 2 and r.shape[0]}
        if dims:
            model_cfg.setdefault("region_dim", dims.pop())
    return model_cfg


def _echo(title: str, payload: dict) -> None:
    print(f"# {title}")
    print(yaml.safe_dump(payload, sort_keys=False).rstrip())
    sys.stdout.flush()


def cmd_generate(args) -> int:
    spec = SyntheticSpec.from_dict(_read_structured(args.spec, "synthetic spec"))
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    ds = generate(spec, out)
    n = sum(r.num_boundaries for r in ds.records)
    print(f"wrote {len(ds.records)} videos / {n} boundaries to {out}")
    return EXIT_OK


def _load_split(data_dir: str):
    ann = Path(data_dir) / "annotations.json"
    if not ann.exists():
        raise DataError(f"no annotations.json in {data_dir}")
    return load_annotations(ann)


def cmd_train(args) -> int:
    model_raw, train_raw = load_run_config(args.config)
    if args.seed is not None:
        model_raw = {**model_raw, "seed": args.seed}
        train_raw = {**train_raw, "seed": args.seed}
    kind = CaptionKind.parse(args.kind)
    records = _load_split(args.data)
    model_cfg = ModelConfig.from_dict(_infer_dims(model_raw, records, args.data))
    train_cfg = TrainConfig.from_dict(train_raw)
    _echo("effective config", {"kind": kind.value, "model": model_cfg.to_dict(), "train": train_cfg.to_dict()})
    torch.manual_seed(train_cfg.seed)
    videos = [VideoTensors.from_prepared(v) for v in prepare_dataset(records, args.data, model_cfg)]
    targets = kind_targets(records, kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{kind.value}_train.log", "a", encoding="utf-8") as fh:
        result = train(videos, targets, kind, model_cfg, train_cfg, out_dir=out, log=fh)
    for rec in result.history:
        print(f"epoch {rec.epoch} [{rec.phase}] loss {rec.loss:.6f} lr {rec.lr:.3g}")
    print(f"last checkpoint: {result.checkpoints[-1] if result.checkpoints else '-'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    kind = CaptionKind.parse(args.kind)
    model, vocab, payload = load_checkpoint(args.ckpt)
    if model.kind is not kind:
        raise ConfigError(f"checkpoint {args.ckpt} is a {model.kind.value} model, --kind is {kind.value}")
    records = _load_split(args.data)
    videos = [VideoTensors.from_prepared(v) for v in prepare_dataset(records, args.data, model.config)]
    preds = []
    for i in range(0, len(videos), args.batch_size):
        for (vid, b), ids in model.predict(videos[i : i + args.batch_size]):
            preds.append({"video_id": vid, "boundary_index": b, "kind": kind.value, "caption": vocab.decode(ids)})
    preds.sort(key=lambda p: (p["video_id"], p["boundary_index"]))
    atomic_write_text(args.out, json.dumps(preds, indent=2, ensure_ascii=False) + "\n")
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.from_report:
        data = _read_structured(args.from_report, "report")
        try:
            report = aggregate({m: {k: [float(v)] for k, v in kinds.items()} for m, kinds in data.items()})
        except (AttributeError, TypeError, ValueError) as exc:
            raise ConfigError(f"{args.from_report}: expected {{metric: {{kind: score}}}} ({exc})") from None
    else:
        if not (args.pred and args.ann):
            raise ConfigError("evaluate needs --pred and --ann (or --from-report)")
        preds = []
        for path in args.pred:
            preds.extend(load_predictions(path))
        report = score_predictions(preds, args.ann, kinds=args.kind or None)
    if args.percent:
        report = report.scaled(100.0, 100.0)
    print(report.format_table())
    if args.json_out:
        atomic_write_text(args.json_out, json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gebc", description="Context-aware generic event boundary captioning.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--spec", required=True, help="YAML/JSON synthetic dataset spec")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one caption-kind model")
    t.add_argument("--data", required=True, help="dataset directory (annotations.json + features/)")
    t.add_argument("--kind", required=True, choices=[k.value for k in CaptionKind])
    t.add_argument("--config", help="YAML config with optional 'model' and 'train' sections")
    t.add_argument("--out", required=True, help="directory for checkpoints, vocabulary and log")
    t.add_argument("--seed", type=int, help="override model and train seeds")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="greedy-decode captions for every boundary")
    r.add_argument("--ckpt", required=True, help="checkpoint written by 'train'")
    r.add_argument("--data", required=True, help="dataset directory")
    r.add_argument("--kind", required=True, choices=[k.value for k in CaptionKind])
    r.add_argument("--out", required=True, help="prediction JSON file")
    r.add_argument("--batch-size", type=int, default=8, help="videos per forward pass")
    r.add_argument("--seed", type=int, help="accepted for symmetry; decoding is deterministic")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="CIDEr-D / ROUGE-L report")
    e.add_argument("--pred", action="append", help="prediction JSON file (repeatable)")
    e.add_argument("--ann", help="annotation file")
    e.add_argument("--kind", action="append", choices=[k.value for k in CaptionKind], help="restrict kinds")
    e.add_argument("--percent", action="store_true", help="multiply scores by 100 for display")
    e.add_argument("--json-out", help="also write the report as JSON")
    e.add_argument("--from-report", help="re-aggregate a prepared {metric: {kind: score}} report")
    e.add_argument("--seed", type=int, help="accepted for symmetry; evaluation is deterministic")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if os.environ.get("GEBC_NUM_WORKERS"):
        torch.set_num_threads(num_workers())
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"gebc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"gebc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"gebc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GEBCError as exc:
        print(f"gebc: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
