"""Command-line surface: synth, project, train, embed, eval.

Exit codes: 0 success, 2 configuration errors, 3 dataset/data errors,
4 checkpoint errors.  TRIGAIT_DATA_ROOT provides the default --data value.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from .errors import CheckpointError, ConfigError, DataError

DATA_ROOT_ENV = "TRIGAIT_DATA_ROOT"


def _load_yaml_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigError(f"config file {path} is not valid YAML{where}: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return data


def _data_root(args) -> str:
    if getattr(args, "data", None):
        return args.data
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return env
    raise DataError(f"no dataset directory given; pass --data or set {DATA_ROOT_ENV}")


def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def cmd_synth(args) -> int:
    from .synthesis import SynthConfig, generate_synthetic_dataset

    config = SynthConfig.from_dict(_load_yaml_config(args.config))
    index = generate_synthetic_dataset(config, args.seed, args.out)
    num_frames = sum(e.num_frames for e in index.entries)
    summary = {
        "identities": len(index.identities()),
        "sequences": len(index.entries),
        "frames": num_frames,
        "out": str(index.root),
    }
    _emit(
        args,
        summary,
        f"wrote {summary['sequences']} sequences ({summary['identities']} identities, "
        f"{num_frames} frames) to {index.root}",
    )
    return 0


def cmd_project(args) -> int:
    from .dataset import load_dataset, precompute_projections

    root = _data_root(args)
    index = load_dataset(root)
    progress = None if args.json else (lambda key: print(f"projected {key}"))
    rendered, skipped = precompute_projections(index, args.view, workers=args.workers, progress=progress)
    payload = {"rendered": rendered, "skipped": skipped, "view_deg": args.view}
    if rendered == 0:
        _emit(args, payload, f"projections up to date ({skipped} sequences, view {args.view} deg)")
    else:
        _emit(args, payload, f"rendered {rendered} sequences at view {args.view} deg ({skipped} up to date)")
    return 0


def cmd_train(args) -> int:
    from .training import Trainer, TrainConfig

    data = _load_yaml_config(args.config)
    if args.data:
        data["data_root"] = args.data
    if args.out:
        data["out_dir"] = args.out
    if args.ablation:
        data["variant"] = args.ablation
    config = TrainConfig.from_dict(data)
    if not config.data_root:
        raise ConfigError("train config needs data_root (or pass --data)")
    if not config.out_dir:
        raise ConfigError("train config needs out_dir (or pass --out)")

    def on_step(record):
        if not args.json and record["step"] % args.log_every == 0:
            print(
                f"step {record['step']:6d} epoch {record['epoch']:5d} lr {record['lr']:.2e} "
                f"triplet {record['triplet']:.4f} ce {record['ce']:.4f} total {record['total']:.4f}"
            )

    trainer = Trainer(config)
    final = trainer.train(resume_from=args.resume, on_step=on_step)
    _emit(args, {"checkpoint": str(final), "steps": trainer.global_step}, f"finished; final checkpoint {final}")
    return 0


def cmd_embed(args) -> int:
    from .dataset import load_dataset
    from .evaluation import extract_embeddings, save_embeddings
    from .training import load_checkpoint, model_from_checkpoint

    payload = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(payload)
    index = load_dataset(_data_root(args))
    embeddings = extract_embeddings(model, index, args.split)
    save_embeddings(args.out, embeddings)
    _emit(
        args,
        {"sequences": len(embeddings.sequence_ids), "dim": embeddings.dim, "out": args.out},
        f"wrote {len(embeddings.sequence_ids)} embeddings (dim {embeddings.dim}) to {args.out}",
    )
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate, load_embeddings

    query = load_embeddings(args.query)
    gallery = load_embeddings(args.gallery)
    report = evaluate(query, gallery)
    report.save(args.out)
    if args.json:
        print(json.dumps(report.summary(), sort_keys=True))
    else:
        print(f"{'metric':<8} value")
        for name, value in report.summary().items():
            print(f"{name:<8} {value:.4f}")
        print(f"report written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trigait", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="synth config YAML")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", help="precompute fixed-view projected silhouettes")
    p.add_argument("--data", help=f"dataset root (default ${DATA_ROOT_ENV})")
    p.add_argument("--view", type=float, default=0.0, help="projection view in degrees (default 0)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="train config YAML")
    p.add_argument("--data", help="override data_root")
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--ablation", choices=("appr", "appr+stt", "appr+castt", "full"), help="variant override")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract embeddings for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help=f"dataset root (default ${DATA_ROOT_ENV})")
    p.add_argument("--split", required=True, choices=("train", "query", "gallery"))
    p.add_argument("--out", required=True, help="output embeddings JSONL")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="open-set retrieval metrics")
    p.add_argument("--query", required=True, help="query embeddings JSONL")
    p.add_argument("--gallery", required=True, help="gallery embeddings JSONL")
    p.add_argument("--out", required=True, help="output metrics JSON")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
