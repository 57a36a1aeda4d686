"""Command-line entry point: ``relfn <subcommand> ...``.

Exit status is 0 on success, 1 for invalid input or usage, 2 for faults
raised while running. Primary outputs are written deterministically; wall
clock information goes to a ``.log`` file next to them.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

EXIT_OK, EXIT_INVALID, EXIT_FAULT = 0, 1, 2

log = logging.getLogger("relfn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers


def _ints(text: str) -> list[int]:
    """``"50,100"`` or ``"1..5"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like '1,2,3' or '1..5', got {text!r}") from None


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return raw


def _write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class _Sidecar:
    """Timestamped run log written next to the primary output."""

    def __init__(self, target: str | Path, command: str, argv: Sequence[str]):
        self.path = Path(str(target) + ".log") if Path(target).suffix else Path(target) / "run.log"
        self.lines = [f"{time.strftime('%Y-%m-%dT%H:%M:%S')} start {command} {' '.join(argv)}"]
        self.t0 = time.perf_counter()

    def note(self, msg: str) -> None:
        self.lines.append(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}")

    def close(self) -> None:
        self.note(f"done in {time.perf_counter() - self.t0:.2f}s")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("\n".join(self.lines) + "\n")


def _setup(args) -> None:
    import torch

    torch.set_num_threads(max(1, args.threads))
    level = os.environ.get("RELFN_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_model(path: str):
    from relfn.checkpoint import load_checkpoint

    model, manifest = load_checkpoint(path)
    return model.eval(), manifest


def _predicate_id(dataset, text: str) -> int:
    names = dataset.vocabulary.predicates
    if text in names:
        return names.index(text)
    try:
        return int(text)
    except ValueError:
        raise KeyError(f"unknown predicate {text!r}") from None


def _category_id(dataset, text: str) -> int:
    names = dataset.vocabulary.object_categories
    if text in names:
        return names.index(text)
    try:
        value = int(text)
    except ValueError:
        raise KeyError(f"unknown category {text!r}") from None
    if not 0 <= value < len(names):
        raise KeyError(f"unknown category {text!r}")
    return value


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from relfn.datamodel import dataset_to_dict
    from relfn.synthworld import WorldConfig, generate_world

    raw = _read_json(args.config)
    flags = {
        "seed": args.seed,
        "noise_sigma": args.noise_sigma,
        "n_categories": args.n_categories,
        "feature_dim": args.feature_dim,
        "samples_per_split": args.samples,
    }
    raw.update({k: v for k, v in flags.items() if v is not None})
    config = WorldConfig.from_dict(raw)
    side = _Sidecar(args.out, "synth", args.argv)
    payload = dataset_to_dict(generate_world(config))
    payload["generator"] = {"config": config.to_dict(), "seed": config.seed}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, separators=(",", ":"), sort_keys=True), encoding="utf-8")
    side.close()
    return EXIT_OK


def _train_configs(args, dataset):
    from relfn.gcn import ModelConfig
    from relfn.trainer import TrainConfig, default_model_config

    raw = _read_json(args.config)
    model_raw = dict(raw.get("model", {}))
    train_raw = dict(raw.get("train", {}))
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ValueError(f"config sections must be 'model' and 'train', got {sorted(unknown)}")
    flags = {
        "seed": args.seed,
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "disable_inverse": args.disable_inverse or None,
        "semantic_only": args.semantic_only or None,
        "spatial_only": args.spatial_only or None,
    }
    train_raw.update({k: v for k, v in flags.items() if v is not None})
    tcfg = TrainConfig.from_dict(train_raw)
    if dataset.feature_dim is None and "feature_dim" not in model_raw:
        raise ValueError("dataset has no stored features; set model.feature_dim")
    base = default_model_config(dataset) if dataset.feature_dim is not None else ModelConfig(
        predicate_ids=tuple(dataset.vocabulary.frequent), n_categories=dataset.vocabulary.n_categories)
    mcfg = ModelConfig.from_dict({**base.to_dict(), **model_raw})
    return mcfg, tcfg


def cmd_train(args) -> int:
    from relfn.datamodel import load_dataset
    from relfn.trainer import apply_ablations, train

    dataset = load_dataset(args.data)
    mcfg, tcfg = _train_configs(args, dataset)
    out = Path(args.out)
    side = _Sidecar(out, "train", args.argv)
    model, report = train(dataset, mcfg, tcfg, out_dir=out)
    side.note(f"training took {report.seconds:.2f}s, best epoch {report.best_epoch}")
    payload = report.to_dict()
    payload["checkpoint"] = "model.ckpt"
    payload["seed"] = tcfg.seed
    payload["data"] = Path(args.data).name
    _write_json(out / "report.json", payload)
    side.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    from relfn.datamodel import load_dataset
    from relfn.decoder import decode_sample, ground_truth, prediction_record
    from relfn.metrics import recall_at_k

    dataset = load_dataset(args.data)
    model, manifest = _load_model(args.ckpt)
    samples = dataset.split(args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} is empty")
    side = _Sidecar(args.out, "eval", args.argv)
    preds = [decode_sample(model, s, args.mode) for s in samples]
    truths = [ground_truth(s, model.config.predicate_ids) for s in samples]
    result = recall_at_k(preds, truths, tuple(args.k), args.mode)
    payload = result.to_dict()
    payload.update(split=args.split, config=model.config.to_dict(), seed=model.config.seed,
                   data=Path(args.data).name, recall_scope="model predicates")
    _write_json(args.out, payload)
    if args.predictions:
        lines = [prediction_record(s.sample_id, args.mode, p, max(args.k)) for s, p in zip(samples, preds)]
        Path(args.predictions).write_text("\n".join(lines) + "\n")
    side.close()
    return EXIT_OK


def cmd_fewshot(args) -> int:
    from relfn.datamodel import load_dataset
    from relfn.fewshot import run_fewshot

    dataset = load_dataset(args.data)
    model, _ = _load_model(args.ckpt)
    side = _Sidecar(args.out, "fewshot", args.argv)
    result = run_fewshot(model, dataset, ks=args.k, seeds=args.seeds, baseline=not args.no_baseline,
                         expand=args.expand, pool=args.pool)
    result.update(config=model.config.to_dict(), seed=list(args.seeds), data=Path(args.data).name)
    _write_json(args.out, result)
    side.close()
    return EXIT_OK


def cmd_inspect(args) -> int:
    from relfn import interp
    from relfn.datamodel import load_dataset

    dataset = load_dataset(args.data)
    model, _ = _load_model(args.ckpt)
    side = _Sidecar(args.out, f"inspect {args.what}", args.argv)
    if args.what == "heatmap":
        sample = dataset.find(args.sample)
        interp.spatial_heatmap(model, _predicate_id(dataset, args.predicate), args.direction, sample, args.node,
                               args.out)
    elif args.what == "neighbors":
        means = interp.category_means(model, dataset, args.split)
        pid = _predicate_id(dataset, args.predicate)
        cat = _category_id(dataset, args.category)
        names = dataset.vocabulary.object_categories
        ranked = interp.semantic_neighbors(model, means, pid, cat, args.top, args.direction)
        payload = {
            "predicate": dataset.vocabulary.predicates[pid],
            "subject": names[cat],
            "direction": args.direction,
            "split": args.split,
            "neighbors": [{"category": names[c], "cosine": v} for c, v in ranked],
            "config": model.config.to_dict(),
            "seed": model.config.seed,
        }
        Path(args.out).write_text(interp.neighbors_json(payload) + "\n")
    else:
        coords = interp.embedding_projection(interp.category_means(model, dataset, args.split))
        Path(args.out).write_text(interp.projection_csv(coords, dataset.vocabulary.object_categories))
    side.close()
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from relfn.gcn import ModelConfig
    from relfn.trainer import gradcheck

    raw = _read_json(args.config)
    model_raw = raw.get("model", raw if "train" not in raw else {})
    defaults = dict(feature_dim=8, mask_resolution=8, predicate_ids=(0, 1), n_categories=4,
                    sem_depth=2, spa_depth=2, spa_channels=2)
    config = ModelConfig.from_dict({**defaults, **model_raw})
    if args.disable_inverse:
        config = replace(config, use_inverse=False)
    report = gradcheck(config, seed=args.seed or 0, tolerance=args.tolerance)
    payload = report.to_dict()
    payload.update(config=config.to_dict(), seed=args.seed or 0, worst_group=report.worst_group)
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        side = _Sidecar(args.out, "gradcheck", args.argv)
        Path(args.out).write_text(text)
        side.close()
    else:
        sys.stdout.write(text)
    if not report.passed:
        log.error("gradient check failed: worst group %s (%.3g)", report.worst_group, report.max_rel_error)
        return EXIT_FAULT
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the seed from config files")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = bitwise deterministic)")

    p = _Parser(prog="relfn", description="Scene graphs with learned predicate functions.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--config", help="world config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--n-categories", type=int)
    s.add_argument("--feature-dim", type=int)
    s.add_argument("--samples", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train on the frequent predicates")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help='JSON with "model" and "train" sections')
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    abl = t.add_mutually_exclusive_group()
    abl.add_argument("--semantic-only", action="store_true")
    abl.add_argument("--spatial-only", action="store_true")
    t.add_argument("--disable-inverse", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="recall@K of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("predcls", "sgcls", "sggen"), default="predcls")
    e.add_argument("--k", type=_ints, default=[50, 100])
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--predictions", help="optional JSONL dump of the top-K tuples per image")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fewshot", parents=[common], help="k-shot rare predicate classifiers")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--k", type=_ints, default=[1, 2, 3, 4, 5])
    f.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    f.add_argument("--out", required=True)
    f.add_argument("--no-baseline", action="store_true")
    f.add_argument("--expand", action="store_true", help="append per-predicate edge scores to the pair vector")
    f.add_argument("--pool", type=int, help="average-pool masks to POOL x POOL")
    f.set_defaults(func=cmd_fewshot)

    i = sub.add_parser("inspect", help="interpretability artifacts")
    isub = i.add_subparsers(dest="what", required=True, parser_class=_Parser)
    for name in ("heatmap", "neighbors", "embedding"):
        q = isub.add_parser(name, parents=[common])
        q.add_argument("--ckpt", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--out", required=True)
        q.set_defaults(func=cmd_inspect)
        if name in ("heatmap", "neighbors"):
            q.add_argument("--predicate", required=True, help="predicate name or id")
            q.add_argument("--direction", choices=("forward", "inverse"), default="forward")
        if name in ("neighbors", "embedding"):
            q.add_argument("--split", choices=("train", "val", "test"), default="train")
    hm = isub.choices["heatmap"]
    hm.add_argument("--sample", required=True)
    hm.add_argument("--node", type=int, required=True)
    nb = isub.choices["neighbors"]
    nb.add_argument("--category", required=True, help="subject category name or id")
    nb.add_argument("--top", type=int, default=5)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--config", help="model config JSON (flat or with a 'model' section)")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--disable-inverse", action="store_true")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    args.argv = argv
    _setup(args)

    from relfn.checkpoint import CheckpointError
    from relfn.datamodel import DatasetError
    from relfn.gcn import NonFiniteError
    from relfn.trainer import TrainingDivergence

    try:
        return args.func(args)
    except (TrainingDivergence, NonFiniteError) as exc:
        print(f"relfn: runtime fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (DatasetError, CheckpointError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError,
            IndexError) as exc:
        print(f"relfn: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("fault", exc_info=True)
        print(f"relfn: runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
