"""Command-line entry point for reproducible corpus generation, training,
evaluation and reporting.

Every training/evaluation run lands in a directory named by timestamp and
config hash containing the resolved config, a metrics log, checkpoints and
a reproducibility stamp. Exit codes: 0 success, 1 runtime failure, 2 bad
arguments or config validation failure.
"""

from __future__ import annotations

import os

# Cap numeric worker parallelism before numpy loads its BLAS.
_threads = os.environ.get("RLIP_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import dataset as ds
from . import evaluation as ev
from . import training as tr


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_help()
        return 2
    try:
        args.handler(args)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlip", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scenes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="JSON corpus config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a corpus config field")
    p.set_defaults(handler=_cmd_gen_data)

    for name, help_text in (("pretrain", "run relational pre-training"),
                            ("finetune", "fine-tune on a downstream corpus")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--corpus", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--config", type=Path, help="JSON training config")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        if name == "pretrain":
            p.add_argument("--paradigm", choices=tr.PARADIGMS)
            p.set_defaults(handler=_cmd_pretrain)
        else:
            p.add_argument("--init", default="random",
                           help="checkpoint path or 'random'")
            p.set_defaults(handler=_cmd_finetune)

    p = sub.add_parser("zeroshot", help="zero-shot evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--k", type=int, default=ev.DEFAULT_TOP_K)
    p.add_argument("--agent-label", help="subject filter label")
    p.add_argument("--rare-threshold", type=int, default=10)
    p.set_defaults(handler=_cmd_zeroshot)

    p = sub.add_parser("eval", help="protocol evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--protocol", required=True, choices=ev.PROTOCOLS)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--splits", type=Path,
                   help="JSON with rare_classes / unseen_combos lists")
    p.add_argument("--k", type=int, default=ev.DEFAULT_TOP_K)
    p.add_argument("--agent-label")
    p.add_argument("--chance-seed", type=int)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("inject-noise", help="flip a ratio of relation labels")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--ratio", required=True, type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(handler=_cmd_inject_noise)

    p = sub.add_parser("subset", help="few-shot annotation subset")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--fraction", required=True, type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(handler=_cmd_subset)

    p = sub.add_parser("uc-split", help="unseen-combination split")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--mode", required=True, choices=("rare-first", "non-rare-first"))
    p.add_argument("--fraction", required=True, type=float)
    p.add_argument("--out", required=True, type=Path, help="split JSON path")
    p.add_argument("--apply", type=Path,
                   help="also write the seen-only training corpus here")
    p.set_defaults(handler=_cmd_uc_split)

    p = sub.add_parser("report", help="aggregate metrics into CSV + SVG")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(handler=_cmd_report)
    return parser


# -- config plumbing -----------------------------------------------------------


def _apply_overrides(doc: dict, pairs: list[str]) -> dict:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[parts[-1]] = value
    return doc


def _load_json(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _train_config(args, mode: str) -> tr.TrainConfig:
    doc = _load_json(args.config)
    base = (tr.desk_pretrain_config() if mode == "pretrain"
            else tr.desk_finetune_config())
    merged = {**base.to_dict(), **doc}
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.epochs is not None:
        merged["epochs"] = args.epochs
    if mode == "pretrain" and getattr(args, "paradigm", None):
        merged["paradigm"] = args.paradigm
    merged["mode"] = mode
    merged = _apply_overrides(merged, args.set)
    try:
        return tr.TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _run_dir(base: Path, config_doc: dict) -> Path:
    digest = hashlib.sha256(
        json.dumps(config_doc, sort_keys=True).encode()).hexdigest()[:8]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(base) / f"{stamp}-{digest}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def _write_stamp(run: Path, seed: int, extra: dict | None = None) -> None:
    doc = {"seed": seed, "version": __version__,
           "finished": time.strftime("%Y-%m-%dT%H:%M:%S"), **(extra or {})}
    (run / "stamp.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _write_metrics(run: Path, metrics: list[dict]) -> None:
    with open(run / "metrics.jsonl", "w") as f:
        for record in metrics:
            f.write(json.dumps(record, sort_keys=True) + "\n")


# -- handlers -------------------------------------------------------------------


def _cmd_gen_data(args) -> None:
    doc = _apply_overrides(_load_json(args.config), args.set)
    try:
        config = ds.CorpusConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if args.scenes < 1:
        raise ConfigError("--scenes must be positive")
    scenes, vocab = ds.generate_corpus(config, args.seed, args.scenes)
    ds.save_corpus(args.out, scenes, vocab)
    (Path(args.out) / "corpus_config.json").write_text(
        json.dumps(asdict(config), indent=2, sort_keys=True))
    print(f"wrote {len(scenes)} scenes to {args.out}")


def _cmd_pretrain(args) -> None:
    config = _train_config(args, "pretrain")
    scenes, vocab = ds.load_corpus(args.corpus)
    run = _run_dir(args.out, config.to_dict())
    (run / "resolved_config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True))
    ckpt, metrics = tr.run_pretraining(scenes, vocab, config)
    tr.save_checkpoint(run / "checkpoint.ckpt", ckpt)
    _write_metrics(run, metrics)
    _write_stamp(run, config.seed, {"corpus": str(args.corpus)})
    print(f"run directory: {run}")


def _cmd_finetune(args) -> None:
    config = _train_config(args, "finetune")
    scenes, vocab = ds.load_corpus(args.corpus)
    init = None
    if args.init != "random":
        init = tr.load_checkpoint(Path(args.init))
    run = _run_dir(args.out, config.to_dict())
    (run / "resolved_config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True))
    ckpt, metrics = tr.run_finetuning(scenes, vocab, config, init=init)
    tr.save_checkpoint(run / "checkpoint.ckpt", ckpt)
    _write_metrics(run, metrics)
    _write_stamp(run, config.seed, {"corpus": str(args.corpus), "init": str(args.init)})
    print(f"run directory: {run}")


def _cmd_zeroshot(args) -> None:
    ckpt = tr.load_checkpoint(args.ckpt)
    scenes, vocab = ds.load_corpus(args.corpus)
    rare = ds.rare_classes(scenes, args.rare_threshold)
    report = ev.run_protocol(ckpt, scenes, vocab, "NF",
                             {"top_k": args.k, "agent_label": args.agent_label,
                              "rare_classes": rare})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    print(f"Full mAP: {report.aggregates['Full']}")


def _cmd_eval(args) -> None:
    ckpt = tr.load_checkpoint(args.ckpt)
    scenes, vocab = ds.load_corpus(args.corpus)
    splits = _load_json(args.splits)
    options = {"top_k": args.k, "agent_label": args.agent_label}
    if args.chance_seed is not None:
        options["chance_seed"] = args.chance_seed
    if "rare_classes" in splits:
        options["rare_classes"] = [tuple(c) for c in splits["rare_classes"]]
    if "unseen_combos" in splits:
        options["unseen_combos"] = [tuple(c) for c in splits["unseen_combos"]]
    report = ev.run_protocol(ckpt, scenes, vocab, args.protocol, options)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    print(f"{args.protocol} aggregates: {report.aggregates}")


def _cmd_inject_noise(args) -> None:
    if not 0.0 <= args.ratio <= 1.0:
        raise ConfigError("--ratio must lie in [0, 1]")
    scenes, vocab = ds.load_corpus(args.corpus)
    noisy = ds.inject_relation_noise(scenes, args.ratio, args.seed,
                                     vocab.relation_labels)
    ds.save_corpus(args.out, noisy, ds.refresh_frequencies(vocab, noisy))
    print(f"wrote corrupted corpus to {args.out}")


def _cmd_subset(args) -> None:
    if not 0.0 < args.fraction <= 1.0:
        raise ConfigError("--fraction must lie in (0, 1]")
    scenes, vocab = ds.load_corpus(args.corpus)
    subset = ds.sample_fewshot_subset(scenes, args.fraction, args.seed)
    ds.save_corpus(args.out, subset, ds.refresh_frequencies(vocab, subset))
    print(f"wrote few-shot subset to {args.out}")


def _cmd_uc_split(args) -> None:
    scenes, vocab = ds.load_corpus(args.corpus, with_images=args.apply is not None)
    try:
        seen, unseen = ds.build_uc_split(scenes, args.mode, args.fraction)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"mode": args.mode, "seen": seen, "unseen": unseen},
                              indent=2))
    if args.apply:
        filtered = ds.remove_unseen_combos(scenes, unseen)
        ds.save_corpus(args.apply, filtered, ds.refresh_frequencies(vocab, filtered))
    print(f"{len(unseen)} unseen / {len(seen)} seen combos")


def _cmd_report(args) -> None:
    run = Path(args.run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = run / "metrics.jsonl"
    if not metrics_path.exists():
        raise ConfigError(f"no metrics.jsonl under {run}")
    epochs, losses = [], []
    with open(metrics_path) as f:
        for line in f:
            record = json.loads(line)
            if record.get("kind") == "epoch":
                epochs.append(record["epoch"])
                losses.append(record["loss_mean"])
    with open(out / "loss_curve.csv", "w") as f:
        f.write("epoch,loss_mean\n")
        for e, l in zip(epochs, losses):
            f.write(f"{e},{l}\n")
    _plot_loss_curve(epochs, losses, out / "loss_curve.svg")
    for report_path in sorted(run.glob("*report*.json")):
        _per_class_csv(report_path, out / f"{report_path.stem}_per_class.csv")
    print(f"report written to {out}")


def _plot_loss_curve(epochs, losses, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, losses, marker="o", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _per_class_csv(report_path: Path, out_path: Path) -> None:
    doc = json.loads(report_path.read_text())
    per_class = doc.get("per_class_ap", {})
    with open(out_path, "w") as f:
        f.write("class,ap,gt_count\n")
        counts = doc.get("class_counts", {})
        for cls in sorted(per_class):
            f.write(f"\"{cls}\",{per_class[cls]},{counts.get(cls, 0)}\n")


if __name__ == "__main__":
    sys.exit(main())
