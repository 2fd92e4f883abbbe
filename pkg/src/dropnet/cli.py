"""Command-line entry point: ``dropnet {train,grid,eval,gradcheck,synth}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, config as cfgmod
from .data import build_vocab, load_examples, load_pretrained, synthetic_nli, write_jsonl
from .errors import CheckpointVersionError, ConfigError, DataError, NumericalError
from .gradcheck import tiny_model_suite
from .model import NLIModel
from .train import DEFAULT_MODELS, DEFAULT_RATES, evaluate, grid_search, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
GRADCHECK_TOL = 1e-4

log = logging.getLogger("dropnet")


def _fmt(x) -> str:
    return "NA" if x is None else f"{x:.6f}"


def _load_data(cfg: cfgmod.RunConfig):
    for key in ("train_path", "val_path"):
        if not cfg.values[key]:
            raise ConfigError(f"missing required key {key!r}", key=key)
    for key in ("train_path", "val_path", "test_path", "embeddings_path"):
        p = cfg.values[key]
        if p and not Path(p).exists():
            raise ConfigError(f"{key}: file not found: {p}", key=key)
    fmt = None if cfg.format == "auto" else cfg.format
    train_c = load_examples(cfg.train_path, fmt)
    val_c = load_examples(cfg.val_path, fmt, train_c.label_names)
    test_c = load_examples(cfg.test_path, fmt, train_c.label_names) if cfg.test_path else None
    if cfg.max_train_examples:
        train_c.examples = train_c.examples[: cfg.max_train_examples]
    if cfg.max_eval_examples:
        val_c.examples = val_c.examples[: cfg.max_eval_examples]
        if test_c is not None:
            test_c.examples = test_c.examples[: cfg.max_eval_examples]
    if not train_c.examples or not val_c.examples:
        raise DataError("training and validation sets must be non-empty")
    vocab = build_vocab(train_c.examples, cfg.min_count)
    embeddings = None
    coverage = None
    if cfg.embeddings_path:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        pre = load_pretrained(cfg.embeddings_path, vocab, cfg.embedding_dim, rng)
        embeddings = pre.table
        coverage = {"found": pre.found, "missing": pre.missing}
    return train_c, val_c, test_c, vocab, embeddings, coverage


def cmd_train(args) -> int:
    cfg = cfgmod.load(args.config, args.set)
    train_c, val_c, test_c, vocab, embeddings, coverage = _load_data(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = NLIModel(cfg.model_config(len(vocab), train_c.num_classes), embeddings)
    started = time.perf_counter()
    report = train(model, train_c.examples, val_c.examples, vocab, cfg.train_config(), out / "metrics.csv")
    test_acc = evaluate(model, test_c.examples, vocab)[0] if test_c and test_c.examples else None
    checkpoint.save(out / "model.ckpt", model, vocab, train_c.label_names)
    summary = {
        "best_epoch": report.best_epoch,
        "best_val_acc": report.best_val_acc,
        "best_val_loss": report.best_val_loss,
        "test_acc": test_acc,
        "test_acc_note": "test accuracy of the best-validation checkpoint",
        "epochs_run": report.epochs_run,
        "stopped_early": report.stopped_early,
        "skipped_no_consensus": {"train": train_c.skipped, "val": val_c.skipped},
        "embedding_coverage": coverage,
        "wall_seconds": round(time.perf_counter() - started, 3),
        "config": cfg.values,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"val_acc={_fmt(report.best_val_acc)} test_acc={_fmt(test_acc)}")
    return EXIT_OK


def _parse_models(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = (int(x) for x in part.split(".."))
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    return out


def _parse_rates(text: str) -> list[float]:
    out: list[float] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = (float(x) for x in part.split(".."))
            n = int(round((hi - lo) / 0.1))
            out.extend(round(lo + 0.1 * i, 10) for i in range(n + 1))
        elif part:
            out.append(float(part))
    return out


def cmd_grid(args) -> int:
    cfg = cfgmod.load(args.config, args.set)
    try:
        models = _parse_models(args.models)
        rates = _parse_rates(args.rates)
    except ValueError as exc:
        raise ConfigError(f"bad --models/--rates value: {exc}") from None
    train_c, val_c, _, vocab, embeddings, _ = _load_data(cfg)
    kwargs = cfg.model_kwargs()
    kwargs.pop("placement"), kwargs.pop("drop_rate"), kwargs.pop("seed")
    kwargs.update(vocab_size=len(vocab), num_classes=train_c.num_classes)
    grid = grid_search(train_c.examples, val_c.examples, vocab, kwargs, cfg.train_config(), models, rates,
                       out_dir=cfg.output_dir, parallel=args.parallel, embeddings=embeddings)
    sys.stdout.write(grid.to_csv())
    failed = sum(1 for c in grid.cells.values() if c.error)
    if failed:
        print(f"{failed} cell(s) failed; see {Path(cfg.output_dir) / 'failures.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = checkpoint.load(args.checkpoint)
    corpus = load_examples(args.data, args.format, ckpt.label_names)
    if not corpus.examples:
        raise DataError("no examples to evaluate", args.data)
    acc, loss = evaluate(ckpt.model, corpus.examples, ckpt.vocab)
    print(f"accuracy={acc:.6f} loss={loss:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    sizes = {"small": {}, "medium": {"hidden": 6, "vocab_size": 16, "embedding_dim": 7, "max_len": 5, "batch": 3}}
    results = tiny_model_suite(seed=args.seed, **sizes[args.size])
    ok = True
    for mode, groups in results.items():
        for name, err in groups.items():
            status = "ok" if err < GRADCHECK_TOL else "FAIL"
            ok &= err < GRADCHECK_TOL
            print(f"{mode:<5} {name:<28} max_rel_err={err:.3e} {status}")
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    corpus = synthetic_nli(args.n, args.seed, args.label_noise)
    write_jsonl(args.output, corpus.examples, corpus.label_names)
    print(f"wrote {len(corpus)} examples to {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="dropnet", description="BiLSTM attention NLI model with placeable dropout.",
                                epilog=cfgmod.schema_help(), formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", nargs="?", help="flat key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key")

    sp = sub.add_parser("train", help="train one model", epilog=cfgmod.schema_help(), formatter_class=fmt)
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("grid", help="placement x dropout-rate sweep", epilog=cfgmod.schema_help(), formatter_class=fmt)
    with_config(sp)
    sp.add_argument("--models", default=f"{DEFAULT_MODELS[0]}..{DEFAULT_MODELS[-1]}", help="model ids, e.g. 1..13 or 2,5")
    sp.add_argument("--rates", default=",".join(str(r) for r in DEFAULT_RATES), help="drop rates, e.g. 0.1,0.2 or 0.1..0.5")
    sp.add_argument("--parallel", type=int, default=1, help="worker processes for grid cells")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("--format", choices=("jsonl", "tsv"), default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    sp.add_argument("--size", choices=("small", "medium"), default="small")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="write a synthetic SNLI-format corpus")
    sp.add_argument("output")
    sp.add_argument("-n", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--label-noise", type=float, default=0.0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointVersionError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
