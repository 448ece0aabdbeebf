"""Command-line entry point.

Subcommands: generate, train, infer, optimize, eval, render, serve. Global
flags (--seed, --config, --log-level) come before the subcommand. A config
file supplies per-subcommand defaults as ``subcommand.option = value`` lines
(# comments allowed); explicit command-line flags win. The FACAID_MODEL
environment variable supplies the default checkpoint path wherever a model
is needed.
"""

from __future__ import annotations

import argparse
import ast
import csv
import json
import logging
import os
import sys

from . import evaluation, generator, grammar, render, service, sizing
from . import tokenizer as tok
from .decode import DecodeConfig, infer_procedure, infer_procedures
from .model import ModelConfig, SeqModel, load_checkpoint, save_checkpoint
from .service import MODEL_ENV_VAR, ServiceConfig
from .train import TrainConfig, tokenize_records, train

log = logging.getLogger("facadegram")


def load_config_file(path: str) -> dict[str, dict[str, object]]:
    """Parse ``section.key = value`` lines into per-subcommand defaults."""
    out: dict[str, dict[str, object]] = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line or "." not in line.split("=", 1)[0]:
                raise ValueError(f"{path}:{ln}: expected 'section.key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            section, option = key.split(".", 1)
            try:
                value = ast.literal_eval(raw)
            except (ValueError, SyntaxError):
                value = raw
            out.setdefault(section, {})[option.replace("-", "_")] = value
    return out


def _default_checkpoint() -> str | None:
    return os.environ.get(MODEL_ENV_VAR)


def _load_model(path: str | None):
    path = path or _default_checkpoint()
    if not path:
        raise SystemExit(f"no checkpoint given; pass --model or set ${MODEL_ENV_VAR}")
    return load_checkpoint(path)


def _read_json(path: str):
    with open(path) as f:
        return json.load(f)


def _write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f)
        f.write("\n")


def cmd_generate(args) -> int:
    if args.style_policy != "default":
        raise SystemExit(f"unknown style policy {args.style_policy!r}")
    stats = generator.write_dataset_jsonl(args.out, args.count, args.seed)
    log.info("wrote %d records to %s", stats.count, args.out)
    if args.stats:
        _write_json(args.stats, stats.to_json())
    return 0


def cmd_train(args) -> int:
    records = list(generator.read_dataset_jsonl(args.data))
    vocab = tok.build_vocabulary(args.resolution)
    model = SeqModel(ModelConfig(
        vocab_size=len(vocab), embed_dim=args.embed_dim, enc_layers=args.enc_layers,
        dec_layers=args.dec_layers, heads=args.heads, dropout=args.dropout,
        resolution=args.resolution))
    cfg = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed, val_fraction=args.val_fraction, patience=args.patience,
        max_minutes=args.max_minutes, checkpoint_dir=args.out)
    report = train(model, records, cfg, vocab)
    for e, (tr, vl) in enumerate(zip(report.train_losses, report.val_losses)):
        log.info("epoch %d: train %.5f val %.5f", e, tr, vl)
    save_checkpoint(os.path.join(args.out, "final.ckpt"), model, vocab)
    _write_json(os.path.join(args.out, "train_report.json"), {
        "train_losses": report.train_losses, "val_losses": report.val_losses,
        "epochs_run": report.epochs_run, "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss, "wall_seconds": report.wall_seconds,
    })
    return 0


def cmd_infer(args) -> int:
    model, vocab = _load_model(args.model)
    layout = grammar.layout_from_json(_read_json(args.layout))
    prefix = None
    if args.resume_prefix:
        prefix = tuple(_read_json(args.resume_prefix)["tokens"])
    tree = infer_procedure(model, layout, vocab,
                           DecodeConfig(temperature=args.temperature, seed=args.seed),
                           prefix=prefix)
    _write_json(args.out, grammar.tree_to_json(tree))
    return 0


def cmd_optimize(args) -> int:
    tree = grammar.tree_from_json(_read_json(args.tree))
    target = grammar.layout_from_json(_read_json(args.target))
    cfg = sizing.OptimizeConfig(
        raster_w=args.raster, raster_h=args.raster,
        step_size=args.step_size, max_iterations=args.max_iterations)
    fitted, trace = sizing.optimize_sizing(grammar.default_sizing(tree), target, cfg)
    _write_json(args.out, grammar.tree_to_json(fitted))
    if args.trace:
        with open(args.trace, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "loss"])
            writer.writerows(enumerate(trace))
    err = evaluation.pixel_classification_error(grammar.execute(fitted), target, 128)
    log.info("final loss %.6f, pixel error %.4f", trace[-1], err)
    return 0


def cmd_eval(args) -> int:
    model, vocab = _load_model(args.model)
    records = list(generator.read_dataset_jsonl(args.testset))
    if args.limit:
        records = records[:args.limit]
    layouts = [r.layout for r in records]
    trees = infer_procedures(model, layouts, vocab, DecodeConfig(seed=args.seed))
    teds = [evaluation.tree_edit_distance(t, r.tree) for t, r in zip(trees, records)]
    normalized = [d / grammar.tree_size(r.tree) for d, r in zip(teds, records)]
    freq = evaluation.production_frequency([r.tree for r in records], recon=trees)

    err_records = records[:args.optimize_count]
    errors = []
    for rec, tree in zip(err_records, trees[:args.optimize_count]):
        fitted, _ = sizing.optimize_sizing(
            grammar.default_sizing(tree), rec.layout,
            sizing.OptimizeConfig(max_iterations=args.optimize_iterations))
        errors.append(evaluation.pixel_classification_error(
            grammar.execute(fitted), rec.layout, 128))

    levels = [float(x) for x in args.noise_levels.split(",")]
    curve = evaluation.noise_robustness_curve(
        model, records[:args.noise_count], levels, args.seed, vocab)

    report = {
        "num_samples": len(records),
        "ted": {
            "values": teds,
            "mean": sum(teds) / len(teds),
            "median": sorted(teds)[len(teds) // 2],
            "normalized_mean": sum(normalized) / len(normalized),
            "zero_fraction": sum(1 for d in teds if d == 0) / len(teds),
        },
        "frequency": freq.to_json(),
        "pixel_error": {"values": errors,
                        "mean": sum(errors) / len(errors) if errors else None},
        "noise_curve": [{"level": l, "mean_ted": m, "count": n} for l, m, n in curve],
    }
    _write_json(args.report, report)
    log.info("median TED %s over %d samples", report["ted"]["median"], len(records))
    return 0


def cmd_render(args) -> int:
    layout = grammar.layout_from_json(_read_json(args.layout))
    svg = render.render_svg(layout)
    with open(args.out, "w") as f:
        f.write(svg)
    return 0


def cmd_serve(args) -> int:
    static = args.static_dir
    if static is None and os.path.isdir("frontend"):
        static = "frontend"
    cfg = ServiceConfig(host=args.host, port=args.port, checkpoint=args.model,
                        cors=args.cors, max_request_bytes=args.max_request_bytes,
                        static_dir=static)
    service.serve(cfg)
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="facadegram", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="global random seed")
    parser.add_argument("--config", help="key-value config file with per-subcommand defaults")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)
    parsers: dict[str, argparse.ArgumentParser] = {}

    p = parsers["generate"] = sub.add_parser("generate", help="write a JSONL dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--style-policy", default="default")
    p.add_argument("--out", required=True)
    p.add_argument("--stats", help="optional stats JSON path")
    p.set_defaults(func=cmd_generate)

    p = parsers["train"] = sub.add_parser("train", help="train a model on a JSONL dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resolution", type=int, default=tok.DEFAULT_RESOLUTION)
    p.add_argument("--embed-dim", type=int, default=256)
    p.add_argument("--enc-layers", type=int, default=4)
    p.add_argument("--dec-layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--max-minutes", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = parsers["infer"] = sub.add_parser("infer", help="layout JSON -> procedure JSON")
    p.add_argument("--model", help=f"checkpoint (default ${MODEL_ENV_VAR})")
    p.add_argument("--layout", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--resume-prefix", help="JSON file with {'tokens': [...]} to resume from")
    p.set_defaults(func=cmd_infer)

    p = parsers["optimize"] = sub.add_parser("optimize", help="fit sizing to a target layout")
    p.add_argument("--tree", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="CSV loss trace path")
    p.add_argument("--raster", type=int, default=128)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--max-iterations", type=int, default=2000)
    p.set_defaults(func=cmd_optimize)

    p = parsers["eval"] = sub.add_parser("eval", help="evaluate a model on a testset")
    p.add_argument("--model", help=f"checkpoint (default ${MODEL_ENV_VAR})")
    p.add_argument("--testset", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--optimize-count", type=int, default=10)
    p.add_argument("--optimize-iterations", type=int, default=600)
    p.add_argument("--noise-levels", default="0,0.1")
    p.add_argument("--noise-count", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = parsers["render"] = sub.add_parser("render", help="layout JSON -> SVG")
    p.add_argument("--layout", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = parsers["serve"] = sub.add_parser("serve", help="run the local HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--model", help=f"checkpoint (default ${MODEL_ENV_VAR})")
    p.add_argument("--cors", action="store_true")
    p.add_argument("--max-request-bytes", type=int, default=4_000_000)
    p.add_argument("--static-dir", help="directory with the browser UI")
    p.set_defaults(func=cmd_serve)

    return parser, parsers


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, parsers = build_parser()

    # Apply config-file defaults before the real parse so explicit flags win.
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        for section, options in load_config_file(cfg_path).items():
            if section in parsers:
                parsers[section].set_defaults(**options)

    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
