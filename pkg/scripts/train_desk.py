"""Desk-scale end-to-end run: generate, train, measure held-out edit distance.

Trains the default 256-wide 4+4 model on 5,000 generated facades within a
wall-clock budget, then greedily decodes 200 held-out layouts and reports the
tree edit distance distribution. Results (checkpoint + report.json) land in
--out and are reused on re-runs unless --force is given.

Learning rate: 1e-4 here (the faster of the two known-good settings; the
library default stays at the smaller 1e-5), chosen so the time-boxed CPU run
reaches a useful optimum.
"""

import argparse
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import torch

from facadegram import evaluation, generator, tokenizer
from facadegram.decode import DecodeConfig, infer_procedures
from facadegram.model import ModelConfig, SeqModel, load_checkpoint
from facadegram.train import TrainConfig, train

MASTER_SEED = 2024


def run_config(args) -> dict:
    return {
        "samples": args.samples,
        "heldout": args.heldout,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "max_minutes": args.max_minutes,
        "embed_dim": args.embed_dim,
        "layers": args.layers,
        "seed": args.seed,
    }


def desk_run(args) -> dict:
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    ckpt_path = os.path.join(args.out, "best.ckpt")
    wanted = run_config(args)
    if not args.force and os.path.exists(report_path) and os.path.exists(ckpt_path):
        with open(report_path) as f:
            report = json.load(f)
        if report.get("run_config") == wanted:
            print(f"reusing cached run in {args.out}")
            return report

    t_start = time.time()
    torch.manual_seed(args.seed)
    print(f"generating {args.samples} train + {args.heldout} held-out records")
    records = [generator.make_record(MASTER_SEED, i) for i in range(args.samples)]
    heldout = [generator.make_record(MASTER_SEED, args.samples + i)
               for i in range(args.heldout)]

    vocab = tokenizer.build_vocabulary(100)
    model = SeqModel(ModelConfig(vocab_size=len(vocab), embed_dim=args.embed_dim,
                                 enc_layers=args.layers, dec_layers=args.layers))
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                      epochs=args.epochs, seed=args.seed, val_fraction=0.04,
                      patience=5, max_minutes=args.max_minutes, checkpoint_dir=args.out)
    print(f"training {model.parameter_count} params, budget {args.max_minutes} min")
    t0 = time.time()
    train_report = train(model, records, cfg, vocab)
    print(f"trained {train_report.epochs_run} epochs in {(time.time()-t0)/60:.1f} min; "
          f"val losses: {[round(v, 4) for v in train_report.val_losses]}")

    best_model, best_vocab = load_checkpoint(ckpt_path)
    print(f"decoding {len(heldout)} held-out layouts")
    t0 = time.time()
    teds = []
    for i in range(0, len(heldout), args.decode_batch):
        chunk = heldout[i:i + args.decode_batch]
        trees = infer_procedures(best_model, [r.layout for r in chunk], best_vocab,
                                 DecodeConfig())
        teds += [evaluation.tree_edit_distance(t, r.tree) for t, r in zip(trees, chunk)]
    print(f"decoded in {(time.time()-t0)/60:.1f} min")

    teds_sorted = sorted(teds)
    report = {
        "run_config": wanted,
        "train_losses": train_report.train_losses,
        "val_losses": train_report.val_losses,
        "epochs_run": train_report.epochs_run,
        "best_epoch": train_report.best_epoch,
        "best_val_loss": train_report.best_val_loss,
        "train_wall_seconds": train_report.wall_seconds,
        "teds": teds,
        "median_ted": teds_sorted[len(teds) // 2],
        "mean_ted": sum(teds) / len(teds),
        "ted_zero_fraction": sum(1 for d in teds if d == 0) / len(teds),
        "total_wall_seconds": time.time() - t_start,
    }
    with open(report_path, "w") as f:
        json.dump(report, f, indent=1)
    print(f"median TED {report['median_ted']}  mean {report['mean_ted']:.2f}  "
          f"zero {report['ted_zero_fraction']:.2%}  total {(time.time()-t_start)/60:.1f} min")
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..",
                                                 ".desk_cache"))
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--heldout", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--max-minutes", type=float, default=145.0)
    p.add_argument("--embed-dim", type=int, default=256)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decode-batch", type=int, default=50)
    p.add_argument("--force", action="store_true")
    return p


if __name__ == "__main__":
    desk_run(build_parser().parse_args())
