"""Teacher-forcing training and likelihood evaluation.

Targets are the output sequence shifted by one; PAD positions are excluded
from the cross-entropy. Batches are built by length bucketing (sorted by
output length, fixed slices) and their order is shuffled per epoch from the
run seed, so a run is reproducible given the seed and thread count.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import tokenizer as tok
from .decode import GrammarAutomaton
from .generator import DatasetRecord
from .model import SeqModel, save_checkpoint
from .tokenizer import TokenSeq, Vocabulary


class Divergence(Exception):
    """Training loss became non-finite."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    """Defaults follow the reference setup (batch 32, learning rate 1e-5);
    weight decay, clipping and patience are engineering defaults."""

    learning_rate: float = 1e-5
    batch_size: int = 32
    epochs: int = 20
    weight_decay: float = 0.01
    seed: int = 0
    val_fraction: float = 0.1
    clip_norm: float = 1.0
    patience: int = 5
    max_minutes: float | None = None
    checkpoint_dir: str | None = None
    # Long batches are split into gradient-accumulation chunks once
    # batch_size * max_input_len exceeds this, capping peak activation
    # memory without changing the optimization (loss sums over chunks).
    chunk_token_limit: int = 13000


@dataclass
class TrainReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = -1
    best_val_loss: float = math.inf
    wall_seconds: float = 0.0
    stopped_early: bool = False


@dataclass(frozen=True)
class Pair:
    """One tokenized (layout, tree) example."""

    src: TokenSeq
    dst: TokenSeq


def tokenize_records(records, vocab: Vocabulary, max_input: int, max_output: int) -> list[Pair]:
    pairs = []
    for rec in records:
        src = tok.encode_layout(rec.layout, vocab, max_tokens=max_input)
        dst = tok.encode_tree(rec.tree, vocab)
        if len(dst) > max_output:
            raise ValueError(f"record {rec.id}: output length {len(dst)} > {max_output}")
        pairs.append(Pair(src, dst))
    return pairs


def _batch_tensors(pairs: list[Pair], pad_id: int):
    b = len(pairs)
    li = max(len(p.src) for p in pairs)
    lo = max(len(p.dst) for p in pairs)
    enc = torch.full((b, li), pad_id, dtype=torch.int64)
    enc_g = torch.zeros((b, li), dtype=torch.int64)
    enc_l = torch.zeros((b, li), dtype=torch.int64)
    enc_pad = torch.ones((b, li), dtype=torch.bool)
    dec = torch.full((b, lo), pad_id, dtype=torch.int64)
    dec_g = torch.zeros((b, lo), dtype=torch.int64)
    dec_l = torch.zeros((b, lo), dtype=torch.int64)
    for i, p in enumerate(pairs):
        n, m = len(p.src), len(p.dst)
        enc[i, :n] = torch.tensor(p.src.tokens, dtype=torch.int64)
        enc_g[i, :n] = torch.tensor(p.src.global_pos, dtype=torch.int64)
        enc_l[i, :n] = torch.tensor(p.src.local_pos, dtype=torch.int64)
        enc_pad[i, :n] = False
        dec[i, :m] = torch.tensor(p.dst.tokens, dtype=torch.int64)
        dec_g[i, :m] = torch.tensor(p.dst.global_pos, dtype=torch.int64)
        dec_l[i, :m] = torch.tensor(p.dst.local_pos, dtype=torch.int64)
    return enc, enc_g, enc_l, enc_pad, dec, dec_g, dec_l


def _batch_loss(model: SeqModel, tensors, pad_id: int) -> tuple[torch.Tensor, int]:
    enc, enc_g, enc_l, enc_pad, dec, dec_g, dec_l = tensors
    logits = model(enc, enc_g, enc_l, enc_pad,
                   dec[:, :-1], dec_g[:, :-1], dec_l[:, :-1])
    targets = dec[:, 1:]
    loss = torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
        ignore_index=pad_id, reduction="sum")
    n_tokens = int((targets != pad_id).sum())
    return loss, n_tokens


def _make_batches(indices: list[int], pairs: list[Pair], batch_size: int) -> list[list[int]]:
    by_len = sorted(indices, key=lambda i: (len(pairs[i].dst), len(pairs[i].src)))
    return [by_len[i:i + batch_size] for i in range(0, len(by_len), batch_size)]


def train(model: SeqModel, records: list[DatasetRecord], cfg: TrainConfig,
          vocab: Vocabulary) -> TrainReport:
    """Minimize mean next-token cross-entropy with AdamW; early stop on the
    validation loss. Checkpoints (latest + best) go to ``cfg.checkpoint_dir``."""
    if not records:
        raise ValueError("dataset is empty")
    pairs = tokenize_records(records, vocab,
                             model.config.max_input_len, model.config.max_output_len)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    order = rng.permutation(len(pairs))
    n_val = int(len(pairs) * cfg.val_fraction)
    val_idx = [int(i) for i in order[:n_val]]
    train_idx = [int(i) for i in order[n_val:]]
    if not train_idx:
        raise ValueError("no training examples left after the validation split")

    pad = vocab.pad_id
    batches = _make_batches(train_idx, pairs, cfg.batch_size)
    val_batches = _make_batches(val_idx, pairs, cfg.batch_size)

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    report = TrainReport()
    start = time.time()
    bad_epochs = 0
    for epoch in range(cfg.epochs):
        model.train()
        epoch_order = rng.permutation(len(batches))
        total_loss, total_tokens = 0.0, 0
        for bi in epoch_order:
            batch = [pairs[i] for i in batches[bi]]
            n_chunks = 1
            widest = max(len(p.src) for p in batch)
            while len(batch) * widest / n_chunks > cfg.chunk_token_limit and n_chunks < len(batch):
                n_chunks *= 2
            size = (len(batch) + n_chunks - 1) // n_chunks
            chunks = [batch[k:k + size] for k in range(0, len(batch), size)]
            batch_tokens = sum(len(p.dst) - 1 for p in batch)
            opt.zero_grad()
            batch_loss = 0.0
            for chunk in chunks:
                loss, n_tok = _batch_loss(model, _batch_tensors(chunk, pad), pad)
                scaled = loss / max(batch_tokens, 1)
                if not torch.isfinite(scaled):
                    report.wall_seconds = time.time() - start
                    raise Divergence(f"non-finite loss at epoch {epoch}", report)
                scaled.backward()
                batch_loss += float(loss.detach())
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            total_loss += batch_loss
            total_tokens += batch_tokens
        report.train_losses.append(total_loss / max(total_tokens, 1))

        model.eval()
        vloss, vtok = 0.0, 0
        with torch.no_grad():
            for batch_idx in val_batches:
                batch = [pairs[i] for i in batch_idx]
                loss, n_tok = _batch_loss(model, _batch_tensors(batch, pad), pad)
                vloss += float(loss)
                vtok += n_tok
        val = vloss / vtok if vtok else report.train_losses[-1]
        report.val_losses.append(val)
        report.epochs_run = epoch + 1

        if cfg.checkpoint_dir:
            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            save_checkpoint(os.path.join(cfg.checkpoint_dir, "latest.ckpt"), model, vocab,
                            extra={"epoch": epoch, "val_loss": val})
        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_epoch = epoch
            bad_epochs = 0
            if cfg.checkpoint_dir:
                save_checkpoint(os.path.join(cfg.checkpoint_dir, "best.ckpt"), model, vocab,
                                extra={"epoch": epoch, "val_loss": val})
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                report.stopped_early = True
                break
        if cfg.max_minutes is not None and (time.time() - start) / 60 > cfg.max_minutes:
            report.stopped_early = True
            break
    report.wall_seconds = time.time() - start
    return report


def nll(model: SeqModel, pairs: list[Pair], vocab: Vocabulary,
        mask_invalid: bool = False, batch_size: int = 32) -> float:
    """Mean per-token negative log likelihood of the ground-truth outputs.

    With ``mask_invalid`` the distribution at each position is renormalized
    over the grammar-valid tokens before scoring, mirroring masked inference.
    """
    if not pairs:
        raise ValueError("no pairs to score")
    automaton = GrammarAutomaton(vocab, max_tokens=model.config.max_output_len)
    pad = vocab.pad_id
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            enc, enc_g, enc_l, enc_pad, dec, dec_g, dec_l = _batch_tensors(chunk, pad)
            logits = model(enc, enc_g, enc_l, enc_pad,
                           dec[:, :-1], dec_g[:, :-1], dec_l[:, :-1]).double()
            logprobs = torch.log_softmax(logits, dim=-1)
            for bi, p in enumerate(chunk):
                toks = p.dst.tokens
                if mask_invalid:
                    state = automaton.initial_state()
                    for t in range(len(toks) - 1):
                        valid = automaton.valid_next_tokens(state)
                        row = logits[bi, t]
                        ids = torch.tensor(sorted(valid), dtype=torch.int64)
                        denom = torch.logsumexp(row[ids], dim=0)
                        total += float(denom - row[toks[t + 1]])
                        count += 1
                        state = valid[toks[t + 1]]
                else:
                    for t in range(len(toks) - 1):
                        total += -float(logprobs[bi, t, toks[t + 1]])
                        count += 1
    return total / count
