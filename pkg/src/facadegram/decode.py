"""Grammar-masked autoregressive inference.

A small automaton tracks, for any partial output sequence, which tokens can
still be extended to a complete executable tree within the length budget: a
BFS frontier of unexpanded symbols plus a cursor inside the current
production group. At each generation step the predicted distribution has its
invalid entries zeroed and is renormalized, so every decode parses, validates
and executes by construction.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import grammar, tokenizer
from .grammar import AXIOM, Node, PRODS_BY_LHS, PROD_BY_ID, RectLayout, default_sizing
from .model import SeqModel
from .tokenizer import TokenSeq, Vocabulary


class IllegalTransition(Exception):
    """A token outside the validity mask was fed to the automaton."""


class EmptyMask(Exception):
    """No token is valid in this state (caller bug)."""


class LengthBudgetExhausted(Exception):
    """No complete tree fits in the remaining token budget."""


@dataclass(frozen=True)
class DecodeState:
    """Automaton state: a pure value determined by the token prefix.

    ``queue`` is the BFS frontier; ``queue[0]`` is the symbol whose group is
    being emitted. ``cur_prod``/``cur_args`` track group progress (None
    between groups). ``emitted`` counts tokens consumed including BOS;
    ``queue_min`` caches the summed minimal completion cost of the frontier.
    """

    queue: tuple[str, ...]
    cur_prod: str | None
    cur_args: tuple
    emitted: int
    queue_min: int
    done: bool = False


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 0.0  # 0 = greedy argmax
    seed: int = 0
    max_tokens: int | None = None  # defaults to the model's output limit


class GrammarAutomaton:
    """Validity automaton bound to one vocabulary and output-length budget."""

    def __init__(self, vocab: Vocabulary, max_tokens: int = tokenizer.DEFAULT_MAX_OUTPUT_TOKENS):
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.min_tokens = self._min_token_table()

    def _min_token_table(self) -> dict[str, int]:
        # Minimal tokens (group + descendants, incl. each group's SEP) to fully
        # expand a symbol; fixpoint over the acyclic symbol graph.
        INF = 1 << 30
        table = {s: INF for s in PRODS_BY_LHS}
        for _ in range(len(PRODS_BY_LHS) + 2):
            changed = False
            for sym, prods in PRODS_BY_LHS.items():
                best = table[sym]
                for p in prods:
                    cost = self._min_group_cost(p, table)
                    if cost < best:
                        best = cost
                if best < table[sym]:
                    table[sym] = best
                    changed = True
            if not changed:
                break
        return table

    @staticmethod
    def _min_group_cost(p, table) -> int:
        group = 2  # production token + SEP
        children = 0
        if p.terminal is not None:
            pass
        elif p.children:
            children = sum(table[c] for c in p.children)
        else:
            lo = p.count_range[0]
            group += 1  # count token
            if p.child_options:
                group += lo
                children = lo * min(table[o] for o in p.child_options)
            else:
                children = lo * table[p.child_symbol]
        return group + children

    def initial_state(self) -> DecodeState:
        # The BOS token is already consumed (emitted=1).
        return DecodeState(
            queue=(AXIOM,), cur_prod=None, cur_args=(), emitted=1,
            queue_min=self.min_tokens[AXIOM])

    def min_completion(self, state: DecodeState) -> int:
        """Tokens still required to finish the sequence, EOS included."""
        if state.done:
            return 0
        if state.cur_prod is None:
            return state.queue_min + 1
        p = PROD_BY_ID[state.cur_prod]
        args = state.cur_args
        rest = state.queue_min - self.min_tokens[state.queue[0]]
        remaining_args = 0
        children = 0
        if p.terminal is not None:
            pass
        elif p.children:
            children = sum(self.min_tokens[c] for c in p.children)
        else:
            lo = p.count_range[0]
            if not args:
                remaining_args = 1
                if p.child_options:
                    remaining_args += lo
                    children = lo * min(self.min_tokens[o] for o in p.child_options)
                else:
                    children = lo * self.min_tokens[p.child_symbol]
            else:
                n = args[0]
                if p.child_options:
                    chosen = args[1:]
                    remaining_args = n - len(chosen)
                    children = sum(self.min_tokens[k] for k in chosen)
                    children += remaining_args * min(self.min_tokens[o] for o in p.child_options)
                else:
                    children = n * self.min_tokens[p.child_symbol]
        return remaining_args + 1 + children + rest + 1  # + SEP + EOS

    def _args_complete(self, p, args) -> bool:
        if not p.has_count:
            return True
        if not args:
            return False
        if p.child_options:
            return len(args) == 1 + args[0]
        return True

    def _transitions(self, state: DecodeState) -> list[tuple[int, DecodeState]]:
        """All (token_id, next_state) pairs legal before budget filtering."""
        v = self.vocab
        out: list[tuple[int, DecodeState]] = []
        if state.done:
            return out
        emitted = state.emitted + 1
        if state.cur_prod is None:
            if not state.queue:
                out.append((v.eos_id, replace(state, emitted=emitted, done=True)))
                return out
            for p in PRODS_BY_LHS[state.queue[0]]:
                out.append((v.prod_id(p.id),
                            replace(state, cur_prod=p.id, cur_args=(), emitted=emitted)))
            return out
        p = PROD_BY_ID[state.cur_prod]
        args = state.cur_args
        if not self._args_complete(p, args):
            if not args:
                lo, hi = p.count_range
                for c in range(lo, hi + 1):
                    out.append((v.int_id(c),
                                replace(state, cur_args=(c,), emitted=emitted)))
            else:
                for opt in p.child_options:
                    out.append((v.kind_id(opt),
                                replace(state, cur_args=args + (opt,), emitted=emitted)))
            return out
        children = p.child_symbols(args)
        queue = state.queue[1:] + children
        qmin = state.queue_min - self.min_tokens[state.queue[0]]
        qmin += sum(self.min_tokens[c] for c in children)
        out.append((v.sep_id, DecodeState(
            queue=queue, cur_prod=None, cur_args=(), emitted=emitted, queue_min=qmin)))
        return out

    def valid_next_tokens(self, state: DecodeState) -> dict[int, DecodeState]:
        """Token ids whose successor state still completes within budget."""
        remaining = self.max_tokens - state.emitted
        result = {}
        for tok, nxt in self._transitions(state):
            if self.min_completion(nxt) <= remaining - 1:
                result[tok] = nxt
        return result

    def valid_token_ids(self, state: DecodeState) -> list[int]:
        return sorted(self.valid_next_tokens(state))

    def advance(self, state: DecodeState, token_id: int) -> DecodeState:
        nxt = self.valid_next_tokens(state).get(token_id)
        if nxt is None:
            name = self.vocab.tokens[token_id] if 0 <= token_id < len(self.vocab) else token_id
            raise IllegalTransition(f"token {name!r} not valid in state {state}")
        return nxt

    def next_local_pos(self, state: DecodeState) -> int:
        """Local index the next emitted token will carry (matches encode_tree)."""
        if state.cur_prod is None:
            return 0  # production token, or EOS
        p = PROD_BY_ID[state.cur_prod]
        if self._args_complete(p, state.cur_args):
            return 1 + len(state.cur_args)  # SEP closes the group
        return 1 + len(state.cur_args)


def nullify_and_renormalize(probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero invalid entries and rescale the rest to sum to one.

    If every valid entry is (numerically) zero, returns the uniform
    distribution over the valid set.
    """
    probs = np.asarray(probs, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != probs.shape:
        raise ValueError("mask and distribution shapes differ")
    if not mask.any():
        raise EmptyMask("no valid tokens to renormalize over")
    out = np.where(mask, probs, 0.0)
    total = out.sum()
    if total < 1e-12:
        out = mask / mask.sum()
    else:
        out = out / total
    return out


def infer_procedures(
    model: SeqModel,
    layouts: list[RectLayout],
    vocab: Vocabulary,
    cfg: DecodeConfig = DecodeConfig(),
    prefixes: list[tuple[int, ...] | None] | None = None,
) -> list[Node]:
    """Batched grammar-masked greedy/sampled decoding; one tree per layout."""
    if not layouts:
        return []
    if prefixes is not None and len({len(p or ()) for p in prefixes}) > 1:
        # Batched stepping needs equal-length starts; fall back to singles.
        return [
            infer_procedures(model, [l], vocab, cfg, prefixes=[p])[0]
            for l, p in zip(layouts, prefixes)
        ]
    budget = min(cfg.max_tokens or model.config.max_output_len, model.config.max_output_len)
    automaton = GrammarAutomaton(vocab, max_tokens=budget)

    seqs = [tokenizer.encode_layout(l, vocab, max_tokens=model.config.max_input_len)
            for l in layouts]
    b = len(seqs)
    lmax = max(len(s) for s in seqs)
    enc_tok = torch.zeros((b, lmax), dtype=torch.int64)
    enc_g = torch.zeros((b, lmax), dtype=torch.int64)
    enc_l = torch.zeros((b, lmax), dtype=torch.int64)
    enc_pad = torch.ones((b, lmax), dtype=torch.bool)
    for i, s in enumerate(seqs):
        n = len(s)
        enc_tok[i, :n] = torch.tensor(s.tokens, dtype=torch.int64)
        enc_g[i, :n] = torch.tensor(s.global_pos, dtype=torch.int64)
        enc_l[i, :n] = torch.tensor(s.local_pos, dtype=torch.int64)
        enc_pad[i, :n] = False

    model.eval()
    with torch.no_grad():
        memory = model.encode_batch(enc_tok, enc_g, enc_l, enc_pad)

        states = []
        token_lists: list[list[int]] = []
        local_lists: list[list[int]] = []
        rngs = [random.Random((cfg.seed, i)) for i in range(b)]
        for i in range(b):
            st = automaton.initial_state()
            toks, locs = [vocab.bos_id], [0]
            if prefixes and prefixes[i]:
                pre = list(prefixes[i])
                if pre[:1] == [vocab.bos_id]:
                    pre = pre[1:]
                for t in pre:
                    locs.append(automaton.next_local_pos(st))
                    st = automaton.advance(st, t)
                    toks.append(t)
            if automaton.min_completion(st) > budget - st.emitted:
                raise LengthBudgetExhausted(
                    f"no tree fits in {budget} tokens from the given prefix")
            states.append(st)
            token_lists.append(toks)
            local_lists.append(locs)

        caches = model.new_caches()
        fed = 0  # tokens already inside the cache
        while True:
            active = [i for i in range(b) if not states[i].done]
            if not active:
                break
            width = max(len(token_lists[i]) for i in range(b)) - fed
            step_tok = torch.zeros((b, width), dtype=torch.int64)
            step_g = torch.zeros((b, width), dtype=torch.int64)
            step_l = torch.zeros((b, width), dtype=torch.int64)
            for i in range(b):
                for j in range(width):
                    pos = fed + j
                    if pos < len(token_lists[i]):
                        step_tok[i, j] = token_lists[i][pos]
                        step_g[i, j] = pos
                        step_l[i, j] = local_lists[i][pos]
            logits = model.decode_batch(memory, enc_pad, step_tok, step_g, step_l,
                                        caches=caches, pos_offset=fed)
            fed += width
            for i in active:
                row = logits[i, len(token_lists[i]) - 1 - (fed - width)]
                valid = automaton.valid_next_tokens(states[i])
                if not valid:
                    raise LengthBudgetExhausted("automaton has no valid continuation")
                if cfg.temperature > 0:
                    scaled = (row / cfg.temperature).double()
                    probs = torch.softmax(scaled, dim=-1).numpy()
                else:
                    probs = torch.softmax(row.double(), dim=-1).numpy()
                mask = np.zeros(len(vocab), dtype=bool)
                mask[list(valid)] = True
                dist = nullify_and_renormalize(probs, mask)
                if cfg.temperature > 0:
                    choice = rngs[i].choices(range(len(vocab)), weights=dist)[0]
                else:
                    choice = int(dist.argmax())
                locpos = automaton.next_local_pos(states[i])
                states[i] = valid[choice]
                token_lists[i].append(choice)
                local_lists[i].append(locpos)

    trees = []
    for toks in token_lists:
        tree = tokenizer.decode_tree(tuple(toks), vocab)
        trees.append(default_sizing(tree))
    return trees


def infer_procedure(
    model: SeqModel,
    layout: RectLayout,
    vocab: Vocabulary,
    cfg: DecodeConfig = DecodeConfig(),
    prefix: tuple[int, ...] | None = None,
) -> Node:
    """Infer the derivation tree of one layout; sizing set to defaults."""
    return infer_procedures(model, [layout], vocab, cfg, prefixes=[prefix])[0]
