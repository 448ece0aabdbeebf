"""Token sequences for layouts (model input) and derivation trees (output).

Input: each rect becomes 5 tokens (label, x-bin, y-bin, w-bin, h-bin) after
sorting rects by bottom-left corner (Y major, then X); coordinates are
quantized to ``round(v * R)`` bins. Output: nodes in breadth-first order,
each a group ``[production, structural args..., SEP]``, wrapped in BOS/EOS.
Both sides carry a global position per token plus a local index inside the
rect/node group.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import grammar
from .grammar import (
    InvalidTree,
    Node,
    PROD_BY_ID,
    PRODUCTIONS,
    Rect,
    RectLayout,
    TERMINALS,
    canonical_rect_order,
)

RESOLUTIONS = (50, 100, 200, 500, 1000)
DEFAULT_RESOLUTION = 100

# Token budgets. The input budget admits layouts of up to 153 rects; the
# default generator policy keeps every facade inside both budgets.
DEFAULT_MAX_INPUT_TOKENS = 768
DEFAULT_MAX_OUTPUT_TOKENS = 768

COUNT_TOKEN_RANGE = (1, 8)


class TooManyRects(Exception):
    """Layout would exceed the maximum input sequence length."""


class MalformedSequence(Exception):
    """Token sequence cannot be decoded back into a layout or tree."""


def _kind_options() -> tuple[str, ...]:
    seen: list[str] = []
    for p in PRODUCTIONS:
        for opt in p.child_options:
            if opt not in seen:
                seen.append(opt)
    return tuple(seen)


KIND_OPTIONS = _kind_options()


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token string <-> id map for one tokenizer resolution."""

    resolution: int
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids[token]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    def label_id(self, label: str) -> int:
        return self._ids["T:" + label]

    def bin_id(self, b: int) -> int:
        if not 0 <= b <= self.resolution:
            raise ValueError(f"bin {b} outside [0, {self.resolution}]")
        return self._ids["B:0"] + b

    def bin_value(self, token_id: int) -> int:
        base = self._ids["B:0"]
        if not base <= token_id <= base + self.resolution:
            raise MalformedSequence(f"token {token_id} is not a coordinate bin")
        return token_id - base

    def is_bin(self, token_id: int) -> bool:
        base = self._ids["B:0"]
        return base <= token_id <= base + self.resolution

    def prod_id(self, prod: str) -> int:
        return self._ids[prod]

    def int_id(self, n: int) -> int:
        lo, hi = COUNT_TOKEN_RANGE
        if not lo <= n <= hi:
            raise ValueError(f"count {n} outside [{lo}, {hi}]")
        return self._ids[f"I:{n}"]

    def kind_id(self, symbol: str) -> int:
        return self._ids["K:" + symbol]

    def label_of(self, token_id: int) -> str:
        tok = self.tokens[token_id]
        if not tok.startswith("T:"):
            raise MalformedSequence(f"token {tok!r} is not a terminal label")
        return tok[2:]

    def to_json(self) -> dict:
        return {"resolution": self.resolution, "tokens": list(self.tokens)}

    @staticmethod
    def from_json(obj: dict) -> "Vocabulary":
        return Vocabulary(int(obj["resolution"]), tuple(obj["tokens"]))


def build_vocabulary(resolution: int = DEFAULT_RESOLUTION) -> Vocabulary:
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution {resolution} not in {RESOLUTIONS}")
    tokens: list[str] = ["<pad>", "<bos>", "<eos>", "<sep>"]
    tokens += ["T:" + t for t in TERMINALS]
    tokens += [f"B:{b}" for b in range(resolution + 1)]
    tokens += [p.id for p in PRODUCTIONS]
    lo, hi = COUNT_TOKEN_RANGE
    tokens += [f"I:{n}" for n in range(lo, hi + 1)]
    tokens += ["K:" + s for s in KIND_OPTIONS]
    return Vocabulary(resolution, tuple(tokens))


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[int, ...]
    global_pos: tuple[int, ...]
    local_pos: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def _quantize(v: float, r: int) -> int:
    b = int(v * r + 0.5)  # round half up; symmetric inputs are non-negative
    return min(max(b, 0), r)


def encode_layout(
    layout: RectLayout,
    vocab: Vocabulary,
    max_tokens: int | None = DEFAULT_MAX_INPUT_TOKENS,
    order: str = "canonical",
    seed: int = 0,
) -> TokenSeq:
    """Tokenize a layout: 5 tokens per rect, canonical Y-then-X sort.

    ``order`` exists for sorting ablations: "canonical" (default), "random"
    (seeded shuffle), or "label" (group by label, groups alphabetical).
    """
    rects = canonical_rect_order(layout.rects)
    if order == "random":
        import random

        random.Random(seed).shuffle(rects)
    elif order == "label":
        rects.sort(key=lambda r: r.label)
    elif order != "canonical":
        raise ValueError(f"unknown order {order!r}")
    n = len(rects) * 5
    if max_tokens is not None and n > max_tokens:
        raise TooManyRects(f"{len(rects)} rects need {n} tokens > {max_tokens}")
    r = vocab.resolution
    tokens: list[int] = []
    for rect in rects:
        tokens.append(vocab.label_id(rect.label))
        tokens.append(vocab.bin_id(_quantize(rect.x, r)))
        tokens.append(vocab.bin_id(_quantize(rect.y, r)))
        tokens.append(vocab.bin_id(_quantize(rect.w, r)))
        tokens.append(vocab.bin_id(_quantize(rect.h, r)))
    return TokenSeq(
        tokens=tuple(tokens),
        global_pos=tuple(range(n)),
        local_pos=tuple(i % 5 for i in range(n)),
    )


def decode_layout(seq: TokenSeq | tuple[int, ...], vocab: Vocabulary) -> RectLayout:
    tokens = seq.tokens if isinstance(seq, TokenSeq) else tuple(seq)
    if len(tokens) % 5:
        raise MalformedSequence(f"length {len(tokens)} is not a multiple of 5")
    r = vocab.resolution
    rects = []
    for i in range(0, len(tokens), 5):
        label = vocab.label_of(tokens[i])
        x, y, w, h = (vocab.bin_value(t) / r for t in tokens[i + 1:i + 5])
        rects.append(Rect(label, x, y, w, h))
    return RectLayout(tuple(rects))


def _arg_token(vocab: Vocabulary, arg) -> int:
    if isinstance(arg, bool) or not isinstance(arg, (int, str)):
        raise InvalidTree(f"unsupported structural argument {arg!r}")
    if isinstance(arg, int):
        return vocab.int_id(arg)
    return vocab.kind_id(arg)


def encode_tree(tree: Node, vocab: Vocabulary) -> TokenSeq:
    """BFS-order groups ``[prod, args..., SEP]`` wrapped in BOS/EOS.

    Local positions restart at 0 on each group (SEP closes the group it
    belongs to); BOS and EOS carry local position 0. Sizing is not encoded.
    """
    tokens = [vocab.bos_id]
    local = [0]
    for node in grammar.iter_bfs(tree):
        spec = PROD_BY_ID.get(node.prod)
        if spec is None:
            raise InvalidTree(f"unknown production {node.prod!r}")
        syms = spec.child_symbols(node.structural)
        if len(node.children) != len(syms):
            raise InvalidTree(
                f"{spec.id}: expected {len(syms)} children, got {len(node.children)}")
        group = [vocab.prod_id(node.prod)]
        group += [_arg_token(vocab, a) for a in node.structural]
        group.append(vocab.sep_id)
        tokens += group
        local += list(range(len(group)))
    tokens.append(vocab.eos_id)
    local.append(0)
    return TokenSeq(tuple(tokens), tuple(range(len(tokens))), tuple(local))


def _parse_arg(vocab: Vocabulary, spec, pos: int, token: int):
    name = vocab.tokens[token] if 0 <= token < len(vocab) else None
    if pos == 0:
        if name is None or not name.startswith("I:"):
            raise MalformedSequence(f"{spec.id}: expected a count token, got {name!r}")
        return int(name[2:])
    if name is None or not name.startswith("K:"):
        raise MalformedSequence(f"{spec.id}: expected a child-kind token, got {name!r}")
    return name[2:]


def decode_tree(seq: TokenSeq | tuple[int, ...], vocab: Vocabulary) -> Node:
    """Rebuild the unique tree from a BFS token sequence; sizing left empty."""
    tokens = seq.tokens if isinstance(seq, TokenSeq) else tuple(seq)
    if not tokens or tokens[0] != vocab.bos_id:
        raise MalformedSequence("sequence must start with BOS")
    groups: list[tuple] = []  # (spec, structural)
    i = 1
    while True:
        if i >= len(tokens):
            raise MalformedSequence("early end: no EOS")
        if tokens[i] == vocab.eos_id:
            if i + 1 != len(tokens):
                raise MalformedSequence("trailing tokens after EOS")
            break
        name = vocab.tokens[tokens[i]] if 0 <= tokens[i] < len(vocab) else None
        spec = PROD_BY_ID.get(name) if name else None
        if spec is None:
            raise MalformedSequence(f"expected a production token, got {name!r}")
        i += 1
        args: list = []
        if spec.has_count:
            if i >= len(tokens):
                raise MalformedSequence("early end inside a group")
            args.append(_parse_arg(vocab, spec, 0, tokens[i]))
            i += 1
            if spec.child_options:
                for k in range(args[0]):
                    if i >= len(tokens):
                        raise MalformedSequence("early end inside a group")
                    args.append(_parse_arg(vocab, spec, 1 + k, tokens[i]))
                    i += 1
        if i >= len(tokens) or tokens[i] != vocab.sep_id:
            raise MalformedSequence(f"{spec.id}: group not closed by SEP")
        i += 1
        structural = tuple(args)
        spec.check_structural(structural)
        groups.append((spec, structural))
    if not groups:
        raise MalformedSequence("empty sequence: no production groups")

    # Link children by replaying the BFS frontier over the group list.
    child_ids: list[list[int]] = [[] for _ in groups]
    expected: list[str | None] = [None]  # symbol each upcoming group must derive
    nxt = 0
    for gi, (spec, structural) in enumerate(groups):
        if nxt >= len(expected):
            raise MalformedSequence(f"unexpected extra group {spec.id}")
        want = expected[nxt]
        nxt += 1
        if want is not None and spec.lhs != want:
            raise MalformedSequence(f"group {gi}: {spec.id} derives {spec.lhs}, expected {want}")
        for sym in spec.child_symbols(structural):
            expected.append(sym)
            parent = gi
            child_ids[parent].append(len(expected) - 1)
    if nxt != len(expected):
        raise MalformedSequence(
            f"dangling non-terminals: {len(expected) - nxt} children never derived")

    def build(gi: int) -> Node:
        spec, structural = groups[gi]
        return Node(
            prod=spec.id,
            structural=structural,
            sizing=(),
            children=tuple(build(c) for c in child_ids[gi]),
        )

    return build(0)
