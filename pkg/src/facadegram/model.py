"""Encoder-decoder transformer over layout/tree token sequences.

The encoder turns the rect-token sequence into one context embedding per
token; the decoder generates tree tokens autoregressively, attending causally
to its own prefix and to the full encoder output via cross-attention. Token,
global-position and local-index embeddings are summed on both sides.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .grammar import grammar_hash
from .tokenizer import (
    DEFAULT_MAX_INPUT_TOKENS,
    DEFAULT_MAX_OUTPUT_TOKENS,
    TokenSeq,
    Vocabulary,
)

MAX_LOCAL_POS = 16  # covers rect groups (5) and the widest production group (11)

CHECKPOINT_FORMAT_VERSION = 1


class LengthExceeded(Exception):
    """Sequence is longer than the model's positional table."""


class CheckpointLoadFailure(Exception):
    """Checkpoint file is unreadable or inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    The dropout value is an engineering default (not tied to any reference
    result); the rest of the defaults follow the balanced wide-over-deep
    desk-scale setup.
    """

    vocab_size: int
    embed_dim: int = 256
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 8
    ff_mult: int = 4
    dropout: float = 0.1
    max_input_len: int = DEFAULT_MAX_INPUT_TOKENS
    max_output_len: int = DEFAULT_MAX_OUTPUT_TOKENS
    resolution: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, q_in, kv_in, bias=None, is_causal=False, kv_cache=None, static_kv=False):
        """bias: additive attention mask broadcastable to (B, 1, Lq, Lk).

        kv_cache: optional dict; new keys/values are appended under "k"/"v"
        and attention runs over the concatenation. With ``static_kv`` the
        cached keys/values are reused as-is (for cross-attention, whose
        memory never changes during generation).
        """
        q = self._split(self.q(q_in))
        if static_kv and kv_cache is not None and "k" in kv_cache:
            k, v = kv_cache["k"], kv_cache["v"]
        else:
            k = self._split(self.k(kv_in))
            v = self._split(self.v(kv_in))
            if kv_cache is not None:
                if not static_kv and "k" in kv_cache:
                    k = torch.cat([kv_cache["k"], k], dim=2)
                    v = torch.cat([kv_cache["v"], v], dim=2)
                kv_cache["k"], kv_cache["v"] = k, v
        # Dropout sits on the projected output, not the attention weights:
        # weight dropout would force the memory-hungry unfused kernel on CPU.
        y = torch.nn.functional.scaled_dot_product_attention(
            q, k, v, attn_mask=bias, is_causal=is_causal)
        b, _, lq, _ = y.shape
        return self.drop(self.out(y.transpose(1, 2).reshape(b, lq, -1)))


class _FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class _EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = _Attention(cfg.embed_dim, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.ff = _FeedForward(cfg.embed_dim, cfg.ff_mult, cfg.dropout)

    def forward(self, x, bias):
        h = self.ln1(x)
        x = x + self.attn(h, h, bias)
        x = x + self.ff(self.ln2(x))
        return x


class _DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.self_attn = _Attention(cfg.embed_dim, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.cross_attn = _Attention(cfg.embed_dim, cfg.heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.embed_dim)
        self.ff = _FeedForward(cfg.embed_dim, cfg.ff_mult, cfg.dropout)

    def forward(self, x, memory, self_bias, self_causal, cross_bias, cache=None):
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_bias, is_causal=self_causal,
                               kv_cache=None if cache is None else cache["self"])
        x = x + self.cross_attn(self.ln2(x), memory, cross_bias,
                                kv_cache=None if cache is None else cache["cross"],
                                static_kv=True)
        x = x + self.ff(self.ln3(x))
        return x


def _neg_inf(dtype: torch.dtype) -> float:
    return torch.finfo(dtype).min


class SeqModel(nn.Module):
    """Encoder g (layout tokens -> embeddings E) + causal decoder h over E."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.enc_tok = nn.Embedding(config.vocab_size, d)
        self.enc_pos = nn.Embedding(config.max_input_len, d)
        self.enc_loc = nn.Embedding(MAX_LOCAL_POS, d)
        self.dec_tok = nn.Embedding(config.vocab_size, d)
        self.dec_pos = nn.Embedding(config.max_output_len, d)
        self.dec_loc = nn.Embedding(MAX_LOCAL_POS, d)
        self.drop = nn.Dropout(config.dropout)
        self.enc_layers = nn.ModuleList(_EncoderLayer(config) for _ in range(config.enc_layers))
        self.enc_ln = nn.LayerNorm(d)
        self.dec_layers = nn.ModuleList(_DecoderLayer(config) for _ in range(config.dec_layers))
        self.dec_ln = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size)
        self.apply(self._init)
        self.to(config.torch_dtype)

    @staticmethod
    def _init(module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _pad_bias(self, pad_mask: torch.Tensor) -> torch.Tensor:
        # pad_mask: (B, L) True where PAD; -> additive (B, 1, 1, L)
        bias = torch.zeros(pad_mask.shape, dtype=self.config.torch_dtype)
        bias.masked_fill_(pad_mask, _neg_inf(self.config.torch_dtype))
        return bias[:, None, None, :]

    def encode_batch(self, tokens, gpos, lpos, pad_mask):
        """tokens/gpos/lpos: (B, L) int64; pad_mask: (B, L) bool. Returns (B, L, D)."""
        if tokens.shape[1] > self.config.max_input_len:
            raise LengthExceeded(
                f"input length {tokens.shape[1]} > {self.config.max_input_len}")
        x = self.enc_tok(tokens) + self.enc_pos(gpos) + self.enc_loc(lpos)
        x = self.drop(x)
        bias = self._pad_bias(pad_mask)
        for layer in self.enc_layers:
            x = layer(x, bias)
        return self.enc_ln(x)

    def decode_batch(self, memory, mem_pad_mask, tokens, gpos, lpos,
                     caches=None, pos_offset: int = 0):
        """Causal decoding over (B, T) tokens given encoder memory.

        With ``caches`` (list of per-layer dicts), self-attention keys/values
        accumulate across calls and ``pos_offset`` is the number of tokens
        already processed; pass one new token per call for fast generation.
        """
        t = tokens.shape[1]
        if pos_offset + t > self.config.max_output_len:
            raise LengthExceeded(
                f"output length {pos_offset + t} > {self.config.max_output_len}")
        x = self.dec_tok(tokens) + self.dec_pos(gpos) + self.dec_loc(lpos)
        x = self.drop(x)
        dtype = self.config.torch_dtype
        # Causality: the fused kernel path handles the square full-block case;
        # incremental single-token steps attend to the whole cache; a
        # multi-token continuation needs the explicit shifted triangle.
        if pos_offset == 0:
            self_bias, self_causal = None, t > 1
        elif t == 1:
            self_bias, self_causal = None, False
        else:
            total = pos_offset + t
            causal = torch.full((t, total), _neg_inf(dtype), dtype=dtype)
            causal = torch.triu(causal, diagonal=1 + pos_offset)
            self_bias, self_causal = causal[None, None, :, :], False
        cross_bias = self._pad_bias(mem_pad_mask)
        for i, layer in enumerate(self.dec_layers):
            cache = None if caches is None else caches[i]
            x = layer(x, memory, self_bias, self_causal, cross_bias, cache=cache)
        return self.head(self.dec_ln(x))

    def new_caches(self) -> list[dict]:
        return [{"self": {}, "cross": {}} for _ in self.dec_layers]

    def forward(self, enc_tokens, enc_gpos, enc_lpos, enc_pad,
                dec_tokens, dec_gpos, dec_lpos):
        memory = self.encode_batch(enc_tokens, enc_gpos, enc_lpos, enc_pad)
        return self.decode_batch(memory, enc_pad, dec_tokens, dec_gpos, dec_lpos)


def _as_batch(seq: TokenSeq) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    t = torch.tensor([seq.tokens], dtype=torch.int64)
    g = torch.tensor([seq.global_pos], dtype=torch.int64)
    l = torch.tensor([seq.local_pos], dtype=torch.int64)
    return t, g, l


def encode(model: SeqModel, seq: TokenSeq) -> torch.Tensor:
    """Embed one input sequence; returns (len(seq), embed_dim), eval mode."""
    model.eval()
    with torch.no_grad():
        t, g, l = _as_batch(seq)
        pad = torch.zeros_like(t, dtype=torch.bool)
        return model.encode_batch(t, g, l, pad)[0]


def decode_step(model: SeqModel, memory: torch.Tensor, prefix: TokenSeq) -> torch.Tensor:
    """Next-token logits after ``prefix`` (must start with BOS); (vocab,)."""
    model.eval()
    with torch.no_grad():
        t, g, l = _as_batch(prefix)
        mem = memory[None] if memory.dim() == 2 else memory
        pad = torch.zeros(mem.shape[:2], dtype=torch.bool)
        logits = model.decode_batch(mem, pad, t, g, l)
        return logits[0, -1]


# ---------------------------------------------------------------------------
# Checkpoints: 8-byte little-endian header length, JSON header (config,
# vocabulary, grammar hash, tensor manifest), then raw float32 little-endian
# row-major tensor data at the manifest offsets.

def save_checkpoint(path, model: SeqModel, vocab: Vocabulary, extra: dict | None = None) -> None:
    manifest = []
    blob = io.BytesIO()
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": blob.tell()})
        blob.write(np.ascontiguousarray(arr).tobytes())
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "vocabulary": vocab.to_json(),
        "grammar_hash": grammar_hash(),
        "tensors": manifest,
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(blob.getvalue())


def read_checkpoint_header(path) -> dict:
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as f:
            (hlen,) = struct.unpack("<Q", f.read(8))
            if hlen > size:
                raise ValueError(f"header length {hlen} exceeds file size {size}")
            return json.loads(f.read(hlen))
    except (OSError, ValueError, struct.error) as e:
        raise CheckpointLoadFailure(f"cannot read checkpoint header: {e}") from e


def load_checkpoint(path) -> tuple[SeqModel, Vocabulary]:
    header = read_checkpoint_header(path)
    try:
        if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointLoadFailure(
                f"unsupported format version {header['format_version']}")
        if header["grammar_hash"] != grammar_hash():
            raise CheckpointLoadFailure("checkpoint was trained on a different grammar")
        config = ModelConfig(**header["config"])
        vocab = Vocabulary.from_json(header["vocabulary"])
        model = SeqModel(config)
        state = {}
        with open(path, "rb") as f:
            (hlen,) = struct.unpack("<Q", f.read(8))
            f.seek(8 + hlen)
            body = f.read()
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=start).reshape(shape)
            state[entry["name"]] = torch.tensor(arr, dtype=config.torch_dtype)
        model.load_state_dict(state)
        model.eval()
        return model, vocab
    except CheckpointLoadFailure:
        raise
    except Exception as e:
        raise CheckpointLoadFailure(f"corrupt checkpoint: {e}") from e
