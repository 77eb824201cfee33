"""Tokenizer, toy transformer encoder, and MLM machinery.

The tokenizer is a whitespace+punctuation word splitter with reserved
special tokens; the encoder is a small BERT-style transformer (learned
positional embeddings, post-layer-norm blocks) whose pooled output is the
transformed [CLS] row. Dialogue contexts are encoded as

    [CLS] [USR] w .. w [SEP] [AGT] w .. w [SEP] ...

and over-long contexts are truncated from the left at turn boundaries,
always keeping the most recent turn intact.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import EncodingError
from .corpus import Turn, USER

PAD, UNK, CLS, SEP, MASK, USR, AGT = range(7)
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[USR]", "[AGT]")
NUM_SPECIALS = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_text(text: str) -> list[str]:
    """Lowercase and split into word/punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK) for t in split_text(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def detokenize(self, ids: Iterable[int]) -> str:
        """Re-join tokens into surface text: spaces only between two
        alphanumeric tokens, so "14 : 19" reassembles as "14:19"."""
        out = ""
        prev_word = False
        for i in ids:
            tok = self.tokens[i]
            is_word = bool(re.fullmatch(r"[a-z0-9]+", tok))
            if out and prev_word and is_word:
                out += " "
            out += tok
            prev_word = is_word
        return out

    def word_tokens(self) -> list[str]:
        return self.tokens[NUM_SPECIALS:]

    def covers(self, text: str) -> bool:
        return UNK not in self.encode(text)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(texts: Iterable[str], extra_texts: Iterable[str] = ()) -> Vocabulary:
    """Vocabulary over corpus texts plus schema strings (slot names and
    candidate values), so schema inputs never hit [UNK]."""
    seen: dict[str, None] = {}
    for text in list(texts) + list(extra_texts):
        for tok in split_text(text):
            seen.setdefault(tok)
    return Vocabulary(list(SPECIAL_TOKENS) + list(seen))


def schema_texts(schema) -> list[str]:
    out = []
    for slot in schema.slots:
        out.append(slot.name)
        out.extend(slot.candidate_values)
    return out


# ---------------------------------------------------------------------------
# context token assembly


def turn_block(vocab: Vocabulary, turn: Turn) -> list[int]:
    marker = USR if turn.speaker == USER else AGT
    return [marker] + vocab.encode(turn.text) + [SEP]


def build_context_tokens(
    vocab: Vocabulary, turns: Sequence[Turn], max_len: int
) -> tuple[list[int], list[int]]:
    """Token ids plus per-token originating-turn index ([CLS] maps to -1).

    Truncates whole turns from the left; raises if even the most recent turn
    alone does not fit.
    """
    if not turns:
        raise EncodingError("cannot encode an empty turn sequence")
    blocks = [turn_block(vocab, t) for t in turns]
    start = 0
    total = 1 + sum(len(b) for b in blocks)
    while total > max_len and start < len(blocks) - 1:
        total -= len(blocks[start])
        start += 1
    if total > max_len:
        raise EncodingError(
            f"most recent turn needs {total} tokens, exceeds max length {max_len}"
        )
    ids = [CLS]
    turn_map = [-1]
    for i in range(start, len(blocks)):
        ids.extend(blocks[i])
        turn_map.extend([i] * len(blocks[i]))
    return ids, turn_map


@dataclass
class ContextEncoding:
    token_ids: list[int]
    token_turn_map: list[int]
    pooled: torch.Tensor      # (d,)
    sequence: torch.Tensor    # (L, d)

    @property
    def length(self) -> int:
        return len(self.token_ids)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    vocab_size: int = 0
    max_seq_len: int = 256
    dropout: float = 0.1
    ffn_dim: int = 0  # 0 -> 2 * hidden_dim

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise EncodingError("hidden_dim must be divisible by num_heads")
        if self.max_seq_len < 16:
            raise EncodingError("max_seq_len must be >= 16")

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 2 * self.hidden_dim

    def to_json(self) -> dict:
        return dict(self.__dict__)


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.hidden_dim // cfg.num_heads
        self.qkv = nn.Linear(cfg.hidden_dim, 3 * cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)

    def forward(self, x, pad_mask):
        b, l, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def heads(t):
            return t.view(b, l, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if pad_mask is not None:
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, l, d)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn = SelfAttention(cfg)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.ffn), nn.GELU(), nn.Linear(cfg.ffn, cfg.hidden_dim)
        )
        self.ln1 = nn.LayerNorm(cfg.hidden_dim)
        self.ln2 = nn.LayerNorm(cfg.hidden_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask):
        x = self.ln1(x + self.drop(self.attn(x, pad_mask)))
        x = self.ln2(x + self.drop(self.ffn(x)))
        return x


class TransformerEncoder(nn.Module):
    """The `Encode` function: token+position embeddings and transformer
    blocks, with a tied-free MLM projection head."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.vocab_size <= NUM_SPECIALS:
            raise EncodingError("vocab_size must exceed the number of special tokens")
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.hidden_dim)
        self.emb_ln = nn.LayerNorm(cfg.hidden_dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.mlm_head = nn.Linear(cfg.hidden_dim, cfg.vocab_size)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None):
        """ids: (B, L) int64; pad_mask: (B, L) bool, True at padding."""
        b, l = ids.shape
        if l > self.cfg.max_seq_len:
            raise EncodingError(f"sequence length {l} exceeds max {self.cfg.max_seq_len}")
        pos = torch.arange(l, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        x = self.drop(self.emb_ln(x))
        for layer in self.layers:
            x = layer(x, pad_mask)
        if pad_mask is not None:
            x = x.masked_fill(pad_mask[..., None], 0.0)
        return x

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(hidden)


def pad_batch(id_lists: Sequence[Sequence[int]], device=None):
    """Right-pad to a (B, L) id tensor plus a boolean padding mask."""
    max_len = max(len(ids) for ids in id_lists)
    batch = torch.full((len(id_lists), max_len), PAD, dtype=torch.long, device=device)
    mask = torch.ones(len(id_lists), max_len, dtype=torch.bool, device=device)
    for i, ids in enumerate(id_lists):
        batch[i, : len(ids)] = torch.tensor(ids, dtype=torch.long, device=device)
        mask[i, : len(ids)] = False
    return batch, mask


def encode_texts(model: TransformerEncoder, vocab: Vocabulary, texts: Sequence[str]):
    """Pooled [CLS] encodings for plain strings (slot names, candidate values).

    Returns (B, d); rows are encoder outputs at the [CLS] position.
    """
    id_lists = [[CLS] + vocab.encode(t) + [SEP] for t in texts]
    ids, mask = pad_batch(id_lists)
    hidden = model(ids, mask)
    return hidden[:, 0, :]


def encode_context(
    model: TransformerEncoder, vocab: Vocabulary, turns: Sequence[Turn]
) -> ContextEncoding:
    ids, turn_map = build_context_tokens(vocab, turns, model.cfg.max_seq_len)
    batch = torch.tensor([ids], dtype=torch.long)
    hidden = model(batch)[0]
    return ContextEncoding(
        token_ids=ids, token_turn_map=turn_map, pooled=hidden[0], sequence=hidden
    )


def encode_contexts(
    model: TransformerEncoder, vocab: Vocabulary, turn_seqs: Sequence[Sequence[Turn]]
) -> list[ContextEncoding]:
    """Batched variant of `encode_context` (one padded forward pass)."""
    built = [build_context_tokens(vocab, ts, model.cfg.max_seq_len) for ts in turn_seqs]
    ids, mask = pad_batch([b[0] for b in built])
    hidden = model(ids, mask)
    return [
        ContextEncoding(
            token_ids=tok_ids,
            token_turn_map=turn_map,
            pooled=hidden[i, 0],
            sequence=hidden[i, : len(tok_ids)],
        )
        for i, (tok_ids, turn_map) in enumerate(built)
    ]


# ---------------------------------------------------------------------------
# masked language modeling


def mask_for_mlm(
    token_ids: Sequence[int],
    mask_prob: float,
    rng: random.Random,
    vocab_size: int,
) -> tuple[list[int], list[int], list[int]]:
    """BERT-style corruption: each non-special token is selected independently
    with `mask_prob`; of the selected, 80% become [MASK], 10% a random word
    token, 10% stay. Returns (masked ids, target positions, target ids)."""
    masked = list(token_ids)
    positions: list[int] = []
    targets: list[int] = []
    for i, tok in enumerate(token_ids):
        if tok < NUM_SPECIALS:
            continue
        if rng.random() >= mask_prob:
            continue
        positions.append(i)
        targets.append(tok)
        r = rng.random()
        if r < 0.8:
            masked[i] = MASK
        elif r < 0.9:
            masked[i] = rng.randrange(NUM_SPECIALS, vocab_size)
    return masked, positions, targets


def masked_lm_loss(logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over target positions; zero targets contribute 0."""
    if logits.numel() == 0 or target_ids.numel() == 0:
        return torch.zeros((), dtype=logits.dtype if logits.numel() else torch.float32)
    return F.cross_entropy(logits, target_ids)


def mlm_loss_on_texts(
    model: TransformerEncoder,
    vocab: Vocabulary,
    texts: Sequence[str],
    mask_prob: float,
    rng: random.Random,
) -> torch.Tensor:
    """Mask a batch of raw utterances and return the MLM loss."""
    masked_lists, all_pos, all_tgt = [], [], []
    for text in texts:
        ids = [CLS] + vocab.encode(text) + [SEP]
        ids = ids[: model.cfg.max_seq_len]
        masked, pos, tgt = mask_for_mlm(ids, mask_prob, rng, len(vocab))
        masked_lists.append(masked)
        all_pos.append(pos)
        all_tgt.extend(tgt)
    if not any(all_pos):
        return torch.zeros(())
    ids, mask = pad_batch(masked_lists)
    hidden = model(ids, mask)
    logits = model.mlm_logits(hidden)
    rows = torch.cat(
        [logits[i, pos] for i, pos in enumerate(all_pos) if pos]
    )
    return masked_lm_loss(rows, torch.tensor(all_tgt, dtype=torch.long))
