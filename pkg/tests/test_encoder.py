import math
import random

import pytest
import torch

from dstlab import EncodingError
from dstlab.corpus import AGENT, USER, Turn, default_schema
from dstlab.encoder import (
    AGT,
    CLS,
    MASK,
    NUM_SPECIALS,
    SEP,
    UNK,
    USR,
    EncoderConfig,
    TransformerEncoder,
    build_context_tokens,
    build_vocab,
    encode_context,
    encode_contexts,
    encode_texts,
    mask_for_mlm,
    masked_lm_loss,
    mlm_loss_on_texts,
    schema_texts,
    split_text,
    turn_block,
)

from conftest import TINY_ENCODER


def tiny_encoder(vocab_size: int, **overrides) -> TransformerEncoder:
    cfg = EncoderConfig(**{**TINY_ENCODER, "vocab_size": vocab_size, **overrides})
    torch.manual_seed(0)
    return TransformerEncoder(cfg).eval()


# ---------------------------------------------------------------------------
# tokenizer / vocabulary


def test_split_text_cases():
    assert split_text("") == []
    assert split_text("Find a HOTEL!") == ["find", "a", "hotel", "!"]
    assert split_text("14:19") == ["14", ":", "19"]
    assert split_text("a  a") == ["a", "a"]


def test_vocab_specials_first_and_order_preserved():
    v = build_vocab(["beta alpha", "alpha gamma"])
    assert v.tokens[:NUM_SPECIALS] == list(
        ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[USR]", "[AGT]")
    )
    assert v.tokens[NUM_SPECIALS:] == ["beta", "alpha", "gamma"]
    ids = v.encode("alpha alpha")
    assert ids == [NUM_SPECIALS + 1, NUM_SPECIALS + 1]


def test_unknown_words_map_to_unk():
    v = build_vocab(["known words"])
    assert v.encode("known mystery") == [v.index["known"], UNK]
    assert v.covers("known words")
    assert not v.covers("mystery")


def test_vocab_covers_all_schema_strings():
    schema = default_schema()
    texts = schema_texts(schema)
    v = build_vocab(texts)
    for text in texts:
        assert v.covers(text), text


def test_detokenize_spacing():
    v = build_vocab(["a and b guest house", "14 : 19 .", "north"])
    assert v.detokenize(v.encode("a and b guest house")) == "a and b guest house"
    assert v.detokenize(v.encode("14:19")) == "14:19"
    assert v.detokenize(v.encode("north.")) == "north."
    assert v.detokenize([]) == ""


def test_vocab_save_load_round_trip(tmp_path):
    v = build_vocab(["some words here"], extra_texts=["and more"])
    path = tmp_path / "vocab.txt"
    v.save(path)
    loaded = type(v).load(path)
    assert loaded.tokens == v.tokens
    assert loaded.index == v.index


# ---------------------------------------------------------------------------
# context assembly and truncation


def test_turn_block_markers():
    v = build_vocab(["hello there"])
    assert turn_block(v, Turn(USER, "hello"))[0] == USR
    assert turn_block(v, Turn(AGENT, "hello"))[0] == AGT
    assert turn_block(v, Turn(USER, "hello there"))[-1] == SEP


def test_context_token_layout():
    v = build_vocab(["find me a hotel", "sure thing"])
    turns = [Turn(USER, "find me a hotel"), Turn(AGENT, "sure thing")]
    ids, turn_map = build_context_tokens(v, turns, max_len=64)
    assert ids[0] == CLS and turn_map[0] == -1
    assert ids[1] == USR
    assert turn_map == [-1] + [0] * 6 + [1] * 4
    assert len(ids) == len(turn_map) == 11


def test_truncation_drops_whole_oldest_turns():
    words = [f"word{i}" for i in range(30)]
    v = build_vocab([" ".join(words)])
    turns = [
        Turn(USER if i % 2 == 0 else AGENT, " ".join(words[i % 10: i % 10 + 4]))
        for i in range(25)
    ]
    max_len = 64
    ids, turn_map = build_context_tokens(v, turns, max_len)
    assert len(ids) <= max_len
    present = sorted(set(turn_map) - {-1})
    # a contiguous suffix of turn indices, ending at the most recent turn
    assert present == list(range(present[0], 25))
    assert present[0] > 0  # something actually got truncated
    for idx in present:
        block_len = len(turn_block(v, turns[idx]))
        assert turn_map.count(idx) == block_len  # never split a kept turn


def test_single_overlong_turn_rejected():
    v = build_vocab(["w"])
    with pytest.raises(EncodingError):
        build_context_tokens(v, [Turn(USER, " ".join(["w"] * 200))], max_len=64)
    with pytest.raises(EncodingError):
        build_context_tokens(v, [], max_len=64)


# ---------------------------------------------------------------------------
# encoder forward


def test_encode_context_shapes():
    v = build_vocab(["find me a hotel"])
    model = tiny_encoder(len(v))
    ctx = encode_context(model, v, [Turn(USER, "find me a hotel")])
    d = model.cfg.hidden_dim
    assert ctx.sequence.shape == (7, d)  # CLS + USR + 4 words + SEP
    assert ctx.pooled.shape == (d,)
    assert ctx.length == 7
    assert torch.equal(ctx.pooled, ctx.sequence[0])


def test_encoder_construction_is_seed_deterministic():
    v = build_vocab(["some words"])
    cfg = EncoderConfig(**{**TINY_ENCODER, "vocab_size": len(v)})
    torch.manual_seed(5)
    m1 = TransformerEncoder(cfg)
    torch.manual_seed(5)
    m2 = TransformerEncoder(cfg)
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)
    ids = torch.tensor([[CLS] + v.encode("some words") + [SEP]])
    assert torch.equal(m1.eval()(ids), m2.eval()(ids))


def test_batched_encoding_matches_single():
    v = build_vocab(["find me a hotel near the park", "sure"])
    model = tiny_encoder(len(v))
    seqs = [
        [Turn(USER, "find me a hotel")],
        [Turn(USER, "find me a hotel near the park"), Turn(AGENT, "sure")],
        [Turn(USER, "sure")],
    ]
    batched = encode_contexts(model, v, seqs)
    for turns, enc in zip(seqs, batched):
        single = encode_context(model, v, turns)
        assert enc.token_ids == single.token_ids
        assert torch.allclose(enc.sequence, single.sequence, atol=1e-5)
        assert torch.allclose(enc.pooled, single.pooled, atol=1e-5)


def test_repeated_text_encodes_identically():
    v = build_vocab(["hotel-area north"])
    model = tiny_encoder(len(v))
    out = encode_texts(model, v, ["hotel-area", "hotel-area"])
    assert torch.equal(out[0], out[1])


def test_sequence_longer_than_limit_rejected():
    v = build_vocab(["w"])
    model = tiny_encoder(len(v), max_seq_len=16)
    ids = torch.tensor([[CLS] + [v.index["w"]] * 20])
    with pytest.raises(EncodingError):
        model(ids)


# ---------------------------------------------------------------------------
# masked language modeling


def test_mask_prob_zero_selects_nothing():
    ids = [CLS] + list(range(NUM_SPECIALS, NUM_SPECIALS + 20)) + [SEP]
    masked, pos, tgt = mask_for_mlm(ids, 0.0, random.Random(0), 100)
    assert masked == ids and pos == [] and tgt == []


def test_mask_fraction_and_special_exclusion():
    rng = random.Random(13)
    word_ids = [NUM_SPECIALS + (i % 50) for i in range(10_000)]
    ids = [CLS] + word_ids + [SEP]
    masked, pos, tgt = mask_for_mlm(ids, 0.15, rng, NUM_SPECIALS + 50)
    assert abs(len(pos) / len(word_ids) - 0.15) <= 0.01
    assert 0 not in pos and len(ids) - 1 not in pos  # specials untouched
    assert masked[0] == CLS and masked[-1] == SEP
    for p, t in zip(pos, tgt):
        assert ids[p] == t
        # outcome is [MASK], a word-range replacement, or the original
        assert masked[p] == MASK or masked[p] >= NUM_SPECIALS


def test_mask_outcome_proportions():
    rng = random.Random(5)
    n = 40_000
    ids = [NUM_SPECIALS + (i % 97) for i in range(n)]
    masked, pos, tgt = mask_for_mlm(ids, 1.0, rng, NUM_SPECIALS + 97)
    assert len(pos) == n
    n_mask = sum(masked[p] == MASK for p in pos)
    n_kept = sum(masked[p] == ids[p] for p in pos)
    n_repl = n - n_mask - n_kept
    assert abs(n_mask / n - 0.80) <= 0.01
    # random replacement can collide with the original token, which then
    # counts as kept; with 97 words the drift is ~0.001
    assert abs(n_repl / n - 0.10) <= 0.01
    assert abs(n_kept / n - 0.10) <= 0.01
    for p in pos:
        assert masked[p] == MASK or masked[p] >= NUM_SPECIALS


def test_masked_lm_loss_reference_values():
    vocab_size = 50
    uniform = torch.zeros(8, vocab_size)
    targets = torch.arange(8)
    assert masked_lm_loss(uniform, targets).item() == pytest.approx(
        math.log(vocab_size), rel=1e-6
    )
    onehot = torch.full((4, vocab_size), -30.0)
    onehot[torch.arange(4), torch.arange(4)] = 30.0
    assert masked_lm_loss(onehot, torch.arange(4)).item() == pytest.approx(0.0, abs=1e-6)
    empty = masked_lm_loss(torch.zeros(0, vocab_size), torch.zeros(0, dtype=torch.long))
    assert empty.item() == 0.0


def test_mlm_loss_on_texts_runs():
    v = build_vocab(["the quick brown fox jumps over the lazy dog"] * 2)
    model = tiny_encoder(len(v))
    loss = mlm_loss_on_texts(
        model, v, ["the quick brown fox", "the lazy dog jumps"], 0.5, random.Random(3)
    )
    assert loss.item() >= 0.0
    assert torch.isfinite(loss)


def test_mlm_gradients_match_finite_differences():
    torch.manual_seed(0)
    cfg = EncoderConfig(
        hidden_dim=8, num_layers=2, num_heads=2, vocab_size=30, max_seq_len=32,
        dropout=0.0,
    )
    model = TransformerEncoder(cfg).double().eval()
    ids = [CLS] + [NUM_SPECIALS + (i % 20) for i in range(14)] + [SEP]
    masked, pos, tgt = mask_for_mlm(ids, 0.4, random.Random(1), cfg.vocab_size)
    assert pos
    batch = torch.tensor([masked])
    tgt_t = torch.tensor(tgt)

    def loss_value():
        hidden = model(batch)[0]
        return masked_lm_loss(model.mlm_logits(hidden[pos]), tgt_t)

    model.zero_grad()
    loss_value().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = random.Random(2)
    h = 1e-5
    for _ in range(40):
        p = params[rng.randrange(len(params))]
        flat = p.data.view(-1)
        j = rng.randrange(flat.numel())
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + h
            up = loss_value().item()
            flat[j] = orig - h
            down = loss_value().item()
            flat[j] = orig
        numeric = (up - down) / (2 * h)
        analytic = p.grad.view(-1)[j].item()
        assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(numeric), abs(analytic))
