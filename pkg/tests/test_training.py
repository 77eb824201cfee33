import json
import math
import random

import pytest
import torch

from dstlab import CorpusError, EvaluationError, TrainingDiverged
from dstlab.corpus import (
    AGENT,
    USER,
    Corpus,
    Dialogue,
    SlotState,
    SynthConfig,
    Turn,
    auxiliary_corpus,
    generate_synthetic,
    iter_gold_examples,
)
from dstlab.dst_model import FLAT, HIERARCHICAL
from dstlab.encoder import EncoderConfig
from dstlab.perturbation import PerturbationConfig
from dstlab.schema import ACTIVE, DONTCARE, INACTIVE
from dstlab.training import (
    LossBreakdown,
    TrainConfig,
    TrainExample,
    dst_loss,
    find_last_subsequence,
    gold_domain_indicator,
    load_checkpoint,
    save_checkpoint,
    set_oracle_statuses,
    train,
    train_config_from_json,
)

from conftest import TINY_ENCODER, make_model

TINY_CFG = EncoderConfig(**TINY_ENCODER)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(steps=5, batch_size=4, lr_warmup_steps=2, encoder=TINY_CFG)
    return TrainConfig(**{**base, **overrides})


class FixedOut(torch.nn.Module):
    """Stand-in head that ignores its inputs and returns a fixed tensor."""

    def __init__(self, value: torch.Tensor):
        super().__init__()
        self.value = value

    def forward(self, *args):
        return self.value


class FixedSpanOut(torch.nn.Module):
    def __init__(self, start: torch.Tensor, end: torch.Tensor):
        super().__init__()
        self.out = (start, end)

    def forward(self, *args):
        return self.out


# ---------------------------------------------------------------------------
# configs and bookkeeping


def test_train_config_validation():
    with pytest.raises(TrainingDiverged):
        TrainConfig(mlm_weight=-0.1)
    with pytest.raises(TrainingDiverged):
        TrainConfig(steps=0)
    with pytest.raises(TrainingDiverged):
        TrainConfig(mask_prob=1.2)
    with pytest.raises(TrainingDiverged):
        TrainConfig(status_mode="diagonal")
    with pytest.raises(TrainingDiverged):
        TrainConfig(mlm_mode="sometimes")


def test_train_config_json_round_trip():
    cfg = tiny_train_config(
        mlm_mode="target_plus_auxiliary",
        perturbation=PerturbationConfig(probability=0.4, num_insertions=3),
    )
    assert train_config_from_json(cfg.to_json()) == cfg
    plain = tiny_train_config()
    assert train_config_from_json(plain.to_json()) == plain


def test_loss_breakdown_consistency_enforced():
    ok = LossBreakdown.make(0.5, 0.25, 0.125, 0.0625, 0.03125)
    assert ok.dst_total == 0.9375
    assert ok.total == 0.96875
    with pytest.raises(TrainingDiverged):
        LossBreakdown(0.5, 0.25, 0.125, 0.0625, 0.0, dst_total=1.0, total=1.0)
    with pytest.raises(TrainingDiverged):
        LossBreakdown(-0.5, 0.25, 0.125, 0.0625, 0.0, dst_total=-0.0625, total=-0.0625)


def test_find_last_subsequence():
    assert find_last_subsequence([1, 2, 3, 2, 3], [2, 3]) == (3, 4)
    assert find_last_subsequence([1, 2, 3], [4]) is None
    assert find_last_subsequence([1, 2, 3], []) is None
    assert find_last_subsequence([5, 6], [5, 6]) == (0, 1)
    assert find_last_subsequence([7, 7, 7], [7]) == (2, 2)
    assert find_last_subsequence([1], [1, 2]) is None


def test_gold_domain_indicator(schema4):
    assert gold_domain_indicator(schema4, {}) == [0.0, 0.0, 0.0, 0.0]
    gold = {"hotel-area": SlotState(DONTCARE)}
    assert gold_domain_indicator(schema4, gold) == [0.0, 1.0, 0.0, 0.0]
    gold = {"restaurant-food": SlotState(ACTIVE, "thai"),
            "train-day": SlotState(ACTIVE, "monday")}
    assert gold_domain_indicator(schema4, gold) == [1.0, 0.0, 1.0, 0.0]


# ---------------------------------------------------------------------------
# dst_loss behaviour


def example(text: str, gold) -> TrainExample:
    return TrainExample("d0", (Turn(USER, text, gold_state=dict(gold)),), dict(gold))


def test_all_inactive_gold_zeroes_gated_components(corpus10):
    model = make_model(corpus10)
    ex = example("hello there", {})
    losses, diag = dst_loss(model, [ex], mode=HIERARCHICAL)
    assert losses["status_ce"].item() == 0.0  # no gold-active domain to score
    assert losses["categorical_ce"].item() == 0.0
    assert losses["span_ce"].item() == 0.0
    assert losses["domain_bce"].item() > 0.0
    assert diag == {"skipped_spans": 0, "skipped_categorical": 0}

    flat_losses, _ = dst_loss(model, [ex], mode=FLAT)
    assert flat_losses["status_ce"].item() > 0.0  # flat scores every slot


def test_teacher_forcing_gates_status_gradients(corpus10):
    model = make_model(corpus10, extra_texts=["i want cheap food"])
    ex = example("i want cheap food",
                 {"restaurant-pricerange": SlotState(ACTIVE, "cheap")})
    slot_enc = model.encode_slots().detach().requires_grad_(True)
    losses, diag = dst_loss(model, [ex], mode=HIERARCHICAL, slot_enc=slot_enc)
    assert diag["skipped_categorical"] == 0
    total = sum(losses.values())
    (grad,) = torch.autograd.grad(total, slot_enc)
    names = model.schema.slot_names()
    gated = [i for i, n in enumerate(names) if not n.startswith("restaurant")]
    open_rows = [i for i, n in enumerate(names) if n.startswith("restaurant")]
    assert all(torch.all(grad[i] == 0.0) for i in gated)
    assert any(torch.any(grad[i] != 0.0) for i in open_rows)

    slot_enc2 = model.encode_slots().detach().requires_grad_(True)
    flat_losses, _ = dst_loss(model, [ex], mode=FLAT, slot_enc=slot_enc2)
    (flat_grad,) = torch.autograd.grad(sum(flat_losses.values()), slot_enc2)
    assert any(torch.any(flat_grad[i] != 0.0) for i in gated)


def test_losses_vanish_on_oracle_heads(corpus10):
    model = make_model(corpus10, extra_texts=["book prezzo it is cheap"])
    gold = {"restaurant-pricerange": SlotState(ACTIVE, "cheap"),
            "restaurant-name": SlotState(ACTIVE, "prezzo")}
    ex = example("book prezzo it is cheap", gold)
    schema = model.schema

    big = 40.0
    dom = torch.tensor([big if d == "restaurant" else -big for d in schema.domains])
    model.domain_head = FixedOut(dom)

    # gated rows are exactly the restaurant slots, in schema order
    rows = []
    for slot in schema.domain_slots["restaurant"]:
        target = gold.get(slot.name)
        idx = 0 if target is not None and target.status == ACTIVE else 2
        row = [-big] * 3
        row[idx] = big
        rows.append(row)
    model.status_head = FixedOut(torch.tensor(rows))

    price = schema.by_name["restaurant-pricerange"]
    cat_scores = torch.tensor(
        [big if v == "cheap" else -big for v in price.candidate_values]
    )
    model.categorical_head = FixedOut(cat_scores)

    ctx = model.encode_turns(ex.turns)
    span = find_last_subsequence(ctx.token_ids, model.vocab.encode("prezzo"))
    assert span is not None
    start = torch.full((len(ctx.token_ids),), -big)
    end = torch.full((len(ctx.token_ids),), -big)
    start[span[0]] = big
    end[span[1]] = big
    model.span_head = FixedSpanOut(start, end)

    losses, diag = dst_loss(model, [ex], mode=HIERARCHICAL)
    for name, value in losses.items():
        assert value.item() <= 1e-6, (name, value.item())
    assert diag == {"skipped_spans": 0, "skipped_categorical": 0}


def test_unfindable_span_and_foreign_value_are_skipped(corpus10):
    model = make_model(corpus10)
    gold = {"restaurant-name": SlotState(ACTIVE, "zanzibar"),
            "restaurant-food": SlotState(ACTIVE, "thai")}
    ex = example("i would like thai food", gold)  # "zanzibar" never uttered
    losses, diag = dst_loss(model, [ex])
    assert diag["skipped_spans"] == 1
    assert losses["span_ce"].item() == 0.0
    assert losses["categorical_ce"].item() > 0.0


def test_invalid_gold_state_rejected(tiny_model):
    ex = example("hello", {"restaurant-food": SlotState(ACTIVE, "martian")})
    with pytest.raises(CorpusError):
        dst_loss(tiny_model, [ex])


def test_dst_loss_gradients_match_finite_differences(corpus10):
    model = make_model(corpus10, extra_texts=["i want cheap food"]).double()
    ex = example("i want cheap food",
                 {"restaurant-pricerange": SlotState(ACTIVE, "cheap"),
                  "hotel-area": SlotState(ACTIVE, "north")})

    def total():
        losses, _ = dst_loss(model, [ex], mode=HIERARCHICAL)
        return losses["domain_bce"] + losses["status_ce"] + losses["categorical_ce"]

    model.zero_grad()
    total().backward()
    params = [p for p in model.parameters() if p.grad is not None]
    rng = random.Random(4)
    h = 1e-5
    for _ in range(25):
        p = params[rng.randrange(len(params))]
        flat = p.data.view(-1)
        j = rng.randrange(flat.numel())
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + h
            up = total().item()
            flat[j] = orig - h
            down = total().item()
            flat[j] = orig
        numeric = (up - down) / (2 * h)
        analytic = p.grad.view(-1)[j].item()
        assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(numeric), abs(analytic))


# ---------------------------------------------------------------------------
# the loop


@pytest.fixture(scope="module")
def train_corpus():
    return generate_synthetic(SynthConfig(num_dialogues=100), seed=3, split="train")


@pytest.fixture(scope="module")
def long_run(train_corpus, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("long-run")
    cfg = tiny_train_config(steps=200, batch_size=8, seed=1, checkpoint_every=80)
    model, metrics = train(train_corpus, cfg, run_dir=run_dir)
    return model, metrics, run_dir, cfg


def test_loss_decreases_over_training(long_run):
    _, metrics, _, cfg = long_run
    assert len(metrics) == cfg.steps
    first = sum(m.total for m in metrics[:30]) / 30
    last = sum(m.total for m in metrics[-30:]) / 30
    assert last < first
    assert all(math.isfinite(m.total) for m in metrics)


def test_metrics_file_and_checkpoints(long_run):
    _, metrics, run_dir, cfg = long_run
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == cfg.steps
    first = json.loads(lines[0])
    assert first["step"] == 1
    assert first["lr"] == pytest.approx(cfg.learning_rate / cfg.lr_warmup_steps)
    assert json.loads(lines[-1])["losses"]["total"] == pytest.approx(metrics[-1].total)
    saved = sorted(p.name for p in run_dir.glob("step-*"))
    assert saved == ["step-160", "step-200", "step-80"]
    assert json.loads((run_dir / "train_config.json").read_text()) == json.loads(
        json.dumps(cfg.to_json())
    )


def test_checkpoint_round_trip(long_run, train_corpus, tmp_path):
    model, _, _, _ = long_run
    ckpt = save_checkpoint(model, tmp_path / "ckpt")
    loaded = load_checkpoint(ckpt)
    assert loaded.vocab.tokens == model.vocab.tokens
    assert loaded.schema.slot_names() == model.schema.slot_names()
    for k, v in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[k], v)
    d = train_corpus.dialogues[0]
    before = [p.to_json() for p in model.predict_dialogue(d)]
    after = [p.to_json() for p in loaded.predict_dialogue(d)]
    assert before == after


def test_training_is_seed_deterministic():
    corpus = generate_synthetic(SynthConfig(num_dialogues=15), seed=5)
    cfg = tiny_train_config(steps=12, seed=9)
    m1, met1 = train(corpus, cfg)
    m2, met2 = train(corpus, cfg)
    assert met1 == met2
    for p1, p2 in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p1, p2)
    _, met3 = train(corpus, tiny_train_config(steps=12, seed=10))
    assert met3 != met1


def test_mlm_off_equals_zero_weight():
    corpus = generate_synthetic(SynthConfig(num_dialogues=10), seed=6)
    off = tiny_train_config(steps=8, seed=2, mlm_mode="off")
    zero = tiny_train_config(steps=8, seed=2, mlm_mode="target_only", mlm_weight=0.0)
    m_off, met_off = train(corpus, off)
    m_zero, met_zero = train(corpus, zero)
    assert met_off == met_zero
    for p1, p2 in zip(m_off.parameters(), m_zero.parameters()):
        assert torch.equal(p1, p2)


def test_mlm_modes_produce_nonzero_component():
    corpus = generate_synthetic(SynthConfig(num_dialogues=10), seed=6)
    aux = auxiliary_corpus("synthetic", seed=0, size=50)
    cfg = tiny_train_config(steps=4, mlm_mode="target_plus_auxiliary",
                            mlm_warmup_steps=2)
    _, metrics = train(corpus, cfg, aux_pool=aux)
    assert all(m.mlm > 0.0 for m in metrics)
    # warm-up steps are MLM-only: DST components held at zero
    assert metrics[0].dst_total == 0.0 and metrics[1].dst_total == 0.0
    assert metrics[2].dst_total > 0.0


def test_perturbed_training_keeps_supervision():
    corpus = generate_synthetic(SynthConfig(num_dialogues=12), seed=8)
    aux = auxiliary_corpus("synthetic", seed=1, size=60, exclude=corpus.all_utterances())
    cfg = tiny_train_config(
        steps=10,
        encoder=EncoderConfig(**{**TINY_ENCODER, "max_seq_len": 256}),
        perturbation=PerturbationConfig(probability=0.5, num_insertions=2),
    )
    _, metrics = train(corpus, cfg, aux_pool=aux)
    assert all(m.skipped_spans == 0 for m in metrics)
    assert all(math.isfinite(m.total) for m in metrics)


def test_divergence_guard(monkeypatch):
    corpus = generate_synthetic(SynthConfig(num_dialogues=5), seed=1)

    def poisoned(*args, **kwargs):
        bad = torch.tensor(float("nan"))
        zero = torch.zeros(())
        return ({"domain_bce": bad, "status_ce": zero, "categorical_ce": zero,
                 "span_ce": zero}, {"skipped_spans": 0})

    monkeypatch.setattr("dstlab.training.dst_loss", poisoned)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train(corpus, tiny_train_config(steps=2))


def test_train_input_validation(schema4):
    cfg = tiny_train_config()
    with pytest.raises(CorpusError):
        train(Corpus(schema4, tuple(), "train"), cfg)
    no_gold = Corpus(
        schema4,
        (Dialogue(id="x", turns=(Turn(USER, "hi"), Turn(AGENT, "hello"))),),
        "train",
    )
    with pytest.raises(CorpusError, match="gold"):
        train(no_gold, cfg)
    needs_aux = tiny_train_config(mlm_mode="target_plus_auxiliary")
    with pytest.raises(CorpusError, match="auxiliary"):
        train(generate_synthetic(SynthConfig(num_dialogues=3), seed=0), needs_aux)


# ---------------------------------------------------------------------------
# oracle statuses


def test_set_oracle_statuses_matches_gold(corpus10, tiny_model):
    preds = set_oracle_statuses(tiny_model, corpus10)
    pairs = list(iter_gold_examples(corpus10))
    assert len(preds) == len(pairs)
    for pred, (dialogue, idx) in zip(preds, pairs):
        assert (pred.dialogue_id, pred.turn_index) == (dialogue.id, idx)
        gold = dialogue.turns[idx].gold_state or {}
        for name in tiny_model.schema.slot_names():
            entry = gold.get(name)
            want = entry.status if entry is not None else INACTIVE
            assert pred.slot_statuses[name] == want
        valued = set(pred.categorical_values) | set(pred.spans)
        gold_active = {n for n, st in gold.items() if st.status == ACTIVE}
        assert valued == gold_active


def test_set_oracle_statuses_requires_coverage(corpus10, tiny_model):
    with pytest.raises(EvaluationError, match="missing"):
        set_oracle_statuses(tiny_model, corpus10, predictions=[])
