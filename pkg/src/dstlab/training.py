"""Joint DST + continued-MLM fine-tuning.

Per step: sample a batch of gold user turns, optionally insert distractor
utterances into the sampled dialogues, compute the DST losses on the gold
turns (inserted turns carry no supervision), add the MLM loss when enabled,
and take one optimizer step. Loss components are each averaged over their
own instance class and summed with configurable weights (all 1.0 by
default).

Teacher forcing: in hierarchical mode the status loss covers only slots of
gold-active domains, so slots of gold-inactive domains contribute exactly
zero gradient. RMSprop with a linear learning-rate warm-up; everything is
driven by named substreams of the config seed, so runs replay exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from . import CorpusError, EvaluationError, TrainingDiverged
from .corpus import BeliefState, Corpus, Dialogue, Turn, iter_gold_examples
from .dst_model import (
    HIERARCHICAL,
    STATUS_MODES,
    STATUS_TO_IDX,
    DstModel,
    TurnPrediction,
)
from .encoder import (
    EncoderConfig,
    Vocabulary,
    build_vocab,
    encode_contexts,
    mlm_loss_on_texts,
    schema_texts,
)
from .perturbation import PerturbationConfig, perturb_dialogue, perturbation_config_from_json
from .schema import (
    ACTIVE,
    CATEGORICAL,
    INACTIVE,
    STATUSES,
    load_schema,
    save_schema,
    validate_state,
)
from .seeding import substream, substream_seed

MLM_OFF = "off"
MLM_TARGET = "target_only"
MLM_TARGET_AUX = "target_plus_auxiliary"
MLM_MODES = (MLM_OFF, MLM_TARGET, MLM_TARGET_AUX)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    steps: int = 200
    seed: int = 0
    status_mode: str = HIERARCHICAL
    mlm_mode: str = MLM_OFF
    mlm_weight: float = 1.0
    mask_prob: float = 0.15
    mlm_warmup_steps: int = 0
    perturbation: PerturbationConfig | None = None
    domain_weight: float = 1.0
    status_weight: float = 1.0
    categorical_weight: float = 1.0
    span_weight: float = 1.0
    inactive_weight: float = 1.0  # status-CE class weight; 1.0 = no re-weighting
    lr_warmup_steps: int = 20
    checkpoint_every: int = 0  # 0: final checkpoint only
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        for name in ("mlm_weight", "domain_weight", "status_weight",
                     "categorical_weight", "span_weight", "inactive_weight"):
            if getattr(self, name) < 0:
                raise TrainingDiverged(f"{name} must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise TrainingDiverged("steps and batch_size must be >= 1")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise TrainingDiverged(f"mask_prob {self.mask_prob} not in [0, 1]")
        if self.status_mode not in STATUS_MODES:
            raise TrainingDiverged(f"unknown status_mode {self.status_mode!r}")
        if self.mlm_mode not in MLM_MODES:
            raise TrainingDiverged(f"unknown mlm_mode {self.mlm_mode!r}")

    def to_json(self) -> dict:
        doc = dict(self.__dict__)
        doc["encoder"] = self.encoder.to_json()
        doc["perturbation"] = self.perturbation.to_json() if self.perturbation else None
        return doc


def train_config_from_json(doc: dict) -> TrainConfig:
    doc = dict(doc)
    if doc.get("encoder") is not None:
        doc["encoder"] = EncoderConfig(**doc["encoder"])
    if doc.get("perturbation") is not None:
        doc["perturbation"] = perturbation_config_from_json(doc["perturbation"])
    return TrainConfig(**doc)


@dataclass(frozen=True)
class LossBreakdown:
    domain_bce: float
    status_ce: float
    categorical_ce: float
    span_ce: float
    mlm: float
    dst_total: float
    total: float
    skipped_spans: int = 0

    def __post_init__(self):
        parts = (self.domain_bce, self.status_ce, self.categorical_ce,
                 self.span_ce, self.mlm)
        if any(p < -1e-9 for p in parts):
            raise TrainingDiverged(f"negative loss component in {parts}")
        if abs(self.dst_total - sum(parts[:4])) > 1e-6:
            raise TrainingDiverged("dst_total does not match its components")
        if abs(self.total - (self.dst_total + self.mlm)) > 1e-6:
            raise TrainingDiverged("total does not match dst_total + mlm")

    @classmethod
    def make(cls, domain_bce, status_ce, categorical_ce, span_ce, mlm,
             skipped_spans=0) -> "LossBreakdown":
        dst = domain_bce + status_ce + categorical_ce + span_ce
        return cls(domain_bce, status_ce, categorical_ce, span_ce, mlm,
                   dst, dst + mlm, skipped_spans)

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class TrainExample:
    """Context prefix ending at a gold user turn, plus that turn's state."""

    dialogue_id: str
    turns: tuple[Turn, ...]
    gold: BeliefState


def find_last_subsequence(haystack: Sequence[int], needle: Sequence[int]):
    """(start, end) of the last occurrence of `needle`, or None."""
    if not needle or len(needle) > len(haystack):
        return None
    needle = list(needle)
    for start in range(len(haystack) - len(needle), -1, -1):
        if list(haystack[start : start + len(needle)]) == needle:
            return start, start + len(needle) - 1
    return None


def _gold_status(gold: BeliefState, name: str) -> str:
    entry = gold.get(name)
    return entry.status if entry is not None else INACTIVE


def gold_domain_indicator(schema, gold: BeliefState) -> list[float]:
    """A domain is gold-active iff any of its slots is non-inactive."""
    return [
        1.0 if any(_gold_status(gold, s.name) != INACTIVE for s in schema.domain_slots[d])
        else 0.0
        for d in schema.domains
    ]


def dst_loss(
    model: DstModel,
    examples: Sequence[TrainExample],
    mode: str = HIERARCHICAL,
    inactive_weight: float = 1.0,
    slot_enc: torch.Tensor | None = None,
    cand_enc: dict[str, torch.Tensor] | None = None,
) -> tuple[dict[str, torch.Tensor], dict[str, int]]:
    """Per-component DST losses for a batch, each a scalar tensor averaged
    over its own instances; missing instance classes contribute zero.

    Returns (losses, diagnostics) where diagnostics counts gold spans not
    findable in the (possibly truncated) context and gold categorical values
    outside the candidate list.
    """
    schema = model.schema
    for ex in examples:
        bad = validate_state(schema, ex.gold)
        if bad:
            raise CorpusError(f"gold state for {ex.dialogue_id!r} invalid: {bad}")

    ctxs = encode_contexts(model.encoder, model.vocab, [ex.turns for ex in examples])
    if slot_enc is None:
        slot_enc = model.encode_slots()
    if cand_enc is None:
        cand_enc = model.encode_candidates()
    names = schema.slot_names()

    status_weights = torch.ones(len(STATUSES))
    status_weights[STATUS_TO_IDX[INACTIVE]] = inactive_weight

    domain_losses: list[torch.Tensor] = []
    status_logits: list[torch.Tensor] = []
    status_targets: list[int] = []
    cat_losses: list[torch.Tensor] = []
    span_losses: list[torch.Tensor] = []
    skipped_spans = 0
    skipped_categorical = 0

    for ex, ctx in zip(examples, ctxs):
        logits = model.domain_head(ctx.sequence)
        indicator = torch.tensor(gold_domain_indicator(schema, ex.gold),
                                 dtype=logits.dtype)
        domain_losses.append(F.binary_cross_entropy_with_logits(logits, indicator))

        if mode == HIERARCHICAL:
            forced = [d for d, on in zip(schema.domains, indicator.tolist()) if on]
        else:
            forced = list(schema.domains)
        slots = [s for d in forced for s in schema.domain_slots[d]]
        if slots:
            idx = [names.index(s.name) for s in slots]
            status_logits.append(model.status_head(slot_enc[idx], ctx.sequence))
            status_targets.extend(
                STATUS_TO_IDX[_gold_status(ex.gold, s.name)] for s in slots
            )

        for slot in schema.slots:
            entry = ex.gold.get(slot.name)
            if entry is None or entry.status != ACTIVE:
                continue
            vec = slot_enc[names.index(slot.name)]
            if slot.kind == CATEGORICAL:
                if entry.value not in slot.candidate_values:
                    skipped_categorical += 1
                    continue
                scores = model.categorical_head(vec, ctx.pooled, ctx.sequence,
                                                cand_enc[slot.name])
                target = torch.tensor([slot.candidate_values.index(entry.value)])
                cat_losses.append(F.cross_entropy(scores[None], target))
            else:
                value_ids = model.vocab.encode(entry.value)
                span = find_last_subsequence(ctx.token_ids, value_ids)
                if span is None:
                    skipped_spans += 1
                    continue
                s_logits, e_logits = model.span_head(ctx.sequence, vec)
                span_losses.append(
                    F.cross_entropy(s_logits[None], torch.tensor([span[0]]))
                    + F.cross_entropy(e_logits[None], torch.tensor([span[1]]))
                )

    def _mean(parts: list[torch.Tensor]) -> torch.Tensor:
        return torch.stack(parts).mean() if parts else torch.zeros(())

    if status_logits:
        status_loss = F.cross_entropy(
            torch.cat(status_logits),
            torch.tensor(status_targets),
            weight=status_weights.to(status_logits[0].dtype),
        )
    else:
        status_loss = torch.zeros(())
    losses = {
        "domain_bce": _mean(domain_losses),
        "status_ce": status_loss,
        "categorical_ce": _mean(cat_losses),
        "span_ce": _mean(span_losses),
    }
    diagnostics = {"skipped_spans": skipped_spans,
                   "skipped_categorical": skipped_categorical}
    return losses, diagnostics


# ---------------------------------------------------------------------------
# the loop


def _locate(perturbed: Dialogue, turn: Turn) -> int:
    for i, t in enumerate(perturbed.turns):
        if t is turn:
            return i
    raise TrainingDiverged("perturbation lost an original turn")


def _make_batch(corpus, picks, cfg, aux_pool, word_vocab, perturb_rng):
    examples = []
    for dialogue, idx in picks:
        turn = dialogue.turns[idx]
        if cfg.perturbation is not None:
            pcfg = cfg.perturbation
            pool: Sequence[str] = ()
            if pcfg.source == "auxiliary":
                pool = aux_pool or ()
            elif pcfg.source == "target":
                pool = corpus.all_utterances()
            dialogue = perturb_dialogue(dialogue, pcfg, pool, perturb_rng,
                                        vocab=word_vocab)
            idx = _locate(dialogue, turn)
        examples.append(TrainExample(dialogue.id, dialogue.turns[: idx + 1],
                                     turn.gold_state or {}))
    return examples


def save_checkpoint(model: DstModel, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "model.pt")
    model.vocab.save(directory / "vocab.txt")
    save_schema(model.schema, directory / "schema.json")
    (directory / "encoder.json").write_text(
        json.dumps(model.cfg.to_json(), indent=2) + "\n", encoding="utf-8"
    )
    return directory


def load_checkpoint(directory: str | Path) -> DstModel:
    directory = Path(directory)
    schema = load_schema(directory / "schema.json")
    vocab = Vocabulary.load(directory / "vocab.txt")
    cfg = EncoderConfig(**json.loads((directory / "encoder.json").read_text()))
    model = DstModel(schema, cfg, vocab)
    model.load_state_dict(torch.load(directory / "model.pt", weights_only=True))
    model.eval()
    return model


def train(
    corpus: Corpus,
    config: TrainConfig,
    aux_pool: Sequence[str] | None = None,
    run_dir: str | Path | None = None,
) -> tuple[DstModel, list[LossBreakdown]]:
    """Fine-tune a fresh model on `corpus`; returns (model, per-step metrics).

    When `run_dir` is given, writes `metrics.jsonl` ({step, lr, losses} per
    line) and checkpoints under `step-{n}/`.
    """
    if not corpus.dialogues:
        raise CorpusError("training corpus is empty")
    pairs = list(iter_gold_examples(corpus))
    if not pairs:
        raise CorpusError("training corpus has no gold user turns")

    needs_aux = config.mlm_mode == MLM_TARGET_AUX or (
        config.perturbation is not None and config.perturbation.source == "auxiliary"
    )
    if needs_aux and not aux_pool:
        raise CorpusError("configuration needs an auxiliary pool but none was given")

    torch.set_num_threads(1)  # keeps reductions bit-stable run to run
    torch.manual_seed(substream_seed(config.seed, "init"))
    texts = corpus.all_utterances() + (list(aux_pool) if aux_pool else [])
    vocab = build_vocab(texts, schema_texts(corpus.schema))
    enc_cfg = EncoderConfig(**{**config.encoder.to_json(), "vocab_size": len(vocab)})
    model = DstModel(corpus.schema, enc_cfg, vocab)
    optimizer = torch.optim.RMSprop(model.parameters(), lr=config.learning_rate)

    batch_rng = substream(config.seed, "batch")
    perturb_rng = substream(config.seed, "perturb")
    mask_rng = substream(config.seed, "mask")
    word_vocab = vocab.word_tokens()
    target_pool = corpus.all_utterances()

    mlm_on = config.mlm_mode != MLM_OFF and config.mlm_weight > 0

    run_path = Path(run_dir) if run_dir is not None else None
    metrics_fh = None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "train_config.json").write_text(
            json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        metrics_fh = open(run_path / "metrics.jsonl", "w", encoding="utf-8")

    metrics: list[LossBreakdown] = []
    try:
        for step in range(1, config.steps + 1):
            warm = config.lr_warmup_steps
            lr = config.learning_rate * (min(1.0, step / warm) if warm > 0 else 1.0)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()

            mlm_only = mlm_on and step <= config.mlm_warmup_steps
            if mlm_only:
                losses = {k: torch.zeros(()) for k in
                          ("domain_bce", "status_ce", "categorical_ce", "span_ce")}
                diag = {"skipped_spans": 0}
            else:
                picks = [pairs[batch_rng.randrange(len(pairs))]
                         for _ in range(config.batch_size)]
                batch = _make_batch(corpus, picks, config, aux_pool, word_vocab,
                                    perturb_rng)
                losses, diag = dst_loss(model, batch, mode=config.status_mode,
                                        inactive_weight=config.inactive_weight)

            if mlm_on:
                texts = [target_pool[mask_rng.randrange(len(target_pool))]
                         for _ in range(config.batch_size)]
                if config.mlm_mode == MLM_TARGET_AUX:
                    texts += [aux_pool[mask_rng.randrange(len(aux_pool))]
                              for _ in range(config.batch_size)]
                mlm = mlm_loss_on_texts(model.encoder, vocab, texts,
                                        config.mask_prob, mask_rng)
            else:
                mlm = torch.zeros(())

            weighted = {
                "domain_bce": config.domain_weight * losses["domain_bce"],
                "status_ce": config.status_weight * losses["status_ce"],
                "categorical_ce": config.categorical_weight * losses["categorical_ce"],
                "span_ce": config.span_weight * losses["span_ce"],
                "mlm": config.mlm_weight * mlm,
            }
            total = sum(weighted.values())
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at step {step}")

            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            breakdown = LossBreakdown.make(
                *(float(weighted[k].detach()) for k in
                  ("domain_bce", "status_ce", "categorical_ce", "span_ce", "mlm")),
                skipped_spans=diag["skipped_spans"],
            )
            metrics.append(breakdown)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(
                    {"step": step, "lr": lr, "losses": breakdown.to_json()},
                    sort_keys=True) + "\n")
                cadence = config.checkpoint_every
                if cadence and step % cadence == 0 and step != config.steps:
                    save_checkpoint(model, run_path / f"step-{step}")
        if run_path is not None:
            save_checkpoint(model, run_path / f"step-{config.steps}")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    model.eval()
    return model, metrics


def set_oracle_statuses(
    model: DstModel,
    corpus: Corpus,
    predictions: Sequence[TurnPrediction] | None = None,
    mode: str = HIERARCHICAL,
) -> list[TurnPrediction]:
    """Replace predicted statuses by gold ones and re-run the value heads,
    so values exist exactly for gold-active slots (the cheating evaluation).

    When `predictions` is given it must cover every gold user turn; the
    returned list is aligned with the corpus traversal order.
    """
    if predictions is not None:
        have = {(p.dialogue_id, p.turn_index) for p in predictions}
        want = {(d.id, idx) for d, idx in iter_gold_examples(corpus)}
        missing = sorted(want - have)
        if missing:
            raise EvaluationError(f"predictions missing for gold turns: {missing[:5]}")

    was_training = model.training
    model.eval()
    with torch.no_grad():
        slot_enc = model.encode_slots()
        cand_enc = model.encode_candidates()
    out: list[TurnPrediction] = []
    names = model.schema.slot_names()
    for dialogue, idx in iter_gold_examples(corpus):
        gold = dialogue.turns[idx].gold_state or {}
        override = {n: _gold_status(gold, n) for n in names}
        out.append(
            model.predict_turn(
                dialogue.turns[: idx + 1],
                dialogue.id,
                idx,
                mode=mode,
                slot_enc=slot_enc,
                cand_enc=cand_enc,
                status_override=override,
            )
        )
    model.train(was_training)
    return out
