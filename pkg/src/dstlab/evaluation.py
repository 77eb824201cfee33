"""Joint goal accuracy, length-bucketed metrics, component breakdown,
oracle-status evaluation, and report comparison.

A turn is jointly correct iff every schema slot's (status, value) matches
gold, where values are compared after normalization (lowercase, trim,
collapse internal whitespace) and "dontcare"/"inactive" match on status
alone. Buckets are the shortest/longest 30% of dialogues by non-inserted
utterance count, boundary ties included.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from . import EvaluationError
from .corpus import BeliefState, Corpus, corpus_hash, iter_gold_examples
from .dst_model import HIERARCHICAL, DstModel, TurnPrediction
from .schema import ACTIVE, CATEGORICAL, INACTIVE, Schema
from .training import set_oracle_statuses


def normalize_value(text: str) -> str:
    return " ".join(text.lower().split())


def _status_of(state: BeliefState, name: str) -> str:
    entry = state.get(name)
    return entry.status if entry is not None else INACTIVE


def states_match(schema: Schema, predicted: BeliefState, gold: BeliefState) -> bool:
    """Slot-for-slot equality over the whole schema; absent slots count as
    inactive, and values are consulted only when gold status is active."""
    for name in schema.slot_names():
        p_status = _status_of(predicted, name)
        g_status = _status_of(gold, name)
        if p_status != g_status:
            return False
        if g_status == ACTIVE:
            p_value = predicted[name].value or ""
            g_value = gold[name].value or ""
            if normalize_value(p_value) != normalize_value(g_value):
                return False
    return True


def _index_predictions(
    predictions: Sequence[TurnPrediction] | Mapping[tuple[str, int], TurnPrediction],
) -> dict[tuple[str, int], TurnPrediction]:
    if isinstance(predictions, Mapping):
        return dict(predictions)
    return {(p.dialogue_id, p.turn_index): p for p in predictions}


def _check_coverage(index, corpus: Corpus) -> None:
    missing = [
        (d.id, idx) for d, idx in iter_gold_examples(corpus) if (d.id, idx) not in index
    ]
    if missing:
        raise EvaluationError(f"missing predictions for gold turns: {missing[:10]}")


def joint_goal_accuracy(predictions, corpus: Corpus) -> float:
    index = _index_predictions(predictions)
    _check_coverage(index, corpus)
    total = 0
    correct = 0
    for dialogue, idx in iter_gold_examples(corpus):
        total += 1
        pred = index[(dialogue.id, idx)]
        gold = dialogue.turns[idx].gold_state or {}
        if states_match(corpus.schema, pred.to_state(), gold):
            correct += 1
    if total == 0:
        raise EvaluationError("corpus has no gold user turns")
    return correct / total


# ---------------------------------------------------------------------------
# length buckets


@dataclass(frozen=True)
class BucketThresholds:
    short_max_utts: int
    long_min_utts: int
    degenerate: bool = False  # buckets overlap (e.g. all dialogues equal length)

    def is_short(self, length: int) -> bool:
        return length <= self.short_max_utts

    def is_long(self, length: int) -> bool:
        return length >= self.long_min_utts


def thresholds_from_lengths(lengths: Sequence[int]) -> BucketThresholds:
    """Shortest/longest 30% by count: the short bucket is the smallest
    length-prefix holding at least 30% of dialogues (ties included), and
    symmetrically for long."""
    if not lengths:
        raise EvaluationError("cannot bucket an empty dialogue collection")
    ordered = sorted(lengths)
    n = len(ordered)
    k = math.ceil(0.3 * n)
    short_max = ordered[k - 1]
    long_min = ordered[n - k]
    return BucketThresholds(short_max, long_min, degenerate=short_max >= long_min)


def dialogue_length(dialogue) -> int:
    return len(dialogue.original_turns())


def bucket_thresholds(corpus: Corpus) -> BucketThresholds:
    return thresholds_from_lengths([dialogue_length(d) for d in corpus.dialogues])


# ---------------------------------------------------------------------------
# component breakdown

_BUCKETS = ("all", "short", "long")


def _turn_buckets(thresholds: BucketThresholds, length: int) -> tuple[str, ...]:
    buckets = ["all"]
    if thresholds.is_short(length):
        buckets.append("short")
    if thresholds.is_long(length):
        buckets.append("long")
    return tuple(buckets)


def component_breakdown(predictions, corpus: Corpus, thresholds: BucketThresholds):
    """Status accuracy over all (turn, slot) instances; value accuracies over
    gold-active instances of each slot kind. Empty denominators come back as
    None rather than 0."""
    index = _index_predictions(predictions)
    _check_coverage(index, corpus)
    schema = corpus.schema
    hits = {c: {b: 0 for b in _BUCKETS} for c in ("status", "categorical", "noncategorical")}
    totals = {c: {b: 0 for b in _BUCKETS} for c in ("status", "categorical", "noncategorical")}

    for dialogue, idx in iter_gold_examples(corpus):
        buckets = _turn_buckets(thresholds, dialogue_length(dialogue))
        pred = index[(dialogue.id, idx)]
        gold = dialogue.turns[idx].gold_state or {}
        for slot in schema.slots:
            g_status = _status_of(gold, slot.name)
            p_status = pred.slot_statuses.get(slot.name, INACTIVE)
            for b in buckets:
                totals["status"][b] += 1
                hits["status"][b] += int(p_status == g_status)
            if g_status != ACTIVE:
                continue
            kind = "categorical" if slot.kind == CATEGORICAL else "noncategorical"
            value = pred.value_for(slot.name)
            good = value is not None and normalize_value(value) == normalize_value(
                gold[slot.name].value or ""
            )
            for b in buckets:
                totals[kind][b] += 1
                hits[kind][b] += int(good)

    return {
        comp: {
            b: (hits[comp][b] / totals[comp][b] if totals[comp][b] else None)
            for b in _BUCKETS
        }
        for comp in hits
    }


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalReport:
    jga_all: float
    jga_short: float | None
    jga_long: float | None
    short_max_utts: int
    long_min_utts: int
    degenerate_buckets: bool
    components: dict
    oracle_jga: float | None
    num_dialogues: int
    num_turns: int
    bucket_counts: dict
    corpus_hash: str

    def __post_init__(self):
        for name in ("jga_all", "jga_short", "jga_long", "oracle_jga"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise EvaluationError(f"{name}={v} outside [0, 1]")
        if not self.degenerate_buckets:
            span = self.bucket_counts["short"]["turns"] + self.bucket_counts["long"]["turns"]
            if span > self.num_turns:
                raise EvaluationError("bucket turn counts exceed total turns")

    def to_json(self) -> dict:
        return {
            "jga": {"all": self.jga_all, "short": self.jga_short, "long": self.jga_long},
            "buckets": {
                "short_max_utts": self.short_max_utts,
                "long_min_utts": self.long_min_utts,
                "degenerate": self.degenerate_buckets,
                "counts": self.bucket_counts,
            },
            "components": self.components,
            "oracle_jga": self.oracle_jga,
            "num_dialogues": self.num_dialogues,
            "num_turns": self.num_turns,
            "corpus_hash": self.corpus_hash,
        }


def report_from_json(doc: dict) -> EvalReport:
    return EvalReport(
        jga_all=doc["jga"]["all"],
        jga_short=doc["jga"]["short"],
        jga_long=doc["jga"]["long"],
        short_max_utts=doc["buckets"]["short_max_utts"],
        long_min_utts=doc["buckets"]["long_min_utts"],
        degenerate_buckets=doc["buckets"]["degenerate"],
        components=doc["components"],
        oracle_jga=doc.get("oracle_jga"),
        num_dialogues=doc["num_dialogues"],
        num_turns=doc["num_turns"],
        bucket_counts=doc["buckets"]["counts"],
        corpus_hash=doc["corpus_hash"],
    )


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_report(path: str | Path) -> EvalReport:
    return report_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def evaluate(predictions, corpus: Corpus, oracle_jga: float | None = None) -> EvalReport:
    index = _index_predictions(predictions)
    thresholds = bucket_thresholds(corpus)
    components = component_breakdown(index, corpus, thresholds)

    def bucket_jga(bucket: str):
        total = 0
        correct = 0
        for dialogue, idx in iter_gold_examples(corpus):
            if bucket not in _turn_buckets(thresholds, dialogue_length(dialogue)):
                continue
            total += 1
            gold = dialogue.turns[idx].gold_state or {}
            correct += int(
                states_match(corpus.schema, index[(dialogue.id, idx)].to_state(), gold)
            )
        return (correct / total if total else None), total

    jga_all, num_turns = bucket_jga("all")
    jga_short, short_turns = bucket_jga("short")
    jga_long, long_turns = bucket_jga("long")
    if jga_all is None:
        raise EvaluationError("corpus has no gold user turns")

    lengths = [dialogue_length(d) for d in corpus.dialogues]
    bucket_counts = {
        "short": {
            "dialogues": sum(thresholds.is_short(n) for n in lengths),
            "turns": short_turns,
        },
        "long": {
            "dialogues": sum(thresholds.is_long(n) for n in lengths),
            "turns": long_turns,
        },
    }
    return EvalReport(
        jga_all=jga_all,
        jga_short=jga_short,
        jga_long=jga_long,
        short_max_utts=thresholds.short_max_utts,
        long_min_utts=thresholds.long_min_utts,
        degenerate_buckets=thresholds.degenerate,
        components=components,
        oracle_jga=oracle_jga,
        num_dialogues=len(corpus.dialogues),
        num_turns=num_turns,
        bucket_counts=bucket_counts,
        corpus_hash=corpus_hash(corpus),
    )


def predict_corpus(model: DstModel, corpus: Corpus, mode: str = HIERARCHICAL):
    preds: list[TurnPrediction] = []
    for dialogue in corpus.dialogues:
        preds.extend(model.predict_dialogue(dialogue, mode=mode))
    return preds


def oracle_status_eval(model: DstModel, corpus: Corpus, mode: str = HIERARCHICAL) -> float:
    """JGA after replacing predicted statuses with gold and re-running value
    heads (the cheating evaluation)."""
    oracle_preds = set_oracle_statuses(model, corpus, None, mode=mode)
    return joint_goal_accuracy(oracle_preds, corpus)


def evaluate_model(
    model: DstModel,
    corpus: Corpus,
    mode: str = HIERARCHICAL,
    with_oracle: bool = True,
) -> tuple[EvalReport, list[TurnPrediction]]:
    preds = predict_corpus(model, corpus, mode=mode)
    oracle = oracle_status_eval(model, corpus, mode=mode) if with_oracle else None
    return evaluate(preds, corpus, oracle_jga=oracle), preds


# ---------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class Comparison:
    corpus_hash: str
    gains: dict  # metric -> {before, after, relative_gain}

    def to_json(self) -> dict:
        return {"corpus_hash": self.corpus_hash, "gains": self.gains}

    def to_csv(self) -> str:
        lines = ["metric,before,after,relative_gain"]
        for metric in ("jga_short", "jga_long", "jga_all"):
            cell = self.gains[metric]
            gain = cell["relative_gain"]
            lines.append(
                f"{metric},{cell['before']},{cell['after']},"
                f"{'' if gain is None else gain}"
            )
        return "\n".join(lines) + "\n"


def relative_gain(before: float | None, after: float | None) -> float | None:
    if before is None or after is None or before == 0:
        return None
    return (after - before) / before


def compare_reports(before: EvalReport, after: EvalReport) -> Comparison:
    """Per-bucket relative JGA gains (after - before) / before; both reports
    must describe the same corpus."""
    if before.corpus_hash != after.corpus_hash:
        raise EvaluationError(
            "reports describe different corpora: "
            f"{before.corpus_hash[:12]} vs {after.corpus_hash[:12]}"
        )
    gains = {}
    for metric in ("jga_all", "jga_short", "jga_long", "oracle_jga"):
        b = getattr(before, metric)
        a = getattr(after, metric)
        gains[metric] = {"before": b, "after": a, "relative_gain": relative_gain(b, a)}
    return Comparison(corpus_hash=before.corpus_hash, gains=gains)
