"""Prediction stack: domain activation, hierarchical slot status, and
value prediction (categorical choice / span extraction).

The hierarchical path predicts active domains first and forces every slot
of an inactive domain to status "inactive" without evaluating the status
head; the flat baseline scores all slots. Both share the same parameters,
so hierarchical prediction with every domain forced active reduces exactly
to the flat baseline.

Value heads run only for slots whose predicted status is "active".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import DstLabError
from .corpus import BeliefState, Dialogue, SlotState, Turn
from .encoder import (
    NUM_SPECIALS,
    ContextEncoding,
    EncoderConfig,
    TransformerEncoder,
    Vocabulary,
    encode_context,
    encode_texts,
)
from .schema import ACTIVE, CATEGORICAL, DONTCARE, INACTIVE, STATUSES, Schema, SlotSpec

HIERARCHICAL = "hierarchical"
FLAT = "flat"
STATUS_MODES = (HIERARCHICAL, FLAT)

STATUS_TO_IDX = {s: i for i, s in enumerate(STATUSES)}


class PooledAttention(nn.Module):
    """Single-head scaled dot-product attention pooling with learned
    query/key/value projections. Queries (Q, d) against keys (L, d)."""

    def __init__(self, d: int):
        super().__init__()
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.scale = math.sqrt(d)

    def forward(self, query: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        single = query.dim() == 1
        if single:
            query = query[None]
        q = self.wq(query)
        k = self.wk(keys)
        v = self.wv(keys)
        attn = torch.softmax(q @ k.T / self.scale, dim=-1)
        out = attn @ v
        return out[0] if single else out


class DomainHead(nn.Module):
    """Learned query attends over the context; a linear layer maps the
    attended vector to one logit per domain."""

    def __init__(self, d: int, num_domains: int):
        super().__init__()
        self.query = nn.Parameter(torch.randn(d) * 0.02)
        self.atten = PooledAttention(d)
        self.proj = nn.Linear(d, num_domains)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        return self.proj(self.atten(self.query, seq))


class StatusHead(nn.Module):
    """Three-way status classifier on (slot encoding + attended context).

    `slots_scored` counts how many slots the head has actually evaluated;
    hierarchical gating must skip it entirely for slots of inactive domains.
    """

    def __init__(self, d: int):
        super().__init__()
        self.atten = PooledAttention(d)
        self.proj = nn.Linear(d, len(STATUSES))
        self.slots_scored = 0

    def forward(self, slot_enc: torch.Tensor, seq: torch.Tensor) -> torch.Tensor:
        """slot_enc (S, d) -> logits (S, 3)."""
        self.slots_scored += slot_enc.shape[0]
        attended = self.atten(slot_enc, seq)
        return self.proj(slot_enc + attended)

    def reset_counter(self) -> None:
        self.slots_scored = 0


class CategoricalHead(nn.Module):
    """Scores candidate values by dot product between (pooled context +
    slot-conditioned attended vector) and the encoded candidate names."""

    def __init__(self, d: int):
        super().__init__()
        self.atten = PooledAttention(d)

    def forward(
        self,
        slot_enc: torch.Tensor,
        pooled: torch.Tensor,
        seq: torch.Tensor,
        cand_enc: torch.Tensor,
    ) -> torch.Tensor:
        """slot_enc (d,), pooled (d,), cand_enc (V, d) -> scores (V,)."""
        attended = self.atten(slot_enc, seq)
        return cand_enc @ (pooled + attended)


class SpanHead(nn.Module):
    """Start/end scorers over the context rows, each concatenated with the
    slot encoding (the row-broadcast in the prediction procedure)."""

    def __init__(self, d: int):
        super().__init__()
        self.start = nn.Linear(2 * d, 1)
        self.end = nn.Linear(2 * d, 1)

    def forward(self, seq: torch.Tensor, slot_enc: torch.Tensor):
        """seq (L, d), slot_enc (d,) -> (start logits (L,), end logits (L,))."""
        joined = torch.cat([seq, slot_enc[None].expand(seq.shape[0], -1)], dim=-1)
        return self.start(joined).squeeze(-1), self.end(joined).squeeze(-1)


@dataclass
class TurnPrediction:
    dialogue_id: str
    turn_index: int
    domain_probs: dict[str, float]
    active_domains: list[str]
    slot_statuses: dict[str, str]
    categorical_values: dict[str, str]
    spans: dict[str, tuple[int, int, str]] = field(default_factory=dict)

    def __post_init__(self):
        active = {s for s, st in self.slot_statuses.items() if st == ACTIVE}
        valued = set(self.categorical_values) | set(self.spans)
        if valued != active:
            raise DstLabError(
                f"values present for {sorted(valued)} but active slots are {sorted(active)}"
            )

    def value_for(self, slot: str) -> str | None:
        if slot in self.categorical_values:
            return self.categorical_values[slot]
        if slot in self.spans:
            return self.spans[slot][2]
        return None

    def to_state(self) -> BeliefState:
        state: BeliefState = {}
        for slot, status in self.slot_statuses.items():
            if status == ACTIVE:
                state[slot] = SlotState(ACTIVE, self.value_for(slot) or "")
            elif status == DONTCARE:
                state[slot] = SlotState(DONTCARE)
        return state

    def to_json(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "turn_index": self.turn_index,
            "domain_probs": {d: round(p, 6) for d, p in self.domain_probs.items()},
            "active_domains": list(self.active_domains),
            "slot_statuses": dict(self.slot_statuses),
            "categorical_values": dict(self.categorical_values),
            "spans": {s: list(v) for s, v in self.spans.items()},
        }


def prediction_from_json(obj: dict) -> TurnPrediction:
    return TurnPrediction(
        dialogue_id=obj["dialogue_id"],
        turn_index=int(obj["turn_index"]),
        domain_probs={k: float(v) for k, v in obj.get("domain_probs", {}).items()},
        active_domains=list(obj.get("active_domains", [])),
        slot_statuses=dict(obj["slot_statuses"]),
        categorical_values=dict(obj.get("categorical_values", {})),
        spans={s: (int(v[0]), int(v[1]), str(v[2])) for s, v in obj.get("spans", {}).items()},
    )


def write_predictions(path: str | Path, predictions: Sequence[TurnPrediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pred in predictions:
            fh.write(json.dumps(pred.to_json(), sort_keys=True) + "\n")


def load_predictions(path: str | Path) -> dict[tuple[str, int], TurnPrediction]:
    out: dict[tuple[str, int], TurnPrediction] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            pred = prediction_from_json(json.loads(line))
            out[(pred.dialogue_id, pred.turn_index)] = pred
    return out


class DstModel(nn.Module):
    def __init__(self, schema: Schema, cfg: EncoderConfig, vocab: Vocabulary):
        super().__init__()
        if cfg.vocab_size == 0:
            cfg = EncoderConfig(**{**cfg.to_json(), "vocab_size": len(vocab)})
        if cfg.vocab_size != len(vocab):
            raise DstLabError(
                f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}"
            )
        self.schema = schema
        self.vocab = vocab
        self.cfg = cfg
        self.encoder = TransformerEncoder(cfg)
        self.domain_head = DomainHead(cfg.hidden_dim, len(schema.domains))
        self.status_head = StatusHead(cfg.hidden_dim)
        self.categorical_head = CategoricalHead(cfg.hidden_dim)
        self.span_head = SpanHead(cfg.hidden_dim)

    # -- shared encodings ---------------------------------------------------

    def encode_slots(self) -> torch.Tensor:
        """(num_slots, d) pooled encodings of slot names, schema order."""
        return encode_texts(self.encoder, self.vocab, self.schema.slot_names())

    def encode_candidates(self) -> dict[str, torch.Tensor]:
        """Per categorical slot, (num_values, d) encodings of value names."""
        out = {}
        for slot in self.schema.categorical:
            out[slot.name] = encode_texts(self.encoder, self.vocab, slot.candidate_values)
        return out

    def encode_turns(self, turns: Sequence[Turn]) -> ContextEncoding:
        return encode_context(self.encoder, self.vocab, turns)

    def _slot_index(self, name: str) -> int:
        return self.schema.slot_names().index(name)

    # -- Algorithm heads ----------------------------------------------------

    def predict_domains(self, ctx: ContextEncoding) -> tuple[dict[str, float], list[str]]:
        """Per-domain sigmoid probabilities; active iff strictly above 0.5,
        so an exactly-0.5 tie resolves to inactive."""
        logits = self.domain_head(ctx.sequence)
        probs = torch.sigmoid(logits).detach()
        prob_map = {d: float(probs[i]) for i, d in enumerate(self.schema.domains)}
        active = [d for d in self.schema.domains if prob_map[d] > 0.5]
        return prob_map, active

    def predict_statuses(
        self,
        ctx: ContextEncoding,
        slot_enc: torch.Tensor,
        active_domains: Sequence[str],
        mode: str = HIERARCHICAL,
    ) -> dict[str, str]:
        if mode not in STATUS_MODES:
            raise DstLabError(f"unknown status mode {mode!r}")
        # Flat scoring reuses the hierarchical path with every domain treated
        # as active, so the reduction to the baseline is exact (bitwise).
        gate = set(active_domains) if mode == HIERARCHICAL else set(self.schema.domains)
        names = self.schema.slot_names()
        statuses: dict[str, str] = {}
        for domain in self.schema.domains:
            slots = self.schema.domain_slots[domain]
            if domain not in gate:
                for slot in slots:
                    statuses[slot.name] = INACTIVE
                continue
            idx = [names.index(s.name) for s in slots]
            logits = self.status_head(slot_enc[idx], ctx.sequence)
            choice = np.argmax(logits.detach().numpy(), axis=1)
            for slot, c in zip(slots, choice):
                statuses[slot.name] = STATUSES[int(c)]
        return statuses

    def predict_categorical(
        self,
        ctx: ContextEncoding,
        slot: SlotSpec,
        slot_enc: torch.Tensor,
        cand_enc: torch.Tensor,
    ) -> str:
        if slot.kind != CATEGORICAL:
            raise DstLabError(f"categorical value head called on span slot {slot.name!r}")
        scores = self.categorical_head(slot_enc, ctx.pooled, ctx.sequence, cand_enc)
        # np.argmax picks the lowest index on ties, which fixes the decision.
        return slot.candidate_values[int(np.argmax(scores.detach().numpy()))]

    def predict_span(
        self, ctx: ContextEncoding, slot: SlotSpec, slot_enc: torch.Tensor
    ) -> tuple[int, int, str]:
        if slot.kind == CATEGORICAL:
            raise DstLabError(f"span head called on categorical slot {slot.name!r}")
        start_logits, end_logits = self.span_head(ctx.sequence, slot_enc)
        # Position 0 is [CLS]; the span search covers everything after it.
        start = 1 + int(np.argmax(start_logits.detach().numpy()[1:]))
        end = 1 + int(np.argmax(end_logits.detach().numpy()[1:]))
        if end < start:
            return start, end, ""
        ids = ctx.token_ids[start : end + 1]
        if any(t < NUM_SPECIALS for t in (ctx.token_ids[start], ctx.token_ids[end])):
            return start, end, ""
        return start, end, self.vocab.detokenize(ids)

    # -- composition ----------------------------------------------------------

    def predict_turn(
        self,
        turns: Sequence[Turn],
        dialogue_id: str,
        turn_index: int,
        mode: str = HIERARCHICAL,
        slot_enc: torch.Tensor | None = None,
        cand_enc: dict[str, torch.Tensor] | None = None,
        status_override: dict[str, str] | None = None,
        ctx: ContextEncoding | None = None,
    ) -> TurnPrediction:
        """Full prediction for one dialogue prefix, in head order: domains,
        statuses (gated under hierarchical mode), then values for slots whose
        status came out active. `status_override` replaces the predicted
        statuses before value prediction (oracle-status evaluation)."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                if ctx is None:
                    ctx = self.encode_turns(turns)
                if slot_enc is None:
                    slot_enc = self.encode_slots()
                if cand_enc is None:
                    cand_enc = self.encode_candidates()
                probs, active_domains = self.predict_domains(ctx)
                statuses = self.predict_statuses(ctx, slot_enc, active_domains, mode)
                if status_override is not None:
                    statuses = {
                        name: status_override.get(name, INACTIVE)
                        for name in self.schema.slot_names()
                    }
                cat_values: dict[str, str] = {}
                spans: dict[str, tuple[int, int, str]] = {}
                for slot in self.schema.slots:
                    if statuses[slot.name] != ACTIVE:
                        continue
                    vec = slot_enc[self._slot_index(slot.name)]
                    if slot.kind == CATEGORICAL:
                        cat_values[slot.name] = self.predict_categorical(
                            ctx, slot, vec, cand_enc[slot.name]
                        )
                    else:
                        spans[slot.name] = self.predict_span(ctx, slot, vec)
        finally:
            self.train(was_training)
        return TurnPrediction(
            dialogue_id=dialogue_id,
            turn_index=turn_index,
            domain_probs=probs,
            active_domains=active_domains,
            slot_statuses=statuses,
            categorical_values=cat_values,
            spans=spans,
        )

    def predict_dialogue(self, dialogue: Dialogue, mode: str = HIERARCHICAL):
        """Predictions for every gold user turn, each from the dialogue
        prefix up to and including that turn."""
        was_training = self.training
        self.eval()
        with torch.no_grad():
            slot_enc = self.encode_slots()
            cand_enc = self.encode_candidates()
        self.train(was_training)
        preds = []
        for idx, _turn in dialogue.gold_user_turns():
            preds.append(
                self.predict_turn(
                    dialogue.turns[: idx + 1],
                    dialogue.id,
                    idx,
                    mode=mode,
                    slot_enc=slot_enc,
                    cand_enc=cand_enc,
                )
            )
        return preds
