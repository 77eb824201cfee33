"""Training-time utterance insertion.

With probability `p` a dialogue gets exactly `n` distractor turns inserted
at turn boundaries; original turns keep their order and gold states
untouched, and inserted turns never carry a state. Insertion sources are
an auxiliary pool, the target corpus itself, or random-word utterances.

Position policies: `random_boundary` places insertions at any boundary
(including before the first and after the last turn); `after_user_only` /
`after_agent_only` anchor each insertion right after a non-inserted turn
of that speaker. When several insertions share one anchor they form a
consecutive block behind it.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Sequence

from . import PerturbationError
from .corpus import AGENT, USER, Dialogue, Turn

SOURCES = ("auxiliary", "target", "random_words")
POSITION_POLICIES = ("random_boundary", "after_user_only", "after_agent_only")

RANDOM_WORD_MIN_LEN = 4
RANDOM_WORD_MAX_LEN = 16


@dataclass(frozen=True)
class PerturbationConfig:
    probability: float = 0.2
    num_insertions: int = 2
    source: str = "auxiliary"
    position_policy: str = "random_boundary"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise PerturbationError(f"probability {self.probability} not in [0, 1]")
        if self.num_insertions < 1:
            raise PerturbationError("num_insertions must be >= 1")
        if self.source not in SOURCES:
            raise PerturbationError(f"unknown source {self.source!r}")
        if self.position_policy not in POSITION_POLICIES:
            raise PerturbationError(f"unknown position policy {self.position_policy!r}")

    def to_json(self) -> dict:
        return dict(self.__dict__)


def perturbation_config_from_json(doc: dict) -> PerturbationConfig:
    return PerturbationConfig(**doc)


def random_word_utterance(length: int, vocab: Sequence[str], rng: random.Random) -> str:
    if length < 1:
        raise PerturbationError("random-word utterance length must be >= 1")
    if not vocab:
        raise PerturbationError("random-word vocabulary is empty")
    return " ".join(rng.choice(vocab) for _ in range(length))


def _sample_utterances(cfg, pool, vocab, rng, n):
    if cfg.source == "random_words":
        return [
            random_word_utterance(
                rng.randint(RANDOM_WORD_MIN_LEN, RANDOM_WORD_MAX_LEN), vocab, rng
            )
            for _ in range(n)
        ]
    if not pool:
        raise PerturbationError(f"utterance pool is empty (source={cfg.source})")
    if len(pool) >= n:
        return rng.sample(list(pool), n)
    return [rng.choice(list(pool)) for _ in range(n)]


def perturb_dialogue(
    dialogue: Dialogue,
    cfg: PerturbationConfig,
    pool: Sequence[str],
    rng: random.Random,
    vocab: Sequence[str] | None = None,
) -> Dialogue:
    """Return the dialogue with distractor turns inserted (prob `cfg.probability`),
    otherwise the input unchanged."""
    if cfg.source == "random_words" and not vocab:
        raise PerturbationError("random_words source needs a token vocabulary")
    if cfg.source != "random_words" and not pool:
        raise PerturbationError(f"utterance pool is empty (source={cfg.source})")
    if rng.random() >= cfg.probability:
        return dialogue

    n = cfg.num_insertions
    texts = _sample_utterances(cfg, pool, vocab, rng, n)

    if cfg.position_policy == "random_boundary":
        anchors = list(range(len(dialogue.turns) + 1))  # boundary before turn i
    elif cfg.position_policy == "after_user_only":
        anchors = [i + 1 for i, t in enumerate(dialogue.turns)
                   if t.speaker == USER and not t.inserted]
    else:
        anchors = [i + 1 for i, t in enumerate(dialogue.turns)
                   if t.speaker == AGENT and not t.inserted]
    if not anchors:
        return dialogue  # nothing to anchor to under this policy

    if len(anchors) >= n:
        chosen = rng.sample(anchors, n)
    else:
        chosen = [rng.choice(anchors) for _ in range(n)]
    chosen.sort()

    # group per anchor so blocks stay consecutive and speakers alternate
    inserts: dict[int, list[Turn]] = {}
    for anchor in sorted(set(chosen)):
        count = chosen.count(anchor)
        block = []
        for j in range(count):
            if cfg.position_policy == "random_boundary":
                speaker = rng.choice((USER, AGENT))
            else:
                preceding = USER if cfg.position_policy == "after_user_only" else AGENT
                first = AGENT if preceding == USER else USER
                speaker = first if j % 2 == 0 else preceding
            block.append(Turn(speaker=speaker, text=texts.pop(0), inserted=True))
        inserts[anchor] = block

    out: list[Turn] = []
    for i, turn in enumerate(dialogue.turns):
        out.extend(inserts.get(i, ()))
        out.append(turn)
    out.extend(inserts.get(len(dialogue.turns), ()))
    return replace(dialogue, turns=tuple(out))


def perturb_batch(
    batch: Sequence[Dialogue],
    cfg: PerturbationConfig,
    pool: Sequence[str],
    rng: random.Random,
    vocab: Sequence[str] | None = None,
) -> list[Dialogue]:
    """Apply `perturb_dialogue` independently per example; the expected
    perturbed fraction equals `cfg.probability`."""
    return [perturb_dialogue(d, cfg, pool, rng, vocab=vocab) for d in batch]


def strip_inserted(dialogue: Dialogue) -> Dialogue:
    return replace(dialogue, turns=dialogue.original_turns())
