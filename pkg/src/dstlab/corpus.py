"""Dialogue data model, dialogue-JSON ingestion, and a synthetic generator.

File format (one dialogue per array element, UTF-8):

    [ { "id": "...",
        "turns": [ {"speaker": "user"|"agent", "text": "...", "inserted": false,
                    "state": {"slot": {"status": "...", "value": "..."}}}, ... ] }, ... ]

`state` is present exactly on non-inserted user turns and lists only
non-inactive slots; absent slots are inactive. Gold states are cumulative
within a dialogue.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

from . import CorpusError
from .schema import ACTIVE, DONTCARE, INACTIVE, NONCATEGORICAL, Schema, validate_state
from .seeding import substream

USER = "user"
AGENT = "agent"


@dataclass(frozen=True)
class SlotState:
    status: str
    value: str = ""


BeliefState = dict[str, SlotState]


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str
    inserted: bool = False
    gold_state: BeliefState | None = None


@dataclass(frozen=True)
class Dialogue:
    id: str
    turns: tuple[Turn, ...]

    @property
    def num_utterances(self) -> int:
        return len(self.turns)

    def original_turns(self) -> tuple[Turn, ...]:
        return tuple(t for t in self.turns if not t.inserted)

    def gold_user_turns(self) -> list[tuple[int, Turn]]:
        """(index, turn) for every non-inserted user turn carrying a gold state."""
        return [
            (i, t)
            for i, t in enumerate(self.turns)
            if t.speaker == USER and not t.inserted and t.gold_state is not None
        ]


@dataclass(frozen=True)
class Corpus:
    schema: Schema
    dialogues: tuple[Dialogue, ...]
    split: str = "train"

    def num_gold_turns(self) -> int:
        return sum(len(d.gold_user_turns()) for d in self.dialogues)

    def all_utterances(self) -> list[str]:
        return [t.text for d in self.dialogues for t in d.turns]


# ---------------------------------------------------------------------------
# serialization


def state_to_json(state: BeliefState) -> dict:
    return {k: {"status": v.status, "value": v.value} for k, v in state.items()}


def state_from_json(doc: dict) -> BeliefState:
    return {
        k: SlotState(status=v.get("status", ""), value=v.get("value", ""))
        for k, v in doc.items()
    }


def dialogue_to_json(d: Dialogue) -> dict:
    turns = []
    for t in d.turns:
        rec = {"speaker": t.speaker, "text": t.text, "inserted": t.inserted}
        if t.gold_state is not None:
            rec["state"] = state_to_json(t.gold_state)
        turns.append(rec)
    return {"id": d.id, "turns": turns}


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    docs = [dialogue_to_json(d) for d in corpus.dialogues]
    Path(path).write_text(
        json.dumps(docs, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def corpus_hash(corpus: Corpus) -> str:
    """Identity hash over schema + dialogue content, stable across runs."""
    blob = json.dumps(
        {
            "schema": corpus.schema.to_json(),
            "dialogues": [dialogue_to_json(d) for d in corpus.dialogues],
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _check_alternation(d_id: str, turns: tuple[Turn, ...]) -> None:
    original = [t for t in turns if not t.inserted]
    for i, t in enumerate(original):
        expected = USER if i % 2 == 0 else AGENT
        if t.speaker != expected:
            raise CorpusError(
                f"dialogue {d_id!r}: non-inserted turn {i} has speaker "
                f"{t.speaker!r}, expected {expected!r}"
            )


def ingest_multiwoz(path: str | Path, schema: Schema, split: str = "train") -> Corpus:
    """Read a MultiWOZ-style dialogue-JSON file into a validated Corpus."""
    path = Path(path)
    try:
        docs = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"cannot parse corpus file {path}: {exc}") from exc
    if not isinstance(docs, list):
        raise CorpusError(f"corpus file {path} must hold a JSON array of dialogues")

    dialogues = []
    for doc in docs:
        d_id = doc.get("id") if isinstance(doc, dict) else None
        if not isinstance(doc, dict) or d_id is None or "turns" not in doc:
            raise CorpusError(f"malformed dialogue record (id={d_id!r})")
        turns = []
        for j, rec in enumerate(doc["turns"]):
            try:
                speaker = rec["speaker"]
                text = rec["text"]
            except (TypeError, KeyError):
                raise CorpusError(f"dialogue {d_id!r}: malformed turn {j}")
            if speaker not in (USER, AGENT):
                raise CorpusError(f"dialogue {d_id!r}: unknown speaker {speaker!r}")
            inserted = bool(rec.get("inserted", False))
            gold = None
            if "state" in rec:
                if inserted:
                    raise CorpusError(
                        f"dialogue {d_id!r}: inserted turn {j} carries a state"
                    )
                gold = state_from_json(rec["state"])
                violations = validate_state(schema, gold)
                if violations:
                    raise CorpusError(
                        f"dialogue {d_id!r} turn {j}: " + "; ".join(violations)
                    )
            turns.append(Turn(speaker=speaker, text=text, inserted=inserted, gold_state=gold))
        _check_alternation(d_id, tuple(turns))
        dialogues.append(Dialogue(id=d_id, turns=tuple(turns)))
    return Corpus(schema=schema, dialogues=tuple(dialogues), split=split)


# ---------------------------------------------------------------------------
# built-in lab schema and templates


def default_schema() -> Schema:
    from .schema import schema_from_json

    return schema_from_json(
        {
            "domains": ["restaurant", "hotel", "train", "attraction"],
            "slots": [
                {"name": "restaurant-food", "domain": "restaurant", "kind": "categorical",
                 "values": ["italian", "chinese", "indian", "british", "french", "thai"]},
                {"name": "restaurant-pricerange", "domain": "restaurant", "kind": "categorical",
                 "values": ["cheap", "moderate", "expensive"]},
                {"name": "restaurant-name", "domain": "restaurant", "kind": "noncategorical"},
                {"name": "hotel-stars", "domain": "hotel", "kind": "categorical",
                 "values": ["1", "2", "3", "4", "5"]},
                {"name": "hotel-area", "domain": "hotel", "kind": "categorical",
                 "values": ["north", "south", "east", "west", "centre"]},
                {"name": "hotel-name", "domain": "hotel", "kind": "noncategorical"},
                {"name": "train-day", "domain": "train", "kind": "categorical",
                 "values": ["monday", "tuesday", "wednesday", "thursday", "friday",
                            "saturday", "sunday"]},
                {"name": "train-destination", "domain": "train", "kind": "categorical",
                 "values": ["cambridge", "london", "norwich", "peterborough", "ely"]},
                {"name": "train-leaveat", "domain": "train", "kind": "noncategorical"},
                {"name": "attraction-type", "domain": "attraction", "kind": "categorical",
                 "values": ["museum", "park", "cinema", "theatre"]},
                {"name": "attraction-area", "domain": "attraction", "kind": "categorical",
                 "values": ["north", "south", "east", "west", "centre"]},
                {"name": "attraction-name", "domain": "attraction", "kind": "noncategorical"},
            ],
        }
    )


@dataclass(frozen=True)
class TemplateBank:
    """Utterance templates for the synthetic generator, keyed by slot name.

    `inform`/`revise` templates take a `{value}` placeholder; `offer` templates
    are agent turns introducing an entity (so span answers can originate on the
    agent side); `span_values` banks the surface forms for non-categorical
    slots.
    """

    inform: dict[str, tuple[str, ...]]
    dontcare: dict[str, tuple[str, ...]]
    revise: dict[str, tuple[str, ...]]
    request: dict[str, tuple[str, ...]]
    offer: dict[str, tuple[str, ...]]
    accept: tuple[str, ...]
    ack: tuple[str, ...]
    chitchat: tuple[str, ...]
    span_values: dict[str, tuple[str, ...]]

    def is_empty(self) -> bool:
        return not (self.inform and self.ack and self.chitchat)


def _times() -> tuple[str, ...]:
    return tuple(f"{h:02d}:{m:02d}" for h in range(5, 24) for m in (0, 15, 30, 45))


def default_template_bank() -> TemplateBank:
    return TemplateBank(
        inform={
            "restaurant-food": (
                "i am looking for a {value} restaurant .",
                "i would like {value} food .",
                "find me a place serving {value} food .",
            ),
            "restaurant-pricerange": (
                "i want something in the {value} price range .",
                "the restaurant should be {value} .",
            ),
            "restaurant-name": (
                "book me a table at {value} .",
                "i want to eat at {value} .",
            ),
            "hotel-stars": (
                "the hotel should have {value} stars .",
                "i prefer a {value} star hotel .",
            ),
            "hotel-area": (
                "the hotel should be in the {value} part of town .",
                "i want to stay in the {value} .",
            ),
            "hotel-name": (
                "i want to stay at {value} .",
                "please book {value} for me .",
            ),
            "train-day": (
                "i am leaving on {value} .",
                "the train should run on {value} .",
            ),
            "train-destination": (
                "the train should go to {value} .",
                "i am travelling to {value} .",
            ),
            "train-leaveat": (
                "i want to leave at {value} .",
                "the train should leave at {value} .",
            ),
            "attraction-type": (
                "i want to visit a {value} .",
                "is there a good {value} around ?",
            ),
            "attraction-area": (
                "something in the {value} of town would be nice .",
                "i will be around the {value} .",
            ),
            "attraction-name": (
                "i want to visit {value} .",
                "tell me more about {value} .",
            ),
        },
        dontcare={
            "restaurant-food": ("any kind of food is fine .",),
            "restaurant-pricerange": ("i do not care about the price range .",),
            "restaurant-name": ("any restaurant will do .",),
            "hotel-stars": ("the star rating does not matter .",),
            "hotel-area": ("any part of town is fine for the hotel .",),
            "hotel-name": ("any hotel will do .",),
            "train-day": ("any day works for me .",),
            "train-destination": ("i do not mind where the train goes .",),
            "train-leaveat": ("the departure time does not matter .",),
            "attraction-type": ("any type of attraction is fine .",),
            "attraction-area": ("i do not care which area the attraction is in .",),
            "attraction-name": ("any attraction will do .",),
        },
        revise={
            "restaurant-food": ("actually , i would rather have {value} food .",),
            "restaurant-pricerange": ("actually , make it {value} instead .",),
            "restaurant-name": ("actually , book {value} instead .",),
            "hotel-stars": ("actually , i want {value} stars instead .",),
            "hotel-area": ("actually , the {value} side would be better .",),
            "hotel-name": ("actually , i would rather stay at {value} .",),
            "train-day": ("actually , i will travel on {value} instead .",),
            "train-destination": ("actually , i need to go to {value} instead .",),
            "train-leaveat": ("actually , i want to leave at {value} instead .",),
            "attraction-type": ("actually , a {value} sounds better .",),
            "attraction-area": ("actually , somewhere in the {value} instead .",),
            "attraction-name": ("actually , i would rather see {value} .",),
        },
        request={
            "restaurant-name": ("can you recommend a restaurant ?",),
            "hotel-name": (
                "can you suggest a hotel ?",
                "i need a place to stay , any suggestions ?",
            ),
            "train-leaveat": ("what trains are available ?",),
            "attraction-name": ("what attractions are there to visit ?",),
        },
        offer={
            "restaurant-name": (
                "i recommend {value} , it is very popular .",
                "how about {value} ?",
            ),
            "hotel-name": (
                "there is {value} , it is a lovely place .",
                "you could stay at {value} .",
            ),
            "train-leaveat": (
                "there is a train leaving at {value} .",
                "i have a train departing at {value} .",
            ),
            "attraction-name": (
                "you could visit {value} .",
                "many people enjoy {value} .",
            ),
        },
        accept=(
            "that sounds good , thank you .",
            "perfect , let us go with that .",
            "great , please book it .",
        ),
        ack=(
            "okay , noted .",
            "sure , i can help with that .",
            "alright , let me check .",
            "no problem at all .",
        ),
        chitchat=(
            "by the way , the weather is lovely today .",
            "thanks for being so helpful .",
            "i am visiting for the weekend .",
            "this city is quite charming .",
            "sorry , i was distracted for a moment .",
        ),
        span_values={
            "restaurant-name": (
                "golden palace", "curry prince", "the oak bistro", "river side grill",
                "little saigon", "the copper kettle", "blue spice", "city stop restaurant",
            ),
            "hotel-name": (
                "a and b guest house", "alpha house", "city lodge", "the gables",
                "rose cottage", "arbury lodge", "home from home", "worth house",
            ),
            "train-leaveat": _times(),
            "attraction-name": (
                "castle museum", "north park", "grand arcade cinema", "corn exchange theatre",
                "old chapel gallery", "riverside walk", "science centre", "botanic gardens",
            ),
        },
    )


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthConfig:
    num_dialogues: int = 200
    min_user_turns: int = 2
    max_user_turns: int = 6
    domain_switch_prob: float = 0.3
    chitchat_prob: float = 0.12
    dontcare_prob: float = 0.08
    offer_prob: float = 0.35
    revision_prob: float = 0.10
    slot_keep_prob: float = 0.8
    id_prefix: str = "syn"

    def to_json(self) -> dict:
        return dict(self.__dict__)


def synth_config_from_json(doc: dict) -> SynthConfig:
    return SynthConfig(**doc)


def _pick_value(slot, bank: TemplateBank, rng, forbid: str | None = None) -> str:
    if slot.kind == NONCATEGORICAL:
        pool = bank.span_values[slot.name]
    else:
        pool = slot.candidate_values
    choices = [v for v in pool if v != forbid] or list(pool)
    return rng.choice(choices)


def generate_synthetic(
    config: SynthConfig,
    seed: int,
    schema: Schema | None = None,
    bank: TemplateBank | None = None,
    split: str = "train",
) -> Corpus:
    """Deterministic synthetic corpus: cumulative gold states, span values
    guaranteed to appear verbatim in a prior-or-current utterance."""
    schema = schema or default_schema()
    bank = bank or default_template_bank()
    if not schema.slots:
        raise CorpusError("cannot generate dialogues for a schema with no slots")
    if bank.is_empty():
        raise CorpusError("template bank is empty")
    missing = [s.name for s in schema.slots if not bank.inform.get(s.name)]
    if missing:
        raise CorpusError(f"template bank lacks inform templates for: {missing}")

    dialogues = tuple(
        _generate_dialogue(f"{config.id_prefix}-{i:05d}", config, schema, bank,
                           substream(seed, "dialogue", split, i))
        for i in range(config.num_dialogues)
    )
    return Corpus(schema=schema, dialogues=dialogues, split=split)


def _plan_events(domains, config, schema, bank, rng):
    """Per-domain slot events: ('inform'|'dontcare'|'offer', slot)."""
    events = []
    for domain in domains:
        slots = list(schema.domain_slots[domain])
        rng.shuffle(slots)
        kept = [s for s in slots if rng.random() < config.slot_keep_prob]
        if not kept:
            kept = [slots[0]]
        domain_events = []
        for slot in kept:
            if rng.random() < config.dontcare_prob:
                domain_events.append(("dontcare", slot))
            elif (
                slot.kind == NONCATEGORICAL
                and slot.name in bank.offer
                and slot.name in bank.request
                and rng.random() < config.offer_prob
            ):
                domain_events.append(("offer", slot))
            else:
                domain_events.append(("inform", slot))
        events.append(domain_events)
    return events


def _generate_dialogue(d_id, config, schema, bank, rng) -> Dialogue:
    n_user = rng.randint(config.min_user_turns, config.max_user_turns)
    want_switch = len(schema.domains) >= 2 and rng.random() < config.domain_switch_prob
    k = 2 if want_switch and n_user >= 2 else 1
    domains = rng.sample(list(schema.domains), k)
    per_domain = _plan_events(domains, config, schema, bank, rng)
    if k == 2 and per_domain[1] and per_domain[1][0][0] == "offer":
        # the second domain's first event must cost a single user turn so it
        # always fits the remaining turn budget
        kind, slot = per_domain[1][0]
        per_domain[1][0] = ("inform", slot)
    events = [ev for dom in per_domain for ev in dom]
    second_domain_start = len(per_domain[0]) if k == 2 else None

    state: dict[str, SlotState] = {}
    turns: list[Turn] = []
    next_event = 0
    turns_emitted = 0

    def emit_user(text, agent_text=None):
        nonlocal turns_emitted
        turns.append(Turn(USER, text, gold_state=dict(state)))
        turns.append(Turn(AGENT, agent_text if agent_text is not None else rng.choice(bank.ack)))
        turns_emitted += 1

    def emit_event(idx):
        kind, slot = events[idx]
        if kind == "dontcare":
            state[slot.name] = SlotState(DONTCARE, "")
            emit_user(rng.choice(bank.dontcare[slot.name]))
        elif kind == "offer":
            value = _pick_value(slot, bank, rng)
            offer_text = rng.choice(bank.offer[slot.name]).format(value=value)
            emit_user(rng.choice(bank.request[slot.name]), agent_text=offer_text)
            state[slot.name] = SlotState(ACTIVE, value)
            emit_user(rng.choice(bank.accept))
        else:
            value = _pick_value(slot, bank, rng)
            state[slot.name] = SlotState(ACTIVE, value)
            emit_user(rng.choice(bank.inform[slot.name]).format(value=value))

    def event_cost(idx):
        return 2 if events[idx][0] == "offer" else 1

    def switch_pending():
        return second_domain_start is not None and not any(
            schema.by_name[n].domain == domains[1] for n in state
        )

    while turns_emitted < n_user:
        remaining = n_user - turns_emitted
        if switch_pending() and remaining <= 1:
            # last turn and the second domain is still unmentioned: jump to its
            # first event (always cost 1 by construction)
            next_event = second_domain_start
            emit_event(next_event)
            next_event += 1
            continue
        budget = remaining - (1 if switch_pending() else 0)
        have_event = next_event < len(events)
        if have_event and event_cost(next_event) > budget:
            next_event += 1  # offer pattern no longer fits; drop the event
            continue
        if have_event and rng.random() >= config.chitchat_prob:
            emit_event(next_event)
            next_event += 1
        elif not have_event and rng.random() < config.revision_prob:
            revisable = [n for n, st in state.items() if st.status == ACTIVE
                         and bank.revise.get(n)]
            if revisable:
                name = rng.choice(revisable)
                slot = schema.by_name[name]
                value = _pick_value(slot, bank, rng, forbid=state[name].value)
                state[name] = SlotState(ACTIVE, value)
                emit_user(rng.choice(bank.revise[name]).format(value=value))
            else:
                emit_user(rng.choice(bank.chitchat))
        else:
            emit_user(rng.choice(bank.chitchat))

    return Dialogue(id=d_id, turns=tuple(turns))


# ---------------------------------------------------------------------------
# auxiliary utterance pool


_AUX_STARTS = ("could you", "would you", "can you please", "i would like to", "we need to")
_AUX_VERBS = ("confirm", "update", "review", "double check", "cancel", "reschedule")
_AUX_NOUNS = ("booking", "reservation", "itinerary", "schedule", "ticket",
              "appointment", "invoice")
_AUX_TAILS = ("for me ?", "when you get a chance ?", "before tomorrow ?",
              "as soon as possible .", "and let me know .", "at the front desk .")


def _synthetic_aux_pool(seed: int, size: int) -> list[str]:
    combos = list(itertools.product(_AUX_STARTS, _AUX_VERBS, _AUX_NOUNS, _AUX_TAILS))
    rng = substream(seed, "aux-pool")
    picked = rng.sample(combos, min(size, len(combos)))
    return [f"{a} {v} the {n} {t}" for a, v, n, t in picked]


def auxiliary_corpus(
    source: str | Path = "synthetic",
    *,
    seed: int = 0,
    size: int = 400,
    exclude: Iterable[str] = (),
) -> list[str]:
    """Flat pool of utterances for continued MLM and perturbation sampling.

    `source` is either the literal "synthetic" or a path to a newline-delimited
    text file. Utterances listed in `exclude` (e.g. the target corpus) are
    dropped so an "auxiliary" pool never overlaps the target data.
    """
    if str(source) == "synthetic":
        pool = _synthetic_aux_pool(seed, size)
    else:
        lines = Path(source).read_text(encoding="utf-8").splitlines()
        pool = [ln.strip() for ln in lines if ln.strip()]
    banned = set(exclude)
    if banned:
        pool = [u for u in pool if u not in banned]
    if not pool:
        raise CorpusError("auxiliary utterance pool is empty")
    return pool


def iter_gold_examples(corpus: Corpus) -> Iterator[tuple[Dialogue, int]]:
    """(dialogue, turn_index) over every gold user turn, deterministic order."""
    for d in corpus.dialogues:
        for idx, _turn in d.gold_user_turns():
            yield d, idx
