"""Task ontology: domains, slots and candidate values.

A slot is either categorical (closed candidate value set, e.g. price
range) or non-categorical (value extracted as a text span, e.g. a
departure time). Slot statuses used throughout the codebase are the
strings in `STATUSES`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import SchemaError

CATEGORICAL = "categorical"
NONCATEGORICAL = "noncategorical"

ACTIVE = "active"
DONTCARE = "dontcare"
INACTIVE = "inactive"
STATUSES = (ACTIVE, DONTCARE, INACTIVE)


@dataclass(frozen=True)
class SlotSpec:
    """One slot of the ontology; `name` is the string fed to the encoder."""

    name: str
    domain: str
    kind: str
    candidate_values: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, NONCATEGORICAL):
            raise SchemaError(f"slot {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if len(set(self.candidate_values)) < 2:
                raise SchemaError(
                    f"categorical slot {self.name!r} needs >=2 distinct candidate values"
                )
        elif self.candidate_values:
            raise SchemaError(
                f"non-categorical slot {self.name!r} must not list candidate values"
            )


@dataclass(frozen=True)
class Schema:
    """Immutable after construction; iteration order is declaration order."""

    domains: tuple[str, ...]
    slots: tuple[SlotSpec, ...]
    domain_slots: dict[str, tuple[SlotSpec, ...]] = field(init=False, repr=False)
    by_name: dict[str, SlotSpec] = field(init=False, repr=False)

    def __post_init__(self):
        seen: set[str] = set()
        for slot in self.slots:
            if slot.name in seen:
                raise SchemaError(f"duplicate slot name {slot.name!r}")
            seen.add(slot.name)
            if slot.domain not in self.domains:
                raise SchemaError(
                    f"slot {slot.name!r} references unknown domain {slot.domain!r}"
                )
        ds = {d: tuple(s for s in self.slots if s.domain == d) for d in self.domains}
        object.__setattr__(self, "domain_slots", ds)
        object.__setattr__(self, "by_name", {s.name: s for s in self.slots})

    @property
    def categorical(self) -> tuple[SlotSpec, ...]:
        return tuple(s for s in self.slots if s.kind == CATEGORICAL)

    @property
    def noncategorical(self) -> tuple[SlotSpec, ...]:
        return tuple(s for s in self.slots if s.kind == NONCATEGORICAL)

    def slot_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots)

    def to_json(self) -> dict:
        return {
            "domains": list(self.domains),
            "slots": [
                {
                    "name": s.name,
                    "domain": s.domain,
                    "kind": s.kind,
                    "values": list(s.candidate_values),
                }
                for s in self.slots
            ],
        }


def schema_from_json(doc: dict) -> Schema:
    if not isinstance(doc, dict) or "domains" not in doc or "slots" not in doc:
        raise SchemaError("schema document must contain 'domains' and 'slots'")
    slots = []
    for raw in doc["slots"]:
        try:
            slots.append(
                SlotSpec(
                    name=raw["name"],
                    domain=raw["domain"],
                    kind=raw["kind"],
                    candidate_values=tuple(raw.get("values", ())),
                )
            )
        except KeyError as exc:
            raise SchemaError(f"slot record {raw!r} missing field {exc}") from exc
    return Schema(domains=tuple(doc["domains"]), slots=tuple(slots))


def load_schema(path: str | Path) -> Schema:
    """Load and validate a schema JSON file (see `Schema.to_json` layout)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"cannot parse schema file {path}: {exc}") from exc
    return schema_from_json(doc)


def save_schema(schema: Schema, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(schema.to_json(), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def validate_state(schema: Schema, state: dict) -> list[str]:
    """Check a belief state against the schema; violations come back as strings.

    `state` maps slot name -> object with `.status` / `.value` attributes or a
    `{"status": ..., "value": ...}` mapping.
    """
    violations = []
    for name, entry in state.items():
        status, value = _status_value(entry)
        slot = schema.by_name.get(name)
        if slot is None:
            violations.append(f"unknown slot {name!r}")
            continue
        if status not in STATUSES:
            violations.append(f"slot {name!r}: unknown status {status!r}")
            continue
        if status == ACTIVE:
            if not value:
                violations.append(f"slot {name!r}: active status with empty value")
            elif slot.kind == CATEGORICAL and value not in slot.candidate_values:
                violations.append(
                    f"slot {name!r}: value {value!r} not in candidate values"
                )
        elif value:
            violations.append(f"slot {name!r}: status {status} must have empty value")
    return violations


def _status_value(entry) -> tuple[str, str]:
    if isinstance(entry, dict):
        return entry.get("status", ""), entry.get("value", "")
    return entry.status, entry.value
