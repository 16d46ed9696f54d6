"""Demand specifications and their ground-truth predicates.

A predicate is a small JSON-serializable dict decidable from a user's
future-window events alone; `derive_label` is the exact oracle every
targeting metric is scored against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ConfigError

PREDICATE_KINDS = ("purchase", "browse", "search", "click", "channel")


@dataclass
class DemandSpec:
    scenario_id: str
    sentence: str
    predicate: dict
    base_rate: float
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.base_rate < 1.0:
            raise ConfigError(f"scenario {self.scenario_id}: base rate {self.base_rate} outside (0,1)")
        kind = self.predicate.get("kind")
        if kind not in PREDICATE_KINDS:
            raise ConfigError(f"scenario {self.scenario_id}: unknown predicate kind {kind!r}")

    def to_json(self) -> dict:
        return {"scenario_id": self.scenario_id, "sentence": self.sentence,
                "predicate": self.predicate, "base_rate": self.base_rate, "tags": self.tags}

    @classmethod
    def from_json(cls, row: dict) -> "DemandSpec":
        return cls(row["scenario_id"], row["sentence"], row["predicate"],
                   row["base_rate"], list(row.get("tags", [])))


def evaluate_predicate(predicate: dict, events) -> int:
    """Exact evaluation of a predicate on a list of (future) events."""
    kind = predicate["kind"]
    if kind == "purchase":
        min_amount = predicate.get("min_amount")
        hits = [e for e in events
                if e.modality == "paybill" and e.success and e.category == predicate["category"]]
        if not hits:
            return 0
        if min_amount is None:
            return 1
        return int(sum(e.amount for e in hits) > min_amount)
    if kind == "browse":
        return int(any(e.modality == "miniprogram" and e.program == predicate["program"]
                       for e in events))
    if kind == "search":
        return int(any(e.modality == "search" and predicate["term"] in e.query for e in events))
    if kind == "click":
        return int(any(e.modality == "spm" and e.page == predicate["page"] for e in events))
    if kind == "channel":
        return int(any(e.modality == "paybill" and e.channel == predicate["channel"]
                       for e in events))
    raise ConfigError(f"unknown predicate kind {kind!r}")


def derive_label(user, demand: DemandSpec, future_start: int) -> int:
    """Ground-truth label: does the user's future activity satisfy the demand."""
    future = [e for e in user.events if e.window >= future_start]
    return evaluate_predicate(demand.predicate, future)
