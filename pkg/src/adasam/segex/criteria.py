"""Rating criteria: four ordinal 1-4 scales (1 best, 4 worst) plus one binary
correction-needed decision. Wording stays neutral so a rater cannot infer
whether a mask is a reference annotation or model output."""

from __future__ import annotations

from dataclasses import dataclass

ORDINAL_MIN = 1
ORDINAL_MAX = 4


@dataclass(frozen=True)
class Criterion:
    id: str
    kind: str  # "ordinal" or "binary"
    description: str

    def valid_score(self, score: int) -> bool:
        if self.kind == "binary":
            return score in (0, 1)
        return ORDINAL_MIN <= score <= ORDINAL_MAX

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "description": self.description}

    @classmethod
    def from_dict(cls, d: dict) -> "Criterion":
        return cls(id=d["id"], kind=d["kind"], description=d["description"])


CRITERIA: tuple[Criterion, ...] = (
    Criterion("MQ", "ordinal", "Overall mask quality: holes, ragged edges, stray islands."),
    Criterion("MB", "ordinal", "How well the outline follows the muscle border, neither spilling out nor cutting in."),
    Criterion("CN", "binary", "Would a clinician have to edit this mask before using it? 0 = no, 1 = yes."),
    Criterion("SD", "ordinal", "Whether the delineated area is a plausible size for the structure shown."),
    Criterion("DC", "ordinal", "Confidence that volume measurements from this mask could inform a clinical read."),
)


def criterion_by_id(criterion_id: str) -> Criterion:
    for criterion in CRITERIA:
        if criterion.id == criterion_id:
            return criterion
    raise KeyError(f"unknown criterion {criterion_id!r}")
