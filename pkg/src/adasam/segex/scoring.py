"""Score standardization onto a common range, and the per-item average."""

from __future__ import annotations

from collections.abc import Iterable

from .criteria import ORDINAL_MAX, ORDINAL_MIN, Criterion

DEFAULT_RANGE = (1.0, 4.0)


def standardize(score: int, criterion: Criterion, r_min: float = DEFAULT_RANGE[0],
                r_max: float = DEFAULT_RANGE[1]) -> float:
    """Map a raw score onto [r_min, r_max]: ordinal 1..4 affinely, binary
    scores multiplied by r_max (so a binary 0 lands at 0, below r_min when
    r_min > 0 -- that is the protocol's rule, not an accident)."""
    if r_min >= r_max:
        raise ValueError("need r_min < r_max")
    if not criterion.valid_score(score):
        raise ValueError(f"score {score} invalid for {criterion.id} ({criterion.kind})")
    if criterion.kind == "binary":
        return float(score) * r_max
    span = ORDINAL_MAX - ORDINAL_MIN
    return r_min + (score - ORDINAL_MIN) / span * (r_max - r_min)


def e_avg(scores: dict[str, int], criteria: Iterable[Criterion],
          r_min: float = DEFAULT_RANGE[0], r_max: float = DEFAULT_RANGE[1]) -> float:
    """Mean of the standardized scores over the full criteria set; raising on
    gaps keeps partially rated items out of the summary statistics."""
    criteria = list(criteria)
    missing = [c.id for c in criteria if c.id not in scores]
    if missing:
        raise ValueError(f"missing criteria: {', '.join(missing)}")
    values = [standardize(scores[c.id], c, r_min, r_max) for c in criteria]
    return sum(values) / len(values)
