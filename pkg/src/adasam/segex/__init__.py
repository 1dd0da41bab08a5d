"""SegEx: blinded expert assessment of segmentation masks.

Ground-truth and model masks are shuffled into anonymous items; human raters
see image+mask overlays, machine raters see masks only, and nobody sees the
source. Scores standardize onto a common range and aggregate per observer,
source, and muscle.
"""

from .criteria import CRITERIA, Criterion, criterion_by_id
from .llm import LlmRequest, MockBackend, TransientBackendError, llm_observe
from .scoring import e_avg, standardize
from .session import (
    ObserverRating,
    ObserverSpec,
    SegExSession,
    SessionItem,
    aggregate,
    build_session,
    load_session,
    observer_payload,
    record_rating,
)

__all__ = [
    "CRITERIA",
    "Criterion",
    "criterion_by_id",
    "standardize",
    "e_avg",
    "SegExSession",
    "SessionItem",
    "ObserverSpec",
    "ObserverRating",
    "build_session",
    "load_session",
    "observer_payload",
    "record_rating",
    "aggregate",
    "llm_observe",
    "MockBackend",
    "LlmRequest",
    "TransientBackendError",
]
