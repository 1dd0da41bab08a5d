"""Machine observer: sends each blinded item's mask rendering to a text
backend with a fixed instruction template and parses one integer per
criterion. The backend is pluggable; tests run against the deterministic
mock, and a minimal HTTP backend covers live use."""

from __future__ import annotations

import base64
import hashlib
import json
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field

from .criteria import ORDINAL_MAX, ORDINAL_MIN, Criterion, criterion_by_id
from .session import ObserverRating, SegExSession, record_rating

DEFAULT_SKIP = ("SD",)
MAX_ATTEMPTS = 3

INSTRUCTION_TEMPLATE = """\
You are rating one medical segmentation mask image. Judge only what is visible
in the mask itself. For each criterion below, reply with exactly one line in
the form `ID: score` and nothing else.

{criteria_block}
"""


class TransientBackendError(RuntimeError):
    """Retryable failure (timeouts, connection loss, 5xx)."""


@dataclass
class LlmRequest:
    item_id: str
    prompt: str
    image_png: bytes
    criteria: tuple[Criterion, ...]


def build_prompt(criteria: list[Criterion]) -> str:
    lines = []
    for criterion in criteria:
        if criterion.kind == "binary":
            scale = "0 or 1"
        else:
            scale = f"integer {ORDINAL_MIN}-{ORDINAL_MAX}, {ORDINAL_MIN} best"
        lines.append(f"- {criterion.id} ({scale}): {criterion.description}")
    return INSTRUCTION_TEMPLATE.format(criteria_block="\n".join(lines))


def parse_scores(text: str, criteria: list[Criterion]) -> dict[str, int]:
    """Extract `ID: score` lines; anything missing or out of range raises."""
    scores: dict[str, int] = {}
    for criterion in criteria:
        match = re.search(rf"^\s*{criterion.id}\s*[:=]\s*(-?\d+)\s*$", text, re.MULTILINE)
        if match is None:
            raise ValueError(f"no score line for {criterion.id}")
        score = int(match.group(1))
        if not criterion.valid_score(score):
            raise ValueError(f"score {score} out of range for {criterion.id}")
        scores[criterion.id] = score
    return scores


class MockBackend:
    """Deterministic stand-in: scores derived from a hash of (item, criterion),
    biased toward the good end like a lenient rater."""

    def __init__(self, salt: str = ""):
        self.salt = salt
        self.calls = 0

    def __call__(self, request: LlmRequest) -> str:
        self.calls += 1
        lines = []
        for criterion in request.criteria:
            digest = hashlib.sha256(
                f"{self.salt}|{request.item_id}|{criterion.id}".encode()
            ).digest()
            if criterion.kind == "binary":
                score = digest[0] % 2
            else:
                score = ORDINAL_MIN + digest[0] % 3  # 1..3, sparing the worst grade
            lines.append(f"{criterion.id}: {score}")
        return "\n".join(lines)


class HttpBackend:
    """POSTs {prompt, image_b64} as JSON and expects {"text": ...} back."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, request: LlmRequest) -> str:
        body = json.dumps(
            {
                "prompt": request.prompt,
                "image_b64": base64.b64encode(request.image_png).decode(),
            }
        ).encode()
        http_request = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode())
        except urllib.error.HTTPError as exc:
            if exc.code >= 500:
                raise TransientBackendError(f"backend returned {exc.code}") from exc
            raise
        except (urllib.error.URLError, TimeoutError) as exc:
            raise TransientBackendError(str(exc)) from exc
        return payload["text"]


def llm_observe(
    session: SegExSession,
    backend,
    observer_id: str,
    skip: tuple[str, ...] = DEFAULT_SKIP,
    render=None,
) -> tuple[list[ObserverRating], list[dict]]:
    """Rate every item with the backend, mask-only payloads, retrying
    transient failures up to 3 attempts per item. Unparseable responses land
    in the returned quarantine list (and quarantine.log) instead of becoming
    fabricated scores."""
    spec = session.observer(observer_id)
    criteria = [criterion_by_id(cid) for cid in spec.criteria if cid not in skip]
    if not criteria:
        raise ValueError("skip set removes every criterion")
    prompt = build_prompt(criteria)
    if render is None:
        render = lambda item: (session.root / item.mask).read_bytes()

    ratings: list[ObserverRating] = []
    quarantined: list[dict] = []
    for item in session.items:
        request = LlmRequest(
            item_id=item.id, prompt=prompt, image_png=render(item), criteria=tuple(criteria)
        )
        entry = None
        for attempt in range(1, MAX_ATTEMPTS + 1):
            try:
                text = backend(request)
            except TransientBackendError as exc:
                entry = {"item": item.id, "reason": f"backend failure: {exc}", "attempts": attempt}
                continue
            try:
                scores = parse_scores(text, criteria)
            except ValueError as exc:
                entry = {"item": item.id, "reason": f"unparseable response: {exc}", "attempts": attempt}
                break  # malformed output is not transient; quarantine it
            rating = ObserverRating(observer=observer_id, item=item.id, scores=scores)
            record_rating(session, rating)
            ratings.append(rating)
            entry = None
            break
        if entry is not None:
            quarantined.append(entry)

    if quarantined:
        with open(session.root / "quarantine.log", "a") as handle:
            for entry in quarantined:
                handle.write(json.dumps(entry, sort_keys=True) + "\n")
    return ratings, quarantined
