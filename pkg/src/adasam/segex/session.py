"""Blinded sessions: building, persistence, rating intake, aggregation.

A session directory holds `session.json` (everything raters may learn),
`key.sealed` (item -> source, the only place sources exist), the append-only
`ratings.log`, per-item mask files, and optionally the underlying images for
human-facing overlay rendering. Serving the session cannot leak sources even
by misconfiguration because they are never in the served files.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..phantom import FOREGROUND_LABELS, LABEL_NAMES, load_mask, save_image, save_mask
from .criteria import CRITERIA, Criterion, criterion_by_id
from .scoring import DEFAULT_RANGE, e_avg, standardize

SESSION_VERSION = 1
SESSION_FILE = "session.json"
KEY_FILE = "key.sealed"
RATINGS_FILE = "ratings.log"

SOURCE_GROUND_TRUTH = "ground_truth"
SOURCE_PREDICTION = "prediction"


@dataclass(frozen=True)
class ObserverSpec:
    id: str
    token: str
    include_image: bool = True
    criteria: tuple[str, ...] = tuple(c.id for c in CRITERIA)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "token": self.token,
            "include_image": self.include_image,
            "criteria": list(self.criteria),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObserverSpec":
        return cls(
            id=d["id"],
            token=d["token"],
            include_image=bool(d["include_image"]),
            criteria=tuple(d["criteria"]),
        )


@dataclass(frozen=True)
class SessionItem:
    id: str
    slice: str
    mask: str
    muscles: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "slice": self.slice,
            "mask": self.mask,
            "muscles": list(self.muscles),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionItem":
        return cls(id=d["id"], slice=d["slice"], mask=d["mask"], muscles=tuple(d["muscles"]))


@dataclass
class ObserverRating:
    observer: str
    item: str
    scores: dict[str, int]
    timestamp: float = field(default_factory=time.time)

    def to_dict(self) -> dict:
        return {
            "observer": self.observer,
            "item": self.item,
            "scores": {k: int(v) for k, v in self.scores.items()},
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObserverRating":
        return cls(
            observer=d["observer"],
            item=d["item"],
            scores={k: int(v) for k, v in d["scores"].items()},
            timestamp=float(d["timestamp"]),
        )


@dataclass
class SegExSession:
    session_id: str
    seed: int
    items: list[SessionItem]
    observers: list[ObserverSpec]
    criteria: tuple[Criterion, ...] = CRITERIA
    score_range: tuple[float, float] = DEFAULT_RANGE
    root: Path = field(default_factory=Path)
    ratings: list[ObserverRating] = field(default_factory=list)

    def observer(self, observer_id: str) -> ObserverSpec:
        for spec in self.observers:
            if spec.id == observer_id:
                return spec
        raise KeyError(f"unknown observer {observer_id!r}")

    def item(self, item_id: str) -> SessionItem:
        for entry in self.items:
            if entry.id == item_id:
                return entry
        raise KeyError(f"unknown item {item_id!r}")

    def item_index(self, index: int) -> SessionItem:
        if not 0 <= index < len(self.items):
            raise IndexError(f"item index {index} outside [0, {len(self.items)})")
        return self.items[index]

    def authenticate(self, observer_id: str, token: str) -> ObserverSpec:
        spec = self.observer(observer_id)
        if spec.token != token:
            raise PermissionError(f"bad token for observer {observer_id!r}")
        return spec

    def latest_scores(self) -> dict[tuple[str, str, str], int]:
        """(observer, item, criterion) -> raw score, last write winning; the
        log itself keeps the full history as the audit trail."""
        latest: dict[tuple[str, str, str], int] = {}
        for rating in self.ratings:
            for criterion_id, score in rating.scores.items():
                latest[(rating.observer, rating.item, criterion_id)] = score
        return latest

    def to_dict(self) -> dict:
        return {
            "version": SESSION_VERSION,
            "session_id": self.session_id,
            "seed": self.seed,
            "range": list(self.score_range),
            "criteria": [c.to_dict() for c in self.criteria],
            "observers": [o.to_dict() for o in self.observers],
            "items": [i.to_dict() for i in self.items],
        }

    def save(self) -> Path:
        path = self.root / SESSION_FILE
        path.write_text(_canonical_json(self.to_dict()))
        log = self.root / RATINGS_FILE
        if not log.exists():
            log.touch()
        return path


def _canonical_json(data: dict) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _opaque_id(rng: np.random.Generator) -> str:
    return bytes(rng.integers(0, 256, size=6, dtype=np.uint8).tolist()).hex()


def _muscles_in(mask: np.ndarray) -> tuple[str, ...]:
    return tuple(LABEL_NAMES[label] for label in FOREGROUND_LABELS if (mask == label).any())


def build_session(
    gt_masks: dict[str, np.ndarray],
    pred_masks: dict[str, np.ndarray],
    seed: int,
    observers: list[ObserverSpec] | None,
    out_dir: Path | str,
    images: dict[str, np.ndarray] | None = None,
) -> SegExSession:
    """Interleave both sources for every slice under a seeded shuffle, write
    item masks under opaque ids, and seal item -> source into a separate key
    file that is never served."""
    if set(gt_masks) != set(pred_masks):
        only_gt = sorted(set(gt_masks) - set(pred_masks))
        only_pred = sorted(set(pred_masks) - set(gt_masks))
        raise ValueError(
            f"slice ids differ between sources (only reference: {only_gt}, only model: {only_pred})"
        )
    out_dir = Path(out_dir)
    (out_dir / "items").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    if observers is None:
        observers = [
            ObserverSpec(id="observer1", token=_opaque_id(rng)),
            ObserverSpec(id="observer2", token=_opaque_id(rng)),
        ]

    entries = [(slice_id, SOURCE_GROUND_TRUTH) for slice_id in sorted(gt_masks)]
    entries += [(slice_id, SOURCE_PREDICTION) for slice_id in sorted(pred_masks)]
    order = rng.permutation(len(entries))

    items: list[SessionItem] = []
    sources: dict[str, str] = {}
    for position in order:
        slice_id, source = entries[int(position)]
        mask = gt_masks[slice_id] if source == SOURCE_GROUND_TRUTH else pred_masks[slice_id]
        item_id = _opaque_id(rng)
        mask_rel = f"items/{item_id}.png"
        save_mask(mask, out_dir / mask_rel)
        items.append(
            SessionItem(id=item_id, slice=slice_id, mask=mask_rel, muscles=_muscles_in(mask))
        )
        sources[item_id] = source

    if images:
        (out_dir / "images").mkdir(exist_ok=True)
        for slice_id, image in images.items():
            save_image(image, out_dir / "images" / f"{slice_id}.png")

    session = SegExSession(
        session_id=_opaque_id(rng),
        seed=seed,
        items=items,
        observers=list(observers),
        root=out_dir,
    )
    session.save()
    (out_dir / KEY_FILE).write_text(
        _canonical_json({"session_id": session.session_id, "sources": sources})
    )
    return session


def load_session(session_dir: Path | str) -> SegExSession:
    root = Path(session_dir)
    data = json.loads((root / SESSION_FILE).read_text())
    session = SegExSession(
        session_id=data["session_id"],
        seed=int(data["seed"]),
        items=[SessionItem.from_dict(d) for d in data["items"]],
        observers=[ObserverSpec.from_dict(d) for d in data["observers"]],
        criteria=tuple(Criterion.from_dict(d) for d in data["criteria"]),
        score_range=tuple(data["range"]),
        root=root,
    )
    log = root / RATINGS_FILE
    if log.exists():
        for line in log.read_text().splitlines():
            if line.strip():
                session.ratings.append(ObserverRating.from_dict(json.loads(line)))
    return session


def load_key(session: SegExSession, key_path: Path | str | None = None) -> dict[str, str]:
    path = Path(key_path) if key_path is not None else session.root / KEY_FILE
    data = json.loads(path.read_text())
    if data.get("session_id") != session.session_id:
        raise ValueError("key file does not match this session")
    return data["sources"]


def record_rating(session: SegExSession, rating: ObserverRating) -> SegExSession:
    """Validate and persist one rating; a repeat for the same (observer, item,
    criterion) replaces the previous value while the log keeps both."""
    observer = session.observer(rating.observer)
    session.item(rating.item)
    if not rating.scores:
        raise ValueError("rating carries no scores")
    for criterion_id, score in rating.scores.items():
        if criterion_id not in observer.criteria:
            raise ValueError(f"criterion {criterion_id!r} not assigned to {observer.id!r}")
        criterion = criterion_by_id(criterion_id)
        if not criterion.valid_score(int(score)):
            raise ValueError(f"score {score} invalid for criterion {criterion_id}")
    with open(session.root / RATINGS_FILE, "a") as handle:
        handle.write(json.dumps(rating.to_dict(), sort_keys=True) + "\n")
    session.ratings.append(rating)
    return session


def completed_items(session: SegExSession, observer_id: str) -> set[str]:
    """Items this observer has fully rated (their whole criteria set)."""
    spec = session.observer(observer_id)
    latest = session.latest_scores()
    done = set()
    for item in session.items:
        if all((observer_id, item.id, cid) in latest for cid in spec.criteria):
            done.add(item.id)
    return done


def observer_payload(session: SegExSession, observer_id: str) -> dict:
    """What one rater is allowed to see: anonymous items in fixed order, the
    criteria to score, their own completion state, and nothing about sources
    or other raters."""
    spec = session.observer(observer_id)
    done = completed_items(session, observer_id)
    return {
        "session": session.session_id,
        "observer": observer_id,
        "include_image": spec.include_image,
        "range": list(session.score_range),
        "criteria": [
            criterion_by_id(cid).to_dict() for cid in spec.criteria
        ],
        "items": [
            {
                "id": item.id,
                "render": f"/api/session/{session.session_id}/item/{k}/render",
                "done": item.id in done,
            }
            for k, item in enumerate(session.items)
        ],
    }


def _mean_std(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"avg": float(arr.mean()), "stdev": float(arr.std()), "n": len(values)}


def aggregate(
    session: SegExSession,
    key_path: Path | str | None = None,
    dsc_by_muscle: dict[str, float] | None = None,
) -> dict:
    """Unseal sources and summarize ratings per observer x source x muscle:
    avg(stdev) for each criterion plus the per-item average across criteria.
    Items missing part of an observer's criteria set are flagged and left out
    of the per-item average."""
    latest = session.latest_scores()
    if not latest:
        raise ValueError("no ratings recorded in this session")
    sources = load_key(session, key_path)
    r_min, r_max = session.score_range

    incomplete = []
    groups: dict[tuple[str, str, str], dict] = {}
    for spec in session.observers:
        expected = [criterion_by_id(cid) for cid in spec.criteria]
        for item in session.items:
            rated = {
                cid: latest[(spec.id, item.id, cid)]
                for cid in spec.criteria
                if (spec.id, item.id, cid) in latest
            }
            if not rated:
                continue
            missing = [c.id for c in expected if c.id not in rated]
            item_avg = None
            if missing:
                incomplete.append(
                    {"observer": spec.id, "item": item.id, "missing": missing}
                )
            else:
                item_avg = e_avg(rated, expected, r_min, r_max)
            for muscle in item.muscles:
                group = groups.setdefault(
                    (spec.id, sources[item.id], muscle),
                    {"criteria": {}, "e_avg": [], "n_items": 0},
                )
                group["n_items"] += 1
                for cid, score in rated.items():
                    value = standardize(score, criterion_by_id(cid), r_min, r_max)
                    group["criteria"].setdefault(cid, []).append(value)
                if item_avg is not None:
                    group["e_avg"].append(item_avg)

    rows = []
    for (observer_id, source, muscle), group in sorted(groups.items()):
        row = {
            "observer": observer_id,
            "source": source,
            "muscle": muscle,
            "n_items": group["n_items"],
            "criteria": {cid: _mean_std(vals) for cid, vals in sorted(group["criteria"].items())},
            "e_avg": _mean_std(group["e_avg"]) if group["e_avg"] else None,
        }
        if dsc_by_muscle is not None:
            row["dsc"] = dsc_by_muscle.get(muscle) if source == SOURCE_PREDICTION else None
        rows.append(row)

    return {
        "version": SESSION_VERSION,
        "session_id": session.session_id,
        "range": [r_min, r_max],
        "score_convention": "lower is better; binary correction-needed maps to {0, r_max}",
        "stdev": "population",
        "rows": rows,
        "incomplete": incomplete,
    }
