"""Candidate pools and 3-item slates.

A user's pool holds the unrated items predicted at or above a threshold, capped
by count, plus the best few unrated items regardless of score. Slates are drawn
from the pool either deterministically (the top entries) or by sequential
sampling without replacement, each draw proportional to predicted score.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import NoUnratedItems


@dataclass(frozen=True)
class RecConfig:
    threshold: float = 4.0
    pool_cap: int = 20
    slate_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.slate_size < 1:
            raise ValueError("slate_size must be at least 1")
        if self.pool_cap < self.slate_size:
            raise ValueError("pool_cap must be at least slate_size")


@dataclass(frozen=True)
class CandidatePool:
    user: int
    item_ids: tuple[int, ...]
    scores: tuple[float, ...]

    def __len__(self):
        return len(self.item_ids)


@dataclass(frozen=True)
class Slate:
    user: int
    items: tuple[int, ...]
    scores: tuple[float, ...]


def _rank(item_ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Positions ordered by score descending, then item id ascending."""
    return np.lexsort((item_ids, -scores))


def build_pool(scores: Sequence[float], rated: Iterable[int], config: RecConfig = RecConfig(),
               user: int = -1, item_ids: Sequence[int] | None = None) -> CandidatePool:
    """Pool of unrated items for one user.

    ``scores[k]`` is the prediction for ``item_ids[k]`` (default: ``k``). The
    top ``slate_size`` unrated items always join the pool, even below the
    threshold, so the pool never exceeds ``max(pool_cap, slate_size)`` items.
    """
    scores = np.asarray(scores, dtype=float)
    ids = np.arange(scores.size) if item_ids is None else np.asarray(item_ids, dtype=np.int64)
    if ids.shape != scores.shape:
        raise ValueError("scores and item_ids differ in length")
    unrated = ~np.isin(ids, np.fromiter(rated, dtype=np.int64))
    ids, scores = ids[unrated], scores[unrated]
    if ids.size == 0:
        raise NoUnratedItems(f"user {user} has rated every item")
    order = _rank(ids, scores)
    ranked_ids, ranked_scores = ids[order], scores[order]
    above = np.flatnonzero(ranked_scores >= config.threshold)[:config.pool_cap]
    keep = np.union1d(above, np.arange(min(config.slate_size, ranked_ids.size)))
    # keep holds positions in ranked order, so the result stays sorted
    return CandidatePool(user, tuple(ranked_ids[keep].tolist()), tuple(ranked_scores[keep].tolist()))


def top_slate(pool: CandidatePool, config: RecConfig = RecConfig()) -> Slate:
    k = config.slate_size
    return Slate(pool.user, pool.item_ids[:k], pool.scores[:k])


def sample_slate(pool: CandidatePool, config: RecConfig = RecConfig(),
                 rng: np.random.Generator | None = None) -> Slate:
    """Draw ``slate_size`` pool items without replacement, each draw proportional to score.

    Items are returned in draw order. A pool no larger than the slate is
    returned whole without consuming randomness.
    """
    if len(pool) == 0:
        raise ValueError("empty candidate pool")
    if len(pool) <= config.slate_size:
        return Slate(pool.user, pool.item_ids, pool.scores)
    if rng is None:
        rng = user_rng(config.seed, pool.user)
    weights = np.asarray(pool.scores, dtype=float)
    if np.any(weights < 0):
        raise ValueError("sampling weights must be non-negative")
    remaining = list(range(len(pool)))
    picked = []
    for _ in range(config.slate_size):
        w = weights[remaining]
        cum = np.cumsum(w)
        u = rng.random() * cum[-1]
        k = min(int(np.searchsorted(cum, u, side="right")), len(remaining) - 1)
        picked.append(remaining.pop(k))
    return Slate(pool.user, tuple(pool.item_ids[p] for p in picked), tuple(pool.scores[p] for p in picked))


def user_rng(seed: int, user: int) -> np.random.Generator:
    """Independent per-user stream, seeded by ``seed XOR user``."""
    return np.random.default_rng(int(seed) ^ int(user))


def coverage(slates: Iterable[Slate]) -> int:
    return len({i for s in slates for i in s.items})


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def write_slates_csv(slates: Iterable[Slate], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "rank", "item_id", "score"])
        for s in slates:
            for rank, (item, score) in enumerate(zip(s.items, s.scores), start=1):
                w.writerow([s.user, rank, item, repr(float(score))])


def read_slates_csv(path: str | Path) -> list[Slate]:
    rows: dict[int, list[tuple[int, int, float]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["user_id"]), []).append(
                (int(row["rank"]), int(row["item_id"]), float(row["score"])))
    out = []
    for user, entries in rows.items():
        entries.sort()
        out.append(Slate(user, tuple(e[1] for e in entries), tuple(e[2] for e in entries)))
    return out


def slates_json(slates: Iterable[Slate]) -> list[dict]:
    return [{"user_id": s.user, "items": list(s.items), "scores": [float(x) for x in s.scores]}
            for s in slates]


def coverage_record(strategy: str, slates: Sequence[Slate], catalog_size: int) -> dict:
    return {"strategy": strategy, "distinct_items": coverage(slates), "catalog_size": catalog_size}


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")
