"""Rating and catalog ingestion, catalog curation, Likert mapping and holdout splits."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AuthFailure,
    EmptyFile,
    InsufficientItems,
    ItemMismatch,
    MalformedRow,
    NetworkError,
    RateLimited,
    UnknownLabel,
)

log = logging.getLogger(__name__)

MIN_YEAR = 1870
RATINGS_HEADER = ["userId", "movieId", "rating", "timestamp"]
CANONICAL_HEADER = ["user_id", "item_id", "rating"]


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CatalogEntry:
    item_id: int
    title: str
    genres: tuple[str, ...]
    year: int
    overview: str = ""


@dataclass(frozen=True)
class ItemCatalog:
    entries: tuple[CatalogEntry, ...]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.item_id in seen:
                raise ValueError(f"duplicate item_id {e.item_id} in catalog")
            if e.year < MIN_YEAR:
                raise ValueError(f"item {e.item_id}: year {e.year} before {MIN_YEAR}")
            seen.add(e.item_id)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, item_id):
        return item_id in self._index

    def __getitem__(self, item_id: int) -> CatalogEntry:
        return self.entries[self._index[item_id]]

    @property
    def _index(self) -> dict[int, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {e.item_id: k for k, e in enumerate(self.entries)}
            object.__setattr__(self, "_idx", idx)
        return idx

    @property
    def item_ids(self) -> list[int]:
        return [e.item_id for e in self.entries]

    def subset(self, item_ids: Iterable[int]) -> "ItemCatalog":
        keep = set(item_ids)
        return ItemCatalog(tuple(e for e in self.entries if e.item_id in keep))


_TITLE_YEAR = re.compile(r"\((\d{4})\)\s*$")


def parse_catalog(path: str | Path) -> ItemCatalog:
    """Read a catalog CSV.

    Accepts ``movieId,title,genres,year`` with pipe-separated genres, or the
    MovieLens ``movies.csv`` layout without a year column, in which case the
    year is taken from the trailing ``(YYYY)`` of the title. Titles without a
    recoverable year are skipped with a warning; ``(no genres listed)`` maps to
    an empty genre list.
    """
    path = Path(path)
    entries = []
    skipped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(str(path))
        cols = [h.strip() for h in header]
        if cols[:3] != ["movieId", "title", "genres"]:
            raise MalformedRow(1, f"unexpected catalog header {cols}")
        has_year = len(cols) > 3 and cols[3] == "year"
        has_overview = "overview" in cols
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                item_id = int(row[0])
                title = row[1].strip()
                genres = _split_genres(row[2])
                if has_year and row[3].strip():
                    year = int(row[3])
                else:
                    m = _TITLE_YEAR.search(title)
                    year = int(m.group(1)) if m else None
                overview = row[cols.index("overview")] if has_overview else ""
            except (ValueError, IndexError) as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if year is None:
                skipped += 1
                continue
            if year < MIN_YEAR:
                raise MalformedRow(lineno, f"year {year} before {MIN_YEAR}")
            entries.append(CatalogEntry(item_id, title, genres, year, overview))
    if not entries:
        raise EmptyFile(str(path))
    if skipped:
        log.warning("%s: skipped %d catalog rows without a year", path, skipped)
    try:
        return ItemCatalog(tuple(entries))
    except ValueError as exc:
        raise MalformedRow(0, str(exc)) from None


def _split_genres(raw: str) -> tuple[str, ...]:
    raw = raw.strip()
    if not raw or raw == "(no genres listed)":
        return ()
    return tuple(g.strip() for g in raw.split("|") if g.strip())


def write_catalog(catalog: ItemCatalog, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["movieId", "title", "genres", "year", "overview"])
        for e in sorted(catalog.entries, key=lambda e: e.item_id):
            w.writerow([e.item_id, e.title, "|".join(e.genres), e.year, e.overview])


def parse_links(path: str | Path) -> dict[int, int]:
    """Read a MovieLens ``links.csv`` into ``{movieId: tmdbId}``; rows without a TMDB id are skipped."""
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "movieId" not in reader.fieldnames or "tmdbId" not in reader.fieldnames:
            raise MalformedRow(1, "links header must contain movieId and tmdbId")
        for lineno, row in enumerate(reader, start=2):
            tmdb = (row.get("tmdbId") or "").strip()
            if not tmdb:
                continue
            try:
                out[int(row["movieId"])] = int(float(tmdb))
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from None
    return out


# ---------------------------------------------------------------------------
# ratings
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Sparse (user, item, rating) triples.

    Triples are stored as three aligned integer arrays sorted by
    ``(user_id, item_id)``; ``(user_id, item_id)`` pairs are unique.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    catalog: ItemCatalog | None = None
    dropped_duplicates: int = 0

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        ratings = np.asarray(self.ratings, dtype=np.int64)
        if not (users.shape == items.shape == ratings.shape) or users.ndim != 1:
            raise ValueError("users, items and ratings must be aligned 1-d arrays")
        if ratings.size and (ratings.min() < 1 or ratings.max() > 5):
            raise ValueError("ratings must lie in 1..5")
        order = np.lexsort((items, users))
        users, items, ratings = users[order], items[order], ratings[order]
        if users.size > 1:
            dup = (users[1:] == users[:-1]) & (items[1:] == items[:-1])
            if dup.any():
                raise ValueError("duplicate (user_id, item_id) pairs")
        if self.catalog is not None and items.size:
            missing = np.setdiff1d(np.unique(items), np.asarray(self.catalog.item_ids, dtype=np.int64))
            if missing.size:
                raise ItemMismatch(f"items absent from catalog: {missing[:10].tolist()}")
        for name, arr in (("users", users), ("items", items), ("ratings", ratings)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[int, int, int]], catalog: ItemCatalog | None = None):
        rows = list(triples)
        if not rows:
            return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64), catalog)
        arr = np.asarray(rows, dtype=np.int64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], catalog)

    def __len__(self):
        return int(self.users.size)

    @property
    def user_ids(self) -> np.ndarray:
        return np.unique(self.users)

    @property
    def item_ids(self) -> np.ndarray:
        return np.unique(self.items)

    @property
    def n_users(self) -> int:
        return int(self.user_ids.size)

    @property
    def n_items(self) -> int:
        return int(self.item_ids.size)

    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()))

    def with_catalog(self, catalog: ItemCatalog | None) -> "RatingDataset":
        return RatingDataset(self.users, self.items, self.ratings, catalog, self.dropped_duplicates)

    def restrict_items(self, item_ids: Iterable[int]) -> "RatingDataset":
        keep = np.isin(self.items, np.fromiter(item_ids, dtype=np.int64))
        cat = self.catalog.subset(item_ids) if self.catalog is not None else None
        return RatingDataset(self.users[keep], self.items[keep], self.ratings[keep], cat)

    def user_ratings(self, user_id: int) -> dict[int, int]:
        lo, hi = np.searchsorted(self.users, [user_id, user_id + 1])
        return dict(zip(self.items[lo:hi].tolist(), self.ratings[lo:hi].tolist()))

    def dense(self, item_ids: Sequence[int] | None = None, user_ids: Sequence[int] | None = None):
        """Return ``(X, mask)`` as items-by-users arrays; unobserved cells are 0 in ``X``."""
        item_ids = self.item_ids if item_ids is None else np.asarray(item_ids, dtype=np.int64)
        user_ids = self.user_ids if user_ids is None else np.asarray(user_ids, dtype=np.int64)
        row = np.searchsorted(item_ids, self.items)
        col = np.searchsorted(user_ids, self.users)
        ok = (row < item_ids.size) & (col < user_ids.size)
        ok[ok] &= (item_ids[row[ok]] == self.items[ok]) & (user_ids[col[ok]] == self.users[ok])
        X = np.zeros((item_ids.size, user_ids.size))
        mask = np.zeros_like(X, dtype=bool)
        X[row[ok], col[ok]] = self.ratings[ok]
        mask[row[ok], col[ok]] = True
        return X, mask


def round_rating(value: float) -> int:
    """Map a 0.5..5.0 star rating to 1..5, halves rounding up."""
    return min(5, max(1, int(math.floor(value + 0.5))))


def _dedup_last_wins(users, items, ratings):
    # keep the last occurrence of each (user, item) pair
    n = len(users)
    if n == 0:
        return users, items, ratings, 0
    key_order = np.lexsort((np.arange(n), items, users))
    u, i = users[key_order], items[key_order]
    last = np.ones(n, dtype=bool)
    last[:-1] = (u[1:] != u[:-1]) | (i[1:] != i[:-1])
    keep = key_order[last]
    return users[keep], items[keep], ratings[keep], n - int(last.sum())


def parse_ratings(path: str | Path, format: str = "movielens-csv") -> RatingDataset:
    """Parse a ratings file into a deduplicated dataset.

    ``movielens-csv`` expects ``userId,movieId,rating,timestamp`` with half-star
    ratings, rounded via :func:`round_rating`. ``canonical-csv`` reads the
    ``user_id,item_id,rating`` files this package writes. Duplicate pairs keep
    the last occurrence; the number dropped is stored on the result.
    """
    path = Path(path)
    if format == "movielens-csv":
        expected, width = RATINGS_HEADER, 4
    elif format == "canonical-csv":
        expected, width = CANONICAL_HEADER, 3
    else:
        raise ValueError(f"unknown ratings format {format!r}")

    users, items, ratings = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(str(path))
        if [h.strip() for h in header] != expected:
            raise MalformedRow(1, f"expected header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise MalformedRow(lineno, f"expected {width} fields, got {len(row)}")
            try:
                u, i, r = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if not 0.5 <= r <= 5.0:
                raise MalformedRow(lineno, f"rating {r} outside 0.5..5")
            if format == "canonical-csv" and r != int(r):
                raise MalformedRow(lineno, f"non-integer rating {r}")
            users.append(u)
            items.append(i)
            ratings.append(round_rating(r))
    if not users:
        raise EmptyFile(str(path))
    u, i, r, dropped = _dedup_last_wins(np.array(users), np.array(items), np.array(ratings))
    if dropped:
        log.info("%s: dropped %d duplicate (user, item) rows", path, dropped)
    return RatingDataset(u, i, r, dropped_duplicates=dropped)


def write_dataset(dataset: RatingDataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_HEADER)
        w.writerows(dataset.triples())


def merge_datasets(a: RatingDataset, b: RatingDataset, user_offset: int) -> RatingDataset:
    """Append ``b`` to ``a`` with ``b``'s user ids shifted by ``user_offset``."""
    if len(a) and user_offset < int(a.users.max()):
        raise ValueError(f"user_offset {user_offset} below max user id {int(a.users.max())} of the base dataset")
    if len(b) == 0:
        return a
    if a.catalog is not None:
        known = np.asarray(a.catalog.item_ids, dtype=np.int64)
    else:
        known = a.item_ids
    unknown = np.setdiff1d(b.item_ids, known)
    if unknown.size:
        raise ItemMismatch(f"items unknown to the base dataset: {unknown[:10].tolist()}")
    return RatingDataset(
        np.concatenate([a.users, b.users + user_offset]),
        np.concatenate([a.items, b.items]),
        np.concatenate([a.ratings, b.ratings]),
        a.catalog,
    )


# ---------------------------------------------------------------------------
# curation
# ---------------------------------------------------------------------------

def curation_weights(counts, years, decay: float, ref_year: int) -> np.ndarray:
    """Popularity discounted by age: ``count * exp(-decay * (ref_year - year))``."""
    counts = np.asarray(counts, dtype=float)
    years = np.asarray(years, dtype=float)
    return counts * np.exp(-decay * (ref_year - years))


def rank_by_weight(item_ids: Sequence[int], weights: Sequence[float]) -> list[int]:
    """Order items by weight descending, lower id first on ties.

    Log-weights are compared after rounding to 9 decimals so that values
    equal up to floating-point noise count as ties.
    """
    w = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore"):
        key = np.round(np.log(w), 9)
    ids = np.asarray(item_ids, dtype=np.int64)
    order = np.lexsort((ids, -key))
    return ids[order].tolist()


def curate_catalog(dataset: RatingDataset, catalog: ItemCatalog, size: int,
                   decay: float = 0.05, ref_year: int = 2023) -> list[int]:
    """Pick ``size`` catalog items by age-discounted popularity."""
    if decay < 0:
        raise ValueError("decay must be non-negative")
    if size > len(catalog):
        raise InsufficientItems(f"asked for {size} items, catalog has {len(catalog)}")
    ids, counts = np.unique(dataset.items, return_counts=True)
    count_of = dict(zip(ids.tolist(), counts.tolist()))
    item_ids = catalog.item_ids
    w = curation_weights([count_of.get(i, 0) for i in item_ids],
                         [catalog[i].year for i in item_ids], decay, ref_year)
    return rank_by_weight(item_ids, w)[:size]


# ---------------------------------------------------------------------------
# holdout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HoldoutSplit:
    train: RatingDataset
    test: list[tuple[int, int, int]]
    seed: int = 0
    per_user: int = 5
    min_ratings: int = 10

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "per_user": self.per_user,
            "min_ratings": self.min_ratings,
            "n_train": len(self.train),
            "test": [list(t) for t in self.test],
        }


def split_holdout(dataset: RatingDataset, per_user: int = 5, min_ratings: int = 10,
                  seed: int = 0) -> HoldoutSplit:
    """Withhold ``per_user`` random ratings from every user with more than ``min_ratings``."""
    if per_user < 1:
        raise ValueError("per_user must be at least 1")
    rng = np.random.default_rng(seed)
    users = dataset.users
    test_mask = np.zeros(len(dataset), dtype=bool)
    uids, starts, counts = np.unique(users, return_index=True, return_counts=True)
    for start, count in zip(starts, counts):
        if count > min_ratings:
            pick = rng.choice(count, size=per_user, replace=False)
            test_mask[start + pick] = True
    train = RatingDataset(users[~test_mask], dataset.items[~test_mask], dataset.ratings[~test_mask],
                          dataset.catalog)
    test = list(zip(users[test_mask].tolist(), dataset.items[test_mask].tolist(),
                    dataset.ratings[test_mask].tolist()))
    return HoldoutSplit(train, test, seed, per_user, min_ratings)


def write_split(split: HoldoutSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.to_json(), indent=1) + "\n", encoding="utf-8")


def read_split_test(path: str | Path) -> list[tuple[int, int, int]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [tuple(int(v) for v in t) for t in doc["test"]]


# ---------------------------------------------------------------------------
# Likert scales
# ---------------------------------------------------------------------------

def _normalize_label(label: str) -> str:
    label = unicodedata.normalize("NFKC", label).replace("’", "'").replace("‘", "'")
    return " ".join(label.split()).lower()


@dataclass(frozen=True)
class LikertScale:
    """Five labels listed from most positive (score 5) to most negative (score 1)."""

    labels: tuple[str, ...]
    _map: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.labels) != 5:
            raise ValueError("a Likert scale has exactly 5 labels")
        m = {_normalize_label(lab): 5 - k for k, lab in enumerate(self.labels)}
        if len(m) != 5:
            raise ValueError("Likert labels must be distinct")
        object.__setattr__(self, "_map", m)

    def score(self, label: str) -> int:
        try:
            return self._map[_normalize_label(label)]
        except KeyError:
            raise UnknownLabel(label) from None

    def label(self, score: int) -> str:
        return self.labels[5 - score]


RATING_SCALE = LikertScale((
    "I really like it",
    "I like it",
    "It's okay",
    "I don't like it much",
    "I really don't like it",
))

AGREEMENT_SCALE = LikertScale((
    "Strongly agree",
    "Somewhat agree",
    "Neither agree nor disagree",
    "Somewhat disagree",
    "Strongly disagree",
))


def likert_to_score(label: str, scale: LikertScale = RATING_SCALE) -> int:
    return scale.score(label)


# ---------------------------------------------------------------------------
# metadata enrichment
# ---------------------------------------------------------------------------

TMDB_BASE_URL = "https://api.themoviedb.org/3"


def _fetch_movie(client, base_url: str, tmdb_id: int, api_key: str, language: str,
                 timeout: float, max_attempts: int, backoff: float) -> dict | None:
    url = f"{base_url.rstrip('/')}/movie/{tmdb_id}"
    params = {"api_key": api_key, "language": language}
    for attempt in range(max_attempts):
        try:
            resp = client.get(url, params=params, timeout=timeout)
        except Exception as exc:  # transport-level failure from the HTTP library
            raise NetworkError(f"GET {url}: {exc}") from exc
        status = resp.status_code
        if status == 200:
            return resp.json()
        if status == 401:
            raise AuthFailure("metadata API rejected the key (401)")
        if status == 404:
            return None
        if status == 429 or status >= 500:
            if attempt + 1 < max_attempts:
                time.sleep(backoff * 2 ** attempt)
                continue
            if status == 429:
                raise RateLimited(f"still rate limited after {max_attempts} attempts")
            raise NetworkError(f"GET {url}: HTTP {status} after {max_attempts} attempts")
        raise NetworkError(f"GET {url}: HTTP {status}")
    return None  # pragma: no cover


def _merge_payload(entry: CatalogEntry, payload: Mapping) -> CatalogEntry:
    title = entry.title or (payload.get("title") or "").strip()
    genres = entry.genres or tuple(g["name"] for g in payload.get("genres", []) if g.get("name"))
    overview = entry.overview or (payload.get("overview") or "").strip()
    return replace(entry, title=title, genres=genres, overview=overview)


def enrich_metadata(catalog: ItemCatalog, client, api_key: str, links: Mapping[int, int],
                    base_url: str = TMDB_BASE_URL, language: str = "fr-FR", timeout: float = 10.0,
                    max_attempts: int = 4, backoff: float = 1.0,
                    max_inflight: int = 4) -> tuple[ItemCatalog, list[int]]:
    """Fill empty titles, genres and overviews from a TMDB-style movie endpoint.

    ``client`` is anything with a ``requests``-compatible ``get``. Only empty
    fields are filled; complete entries are left untouched and never fetched.
    Returns the new catalog and the ids that could not be matched.
    """
    if not api_key:
        raise AuthFailure("empty metadata API key")
    todo = [e for e in catalog.entries if not (e.title and e.genres and e.overview)]
    unmatched = [e.item_id for e in todo if e.item_id not in links]
    todo = [e for e in todo if e.item_id in links]

    def work(entry):
        return _fetch_movie(client, base_url, links[entry.item_id], api_key, language,
                            timeout, max_attempts, backoff)

    with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as pool:
        payloads = list(pool.map(work, todo))

    updated = {}
    for entry, payload in zip(todo, payloads):
        if payload is None:
            unmatched.append(entry.item_id)
        else:
            updated[entry.item_id] = _merge_payload(entry, payload)
    if unmatched:
        log.warning("metadata: %d items unmatched", len(unmatched))
    entries = tuple(updated.get(e.item_id, e) for e in catalog.entries)
    return ItemCatalog(entries), sorted(unmatched)
