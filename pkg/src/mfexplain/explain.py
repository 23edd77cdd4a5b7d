"""Prompt rendering, LLM transport and boxed-answer extraction.

Four system prompts ship with the package under ``prompts/``: one asking the
model to describe a latent user type from its column of ``W``, and three
explanation strategies for a single recommended item (model internals,
viewing history, or both). The user message carries the data; its layout is
fixed here and covered by golden tests.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import requests

from .bssmf import FactorModel, predict, user_type_scores
from .data import ItemCatalog, RatingDataset
from .errors import (
    EmptyHistory,
    HttpError,
    MfExplainError,
    MissingMetadata,
    MissingProfiles,
    NetworkError,
    NoBoxedAnswer,
    PartialResult,
    Timeout,
)
from .recommend import Slate

log = logging.getLogger(__name__)

LIKED_THRESHOLD = 4
TRANSLATION_CLAUSE = "Finally, translate everything into French"


class Strategy(enum.Enum):
    USER_TYPES = "user-types"
    MODEL_BASED = "model"
    HISTORY_BASED = "history"
    COMBINED = "combined"

    @property
    def template_file(self) -> str:
        return {
            Strategy.USER_TYPES: "user_types.txt",
            Strategy.MODEL_BASED: "model_based.txt",
            Strategy.HISTORY_BASED: "history_based.txt",
            Strategy.COMBINED: "combined.txt",
        }[self]

    @property
    def needs_profiles(self) -> bool:
        return self in (Strategy.MODEL_BASED, Strategy.COMBINED)

    @property
    def needs_history(self) -> bool:
        return self in (Strategy.HISTORY_BASED, Strategy.COMBINED)


def load_template(strategy: Strategy, strip_translation: bool = False) -> str:
    text = resources.files("mfexplain").joinpath("prompts", strategy.template_file).read_text(encoding="utf-8")
    if strip_translation and TRANSLATION_CLAUSE in text:
        text = text[:text.index(TRANSLATION_CLAUSE)].rstrip("\n") + "\n"
    return text


# ---------------------------------------------------------------------------
# jobs and rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UserTypeProfile:
    type_index: int
    description: str

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError(f"empty description for user type {self.type_index}")
        if len(self.description.split()) > 100:
            log.warning("user type %d description exceeds 100 words", self.type_index)


@dataclass(frozen=True)
class LikedItem:
    title: str
    genres: tuple[str, ...]
    rating: int


@dataclass(frozen=True)
class ExplanationJob:
    strategy: Strategy
    user: int
    item: int
    item_title: str
    item_genres: tuple[str, ...] = ()
    type_profiles: tuple[UserTypeProfile, ...] | None = None
    weights: tuple[float, ...] | None = None
    type_scores: tuple[float, ...] | None = None
    score: float | None = None
    liked_items: tuple[LikedItem, ...] = ()

    def validate(self) -> None:
        if self.strategy is Strategy.USER_TYPES:
            raise ValueError("user-type interpretation is not an item explanation")
        if self.strategy.needs_profiles:
            if not self.type_profiles:
                raise MissingProfiles(f"{self.strategy.value} explanations need user-type profiles")
            if self.weights is None or self.type_scores is None or self.score is None:
                raise MissingProfiles(f"{self.strategy.value} explanations need weights and per-type scores")
            if not (len(self.type_profiles) == len(self.weights) == len(self.type_scores)):
                raise MissingProfiles(f"{len(self.type_profiles)} profiles for {len(self.weights)} user types")
            if min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError("weights must be a probability vector")
        if self.strategy is Strategy.HISTORY_BASED and not self.liked_items:
            raise EmptyHistory(f"user {self.user} has no movie rated {LIKED_THRESHOLD} or more")
        if any(li.rating < LIKED_THRESHOLD for li in self.liked_items):
            raise ValueError("liked items must be rated at least 4")


def _genres(genres: Sequence[str]) -> str:
    return ", ".join(genres) if genres else "none"


def _entry(catalog: ItemCatalog, item_id: int):
    if item_id not in catalog or not catalog[item_id].title:
        raise MissingMetadata(item_id)
    return catalog[item_id]


def render_user_types_prompt(model: FactorModel, catalog: ItemCatalog, t: int) -> tuple[str, str]:
    """System and user text asking for a description of latent type ``t``.

    The user text has one ``title | score | genres`` line per item, all items
    included, highest score first.
    """
    scores = user_type_scores(model, t)
    order = np.lexsort((model.item_ids, -scores))
    lines = []
    for k in order:
        e = _entry(catalog, int(model.item_ids[k]))
        lines.append(f"{e.title} | {scores[k]:.2f} | {_genres(e.genres)}")
    return load_template(Strategy.USER_TYPES), "\n".join(lines) + "\n"


def _model_payload(job: ExplanationJob) -> list[str]:
    lines = ["User types:"]
    for p in job.type_profiles:
        lines.append(f"- User type {p.type_index + 1}: {' '.join(p.description.split())}")
    lines.append("")
    lines.append("User weights: " + ", ".join(f"{w:.4f}" for w in job.weights))
    lines.append("Scores of this movie for each user type: " + ", ".join(f"{s:.2f}" for s in job.type_scores))
    lines.append(f"Predicted score for this user: {job.score:.2f}")
    return lines


def _history_payload(job: ExplanationJob) -> list[str]:
    lines = [f"Movies the user rated highly (at least {LIKED_THRESHOLD} stars):"]
    if not job.liked_items:
        lines.append("- none")
    for li in job.liked_items:
        lines.append(f"- {li.title} | {_genres(li.genres)}")
    return lines


def render_explanation_prompt(job: ExplanationJob, strip_translation: bool = False) -> tuple[str, str]:
    job.validate()
    lines = [f"Recommended movie: {job.item_title}", f"Genres: {_genres(job.item_genres)}", ""]
    if job.strategy.needs_profiles:
        lines += _model_payload(job)
    if job.strategy is Strategy.COMBINED:
        lines.append("")
    if job.strategy.needs_history:
        lines += _history_payload(job)
    return load_template(job.strategy, strip_translation), "\n".join(lines) + "\n"


def liked_items(history: Mapping[int, int], catalog: ItemCatalog) -> tuple[LikedItem, ...]:
    """Items rated at least 4, best rated first, then by item id."""
    out = []
    for item_id, rating in sorted(history.items(), key=lambda kv: (-kv[1], kv[0])):
        if rating >= LIKED_THRESHOLD:
            e = _entry(catalog, item_id)
            out.append(LikedItem(e.title, e.genres, rating))
    return tuple(out)


def build_job(strategy: Strategy, model: FactorModel, catalog: ItemCatalog, user_id: int, item_id: int,
              history: Mapping[int, int] | None = None,
              profiles: Sequence[UserTypeProfile] | None = None) -> ExplanationJob:
    """Assemble the payload one explanation needs; validates it before returning."""
    e = _entry(catalog, item_id)
    kwargs = {}
    if strategy.needs_profiles:
        if not profiles:
            raise MissingProfiles(f"{strategy.value} explanations need user-type profiles")
        u = model.user_index(user_id)
        i = model.item_index(item_id)
        kwargs.update(
            type_profiles=tuple(sorted(profiles, key=lambda p: p.type_index)),
            weights=tuple(model.H[:, u].tolist()),
            type_scores=tuple(model.W[i].tolist()),
            score=float(predict(model, u)[i]),
        )
    if strategy.needs_history:
        kwargs["liked_items"] = liked_items(history or {}, catalog)
    job = ExplanationJob(strategy, user_id, item_id, e.title, e.genres, **kwargs)
    job.validate()
    return job


# ---------------------------------------------------------------------------
# boxed answers
# ---------------------------------------------------------------------------

BOX_OPEN = "\\boxed{"


def _span_end(raw: str, start: int) -> int | None:
    """Index of the brace closing the group opened just before ``start``."""
    depth = 1
    for k in range(start, len(raw)):
        c = raw[k]
        if c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return k
    return None


def extract_boxed(raw: str) -> tuple[str, str]:
    """Split ``raw`` into ``(reasoning, final)`` around its last ``\\boxed{...}`` span.

    Braces inside the box must balance. Boxes nested inside another box belong
    to the outer one. An unterminated box is ignored. ``reasoning`` is the
    text before the chosen span, ``<think>`` sections included.
    """
    best = None
    pos = 0
    while True:
        k = raw.find(BOX_OPEN, pos)
        if k < 0:
            break
        end = _span_end(raw, k + len(BOX_OPEN))
        if end is None:
            pos = k + len(BOX_OPEN)
            continue
        best = (k, end)
        pos = end + 1
    if best is None:
        raise NoBoxedAnswer("no complete \\boxed{...} span in the reply")
    k, end = best
    return raw[:k], raw[k + len(BOX_OPEN):end]


@dataclass(frozen=True)
class LlmReply:
    raw: str
    reasoning: str
    final: str
    attempts: int = 1

    @classmethod
    def from_raw(cls, raw: str, attempts: int = 1) -> "LlmReply":
        reasoning, final = extract_boxed(raw)
        return cls(raw, reasoning, final, attempts)


# ---------------------------------------------------------------------------
# transport
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LlmConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "deepseek-ai/DeepSeek-R1-Distill-Llama-70B"
    temperature: float = 0.6
    max_tokens: int = 2048
    timeout: float = 300.0
    max_retries: int = 3
    backoff: float = 1.0
    max_inflight: int = 2
    api_key_env: str = "LLM_API_KEY"
    strip_translation: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be at least 1")

    @property
    def is_stub(self) -> bool:
        return self.endpoint.startswith("stub:")


def _stub_reply(fixture_dir: str, system: str, user: str) -> str:
    """Offline replies keyed by the request.

    ``<sha256>.txt`` answers one exact request, ``default.txt`` answers the
    rest, and a ``status`` file holding an HTTP code makes every call fail with
    that code. Without fixtures a deterministic boxed echo is returned.
    """
    root = Path(fixture_dir)
    digest = hashlib.sha256((system + "\0" + user).encode()).hexdigest()
    status = root / "status"
    if status.exists():
        raise HttpError(int(status.read_text().strip()), "stub failure")
    for name in (f"{digest}.txt", "default.txt"):
        f = root / name
        if f.exists():
            return f.read_text(encoding="utf-8")
    return f"<think>stub reasoning for request {digest[:12]}</think>\n\\boxed{{Stub reply {digest[:12]}.}}"


def chat_completion(config: LlmConfig, system: str, user: str,
                    session: requests.Session | None = None) -> LlmReply:
    """Send one chat-completion request and extract its boxed answer.

    HTTP 429 and 5xx responses are retried up to ``max_retries`` times with
    exponential backoff; other failures raise immediately.
    """
    if config.is_stub:
        return LlmReply.from_raw(_stub_reply(config.endpoint[len("stub:"):], system, user))

    url = config.endpoint.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(config.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    payload = {
        "model": config.model,
        "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    }
    post = (session or requests).post
    for attempt in range(1, config.max_retries + 2):
        try:
            resp = post(url, json=payload, headers=headers, timeout=config.timeout)
        except requests.Timeout as exc:
            raise Timeout(f"no reply from {url} within {config.timeout}s") from exc
        except requests.RequestException as exc:
            raise NetworkError(f"POST {url}: {exc}") from exc
        if resp.status_code == 200:
            message = resp.json()["choices"][0]["message"]
            raw = message.get("content") or ""
            # servers that split reasoning out of the content
            if message.get("reasoning_content"):
                raw = f"<think>{message['reasoning_content']}</think>\n{raw}"
            return LlmReply.from_raw(raw, attempt)
        if (resp.status_code == 429 or resp.status_code >= 500) and attempt <= config.max_retries:
            log.info("HTTP %d from %s, retry %d", resp.status_code, url, attempt)
            time.sleep(config.backoff * 2 ** (attempt - 1))
            continue
        raise HttpError(resp.status_code, resp.text)
    raise AssertionError("unreachable")  # pragma: no cover


Transport = Callable[[str, str], LlmReply]


def _transport(config: LlmConfig, transport: Transport | None) -> Transport:
    if transport is not None:
        return transport
    return lambda system, user: chat_completion(config, system, user)


# ---------------------------------------------------------------------------
# user types
# ---------------------------------------------------------------------------

class ProfileStore:
    """Directory cache of user-type descriptions keyed by model digest and type index."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()

    def _path(self, model_digest: str, t: int) -> Path:
        return self.root / f"{model_digest[:32]}_{t}.json"

    def get(self, model_digest: str, t: int) -> UserTypeProfile | None:
        p = self._path(model_digest, t)
        if not p.exists():
            return None
        doc = json.loads(p.read_text(encoding="utf-8"))
        return UserTypeProfile(doc["type_index"], doc["description"])

    def put(self, model_digest: str, profile: UserTypeProfile, reasoning: str = "") -> None:
        with self._lock:
            self.root.mkdir(parents=True, exist_ok=True)
            p = self._path(model_digest, profile.type_index)
            tmp = p.with_suffix(".tmp")
            tmp.write_text(json.dumps({"type_index": profile.type_index, "description": profile.description,
                                       "reasoning": reasoning}, ensure_ascii=False) + "\n", encoding="utf-8")
            os.replace(tmp, p)


def interpret_user_types(model: FactorModel, catalog: ItemCatalog, config: LlmConfig,
                         store: ProfileStore | None = None,
                         transport: Transport | None = None) -> list[UserTypeProfile]:
    """Describe every latent type, one request per column of ``W``.

    Cached profiles are reused without contacting the endpoint. On the first
    failure a :class:`PartialResult` carries the profiles obtained so far.
    """
    call = _transport(config, transport)
    digest = model.digest()
    profiles = []
    for t in range(model.r):
        cached = store.get(digest, t) if store is not None else None
        if cached is not None:
            profiles.append(cached)
            continue
        try:
            system, user = render_user_types_prompt(model, catalog, t)
            reply = call(system, user)
            profile = UserTypeProfile(t, reply.final.strip())
        except MfExplainError as exc:
            raise PartialResult([p.type_index for p in profiles], profiles, exc) from exc
        if store is not None:
            store.put(digest, profile, reply.reasoning)
        profiles.append(profile)
    return profiles


def read_profiles(path: str | Path) -> list[UserTypeProfile]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                out.append(UserTypeProfile(int(doc["type_index"]), doc["description"]))
    return out


# ---------------------------------------------------------------------------
# slates
# ---------------------------------------------------------------------------

@dataclass
class ExplainContext:
    model: FactorModel
    catalog: ItemCatalog
    history: Mapping[int, int] = field(default_factory=dict)
    profiles: Sequence[UserTypeProfile] | None = None


@dataclass(frozen=True)
class Explanation:
    item_id: int
    text: str | None
    reasoning: str = ""
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def explain_slate(slate: Slate, strategy: Strategy, context: ExplainContext, config: LlmConfig,
                  transport: Transport | None = None) -> list[Explanation]:
    """One explanation per slate item, in slate order.

    All jobs are built and validated before any request is sent. Transport
    failures on individual items become error markers instead of aborting.
    """
    jobs = [build_job(strategy, context.model, context.catalog, slate.user, item,
                      context.history, context.profiles) for item in slate.items]
    prompts = [render_explanation_prompt(job, config.strip_translation) for job in jobs]
    call = _transport(config, transport)

    def run(prompt):
        try:
            reply = call(*prompt)
            return reply.final.strip(), reply.reasoning, None
        except MfExplainError as exc:
            return None, "", f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=config.max_inflight) as pool:
        results = list(pool.map(run, prompts))
    return [Explanation(job.item, text, reasoning, err) for job, (text, reasoning, err) in zip(jobs, results)]


def explanation_record(user_id: int, explanation: Explanation, strategy: Strategy, model_id: str) -> dict:
    return {
        "user_id": user_id,
        "item_id": explanation.item_id,
        "strategy": strategy.value,
        "explanation": explanation.text,
        "reasoning_len": len(explanation.reasoning),
        "model_id": model_id,
    }
