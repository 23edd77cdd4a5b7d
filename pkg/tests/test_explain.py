import http.server
import json
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfexplain.bssmf import FactorModel
from mfexplain.data import CatalogEntry, ItemCatalog
from mfexplain.errors import (
    EmptyHistory,
    HttpError,
    MissingMetadata,
    MissingProfiles,
    NoBoxedAnswer,
    PartialResult,
    Timeout,
)
from mfexplain.explain import (
    ExplainContext,
    ExplanationJob,
    LikedItem,
    LlmConfig,
    LlmReply,
    ProfileStore,
    Strategy,
    UserTypeProfile,
    build_job,
    chat_completion,
    explain_slate,
    extract_boxed,
    interpret_user_types,
    liked_items,
    load_template,
    render_explanation_prompt,
    render_user_types_prompt,
)
from mfexplain.recommend import Slate

GOLDEN = Path(__file__).parent / "golden"


# -- templates ----------------------------------------------------------------

@pytest.mark.parametrize("strategy, name", [
    (Strategy.USER_TYPES, "user_types.txt"),
    (Strategy.MODEL_BASED, "model_based.txt"),
    (Strategy.HISTORY_BASED, "history_based.txt"),
    (Strategy.COMBINED, "combined.txt"),
])
def test_template_matches_golden(strategy, name):
    assert load_template(strategy).encode("utf-8") == (GOLDEN / name).read_bytes()


def test_strip_translation():
    text = load_template(Strategy.MODEL_BASED, strip_translation=True)
    assert "French" not in text and text.endswith("\n")
    assert load_template(Strategy.MODEL_BASED).startswith(text.rstrip("\n"))


# -- fixtures -----------------------------------------------------------------

@pytest.fixture
def toy():
    W = np.array([[4.0, 2.0], [5.0, 1.5], [3.2, 4.9]])
    H = np.array([[0.25, 1.0], [0.75, 0.0]])
    model = FactorModel(W, H, item_ids=[10, 20, 30], user_ids=[1, 2])
    catalog = ItemCatalog((
        CatalogEntry(10, "Alien (1979)", ("Horror", "Sci-Fi"), 1979),
        CatalogEntry(20, "Amélie (2001)", ("Comedy", "Romance"), 2001),
        CatalogEntry(30, "Heat (1995)", (), 1995),
    ))
    return model, catalog


PROFILES = (UserTypeProfile(0, "Likes suspense."), UserTypeProfile(1, "Prefers light comedies."))


# -- rendering ----------------------------------------------------------------

def test_user_types_prompt_sorted(toy):
    model, catalog = toy
    system, user = render_user_types_prompt(model, catalog, 0)
    assert system == load_template(Strategy.USER_TYPES)
    assert user.splitlines() == [
        "Amélie (2001) | 5.00 | Comedy, Romance",
        "Alien (1979) | 4.00 | Horror, Sci-Fi",
        "Heat (1995) | 3.20 | none",
    ]


def test_user_types_prompt_missing_title(toy):
    model, catalog = toy
    bad = ItemCatalog(catalog.entries[:2] + (CatalogEntry(30, "", (), 1995),))
    with pytest.raises(MissingMetadata):
        render_user_types_prompt(model, bad, 0)


def test_history_prompt_lists_liked(toy):
    model, catalog = toy
    job = build_job(Strategy.HISTORY_BASED, model, catalog, 1, 30, history={10: 5, 20: 4})
    system, user = render_explanation_prompt(job)
    assert system == load_template(Strategy.HISTORY_BASED)
    assert user == ("Recommended movie: Heat (1995)\nGenres: none\n\n"
                    "Movies the user rated highly (at least 4 stars):\n"
                    "- Alien (1979) | Horror, Sci-Fi\n"
                    "- Amélie (2001) | Comedy, Romance\n")


def test_history_excludes_low_ratings(toy):
    _, catalog = toy
    got = liked_items({10: 3, 20: 4, 30: 1}, catalog)
    assert [li.title for li in got] == ["Amélie (2001)"]


def test_model_prompt_weights_format():
    profiles = tuple(UserTypeProfile(t, f"type {t}") for t in range(5))
    job = ExplanationJob(Strategy.MODEL_BASED, 1, 10, "Alien (1979)", ("Horror",), profiles,
                         (0.25, 0.25, 0.25, 0.25, 0.0), (4.0, 3.0, 2.0, 1.0, 5.0), 2.5)
    _, user = render_explanation_prompt(job)
    assert "User weights: 0.2500, 0.2500, 0.2500, 0.2500, 0.0000\n" in user
    assert "- User type 5: type 4\n" in user
    assert "Predicted score for this user: 2.50\n" in user


def test_model_job_from_model(toy):
    model, catalog = toy
    job = build_job(Strategy.MODEL_BASED, model, catalog, 1, 20, profiles=PROFILES)
    assert job.weights == (0.25, 0.75)
    assert job.type_scores == (5.0, 1.5)
    assert job.score == pytest.approx(2.375)


def test_combined_prompt_has_both(toy):
    model, catalog = toy
    job = build_job(Strategy.COMBINED, model, catalog, 1, 30, history={10: 4}, profiles=PROFILES)
    _, user = render_explanation_prompt(job)
    assert "User types:" in user and "- Alien (1979) | Horror, Sci-Fi" in user
    assert "0000\nScores" not in user and "\n\nMovies the user" in user


def test_missing_profiles(toy):
    model, catalog = toy
    with pytest.raises(MissingProfiles):
        build_job(Strategy.MODEL_BASED, model, catalog, 1, 20)
    with pytest.raises(MissingProfiles):
        build_job(Strategy.MODEL_BASED, model, catalog, 1, 20, profiles=PROFILES[:1])


def test_empty_history(toy):
    model, catalog = toy
    with pytest.raises(EmptyHistory):
        build_job(Strategy.HISTORY_BASED, model, catalog, 1, 20, history={10: 2})


# -- boxed answers ------------------------------------------------------------

@pytest.mark.parametrize("raw, final", [
    ("blah \\boxed{Tu vas adorer ce film.}", "Tu vas adorer ce film."),
    ("\\boxed{a} text \\boxed{b}", "b"),
    ("\\boxed{outer {nested} end}", "outer {nested} end"),
    ("<think>try \\boxed{draft}</think> \\boxed{x \\boxed{y} z}", "x \\boxed{y} z"),
    ("\\boxed{good} then \\boxed{unterminated", "good"),
])
def test_extract_boxed(raw, final):
    assert extract_boxed(raw)[1] == final


def test_extract_boxed_reasoning():
    reasoning, final = extract_boxed("<think>hmm</think>\n\\boxed{ok}")
    assert reasoning == "<think>hmm</think>\n" and final == "ok"


@pytest.mark.parametrize("raw", ["", "no box", "\\boxed{open", "\\boxed"])
def test_extract_boxed_missing(raw):
    with pytest.raises(NoBoxedAnswer):
        extract_boxed(raw)


@given(st.text(alphabet="ab{}\\boxed ", max_size=60))
def test_extract_boxed_total(raw):
    try:
        reasoning, final = extract_boxed(raw)
    except NoBoxedAnswer:
        return
    assert raw.startswith(reasoning + "\\boxed{" + final + "}")
    depth = 0
    for c in final:
        depth += (c == "{") - (c == "}")
        assert depth >= 0
    assert depth == 0


# -- HTTP transport -----------------------------------------------------------

class _Stub(http.server.BaseHTTPRequestHandler):
    script: list = []
    requests: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).requests.append((self.path, dict(self.headers), body))
        status, content, delay = type(self).script.pop(0) if type(self).script else (200, "\\boxed{ok}", 0)
        time.sleep(delay)
        payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": content}}]}).encode()
        try:
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
        except (BrokenPipeError, ConnectionResetError):
            pass

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Stub.script, _Stub.requests = [], []
    srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv, _Stub
    srv.shutdown()
    srv.server_close()


def _cfg(srv, **kw):
    return LlmConfig(endpoint=f"http://127.0.0.1:{srv.server_address[1]}/v1", backoff=0, **kw)


def test_chat_roundtrip(server, monkeypatch):
    srv, stub = server
    monkeypatch.setenv("LLM_API_KEY", "sekrit")
    reply = chat_completion(_cfg(srv), "sys", "usr")
    assert reply.final == "ok" and reply.attempts == 1
    path, headers, body = stub.requests[0]
    assert path == "/v1/chat/completions"
    assert headers["Authorization"] == "Bearer sekrit"
    assert body["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "usr"}]
    assert body["temperature"] == 0.6


def test_chat_retries_server_errors(server):
    srv, stub = server
    stub.script = [(500, "", 0), (500, "", 0), (200, "\\boxed{ok}", 0)]
    reply = chat_completion(_cfg(srv), "s", "u")
    assert reply.attempts == 3 and reply.final == "ok"


def test_chat_gives_up(server):
    srv, stub = server
    stub.script = [(503, "", 0)] * 3
    with pytest.raises(HttpError) as err:
        chat_completion(_cfg(srv, max_retries=2), "s", "u")
    assert err.value.status == 503


def test_chat_client_error_not_retried(server):
    srv, stub = server
    stub.script = [(400, "", 0)]
    with pytest.raises(HttpError):
        chat_completion(_cfg(srv), "s", "u")
    assert len(stub.requests) == 1


def test_chat_timeout(server):
    srv, stub = server
    stub.script = [(200, "\\boxed{late}", 1.0)]
    with pytest.raises(Timeout):
        chat_completion(_cfg(srv, timeout=0.2), "s", "u")


def test_stub_endpoint(tmp_path):
    cfg = LlmConfig(endpoint=f"stub:{tmp_path}")
    a = chat_completion(cfg, "s", "u")
    assert a == chat_completion(cfg, "s", "u") and a.final.startswith("Stub reply")
    (tmp_path / "default.txt").write_text("\\boxed{fixed}")
    assert chat_completion(cfg, "s", "u").final == "fixed"
    (tmp_path / "status").write_text("503")
    with pytest.raises(HttpError):
        chat_completion(cfg, "s", "u")


# -- user types ---------------------------------------------------------------

class Recorder:
    def __init__(self, fail_on=None):
        self.calls = []
        self.fail_on = fail_on

    def __call__(self, system, user):
        self.calls.append(user)
        if self.fail_on is not None and len(self.calls) - 1 == self.fail_on:
            raise HttpError(500, "boom")
        return LlmReply.from_raw(f"<think>r</think>\\boxed{{Type seen {len(self.calls)}}}")


def _rank5(toy):
    _, catalog = toy
    rng = np.random.default_rng(0)
    model = FactorModel(rng.uniform(1, 5, (3, 5)), rng.dirichlet(np.ones(5), 2).T,
                        item_ids=[10, 20, 30], user_ids=[1, 2])
    return model, catalog


def test_interpret_five_types(toy, tmp_path):
    model, catalog = _rank5(toy)
    rec = Recorder()
    profiles = interpret_user_types(model, catalog, LlmConfig(), ProfileStore(tmp_path), rec)
    assert [p.type_index for p in profiles] == [0, 1, 2, 3, 4]
    assert len(rec.calls) == 5
    again = Recorder()
    assert interpret_user_types(model, catalog, LlmConfig(), ProfileStore(tmp_path), again) == profiles
    assert again.calls == []


def test_interpret_partial(toy):
    model, catalog = _rank5(toy)
    with pytest.raises(PartialResult) as err:
        interpret_user_types(model, catalog, LlmConfig(), transport=Recorder(fail_on=3))
    assert err.value.completed == [0, 1, 2]
    assert len(err.value.profiles) == 3


# -- slates -------------------------------------------------------------------

def test_explain_slate_order(toy):
    model, catalog = toy
    ctx = ExplainContext(model, catalog, {10: 5}, PROFILES)
    rec = Recorder()
    out = explain_slate(Slate(1, (30, 10, 20), (4.0, 3.0, 2.0)), Strategy.MODEL_BASED, ctx,
                        LlmConfig(max_inflight=1), rec)
    assert [e.item_id for e in out] == [30, 10, 20]
    assert all(e.ok for e in out)


def test_explain_slate_partial_failure(toy):
    model, catalog = toy
    ctx = ExplainContext(model, catalog, {10: 5}, PROFILES)
    out = explain_slate(Slate(1, (30, 10, 20), (4.0, 3.0, 2.0)), Strategy.HISTORY_BASED, ctx,
                        LlmConfig(max_inflight=1), Recorder(fail_on=1))
    assert [e.ok for e in out] == [True, False, True]
    assert out[1].text is None and "HttpError" in out[1].error


def test_explain_slate_empty_history_before_calls(toy):
    model, catalog = toy
    rec = Recorder()
    with pytest.raises(EmptyHistory):
        explain_slate(Slate(1, (30,), (4.0,)), Strategy.HISTORY_BASED,
                      ExplainContext(model, catalog, {}, None), LlmConfig(), rec)
    assert rec.calls == []


def test_liked_item_validation():
    job = ExplanationJob(Strategy.HISTORY_BASED, 1, 2, "x", liked_items=(LikedItem("y", (), 3),))
    with pytest.raises(ValueError):
        job.validate()
