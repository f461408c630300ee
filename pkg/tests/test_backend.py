import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from skillswarm.backend import (
    Backend,
    BackendError,
    MockWorldError,
    ModelRequest,
    mock_complete,
    mock_world_answer,
    skill_tokens,
)
from skillswarm.core import BackendSpec
from skillswarm.grading import SolveRecord
from skillswarm.prompts import (
    reflect_template,
    render,
    skill_update_template,
    solve_template,
    velocity_template,
)
from skillswarm.swarm import records_json


def solve_request(skill_text, question, agent_id=0):
    prompt = render(
        solve_template(),
        {"skill_text": skill_text, "question": question, "agent_id": str(agent_id)},
    )
    return ModelRequest("", prompt, "solve", 0, agent_id, 0)


# =============================================================================
# Mock world
# =============================================================================

class TestMockWorldAnswer:
    def test_token_held(self):
        assert mock_world_answer("BASE T1 T3", "MOCK:T3:2+5") == ("USED T1 T3", "7")

    def test_token_missing(self):
        assert mock_world_answer("T1", "MOCK:T5:2+5") == ("USED T1", "0")

    def test_empty_skill(self):
        assert mock_world_answer("", "MOCK:T1:1+1") == ("USED", "0")

    def test_malformed_question(self):
        with pytest.raises(MockWorldError, match="malformed"):
            mock_world_answer("T1", "what is 2+2?")

    def test_zero_sum_rejected(self):
        with pytest.raises(MockWorldError, match="zero"):
            mock_world_answer("T1", "MOCK:T1:1+-1")


class TestMockSolve:
    def test_correct_answer_in_json(self):
        backend = Backend(BackendSpec(kind="mock"))
        response = backend.complete(solve_request("T1", "MOCK:T1:3+4"))
        assert "7" in response.text
        payload = json.loads(response.text)
        assert payload["answer"] == "7"
        assert payload["agent_id"] == 0

    def test_wrong_token_answers_zero(self):
        backend = Backend(BackendSpec(kind="mock"))
        response = backend.complete(solve_request("T1", "MOCK:T2:3+4"))
        assert json.loads(response.text)["answer"] == "0"

    def test_deterministic_across_calls(self):
        request = solve_request("T1 T2", "MOCK:T2:4+4", agent_id=1)
        first = mock_complete(request)
        second = mock_complete(request)
        assert first == second

    def test_question_token_does_not_leak_into_skill(self):
        # the T5 in the question must not count as a held token
        response = mock_complete(solve_request("", "MOCK:T5:2+3"))
        payload = json.loads(response)
        assert payload["reasoning"] == "USED"
        assert payload["answer"] == "0"


def reflect_request(skill_text, own_records, peer_records):
    prompt = render(
        reflect_template(),
        {
            "current_skill": skill_text,
            "own_outputs_json": records_json(own_records),
            "peer_outputs_json": records_json(peer_records),
        },
    )
    return ModelRequest("", prompt, "reflect", 200, 0, 0)


class TestMockReflect:
    def test_learns_tokens_from_correct_peers(self):
        own = [SolveRecord(0, "p1", "USED T1", "0", False)]
        peers = [
            SolveRecord(1, "p1", "USED T2 T3", "7", True),
            SolveRecord(2, "p1", "USED T9", "5", False),
        ]
        assert mock_complete(reflect_request("T1", own, peers)) == "ADD T2 T3"

    def test_no_correct_records_gives_bare_add(self):
        own = [SolveRecord(0, "p1", "USED T1", "0", False)]
        peers = [SolveRecord(1, "p1", "USED T2", "0", False)]
        assert mock_complete(reflect_request("T1", own, peers)) == "ADD"

    def test_own_tokens_excluded(self):
        own = [SolveRecord(0, "p1", "USED T1", "7", True)]
        assert mock_complete(reflect_request("T1", own, [])) == "ADD"


def velocity_request(previous, direction, current, personal, global_best):
    prompt = render(
        velocity_template(),
        {
            "agent_identity": "Agent-1",
            "previous_velocity": previous,
            "direction": direction,
            "current_skill": current,
            "personal_best_skill": personal,
            "global_best_skill": global_best,
            "max_velocity_words": "200",
        },
    )
    return ModelRequest("", prompt, "velocity", 200, 0, 0)


class TestMockVelocity:
    def test_union_of_sources_minus_current(self):
        request = velocity_request("ADD T2", "ADD T3", "T1", "T1", "T1 T4")
        assert mock_complete(request) == "ADD T2 T3 T4"

    def test_nothing_new(self):
        request = velocity_request("", "", "T1 T2", "T1", "T2")
        assert mock_complete(request) == "ADD"


def skill_update_request(current, velocity, max_words=1200):
    prompt = render(
        skill_update_template(),
        {
            "agent_identity": "Agent-1",
            "current_skill": current,
            "velocity": velocity,
            "max_skill_words": str(max_words),
        },
    )
    return ModelRequest("", prompt, "skill_update", max_words, 0, 0)


class TestMockSkillUpdate:
    def test_appends_new_tokens(self):
        assert mock_complete(skill_update_request("BASE T1", "ADD T2 T3")) == "BASE T1 T2 T3"

    def test_empty_velocity_keeps_skill(self):
        assert mock_complete(skill_update_request("BASE T1", "ADD")) == "BASE T1"

    def test_duplicate_tokens_not_added(self):
        assert mock_complete(skill_update_request("BASE T1", "ADD T1 T2 T2")) == "BASE T1 T2"

    def test_respects_word_budget(self):
        result = mock_complete(skill_update_request("BASE T1", "ADD T2 T3 T4", max_words=2))
        assert result == "BASE T1"


def test_skill_tokens():
    assert skill_tokens("BASE T1 T23 xT5 T7x") == {"T1", "T23"}


# =============================================================================
# HTTP client
# =============================================================================

class _ScriptedHandler(BaseHTTPRequestHandler):
    script = []  # list of (status, body_dict_or_str)
    seen = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else {}
        type(self).seen.append(
            {"path": self.path, "auth": self.headers.get("Authorization"), "body": body}
        )
        status, payload = (
            type(self).script.pop(0) if type(self).script else (200, _chat_body("fallback"))
        )
        raw = json.dumps(payload).encode() if isinstance(payload, dict) else payload.encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


def _chat_body(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


@pytest.fixture()
def http_server():
    handler = type("Handler", (_ScriptedHandler,), {"script": [], "seen": []})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions", handler
    server.shutdown()
    thread.join(timeout=5)


def _http_spec(url, **overrides):
    base = dict(
        kind="http",
        endpoint_url=url,
        model_name="test-model",
        credential_env_var="SKILLSWARM_TEST_KEY",
        timeout_ms=5000,
        max_retries=2,
        retry_backoff_ms=1,
    )
    base.update(overrides)
    return BackendSpec(**base)


def _any_request():
    return ModelRequest("sys text", "user text", "solve", 0, 0, 0)


class TestHttpClient:
    def test_success_parses_first_choice(self, http_server, monkeypatch):
        url, handler = http_server
        monkeypatch.setenv("SKILLSWARM_TEST_KEY", "sk-sentinel-123")
        handler.script.append((200, _chat_body("the answer")))
        response = Backend(_http_spec(url)).complete(_any_request())
        assert response.text == "the answer"
        assert response.attempt_count == 1
        sent = handler.seen[0]
        assert sent["auth"] == "Bearer sk-sentinel-123"
        assert sent["body"]["model"] == "test-model"
        assert sent["body"]["messages"][0] == {"role": "system", "content": "sys text"}
        assert sent["body"]["messages"][1] == {"role": "user", "content": "user text"}

    def test_retries_on_5xx_then_succeeds(self, http_server, monkeypatch):
        url, handler = http_server
        monkeypatch.setenv("SKILLSWARM_TEST_KEY", "k")
        handler.script.append((500, "boom"))
        handler.script.append((200, _chat_body("recovered")))
        response = Backend(_http_spec(url)).complete(_any_request())
        assert response.text == "recovered"
        assert response.attempt_count == 2

    def test_gives_up_after_retries(self, http_server, monkeypatch):
        url, handler = http_server
        monkeypatch.setenv("SKILLSWARM_TEST_KEY", "k")
        handler.script.extend([(500, "boom")] * 5)
        with pytest.raises(BackendError, match="attempts"):
            Backend(_http_spec(url, max_retries=1)).complete(_any_request())
        assert len(handler.seen) == 2  # initial try + one retry

    def test_unreachable_endpoint(self, monkeypatch):
        monkeypatch.setenv("SKILLSWARM_TEST_KEY", "k")
        spec = _http_spec("http://127.0.0.1:9/v1/chat/completions", max_retries=1, timeout_ms=500)
        with pytest.raises(BackendError, match="attempts"):
            Backend(spec).complete(_any_request())

    def test_client_error_no_retry_includes_excerpt(self, http_server, monkeypatch):
        url, handler = http_server
        monkeypatch.setenv("SKILLSWARM_TEST_KEY", "k")
        handler.script.append((404, '{"error": "no such model"}'))
        with pytest.raises(BackendError, match="no such model"):
            Backend(_http_spec(url)).complete(_any_request())
        assert len(handler.seen) == 1

    def test_missing_credential_names_env_var(self, http_server, monkeypatch):
        url, _ = http_server
        monkeypatch.delenv("SKILLSWARM_TEST_KEY", raising=False)
        with pytest.raises(BackendError, match="SKILLSWARM_TEST_KEY"):
            Backend(_http_spec(url)).complete(_any_request())

    def test_empty_completion_rejected(self, http_server, monkeypatch):
        url, handler = http_server
        monkeypatch.setenv("SKILLSWARM_TEST_KEY", "k")
        handler.script.append((200, _chat_body("")))
        with pytest.raises(BackendError, match="empty"):
            Backend(_http_spec(url)).complete(_any_request())

    def test_error_messages_never_contain_credential(self, http_server, monkeypatch):
        url, handler = http_server
        secret = "sk-SECRET-SENTINEL"
        monkeypatch.setenv("SKILLSWARM_TEST_KEY", secret)
        handler.script.extend([(500, "boom")] * 3)
        with pytest.raises(BackendError) as excinfo:
            Backend(_http_spec(url, max_retries=1)).complete(_any_request())
        assert secret not in str(excinfo.value)


def test_http_run_emits_no_credential_material(http_server, monkeypatch, tmp_path):
    """A whole http-backed run (with unparseable model output everywhere)
    must never write the credential value into any run artifact."""
    from skillswarm.core import RunConfig
    from skillswarm.data import generate_mock_dataset, write_jsonl
    from skillswarm.swarm import run_optimization

    url, _ = http_server  # every call answers "fallback", which never parses
    secret = "sk-HYGIENE-SENTINEL-9z"
    monkeypatch.setenv("SKILLSWARM_TEST_KEY", secret)
    dataset = tmp_path / "tiny.jsonl"
    write_jsonl(dataset, generate_mock_dataset(2, 6, seed=0, val_batch=2))
    config = RunConfig(
        num_agents=2,
        num_iterations=1,
        train_pool=4,
        val_pool=4,
        train_batch=2,
        val_batch=2,
        backend=_http_spec(url, max_retries=0),
        dataset_path=str(dataset),
        run_dir=str(tmp_path / "httprun"),
        seed=0,
    )
    from skillswarm.core import Skill

    run_optimization(config, initial_skills=[Skill("alpha", "A"), Skill("beta", "B")])
    emitted = [p for p in (tmp_path / "httprun").rglob("*") if p.is_file()]
    assert emitted, "run should have produced artifacts"
    for path in emitted:
        assert secret not in path.read_text(encoding="utf-8"), path
