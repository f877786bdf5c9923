import json
import threading
import time

import httpx
import pytest

from treecoder.errors import (
    BackendError,
    ConfigurationError,
    FixtureExhaustedError,
    PriceTableError,
    TokenOverflowError,
    TransportError,
)
from treecoder.llm import (
    DECISION_MAKER,
    IMPLEMENTER,
    BackendRef,
    ChatMessage,
    Gateway,
    Limits,
    Script,
    ledger_report,
)

MSGS = [ChatMessage("system", "be terse"), ChatMessage("user", "say hi please")]


def _ok(text="hello", prompt=1000, completion=1000, finish="stop"):
    return httpx.Response(200, json={
        "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": finish}],
        "usage": {"prompt_tokens": prompt, "completion_tokens": completion},
    })


def _remote(model="m1", max_in_flight=4):
    return BackendRef("remote", model, "http://llm.test/v1", "TEST_KEY", max_in_flight=max_in_flight)


def test_scripted_replay_is_ordered_and_keyed():
    script = Script({"coder/draft_function@0.1": ["addr"], "coder/draft_function": ["a", "b"], "*": ["any"]})
    gw = Gateway()
    b = BackendRef.scripted(script)
    ask = lambda stage, addr=(): gw.complete(b, MSGS, role="coder", stage=stage, address=addr).text  # noqa: E731
    assert ask("draft_function", (0, 1)) == "addr"
    assert ask("draft_function", (0, 0)) == "a"
    assert ask("draft_function", (0, 2)) == "b"
    assert ask("other") == "any"
    # an exhausted key never falls through to a less specific one
    with pytest.raises(FixtureExhaustedError, match="@0.1"):
        ask("draft_function", (0, 1))
    with pytest.raises(FixtureExhaustedError):
        ask("draft_function")


def test_scripted_exhaustion_message_names_key():
    gw = Gateway()
    with pytest.raises(FixtureExhaustedError, match="tester/draft_tests"):
        gw.complete(BackendRef.scripted({"coder/x": ["y"]}), MSGS, role="tester", stage="draft_tests")


def test_scripted_from_yaml(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("coder:\n  draft_function@0.0:\n    - one\n  review_tests: two\n")
    s = Script.from_yaml(p)
    assert s.keys() == ["coder/draft_function@0.0", "coder/review_tests"]
    assert s.next("coder", "draft_function", (0, 0)) == "one"
    assert s.next("coder", "review_tests") == "two"
    assert s.remaining() == {}


def test_scripted_usage_is_word_counts_and_costs_nothing():
    gw = Gateway()
    gw.complete(BackendRef.scripted(["one two three"]), MSGS, role="coder", stage="s", category=IMPLEMENTER)
    tally = gw.ledger.by_backend()["scripted:scripted"]
    assert (tally.prompt_tokens, tally.completion_tokens) == (5, 3)
    assert ledger_report(gw.ledger)["total_cost"] == 0


def test_messages_need_exactly_one_leading_system_message():
    gw = Gateway()
    with pytest.raises(ValueError):
        gw.complete(BackendRef.scripted(["x"]), [ChatMessage("user", "hi")])
    with pytest.raises(ValueError):
        gw.complete(BackendRef.scripted(["x"]), MSGS + [ChatMessage("system", "again")])


def test_remote_request_shape_and_temperature_per_category():
    seen = []

    def handler(request):
        seen.append((request.url.path, request.headers["authorization"], json.loads(request.content)))
        return _ok()

    gw = Gateway(transport=httpx.MockTransport(handler), env={"TEST_KEY": "sekrit"})
    gw.complete(_remote(), MSGS, Limits(max_tokens=77), category=DECISION_MAKER)
    gw.complete(_remote(), MSGS, category=IMPLEMENTER)
    assert seen[0][0] == "/v1/chat/completions"
    assert seen[0][1] == "Bearer sekrit"
    assert seen[0][2]["max_tokens"] == 77 and seen[0][2]["temperature"] == 0.0
    assert seen[1][2]["temperature"] == 0.2
    assert seen[0][2]["messages"][0] == {"role": "system", "content": "be terse"}


def test_missing_credentials_fail_before_any_request():
    calls = []
    gw = Gateway(transport=httpx.MockTransport(lambda r: calls.append(r) or _ok()), env={})
    with pytest.raises(ConfigurationError, match="TEST_KEY"):
        gw.complete(_remote(), MSGS)
    assert calls == []


def test_remote_ref_needs_credential_variable_name():
    with pytest.raises(ConfigurationError):
        BackendRef("remote", "m", "http://x", None)
    with pytest.raises(ConfigurationError):
        BackendRef("scripted", "m")


@pytest.mark.parametrize("failures,expect_ok", [(1, True), (2, True), (3, False)])
def test_transport_retries_with_exponential_backoff(failures, expect_ok):
    n = {"calls": 0}
    sleeps = []

    def handler(request):
        n["calls"] += 1
        if n["calls"] <= failures:
            raise httpx.ConnectError("refused")
        return _ok()

    gw = Gateway(transport=httpx.MockTransport(handler), env={"TEST_KEY": "k"}, sleep=sleeps.append, backoff=0.5)
    if expect_ok:
        assert gw.complete(_remote(), MSGS).text == "hello"
    else:
        with pytest.raises(TransportError):
            gw.complete(_remote(), MSGS)
    assert sleeps == [0.5, 1.0][: min(failures, 2)]
    assert n["calls"] == min(failures + 1, 3)


def test_rate_limit_and_server_errors_are_retried_but_client_errors_are_not():
    codes = iter([429, 503, 200])
    gw = Gateway(transport=httpx.MockTransport(
        lambda r: _ok() if (c := next(codes)) == 200 else httpx.Response(c, json={"error": {"message": "busy"}})),
        env={"TEST_KEY": "k"}, sleep=lambda s: None)
    assert gw.complete(_remote(), MSGS).text == "hello"
    gw = Gateway(transport=httpx.MockTransport(lambda r: httpx.Response(400, json={"error": {"message": "bad"}})),
                 env={"TEST_KEY": "k"}, sleep=lambda s: None)
    with pytest.raises(BackendError, match="HTTP 400"):
        gw.complete(_remote(), MSGS)


def test_token_overflow_is_distinct():
    gw = Gateway(transport=httpx.MockTransport(lambda r: _ok(finish="length")), env={"TEST_KEY": "k"})
    with pytest.raises(TokenOverflowError):
        gw.complete(_remote(), MSGS)
    gw = Gateway(transport=httpx.MockTransport(lambda r: httpx.Response(
        400, json={"error": {"code": "context_length_exceeded", "message": "too long"}})), env={"TEST_KEY": "k"})
    with pytest.raises(TokenOverflowError):
        gw.complete(_remote(), MSGS)


def test_ledger_cost_and_role_splits():
    gw = Gateway(transport=httpx.MockTransport(lambda r: _ok(prompt=1000, completion=1000)), env={"TEST_KEY": "k"})
    gw.complete(_remote("big"), MSGS, category=DECISION_MAKER)
    rep = ledger_report(gw.ledger, {"big": {"prompt": 1, "completion": 2}})
    assert rep["total_cost"] == 3.0
    assert rep["roles"][DECISION_MAKER]["cost"] == 3.0


def test_ledger_splits_sum_to_backend_totals():
    gw = Gateway(transport=httpx.MockTransport(lambda r: _ok(prompt=100, completion=50)), env={"TEST_KEY": "k"})
    for model, cat in [("a", DECISION_MAKER), ("a", IMPLEMENTER), ("b", IMPLEMENTER), ("b", IMPLEMENTER)]:
        gw.complete(_remote(model), MSGS, category=cat)
    prices = {"a": {"prompt": 1, "completion": 2}, "b": {"prompt": 0.5, "completion": 1}}
    rep = ledger_report(gw.ledger, prices)
    for field in ("requests", "prompt_tokens", "completion_tokens", "cost"):
        assert sum(r[field] for r in rep["roles"].values()) == pytest.approx(
            sum(b[field] for b in rep["backends"].values()))
    assert rep["total_cost"] == pytest.approx(2 * 0.2 + 2 * 0.1)
    with pytest.raises(PriceTableError):
        ledger_report(gw.ledger, {"a": {"prompt": 1, "completion": 1}})


def test_in_flight_cap_per_backend():
    active, peak = [0], [0]
    lock = threading.Lock()

    def handler(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.05)
        with lock:
            active[0] -= 1
        return _ok()

    gw = Gateway(transport=httpx.MockTransport(handler), env={"TEST_KEY": "k"})
    ref = _remote(max_in_flight=2)
    threads = [threading.Thread(target=gw.complete, args=(ref, MSGS)) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2
    assert gw.ledger.total_requests() == 6
