import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import pytest

from prosody_intent import llm
from prosody_intent.corpus import O, SplitSpec, UtteranceSample, generate_corpus, split_by_instruction
from prosody_intent.errors import ConfigurationError, LeakageError, ProtocolError, TransportError


@pytest.fixture(scope="module")
def corpus():
    s = generate_corpus(12, 4, seed=42, with_raw=False)
    return split_by_instruction(s, SplitSpec(seed=3))


@pytest.fixture(scope="module")
def examples(corpus):
    return llm.select_examples(corpus[0], 3)


def coke_sample(interp):
    frame = {"verb": "place", "x": "coke can", "rel1": "beside", "y": "pringles", "rel2": "on", "z": "counter"}
    from prosody_intent.corpus import Instruction

    words, labels = Instruction(99, **frame).tokens_and_labels(interp)
    return UtteranceSample(f"q{interp}", 99, interp, 0, [(w, 0.0, 0.1) for w in words], labels, frame)


def test_candidate_plans_render():
    p1, p2 = llm.candidate_plans(coke_sample("A").frame)
    assert p1.render() == "pick(coke can); place(beside, pringles {on: counter})"
    assert p2.render() == "pick(coke can {beside: pringles}); place(on, counter)"


def test_prompt_structure_and_determinism(examples):
    q = llm.make_query(coke_sample("A"))
    prompt = llm.build_prompt(q, examples)
    assert prompt == llm.build_prompt(q, examples)
    head, query = prompt.split("### Query")
    assert head.count("ANSWER: PLAN") == 3
    assert "coke/GOAL can/GOAL beside/O the/O pringles/GOAL on/O the/O counter/DETAIL" in query
    assert prompt.rstrip("\n").splitlines()[-1].endswith("ANSWER: PLAN <1|2>")


def test_leakage_rejected(corpus, examples):
    leak = next(s for s in corpus[0] if s.instruction_id == examples[0].instruction_id)
    with pytest.raises(LeakageError):
        llm.build_prompt(llm.make_query(leak), examples)
    with pytest.raises(ValueError):
        llm.build_prompt(llm.make_query(coke_sample("A")), [])


@pytest.mark.parametrize("text, expected", [
    ("ANSWER: PLAN 2", 2),
    ("I think plan 1 is right.\nANSWER: PLAN 1", 1),
    ("answer: plan 2\n", 2),
    ("cannot decide", None),
    ("Plan 1 looks odd, so 2", 2),
    ("PLAN 1 first...\nANSWER: PLAN 2", 2),
])
def test_parse_choice(text, expected):
    assert llm.parse_choice(text) == expected


def test_mock_gold_tags_always_right(corpus, examples):
    for s in corpus[1] + corpus[2]:
        q = llm.make_query(s)
        assert llm.parse_choice(llm.mock_llm(llm.build_prompt(q, examples))) == q.gold_plan


def test_mock_without_tags_says_plan_1(corpus, examples):
    s = corpus[2][0]
    q = llm.make_query(s, [O] * len(s.labels))
    assert llm.mock_llm(llm.build_prompt(q, examples)) == "ANSWER: PLAN 1"


def test_mock_is_candidate_order_invariant(corpus, examples):
    for s in corpus[2]:
        for swap in (False, True):
            q = llm.make_query(s, swap=swap)
            pick = llm.parse_choice(llm.mock_llm(llm.build_prompt(q, examples)))
            assert q.candidates[pick - 1].reading == s.interpretation


def test_mock_subword_object_overlap():
    frame = {"verb": "put", "x": "mug", "rel1": "on", "y": "box", "rel2": "near", "z": "cereal box"}
    from prosody_intent.corpus import Instruction

    ex = llm.make_query(coke_sample("A"))
    for interp in ("A", "B"):
        words, labels = Instruction(5, **frame).tokens_and_labels(interp)
        s = UtteranceSample("x", 5, interp, 0, [(w, 0.0, 0.1) for w in words], labels, frame)
        for swap in (False, True):
            q = llm.make_query(s, swap=swap)
            ex2 = llm.DisambiguationQuery("e", 99, ex.transcript, ex.intent_tags, ex.candidates, ex.gold_plan)
            pick = llm.parse_choice(llm.mock_llm(llm.build_prompt(q, [ex2])))
            assert pick == q.gold_plan


def test_mock_rejects_garbage():
    with pytest.raises(ProtocolError):
        llm.mock_llm("hello")
    with pytest.raises(ProtocolError):
        llm.mock_llm("### Query\nTAGS: a/WHAT\n")


def test_eval_gold_none_and_model(corpus, examples):
    queries = corpus[1] + corpus[2]
    assert llm.eval_plan_selection(queries, examples, "gold").accuracy == 1.0
    none = llm.eval_plan_selection(queries, examples, "none")
    assert none.accuracy == 0.5
    assert none.reference["prosody Transformer"] == 0.7196
    flipped = [[{1: 2, 2: 1}.get(t, t) for t in s.labels] for s in queries]
    res = llm.eval_plan_selection(queries, examples, "model", predictions=flipped)
    assert res.accuracy == 0.0
    assert set(res.rows[0]) == {"query_id", "instruction_id", "tagger", "chosen", "gold", "correct"}
    assert set(res.per_instruction()) == {s.instruction_id for s in queries}
    with pytest.raises(ValueError):
        llm.eval_plan_selection(queries, examples, "model")


# ---------------------------------------------------------------- http


def transport(**kw):
    return llm.LlmTransport("http", "http://llm.test/v1/chat", "m", backoff_base_s=0.0, **kw)


def test_http_request_shape_and_parse(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "secret")
    seen = {}

    def handler(req):
        seen["body"] = json.loads(req.content)
        seen["auth"] = req.headers["authorization"]
        return httpx.Response(200, json={"choices": [{"message": {"content": "ANSWER: PLAN 2"}}]})

    with httpx.Client(transport=httpx.MockTransport(handler)) as client:
        text = llm.http_llm("prompt", transport(), client=client)
    assert llm.parse_choice(text) == 2
    assert seen["auth"] == "Bearer secret"
    assert seen["body"]["temperature"] == 0 and seen["body"]["model"] == "m"
    assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]


def test_http_retries_then_succeeds(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "k")
    calls = []
    sleeps = []

    def handler(req):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ConnectError("down")
        if len(calls) == 2:
            return httpx.Response(503)
        return httpx.Response(200, json={"choices": [{"message": {"content": "ANSWER: PLAN 1"}}]})

    t = llm.LlmTransport("http", "http://x", "m", max_retries=3, backoff_base_s=1.0)
    with httpx.Client(transport=httpx.MockTransport(handler)) as client:
        assert llm.http_llm("p", t, client=client, sleep=sleeps.append) == "ANSWER: PLAN 1"
    assert len(calls) == 3 and sleeps == [1.0, 2.0]


def test_http_gives_up(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "k")
    with httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500))) as client:
        with pytest.raises(TransportError):
            llm.http_llm("p", transport(max_retries=2), client=client)
    with httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(401))) as client:
        with pytest.raises(TransportError, match="401"):
            llm.http_llm("p", transport(), client=client)


def test_http_missing_credential_before_network(monkeypatch):
    monkeypatch.delenv("LLM_API_KEY", raising=False)
    calls = []
    client = httpx.Client(transport=httpx.MockTransport(lambda r: calls.append(r) or httpx.Response(200)))
    with pytest.raises(ConfigurationError):
        llm.http_llm("p", transport(), client=client)
    with pytest.raises(ConfigurationError):
        llm.query_llm(["p"], transport(), client=client)
    assert calls == []


def test_transport_validation():
    with pytest.raises(ConfigurationError):
        llm.LlmTransport("http")
    with pytest.raises(ConfigurationError):
        llm.LlmTransport("carrier-pigeon")


def test_http_concurrency_cap_and_order(monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "k")
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(req):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        text = json.loads(req.content)["messages"][1]["content"]
        return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})

    with httpx.Client(transport=httpx.MockTransport(handler)) as client:
        out = llm.query_llm([f"p{i}" for i in range(12)], transport(max_concurrent=3), client=client)
    assert out == [f"p{i}" for i in range(12)]
    assert state["peak"] <= 3


class _Echo(BaseHTTPRequestHandler):
    def do_POST(self):
        self.rfile.read(int(self.headers["Content-Length"]))
        body = json.dumps({"choices": [{"message": {"content": "ANSWER: PLAN 2"}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def test_against_local_server(monkeypatch, corpus, examples):
    monkeypatch.setenv("LLM_API_KEY", "k")
    server = HTTPServer(("127.0.0.1", 0), _Echo)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        t = llm.LlmTransport("http", f"http://127.0.0.1:{server.server_port}/v1", "m", max_concurrent=2)
        res = llm.eval_plan_selection(corpus[2][:6], examples, "gold", t)
    finally:
        server.shutdown()
    assert all(r["chosen"] == 2 for r in res.rows)
