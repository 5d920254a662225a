"""Backend contracts, cache behavior, and the batch runner."""

import json
import math
import multiprocessing
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from clinbias import provider
from clinbias.errors import (
    CapabilityError,
    IncompleteRunError,
    TransportError,
    ValidationError,
)
from clinbias.provider import (
    ContinuationQuery,
    DecodingParams,
    FlakyBackend,
    GenerationQuery,
    HashMockBackend,
    JsonHttpBackend,
    OpenAICompatBackend,
    ProbeRunner,
    ResultCache,
    TableMockBackend,
    UniformMockBackend,
)


def cq(prompt="P", continuation="X", model="m"):
    return ContinuationQuery(model_id=model, prompt=prompt, continuation=continuation)


def test_query_validation():
    with pytest.raises(ValidationError):
        ContinuationQuery("m", "", "X")
    with pytest.raises(ValidationError):
        ContinuationQuery("m", "P", "")
    with pytest.raises(ValidationError):
        DecodingParams(max_tokens=0)
    with pytest.raises(ValidationError):
        provider.ProbeResult(cq(), log_probability=0.5, token_count=1,
                             timestamp=0.0, token_logprobs=(0.5,))
    with pytest.raises(ValidationError):
        provider.ProbeResult(cq(), log_probability=-1.0, token_count=0,
                             timestamp=0.0, token_logprobs=())


def test_table_mock_single_token():
    backend = TableMockBackend(logprob_table={("P", "X"): [math.log(0.25)]})
    result = provider.continuation_logprob(backend, cq())
    assert result.log_probability == math.log(0.25)
    assert result.token_count == 1
    with pytest.raises(CapabilityError):
        provider.continuation_logprob(backend, cq(continuation="Y"))


def test_two_token_joint_probability():
    backend = TableMockBackend(logprob_table={("P", "XY"): [math.log(0.5), math.log(0.2)]})
    result = provider.continuation_logprob(backend, cq(continuation="XY"))
    assert result.token_count == 2
    assert abs(result.probability - 0.1) < 1e-15


def test_first_token_mode_shares_cache(tmp_path):
    backend = TableMockBackend(logprob_table={("P", "XY"): [math.log(0.5), math.log(0.2)]})
    cache = ResultCache(tmp_path)
    joint = provider.continuation_logprob(backend, cq(continuation="XY"), cache)
    # a bare Backend supports nothing; answers must come from the cache
    first = provider.continuation_logprob(
        provider.Backend(), cq(continuation="XY"), cache, mode="first_token"
    )
    assert first.log_probability == math.log(0.5)
    assert first.token_count == 1
    assert first.token_logprobs == joint.token_logprobs
    with pytest.raises(ValidationError):
        provider.continuation_logprob(backend, cq(), cache, mode="whole")


def test_cache_round_trip_and_single_backend_call(tmp_path):
    backend = HashMockBackend()
    cache = ResultCache(tmp_path)
    first = provider.continuation_logprob(backend, cq(), cache)
    second = provider.continuation_logprob(backend, cq(), cache)
    assert backend.calls == 1
    assert first == second  # includes the preserved timestamp

    reopened = ResultCache(tmp_path)
    third = provider.continuation_logprob(backend, cq(), reopened)
    assert backend.calls == 1
    assert third == first


def test_hash_mock_additivity_is_exact():
    backend = HashMockBackend()
    rng = random.Random(11)
    alphabet = "abcdefgh XYZ.,"
    for _ in range(200):
        prompt = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 30)))
        whole = "".join(rng.choice(alphabet) for _ in range(rng.randint(2, 24)))
        cut = rng.randint(1, len(whole) - 1)
        a, b = whole[:cut], whole[cut:]
        lp_whole = provider.continuation_logprob(backend, cq(prompt, whole)).log_probability
        lp_a = provider.continuation_logprob(backend, cq(prompt, a)).log_probability
        lp_b = provider.continuation_logprob(backend, cq(prompt + a, b)).log_probability
        assert lp_whole == lp_a + lp_b  # exact, by dyadic construction


def test_hash_mock_determinism_and_model_sensitivity():
    b1, b2 = HashMockBackend(), HashMockBackend()
    q = cq(prompt="desc is related to the name:", continuation=" Maria")
    r1 = provider.continuation_logprob(b1, q)
    r2 = provider.continuation_logprob(b2, q)
    assert r1.token_logprobs == r2.token_logprobs
    other = provider.continuation_logprob(b1, cq(q.prompt, q.continuation, model="m2"))
    assert other.token_logprobs != r1.token_logprobs


def test_uniform_mock_constant_probability():
    backend = UniformMockBackend(probability=0.5)
    lps = {
        provider.continuation_logprob(backend, cq(continuation=name)).log_probability
        for name in (" Maria", " Wei", " Alexander", " J")
    }
    assert lps == {math.log(0.5)}


def test_positive_logprobs_clamped(tmp_path):
    backend = TableMockBackend(logprob_table={("P", "X"): [1e-9]})
    result = provider.continuation_logprob(backend, cq(), ResultCache(tmp_path))
    assert result.log_probability == 0.0
    bad = TableMockBackend(logprob_table={("P", "X"): [float("nan")]})
    with pytest.raises(CapabilityError):
        provider.continuation_logprob(bad, cq())


def test_generation_round_trip(tmp_path):
    backend = TableMockBackend(generation_table={"P": "1. Sepsis\n2. Cholera"})
    cache = ResultCache(tmp_path)
    query = GenerationQuery("m", "P", DecodingParams(temperature=0.0, max_tokens=64, seed=7))
    first = provider.generate(backend, query, cache)
    second = provider.generate(backend, query, cache)
    assert first.text == "1. Sepsis\n2. Cholera"
    assert first.params == query.params
    assert backend.calls == 1
    assert first == second


def test_cache_skips_corrupt_lines(tmp_path):
    backend = HashMockBackend()
    cache = ResultCache(tmp_path)
    provider.continuation_logprob(backend, cq(), cache)
    provider.continuation_logprob(backend, cq(continuation="Y"), cache)
    with open(cache.path, "a", encoding="utf-8") as fh:
        fh.write('{"torn": \n')
        fh.write("not json at all\n")
    with pytest.warns(UserWarning, match="corrupt cache line"):
        reopened = ResultCache(tmp_path)
    assert len(reopened) == 2
    assert provider.continuation_logprob(backend, cq(), reopened).token_logprobs


def _append_entries(directory, start, count):
    cache = ResultCache(directory)
    for i in range(start, start + count):
        cache.store(f"key{i}", {"kind": "continuation", "token_logprobs": [-float(i + 1)],
                                "timestamp": 0.0})


def test_concurrent_appenders_disjoint_keys(tmp_path):
    procs = [
        multiprocessing.Process(target=_append_entries, args=(str(tmp_path), 0, 50)),
        multiprocessing.Process(target=_append_entries, args=(str(tmp_path), 50, 50)),
    ]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    assert all(p.exitcode == 0 for p in procs)
    cache = ResultCache(tmp_path)
    assert len(cache) == 100
    for i in range(100):
        assert cache.lookup(f"key{i}")["token_logprobs"] == [-float(i + 1)]


def test_runner_resumes_after_injected_failure(tmp_path):
    queries = [cq(prompt=f"prompt {i}", continuation=" name") for i in range(10)]

    flaky = FlakyBackend(HashMockBackend(), fail_after=3)
    cache = ResultCache(tmp_path / "interrupted")
    runner = ProbeRunner(flaky, cache, max_workers=1)
    with pytest.raises(IncompleteRunError, match="checkpointed"):
        runner.run_continuations(queries)
    assert len(cache) == 3

    resumed_backend = HashMockBackend()
    resumed_cache = ResultCache(tmp_path / "interrupted")
    resumed = ProbeRunner(resumed_backend, resumed_cache).run_continuations(queries)
    assert resumed_backend.calls == 7  # only the unanswered queries

    fresh = ProbeRunner(HashMockBackend(), ResultCache(tmp_path / "fresh")).run_continuations(queries)
    assert {q: r.log_probability for q, r in resumed.items()} == {
        q: r.log_probability for q, r in fresh.items()
    }
    # checkpointed entries keep their original timestamps on resume
    for q in queries[:3]:
        key = provider.continuation_key(q)
        assert resumed_cache.lookup(key)["timestamp"] == cache.lookup(key)["timestamp"]


def test_runner_warm_rerun_zero_backend_calls(tmp_path):
    backend = HashMockBackend()
    cache = ResultCache(tmp_path)
    queries = [cq(prompt=f"p{i}", continuation=" n") for i in range(20)]
    ProbeRunner(backend, cache, max_workers=4).run_continuations(queries)
    assert backend.calls == 20
    again = ProbeRunner(backend, cache, max_workers=4).run_continuations(queries)
    assert backend.calls == 20
    assert len(again) == 20


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def _body(self):
        length = int(self.headers.get("Content-Length", 0))
        return json.loads(self.rfile.read(length) or b"{}")

    def _reply(self, payload, status=200):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        payload = self._body()
        if self.path == "/flaky/v1/logprob":
            if self.server.flaky_failures > 0:
                self.server.flaky_failures -= 1
                self._reply({"error": "try again"}, status=503)
            else:
                self._reply({"tokens": ["x"], "token_logprobs": [-0.5]})
        elif self.path == "/v1/logprob":
            n = len(payload["continuation"])
            self._reply({"tokens": list(payload["continuation"]),
                         "token_logprobs": [-0.25] * n})
        elif self.path == "/v1/generate":
            self._reply({"text": "echo: " + payload["prompt"]})
        elif self.path == "/v1/embed":
            self._reply({"embeddings": [[1.0, float(len(t))] for t in payload["texts"]]})
        elif self.path == "/nolp/v1/logprob":
            self._reply({"tokens": ["x"]})
        elif self.path == "/badreq/v1/logprob":
            self._reply({"error": "no such model"}, status=400)
        elif self.path == "/oai/v1/completions":
            if payload.get("echo"):
                text = payload["prompt"]
                self._reply({"choices": [{
                    "text": text,
                    "logprobs": {
                        "tokens": list(text),
                        "token_logprobs": [None] + [-0.125] * (len(text) - 1),
                        "text_offset": list(range(len(text))),
                    },
                }]})
            else:
                self._reply({"choices": [{"text": "1. Sepsis"}]})
        elif self.path == "/oai2/v1/completions":
            text = payload["prompt"]
            offsets = list(range(0, len(text), 2))  # 2-char tokens
            self._reply({"choices": [{
                "text": text,
                "logprobs": {
                    "tokens": [text[i:i + 2] for i in offsets],
                    "token_logprobs": [None] + [-0.125] * (len(offsets) - 1),
                    "text_offset": offsets,
                },
            }]})
        elif self.path == "/oai/v1/embeddings":
            self._reply({"data": [{"embedding": [1.0, 2.0]} for _ in payload["input"]]})
        else:
            self._reply({"error": "not found"}, status=404)


@pytest.fixture(scope="module")
def http_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    server.flaky_failures = 1
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def test_json_http_backend(http_server):
    backend = JsonHttpBackend(http_server, max_retries=0)
    result = provider.continuation_logprob(backend, cq(continuation="name"))
    assert result.token_count == 4
    assert result.log_probability == -1.0

    gen = provider.generate(backend, GenerationQuery("m", "hello"))
    assert gen.text == "echo: hello"
    assert backend.embed_texts("m", ["a", "bb"]) == [[1.0, 1.0], [1.0, 2.0]]


def test_json_http_backend_errors(http_server):
    missing = JsonHttpBackend(http_server + "/nolp", max_retries=0)
    with pytest.raises(CapabilityError, match="token_logprobs"):
        provider.continuation_logprob(missing, cq())
    bad = JsonHttpBackend(http_server + "/badreq", max_retries=0)
    with pytest.raises(CapabilityError, match="400"):
        provider.continuation_logprob(bad, cq())
    unreachable = JsonHttpBackend("http://127.0.0.1:9", max_retries=0)
    with pytest.raises(TransportError):
        provider.continuation_logprob(unreachable, cq())


def test_json_http_backend_retries_then_succeeds(http_server):
    backend = JsonHttpBackend(http_server + "/flaky", max_retries=2, retry_delay=0.0)
    result = provider.continuation_logprob(backend, cq())
    assert result.log_probability == -0.5


def test_openai_compat_backend(http_server):
    backend = OpenAICompatBackend(http_server + "/oai/v1", max_retries=0)
    result = provider.continuation_logprob(backend, cq(prompt="Pp", continuation="abc"))
    # 1-char server tokens: three continuation tokens at -0.125 each
    assert result.token_count == 3
    assert result.log_probability == -0.375

    gen = provider.generate(backend, GenerationQuery("m", "anything"))
    assert gen.text == "1. Sepsis"
    assert backend.embed_texts("m", ["x"]) == [[1.0, 2.0]]


def test_openai_compat_boundary_misalignment(http_server):
    backend = OpenAICompatBackend(http_server + "/oai2/v1", max_retries=0)
    # odd prompt length never lands on the server's 2-char token grid
    with pytest.raises(CapabilityError, match="boundary"):
        provider.continuation_logprob(backend, cq(prompt="Ppp", continuation="abcd"))
