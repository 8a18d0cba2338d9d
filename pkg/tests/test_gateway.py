"""Gateway behavior: retries, audit trail, normalization, and the mock provider."""

import hashlib
import json
import threading

import httpx
import numpy as np
import pytest

from coursetutor.errors import (
    MockScriptExhausted,
    ProviderRejected,
    ProviderTimeout,
    RetriesExhausted,
    TransientProviderError,
)
from coursetutor.gateway import (
    AuditLog,
    ChatMessage,
    CompletionRequest,
    FallbackEmbedder,
    FileAuditLog,
    FinishReason,
    Gateway,
    HttpChatProvider,
    HttpEmbedder,
    MockFailure,
    MockProvider,
    ProviderReply,
    Role,
)


def make_request(tag="answer", content="What is a heap?", **kwargs):
    messages = (
        ChatMessage(Role.System, "You are a tutor."),
        ChatMessage(Role.User, content),
    )
    return CompletionRequest(messages=messages, model_id="test-model", tag=tag, **kwargs)


class ScriptedProvider:
    """Yields a fixed sequence of replies or raises queued exceptions."""

    provider_id = "scripted"

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0

    def complete_once(self, request, timeout_ms):
        self.calls += 1
        item = self.outcomes.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


class ScriptedEmbedder:
    embedder_id = "scripted-embed"

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0

    def embed_once(self, texts, timeout_ms):
        self.calls += 1
        item = self.outcomes.pop(0)
        if isinstance(item, Exception):
            raise item
        return [np.asarray(vec, dtype=np.float64) for vec in item]


class FixedRng:
    """random() always returns 1.0 so backoff values are exact."""

    def random(self):
        return 1.0


def make_gateway(provider, embedder=None, **kwargs):
    kwargs.setdefault("audit", AuditLog())
    kwargs.setdefault("sleep", lambda s: None)
    kwargs.setdefault("rng", FixedRng())
    return Gateway(provider, embedder or FallbackEmbedder(8), **kwargs)


# -- message and request validation -------------------------------------------


def test_system_and_user_messages_must_be_nonempty():
    with pytest.raises(ValueError):
        ChatMessage(Role.System, "")
    with pytest.raises(ValueError):
        ChatMessage(Role.User, "   ")
    # assistant turns may be empty (a guard can blank out an answer)
    ChatMessage(Role.Assistant, "")


def test_request_requires_leading_system_message():
    with pytest.raises(ValueError):
        CompletionRequest(messages=(), model_id="m", tag="t")
    with pytest.raises(ValueError):
        CompletionRequest(
            messages=(ChatMessage(Role.User, "hi"),), model_id="m", tag="t"
        )


def test_request_rejects_bad_parameters():
    with pytest.raises(ValueError):
        make_request(temperature=-0.1)
    with pytest.raises(ValueError):
        make_request(max_tokens=0)
    with pytest.raises(ValueError):
        make_request(tag="")


# -- mock provider -------------------------------------------------------------


def test_mock_exact_tag_match_beats_substring():
    provider = MockProvider({"answer": ["tagged"], "heap": ["substr"]})
    reply = provider.complete_once(make_request(tag="answer", content="heap question"), 0)
    assert reply.text == "tagged"


def test_mock_substring_matchers_probe_in_insertion_order():
    first = MockProvider({"zebra": ["z"], "heap": ["h"]})
    assert first.complete_once(make_request(tag="x", content="zebra heap"), 0).text == "z"
    second = MockProvider({"heap": ["h"], "zebra": ["z"]})
    assert second.complete_once(make_request(tag="x", content="zebra heap"), 0).text == "h"


def test_mock_consumes_responses_in_order_then_exhausts():
    provider = MockProvider({"answer": ["one", "two"]})
    request = make_request()
    assert provider.complete_once(request, 0).text == "one"
    assert provider.complete_once(request, 0).text == "two"
    with pytest.raises(MockScriptExhausted):
        provider.complete_once(request, 0)


def test_mock_missing_matcher_raises_with_tag():
    provider = MockProvider({})
    with pytest.raises(MockScriptExhausted, match="'answer'"):
        provider.complete_once(make_request(), 0)


def test_mock_exhaustion_is_a_rejection_subclass():
    # the gateway must not retry an exhausted script
    assert issubclass(MockScriptExhausted, ProviderRejected)


def test_mock_failure_kinds_map_to_exceptions():
    provider = MockProvider(
        {
            "answer": [
                MockFailure("timeout"),
                MockFailure("rejected"),
                MockFailure("transient"),
                "ok",
            ]
        }
    )
    request = make_request()
    with pytest.raises(ProviderTimeout):
        provider.complete_once(request, 0)
    with pytest.raises(ProviderRejected):
        provider.complete_once(request, 0)
    with pytest.raises(TransientProviderError):
        provider.complete_once(request, 0)
    assert provider.complete_once(request, 0).text == "ok"


def test_mock_from_file_parses_strings_and_error_entries(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(
        json.dumps({"intent": ["Lecture", {"error": "transient"}]}), encoding="utf-8"
    )
    provider = MockProvider.from_file(path)
    request = make_request(tag="intent")
    assert provider.complete_once(request, 0).text == "Lecture"
    with pytest.raises(TransientProviderError):
        provider.complete_once(request, 0)


def test_mock_from_file_rejects_malformed_entries(tmp_path):
    for bad in ([42], [{"oops": 1}]):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"t": bad}), encoding="utf-8")
        with pytest.raises(ValueError):
            MockProvider.from_file(path)


# -- completion retry policy ---------------------------------------------------


def test_complete_success_passthrough():
    provider = ScriptedProvider([ProviderReply(text="A heap is a tree.")])
    gateway = make_gateway(provider)
    result = gateway.complete(make_request())
    assert result.text == "A heap is a tree."
    assert result.finish_reason is FinishReason.Stop
    assert result.provider_id == "scripted"
    assert result.latency_ms >= 0.0


def test_transient_failures_retry_until_success():
    provider = ScriptedProvider(
        [
            TransientProviderError("blip"),
            TransientProviderError("blip"),
            ProviderReply(text="ok"),
        ]
    )
    sleeps = []
    gateway = make_gateway(provider, max_retries=2, sleep=sleeps.append)
    result = gateway.complete(make_request())
    assert result.text == "ok"
    assert provider.calls == 3
    # exponential backoff with jitter pinned at 1.0: base * 2^attempt
    assert sleeps == [0.5, 1.0]


def test_exhausted_retries_raise_after_max_attempts():
    provider = ScriptedProvider([TransientProviderError("down")] * 3)
    sleeps = []
    gateway = make_gateway(provider, max_retries=2, sleep=sleeps.append)
    with pytest.raises(RetriesExhausted):
        gateway.complete(make_request())
    assert provider.calls == 3
    assert sleeps == [0.5, 1.0]  # no sleep after the final attempt


def test_timeouts_are_retried_like_transient_failures():
    provider = ScriptedProvider([ProviderTimeout("slow"), ProviderReply(text="ok")])
    gateway = make_gateway(provider)
    assert gateway.complete(make_request()).text == "ok"
    assert provider.calls == 2


def test_rejection_is_never_retried():
    provider = ScriptedProvider([ProviderRejected("policy"), ProviderReply(text="x")])
    gateway = make_gateway(provider)
    with pytest.raises(ProviderRejected):
        gateway.complete(make_request())
    assert provider.calls == 1


def test_custom_backoff_base_scales_sleeps():
    provider = ScriptedProvider(
        [TransientProviderError("a"), TransientProviderError("b"), ProviderReply(text="ok")]
    )
    sleeps = []
    gateway = make_gateway(provider, backoff_base_s=0.25, sleep=sleeps.append)
    gateway.complete(make_request())
    assert sleeps == [0.25, 0.5]


# -- output normalization -------------------------------------------------------


def test_runaway_output_is_truncated_to_length():
    provider = ScriptedProvider([ProviderReply(text="x" * 40)])
    gateway = make_gateway(provider)
    result = gateway.complete(make_request(max_tokens=2))  # cap: 2 * 8 = 16 chars
    assert result.text == "x" * 16
    assert result.finish_reason is FinishReason.Length


def test_output_exactly_at_cap_is_untouched():
    provider = ScriptedProvider([ProviderReply(text="x" * 16)])
    gateway = make_gateway(provider)
    result = gateway.complete(make_request(max_tokens=2))
    assert result.text == "x" * 16
    assert result.finish_reason is FinishReason.Stop


def test_empty_stop_reply_becomes_error():
    provider = ScriptedProvider([ProviderReply(text="")])
    gateway = make_gateway(provider)
    result = gateway.complete(make_request())
    assert result.finish_reason is FinishReason.Error


def test_length_finish_reason_passes_through():
    provider = ScriptedProvider(
        [ProviderReply(text="cut short", finish_reason=FinishReason.Length)]
    )
    gateway = make_gateway(provider)
    assert gateway.complete(make_request()).finish_reason is FinishReason.Length


def test_usage_estimated_from_token_counts_when_absent():
    # "You are a tutor." -> 4 tokens, "What is a heap?" -> 4 tokens
    # "A heap is a tree." -> 5 tokens
    provider = ScriptedProvider([ProviderReply(text="A heap is a tree.")])
    gateway = make_gateway(provider)
    result = gateway.complete(make_request())
    assert result.usage.prompt_tokens == 8
    assert result.usage.completion_tokens == 5


def test_usage_passthrough_when_provider_reports_it():
    provider = ScriptedProvider(
        [ProviderReply(text="ok", prompt_tokens=11, completion_tokens=7)]
    )
    gateway = make_gateway(provider)
    result = gateway.complete(make_request())
    assert result.usage.prompt_tokens == 11
    assert result.usage.completion_tokens == 7


# -- audit trail ----------------------------------------------------------------


def test_every_attempt_is_audited_including_failures():
    provider = ScriptedProvider(
        [TransientProviderError("blip"), ProviderReply(text="fine")]
    )
    audit = AuditLog()
    gateway = make_gateway(provider, audit=audit)
    gateway.complete(make_request())
    assert len(audit.entries) == 2
    assert audit.entries[0]["finish_reason"] == "error"
    assert audit.entries[1]["finish_reason"] == "stop"


def test_audit_entry_fields_and_digests():
    provider = ScriptedProvider([ProviderReply(text="fine")])
    audit = AuditLog()
    gateway = make_gateway(provider, audit=audit)
    request = make_request()
    gateway.complete(request)
    (entry,) = audit.entries
    assert set(entry) == {
        "ts",
        "tag",
        "model_id",
        "request_sha256",
        "response_sha256",
        "finish_reason",
        "latency_ms",
    }
    assert entry["tag"] == "answer"
    assert entry["model_id"] == "test-model"
    assert entry["response_sha256"] == hashlib.sha256(b"fine").hexdigest()
    assert len(entry["request_sha256"]) == 64
    int(entry["request_sha256"], 16)  # hex digest
    assert entry["latency_ms"] >= 0.0
    assert "T" in entry["ts"]  # RFC 3339 timestamp


def test_request_digest_is_stable_and_content_sensitive():
    def run_once(content):
        audit = AuditLog()
        gateway = make_gateway(ScriptedProvider([ProviderReply(text="x")]), audit=audit)
        gateway.complete(make_request(content=content))
        return audit.entries[0]["request_sha256"]

    assert run_once("same question") == run_once("same question")
    assert run_once("same question") != run_once("different question")


def test_rejection_still_lands_in_audit():
    audit = AuditLog()
    gateway = make_gateway(ScriptedProvider([ProviderRejected("no")]), audit=audit)
    with pytest.raises(ProviderRejected):
        gateway.complete(make_request())
    assert len(audit.entries) == 1
    assert audit.entries[0]["finish_reason"] == "error"


def test_file_audit_log_appends_parseable_lines(tmp_path):
    path = tmp_path / "nested" / "audit.jsonl"
    audit = FileAuditLog(path)
    gateway = make_gateway(
        ScriptedProvider([ProviderReply(text="one"), ProviderReply(text="two")]),
        audit=audit,
    )
    gateway.complete(make_request())
    gateway.complete(make_request(content="second question"))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    parsed = [json.loads(line) for line in lines]
    assert parsed == audit.entries


def test_concurrent_completions_audit_once_each():
    provider = MockProvider({"answer": ["r"] * 8})
    audit = AuditLog()
    gateway = make_gateway(provider, audit=audit, concurrency=4)
    threads = [
        threading.Thread(target=gateway.complete, args=(make_request(),))
        for _ in range(8)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(audit.entries) == 8


# -- embedding ------------------------------------------------------------------


def test_embed_normalizes_vectors_to_unit_length():
    embedder = ScriptedEmbedder([[[3.0, 4.0]]])
    gateway = make_gateway(ScriptedProvider([]), embedder=embedder)
    (vec,) = gateway.embed(["anything"])
    assert np.allclose(vec, [0.6, 0.8])


def test_embed_retries_transient_failures():
    embedder = ScriptedEmbedder([TransientProviderError("blip"), [[1.0, 0.0]]])
    sleeps = []
    gateway = make_gateway(ScriptedProvider([]), embedder=embedder, sleep=sleeps.append)
    (vec,) = gateway.embed(["text"])
    assert np.allclose(vec, [1.0, 0.0])
    assert embedder.calls == 2
    assert sleeps == [0.5]


def test_embed_gives_up_after_max_attempts():
    embedder = ScriptedEmbedder([TransientProviderError("down")] * 3)
    gateway = make_gateway(ScriptedProvider([]), embedder=embedder, max_retries=2)
    with pytest.raises(RetriesExhausted):
        gateway.embed(["text"])
    assert embedder.calls == 3


def test_embed_rejects_empty_inputs():
    gateway = make_gateway(ScriptedProvider([]))
    with pytest.raises(ValueError):
        gateway.embed([])
    with pytest.raises(ValueError):
        gateway.embed(["ok", ""])


def test_embed_propagates_rejection_without_retry():
    embedder = ScriptedEmbedder([ProviderRejected("bad model"), [[1.0, 0.0]]])
    gateway = make_gateway(ScriptedProvider([]), embedder=embedder)
    with pytest.raises(ProviderRejected):
        gateway.embed(["text"])
    assert embedder.calls == 1


# -- hashing embedder -----------------------------------------------------------


def test_fallback_embedder_is_deterministic():
    a = FallbackEmbedder(32)
    b = FallbackEmbedder(32)
    va = a.embed_once(["binary search trees"], 0)[0]
    vb = b.embed_once(["binary search trees"], 0)[0]
    assert np.array_equal(va, vb)


def test_fallback_embedder_id_encodes_dimension():
    assert FallbackEmbedder(64).embedder_id == "feature-hash-64-v1"
    assert FallbackEmbedder(16).embedder_id == "feature-hash-16-v1"


def test_fallback_embedder_vectors_are_unit_norm():
    embedder = FallbackEmbedder(24)
    for text in ("one", "two words", "a much longer sentence about sorting"):
        vec = embedder.embed_once([text], 0)[0]
        assert vec.shape == (24,)
        assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-12)


def test_fallback_embedder_single_token_hits_one_bucket():
    vec = FallbackEmbedder(64).embed_once(["cat"], 0)[0]
    nonzero = np.nonzero(vec)[0]
    assert len(nonzero) == 1
    assert abs(vec[nonzero[0]]) == pytest.approx(1.0)


def test_fallback_embedder_tokenless_text_maps_to_first_axis():
    vec = FallbackEmbedder(16).embed_once(["!!! ???"], 0)[0]
    expected = np.zeros(16)
    expected[0] = 1.0
    assert np.array_equal(vec, expected)


def test_fallback_embedder_is_case_insensitive():
    embedder = FallbackEmbedder(32)
    assert np.array_equal(
        embedder.embed_once(["Cat"], 0)[0], embedder.embed_once(["cat"], 0)[0]
    )


def test_fallback_embedder_repetition_keeps_direction():
    embedder = FallbackEmbedder(32)
    once = embedder.embed_once(["cat"], 0)[0]
    twice = embedder.embed_once(["cat cat"], 0)[0]
    assert np.allclose(once, twice)


# -- http providers -------------------------------------------------------------


def make_chat_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_http_chat_provider_round_trip():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(
            200,
            json={
                "choices": [
                    {"message": {"content": "hi there"}, "finish_reason": "stop"}
                ],
                "usage": {"prompt_tokens": 9, "completion_tokens": 3},
            },
        )

    provider = HttpChatProvider(
        "http://llm.example/v1/", api_key="sk-test", client=make_chat_client(handler)
    )
    reply = provider.complete_once(make_request(), 5000)
    assert reply.text == "hi there"
    assert reply.finish_reason is FinishReason.Stop
    assert reply.prompt_tokens == 9
    assert reply.completion_tokens == 3
    assert seen["url"] == "http://llm.example/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    assert seen["body"]["model"] == "test-model"
    assert seen["body"]["temperature"] == 0.0
    assert seen["body"]["max_tokens"] == 1024
    assert seen["body"]["messages"][0] == {
        "role": "system",
        "content": "You are a tutor.",
    }


def test_http_chat_provider_maps_length_finish():
    def handler(request):
        return httpx.Response(
            200,
            json={"choices": [{"message": {"content": "x"}, "finish_reason": "length"}]},
        )

    provider = HttpChatProvider("http://x", None, client=make_chat_client(handler))
    assert provider.complete_once(make_request(), 1000).finish_reason is FinishReason.Length


def test_http_chat_provider_omits_auth_header_without_key():
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(
            200, json={"choices": [{"message": {"content": "y"}}]}
        )

    provider = HttpChatProvider("http://x", None, client=make_chat_client(handler))
    provider.complete_once(make_request(), 1000)
    assert seen["auth"] is None


def test_http_chat_provider_status_code_mapping():
    def handler_500(request):
        return httpx.Response(500, text="boom")

    def handler_400(request):
        return httpx.Response(400, json={"error": "bad request"})

    with pytest.raises(TransientProviderError):
        HttpChatProvider("http://x", None, client=make_chat_client(handler_500)).complete_once(
            make_request(), 1000
        )
    with pytest.raises(ProviderRejected):
        HttpChatProvider("http://x", None, client=make_chat_client(handler_400)).complete_once(
            make_request(), 1000
        )


def test_http_chat_provider_rejects_malformed_body():
    def handler(request):
        return httpx.Response(200, json={"unexpected": True})

    provider = HttpChatProvider("http://x", None, client=make_chat_client(handler))
    with pytest.raises(ProviderRejected):
        provider.complete_once(make_request(), 1000)


def test_http_chat_provider_maps_timeout():
    def handler(request):
        raise httpx.ReadTimeout("too slow", request=request)

    provider = HttpChatProvider("http://x", None, client=make_chat_client(handler))
    with pytest.raises(ProviderTimeout):
        provider.complete_once(make_request(), 1000)


def test_http_embedder_round_trip():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["body"] = json.loads(request.content)
        return httpx.Response(
            200,
            json={"data": [{"embedding": [1.0, 2.0]}, {"embedding": [3.0, 4.0]}]},
        )

    embedder = HttpEmbedder(
        "http://llm.example/v1", api_key=None, model_id="embed-small",
        client=make_chat_client(handler),
    )
    vectors = embedder.embed_once(["a", "b"], 5000)
    assert seen["url"] == "http://llm.example/v1/embeddings"
    assert seen["body"] == {"model": "embed-small", "input": ["a", "b"]}
    assert np.array_equal(vectors[0], [1.0, 2.0])
    assert np.array_equal(vectors[1], [3.0, 4.0])
    assert embedder.embedder_id == "http:embed-small"


def test_http_embedder_surfaces_server_errors_as_transient():
    def handler(request):
        return httpx.Response(503, text="overloaded")

    embedder = HttpEmbedder("http://x", None, "m", client=make_chat_client(handler))
    with pytest.raises(TransientProviderError):
        embedder.embed_once(["a"], 1000)
