import threading

import pytest

from caploc.modelgate import (
    BackendError,
    ImageAttachment,
    ModelGate,
    ModelRequest,
    Purpose,
    ResponseCache,
    RetryPolicy,
    RetryableBackendError,
    Sampling,
    ScriptExhaustedError,
    ScriptRule,
    ScriptedBackend,
    cache_key,
)


def make_req(**kw):
    base = dict(model="m", system="sys", user="hello", purpose="detect")
    base.update(kw)
    return ModelRequest(**base)


def test_cache_key_stable():
    assert cache_key(make_req()) == cache_key(make_req())


def test_cache_key_sensitive_to_fields():
    base = cache_key(make_req())
    assert cache_key(make_req(user="other")) != base
    assert cache_key(make_req(model="m2")) != base
    assert cache_key(make_req(purpose="inject")) != base
    assert cache_key(make_req(sampling=Sampling(temperature=0.7))) != base
    assert cache_key(make_req(image=ImageAttachment(b"\x00\x01"))) != base
    assert cache_key(make_req(image=ImageAttachment(b"\x00\x02"))) != cache_key(
        make_req(image=ImageAttachment(b"\x00\x01"))
    )


def test_temperature_defaults_to_zero():
    assert Sampling().temperature == 0.0


def test_scripted_single_reply():
    backend = ScriptedBackend([ScriptRule(purpose="detect", responses=["found it"])])
    gate = ModelGate(backend)
    resp = gate.complete(make_req())
    assert resp.text == "found it"
    assert resp.attempts == 1
    assert not resp.cache_hit


def test_scripted_matches_purpose_and_content():
    backend = ScriptedBackend(
        [
            ScriptRule(purpose="inject", responses=["wrong"]),
            ScriptRule(purpose="detect", contains="red car", responses=["by content"]),
            ScriptRule(purpose="detect", responses=["fallback"]),
        ]
    )
    gate = ModelGate(backend)
    assert gate.complete(make_req(user="about a red car")).text == "by content"
    assert gate.complete(make_req(user="something else")).text == "fallback"


def test_scripted_responses_consumed_in_order():
    backend = ScriptedBackend([ScriptRule(purpose="detect", responses=["a", "b"])])
    gate = ModelGate(backend)
    assert gate.complete(make_req(user="u1")).text == "a"
    assert gate.complete(make_req(user="u2")).text == "b"


def test_scripted_responder_callable():
    backend = ScriptedBackend(
        [ScriptRule(purpose="detect", responder=lambda req: req.user.upper())]
    )
    gate = ModelGate(backend)
    assert gate.complete(make_req(user="shout")).text == "SHOUT"


def test_scripted_exhaustion_names_purpose():
    backend = ScriptedBackend([ScriptRule(purpose="detect", responses=["only"])])
    gate = ModelGate(backend)
    gate.complete(make_req(user="u1"))
    with pytest.raises(ScriptExhaustedError, match="detect"):
        gate.complete(make_req(user="u2"))


def test_cache_roundtrip(tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    backend = ScriptedBackend([ScriptRule(purpose="detect", responses=["once"])])
    gate = ModelGate(backend, cache=cache)
    first = gate.complete(make_req())
    second = gate.complete(make_req())
    assert not first.cache_hit
    assert second.cache_hit
    assert second.text == "once"
    assert second.attempts == 0
    assert len(backend.requests) == 1


def test_cache_survives_new_gate(tmp_path):
    cache_dir = tmp_path / "cache"
    gate1 = ModelGate(
        ScriptedBackend([ScriptRule(purpose="detect", responses=["persisted"])]),
        cache=ResponseCache(cache_dir),
    )
    gate1.complete(make_req())
    gate2 = ModelGate(ScriptedBackend([]), cache=ResponseCache(cache_dir))
    assert gate2.complete(make_req()).text == "persisted"


class FlakyBackend:
    id = "flaky"

    def __init__(self, fail_times):
        self.fail_times = fail_times
        self.calls = 0

    def send(self, req):
        self.calls += 1
        if self.calls <= self.fail_times:
            raise RetryableBackendError("transient")
        return "recovered"


def test_retry_until_success():
    sleeps = []
    backend = FlakyBackend(fail_times=2)
    gate = ModelGate(
        backend,
        retry=RetryPolicy(attempts=3, base_delay=0.5),
        sleep=sleeps.append,
    )
    resp = gate.complete(make_req())
    assert resp.text == "recovered"
    assert resp.attempts == 3
    assert sleeps == [0.5, 1.0]


def test_retry_exhausted():
    backend = FlakyBackend(fail_times=99)
    gate = ModelGate(backend, retry=RetryPolicy(attempts=2, base_delay=0.0), sleep=lambda s: None)
    with pytest.raises(BackendError, match="after 2 attempts"):
        gate.complete(make_req())
    assert backend.calls == 2


class FatalBackend:
    id = "fatal"

    def __init__(self):
        self.calls = 0

    def send(self, req):
        self.calls += 1
        raise BackendError("HTTP 401: bad key")


def test_non_retryable_not_retried():
    backend = FatalBackend()
    gate = ModelGate(backend, retry=RetryPolicy(attempts=3))
    with pytest.raises(BackendError, match="401"):
        gate.complete(make_req())
    assert backend.calls == 1


class SlowBackend:
    id = "slow"

    def __init__(self):
        self.calls = 0
        self.release = threading.Event()

    def send(self, req):
        self.calls += 1
        self.release.wait(timeout=5)
        return "slow answer"


def test_inflight_dedup():
    backend = SlowBackend()
    gate = ModelGate(backend)
    results = []

    def worker():
        results.append(gate.complete(make_req()))

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    # give all threads time to reach the gate before releasing the backend
    import time

    time.sleep(0.2)
    backend.release.set()
    for t in threads:
        t.join()
    assert backend.calls == 1
    assert {r.text for r in results} == {"slow answer"}


def test_retry_delay_capped():
    policy = RetryPolicy(attempts=10, base_delay=1.0, max_delay=4.0)
    assert policy.delay(1) == 1.0
    assert policy.delay(3) == 4.0
    assert policy.delay(9) == 4.0


def test_purpose_enum_values():
    assert {p.value for p in Purpose} == {"inject", "detect", "evaluate", "caption"}
