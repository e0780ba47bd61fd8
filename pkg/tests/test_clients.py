import io
import json
import urllib.error

import numpy as np
import pytest

from glyphforge.errors import ConfigurationError, ProtocolError, TransportError
from glyphforge.evaluation import OracleOCR
from glyphforge.layout import BBox, StubLayoutLLM
from glyphforge.pipelines.clients import (
    CallRecorder,
    FailingClient,
    GradientT2I,
    JSONTransport,
    MedianInpainter,
    RemoteMLLM,
    RemoteInpainter,
    RemoteOCR,
    RemoteT2I,
    RemoteTextLLM,
    TransportConfig,
    decode_image,
    encode_image,
    make_inpainter,
    make_layout_llm,
    make_mllm,
    make_ocr,
    make_t2i,
)


class _Resp(io.BytesIO):
    def __enter__(self):
        return self

    def __exit__(self, *a):
        self.close()


class FakeOpener:
    """Replays a script of responses: dicts become JSON bodies, exceptions are raised."""

    def __init__(self, script):
        self.script = list(script)
        self.requests = []

    def __call__(self, req, timeout):
        self.requests.append((json.loads(req.data), timeout))
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        if isinstance(item, bytes):
            return _Resp(item)
        return _Resp(json.dumps(item).encode())


def _http_error(code):
    return urllib.error.HTTPError("http://x", code, "err", {}, None)


def _transport(script, retries=2):
    sleeps = []
    opener = FakeOpener(script)
    t = JSONTransport("http://svc", TransportConfig(timeout_s=1.5, retries=retries, backoff_s=0.1),
                      opener=opener, sleep=sleeps.append)
    return t, opener, sleeps


def test_transport_retries_then_succeeds():
    t, opener, sleeps = _transport([_http_error(503), urllib.error.URLError("down"), {"ok": 1}])
    assert t.post({"a": 1}) == {"ok": 1}
    assert len(opener.requests) == 3
    assert sleeps == [0.1, 0.2]
    assert opener.requests[0] == ({"a": 1}, 1.5)


def test_transport_gives_up_after_retries():
    t, opener, _ = _transport([TimeoutError()] * 3)
    with pytest.raises(TransportError) as ei:
        t.post({})
    assert ei.value.attempts == 3 and ei.value.retryable


def test_client_errors_are_not_retried():
    t, opener, sleeps = _transport([_http_error(400), {"ok": 1}])
    with pytest.raises(TransportError) as ei:
        t.post({})
    assert not ei.value.retryable and len(opener.requests) == 1 and sleeps == []


def test_invalid_json_is_protocol_error():
    t, _, _ = _transport([b"<html>"])
    with pytest.raises(ProtocolError):
        t.post({})


def test_env_configuration(monkeypatch):
    monkeypatch.setenv("GLYPHFORGE_CLIENT_TIMEOUT", "7")
    monkeypatch.setenv("GLYPHFORGE_CLIENT_RETRIES", "5")
    cfg = TransportConfig.from_env(max_inflight=2)
    assert (cfg.timeout_s, cfg.retries, cfg.max_inflight) == (7.0, 5, 2)


def test_image_codec_roundtrip():
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
    assert np.array_equal(decode_image(encode_image(img)), img)


def test_remote_clients_parse_and_validate():
    t, _, _ = _transport([{"hidden_states": [[0.0, 1.0], [2.0, 3.0]]}, {"nope": 1}])
    m = RemoteMLLM("http://svc", 2, transport=t)
    assert m.hidden_states(np.zeros((2, 2, 3)), "p").shape == (2, 2)
    with pytest.raises(ProtocolError):
        m.hidden_states(np.zeros((2, 2, 3)), "p")

    t, _, _ = _transport([{"text": "[]"}, {"text": 3}])
    llm = RemoteTextLLM("http://svc", transport=t)
    assert llm.complete("x") == "[]"
    with pytest.raises(ProtocolError):
        llm.complete("x")

    t, _, _ = _transport([{"lines": [{"text": "hi", "bbox": [0, 0, 4, 4]}]}, {"lines": [{"text": "x"}]}])
    ocr = RemoteOCR("http://svc", transport=t)
    assert ocr.read(np.zeros((4, 4, 3)))[0].bbox == BBox(0, 0, 4, 4)
    with pytest.raises(ProtocolError):
        ocr.read(np.zeros((4, 4, 3)))


def test_median_inpainter_touches_only_region():
    rng = np.random.default_rng(1)
    img = rng.random((10, 12, 3))
    region = BBox(3, 2, 7, 6)
    out = MedianInpainter().inpaint(img, region)
    mask = np.ones((10, 12), bool)
    mask[2:6, 3:7] = False
    assert np.array_equal(out[mask], img[mask])
    assert np.all(out[2:6, 3:7] == out[2, 3])
    with pytest.raises(ValueError):
        MedianInpainter().inpaint(img, BBox(0, 0, 20, 2))


def test_gradient_t2i_deterministic():
    a = GradientT2I().generate("sky", (16, 8), 3)
    assert a.shape == (8, 16, 3) and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, GradientT2I().generate("sky", (16, 8), 3))
    assert not np.array_equal(a, GradientT2I().generate("sea", (16, 8), 3))


def test_recorder_logs_success_and_failure():
    ticks = iter(range(100))
    rec = CallRecorder(clock=lambda: float(next(ticks)))
    ok = rec.wrap("t2i", GradientT2I())
    ok.generate("p", (4, 4), 0)
    bad = rec.wrap("ocr", FailingClient())
    with pytest.raises(TransportError):
        bad.read(None)
    assert [(r.client, r.method, r.ok, r.latency_s) for r in rec.records] == [
        ("t2i", "generate", True, 1.0),
        ("ocr", "read", False, 1.0),
    ]


def test_factories():
    assert make_mllm("stub", 8).hidden_dim == 8
    assert isinstance(make_mllm("http://h", 8), RemoteMLLM)
    assert isinstance(make_layout_llm("stub"), StubLayoutLLM)
    assert isinstance(make_ocr("oracle"), OracleOCR)
    assert isinstance(make_inpainter("median"), MedianInpainter)
    assert isinstance(make_inpainter("http://h"), RemoteInpainter)
    assert isinstance(make_t2i("stub"), GradientT2I)
    assert isinstance(make_t2i("https://h"), RemoteT2I)
    for fn in (lambda: make_mllm("gpt", 8), lambda: make_layout_llm("x"), lambda: make_ocr("x"),
               lambda: make_inpainter("lama"), lambda: make_t2i("x")):
        with pytest.raises(ConfigurationError):
            fn()


def test_remote_inpainter_keeps_outside_pixels():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, (6, 8, 3)) / 255.0
    filled = np.zeros_like(img)
    t, opener, _ = _transport([{"image": encode_image(filled)}, {"image": encode_image(np.zeros((3, 3, 3)))}])
    client = RemoteInpainter("http://svc", transport=t)
    region = BBox(2, 1, 5, 4)
    out = client.inpaint(img, region)
    mask = np.ones((6, 8), bool)
    mask[1:4, 2:5] = False
    assert np.array_equal(out[mask], img[mask]) and np.all(out[1:4, 2:5] == 0)
    assert opener.requests[0][0]["region"] == [2, 1, 5, 4]
    with pytest.raises(ProtocolError):
        client.inpaint(img, region)


def test_remote_t2i_validates_size():
    img = np.full((4, 6, 3), 128) / 255.0
    t, opener, _ = _transport([{"image": encode_image(img)}, {"image": encode_image(img)}, {"image": 5}])
    client = RemoteT2I("http://svc", transport=t)
    assert np.array_equal(client.generate("sky", (6, 4), 1), img)
    assert opener.requests[0][0] == {"prompt": "sky", "size": [6, 4], "seed": 1}
    with pytest.raises(ProtocolError):
        client.generate("sky", (4, 6), 1)
    with pytest.raises(ProtocolError):
        client.generate("sky", (6, 4), 1)
