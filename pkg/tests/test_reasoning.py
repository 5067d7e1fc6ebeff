import hashlib
import json
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eeg3d import reasoning
from eeg3d.cache import StageCache
from eeg3d.dataset import EegTrial, StimulusImage
from eeg3d.providers import ProviderRejected, ProviderTimeout, ProviderTransportError
from eeg3d.reasoning import (
    ColorReasoner,
    EchoReasoner,
    FixedReasoner,
    HttpReasoner,
    MockReasoner,
    PromptTemplate,
    Reasoner,
    ReasoningError,
    RetryPolicy,
    ScriptedReasoner,
    SemanticDescription,
    StageError,
    SubprocessReasoner,
    TemplateError,
    ValidationFailed,
    compose_pipeline_description,
    load_template,
    reason,
    validate_text,
)

# the verbatim instruction pair the stage is defined with
SYSTEM = "You are an expert in generating prompts for text-to-2D diffusion models."
USER = (
    "Create a prompt to be fed to the text-to-image model. The prompt should describe only the single main "
    "object in the image in high details. Focus on every aspect of the main object, such as the shape, color, "
    "material, and style. The prompt should be long. The prompt should describe the main object as a 3D model. "
    "Do not describe anything else other than the main object. The object needs to be the only element in the "
    "prompt. Force a white background. Do not use bullet points. Return only the prompt text. No introduction, "
    "explanations or formatting."
)
VALID = "A red ceramic mug, 3D model, white background"


def _image(image_id="img1", color=(200, 40, 40)):
    px = np.full((8, 8, 3), 255, dtype=np.uint8)
    px[2:6, 2:6] = color
    return StimulusImage(image_id, 0, px)


def _no_sleep(record=None):
    def sleep(s):
        if record is not None:
            record.append(s)
    return sleep


def test_default_template_is_verbatim():
    t = load_template()
    assert t.system_text.encode("utf-8") == SYSTEM.encode("utf-8")
    assert t.user_text.encode("utf-8") == USER.encode("utf-8")
    assert t.version == "v1"


def test_template_asset_hash_pinned():
    data = resources.files("eeg3d").joinpath("assets", "prompt_template_v1.txt").read_bytes()
    assert hashlib.sha256(data).hexdigest() == "a38f2892b34c9611fa39163f920e55b888545f95f5f53aedf3ed617bb3da5f8e"
    assert load_template().to_bytes() == data


def test_template_drift_detected(monkeypatch):
    monkeypatch.setitem(reasoning.TEMPLATE_SHA256, "v1", "0" * 64)
    with pytest.raises(TemplateError, match="hash"):
        load_template()
    assert load_template(verify=False).system_text == SYSTEM
    with pytest.raises(TemplateError):
        load_template("v99")


def test_template_parse_errors():
    with pytest.raises(TemplateError):
        PromptTemplate("", "x")
    with pytest.raises(TemplateError):
        PromptTemplate.from_bytes(b"just text\n", "v2")
    t = PromptTemplate("sys", "line one\nline two", "v2")
    assert PromptTemplate.from_bytes(t.to_bytes(), "v2") == t


def test_fixed_valid_output_accepted_first_attempt():
    provider = FixedReasoner(VALID)
    d = reason(_image(), load_template(), provider)
    assert d == SemanticDescription(VALID, "img1", "mock-fixed", 1)
    assert provider.calls == 1
    req = provider.requests[0]
    assert (req.system, req.user) == (SYSTEM, USER)


def test_bulleted_output_exhausts_retries():
    provider = FixedReasoner("- red mug\n- white background")
    with pytest.raises(ValidationFailed) as info:
        reason(_image(), load_template(), provider, sleep=_no_sleep())
    assert provider.calls == 3
    assert info.value.attempts == 3
    assert info.value.raw == "- red mug\n- white background"
    assert "bullet marker at line start" in info.value.problems


def test_validation_retry_records_attempt_without_backoff():
    slept = []
    provider = ScriptedReasoner(["* bullet", "Sure! " + VALID, "  " + VALID + "\n"])
    d = reason(_image(), load_template(), provider, sleep=_no_sleep(slept))
    assert d.attempt == 3 and d.text == VALID
    assert slept == []


def test_echo_provider_carries_image_id():
    d = reason(_image("stimulus_0042"), load_template(), EchoReasoner())
    assert "stimulus_0042" in d.text


def test_transport_errors_back_off_then_succeed():
    slept = []
    provider = ScriptedReasoner([ProviderTransportError("down"), ProviderTimeout("slow"), VALID])
    d = reason(_image(), load_template(), provider, sleep=_no_sleep(slept))
    assert slept == [1.0, 2.0]
    assert d.attempt == 1 and provider.calls == 3


def test_transport_errors_exhausted():
    slept = []
    provider = ScriptedReasoner([ProviderTransportError("down")])
    with pytest.raises(ProviderTransportError):
        reason(_image(), load_template(), provider, sleep=_no_sleep(slept))
    assert slept == [1.0, 2.0, 4.0]
    assert provider.calls == 4


@pytest.mark.parametrize("text, problem", [
    ("", "empty"),
    ("   ", "empty"),
    ("line one\nline two", "more than one line"),
    ("- a mug", "bullet marker at line start"),
    ("• a mug", "bullet marker at line start"),
    ("a ```mug```", "markdown fence"),
    ("x" * 4097, "longer than 4096 characters"),
    ("Here is a prompt: a mug", "conversational preamble"),
    ("Sure, a mug", "conversational preamble"),
    (" a mug", "surrounding whitespace"),
])
def test_validator_rejections(text, problem):
    assert problem in validate_text(text)


def test_validator_accepts_limits():
    assert validate_text("x" * 4096) == []
    assert validate_text("A mug - with a handle * and a star") == []
    with pytest.raises(ReasoningError):
        SemanticDescription("- bad", "i", "p", 1)


@settings(max_examples=200, deadline=None)
@given(st.text())
def test_validation_idempotent(text):
    cleaned = text.strip()
    first = validate_text(cleaned)
    assert validate_text(cleaned) == first
    if not first:
        d = SemanticDescription(cleaned, "i", "p", 1)
        assert validate_text(d.text) == []


def test_in_flight_limit_per_provider():
    class Slow(MockReasoner):
        max_in_flight = 4

        def __init__(self):
            super().__init__("slow-limit-test")
            self.active = 0
            self.peak = 0
            self.guard = threading.Lock()

        def respond(self, request, call):
            with self.guard:
                self.active += 1
                self.peak = max(self.peak, self.active)
            time.sleep(0.02)
            with self.guard:
                self.active -= 1
            return VALID

    provider = Slow()
    threads = [threading.Thread(target=reason, args=(_image(f"i{k}"), load_template(), provider))
               for k in range(16)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert provider.calls == 16
    assert 1 <= provider.peak <= 4


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.path == "/fail":
            self.send_response(503)
            self.end_headers()
            return
        if self.path == "/reject":
            self.send_response(400)
            self.end_headers()
            return
        if self.path == "/slow":
            time.sleep(0.5)
        text = f"A 3D model for {body['image_id']} ({body['image']['mime']}, temp {body['params'].get('temperature')})"
        out = json.dumps({"text": text}).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)


@pytest.fixture
def http_url():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=server.serve_forever, daemon=True)
    th.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def test_http_adapter(http_url):
    p = HttpReasoner(http_url + "/ok", "http-test", params={"temperature": 0.2})
    d = reason(_image("obj7"), load_template(), p)
    assert d.text == "A 3D model for obj7 (image/x-portable-pixmap, temp 0.2)"

    with pytest.raises(ProviderTransportError):
        HttpReasoner(http_url + "/fail").generate(reasoning.build_request(_image(), load_template()))
    with pytest.raises(ProviderRejected):
        HttpReasoner(http_url + "/reject").generate(reasoning.build_request(_image(), load_template()))
    with pytest.raises(ProviderTimeout):
        HttpReasoner(http_url + "/slow", timeout=0.1).generate(reasoning.build_request(_image(), load_template()))


_SCRIPT = (
    "import json, sys; r = json.load(sys.stdin); "
    "print(json.dumps({'text': 'A 3D model of ' + r['image_id'] + ' with ' + str(len(r['system'])) + ' chars'}))"
)


def test_subprocess_adapter():
    p = SubprocessReasoner([sys.executable, "-c", _SCRIPT], "proc-test")
    d = reason(_image("obj9"), load_template(), p)
    assert d.text == f"A 3D model of obj9 with {len(SYSTEM)} chars"

    req = reasoning.build_request(_image(), load_template())
    with pytest.raises(ProviderTransportError, match="status 3"):
        SubprocessReasoner([sys.executable, "-c", "import sys; sys.exit(3)"]).generate(req)
    with pytest.raises(ProviderTransportError, match="malformed"):
        SubprocessReasoner([sys.executable, "-c", "print('nope')"]).generate(req)
    with pytest.raises(ProviderTimeout):
        SubprocessReasoner([sys.executable, "-c", "import time; time.sleep(5)"], timeout=0.2).generate(req)


def test_color_mock_describes_dominant_color():
    d = reason(_image(color=(30, 60, 210)), load_template(), ColorReasoner())
    assert " blue " in d.text
    assert d.text.endswith("white background.")


# -- composition ---------------------------------------------------------------

class _CountingDecoder:
    fingerprint = "const-decoder"

    def __init__(self, image=None, error=None):
        self.image = image or _image("decoded")
        self.error = error
        self.calls = 0

    def __call__(self, trial):
        self.calls += 1
        if self.error:
            raise self.error
        return self.image


def _trial(seed=0):
    return EegTrial(f"t{seed}", 1, 0, np.random.default_rng(seed).standard_normal((4, 8)))


def test_compose_of_constants():
    d = compose_pipeline_description(_trial(), _CountingDecoder(), Reasoner(FixedReasoner(VALID)))
    assert d.text == VALID and d.source_image_id == "decoded"


def test_compose_names_failing_stage():
    with pytest.raises(StageError) as info:
        compose_pipeline_description(_trial(), _CountingDecoder(error=RuntimeError("boom")),
                                     Reasoner(FixedReasoner(VALID)))
    assert info.value.stage == "decode"

    bad = Reasoner(FixedReasoner("- x"), sleep=_no_sleep())
    with pytest.raises(StageError) as info:
        compose_pipeline_description(_trial(), _CountingDecoder(), bad)
    assert info.value.stage == "reason"
    assert isinstance(info.value.cause, ValidationFailed)


def test_compose_equals_sequential_application():
    for seed in range(3):
        trial = _trial(seed)
        dec = _CountingDecoder(_image(f"d{seed}", color=(40 * seed, 90, 200)))
        rsn = Reasoner(EchoReasoner())
        assert compose_pipeline_description(trial, dec, rsn) == rsn(dec(trial))


def test_cached_rerun_makes_no_provider_calls(tmp_path):
    cache = StageCache(tmp_path)
    trial = _trial()
    dec1, prov1 = _CountingDecoder(), EchoReasoner()
    first = compose_pipeline_description(trial, dec1, Reasoner(prov1), cache=cache)
    assert (dec1.calls, prov1.calls) == (1, 1)

    dec2, prov2 = _CountingDecoder(), EchoReasoner()
    again = compose_pipeline_description(trial, dec2, Reasoner(prov2), cache=cache)
    assert again == first
    assert dec2.calls + prov2.calls == 0

    # a different seed is a different cache entry
    compose_pipeline_description(trial, dec2, Reasoner(prov2), cache=cache, seed=1)
    assert (dec2.calls, prov2.calls) == (1, 1)


def test_cache_requires_fingerprints(tmp_path):
    with pytest.raises(StageError, match="fingerprint"):
        compose_pipeline_description(_trial(), lambda t: _image(), Reasoner(FixedReasoner(VALID)),
                                     cache=StageCache(tmp_path))


def test_custom_retry_policy():
    provider = ScriptedReasoner([ProviderTransportError("down"), "- bullet", VALID])
    with pytest.raises(ProviderTransportError):
        reason(_image(), load_template(), provider, policy=RetryPolicy(max_retries=1, backoff=()))
    provider = ScriptedReasoner(["- bullet", "- bullet", VALID])
    with pytest.raises(ValidationFailed):
        reason(_image(), load_template(), provider, policy=RetryPolicy(max_retries=2))
    with pytest.raises(ValueError):
        RetryPolicy(max_retries=0)
