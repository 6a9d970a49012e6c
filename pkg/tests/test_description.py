import json
import re

import httpx
import numpy as np
import pytest
from scipy import ndimage

from rsfiqa.description import (
    CONTENT_PROMPT, DIMENSIONS, KINDS, LEVELS, DescriptionCache, Dimension, HeuristicDescriber,
    RegionDescriptionRecord, RemoteConfig, RemoteDescriber, cache_get, cache_put, describe_regions,
    format_prompt, heuristic_describe, heuristic_scores, level_for_score, noise_statistic, parse_response,
    remote_describe, render_response,
)
from rsfiqa.errors import AuthError, EmptyRegion, TransportError, UnparseableResponse
from rsfiqa.segmentation import segment


# --- prompts ----------------------------------------------------------------

def test_prompts_verbatim():
    assert format_prompt("level", "blur") == (
        "From the blur dimension, please provide the quality level for highlighted area in the mask image."
    )
    assert format_prompt("score", Dimension.COLOR) == (
        "From the color dimension, please provide the quality score for highlighted area in the mask image."
    )
    assert format_prompt("content") == CONTENT_PROMPT == (
        "Please describe the content of the highlighted area in the mask image based on the original image context."
    )
    with pytest.raises(ValueError):
        format_prompt("mood", "blur")


def test_parse_examples():
    assert parse_response("level", "blur", "From the blur dimension, the image quality level is fair.") == "fair"
    assert parse_response("level", "blur", "From the blur dimension, the image quality level is Fair.") == "fair"
    assert parse_response("score", "noise", "From the noise dimension, the image quality score is 62.5.") == 62.5
    assert parse_response("content", None, "a red square.") == "a red square"


@pytest.mark.parametrize("text", [
    "the quality is nice",
    "From the blur dimension, the image quality level is nice.",
    "From the noise dimension, the image quality level is fair.",  # wrong dimension for blur
    "From the blur dimension, the image quality level is fair",
])
def test_parse_rejects_level(text):
    with pytest.raises(UnparseableResponse):
        parse_response("level", "blur", text)


@pytest.mark.parametrize("value", ["abc", "101", "-1", "nan"])
def test_parse_rejects_score(value):
    with pytest.raises(UnparseableResponse):
        parse_response("score", "color", f"From the color dimension, the image quality score is {value}.")


def test_round_trip_every_kind_and_dimension():
    rng = np.random.default_rng(0)
    words = ["sky", "tree", "red", "wall", "shadowed", "car", "grass", "blue", "door"]
    for kind in KINDS:
        for dim in DIMENSIONS:
            for _ in range(50):
                if kind == "content":
                    payload = " ".join(rng.choice(words, size=int(rng.integers(1, 8))))
                elif kind == "level":
                    payload = str(rng.choice(LEVELS))
                else:
                    payload = float(rng.choice([rng.integers(0, 101), round(rng.uniform(0, 100), 3)]))
                text = render_response(kind, dim, payload)
                back = parse_response(kind, dim, text)
                assert back == payload
                assert render_response(kind, dim, back) == text


def test_level_quintiles():
    assert [level_for_score(s) for s in (0, 19.9, 20, 55, 79.9, 80, 100)] == [
        "bad", "bad", "poor", "fair", "good", "excellent", "excellent"
    ]


def test_record_validation_and_dict_round_trip():
    rec = RegionDescriptionRecord(
        "img", 0, "a wall", {d: "good" for d in DIMENSIONS}, {d: 70.0 for d in DIMENSIONS}
    )
    assert RegionDescriptionRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec
    with pytest.raises(ValueError):
        RegionDescriptionRecord("img", 0, "x", {d: "bad" for d in DIMENSIONS}, {d: 70.0 for d in DIMENSIONS})
    with pytest.raises(ValueError):
        RegionDescriptionRecord("img", 0, "x", {Dimension.BLUR: "good"}, {Dimension.BLUR: 70.0})


# --- heuristic --------------------------------------------------------------

def test_constant_region_is_maximally_blurry():
    rec = heuristic_describe(np.full((16, 16, 3), 0.5), np.ones((16, 16), bool))
    assert rec.scores[Dimension.BLUR] == 0.0 and rec.levels[Dimension.BLUR] == "bad"
    assert rec.scores[Dimension.OVERALL] == min(rec.scores[d] for d in DIMENSIONS if d is not Dimension.OVERALL)


def test_noise_scores_lower_on_noisy_copy():
    rng = np.random.default_rng(0)
    noisy = rng.uniform(size=(24, 24, 3))
    smooth = ndimage.uniform_filter(noisy, size=(5, 5, 1))
    region = np.ones((24, 24), bool)
    gray = lambda im: im @ np.array([0.299, 0.587, 0.114])
    interior = ndimage.binary_erosion(region, np.ones((3, 3)), border_value=0)
    assert noise_statistic(gray(noisy), interior) > noise_statistic(gray(smooth), interior)
    assert heuristic_scores(noisy, region)[Dimension.NOISE] < heuristic_scores(smooth, region)[Dimension.NOISE]


def test_heuristic_deterministic_and_content():
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(16, 16, 3))
    region = np.zeros((16, 16), bool)
    region[:8] = True
    a, b = heuristic_describe(image, region, "x", 2), heuristic_describe(image, region, "x", 2)
    assert a == b
    assert a.content.startswith("region 2 covering 50 percent")
    with pytest.raises(EmptyRegion):
        heuristic_describe(image, np.zeros((16, 16), bool))


# --- remote client ----------------------------------------------------------

ANSWER_SCORE = 70


def template_answer(prompt: str) -> str:
    if prompt == CONTENT_PROMPT:
        return "a textured square."
    dim, kind = re.match(r"From the (\w+) dimension, please provide the quality (\w+)", prompt).groups()
    value = "good" if kind == "level" else str(ANSWER_SCORE)
    return f"From the {dim} dimension, the image quality {kind} is {value}."


def completion(text: str) -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def prompt_of(request: httpx.Request) -> str:
    body = json.loads(request.content)
    return body["messages"][0]["content"][0]["text"]


def remote(handler, **cfg):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    sleeps = []
    config = RemoteConfig(endpoint="http://mllm.test/v1/chat/completions", api_key="k", **cfg)
    return RemoteDescriber(config, client=client, sleep=sleeps.append), sleeps


@pytest.fixture
def scene():
    rng = np.random.default_rng(2)
    region = np.zeros((8, 8), bool)
    region[2:6, 2:6] = True
    return rng.uniform(size=(8, 8, 3)), region


def test_remote_well_formed_record(scene):
    seen = []

    def handler(request):
        seen.append(request)
        return completion(template_answer(prompt_of(request)))

    describer, _ = remote(handler)
    rec = describer.describe(*scene, image_id="a", region_index=1)
    assert rec.content == "a textured square"
    assert all(rec.scores[d] == ANSWER_SCORE and rec.levels[d] == "good" for d in DIMENSIONS)
    assert describer.attempts == len(seen) == 1 + 2 * len(DIMENSIONS)
    body = json.loads(seen[0].content)
    images = [c for c in body["messages"][0]["content"] if c["type"] == "image_url"]
    assert len(images) == 2 and images[0]["image_url"]["url"].startswith("data:image/png;base64,")
    assert seen[0].headers["authorization"] == "Bearer k"


def test_remote_retries_transient_errors(scene):
    script = [httpx.Response(503), httpx.Response(500)]

    def handler(request):
        if script:
            return script.pop(0)
        return completion(template_answer(prompt_of(request)))

    describer, sleeps = remote(handler, backoff_base=0.25)
    assert describer.ask("level", Dimension.BLUR, []) == "good"
    assert describer.attempts == 3
    assert sleeps == [0.25, 0.5]


def test_remote_free_text_is_unparseable(scene):
    describer, sleeps = remote(lambda r: completion("Looks pretty nice to me!"), max_retries=2)
    with pytest.raises(UnparseableResponse):
        describer.describe(*scene)
    assert describer.attempts == 3


def test_remote_auth_failure_is_not_retried(scene):
    describer, sleeps = remote(lambda r: httpx.Response(401))
    with pytest.raises(AuthError):
        describer.describe(*scene)
    assert describer.attempts == 1 and sleeps == []


def test_remote_gives_up_on_persistent_outage():
    describer, _ = remote(lambda r: httpx.Response(502), max_retries=1)
    with pytest.raises(TransportError):
        describer.ask("score", Dimension.NOISE, [])
    assert describer.attempts == 2


def test_remote_config_from_env(monkeypatch):
    monkeypatch.delenv("RSFIQA_MLLM_ENDPOINT", raising=False)
    monkeypatch.setenv("RSFIQA_MLLM_API_KEY", "secret")
    with pytest.raises(AuthError):
        RemoteConfig.from_env()
    monkeypatch.setenv("RSFIQA_MLLM_ENDPOINT", "http://x/v1")
    cfg = RemoteConfig.from_env(max_retries=5)
    assert (cfg.endpoint, cfg.api_key, cfg.max_retries) == ("http://x/v1", "secret", 5)


def test_remote_describe_function(scene, monkeypatch):
    import rsfiqa.description as desc

    transport = httpx.MockTransport(lambda r: completion(template_answer(prompt_of(r))))
    real_client = httpx.Client
    monkeypatch.setattr(desc.httpx, "Client", lambda **kw: real_client(transport=transport))
    rec = remote_describe(*scene, RemoteConfig("http://x", "k"), image_id="z")
    assert rec.image_id == "z" and rec.scores[Dimension.BLUR] == ANSWER_SCORE


# --- cache ------------------------------------------------------------------

def sample_record(i=0, score=70.0):
    return RegionDescriptionRecord(
        "img", i, f"region {i}", {d: level_for_score(score) for d in DIMENSIONS}, {d: score for d in DIMENSIONS}
    )


def test_cache_put_get(tmp_path):
    cache = DescriptionCache(tmp_path / "c.jsonl")
    rec = sample_record()
    cache_put(cache, ("img", 0, "p"), rec)
    assert cache_get(cache, ("img", 0, "p")) == rec
    assert cache_get(cache, ("img", 1, "p")) is None
    assert DescriptionCache(tmp_path / "c.jsonl").get("img", 0, "p") == rec
    with pytest.raises(ValueError):
        cache_put(cache, ("img", 3, "p"), rec)


def test_cache_skips_corrupt_line(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = DescriptionCache(path)
    cache.put(sample_record(0), "p")
    with path.open("a") as fh:
        fh.write('{"image_id": "img", "truncated\n')
    cache.put(sample_record(1, 35.0), "p")
    reloaded = DescriptionCache(path)
    assert reloaded.corrupt_lines == 1
    assert len(reloaded) == 2
    assert reloaded.get("img", 1, "p").scores[Dimension.BLUR] == 35.0


def test_describe_regions_uses_cache():
    rng = np.random.default_rng(3)
    image = rng.uniform(size=(16, 16, 3))
    ms = segment(image, 4, seed=0)

    class Counting(HeuristicDescriber):
        calls = 0

        def describe(self, *args, **kw):
            Counting.calls += 1
            return super().describe(*args, **kw)

    cache = DescriptionCache()
    first = describe_regions(Counting(), image, ms, "i", cache, "tag", max_in_flight=3)
    assert Counting.calls == ms.l_eff and [r.region_index for r in first] == list(range(ms.l_eff))
    again = describe_regions(Counting(), image, ms, "i", cache, "tag")
    assert again == first and Counting.calls == ms.l_eff
    describe_regions(Counting(), image, ms, "i", cache, "other-tag")
    assert Counting.calls == 2 * ms.l_eff
