"""Per-region descriptions: prompt templates, answer parsing, providers and cache.

Two providers produce the same :class:`RegionDescriptionRecord`:

* :class:`HeuristicDescriber` derives distortion scores from fixed image
  statistics of the region, deterministically.
* :class:`RemoteDescriber` asks an OpenAI-compatible chat-completion endpoint
  with the fixed user turns below and parses the templated answers.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

import httpx
import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import AuthError, EmptyRegion, IoError, TransportError, UnparseableResponse

logger = logging.getLogger(__name__)


class Dimension(str, Enum):
    COLOR = "color"
    NOISE = "noise"
    ARTIFACT = "artifact"
    BLUR = "blur"
    OVERALL = "overall"


DIMENSIONS = tuple(Dimension)
LEVELS = ("bad", "poor", "fair", "good", "excellent")
KINDS = ("content", "level", "score")


def level_for_score(score: float) -> str:
    return LEVELS[min(4, int(score // 20))]


@dataclass
class RegionDescriptionRecord:
    image_id: str
    region_index: int
    content: str
    levels: dict[Dimension, str]
    scores: dict[Dimension, float]

    def __post_init__(self):
        self.levels = {Dimension(k): v for k, v in self.levels.items()}
        self.scores = {Dimension(k): float(v) for k, v in self.scores.items()}
        if set(self.levels) != set(DIMENSIONS) or set(self.scores) != set(DIMENSIONS):
            raise ValueError("every distortion dimension needs a level and a score")
        for dim in DIMENSIONS:
            level, score = self.levels[dim], self.scores[dim]
            if level not in LEVELS:
                raise ValueError(f"unknown level {level!r} for {dim.value}")
            if not 0.0 <= score <= 100.0:
                raise ValueError(f"{dim.value} score {score} outside [0, 100]")
            if level_for_score(score) != level:
                raise ValueError(f"{dim.value}: level {level!r} inconsistent with score {score}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "region_index": self.region_index,
            "content": self.content,
            "dimensions": {d.value: {"level": self.levels[d], "score": self.scores[d]} for d in DIMENSIONS},
        }

    @classmethod
    def from_dict(cls, data: dict) -> RegionDescriptionRecord:
        dims = data["dimensions"]
        return cls(
            image_id=str(data["image_id"]),
            region_index=int(data["region_index"]),
            content=str(data["content"]),
            levels={d: dims[d.value]["level"] for d in DIMENSIONS},
            scores={d: dims[d.value]["score"] for d in DIMENSIONS},
        )


# --- prompt templates -------------------------------------------------------

CONTENT_PROMPT = (
    "Please describe the content of the highlighted area in the mask image based on the original image context."
)
_USER_TEMPLATES = {
    "level": "From the {dim} dimension, please provide the quality level for highlighted area in the mask image.",
    "score": "From the {dim} dimension, please provide the quality score for highlighted area in the mask image.",
}
_ANSWER_TEMPLATES = {
    "level": "From the {dim} dimension, the image quality level is {value}.",
    "score": "From the {dim} dimension, the image quality score is {value}.",
}


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")


def format_prompt(kind: str, dim: Dimension | str | None = None) -> str:
    """User turn for ``kind``; ``dim`` is ignored for content prompts."""
    _check_kind(kind)
    if kind == "content":
        return CONTENT_PROMPT
    return _USER_TEMPLATES[kind].format(dim=Dimension(dim).value)


def format_score(score: float) -> str:
    score = float(score)
    return str(int(score)) if score.is_integer() else repr(score)


def render_response(kind: str, dim: Dimension | str | None, payload) -> str:
    """Assistant answer in the templated form that :func:`parse_response` reads."""
    _check_kind(kind)
    if kind == "content":
        return f"{payload}."
    value = format_score(payload) if kind == "score" else payload
    return _ANSWER_TEMPLATES[kind].format(dim=Dimension(dim).value, value=value)


def parse_response(kind: str, dim: Dimension | str | None, text: str):
    _check_kind(kind)
    text = text.strip()
    if kind == "content":
        if len(text) < 2 or not text.endswith("."):
            raise UnparseableResponse(f"content answer must be a sentence ending in '.': {text!r}")
        return text[:-1]
    d = Dimension(dim).value
    prefix = f"From the {d} dimension, the image quality {kind} is "
    if not (text.startswith(prefix) and text.endswith(".")):
        raise UnparseableResponse(f"answer does not follow the {kind} template for {d}: {text!r}")
    value = text[len(prefix):-1].strip()
    if kind == "level":
        level = value.lower()
        if level not in LEVELS:
            raise UnparseableResponse(f"unknown quality level {value!r}")
        return level
    try:
        score = float(value)
    except ValueError:
        raise UnparseableResponse(f"score {value!r} is not a number") from None
    if not (math.isfinite(score) and 0.0 <= score <= 100.0):
        raise UnparseableResponse(f"score {score} outside [0, 100]")
    return score


# --- providers --------------------------------------------------------------


class Describer(Protocol):
    provider_id: str

    def describe(
        self, image: np.ndarray, region: np.ndarray, image_id: str, region_index: int
    ) -> RegionDescriptionRecord: ...


# Calibration constants for the heuristic statistics, on [0, 1] intensities.
# (degraded, clean) anchors of each statistic; scores are log-linear between them
BLUR_ANCHORS = (1e-4, 1e-2)  # Laplacian variance of the denoised region
NOISE_ANCHORS = (1.5e-2, 5e-4)  # median-residual energy
COLOR_ANCHORS = (0.04, 0.15)  # colourfulness of the denoised region
ARTIFACT_REF = 0.5  # excess block-edge ratio at which the artifact score drops to 100/e
BLOCK = 8

_PALETTE = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5),
    "red": (0.8, 0.1, 0.1),
    "green": (0.1, 0.7, 0.2),
    "blue": (0.1, 0.2, 0.8),
    "yellow": (0.9, 0.85, 0.1),
    "cyan": (0.1, 0.8, 0.8),
    "magenta": (0.8, 0.1, 0.8),
    "orange": (0.95, 0.55, 0.1),
    "brown": (0.5, 0.3, 0.1),
}


def _gray(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114])


def sharpness_statistic(gray: np.ndarray, interior: np.ndarray) -> float:
    if not interior.any():
        return 0.0
    return float(ndimage.laplace(gray, mode="nearest")[interior].var())


def noise_statistic(gray: np.ndarray, interior: np.ndarray) -> float:
    if not interior.any():
        return 0.0
    residual = gray - ndimage.median_filter(gray, size=3, mode="nearest")
    return float((residual[interior] ** 2).mean())


def colorfulness_statistic(image: np.ndarray, region: np.ndarray) -> float:
    r, g, b = (image[..., c][region] for c in range(3))
    rg = r - g
    yb = 0.5 * (r + g) - b
    return float(math.hypot(rg.std(), yb.std()) + 0.3 * math.hypot(rg.mean(), yb.mean()))


def blockiness_statistic(gray: np.ndarray, region: np.ndarray) -> float:
    """Excess of mean absolute jumps across the 8-pixel grid over jumps elsewhere."""
    jumps, on_grid = [], []
    for axis in (0, 1):
        diff = np.abs(np.diff(gray, axis=axis))
        both = region[1:, :] & region[:-1, :] if axis == 0 else region[:, 1:] & region[:, :-1]
        idx = np.arange(diff.shape[axis])
        grid = (idx % BLOCK) == BLOCK - 1
        grid = grid[:, None] if axis == 0 else grid[None, :]
        grid = np.broadcast_to(grid, diff.shape)
        jumps.append(diff[both])
        on_grid.append(grid[both])
    jumps, on_grid = np.concatenate(jumps), np.concatenate(on_grid)
    if not on_grid.any() or on_grid.all():
        return 0.0
    ratio = jumps[on_grid].mean() / (jumps[~on_grid].mean() + 1e-6)
    return float(max(0.0, ratio - 1.0))


def color_bucket(mean_rgb: np.ndarray) -> str:
    return min(_PALETTE, key=lambda k: float(((np.array(_PALETTE[k]) - mean_rgb) ** 2).sum()))


def log_score(value: float, anchors: tuple[float, float]) -> float:
    """0 at the degraded anchor, 100 at the clean one, log-linear and clipped in between."""
    bad, good = anchors
    t = math.log(max(value, 1e-12) / bad) / math.log(good / bad)
    return 100.0 * min(1.0, max(0.0, t))


def heuristic_scores(image: np.ndarray, region: np.ndarray) -> dict[Dimension, float]:
    """Per-dimension scores in [0, 100]; overall is the worst of the four.

    Sharpness and colour are measured after a 3x3 median filter so that noise
    does not read as detail or saturation.
    """
    gray = _gray(image)
    denoised = ndimage.median_filter(image, size=(3, 3, 1), mode="nearest")
    interior = ndimage.binary_erosion(region, structure=np.ones((3, 3)), border_value=0)
    scores = {
        Dimension.COLOR: log_score(colorfulness_statistic(denoised, region), COLOR_ANCHORS),
        Dimension.NOISE: log_score(noise_statistic(gray, interior), NOISE_ANCHORS),
        Dimension.ARTIFACT: 100.0 * math.exp(-blockiness_statistic(_gray(denoised), region) / ARTIFACT_REF),
        Dimension.BLUR: log_score(sharpness_statistic(_gray(denoised), interior), BLUR_ANCHORS),
    }
    scores = {d: round(s, 1) for d, s in scores.items()}
    scores[Dimension.OVERALL] = min(scores.values())
    return scores


class HeuristicDescriber:
    """Deterministic stand-in for a multimodal model, built on region statistics."""

    provider_id = "heuristic-v2"

    def describe(
        self, image: np.ndarray, region: np.ndarray, image_id: str = "", region_index: int = 0
    ) -> RegionDescriptionRecord:
        return heuristic_describe(image, region, image_id, region_index)


def heuristic_describe(
    image: np.ndarray, region: np.ndarray, image_id: str = "", region_index: int = 0
) -> RegionDescriptionRecord:
    image = np.asarray(image, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise EmptyRegion(f"region {region_index} of {image_id!r} is empty")
    scores = heuristic_scores(image, region)
    pct = round(100.0 * region.mean())
    bucket = color_bucket(image[region].mean(axis=0))
    content = f"region {region_index} covering {pct} percent of the image with mostly {bucket} tones"
    return RegionDescriptionRecord(
        image_id=image_id,
        region_index=region_index,
        content=content,
        levels={d: level_for_score(s) for d, s in scores.items()},
        scores=scores,
    )


@dataclass
class RemoteConfig:
    endpoint: str
    api_key: str
    model: str = "qwen2.5-vl"
    max_retries: int = 3
    backoff_base: float = 0.5
    timeout: float = 60.0

    @classmethod
    def from_env(cls, **overrides) -> RemoteConfig:
        endpoint = os.environ.get("RSFIQA_MLLM_ENDPOINT", "").strip()
        api_key = os.environ.get("RSFIQA_MLLM_API_KEY", "").strip()
        if not endpoint:
            raise AuthError("RSFIQA_MLLM_ENDPOINT is not set")
        if not api_key:
            raise AuthError("RSFIQA_MLLM_API_KEY is not set")
        return cls(endpoint=endpoint, api_key=api_key, **overrides)


def _png_data_uri(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.clip(np.round(image * 255), 0, 255).astype(np.uint8)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def highlight_overlay(image: np.ndarray, region: np.ndarray, dim: float = 0.25) -> np.ndarray:
    """The image with everything outside ``region`` darkened."""
    return np.where(region[..., None], image, image * dim)


class _Transient(Exception):
    pass


@dataclass
class RemoteDescriber:
    """Chat-completion client issuing one request per user turn.

    Each request carries the full image and a highlighted overlay of the
    region. 5xx, 429, network errors and unparseable answers are retried up
    to ``max_retries`` times with exponential backoff; 401/403 fail at once.
    """

    config: RemoteConfig
    client: httpx.Client | None = None
    sleep: Callable[[float], None] = time.sleep
    attempts: int = field(default=0, init=False)
    provider_id: str = field(default="", init=False)

    def __post_init__(self):
        self.provider_id = f"remote:{self.config.model}"
        self._lock = threading.Lock()
        if self.client is None:
            self.client = httpx.Client(timeout=self.config.timeout)

    def _post(self, payload: dict) -> str:
        with self._lock:
            self.attempts += 1
        headers = {"Authorization": f"Bearer {self.config.api_key}"}
        try:
            resp = self.client.post(self.config.endpoint, json=payload, headers=headers)
        except httpx.TransportError as e:
            raise _Transient(f"transport failure: {e}") from e
        if resp.status_code in (401, 403):
            raise AuthError(f"endpoint rejected credentials ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise _Transient(f"malformed completion body: {e}") from e

    def ask(self, kind: str, dim: Dimension | None, attachments: list[str]):
        prompt = format_prompt(kind, dim)
        content = [{"type": "text", "text": prompt}]
        content += [{"type": "image_url", "image_url": {"url": uri}} for uri in attachments]
        payload = {"model": self.config.model, "messages": [{"role": "user", "content": content}], "temperature": 0}
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                text = self._post(payload)
                return parse_response(kind, dim, text)
            except _Transient as e:
                last = e
                logger.warning("attempt %d for %s/%s failed: %s", attempt + 1, kind, dim, e)
            except UnparseableResponse as e:
                last = e
                logger.warning("attempt %d for %s/%s unparseable: %s", attempt + 1, kind, dim, e)
        if isinstance(last, UnparseableResponse):
            raise last
        raise TransportError(f"{kind} request failed after {self.config.max_retries + 1} attempts: {last}")

    def describe(
        self, image: np.ndarray, region: np.ndarray, image_id: str = "", region_index: int = 0
    ) -> RegionDescriptionRecord:
        image = np.asarray(image, dtype=np.float64)
        region = np.asarray(region, dtype=bool)
        if not region.any():
            raise EmptyRegion(f"region {region_index} of {image_id!r} is empty")
        attachments = [_png_data_uri(image), _png_data_uri(highlight_overlay(image, region))]
        content = self.ask("content", None, attachments)
        levels, scores = {}, {}
        for dim in DIMENSIONS:
            levels[dim] = self.ask("level", dim, attachments)
            scores[dim] = self.ask("score", dim, attachments)
            if level_for_score(scores[dim]) != levels[dim]:
                logger.warning(
                    "%s region %d: %s level %r disagrees with score %s; using the score's level",
                    image_id, region_index, dim.value, levels[dim], scores[dim],
                )
                levels[dim] = level_for_score(scores[dim])
        return RegionDescriptionRecord(image_id, region_index, content, levels, scores)


def remote_describe(image, region, config: RemoteConfig, image_id: str = "", region_index: int = 0):
    return RemoteDescriber(config).describe(image, region, image_id, region_index)


# --- cache ------------------------------------------------------------------


class DescriptionCache:
    """Append-only JSONL store keyed by (image_id, region_index, provider_id).

    Corrupt lines are skipped with a warning and counted. Without a path the
    cache lives in memory only.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.corrupt_lines = 0
        self._records: dict[tuple[str, int, str], RegionDescriptionRecord] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        try:
            lines = self.path.read_text().splitlines()
        except OSError as e:
            raise IoError(f"cannot read cache {self.path}: {e}") from e
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                rec = RegionDescriptionRecord.from_dict(data)
                key = (rec.image_id, rec.region_index, str(data["provider_id"]))
            except (ValueError, KeyError, TypeError) as e:
                self.corrupt_lines += 1
                logger.warning("skipping corrupt cache line %d in %s: %s", lineno, self.path, e)
                continue
            self._records[key] = rec

    def __len__(self) -> int:
        return len(self._records)

    def get(self, image_id: str, region_index: int, provider_id: str) -> RegionDescriptionRecord | None:
        return self._records.get((image_id, region_index, provider_id))

    def put(self, record: RegionDescriptionRecord, provider_id: str) -> None:
        key = (record.image_id, record.region_index, provider_id)
        with self._lock:
            self._records[key] = record
            if self.path is None:
                return
            line = json.dumps({**record.to_dict(), "provider_id": provider_id, "timestamp": time.time()})
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a") as fh:
                    fh.write(line + "\n")
            except OSError as e:
                raise IoError(f"cannot append to cache {self.path}: {e}") from e


def cache_get(cache: DescriptionCache, key: tuple[str, int, str]) -> RegionDescriptionRecord | None:
    return cache.get(*key)


def cache_put(cache: DescriptionCache, key: tuple[str, int, str], record: RegionDescriptionRecord) -> None:
    image_id, region_index, provider_id = key
    if (record.image_id, record.region_index) != (image_id, region_index):
        raise ValueError("record does not match its cache key")
    cache.put(record, provider_id)


def describe_regions(
    describer: Describer,
    image: np.ndarray,
    mask_set,
    image_id: str,
    cache: DescriptionCache | None = None,
    cache_tag: str = "",
    max_in_flight: int = 1,
) -> list[RegionDescriptionRecord]:
    """Describe every region of ``mask_set``, consulting the cache first.

    ``cache_tag`` is appended to the provider id in cache keys so that
    partitions made with different settings do not collide.
    """
    provider_key = describer.provider_id + (f"@{cache_tag}" if cache_tag else "")

    def one(i: int) -> RegionDescriptionRecord:
        if cache is not None:
            hit = cache.get(image_id, i, provider_key)
            if hit is not None:
                return hit
        rec = describer.describe(image, mask_set.region(i), image_id, i)
        if cache is not None:
            cache.put(rec, provider_key)
        return rec

    indices = range(mask_set.l_eff)
    if max_in_flight <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, indices))
