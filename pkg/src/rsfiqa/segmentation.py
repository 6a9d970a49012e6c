"""Region partitioning: mask post-processing, a k-means segmenter, mask files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from .errors import CorruptMaskFile, InvalidL, InvalidMask, IoError, ShapeMismatch

SPATIAL_WEIGHT = 0.5


@dataclass
class RawMask:
    mask: np.ndarray
    predicted_iou: float
    source_id: int = 0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or not self.mask.any():
            raise InvalidMask(f"raw mask {self.source_id} must be a 2-D map with at least one pixel")

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class MaskSet:
    """Non-overlapping partition of an image into ``l_eff`` labelled regions.

    Regions are ordered by descending predicted IoU; the last index holds the
    uncovered remainder when there is one (its score is 0).
    """

    labels: np.ndarray
    scores: list[float]
    segmenter_id: str = "fallback-kmeans"
    seed: int | None = None

    @property
    def l_eff(self) -> int:
        return len(self.scores)

    @property
    def background_index(self) -> int:
        return self.l_eff - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def region(self, i: int) -> np.ndarray:
        return self.labels == i

    def indicators(self) -> np.ndarray:
        """One-hot expansion, shape ``(l_eff, H, W)``."""
        return (self.labels[None] == np.arange(self.l_eff)[:, None, None]).astype(np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskSet):
            return NotImplemented
        return (
            np.array_equal(self.labels, other.labels)
            and list(self.scores) == list(other.scores)
            and self.segmenter_id == other.segmenter_id
            and self.seed == other.seed
        )


class Segmenter(Protocol):
    segmenter_id: str

    def __call__(self, image: np.ndarray, L: int, seed: int) -> list[RawMask]: ...


def _rank_order(raw: Sequence[RawMask]) -> list[int]:
    return sorted(range(len(raw)), key=lambda i: (-raw[i].predicted_iou, -raw[i].area, i))


def postprocess(
    raw: Sequence[RawMask],
    L: int,
    shape: tuple[int, int] | None = None,
    segmenter_id: str = "fallback-kmeans",
    seed: int | None = None,
) -> MaskSet:
    """Keep the ``L - 1`` best-scoring masks and resolve them into a partition.

    Overlapping pixels go to the higher-scoring mask, uncovered pixels form a
    trailing background region, and masks left empty after overlap resolution
    are dropped. Ties in score fall back to larger area, then lower index.
    """
    if L < 2:
        raise InvalidL(f"L must be at least 2, got {L}")
    if raw:
        shape = raw[0].mask.shape
        if any(r.mask.shape != shape for r in raw):
            raise ShapeMismatch("raw masks differ in shape")
    elif shape is None:
        raise ShapeMismatch("shape is required when there are no raw masks")

    owner = np.full(shape, -1, dtype=np.int64)
    kept = _rank_order(raw)[: L - 1]
    for rank, idx in enumerate(kept):
        owner[(owner == -1) & raw[idx].mask] = rank

    labels = np.empty(shape, dtype=np.int64)
    scores: list[float] = []
    for rank, idx in enumerate(kept):
        sel = owner == rank
        if sel.any():
            labels[sel] = len(scores)
            scores.append(float(raw[idx].predicted_iou))
    uncovered = owner == -1
    if uncovered.any():
        labels[uncovered] = len(scores)
        scores.append(0.0)
    return MaskSet(labels, scores, segmenter_id=segmenter_id, seed=seed)


def _features(image: np.ndarray, alpha: float) -> np.ndarray:
    h, w, _ = image.shape
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.concatenate([image.reshape(-1, 3), alpha * xs.reshape(-1, 1), alpha * ys.reshape(-1, 1)], axis=1)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a seeded farthest-point initialisation."""
    rng = np.random.default_rng(seed)
    centers = [points[rng.integers(len(points))]]
    nearest = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        centers.append(points[int(np.argmax(nearest))])
        nearest = np.minimum(nearest, ((points - centers[-1]) ** 2).sum(axis=1))
    centers = np.array(centers)
    assign = np.argmin(_sq_dists(points, centers), axis=1)
    for _ in range(max_iter):
        for c in range(k):
            members = points[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
        new_assign = np.argmin(_sq_dists(points, centers), axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign, centers


def fallback_segment(image: np.ndarray, L: int, seed: int = 0, alpha: float = SPATIAL_WEIGHT) -> list[RawMask]:
    """k-means over colour and weighted position with ``k = L - 1`` clusters.

    ``k`` shrinks to the number of distinct colours when the image has fewer,
    so a flat image yields a single mask. Each mask's predicted IoU is a
    compactness score ``1 / (1 + mean squared distance to the centroid)``.
    """
    if L < 2:
        raise InvalidL(f"L must be at least 2, got {L}")
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    feats = _features(image, alpha)
    n_colors = len(np.unique(image.reshape(-1, 3), axis=0))
    k = min(L - 1, n_colors)
    assign, centers = kmeans(feats, k, seed)
    masks = []
    for c in range(k):
        sel = assign == c
        if not sel.any():
            continue
        msd = float(((feats[sel] - centers[c]) ** 2).sum(axis=1).mean())
        masks.append(RawMask(sel.reshape(h, w), 1.0 / (1.0 + msd), source_id=c))
    return masks


class FallbackSegmenter:
    segmenter_id = "fallback-kmeans"

    def __init__(self, alpha: float = SPATIAL_WEIGHT):
        self.alpha = alpha

    def __call__(self, image: np.ndarray, L: int, seed: int) -> list[RawMask]:
        return fallback_segment(image, L, seed, self.alpha)


def segment(image: np.ndarray, L: int, seed: int = 0, segmenter: Segmenter | None = None) -> MaskSet:
    segmenter = segmenter or FallbackSegmenter()
    raw = segmenter(image, L, seed)
    return postprocess(raw, L, shape=image.shape[:2], segmenter_id=segmenter.segmenter_id, seed=seed)


def sidecar_path(png_path: str | Path) -> Path:
    return Path(png_path).with_suffix(".json")


def mask_path_for(masks_dir: str | Path, image_id: str) -> Path:
    return Path(masks_dir) / f"{image_id}.mask.png"


def save_mask(mask_set: MaskSet, png_path: str | Path) -> None:
    png_path = Path(png_path)
    if mask_set.l_eff > 256:
        raise ValueError("8-bit label maps hold at most 256 regions")
    meta = {
        "l_eff": mask_set.l_eff,
        "scores": [float(s) for s in mask_set.scores],
        "background_index": mask_set.background_index,
        "segmenter_id": mask_set.segmenter_id,
        "seed": mask_set.seed,
    }
    try:
        png_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(mask_set.labels.astype(np.uint8), mode="L").save(png_path)
        sidecar_path(png_path).write_text(json.dumps(meta, indent=1))
    except OSError as e:
        raise IoError(f"cannot write mask {png_path}: {e}") from e


def load_mask(png_path: str | Path) -> MaskSet:
    png_path = Path(png_path)
    side = sidecar_path(png_path)
    if not side.exists():
        raise CorruptMaskFile(f"score sidecar {side} is missing")
    try:
        with Image.open(png_path) as im:
            if im.mode != "L":
                raise CorruptMaskFile(f"{png_path} is not an 8-bit grayscale label map")
            labels = np.asarray(im, dtype=np.int64)
    except FileNotFoundError as e:
        raise IoError(f"cannot read mask {png_path}: {e}") from e
    try:
        meta = json.loads(side.read_text())
        l_eff = int(meta["l_eff"])
        scores = [float(s) for s in meta["scores"]]
        background_index = int(meta["background_index"])
        segmenter_id = str(meta["segmenter_id"])
        seed = meta.get("seed")
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptMaskFile(f"bad sidecar {side}: {e}") from e
    if len(scores) != l_eff or background_index != l_eff - 1:
        raise CorruptMaskFile(f"sidecar {side} is inconsistent with l_eff={l_eff}")
    if labels.max(initial=0) >= l_eff:
        raise CorruptMaskFile(f"label value {labels.max()} >= l_eff={l_eff} in {png_path}")
    present = np.unique(labels)
    if len(present) != l_eff:
        raise CorruptMaskFile(f"{png_path} has {len(present)} non-empty regions, sidecar says {l_eff}")
    return MaskSet(labels, scores, segmenter_id=segmenter_id, seed=None if seed is None else int(seed))
