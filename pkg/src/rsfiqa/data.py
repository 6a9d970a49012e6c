"""Dataset index, synthetic distorted-image generator, and train/val/test splits."""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import IdMismatch, IoError, MalformedCsv, MissingImage, TooFewSamples

DISTORTIONS = ("blur", "noise", "desaturate", "blocks")
MOS_MIN, MOS_MAX = 1.0, 5.0
BLOCK = 8
STRENGTH_JITTER = 0.15


@dataclass(frozen=True)
class DatasetRecord:
    image_id: str
    path: Path
    mos: float


@dataclass
class DatasetIndex:
    records: list[DatasetRecord]
    provenance: str = "external"

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def subset(self, ids: Sequence[str]) -> DatasetIndex:
        by_id = {r.image_id: r for r in self.records}
        return DatasetIndex([by_id[i] for i in ids], self.provenance)


def load_image(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """RGB image as float64 in [0, 1]; resized bilinearly to ``size`` = (H, W) if given."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError as e:
        raise MissingImage(f"image {path} does not exist") from e
    except OSError as e:
        raise IoError(f"cannot read image {path}: {e}") from e


def save_image(image: np.ndarray, path: str | Path) -> None:
    try:
        Image.fromarray(np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)).save(path)
    except OSError as e:
        raise IoError(f"cannot write image {path}: {e}") from e


def load_dataset(csv_path: str | Path, images_dir: str | Path | None = None) -> DatasetIndex:
    """Read an ``image_path,mos`` CSV; relative paths resolve against ``images_dir`` or the CSV's folder."""
    csv_path = Path(csv_path)
    base = Path(images_dir) if images_dir is not None else csv_path.parent
    try:
        fh = csv_path.open(newline="")
    except OSError as e:
        raise IoError(f"cannot read {csv_path}: {e}") from e
    records: list[DatasetRecord] = []
    seen_paths: set[str] = set()
    seen_ids: set[str] = set()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image_path", "mos"]:
            raise MalformedCsv(f"{csv_path}:1: header must be 'image_path,mos', got {header}")
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise MalformedCsv(f"{csv_path}:{lineno}: expected 2 fields, got {len(row)}")
            rel, mos_text = row[0].strip(), row[1].strip()
            try:
                mos = float(mos_text)
            except ValueError:
                raise MalformedCsv(f"{csv_path}:{lineno}: MOS {mos_text!r} is not a number") from None
            if not np.isfinite(mos):
                raise MalformedCsv(f"{csv_path}:{lineno}: MOS must be finite")
            if rel in seen_paths:
                raise MalformedCsv(f"{csv_path}:{lineno}: duplicate image_path {rel!r}")
            image_id = Path(rel).stem
            if image_id in seen_ids:
                raise MalformedCsv(f"{csv_path}:{lineno}: image id {image_id!r} is not unique")
            path = Path(rel) if Path(rel).is_absolute() else base / rel
            if not path.is_file():
                raise MissingImage(f"{csv_path}:{lineno}: image {path} does not exist")
            seen_paths.add(rel)
            seen_ids.add(image_id)
            records.append(DatasetRecord(image_id, path, mos))
    return DatasetIndex(records, provenance="external")


def write_dataset_csv(index: DatasetIndex, csv_path: str | Path) -> None:
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "mos"])
        for r in index:
            try:
                rel = r.path.relative_to(csv_path.parent)
            except ValueError:
                rel = r.path
            writer.writerow([rel.as_posix(), repr(r.mos)])


def mos_from_strengths(strengths: Sequence[float]) -> float:
    """1 + 4 * (1 - mean strength): undistorted images score 5."""
    return MOS_MIN + (MOS_MAX - MOS_MIN) * (1.0 - float(np.mean(strengths)))


def distort(image: np.ndarray, kind: str, strength: float, rng: np.random.Generator) -> np.ndarray:
    if kind == "blur":
        sigma = 2.5 * strength
        out = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect") if sigma > 0 else image.copy()
    elif kind == "noise":
        out = image + rng.normal(0.0, 0.2 * strength, size=image.shape)
    elif kind == "desaturate":
        gray = image @ np.array([0.299, 0.587, 0.114])
        out = (1.0 - strength) * image + strength * gray[..., None]
    elif kind == "blocks":
        h, w, _ = image.shape
        hb, wb = -(-h // BLOCK), -(-w // BLOCK)
        padded = np.pad(image, ((0, hb * BLOCK - h), (0, wb * BLOCK - w), (0, 0)), mode="edge")
        means = padded.reshape(hb, BLOCK, wb, BLOCK, 3).mean(axis=(1, 3))
        blocky = np.repeat(np.repeat(means, BLOCK, axis=0), BLOCK, axis=1)[:h, :w]
        out = (1.0 - strength) * image + strength * blocky
    else:
        raise ValueError(f"unknown distortion {kind!r}")
    return np.clip(out, 0.0, 1.0)


def _hsv_color(rng: np.random.Generator) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.5, 0.95)))


@dataclass
class SyntheticImage:
    image: np.ndarray
    labels: np.ndarray
    distortions: list[str] = field(default_factory=list)
    strengths: list[float] = field(default_factory=list)

    @property
    def mos(self) -> float:
        return mos_from_strengths(self.strengths)


def synthesize_image(
    rng: np.random.Generator,
    size: int = 64,
    strength_range: tuple[float, float] = (0.0, 1.0),
    jitter: float = STRENGTH_JITTER,
) -> SyntheticImage:
    """A textured background plus 1-3 shapes, each region distorted independently.

    Each region's strength is an image-level severity plus uniform jitter of
    up to ``jitter``, clipped to ``strength_range``.
    """
    n_regions = int(rng.integers(2, 5))
    labels = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size] / size
    for r in range(1, n_regions):
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        hy, hx = rng.uniform(0.15, 0.3, size=2)
        if rng.uniform() < 0.5:
            inside = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        else:
            inside = ((yy - cy) / hy) ** 2 + ((xx - cx) / hx) ** 2 < 1.0
        labels[inside] = r
    present = [r for r in range(n_regions) if (labels == r).any()]

    clean = np.zeros((size, size, 3))
    for r in present:
        color = _hsv_color(rng)
        freq = rng.uniform(6.0, 14.0)
        angle = rng.uniform(0, np.pi)
        texture = 0.18 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        clean[labels == r] = np.clip(color[None, :] + texture[labels == r][:, None], 0.0, 1.0)

    out = clean.copy()
    kinds, strengths = [], []
    lo, hi = strength_range
    severity = rng.uniform(lo, hi)
    for r in present:
        kind = DISTORTIONS[int(rng.integers(len(DISTORTIONS)))]
        s = float(np.clip(severity + rng.uniform(-jitter, jitter), lo, hi))
        distorted = distort(clean, kind, s, rng)
        out[labels == r] = distorted[labels == r]
        kinds.append(kind)
        strengths.append(s)
    return SyntheticImage(out, labels, kinds, strengths)


def make_synthetic_dataset(
    count: int,
    seed: int,
    out_dir: str | Path,
    size: int = 64,
    strength_range: tuple[float, float] = (0.0, 1.0),
) -> DatasetIndex:
    """Write ``count`` PNGs and ``dataset.csv`` under ``out_dir``; fully determined by ``seed``."""
    if count < 2:
        raise ValueError("count must be at least 2")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out_dir}: {e}") from e
    rng = np.random.default_rng(seed)
    records = []
    width = len(str(count - 1))
    for k in range(count):
        synth = synthesize_image(rng, size, strength_range)
        image_id = f"synth_{k:0{width}d}"
        path = out_dir / f"{image_id}.png"
        save_image(synth.image, path)
        records.append(DatasetRecord(image_id, path, synth.mos))
    index = DatasetIndex(records, provenance="synthetic")
    write_dataset_csv(index, out_dir / "dataset.csv")
    return index


def split(
    index: DatasetIndex,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[DatasetIndex, DatasetIndex, DatasetIndex]:
    """Seeded shuffle, then consecutive train/val/test slices sized by rounding."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    n = len(index)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    sizes = (n_train, n_val, n_test)
    if n_test < 0 or any(r > 0 and s < 1 for r, s in zip(ratios, sizes)):
        raise TooFewSamples(f"{n} records cannot fill splits with ratios {tuple(ratios)}")
    order = np.random.default_rng(seed).permutation(n)
    ids = [index.records[i].image_id for i in order]
    return (
        index.subset(ids[:n_train]),
        index.subset(ids[n_train:n_train + n_val]),
        index.subset(ids[n_train + n_val:]),
    )


SPLIT_NAMES = ("train", "val", "test")


def load_split_file(path: str | Path, index: DatasetIndex) -> tuple[DatasetIndex, DatasetIndex, DatasetIndex]:
    """Fixed split from an ``image_id,split`` CSV, for datasets that ship their own."""
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise IoError(f"cannot read split file {path}: {e}") from e
    known = set(index.ids)
    groups: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    seen: set[str] = set()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image_id", "split"]:
            raise MalformedCsv(f"{path}:1: header must be 'image_id,split', got {header}")
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise MalformedCsv(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            image_id, name = row[0].strip(), row[1].strip()
            if name not in groups:
                raise MalformedCsv(f"{path}:{lineno}: split must be one of {SPLIT_NAMES}, got {name!r}")
            if image_id in seen:
                raise MalformedCsv(f"{path}:{lineno}: image id {image_id!r} assigned twice")
            if image_id not in known:
                raise IdMismatch(f"split file names unknown image id {image_id!r}")
            seen.add(image_id)
            groups[name].append(image_id)
    missing = sorted(known - seen)
    if missing:
        raise IdMismatch(f"split file does not assign image id {missing[0]!r}")
    return tuple(index.subset(groups[name]) for name in SPLIT_NAMES)  # type: ignore[return-value]
