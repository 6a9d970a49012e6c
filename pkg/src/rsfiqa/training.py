"""Sample preparation, the training loop, prediction, checkpoints and gradient checks."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx
from .config import RunConfig
from .data import DatasetIndex, load_image
from .description import DescriptionCache, Describer, HeuristicDescriber, RemoteConfig, RemoteDescriber, describe_regions
from .errors import ConfigError, CorruptCheckpoint, DegenerateVariance, IoError, NonFiniteLoss
from .metrics import srcc
from .model import RSFIQA, Sample, make_sample
from .regressor import MosNormalizer, mse_loss
from .segmentation import FallbackSegmenter, MaskSet, Segmenter, load_mask, mask_path_for, save_mask, segment
from .semantic_encoder import HashedTextEncoder

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rsfiqa-checkpoint"
CHECKPOINT_VERSION = 1


def make_segmenter(cfg: RunConfig) -> Segmenter:
    if cfg.segmenter == "fallback":
        return FallbackSegmenter()
    raise ConfigError(f"unknown segmenter {cfg.segmenter!r}")


def make_describer(cfg: RunConfig) -> Describer:
    if cfg.describer == "heuristic":
        return HeuristicDescriber()
    if cfg.describer == "remote":
        return RemoteDescriber(RemoteConfig.from_env())
    raise ConfigError(f"unknown describer {cfg.describer!r}")


def make_encoder(cfg: RunConfig) -> HashedTextEncoder:
    if cfg.text_encoder != "hashed":
        raise ConfigError(f"unknown text encoder {cfg.text_encoder!r}")
    return HashedTextEncoder(cfg.vocab_size, cfg.text_dim, cfg.max_tokens, cfg.hash_seed)


def region_masks(
    image: np.ndarray,
    image_id: str,
    cfg: RunConfig,
    segmenter: Segmenter,
    masks_dir: str | Path | None = None,
) -> MaskSet:
    """Load the image's partition from ``masks_dir`` if present, else segment (and store it)."""
    if masks_dir is not None:
        path = mask_path_for(masks_dir, image_id)
        if path.exists():
            mask_set = load_mask(path)
            if mask_set.shape == image.shape[:2]:
                return mask_set
            logger.warning("stored mask for %s has shape %s, resegmenting", image_id, mask_set.shape)
    mask_set = segment(image, cfg.L, cfg.seed, segmenter)
    if masks_dir is not None:
        save_mask(mask_set, mask_path_for(masks_dir, image_id))
    return mask_set


def cache_tag(cfg: RunConfig, mask_set: MaskSet) -> str:
    return f"{mask_set.segmenter_id}:L{cfg.L}:s{mask_set.seed}:{cfg.height}x{cfg.width}"


def prepare_sample(
    image_id: str,
    image: np.ndarray,
    cfg: RunConfig,
    encoder: HashedTextEncoder,
    segmenter: Segmenter,
    describer: Describer,
    cache: DescriptionCache | None = None,
    masks_dir: str | Path | None = None,
    mos: float | None = None,
) -> Sample:
    mask_set = region_masks(image, image_id, cfg, segmenter, masks_dir)
    records = describe_regions(
        describer, image, mask_set, image_id, cache, cache_tag(cfg, mask_set), cfg.max_in_flight
    )
    return make_sample(image_id, image, mask_set, records, encoder, cfg, mos)


def prepare_samples(
    index: DatasetIndex,
    cfg: RunConfig,
    cache: DescriptionCache | None = None,
    masks_dir: str | Path | None = None,
    segmenter: Segmenter | None = None,
    describer: Describer | None = None,
) -> list[Sample]:
    segmenter = segmenter or make_segmenter(cfg)
    describer = describer or make_describer(cfg)
    encoder = make_encoder(cfg)
    size = (cfg.height, cfg.width)
    return [
        prepare_sample(r.image_id, load_image(r.path, size), cfg, encoder, segmenter, describer, cache, masks_dir, r.mos)
        for r in index
    ]


@dataclass
class Checkpoint:
    config: RunConfig
    state_dict: dict
    normalizer: MosNormalizer
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def build_model(self) -> RSFIQA:
        model = RSFIQA(self.config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path: str | Path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "state_dict": self.state_dict,
            "normalizer": {"lo": self.normalizer.lo, "hi": self.normalizer.hi},
            "log": self.log,
            "best_epoch": self.best_epoch,
        }
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            torch.save(payload, path)
        except OSError as e:
            raise IoError(f"cannot write checkpoint {path}: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except FileNotFoundError as e:
            raise IoError(f"cannot read checkpoint {path}: {e}") from e
        except Exception as e:  # pickle/zip errors from a damaged file
            raise CorruptCheckpoint(f"{path} is not a readable checkpoint: {e}") from e
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CorruptCheckpoint(f"{path} is not an rsfiqa checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint version {payload.get('version')}")
        norm = payload["normalizer"]
        return cls(
            config=RunConfig.from_dict(payload["config"]),
            state_dict=payload["state_dict"],
            normalizer=MosNormalizer(norm["lo"], norm["hi"]),
            log=payload["log"],
            best_epoch=payload["best_epoch"],
        )


def predict_normalized(model: RSFIQA, samples: Sequence[Sample]) -> np.ndarray:
    with torch.no_grad():
        return np.array([model(s).item() for s in samples])


def predict(checkpoint: Checkpoint, samples: Sequence[Sample], model: RSFIQA | None = None) -> dict[str, float]:
    """Scores on the MOS scale, keyed by image id."""
    model = model or checkpoint.build_model()
    scores = checkpoint.normalizer.inverse(predict_normalized(model, samples))
    return {s.image_id: score for s, score in zip(samples, scores)}


def flipped(sample: Sample, axes: tuple[int, ...]) -> Sample:
    """The sample mirrored along image axes (0 = vertical, 1 = horizontal); quality is unchanged."""
    if not axes:
        return sample
    return dataclasses.replace(
        sample,
        image=torch.flip(sample.image, dims=axes),
        regions=torch.flip(sample.regions, dims=tuple(a + 1 for a in axes)),
    )


FLIP_AXES = ((), (1,), (0,), (0, 1))


def with_flips(samples: Sequence[Sample]) -> list[Sample]:
    return [flipped(s, axes) for s in samples for axes in FLIP_AXES]


def _safe_srcc(y, y_hat) -> float | None:
    try:
        return srcc(y, y_hat)
    except (DegenerateVariance, ValueError):
        return None


def seed_everything(seed: int) -> None:
    np.random.seed(seed)
    torch.manual_seed(seed)


def train(
    cfg: RunConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample] = (),
    progress: bool = False,
) -> Checkpoint:
    """AdamW with per-epoch cosine annealing; keeps the best-validation state.

    Without a validation split the final state is kept. Training stops at
    ``cfg.epochs``, after ``cfg.patience`` epochs without validation SRCC
    improvement, or once the full-pass train MSE falls to ``cfg.target_train_mse``.
    """
    if not train_samples:
        raise ValueError("no training samples")
    seed_everything(cfg.seed)
    model = RSFIQA(cfg)
    if cfg.augment_flips:
        train_samples = with_flips(train_samples)
    normalizer = MosNormalizer.fit([s.mos for s in train_samples])
    targets = np.array(normalizer.transform([s.mos for s in train_samples]))
    val_targets = [s.mos for s in val_samples]

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.t_max, eta_min=cfg.eta_min)
    rng = np.random.default_rng(cfg.seed)

    log: list[dict] = []
    best_state = None
    best_srcc = -math.inf
    best_epoch = None
    stale = 0
    n = len(train_samples)
    for epoch in range(cfg.epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            preds = torch.stack([model(train_samples[i]) for i in idx])
            loss = mse_loss(preds, torch.as_tensor(targets[idx]))
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch} batch {b}")
            optimizer.zero_grad()
            nx.backward(loss)
            optimizer.step()
            total += loss.item() * len(idx)
        scheduler.step()
        entry = {"epoch": epoch, "lr": lr, "train_loss": total / n}

        model.eval()
        if cfg.target_train_mse is not None:
            entry["train_mse"] = float(np.mean((predict_normalized(model, train_samples) - targets) ** 2))
        if val_samples:
            entry["val_srcc"] = _safe_srcc(val_targets, predict_normalized(model, val_samples))
        log.append(entry)
        if progress:
            logger.info("epoch %d %s", epoch, {k: v for k, v in entry.items() if k != "epoch"})

        if val_samples:
            score = entry["val_srcc"] if entry["val_srcc"] is not None else -math.inf
            if score > best_srcc or best_state is None:
                best_srcc, best_epoch, stale = score, epoch, 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        if cfg.target_train_mse is not None and entry["train_mse"] <= cfg.target_train_mse:
            break

    if best_state is None:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        best_epoch = len(log) - 1
    return Checkpoint(cfg, best_state, normalizer, log, best_epoch)


def time_inference(
    checkpoint: Checkpoint,
    index: DatasetIndex,
    model: RSFIQA | None = None,
) -> float:
    """Mean wall-clock seconds per image for segment, describe, encode and score."""
    cfg = checkpoint.config
    model = model or checkpoint.build_model()
    segmenter, describer, encoder = make_segmenter(cfg), make_describer(cfg), make_encoder(cfg)
    images = [load_image(r.path, (cfg.height, cfg.width)) for r in index]
    if not images:
        raise ValueError("no images to time")
    start = time.perf_counter()
    with torch.no_grad():
        for r, image in zip(index, images):
            sample = prepare_sample(r.image_id, image, cfg, encoder, segmenter, describer)
            model(sample)
    return (time.perf_counter() - start) / len(images)


@dataclass
class GradCheckReport:
    max_rel_error: float
    coordinates: int
    per_group: dict[str, float]
    seconds: float


def gradcheck_config() -> RunConfig:
    return RunConfig(
        height=16, width=16, levels=3, backbone_channels=(4, 8, 8), L=3,
        dim=8, guide_dim=8, text_dim=8, max_tokens=32, vocab_size=64, mlp_hidden=16,
    )


def gradcheck_model(
    cfg: RunConfig | None = None,
    seed: int = 0,
    eps: float = 1e-4,
    samples_per_param: int = 8,
) -> GradCheckReport:
    """Finite-difference check of the full model's MSE loss over every parameter tensor."""
    from .data import synthesize_image

    cfg = cfg or gradcheck_config()
    rng = np.random.default_rng(seed)
    seed_everything(seed)
    model = RSFIQA(cfg)
    segmenter, describer, encoder = make_segmenter(cfg), HeuristicDescriber(), make_encoder(cfg)
    samples = []
    for k in range(2):
        synth = synthesize_image(rng, cfg.height)
        samples.append(prepare_sample(f"g{k}", synth.image, cfg, encoder, segmenter, describer, mos=synth.mos))
    targets = torch.as_tensor(rng.uniform(0.1, 0.9, size=len(samples)))

    def objective() -> torch.Tensor:
        return mse_loss(torch.stack([model(s) for s in samples]), targets)

    names, params = zip(*model.named_parameters())
    start = time.perf_counter()
    errs = nx.gradient_errors(objective, params, eps=eps, samples_per_param=samples_per_param, seed=seed)
    seconds = time.perf_counter() - start
    per_group = {name: float(e.max()) if e.size else 0.0 for name, e in zip(names, errs)}
    return GradCheckReport(
        max_rel_error=max(per_group.values()),
        coordinates=int(sum(e.size for e in errs)),
        per_group=per_group,
        seconds=seconds,
    )
