"""Toggle-grid ablations: train and score one model per configuration.

A grid is a sequence of ``(name, overrides)`` pairs applied on top of a base
:class:`RunConfig`. Every row uses the same seeded split, so rows differ only
in the toggled settings.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .config import RunConfig
from .data import DatasetIndex, split
from .description import DIMENSIONS, DescriptionCache
from .errors import DegenerateVariance, InvalidGrid, IoError
from .metrics import plcc, srcc
from .semantic_encoder import PROMPT_FIELDS
from .training import predict, prepare_samples, time_inference, train

logger = logging.getLogger(__name__)

Grid = Sequence[tuple[str, dict[str, Any]]]

COMPONENT_GRID: Grid = (
    ("baseline", dict(use_mhf=False, use_descriptions=False, use_rsa_bias=False)),
    ("+mhf", dict(use_descriptions=False, use_rsa_bias=False)),
    ("+mhf+mllm", dict(use_rsa_bias=False)),
    ("+mhf+rsa", dict(use_descriptions=False)),
    ("full", {}),
)

# the full model next to its two reductions; lambda is frozen at zero so the
# bias term stays exactly zero through training
REDUCTION_GRID: Grid = (
    ("full", {}),
    ("lambda=0", dict(lambda_init=0.0, train_lambda=False)),
    ("no-descriptions", dict(use_descriptions=False)),
)

RSA_BIAS_GRID: Grid = (
    ("rsa-bias", {}),
    ("lambda=0", dict(lambda_init=0.0, train_lambda=False)),
)

PROMPT_GRID: Grid = (
    ("none", dict(prompt_fields=())),
    ("content", dict(prompt_fields=("content",))),
    ("content+level", dict(prompt_fields=("content", "level"))),
    ("content+score", dict(prompt_fields=("content", "score"))),
    ("all", dict(prompt_fields=PROMPT_FIELDS)),
)


def dimension_grid() -> Grid:
    every = tuple(d.value for d in DIMENSIONS)
    rows = [(f"-{d}", dict(dimensions=tuple(x for x in every if x != d))) for d in every]
    return tuple(rows) + (("all", dict(dimensions=every)),)


def l_sweep(values: Sequence[int] = (3, 4, 5, 6)) -> Grid:
    return tuple((f"L={v}", {"L": int(v)}) for v in values)


GRIDS = {
    "components": COMPONENT_GRID,
    "reductions": REDUCTION_GRID,
    "rsa-bias": RSA_BIAS_GRID,
    "prompts": PROMPT_GRID,
    "dimensions": dimension_grid(),
    "lsweep": l_sweep(),
}


@dataclass
class AblationRow:
    name: str
    overrides: dict[str, Any]
    plcc: float | None
    srcc: float | None
    seconds_per_image: float
    epochs: int
    predictions: dict[str, float] = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("predictions")
        return d


def _correlations(y, y_hat) -> tuple[float | None, float | None]:
    try:
        return plcc(y, y_hat), srcc(y, y_hat)
    except DegenerateVariance:
        return None, None


def ablate(
    cfg: RunConfig,
    index: DatasetIndex,
    grid: Grid,
    cache: DescriptionCache | None = None,
    masks_dir: str | Path | None = None,
    progress: bool = False,
) -> list[AblationRow]:
    """Train one model per grid row and score it on the test split.

    Rows are evaluated on the held-out split; if the config's ratios leave it
    empty, on the training split instead.
    """
    grid = list(grid)
    if not grid:
        raise InvalidGrid("ablation grid is empty")
    names = [name for name, _ in grid]
    if len(set(names)) != len(names):
        raise InvalidGrid(f"duplicate row names in grid: {names}")
    configs = []
    for name, overrides in grid:
        try:
            configs.append(cfg.replace(**overrides))
        except TypeError as e:
            raise InvalidGrid(f"row {name!r}: {e}") from e

    rows = []
    for (name, overrides), row_cfg in zip(grid, configs):
        train_idx, val_idx, test_idx = split(index, row_cfg.split_ratios, row_cfg.seed)
        eval_idx = test_idx if len(test_idx) else train_idx
        train_s = prepare_samples(train_idx, row_cfg, cache, masks_dir)
        val_s = prepare_samples(val_idx, row_cfg, cache, masks_dir)
        eval_s = prepare_samples(eval_idx, row_cfg, cache, masks_dir)
        ckpt = train(row_cfg, train_s, val_s, progress=progress)
        model = ckpt.build_model()
        preds = predict(ckpt, eval_s, model)
        p, s = _correlations([x.mos for x in eval_s], [preds[x.image_id] for x in eval_s])
        seconds = time_inference(ckpt, eval_idx, model)
        row = AblationRow(name, dict(overrides), p, s, seconds, len(ckpt.log), preds)
        logger.info("ablation row %s", row.as_dict())
        rows.append(row)
    return rows


def write_table(rows: Sequence[AblationRow], path: str | Path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "plcc", "srcc", "seconds_per_image", "epochs"])
            for r in rows:
                w.writerow([r.name, _cell(r.plcc), _cell(r.srcc), repr(r.seconds_per_image), r.epochs])
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def _cell(x: float | None) -> str:
    return "" if x is None else repr(x)


def format_table(rows: Sequence[AblationRow]) -> str:
    def num(x):
        return "  n/a " if x is None else f"{x:6.3f}"

    width = max(len(r.name) for r in rows)
    lines = [f"{'config':<{width}}   PLCC    SRCC   s/image"]
    lines += [f"{r.name:<{width}}  {num(r.plcc)}  {num(r.srcc)}  {r.seconds_per_image:.4f}" for r in rows]
    return "\n".join(lines)


__all__ = [
    "AblationRow", "GRIDS", "COMPONENT_GRID", "REDUCTION_GRID", "RSA_BIAS_GRID", "PROMPT_GRID",
    "ablate", "dimension_grid", "format_table", "l_sweep", "write_table",
]
