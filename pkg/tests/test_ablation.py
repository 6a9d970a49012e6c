import csv

import pytest

from rsfiqa.ablation import (
    COMPONENT_GRID, GRIDS, PROMPT_GRID, REDUCTION_GRID, ablate, dimension_grid, format_table, l_sweep, write_table,
)
from rsfiqa.config import RunConfig
from rsfiqa.data import make_synthetic_dataset
from rsfiqa.errors import InvalidGrid


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return make_synthetic_dataset(10, 1, tmp_path_factory.mktemp("abl"), size=16)


def test_grids_are_valid_configs():
    base = RunConfig()
    for name, grid in GRIDS.items():
        names = [n for n, _ in grid]
        assert len(set(names)) == len(names), name
        for _, overrides in grid:
            base.replace(**overrides)
    assert [n for n, _ in COMPONENT_GRID] == ["baseline", "+mhf", "+mhf+mllm", "+mhf+rsa", "full"]
    assert len(dimension_grid()) == 6 and len(PROMPT_GRID) == 5
    assert dict(REDUCTION_GRID)["lambda=0"] == {"lambda_init": 0.0, "train_lambda": False}
    assert l_sweep((3, 6)) == (("L=3", {"L": 3}), ("L=6", {"L": 6}))


def test_invalid_grids(tiny_cfg, dataset):
    with pytest.raises(InvalidGrid):
        ablate(tiny_cfg, dataset, [])
    with pytest.raises(InvalidGrid):
        ablate(tiny_cfg, dataset, [("a", {}), ("a", {"lr": 0.1})])
    with pytest.raises(InvalidGrid):
        ablate(tiny_cfg, dataset, [("a", {"not_a_key": 1})])


def test_rsa_bias_rows(tmp_path, tiny_cfg, dataset):
    rows = ablate(tiny_cfg.replace(epochs=2), dataset, GRIDS["rsa-bias"])
    assert [r.name for r in rows] == ["rsa-bias", "lambda=0"]
    for r in rows:
        assert r.epochs == 2 and r.seconds_per_image > 0 and len(r.predictions) == 2
    write_table(rows, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        table = list(csv.DictReader(fh))
    assert [t["name"] for t in table] == ["rsa-bias", "lambda=0"]
    text = format_table(rows)
    assert text.splitlines()[0].split() == ["config", "PLCC", "SRCC", "s/image"]
    assert "n/a" in format_table([r.__class__("x", {}, None, None, 0.1, 1)])
