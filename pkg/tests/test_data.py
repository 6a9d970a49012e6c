import numpy as np
import pytest

from rsfiqa.data import (
    DatasetIndex, DatasetRecord, distort, load_dataset, load_image, load_split_file,
    make_synthetic_dataset, mos_from_strengths, save_image, split, synthesize_image,
)
from rsfiqa.errors import IdMismatch, IoError, MalformedCsv, MissingImage, TooFewSamples


def fake_index(n):
    return DatasetIndex([DatasetRecord(f"im{i}", None, float(i)) for i in range(n)])


def write_csv(tmp_path, text, images=("a", "b")):
    for name in images:
        save_image(np.full((4, 4, 3), 0.5), tmp_path / f"{name}.png")
    (tmp_path / "data.csv").write_text(text)
    return tmp_path / "data.csv"


def test_load_dataset(tmp_path):
    index = load_dataset(write_csv(tmp_path, "image_path,mos\na.png,3.5\nb.png,1\n\n"))
    assert index.ids == ["a", "b"]
    assert [r.mos for r in index] == [3.5, 1.0]
    assert index.records[0].path == tmp_path / "a.png"


@pytest.mark.parametrize(
    "text, error",
    [
        ("path,score\na.png,1\n", MalformedCsv),
        ("", MalformedCsv),
        ("image_path,mos\na.png\n", MalformedCsv),
        ("image_path,mos\na.png,good\n", MalformedCsv),
        ("image_path,mos\na.png,nan\n", MalformedCsv),
        ("image_path,mos\na.png,1\na.png,2\n", MalformedCsv),
        ("image_path,mos\nc.png,1\n", MissingImage),
    ],
)
def test_load_dataset_errors(tmp_path, text, error):
    with pytest.raises(error):
        load_dataset(write_csv(tmp_path, text))


def test_load_dataset_duplicate_stem(tmp_path):
    (tmp_path / "sub").mkdir()
    save_image(np.zeros((4, 4, 3)), tmp_path / "sub" / "a.png")
    with pytest.raises(MalformedCsv):
        load_dataset(write_csv(tmp_path, "image_path,mos\na.png,1\nsub/a.png,2\n"))
    with pytest.raises(IoError):
        load_dataset(tmp_path / "nothing.csv")


def test_image_round_trip_and_resize(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(6, 8, 3)) / 255.0
    save_image(img, tmp_path / "x.png")
    np.testing.assert_array_equal(load_image(tmp_path / "x.png"), img)
    assert load_image(tmp_path / "x.png", (4, 4)).shape == (4, 4, 3)
    with pytest.raises(MissingImage):
        load_image(tmp_path / "y.png")
    (tmp_path / "z.png").write_bytes(b"not a png")
    with pytest.raises(IoError):
        load_image(tmp_path / "z.png")


def test_split_sizes_and_determinism():
    index = fake_index(10)
    train, val, test = split(index, (0.7, 0.1, 0.2), seed=3)
    assert (len(train), len(val), len(test)) == (7, 1, 2)
    assert sorted(train.ids + val.ids + test.ids) == sorted(index.ids)
    assert split(index, (0.7, 0.1, 0.2), seed=3)[0].ids == train.ids
    assert split(index, (0.7, 0.1, 0.2), seed=4)[0].ids != train.ids
    assert [len(s) for s in split(fake_index(80), (0.8, 0.0, 0.2))] == [64, 0, 16]


def test_split_errors():
    with pytest.raises(TooFewSamples):
        split(fake_index(3), (0.7, 0.1, 0.2))
    with pytest.raises(ValueError):
        split(fake_index(10), (0.5, 0.5, 0.5))


def test_split_file(tmp_path):
    index = fake_index(4)
    path = tmp_path / "split.csv"
    path.write_text("image_id,split\nim0,train\nim1,test\nim2,train\nim3,val\n")
    train, val, test = load_split_file(path, index)
    assert (train.ids, val.ids, test.ids) == (["im0", "im2"], ["im3"], ["im1"])
    for body, error in [
        ("id,part\n", MalformedCsv),
        ("image_id,split\nim0,train,x\n", MalformedCsv),
        ("image_id,split\nim0,holdout\n", MalformedCsv),
        ("image_id,split\nim0,train\nim0,test\n", MalformedCsv),
        ("image_id,split\nim9,train\n", IdMismatch),
        ("image_id,split\nim0,train\nim1,train\nim2,train\n", IdMismatch),
    ]:
        path.write_text(body)
        with pytest.raises(error):
            load_split_file(path, index)
    with pytest.raises(IoError):
        load_split_file(tmp_path / "missing.csv", index)


def test_mos_mapping():
    assert mos_from_strengths([0.0, 0.0]) == 5.0
    assert mos_from_strengths([1.0]) == 1.0
    assert mos_from_strengths([0.25, 0.75]) == 3.0


@pytest.mark.parametrize("kind", ["blur", "noise", "desaturate", "blocks"])
def test_distortions(kind):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 16, 3))
    np.testing.assert_array_equal(distort(img, kind, 0.0, rng), img)
    out = distort(img, kind, 1.0, rng)
    assert out.shape == img.shape and 0.0 <= out.min() and out.max() <= 1.0
    assert np.abs(out - img).mean() > 1e-3
    with pytest.raises(ValueError):
        distort(img, "fog", 0.5, rng)


def test_synthesize_clean_image_scores_five():
    synth = synthesize_image(np.random.default_rng(2), 32, (0.0, 0.0))
    assert synth.mos == 5.0 and set(synth.strengths) == {0.0}
    assert synth.image.shape == (32, 32, 3)
    assert len(synth.strengths) == len(np.unique(synth.labels))


def test_synthetic_strengths_stay_in_range():
    rng = np.random.default_rng(5)
    for _ in range(20):
        synth = synthesize_image(rng, 16, (0.2, 0.6))
        assert all(0.2 <= s <= 0.6 for s in synth.strengths)
        assert 1.0 <= synth.mos <= 5.0


def test_make_synthetic_dataset(tmp_path):
    a = make_synthetic_dataset(5, 0, tmp_path / "a", size=32)
    b = make_synthetic_dataset(5, 0, tmp_path / "b", size=32)
    assert a.provenance == "synthetic" and a.ids == [f"synth_{i}" for i in range(5)]
    assert [r.mos for r in a] == [r.mos for r in b]
    for ra, rb in zip(a, b):
        assert ra.path.read_bytes() == rb.path.read_bytes()
    loaded = load_dataset(tmp_path / "a" / "dataset.csv")
    assert [r.mos for r in loaded] == [r.mos for r in a]
    assert make_synthetic_dataset(5, 1, tmp_path / "c", size=32).records[0].mos != a.records[0].mos
    with pytest.raises(ValueError):
        make_synthetic_dataset(1, 0, tmp_path / "d")
