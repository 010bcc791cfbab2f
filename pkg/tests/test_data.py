import numpy as np
import pytest

from featft import data


def test_per_class_counts():
    ds = data.gen_synthetic_dataset(1, 12)
    assert len(ds) == 120
    for c in range(10):
        assert int((ds.labels == c).sum()) == 12
    assert set(np.unique(ds.splits)) == {"train", "heldout", "attack_eval"}


def test_generation_deterministic():
    a = data.gen_synthetic_dataset(9, 7)
    b = data.gen_synthetic_dataset(9, 7)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_different_seeds_differ():
    a = data.gen_synthetic_dataset(1, 5)
    b = data.gen_synthetic_dataset(2, 5)
    assert a.images.tobytes() != b.images.tobytes()


def test_pixel_range_and_quantization():
    ds = data.gen_synthetic_dataset(4, 5)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.array_equal(np.round(ds.images * 255), ds.images * 255)


def test_ppm_round_trip(tmp_path):
    ds = data.gen_synthetic_dataset(5, 2)
    p = tmp_path / "x.ppm"
    data.write_ppm(str(p), ds.images[0])
    back = data.read_ppm(str(p))
    assert np.array_equal(back, ds.images[0])


def test_ppm_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n2 2\n255\n" + b"\0" * 12)
    with pytest.raises(data.DataError):
        data.read_ppm(str(p))


def test_ppm_rejects_truncation(tmp_path):
    p = tmp_path / "short.ppm"
    p.write_bytes(b"P6\n4 4\n255\n" + b"\0" * 10)
    with pytest.raises(data.DataError):
        data.read_ppm(str(p))


def test_save_load_round_trip(tmp_path):
    ds = data.gen_synthetic_dataset(6, 4)
    data.save_dataset(ds, str(tmp_path))
    back = data.load_dataset(str(tmp_path))
    assert len(back) == len(ds)
    # manifest order groups by class; compare as multisets of (label, bytes)
    orig = sorted((int(l), i.tobytes()) for l, i in zip(ds.labels, ds.images))
    got = sorted((int(l), i.tobytes()) for l, i in zip(back.labels, back.images))
    assert orig == got


def test_dataset_layout_on_disk(tmp_path):
    ds = data.gen_synthetic_dataset(2, 3)
    data.save_dataset(ds, str(tmp_path))
    assert (tmp_path / "labels.csv").exists()
    assert (tmp_path / "train" / "00").is_dir()
    ppms = list(tmp_path.rglob("*.ppm"))
    assert len(ppms) == len(ds)


def test_missing_manifest(tmp_path):
    with pytest.raises(data.DataError):
        data.load_dataset(str(tmp_path))
