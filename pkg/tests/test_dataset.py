import filecmp
import os

import numpy as np
import pytest

from epiforge._rng import stream
from epiforge.dataset import (
    CROP_SIZE,
    DatasetError,
    DatasetIndex,
    ImageCache,
    ImageEntry,
    center_crop,
    generate_synthetic,
    load_image,
    load_manifest,
    normalize,
    preprocess_eval,
    preprocess_train,
    split_by_case,
    write_manifest,
)


def _write_csv(path, rows, header="image_id,class,case_id,path"):
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return path


def test_manifest_counts(tmp_path):
    index = generate_synthetic(tmp_path, 3, 4, 10, seed=0)
    loaded = load_manifest(tmp_path / "manifest.csv")
    assert len(loaded) == 120 and loaded.n_classes == 3
    assert loaded.entries == index.entries


def test_round_trip_equal_index(tmp_path):
    index = generate_synthetic(tmp_path, 3, 2, 5, seed=1)
    loaded = load_manifest(tmp_path / "manifest.csv")
    assert loaded.classes == index.classes
    for a, b in zip(loaded.entries, index.entries):
        assert (a.image_id, a.class_index, a.case_id, a.path) == (b.image_id, b.class_index, b.case_id, b.path)


def test_duplicate_reports_line(small_data, tmp_path):
    e = small_data.entries[0]
    src = small_data.resolve(e)
    row = f"{e.image_id},{small_data.classes[0]},{e.case_id},{src}"
    other = small_data.entries[1]
    rows = [row, f"{other.image_id},{small_data.classes[0]},{other.case_id},{small_data.resolve(other)}", row]
    with pytest.raises(DatasetError, match="line 4"):
        load_manifest(_write_csv(tmp_path / "m.csv", rows))


def test_missing_file_and_bad_rows(tmp_path):
    with pytest.raises(DatasetError, match="nope.png"):
        load_manifest(_write_csv(tmp_path / "m.csv", ["a,cls,c1,nope.png"]))
    with pytest.raises(DatasetError, match="line 2"):
        load_manifest(_write_csv(tmp_path / "m2.csv", ["a,cls,c1"]))
    with pytest.raises(DatasetError):
        load_manifest(_write_csv(tmp_path / "m3.csv", ["a,cls,c1,x.png"], header="id,label,case,file"))
    with pytest.raises((DatasetError, FileNotFoundError)):
        load_manifest(tmp_path / "absent.csv")


def test_index_invariants():
    e = ImageEntry("a", 1, "c", "a.png")
    with pytest.raises(ValueError):
        DatasetIndex((e,), ("only",), ".")
    with pytest.raises(ValueError):
        DatasetIndex((ImageEntry("a", 0, "c", "a.png"),), ("x", "empty"), ".")


def test_synthetic_deterministic(tmp_path):
    generate_synthetic(tmp_path / "a", 2, 2, 3, seed=5)
    generate_synthetic(tmp_path / "b", 2, 2, 3, seed=5)
    for dirpath, _, files in os.walk(tmp_path / "a"):
        for f in files:
            a = os.path.join(dirpath, f)
            b = a.replace(str(tmp_path / "a"), str(tmp_path / "b"))
            assert filecmp.cmp(a, b, shallow=False)


def test_synthetic_images_differ_within_case(small_data):
    a, b = small_data.entries[0], small_data.entries[1]
    assert a.case_id == b.case_id
    img_a, img_b = load_image(small_data.resolve(a)), load_image(small_data.resolve(b))
    assert img_a.shape == (160, 160, 3) and img_a.dtype == np.uint8
    assert not np.array_equal(img_a, img_b)


def test_synthetic_case_counts(tmp_path):
    index = generate_synthetic(tmp_path, 10, 6, 2, seed=7)
    assert len({(e.class_index, e.case_id) for e in index.entries}) == 60
    assert index.n_classes == 10


def test_nearest_centroid_separable(tmp_path):
    index = generate_synthetic(tmp_path, 10, 6, 20, seed=7)
    cache = ImageCache(index)
    X = np.stack([cache.raw(e)[::4, ::4].reshape(-1) / 255.0 for e in index.entries])
    y = np.array([e.class_index for e in index.entries])
    case_no = np.array([int(e.case_id[-2:]) for e in index.entries])
    train, test = case_no < 4, case_no >= 4
    cents = np.stack([X[train & (y == c)].mean(0) for c in range(10)])
    d = ((X[test][:, None, :] - cents[None]) ** 2).sum(-1)
    assert (d.argmin(1) == y[test]).mean() > 0.5


def test_normalize_range():
    assert normalize(np.array([0, 255])).tolist() == [-1.0, 1.0]


def test_train_degenerate_crop_and_clone():
    img = np.random.default_rng(0).integers(0, 256, size=(128, 128, 3), dtype=np.uint8)
    g = stream(3, 1)
    state = g.bit_generator.state
    out1 = preprocess_train(img, g)
    g.bit_generator.state = state
    out2 = preprocess_train(img, g)
    assert np.array_equal(out1, out2)
    assert out1.shape == (128, 128, 3) and out1.min() >= -1 and out1.max() <= 1


def test_train_gray_flip_symmetric():
    gray = np.full((150, 140, 3), 100, dtype=np.uint8)
    for s in range(6):
        out = preprocess_train(gray, stream(s))
        assert np.array_equal(out, out[:, ::-1])


def test_train_matches_manual_pipeline():
    img = np.random.default_rng(1).integers(0, 256, size=(160, 150, 3), dtype=np.uint8)
    g = stream(9)
    top, left = g.integers(0, 33), g.integers(0, 23)
    factor, flip = g.uniform(0.8, 1.2), g.random() < 0.5
    want = np.clip(img[top:top + 128, left:left + 128] * factor, 0, 255)
    want = want[:, ::-1] if flip else want
    assert np.array_equal(preprocess_train(img, stream(9)), (want - 127.5) / 127.5)


def test_flip_frequency():
    img = np.zeros((128, 128, 3), dtype=np.uint8)
    img[:, :64] = 255
    flips = sum(preprocess_train(img, stream(11, i))[0, 0, 0] < 0 for i in range(10000))
    assert 0.47 <= flips / 10000 <= 0.53


def test_train_rejects_small():
    with pytest.raises(DatasetError):
        preprocess_train(np.zeros((127, 200, 3), dtype=np.uint8), stream(0))


def test_eval_crop_border_split():
    img = np.arange(147 * 147 * 3, dtype=np.int64).reshape(147, 147, 3) % 251
    img = img.astype(np.uint8)
    out = preprocess_eval(img)
    assert np.array_equal(out, normalize(img[9:137, 9:137]))
    assert center_crop(img).shape == (CROP_SIZE, CROP_SIZE, 3)


def test_eval_pure_and_uniform():
    img = np.random.default_rng(2).integers(0, 256, size=(160, 160, 3), dtype=np.uint8)
    assert np.array_equal(preprocess_eval(img), preprocess_eval(img.copy()))
    flat = np.empty((200, 170, 3), dtype=np.uint8)
    flat[...] = (10, 128, 250)
    out = preprocess_eval(flat)
    assert out.shape == (128, 128, 3)
    assert np.array_equal(out, np.broadcast_to(normalize(np.array([10, 128, 250])), out.shape))


def test_split_by_case_disjoint(small_data):
    a, b = split_by_case(small_data, 0.34, seed=0)
    cases = lambda idx: {(idx.classes[e.class_index], e.case_id) for e in idx.entries}
    assert not cases(a) & cases(b)
    assert len(a) + len(b) == len(small_data)
    assert a.n_classes == b.n_classes == small_data.n_classes


def test_write_manifest_relative(small_data, tmp_path):
    path = write_manifest(small_data.rebased(tmp_path), tmp_path / "copy.csv")
    again = load_manifest(path)
    assert [again.resolve(e).resolve() for e in again.entries] == [small_data.resolve(e).resolve() for e in small_data.entries]
