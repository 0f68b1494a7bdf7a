import gzip
import struct

import numpy as np
import pytest
from PIL import Image

from rscvae.datasets import (
    NORMAL,
    REAL_ANOMALY,
    LabeledImageSet,
    folder_task,
    inject_anomalies,
    load_folder_dataset,
    load_idx,
    load_idx_dataset,
    one_class_split,
    parse_idx,
    synthesize_shapes,
    write_idx,
)
from rscvae.errors import DataError, InvalidInputError, ParseError


def toy_sets(classes=10, n_train=10, n_test=4, size=4):
    rng = np.random.default_rng(0)
    train = LabeledImageSet(rng.random((classes * n_train, 1, size, size)),
                            np.repeat(np.arange(classes), n_train), "train")
    test = LabeledImageSet(rng.random((classes * n_test, 1, size, size)),
                           np.repeat(np.arange(classes), n_test), "test")
    return train, test


class TestParseIdx:
    def test_vector(self):
        arr, shape = parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 3, 0, 128, 255]))
        assert shape == (3,)
        assert arr.tolist() == [0.0, 128 / 255, 1.0]

    def test_bad_magic(self):
        with pytest.raises(ParseError) as exc:
            parse_idx(bytes([1, 0, 8, 1, 0, 0, 0, 1, 0]))
        assert exc.value.offset == 0
        with pytest.raises(ParseError) as exc:
            parse_idx(bytes([0, 7, 8, 1, 0, 0, 0, 1, 0]))
        assert exc.value.offset == 1

    def test_truncated_payload(self):
        data = bytes([0, 0, 8, 2]) + struct.pack(">II", 2, 3) + bytes(5)
        with pytest.raises(ParseError, match="expected 6 bytes"):
            parse_idx(data)

    def test_unsupported_dtype(self):
        with pytest.raises(ParseError) as exc:
            parse_idx(bytes([0, 0, 0x0A, 1, 0, 0, 0, 1, 0]))
        assert exc.value.offset == 2

    def test_short_header(self):
        with pytest.raises(ParseError):
            parse_idx(bytes([0, 0]))
        with pytest.raises(ParseError):
            parse_idx(bytes([0, 0, 8, 2, 0, 0, 0, 1]))

    def test_trailing_bytes(self):
        with pytest.raises(ParseError, match="trailing"):
            parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 1, 7, 9]))

    def test_zero_dims(self):
        with pytest.raises(ParseError) as exc:
            parse_idx(bytes([0, 0, 8, 0]))
        assert exc.value.offset == 3

    @pytest.mark.parametrize("code,dtype", [
        (0x08, np.uint8), (0x09, np.int8), (0x0B, np.int16),
        (0x0C, np.int32), (0x0D, np.float32), (0x0E, np.float64),
    ])
    def test_round_trip(self, code, dtype):
        rng = np.random.default_rng(code)
        shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
        if np.issubdtype(dtype, np.integer):
            info = np.iinfo(dtype)
            arr = rng.integers(info.min, info.max, size=shape, endpoint=True).astype(dtype)
        else:
            arr = rng.normal(size=shape).astype(dtype)
        raw = struct.pack(">BBBB", 0, 0, code, len(shape)) + struct.pack(f">{len(shape)}I", *shape)
        raw += arr.astype(np.dtype(dtype).newbyteorder(">")).tobytes()
        parsed, got_shape = parse_idx(raw)
        assert got_shape == shape
        assert write_idx(parsed, code) == raw

    def test_load_gz(self, tmp_path):
        raw = write_idx(np.array([[0, 1], [0.5, 0.25]]) , 0x08)
        path = tmp_path / "x-idx2-ubyte.gz"
        with gzip.open(path, "wb") as f:
            f.write(raw)
        arr, shape = load_idx(path)
        assert shape == (2, 2)
        assert np.allclose(arr, np.rint(np.array([[0, 1], [0.5, 0.25]]) * 255) / 255)

    def test_load_reports_path(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"\x01\x00\x08\x01")
        with pytest.raises(ParseError, match="bad"):
            load_idx(path)

    def test_fuzz_never_crashes(self):
        rng = np.random.default_rng(0)
        for i in range(2000):
            n = int(rng.integers(0, 40))
            data = bytearray(rng.integers(0, 256, n, dtype=np.uint8).tobytes())
            if i % 2 and n >= 4:  # valid-looking prefix reaches deeper branches
                data[0:2] = b"\0\0"
                data[2] = int(rng.choice([8, 9, 11, 12, 13, 14]))
                data[3] = int(rng.integers(0, 4))
            try:
                parse_idx(bytes(data))
            except ParseError:
                pass


def test_load_idx_dataset(tmp_path):
    rng = np.random.default_rng(0)
    paths = {}
    for split, n in (("train", 6), ("test", 4)):
        imgs = rng.integers(0, 256, (n, 28, 28)).astype(np.uint8)
        paths[f"{split}_images"] = tmp_path / f"{split}-images"
        paths[f"{split}_images"].write_bytes(write_idx(imgs, 0x08, scaled=False))
        paths[f"{split}_labels"] = tmp_path / f"{split}-labels"
        paths[f"{split}_labels"].write_bytes(write_idx(np.arange(n) % 3, 0x08, scaled=False))
    train, test = load_idx_dataset(paths["train_images"], paths["train_labels"],
                                   paths["test_images"], paths["test_labels"], image_size=32)
    assert train.images.shape == (6, 1, 32, 32) and test.images.shape == (4, 1, 32, 32)
    assert train.class_ids.tolist() == [0, 1, 2, 0, 1, 2]
    assert 0 <= train.images.min() and train.images.max() <= 1


class TestOneClassSplit:
    def test_counts(self):
        train, test = toy_sets()
        task = one_class_split(train, test, 0, np.random.default_rng(0))
        assert len(task.train) == 10
        normals = [r for r in task.test if r.label == 0]
        anomalies = [r for r in task.test if r.label == 1]
        assert len(normals) == 4 and len(anomalies) == 36 // 2
        assert all(r.class_id != 0 for r in anomalies)
        assert all(r.label == 0 and r.role == NORMAL for r in task.train)

    def test_odd_pool_floors(self):
        train, test = toy_sets(classes=4, n_test=3)
        task = one_class_split(train, test, 1, np.random.default_rng(0))
        assert sum(r.label for r in task.test) == 9 // 2

    def test_missing_target(self):
        train, test = toy_sets()
        test = LabeledImageSet(test.images[4:], test.class_ids[4:], "test")
        with pytest.raises(InvalidInputError):
            one_class_split(train, test, 0, np.random.default_rng(0))

    def test_deterministic(self):
        train, test = toy_sets()
        a = one_class_split(train, test, 3, np.random.default_rng(42))
        b = one_class_split(train, test, 3, np.random.default_rng(42))
        assert [r.id for r in a.test] == [r.id for r in b.test]

    def test_no_overlap(self):
        train, test = toy_sets()
        for target in range(10):
            task = one_class_split(train, test, target, np.random.default_rng(target))
            assert not {r.id for r in task.train} & {r.id for r in task.test}

    def test_manifest(self, tmp_path):
        train, test = toy_sets()
        task = one_class_split(train, test, 0, np.random.default_rng(0))
        task.write_manifest(tmp_path / "m.json")
        import json

        m = json.loads((tmp_path / "m.json").read_text())
        assert len(m["train"]) == 10 and len(m["test"]) == 22


class TestInjectAnomalies:
    def test_zero_fraction(self):
        train, test = toy_sets()
        task = one_class_split(train, test, 0, np.random.default_rng(0))
        assert inject_anomalies(task, 0.0, np.random.default_rng(0)) is task

    def test_fraction_counts(self):
        rng = np.random.default_rng(0)
        train = LabeledImageSet(np.zeros((6100, 1, 2, 2)), [0] * 6000 + [1] * 100, "train")
        test = LabeledImageSet(np.zeros((20, 1, 2, 2)), [0] * 10 + [1] * 10, "test")
        task = one_class_split(train, test, 0, rng)
        injected = inject_anomalies(task, 0.01, rng)
        anomalies = [r for r in injected.train if r.label == 1]
        assert len(anomalies) == 60
        assert all(r.role == REAL_ANOMALY for r in anomalies)
        assert len(injected.anomaly_pool) == 40

    def test_no_leakage_from_test_pool(self):
        train, test = toy_sets()
        task = one_class_split(train, test, 0, np.random.default_rng(0))
        task.anomaly_pool = []
        before = {r.id for r in task.test}
        injected = inject_anomalies(task, 3, np.random.default_rng(1))
        ids = {r.id for r in injected.train if r.label == 1}
        assert len(ids) == 3 and ids <= before
        assert not ids & {r.id for r in injected.test}

    def test_too_many(self):
        train, test = toy_sets()
        task = one_class_split(train, test, 0, np.random.default_rng(0))
        with pytest.raises(InvalidInputError):
            inject_anomalies(task, 1000, np.random.default_rng(0))


def _write_png(path, value, size=12):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size, 3), value, dtype=np.uint8)).save(path)


@pytest.fixture
def folder(tmp_path):
    root = tmp_path / "bottle"
    for i in range(5):
        _write_png(root / "train" / "good" / f"{i:03d}.png", 10 * i)
    for i in range(2):
        _write_png(root / "test" / "good" / f"{i:03d}.png", 100 + i)
    _write_png(root / "test" / "crack" / "000.png", 200)
    _write_png(root / "test" / "crack" / "001.png", 210)
    _write_png(root / "test" / "scratch" / "000.png", 220)
    return root


class TestFolderDataset:
    def test_counts_and_labels(self, folder):
        train, test = load_folder_dataset(folder, image_size=8)
        assert len(train) == 5 and train.images.shape == (5, 3, 8, 8)
        assert test.class_ids.tolist() == [1, 1, 0, 0, 1]
        assert test.sources == ["crack", "crack", "good", "good", "scratch"]
        task = folder_task(train, test)
        assert sum(r.label for r in task.test) == 3

    def test_lexicographic_and_repeatable(self, folder):
        a, _ = load_folder_dataset(folder, image_size=8)
        b, _ = load_folder_dataset(folder, image_size=8)
        assert a.ids == sorted(a.ids) == b.ids
        assert np.array_equal(a.images, b.images)

    def test_per_subcategory_injection(self, folder):
        task = folder_task(*load_folder_dataset(folder, image_size=8))
        injected = inject_anomalies(task, 1, np.random.default_rng(0), per_subcategory=True)
        sources = sorted(r.source for r in injected.train if r.label == 1)
        assert sources == ["crack", "scratch"]
        assert sum(r.label for r in injected.test) == 1

    def test_missing_train_good(self, tmp_path):
        with pytest.raises(DataError):
            load_folder_dataset(tmp_path)

    def test_empty_test(self, folder):
        import shutil

        shutil.rmtree(folder / "test")
        (folder / "test").mkdir()
        with pytest.raises(DataError):
            load_folder_dataset(folder, image_size=8)

    def test_unreadable_image(self, folder):
        (folder / "train" / "good" / "999.png").write_bytes(b"not an image")
        with pytest.raises(DataError, match="999.png"):
            load_folder_dataset(folder, image_size=8)


class TestSynthetic:
    def test_shape_contract(self):
        train, test = synthesize_shapes(100, 2, 32, np.random.default_rng(0))
        assert len(train) == len(test) == 200
        assert np.bincount(train.class_ids).tolist() == [100, 100]
        assert train.images.shape[1:] == (1, 32, 32)
        assert 0 <= train.images.min() and train.images.max() <= 1

    def test_reproducible(self):
        a, _ = synthesize_shapes(10, 3, 32, np.random.default_rng(4))
        b, _ = synthesize_shapes(10, 3, 32, np.random.default_rng(4))
        assert np.array_equal(a.images, b.images)

    def test_nearest_centroid_separable(self):
        train, test = synthesize_shapes(100, 6, 32, np.random.default_rng(0))
        flat = lambda s: s.images.reshape(len(s), -1).astype(np.float64)  # noqa: E731
        centroids = np.stack([flat(train)[train.class_ids == c].mean(0) for c in range(6)])
        correct = 0
        for x, c in zip(flat(test), test.class_ids):
            dists = [((x - m) ** 2).sum() for m in centroids]
            correct += int(np.argmin(dists) == c)
        assert correct / len(test) >= 0.99

    def test_bad_size(self):
        with pytest.raises(InvalidInputError):
            synthesize_shapes(2, 2, 64)
