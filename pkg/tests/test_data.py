import numpy as np
import pytest

from dpkit import classical, data
from dpkit.errors import ConfigError, CorruptDataError, DataError


def write_fake_cifar(directory, per_file=20, seed=0):
    rng = np.random.default_rng(seed)
    for name in data.TRAIN_FILES + (data.TEST_FILE,):
        imgs = rng.integers(0, 256, size=(per_file, 3072), dtype=np.uint8)
        labels = rng.integers(0, 10, size=per_file)
        data.write_cifar_batch(directory / name, imgs, labels)
    return directory


def test_record_layout(tmp_path):
    # one record: label byte, then R plane, G plane, B plane, each row-major
    img = np.zeros((3, 32, 32), dtype=np.uint8)
    img[0, 0, 1] = 11   # R, row 0, col 1
    img[1, 2, 0] = 22   # G, row 2, col 0
    img[2, 31, 31] = 33
    raw = bytes([6]) + img.tobytes()
    assert raw[1 + 1] == 11 and raw[1 + 1024 + 64] == 22 and raw[3072] == 33
    images, labels = data.parse_cifar_records(raw)
    assert labels.tolist() == [6]
    np.testing.assert_array_equal(images[0], img)


def test_framing_error(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(3073 * 2 + 5))
    with pytest.raises(CorruptDataError) as err:
        data.read_cifar_batch(path)
    assert err.value.offset == 3073 * 2
    with pytest.raises(CorruptDataError):
        data.parse_cifar_records(b"")


def test_label_out_of_range_reports_offset():
    raw = bytes([1]) + bytes(3072) + bytes([10]) + bytes(3072)
    with pytest.raises(CorruptDataError) as err:
        data.parse_cifar_records(raw)
    assert err.value.offset == 3073


def test_constant_image(tmp_path):
    path = tmp_path / "one.bin"
    data.write_cifar_batch(path, np.full((1, 3072), 255, dtype=np.uint8), [3])
    ds = data.load_cifar_file(path)
    assert ds.labels.tolist() == [3]
    assert np.unique(ds.images).size == 1


def test_load_cifar10_normalization_oracle(tmp_path, monkeypatch):
    write_fake_cifar(tmp_path)
    monkeypatch.setenv("DPKIT_DATA_DIR", str(tmp_path))
    train, test = data.load_cifar10()
    assert len(train) == 100 and len(test) == 20
    raw = np.concatenate([data.read_cifar_batch(tmp_path / f)[0] for f in data.TRAIN_FILES])
    x01 = raw.astype(np.float64) / 255.0
    np.testing.assert_allclose(train.norm_mean, x01.mean(axis=(0, 2, 3)), rtol=0, atol=1e-12)
    np.testing.assert_allclose(train.norm_std, x01.std(axis=(0, 2, 3)), rtol=0, atol=1e-12)
    np.testing.assert_allclose(train.images.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    # test split reuses the train constants
    assert test.norm_mean == train.norm_mean and test.norm_std == train.norm_std
    raw_test = data.read_cifar_batch(tmp_path / data.TEST_FILE)[0] / 255.0
    want = (raw_test - np.reshape(train.norm_mean, (1, 3, 1, 1))) / np.reshape(train.norm_std,
                                                                               (1, 3, 1, 1))
    np.testing.assert_allclose(test.images, want, rtol=0, atol=1e-12)


def test_load_cifar10_subset_and_missing(tmp_path):
    write_fake_cifar(tmp_path)
    train, _ = data.load_cifar10(tmp_path, train_subset=30)
    first = data.read_cifar_batch(tmp_path / data.TRAIN_FILES[0])[1]
    second = data.read_cifar_batch(tmp_path / data.TRAIN_FILES[1])[1]
    np.testing.assert_array_equal(train.labels, np.concatenate([first, second[:10]]))
    (tmp_path / data.TEST_FILE).unlink()
    with pytest.raises(DataError):
        data.load_cifar10(tmp_path)


def test_dataset_invariants():
    with pytest.raises(DataError):
        data.Dataset(np.zeros((2, 3, 32, 32)), np.array([0, 10]), "train", "synthetic")
    with pytest.raises(DataError):
        data.Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=int), "train", "synthetic")
    with pytest.raises(DataError):
        data.Dataset(np.zeros((1, 3, 32, 32)), np.array([0]), "val", "synthetic")


def test_synthetic_deterministic_and_validated():
    a = data.make_synthetic(3, 5, 4.0, seed=1)
    b = data.make_synthetic(3, 5, 4.0, seed=1)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert np.bincount(a.labels).tolist() == [5, 5, 5]
    with pytest.raises(ConfigError):
        data.make_synthetic(2, 0, 4.0)
    with pytest.raises(ConfigError):
        data.make_synthetic(2, 5, 0.0)
    with pytest.raises(ConfigError):
        data.make_synthetic(2, 5, -1.0)


def test_synthetic_separable_by_nearest_neighbour():
    train, test = data.make_synthetic_pair(2, 50, 10.0, seed=3)
    model = classical.KNNClassifier(1).fit(classical.LabeledVectors.from_dataset(train))
    pred = model.predict(test.flat())
    assert np.all(pred == test.labels)
    # held-out draws are new examples, not copies
    assert not np.any(np.all(np.isclose(train.flat()[:, None, :5], test.flat()[None, :, :5]),
                             axis=2))


def test_container_roundtrip(tmp_path):
    ds = data.make_synthetic(4, 3, 4.0, seed=2)
    ds = data.Dataset(ds.images, ds.labels, "test", "perturbed", (0.1, 0.2, 0.3), (1.5, 2.0, 0.7),
                      {"laplace_epsilon": 5.0, "laplace_seed": 3})
    path = tmp_path / "d.dpk"
    data.save_dataset(ds, path)
    back = data.load_dataset(path)
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tobytes() == ds.labels.tobytes()
    assert (back.split, back.provenance) == ("test", "perturbed")
    assert back.norm_mean == ds.norm_mean and back.norm_std == ds.norm_std
    assert back.meta == {"laplace_epsilon": 5.0, "laplace_seed": 3}


def test_container_corruption(tmp_path):
    ds = data.make_synthetic(2, 2, 4.0)
    path = tmp_path / "d.dpk"
    data.save_dataset(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CorruptDataError):
        data.load_dataset(path)
    path.write_bytes(b"XYZ 1\n" + raw)
    with pytest.raises(CorruptDataError):
        data.load_dataset(path)


def test_poisson_full_rate_and_mean():
    full = data.PoissonSampler(1.0, 17, np.random.default_rng(0))
    assert all(b.tolist() == list(range(17)) for b in data.poisson_batches(full, 5))
    half = data.PoissonSampler(0.5, 10_000, np.random.default_rng(1))
    sizes = [len(b) for b in data.poisson_batches(half, 1000)]
    assert abs(np.mean(sizes) - 5000) <= 50


def test_poisson_seeds_differ_and_validate():
    a = [b.tolist() for b in data.poisson_batches(data.PoissonSampler(0.1, 100,
                                                                      np.random.default_rng(1)), 3)]
    b = [b.tolist() for b in data.poisson_batches(data.PoissonSampler(0.1, 100,
                                                                      np.random.default_rng(2)), 3)]
    assert a != b
    with pytest.raises(ConfigError):
        data.PoissonSampler(0.0, 10, np.random.default_rng(0))
