import numpy as np
import pytest

from diffrobust import load_cifar10, make_synthetic_twoclass
from diffrobust.data import (
    CIFAR_BATCH_RECORDS,
    CIFAR_RECORD,
    IngestionError,
    LabeledImageSet,
    _stratified_subset,
)
from test_heads import perceptron_separable


@pytest.fixture(scope="session")
def cifar_root(tmp_path_factory):
    """Synthesizes the six CIFAR-10 binary batch files with valid sizes."""
    root = tmp_path_factory.mktemp("cifar")
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        block = rng.integers(0, 256, size=(CIFAR_BATCH_RECORDS, CIFAR_RECORD),
                             dtype=np.uint8)
        block[:, 0] = rng.integers(0, 10, size=CIFAR_BATCH_RECORDS)
        (root / f"{name}.bin").write_bytes(block.tobytes())
    return root


class TestCifarLoader:
    def test_full_test_split(self, cifar_root):
        ds = load_cifar10(cifar_root, "test")
        assert len(ds) == 10000
        assert ds.images.shape == (10000, 32, 32, 3)
        assert ds.num_classes == 10
        assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0

    def test_pixel_scaling_and_layout(self, cifar_root):
        # first record: label byte then 1024 red, 1024 green, 1024 blue
        raw = (cifar_root / "test_batch.bin").read_bytes()
        ds = load_cifar10(cifar_root, "test")
        assert ds.labels[0] == raw[0]
        assert ds.images[0, 0, 0, 0] == pytest.approx(raw[1] / 255.0)
        assert ds.images[0, 0, 0, 1] == pytest.approx(raw[1 + 1024] / 255.0)
        assert ds.images[0, 0, 0, 2] == pytest.approx(raw[1 + 2048] / 255.0)

    def test_train_split_counts_all_batches(self, cifar_root):
        ds = load_cifar10(cifar_root, "train", subset_size=500)
        assert len(ds) == 500

    def test_subset_is_stratified(self, cifar_root):
        ds = load_cifar10(cifar_root, "test", subset_size=1000, seed=0)
        counts = np.bincount(ds.labels, minlength=10)
        full = load_cifar10(cifar_root, "test")
        expect = np.bincount(full.labels, minlength=10) / len(full) * 1000
        assert np.all(np.abs(counts - expect) <= 1.5)

    def test_subset_deterministic(self, cifar_root):
        a = load_cifar10(cifar_root, "test", subset_size=100, seed=5)
        b = load_cifar10(cifar_root, "test", subset_size=100, seed=5)
        assert np.array_equal(a.images, b.images)
        c = load_cifar10(cifar_root, "test", subset_size=100, seed=6)
        assert not np.array_equal(a.labels, c.labels) or not np.array_equal(
            a.images, c.images)

    def test_invalid_subset_sizes(self, cifar_root):
        with pytest.raises(IngestionError):
            load_cifar10(cifar_root, "test", subset_size=0)
        with pytest.raises(IngestionError):
            load_cifar10(cifar_root, "test", subset_size=10001)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            load_cifar10(tmp_path, "test")

    def test_truncated_file_rejected(self, tmp_path):
        (tmp_path / "test_batch.bin").write_bytes(b"\x00" * 1000)
        with pytest.raises(IngestionError):
            load_cifar10(tmp_path, "test")

    def test_unknown_split_rejected(self, cifar_root):
        with pytest.raises(ValueError):
            load_cifar10(cifar_root, "validation")


class TestStratifiedSubset:
    def test_exact_proportions_on_balanced_labels(self):
        labels = np.repeat(np.arange(4), 25)
        idx = _stratified_subset(labels, 40, seed=0)
        assert len(idx) == 40
        assert np.all(np.bincount(labels[idx]) == 10)

    def test_without_replacement(self):
        labels = np.repeat(np.arange(2), 10)
        idx = _stratified_subset(labels, 15, seed=1)
        assert len(np.unique(idx)) == 15


class TestSynthetic:
    def test_balanced_and_deterministic(self):
        ds = make_synthetic_twoclass(20, resolution=8, seed=3)
        assert np.bincount(ds.labels).tolist() == [10, 10]
        again = make_synthetic_twoclass(20, resolution=8, seed=3)
        assert np.array_equal(ds.images, again.images)
        other = make_synthetic_twoclass(20, resolution=8, seed=4)
        assert not np.array_equal(ds.images, other.images)

    def test_pixel_ranges_respect_margin(self):
        margin = 0.5
        ds = make_synthetic_twoclass(10, resolution=8, margin=margin, seed=0)
        side = 2
        bg_hi = min(0.25, (1 - margin) / 2)
        for img, label in zip(ds.images, ds.labels):
            blob = img[:side, :side] if label == 0 else img[-side:, -side:]
            assert blob.min() >= bg_hi + margin
            rest = img.copy()
            if label == 0:
                rest[:side, :side] = 0
            else:
                rest[-side:, -side:] = 0
            assert rest.max() <= bg_hi

    def test_linearly_separable_in_pixel_space(self):
        ds = make_synthetic_twoclass(40, resolution=8, seed=7)
        flat = ds.images.reshape(len(ds), -1)
        assert perceptron_separable(flat, ds.labels)

    def test_two_samples_one_per_class(self):
        ds = make_synthetic_twoclass(2, resolution=8, seed=0)
        assert sorted(ds.labels.tolist()) == [0, 1]

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            make_synthetic_twoclass(5)  # odd n
        with pytest.raises(ValueError):
            make_synthetic_twoclass(4, margin=0.0)
        with pytest.raises(ValueError):
            make_synthetic_twoclass(4, margin=1.0)


class TestLabeledImageSet:
    def test_to_torch_layout(self):
        ds = make_synthetic_twoclass(4, resolution=8, seed=0)
        t = ds.to_torch()
        assert t.shape == (4, 3, 8, 8)
        assert t.dtype.is_floating_point
        assert np.allclose(t[0, 0].numpy(), ds.images[0, :, :, 0], atol=1e-6)

    def test_take_preserves_metadata(self):
        ds = make_synthetic_twoclass(6, resolution=8, seed=0)
        sub = ds.take([0, 2])
        assert len(sub) == 2
        assert sub.provenance == ds.provenance
        assert np.array_equal(sub.labels, ds.labels[[0, 2]])

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            LabeledImageSet(images=np.zeros((2, 4, 4, 3)) + 1.5,
                            labels=np.zeros(2, dtype=np.int64),
                            num_classes=2, split="t", provenance="p")
        with pytest.raises(ValueError):
            LabeledImageSet(images=np.zeros((2, 4, 4, 3)),
                            labels=np.array([0, 5]),
                            num_classes=2, split="t", provenance="p")
        with pytest.raises(ValueError):
            LabeledImageSet(images=np.zeros((2, 4, 4, 3)),
                            labels=np.zeros(3, dtype=np.int64),
                            num_classes=2, split="t", provenance="p")
