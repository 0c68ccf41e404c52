import numpy as np
import pytest
import torch

from model.errors import DataError
from module.data import (
    AugmentConfig,
    Dataset,
    augment,
    dataset_stats,
    load_cifar10,
    load_cifar10_dir,
    load_dataloader,
    load_mnist,
    load_mnist_dir,
    shift,
    subset,
    synthetic_blobs,
    whiten,
    write_cifar10,
    write_idx
)


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    write_idx(tmp_path / 'train-images-idx3-ubyte', images)
    write_idx(tmp_path / 'train-labels-idx1-ubyte', labels)
    return tmp_path, images, labels


class TestMnist:

    def test_round_trip(self, idx_files):
        path, images, labels = idx_files
        ds = load_mnist(path / 'train-images-idx3-ubyte', path / 'train-labels-idx1-ubyte')
        assert ds.shape == (1, 28, 28)
        assert ds.labels.tolist() == [3, 7]
        np.testing.assert_array_equal(np.rint(ds.images[:, 0].numpy() * 255).astype(np.uint8), images)

    def test_standard_names(self, idx_files):
        path, _, _ = idx_files
        assert len(load_mnist_dir(str(path), 'train')) == 2

    def test_labels_with_image_magic(self, idx_files):
        path, _, _ = idx_files
        with pytest.raises(DataError, match="bad magic") as err:
            load_mnist(path / 'train-images-idx3-ubyte', path / 'train-images-idx3-ubyte')
        assert err.value.offset == 0

    def test_truncated_payload(self, idx_files):
        path, _, _ = idx_files
        data = (path / 'train-images-idx3-ubyte').read_bytes()
        (path / 'short').write_bytes(data[:-10])
        with pytest.raises(DataError, match="byte offset 16"):
            load_mnist(path / 'short', path / 'train-labels-idx1-ubyte')

    def test_truncated_header(self, tmp_path):
        (tmp_path / 'tiny').write_bytes(b'\x00\x00')
        with pytest.raises(DataError, match="truncated header"):
            load_mnist(tmp_path / 'tiny', tmp_path / 'tiny')

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            load_mnist_dir(str(tmp_path), 'test')

    def test_count_mismatch(self, idx_files, tmp_path):
        path, _, _ = idx_files
        write_idx(tmp_path / 'labels3', np.array([1, 2, 3], dtype=np.uint8))
        with pytest.raises(DataError, match="labels"):
            load_mnist(path / 'train-images-idx3-ubyte', tmp_path / 'labels3')


class TestCifar:

    def test_single_record(self, tmp_path):
        pixels = np.arange(3072, dtype=np.int64) % 256
        write_cifar10(tmp_path / 'one.bin', pixels.reshape(1, 3, 32, 32), [7])
        ds = load_cifar10([tmp_path / 'one.bin'])
        assert ds.labels.tolist() == [7]
        assert ds.shape == (3, 32, 32)
        np.testing.assert_array_equal(np.rint(ds.images.numpy().reshape(-1) * 255), pixels)

    def test_concatenates_files(self, tmp_path):
        for i in range(2):
            write_cifar10(tmp_path / f'b{i}.bin', np.zeros((3, 3, 32, 32)), [i, i, i])
        ds = load_cifar10([tmp_path / 'b0.bin', tmp_path / 'b1.bin'])
        assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]

    def test_missing_batch(self, tmp_path):
        with pytest.raises(DataError, match="missing .*data_batch_1.bin"):
            load_cifar10_dir(str(tmp_path))

    def test_truncated(self, tmp_path):
        (tmp_path / 'bad.bin').write_bytes(bytes(3073 + 100))
        with pytest.raises(DataError, match="3073"):
            load_cifar10([tmp_path / 'bad.bin'])


class TestAugment:

    def test_identity(self):
        x = torch.rand(4, 1, 6, 6)
        assert torch.equal(augment(x, AugmentConfig(), torch.Generator().manual_seed(0)), x)

    def test_shift_moves_pixel(self):
        img = torch.zeros(1, 1, 5, 5)
        img[0, 0, 2, 1] = 1.0
        out = shift(img, 0, 2)
        assert out[0, 0, 2, 3] == 1.0
        assert out.sum() == 1.0

    def test_shift_off_the_edge(self):
        img = torch.ones(1, 1, 3, 3)
        assert shift(img, 0, 3).sum() == 0
        assert shift(img, -1, 0)[0, 0, 2].sum() == 0

    def test_offsets_within_range(self):
        img = torch.zeros(200, 1, 9, 9)
        img[:, 0, 4, 4] = 1.0
        out = augment(img, AugmentConfig(offset_range=2), torch.Generator().manual_seed(1))
        ys, xs = out[:, 0].nonzero(as_tuple=True)[1:]
        assert len(ys) == 200
        assert ys.min() >= 2 and ys.max() <= 6 and xs.min() >= 2 and xs.max() <= 6
        assert len(set(zip(ys.tolist(), xs.tolist()))) > 20

    def test_noise_variance(self):
        clean = torch.zeros(100_000, 1, 1, 1)
        noisy = augment(clean, AugmentConfig(noise_var=0.1), torch.Generator().manual_seed(2))
        assert abs((noisy - clean).var().item() - 0.1) < 0.005

    def test_hflip(self):
        x = torch.arange(4.0).view(1, 1, 1, 4).repeat(1000, 1, 1, 1)
        out = augment(x, AugmentConfig(hflip=True), torch.Generator().manual_seed(3))
        flipped = (out[:, 0, 0, 0] == 3).float().mean().item()
        assert 0.4 < flipped < 0.6

    def test_negative_config(self):
        with pytest.raises(DataError):
            AugmentConfig(noise_var=-1)


class TestStats:

    def test_constant(self):
        ds = Dataset(torch.full((10, 1, 2, 2), 0.25), torch.zeros(10, dtype=torch.long))
        assert ds.stats.mean.item() == 0.25
        assert ds.stats.variance.item() == 0.0

    def test_noise_adds_variance(self):
        ds = Dataset(torch.full((10, 1, 2, 2), 0.25), torch.zeros(10, dtype=torch.long), noise_var=0.1)
        assert abs(ds.stats.variance.item() - 0.1) < 1e-7

    def test_two_pass_reference(self):
        images = torch.rand(3000, 3, 4, 4)
        ds = Dataset(images, torch.zeros(3000, dtype=torch.long))
        ref = images.double().permute(1, 0, 2, 3).reshape(3, -1).numpy()
        np.testing.assert_allclose(ds.stats.mean.numpy(), ref.mean(axis=1), atol=1e-6)
        np.testing.assert_allclose(ds.stats.variance.numpy(), ref.var(axis=1), atol=1e-6)

    def test_whiten(self):
        ds = Dataset(torch.rand(500, 2, 3, 3) * 4 + 1, torch.zeros(500, dtype=torch.long))
        stats = whiten(ds).stats
        np.testing.assert_allclose(stats.mean.numpy(), 0.0, atol=1e-5)
        np.testing.assert_allclose(stats.variance.numpy(), 1.0, atol=1e-5)

    def test_empty(self):
        ds = Dataset(torch.zeros(0, 1, 2, 2), torch.zeros(0, dtype=torch.long))
        with pytest.raises(DataError, match="empty"):
            dataset_stats(ds)


class TestDataset:

    def test_label_range(self):
        with pytest.raises(DataError):
            Dataset(torch.zeros(2, 1, 1, 1), torch.tensor([0, 10]))

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            Dataset(torch.zeros(2, 1, 1, 1), torch.tensor([0]))

    def test_subset(self, blobs):
        assert len(subset(blobs, 10)) == 10


class TestBlobs:

    def test_deterministic(self):
        a, b = synthetic_blobs(100, 3, 5, seed=4), synthetic_blobs(100, 3, 5, seed=4)
        assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
        assert a.shape == (1, 1, 5)

    def test_single_class(self):
        assert not synthetic_blobs(50, 1, 4, seed=0).labels.any()

    def test_separated(self):
        ds = synthetic_blobs(400, 4, 8, seed=1)
        x = ds.images.view(400, 8)
        centers = torch.stack([x[ds.labels == c].mean(dim=0) for c in range(4)])
        assert torch.cdist(centers, centers).fill_diagonal_(99).min() > 8


class TestDataloader:

    def test_seeded_order(self, blobs):
        first = [y.tolist() for _, y in load_dataloader(blobs, 64, seed=0, epoch=0)]
        again = [y.tolist() for _, y in load_dataloader(blobs, 64, seed=0, epoch=0)]
        other = [y.tolist() for _, y in load_dataloader(blobs, 64, seed=0, epoch=1)]
        assert first == again
        assert first != other
        assert sum(len(b) for b in first) == len(blobs)
