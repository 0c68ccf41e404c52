import os, struct, torch
import numpy as np
import structlog
from dataclasses import dataclass, field
from torch.utils.data import DataLoader, TensorDataset

from model.errors import DataError
from model.moments import MomentPair


log = structlog.get_logger()

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte')
}
CIFAR_FILES = {
    'train': [f'data_batch_{i}.bin' for i in range(1, 6)],
    'test': ['test_batch.bin']
}



@dataclass
class AugmentConfig:
    offset_range: int = 0
    noise_var: float = 0.0
    hflip: bool = False

    def __post_init__(self):
        if self.offset_range < 0:
            raise DataError(f"offset_range must be non-negative, got {self.offset_range}")
        if self.noise_var < 0:
            raise DataError(f"noise_var must be non-negative, got {self.noise_var}")



@dataclass
class Dataset:
    images: torch.Tensor
    labels: torch.Tensor
    classes: int = 10
    noise_var: float = 0.0
    stats: MomentPair = field(default=None)

    def __post_init__(self):
        if self.images.dim() != 4:
            raise DataError(f"images must be N x C x H x W, got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels outside [0, {self.classes})")
        if self.stats is None and len(self) >= 2:
            self.stats = dataset_stats(self)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])




def _read_be32(buf, offset, path):
    if offset + 4 > len(buf):
        raise DataError(f"{path}: truncated header", offset)
    return struct.unpack_from('>I', buf, offset)[0]



def _require(path):
    if not os.path.isfile(path):
        raise DataError(f"missing {path}")



def _read_idx(path, magic, n_dims):
    _require(path)
    with open(path, 'rb') as f:
        buf = f.read()

    found = _read_be32(buf, 0, path)
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)

    dims = [_read_be32(buf, 4 + 4 * i, path) for i in range(n_dims)]
    start = 4 + 4 * n_dims
    expected = int(np.prod(dims))
    if len(buf) - start != expected:
        raise DataError(f"{path}: dims {dims} need {expected} payload bytes, found {len(buf) - start}", start)

    return np.frombuffer(buf, dtype=np.uint8, offset=start).reshape(dims)



def load_mnist(image_path, label_path):
    images = _read_idx(image_path, MNIST_IMAGE_MAGIC, 3)
    labels = _read_idx(label_path, MNIST_LABEL_MAGIC, 1)

    if len(images) != len(labels):
        raise DataError(f"{image_path} holds {len(images)} images but {label_path} {len(labels)} labels", 4)

    images = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    ds = Dataset(images, torch.from_numpy(labels.astype(np.int64)), classes=10)
    log.info("mnist loaded", path=image_path, n=len(ds))
    return ds



def load_cifar10(batch_files):
    images, labels = [], []

    for path in batch_files:
        _require(path)
        size = os.path.getsize(path)
        if size % CIFAR_RECORD:
            raise DataError(f"{path}: size {size} is not a multiple of {CIFAR_RECORD}", size - size % CIFAR_RECORD)

        records = np.fromfile(path, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / 255.0)

    ds = Dataset(torch.from_numpy(np.concatenate(images)), torch.from_numpy(np.concatenate(labels)), classes=10)
    log.info("cifar10 loaded", files=len(batch_files), n=len(ds))
    return ds



def load_mnist_dir(data_dir, split='train'):
    image_file, label_file = MNIST_FILES[split]
    return load_mnist(os.path.join(data_dir, image_file), os.path.join(data_dir, label_file))


def load_cifar10_dir(data_dir, split='train'):
    return load_cifar10([os.path.join(data_dir, f) for f in CIFAR_FILES[split]])



def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = MNIST_IMAGE_MAGIC if array.ndim == 3 else MNIST_LABEL_MAGIC
    with open(path, 'wb') as f:
        f.write(struct.pack('>I', magic))
        f.write(struct.pack(f'>{array.ndim}I', *array.shape))
        f.write(array.tobytes())


def write_cifar10(path, images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    records.tofile(path)




def dataset_stats(ds, noise_var=None):
    """Per-channel mean and variance over all pixels and examples (two-pass, float64)."""
    if len(ds) == 0:
        raise DataError("cannot compute statistics of an empty dataset")

    noise_var = ds.noise_var if noise_var is None else noise_var
    chunks = ds.images.split(1024)
    count = ds.images.numel() // ds.images.size(1)

    total = sum(c.double().sum(dim=(0, 2, 3)) for c in chunks)
    mean = total / count
    sq = sum(((c.double() - mean.view(1, -1, 1, 1)) ** 2).sum(dim=(0, 2, 3)) for c in chunks)
    var = sq / count + noise_var
    return MomentPair(mean.float(), var.float())



def whiten(ds):
    stats = dataset_stats(ds, noise_var=0.0)
    mean = stats.mean.double().view(1, -1, 1, 1)
    std = stats.variance.double().sqrt().clamp_min(1e-12).view(1, -1, 1, 1)
    images = ((ds.images.double() - mean) / std).float()
    return Dataset(images, ds.labels, ds.classes, ds.noise_var)



def subset(ds, n):
    return Dataset(ds.images[:n], ds.labels[:n], ds.classes, ds.noise_var)



def synthetic_blobs(n, classes, dim, seed, separation=10.0):
    """Gaussian class clusters with unit spread; class means are `separation` apart."""
    gen = torch.Generator().manual_seed(seed)

    if classes <= dim:
        centers = torch.zeros(classes, dim)
        centers[torch.arange(classes), torch.arange(classes)] = separation / np.sqrt(2.0)
    else:
        centers = torch.randn(classes, dim, generator=gen) * separation / np.sqrt(2.0 * dim)

    labels = torch.arange(n) % classes
    labels = labels[torch.randperm(n, generator=gen)]
    points = centers[labels] + torch.randn(n, dim, generator=gen)

    return Dataset(points.view(n, 1, 1, dim), labels, classes=classes)




def shift(images, dy, dx):
    """Translate N x C x H x W images by integer offsets, filling with zeros."""
    out = torch.zeros_like(images)
    h, w = images.shape[-2:]

    src_y, dst_y = slice(max(0, -dy), h - max(0, dy)), slice(max(0, dy), h - max(0, -dy))
    src_x, dst_x = slice(max(0, -dx), w - max(0, dx)), slice(max(0, dx), w - max(0, -dx))
    if abs(dy) < h and abs(dx) < w:
        out[..., dst_y, dst_x] = images[..., src_y, src_x]
    return out



def augment(batch, cfg, generator):
    if batch.dim() != 4:
        raise DataError(f"augment expects a 4-D batch, got {tuple(batch.shape)}")

    out = batch
    n = len(batch)

    if cfg.offset_range > 0:
        offsets = torch.randint(-cfg.offset_range, cfg.offset_range + 1, (n, 2), generator=generator)
        out = torch.stack([shift(x[None], int(dy), int(dx))[0] for x, (dy, dx) in zip(out, offsets)])

    if cfg.hflip:
        flip = torch.rand(n, generator=generator) < 0.5
        out = torch.where(flip.view(-1, 1, 1, 1), out.flip(-1), out)

    if cfg.noise_var > 0:
        noise = torch.randn(out.shape, generator=generator, dtype=out.dtype)
        out = out + noise * cfg.noise_var ** 0.5

    return out




def load_dataloader(ds, batch_size, seed, epoch=0, shuffle=True):
    gen = torch.Generator().manual_seed(seed * 100003 + epoch)
    return DataLoader(
        TensorDataset(ds.images, ds.labels),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=gen,
        num_workers=0
    )
