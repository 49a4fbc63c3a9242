import gzip
import pathlib
import struct

import numpy as np
import pytest
import torch

from advdetect.config import settings
from advdetect.models.checkpoint import Checkpoint
from advdetect.schemas.network import NetworkSpec, TrainMeta, conv, dense, dropout, flatten, maxpool, relu
from advdetect.services import nn_service
from advdetect.utils.seeding import make_generator

settings.PROGRESS = False


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------
def tiny_cnn_spec(class_count: int = 3) -> NetworkSpec:
    """1x6x6 input -> conv -> pool -> dropout -> dense(18, 5) -> dense(5, K)."""
    return NetworkSpec(
        layers=(
            conv(1, 2), relu(),
            maxpool(2),
            dropout(0.5),
            flatten(),
            dense(18, 5), relu(),
            dense(5, class_count),
        ),
        input_shape=(1, 6, 6),
        class_count=class_count,
    )


def trained_flag(ckpt: Checkpoint) -> Checkpoint:
    """Same weights, marked as trained for one epoch."""
    return Checkpoint(
        spec=ckpt.spec,
        weights=ckpt.weights,
        train_meta=TrainMeta(epochs_completed=1),
    )


def linear_checkpoint(weight: torch.Tensor, bias: torch.Tensor, trained: bool = True) -> Checkpoint:
    """A single dense layer over a flat input: logits = W x + b."""
    weight = torch.as_tensor(weight, dtype=torch.float64)
    bias = torch.as_tensor(bias, dtype=torch.float64)
    k, n = weight.shape
    spec = NetworkSpec(layers=(dense(n, k),), input_shape=(n,), class_count=k)
    return Checkpoint(
        spec=spec,
        weights={"0.weight": weight, "0.bias": bias},
        train_meta=TrainMeta(epochs_completed=1 if trained else 0),
    )


@pytest.fixture
def tiny_spec() -> NetworkSpec:
    return tiny_cnn_spec()


@pytest.fixture
def tiny_ckpt(tiny_spec) -> Checkpoint:
    return trained_flag(nn_service.init_checkpoint(tiny_spec, make_generator(7, "init")))


@pytest.fixture
def tiny_inputs() -> torch.Tensor:
    gen = torch.Generator().manual_seed(11)
    return torch.rand((4, 1, 6, 6), generator=gen, dtype=torch.float64)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------
def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.tobytes()


def write_idx_pair(directory: pathlib.Path, prefix: str, images: np.ndarray, labels: np.ndarray, compress: bool = False):
    directory.mkdir(parents=True, exist_ok=True)
    suffix = ".gz" if compress else ""
    image_path = directory / f"{prefix}-images-idx3-ubyte{suffix}"
    label_path = directory / f"{prefix}-labels-idx1-ubyte{suffix}"
    opener = gzip.open if compress else open
    with opener(image_path, "wb") as fh:
        fh.write(idx_bytes(images, 0x00000803))
    with opener(label_path, "wb") as fh:
        fh.write(idx_bytes(labels, 0x00000801))
    return image_path, label_path


def banded_digits(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """28x28 images where class k is a bright horizontal band on rows 2k+4 .. 2k+6, plus faint noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = rng.integers(0, 40, size=(n, 28, 28))
    for i, k in enumerate(labels):
        images[i, 2 * k + 4:2 * k + 7, 3:25] = 230
    return images.astype(np.uint8), labels.astype(np.uint8)


@pytest.fixture
def digit_data_dir(tmp_path) -> pathlib.Path:
    root = tmp_path / "data"
    train_x, train_y = banded_digits(640, seed=1)
    test_x, test_y = banded_digits(120, seed=2)
    write_idx_pair(root / "mnist_digit", "train", train_x, train_y)
    write_idx_pair(root / "mnist_digit", "t10k", test_x, test_y)
    return root
