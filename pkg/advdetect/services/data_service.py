"""Dataset ingestion (MNIST-family IDX files, CIFAR-10 binary batches) and Gaussian noising."""
import gzip
import logging
import pathlib
import struct

import numpy as np
import torch

from advdetect.exceptions import DataFormatError
from advdetect.models.dataset import LabeledDataset
from advdetect.schemas.network import DatasetId

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_RECORD_SIZE = 3073
CIFAR_SHAPE = (3, 32, 32)
CLASS_COUNT = 10

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


def _read_bytes(path: str | pathlib.Path) -> bytes:
    path = pathlib.Path(path)
    if not path.exists():
        raise DataFormatError(f"Dataset file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(data: bytes, expected_magic: int, path) -> np.ndarray:
    if len(data) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08X} (expected 0x{expected_magic:08X})")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    count = int(np.prod(dims))
    payload = data[header_len:]
    if len(payload) != count:
        raise DataFormatError(f"{path}: expected {count} data bytes for dims {dims}, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(
    images_path: str | pathlib.Path,
    labels_path: str | pathlib.Path,
    dataset_id: str = "",
    split: str = "",
) -> LabeledDataset:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"Image count {images.shape[0]} in {images_path} does not match label count {labels.shape[0]} in {labels_path}"
        )
    if labels.size and labels.max() >= CLASS_COUNT:
        raise DataFormatError(f"{labels_path}: label {int(labels.max())} out of range [0, {CLASS_COUNT})")

    pixels = torch.from_numpy(images.astype(np.float64) / 255.0).unsqueeze(1)
    logger.info("Loaded %d images of shape %s from %s", pixels.shape[0], tuple(pixels.shape[1:]), images_path)
    return LabeledDataset(
        images=pixels,
        labels=torch.from_numpy(labels.astype(np.int64)),
        dataset_id=dataset_id,
        split=split,
        class_count=CLASS_COUNT,
    )


def load_cifar_binary(
    batch_paths: list[str | pathlib.Path],
    dataset_id: str = DatasetId.cifar10.value,
    split: str = "",
) -> LabeledDataset:
    image_parts: list[np.ndarray] = []
    label_parts: list[np.ndarray] = []
    for path in batch_paths:
        data = _read_bytes(path)
        if len(data) % CIFAR_RECORD_SIZE:
            raise DataFormatError(
                f"{path}: length {len(data)} is not a multiple of the {CIFAR_RECORD_SIZE}-byte record size"
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_SIZE)
        labels = records[:, 0]
        if labels.size and labels.max() >= CLASS_COUNT:
            raise DataFormatError(f"{path}: label byte {int(labels.max())} out of range [0, {CLASS_COUNT})")
        label_parts.append(labels)
        image_parts.append(records[:, 1:].reshape(-1, *CIFAR_SHAPE))

    if image_parts:
        images = np.concatenate(image_parts)
        labels = np.concatenate(label_parts)
    else:
        images = np.zeros((0, *CIFAR_SHAPE), dtype=np.uint8)
        labels = np.zeros((0,), dtype=np.uint8)
    logger.info("Loaded %d CIFAR records from %d batch file(s)", images.shape[0], len(batch_paths))
    return LabeledDataset(
        images=torch.from_numpy(images.astype(np.float64) / 255.0),
        labels=torch.from_numpy(labels.astype(np.int64)),
        dataset_id=dataset_id,
        split=split,
        class_count=CLASS_COUNT,
    )


def _resolve(directory: pathlib.Path, name: str) -> pathlib.Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataFormatError(f"Dataset file {name} not found under {directory}")


def load_dataset(dataset_id: DatasetId | str, split: str, data_dir: str | pathlib.Path) -> LabeledDataset:
    """Load a split from ``data_dir/<dataset_id>/`` using the canonical file names."""
    dataset_id = DatasetId(dataset_id)
    if split not in ("train", "test"):
        raise ValueError(f"Unknown split '{split}'")
    directory = pathlib.Path(data_dir) / dataset_id.value
    if dataset_id == DatasetId.cifar10:
        paths = [_resolve(directory, name) for name in CIFAR_FILES[split]]
        return load_cifar_binary(paths, dataset_id=dataset_id.value, split=split)
    images_name, labels_name = IDX_FILES[split]
    return load_idx(
        _resolve(directory, images_name),
        _resolve(directory, labels_name),
        dataset_id=dataset_id.value,
        split=split,
    )


def gaussian_noisify(x: torch.Tensor, eps: float, rng: torch.Generator) -> torch.Tensor:
    """x + N(0, sigma=eps) per pixel, clipped back to [0, 1]."""
    if eps < 0:
        raise ValueError(f"Noise scale must be >= 0, got {eps}")
    if eps == 0:
        return x.clone()
    noise = torch.randn(x.shape, generator=rng, dtype=torch.float64) * eps
    return (x + noise).clamp(0.0, 1.0)
