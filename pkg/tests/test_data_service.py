import numpy as np
import pytest
import torch

from advdetect.exceptions import DataFormatError
from advdetect.services import data_service
from tests.conftest import idx_bytes, write_idx_pair


def _cifar_record(label: int, value: int = 0) -> bytes:
    return bytes([label]) + bytes([value]) * 3072


def test_idx_pixels_scale_to_unit_interval(tmp_path):
    images = np.full((2, 3, 3), 0x7F, dtype=np.uint8)
    images[1] = 255
    labels = np.array([3, 9], dtype=np.uint8)
    image_path, label_path = write_idx_pair(tmp_path, "train", images, labels)

    ds = data_service.load_idx(image_path, label_path)
    assert ds.images.shape == (2, 1, 3, 3)
    assert ds.images.dtype == torch.float64
    assert float(ds.images[0, 0, 0, 0]) == pytest.approx(0.498039, abs=1e-6)
    assert float(ds.images[1].min()) == 1.0
    assert ds.labels.tolist() == [3, 9]


def test_idx_gzip_files_are_read(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    write_idx_pair(tmp_path / "mnist_fashion", "t10k", images, np.array([1], dtype=np.uint8), compress=True)
    ds = data_service.load_dataset("mnist_fashion", "test", tmp_path)
    assert len(ds) == 1
    assert ds.dataset_id == "mnist_fashion"
    assert ds.split == "test"


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "images"
    path.write_bytes(idx_bytes(np.zeros((1, 2, 2)), 0x00000801))
    labels = tmp_path / "labels"
    labels.write_bytes(idx_bytes(np.zeros(1), 0x00000801))
    with pytest.raises(DataFormatError, match="magic"):
        data_service.load_idx(path, labels)


def test_idx_payload_length_mismatch(tmp_path):
    path = tmp_path / "images"
    path.write_bytes(idx_bytes(np.zeros((2, 2, 2)), 0x00000803)[:-1])
    labels = tmp_path / "labels"
    labels.write_bytes(idx_bytes(np.zeros(2), 0x00000801))
    with pytest.raises(DataFormatError):
        data_service.load_idx(path, labels)


def test_idx_count_mismatch(tmp_path):
    image_path, label_path = write_idx_pair(tmp_path, "train", np.zeros((2, 2, 2)), np.zeros(2))
    label_path.write_bytes(idx_bytes(np.zeros(3), 0x00000801))
    with pytest.raises(DataFormatError):
        data_service.load_idx(image_path, label_path)


def test_idx_label_out_of_range(tmp_path):
    image_path, label_path = write_idx_pair(tmp_path, "train", np.zeros((1, 2, 2)), np.array([10]))
    with pytest.raises(DataFormatError):
        data_service.load_idx(image_path, label_path)


def test_cifar_label_bytes(tmp_path):
    ok = tmp_path / "ok.bin"
    ok.write_bytes(_cifar_record(9, 255) + _cifar_record(0))
    ds = data_service.load_cifar_binary([ok])
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.labels.tolist() == [9, 0]
    assert float(ds.images[0].min()) == 1.0

    bad = tmp_path / "bad.bin"
    bad.write_bytes(_cifar_record(10))
    with pytest.raises(DataFormatError):
        data_service.load_cifar_binary([bad])


def test_cifar_empty_and_ragged_files(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    assert len(data_service.load_cifar_binary([empty])) == 0

    ragged = tmp_path / "ragged.bin"
    ragged.write_bytes(_cifar_record(1)[:-1])
    with pytest.raises(DataFormatError):
        data_service.load_cifar_binary([ragged])


def test_missing_dataset_directory(tmp_path):
    with pytest.raises(DataFormatError):
        data_service.load_dataset("mnist_digit", "train", tmp_path)


def test_unknown_split(tmp_path):
    with pytest.raises(ValueError):
        data_service.load_dataset("mnist_digit", "validation", tmp_path)


def test_gaussian_noise_scale_and_clipping():
    gen = torch.Generator().manual_seed(0)
    x = torch.full((1_000_000,), 0.5, dtype=torch.float64)
    noisy = data_service.gaussian_noisify(x, 0.05, gen)
    assert float((noisy - x).std()) == pytest.approx(0.05, rel=0.01)
    assert float((noisy - x).mean()) == pytest.approx(0.0, abs=5e-4)
    assert float(noisy.min()) >= 0.0 and float(noisy.max()) <= 1.0

    wide = data_service.gaussian_noisify(x, 5.0, torch.Generator().manual_seed(0))
    assert float(wide.min()) == 0.0 and float(wide.max()) == 1.0


def test_zero_noise_is_identity_and_negative_rejected():
    x = torch.rand(10, dtype=torch.float64)
    assert torch.equal(data_service.gaussian_noisify(x, 0.0, torch.Generator()), x)
    with pytest.raises(ValueError):
        data_service.gaussian_noisify(x, -0.1, torch.Generator())
