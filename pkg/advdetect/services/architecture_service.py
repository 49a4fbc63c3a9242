"""Fixed CNN/MLP layer stacks for the three supported datasets, plus the shape-checking pass.

Dense layers declare the widths printed in the architecture tables; the flatten
width is always computed from the actual layer geometry and the shape check
rejects any disagreement between the two.
"""
import logging
import math

from advdetect.schemas.network import (
    DatasetId,
    LayerSpec,
    NetworkKind,
    NetworkSpec,
    conv,
    dense,
    dropout,
    flatten,
    maxpool,
    relu,
)

logger = logging.getLogger(__name__)

CLASS_COUNT = 10

INPUT_SHAPES: dict[DatasetId, tuple[int, int, int]] = {
    DatasetId.mnist_digit: (1, 28, 28),
    DatasetId.mnist_fashion: (1, 28, 28),
    DatasetId.cifar10: (3, 32, 32),
}


def _mnist_digit_cnn() -> list[LayerSpec]:
    # Unpadded convs + one 2x2 pool: 28 -> 26 -> 24 -> 12, and 12*12*20 = 2880
    return [
        conv(1, 10, padding=0), relu(),
        conv(10, 20, padding=0), relu(),
        maxpool(2),
        dropout(0.5),
        flatten(),
        dense(2880, 128), relu(),
        dropout(0.5),
        dense(128, CLASS_COUNT),
    ]


def _mnist_fashion_cnn() -> list[LayerSpec]:
    return [
        conv(1, 32), relu(), maxpool(2),
        conv(32, 32), relu(), maxpool(2),
        conv(32, 64), relu(), dropout(0.25),
        conv(64, 64), relu(), dropout(0.25),
        flatten(),
        dense(3136, 600), relu(),
        dropout(0.5),
        dense(600, 128), relu(),
        dense(128, CLASS_COUNT),
    ]


def _cifar10_cnn() -> list[LayerSpec]:
    return [
        conv(3, 32), relu(),
        conv(32, 64), relu(),
        maxpool(2),
        conv(64, 128), relu(),
        conv(128, 128), relu(),
        maxpool(2),
        dropout(0.5),
        conv(128, 256), relu(),
        conv(256, 256), relu(),
        maxpool(2),
        flatten(),
        dense(4096, 1024), relu(),
        dropout(0.5),
        dense(1024, 256), relu(),
        dropout(0.5),
        dense(256, CLASS_COUNT),
    ]


_MLP_WIDTHS: dict[DatasetId, tuple[int, ...]] = {
    DatasetId.mnist_digit: (128, 512, 1024, 128),
    DatasetId.mnist_fashion: (128, 512, 1024, 512),
    DatasetId.cifar10: (256, 512, 1024, 512),
}

_CNN_BUILDERS = {
    DatasetId.mnist_digit: _mnist_digit_cnn,
    DatasetId.mnist_fashion: _mnist_fashion_cnn,
    DatasetId.cifar10: _cifar10_cnn,
}


def mlp_spec(widths: tuple[int, ...], class_count: int = CLASS_COUNT) -> NetworkSpec:
    """Dense stack widths[0] -> ... -> widths[-1] -> class_count with ReLU between hidden layers."""
    layers: list[LayerSpec] = []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        layers += [dense(w_in, w_out), relu()]
    layers.append(dense(widths[-1], class_count))
    spec = NetworkSpec(layers=tuple(layers), input_shape=(widths[0],), class_count=class_count)
    shape_check(spec)
    return spec


def build_architecture(dataset_id: DatasetId | str, kind: NetworkKind | str) -> NetworkSpec:
    dataset_id = DatasetId(dataset_id)
    kind = NetworkKind(kind)
    if kind == NetworkKind.mlp:
        return mlp_spec(_MLP_WIDTHS[dataset_id])

    spec = NetworkSpec(
        layers=tuple(_CNN_BUILDERS[dataset_id]()),
        input_shape=INPUT_SHAPES[dataset_id],
        class_count=CLASS_COUNT,
    )
    shape_check(spec)
    logger.debug("Built %s %s with %d layers", dataset_id.value, kind.value, len(spec.layers))
    return spec


def _conv_out(n: int, layer: LayerSpec) -> int:
    return (n + 2 * layer.padding - layer.kernel_size) // layer.stride + 1


def shape_check(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Propagate shapes through the stack; returns each layer's output shape (without batch dim)."""
    shape = tuple(spec.input_shape)
    shapes: list[tuple[int, ...]] = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv2d":
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ValueError(f"Layer {i} (conv2d) expects {layer.in_channels} channels, got input {shape}")
            _, h, w = shape
            shape = (layer.out_channels, _conv_out(h, layer), _conv_out(w, layer))
        elif layer.kind == "maxpool2d":
            if len(shape) != 3:
                raise ValueError(f"Layer {i} (maxpool2d) needs a C x H x W input, got {shape}")
            c, h, w = shape
            shape = (c, (h - layer.kernel_size) // layer.stride + 1, (w - layer.kernel_size) // layer.stride + 1)
        elif layer.kind == "flatten":
            shape = (math.prod(shape),)
        elif layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise ValueError(
                    f"Layer {i} (dense) declares {layer.in_features} inputs but receives {shape}"
                )
            shape = (layer.out_features,)
        if any(d < 1 for d in shape):
            raise ValueError(f"Layer {i} ({layer.kind}) produces empty output {shape}")
        shapes.append(shape)

    if shape != (spec.class_count,):
        raise ValueError(f"Network output {shape} does not match class count {spec.class_count}")
    return shapes


def final_dense_index(spec: NetworkSpec) -> int:
    for i in range(len(spec.layers) - 1, -1, -1):
        if spec.layers[i].kind == "dense":
            return i
    raise ValueError("Network has no dense layer")


def penultimate_width(spec: NetworkSpec) -> int:
    return spec.layers[final_dense_index(spec)].in_features
