"""Functional evaluation, gradients and Adam training for checkpointed networks.

Weights live in a plain name -> tensor map (``"<layer index>.weight"``); every pass
walks the NetworkSpec layer list with ``torch.nn.functional`` kernels so dropout
masks can be drawn from an explicit generator and replayed exactly.
"""
import logging
import pathlib
from typing import Literal

import torch
import torch.nn.functional as F

from advdetect.config import settings
from advdetect.exceptions import DataFormatError
from advdetect.models.checkpoint import AdamState, Checkpoint, load_checkpoint, save_checkpoint
from advdetect.models.results import ActivationTrace
from advdetect.schemas.network import EpochStats, NetworkSpec, TrainHyper, TrainMeta
from advdetect.services.architecture_service import final_dense_index
from advdetect.utils.seeding import make_generator

logger = logging.getLogger(__name__)

DropoutMode = Literal["off", "sample"]

DTYPE = torch.float64


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------
def init_checkpoint(
    spec: NetworkSpec,
    rng: torch.Generator,
    dataset_id: str = "",
    kind: str = "",
    seed: int = 0,
) -> Checkpoint:
    """Kaiming-uniform (fan-in) weights, zero biases, fresh Adam state."""
    weights: dict[str, torch.Tensor] = {}
    for name, shape in spec.weight_shapes().items():
        tensor = torch.empty(shape, dtype=DTYPE)
        if name.endswith(".weight"):
            torch.nn.init.kaiming_uniform_(tensor, mode="fan_in", nonlinearity="relu", generator=rng)
        else:
            tensor.zero_()
        weights[name] = tensor
    return Checkpoint(
        spec=spec,
        weights=weights,
        train_meta=TrainMeta(dataset_id=dataset_id, kind=kind, epochs_completed=0, seed=seed),
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------
def _check_batch(spec: NetworkSpec, batch: torch.Tensor) -> torch.Tensor:
    if tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(
            f"Batch shape {tuple(batch.shape)} does not match network input (N, {', '.join(map(str, spec.input_shape))})"
        )
    batch = batch.to(DTYPE)
    if not torch.isfinite(batch).all():
        raise ValueError("Batch contains NaN or Inf")
    return batch


def _run_layers(
    spec: NetworkSpec,
    weights: dict[str, torch.Tensor],
    x: torch.Tensor,
    dropout_mode: DropoutMode = "off",
    rng: torch.Generator | None = None,
    masks: dict[int, torch.Tensor] | None = None,
    keep_outputs: bool = True,
) -> ActivationTrace:
    last_dense = final_dense_index(spec)
    inputs = x
    outputs: list[torch.Tensor] = []
    used_masks: dict[int, torch.Tensor] = {}
    penultimate = x

    for i, layer in enumerate(spec.layers):
        if i == last_dense:
            penultimate = x
        if layer.kind == "conv2d":
            x = F.conv2d(x, weights[f"{i}.weight"], weights[f"{i}.bias"], stride=layer.stride, padding=layer.padding)
        elif layer.kind == "maxpool2d":
            x = F.max_pool2d(x, kernel_size=layer.kernel_size, stride=layer.stride)
        elif layer.kind == "relu":
            x = F.relu(x)
        elif layer.kind == "flatten":
            x = x.flatten(1)
        elif layer.kind == "dense":
            x = F.linear(x, weights[f"{i}.weight"], weights[f"{i}.bias"])
        elif layer.kind == "dropout":
            if masks is not None and i in masks:
                mask = masks[i]
            elif dropout_mode == "sample" and layer.p > 0:
                if rng is None:
                    raise ValueError("dropout_mode='sample' needs an rng")
                mask = (torch.rand(x.shape, generator=rng, dtype=DTYPE) >= layer.p).to(DTYPE)
            else:
                mask = None
            if mask is not None:
                # inverted dropout: off-mode needs no rescaling
                x = x * mask / (1.0 - layer.p)
                used_masks[i] = mask
        if keep_outputs:
            outputs.append(x)

    return ActivationTrace(
        inputs=inputs,
        layer_outputs=outputs,
        penultimate=penultimate,
        logits=x,
        dropout_masks=used_masks,
    )


def forward(
    ckpt: Checkpoint,
    batch: torch.Tensor,
    dropout_mode: DropoutMode = "off",
    rng: torch.Generator | None = None,
    keep_outputs: bool = True,
) -> ActivationTrace:
    batch = _check_batch(ckpt.spec, batch)
    with torch.no_grad():
        return _run_layers(ckpt.spec, ckpt.weights, batch, dropout_mode, rng, keep_outputs=keep_outputs)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis; torch subtracts the row max before exponentiating."""
    return torch.softmax(logits.to(DTYPE), dim=-1)


def _as_labels(labels, batch_size: int, class_count: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.numel() == 1 and batch_size > 1:
        labels = labels.expand(batch_size)
    if labels.numel() != batch_size:
        raise ValueError(f"Got {labels.numel()} labels for a batch of {batch_size}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(f"Label out of range [0, {class_count})")
    return labels


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def differentiable_logits(ckpt: Checkpoint, x: torch.Tensor) -> torch.Tensor:
    """Dropout-off logits that keep the autograd graph back to ``x``."""
    return _run_layers(ckpt.spec, ckpt.weights, x, keep_outputs=False).logits


def _input_gradient(ckpt: Checkpoint, inputs: torch.Tensor, labels, masks: dict[int, torch.Tensor]) -> torch.Tensor:
    labels = _as_labels(labels, inputs.shape[0], ckpt.spec.class_count)
    x = inputs.detach().clone().requires_grad_(True)
    replay = _run_layers(ckpt.spec, ckpt.weights, x, masks=masks, keep_outputs=False)
    # summed loss: each sample's gradient is its own loss gradient
    loss = F.cross_entropy(replay.logits, labels, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def input_gradient(ckpt: Checkpoint, trace: ActivationTrace, true_label) -> torch.Tensor:
    """d(cross-entropy)/d(input) per sample, replaying the trace's dropout masks."""
    return _input_gradient(ckpt, trace.inputs, true_label, trace.dropout_masks)


def loss_gradient(ckpt: Checkpoint, x: torch.Tensor, labels) -> torch.Tensor:
    """Input gradient of the deterministic (dropout-off) model, the attack surrogate."""
    return _input_gradient(ckpt, _check_batch(ckpt.spec, x), labels, {})


def param_gradients(ckpt: Checkpoint, trace: ActivationTrace, labels) -> dict[str, torch.Tensor]:
    """Gradients of the batch-mean cross-entropy w.r.t. every trainable weight."""
    labels = _as_labels(labels, trace.inputs.shape[0], ckpt.spec.class_count)
    params = {name: w.detach().clone().requires_grad_(True) for name, w in ckpt.weights.items()}
    replay = _run_layers(ckpt.spec, params, trace.inputs.detach(), masks=trace.dropout_masks, keep_outputs=False)
    loss = F.cross_entropy(replay.logits, labels, reduction="mean")
    grads = torch.autograd.grad(loss, list(params.values()))
    return dict(zip(params.keys(), grads))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
def _load_adam_state(
    opt: torch.optim.Adam,
    names: list[str],
    params: list[torch.Tensor],
    state: AdamState,
) -> None:
    if state.step == 0:
        return
    for name, param in zip(names, params):
        if name not in state.exp_avg or name not in state.exp_avg_sq:
            raise ValueError(f"Adam state has no moments for '{name}'")
        opt.state[param] = {
            "step": torch.tensor(float(state.step), dtype=torch.float32),
            "exp_avg": state.exp_avg[name].detach().clone().to(DTYPE),
            "exp_avg_sq": state.exp_avg_sq[name].detach().clone().to(DTYPE),
        }


def _export_adam_state(opt: torch.optim.Adam, names: list[str], params: list[torch.Tensor]) -> AdamState:
    exp_avg: dict[str, torch.Tensor] = {}
    exp_avg_sq: dict[str, torch.Tensor] = {}
    step = 0
    for name, param in zip(names, params):
        state = opt.state.get(param)
        if not state:
            continue
        step = int(state["step"].item())
        exp_avg[name] = state["exp_avg"].detach().clone()
        exp_avg_sq[name] = state["exp_avg_sq"].detach().clone()
    return AdamState(step=step, exp_avg=exp_avg, exp_avg_sq=exp_avg_sq)


def adam_step(
    weights: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update; returns new weights and state, inputs untouched."""
    names = list(weights)
    params = [weights[name].detach().clone().to(DTYPE).requires_grad_(True) for name in names]
    opt = torch.optim.Adam(params, lr=lr, betas=(beta1, beta2), eps=eps)
    _load_adam_state(opt, names, params, state)
    for name, param in zip(names, params):
        grad = grads[name]
        if tuple(grad.shape) != tuple(param.shape):
            raise ValueError(f"Gradient for '{name}' has shape {tuple(grad.shape)}, weight is {tuple(param.shape)}")
        param.grad = grad.detach().clone().to(DTYPE)
    opt.step()
    return {name: param.detach() for name, param in zip(names, params)}, _export_adam_state(opt, names, params)


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------
def logits_of(ckpt: Checkpoint, inputs: torch.Tensor, chunk_size: int | None = None) -> torch.Tensor:
    chunk_size = chunk_size or settings.CHUNK_SIZE
    if inputs.shape[0] == 0:
        return torch.empty((0, ckpt.spec.class_count), dtype=DTYPE)
    parts = [
        forward(ckpt, inputs[start:start + chunk_size], keep_outputs=False).logits
        for start in range(0, inputs.shape[0], chunk_size)
    ]
    return torch.cat(parts)


def predict(ckpt: Checkpoint, inputs: torch.Tensor, chunk_size: int | None = None) -> torch.Tensor:
    """Deterministic (dropout-off) class predictions."""
    return logits_of(ckpt, inputs, chunk_size).argmax(dim=1)


def evaluate_accuracy(ckpt: Checkpoint, inputs: torch.Tensor, labels: torch.Tensor, chunk_size: int | None = None) -> float:
    if inputs.shape[0] == 0:
        return 0.0
    return float((predict(ckpt, inputs, chunk_size) == labels).double().mean())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
def train_classifier(
    spec: NetworkSpec,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    hyper: TrainHyper,
    seed: int,
    dataset_id: str = "",
    kind: str = "",
    init: Checkpoint | None = None,
    eval_set: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Mini-batch Adam on softmax cross-entropy with dropout active.

    Shuffling, initialization and dropout each draw from their own stream of
    ``seed``, so a rerun with the same seed is bit-identical.
    """
    if inputs.shape[0] == 0:
        raise DataFormatError("Cannot train on an empty dataset")
    inputs = _check_batch(spec, inputs)
    labels = _as_labels(labels, inputs.shape[0], spec.class_count)

    ckpt = init or init_checkpoint(spec, make_generator(seed, "init"), dataset_id=dataset_id, kind=kind, seed=seed)
    if hyper.epochs == 0:
        return ckpt, []

    shuffle_rng = make_generator(seed, "shuffle", ckpt.train_meta.epochs_completed)
    dropout_rng = make_generator(seed, "dropout", ckpt.train_meta.epochs_completed)

    names = list(ckpt.weights)
    params = [ckpt.weights[name].detach().clone().requires_grad_(True) for name in names]
    weights = dict(zip(names, params))
    opt = torch.optim.Adam(params, lr=hyper.lr, betas=(hyper.beta1, hyper.beta2), eps=hyper.eps)
    _load_adam_state(opt, names, params, ckpt.adam_state)

    n = inputs.shape[0]
    history: list[EpochStats] = []
    for epoch in range(hyper.epochs):
        order = torch.randperm(n, generator=shuffle_rng)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            trace = _run_layers(spec, weights, inputs[idx], "sample", dropout_rng, keep_outputs=False)
            loss = F.cross_entropy(trace.logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * idx.numel()
            correct += int((trace.logits.detach().argmax(dim=1) == labels[idx]).sum())

        stats = EpochStats(epoch=ckpt.train_meta.epochs_completed + epoch + 1, loss=loss_sum / n, train_accuracy=correct / n)
        if eval_set is not None:
            snapshot = Checkpoint(spec=spec, weights={k: v.detach() for k, v in weights.items()})
            stats.test_accuracy = evaluate_accuracy(snapshot, *eval_set)
        history.append(stats)
        logger.info(
            "Epoch %d/%d: loss=%.4f train_acc=%.4f%s",
            epoch + 1, hyper.epochs, stats.loss, stats.train_accuracy,
            f" test_acc={stats.test_accuracy:.4f}" if stats.test_accuracy is not None else "",
        )

    meta = ckpt.train_meta.model_copy(update={
        "dataset_id": dataset_id or ckpt.train_meta.dataset_id,
        "kind": kind or ckpt.train_meta.kind,
        "epochs_completed": ckpt.train_meta.epochs_completed + hyper.epochs,
        "seed": seed,
    })
    trained = Checkpoint(
        spec=spec,
        weights={name: param.detach().clone() for name, param in zip(names, params)},
        adam_state=_export_adam_state(opt, names, params),
        train_meta=meta,
    )
    return trained, history


def checkpoint_roundtrip(ckpt: Checkpoint, path: str | pathlib.Path) -> Checkpoint:
    save_checkpoint(ckpt, path)
    return load_checkpoint(path)
