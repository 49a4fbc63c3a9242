import pytest
import torch

from advdetect.exceptions import DataFormatError
from advdetect.models.checkpoint import AdamState, Checkpoint
from advdetect.schemas.network import NetworkSpec, TrainHyper, conv, dense, dropout, flatten, maxpool, relu
from advdetect.services import nn_service
from advdetect.utils.seeding import make_generator


def _finite_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat = grad.view(-1)
    for j in range(x.numel()):
        step = torch.zeros_like(x).view(-1)
        step[j] = h
        step = step.view_as(x)
        flat[j] = (fn(x + step) - fn(x - step)) / (2 * h)
    return grad


def _loss(ckpt, x, labels, masks, reduction):
    logits = nn_service._run_layers(ckpt.spec, ckpt.weights, x, masks=masks, keep_outputs=False).logits
    return float(torch.nn.functional.cross_entropy(logits, labels, reduction=reduction))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------
def test_forward_shapes_and_penultimate(tiny_ckpt, tiny_inputs):
    trace = nn_service.forward(tiny_ckpt, tiny_inputs)
    assert trace.logits.shape == (4, 3)
    assert trace.penultimate.shape == (4, 5)
    assert len(trace.layer_outputs) == len(tiny_ckpt.spec.layers)
    assert trace.dropout_masks == {}


def test_forward_rejects_wrong_shape(tiny_ckpt):
    with pytest.raises(ValueError):
        nn_service.forward(tiny_ckpt, torch.zeros((2, 1, 5, 5), dtype=torch.float64))


def test_forward_rejects_nan(tiny_ckpt, tiny_inputs):
    bad = tiny_inputs.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        nn_service.forward(tiny_ckpt, bad)


def test_sampled_forward_is_reproducible(tiny_ckpt, tiny_inputs):
    a = nn_service.forward(tiny_ckpt, tiny_inputs, "sample", make_generator(3, "mc"))
    b = nn_service.forward(tiny_ckpt, tiny_inputs, "sample", make_generator(3, "mc"))
    assert torch.equal(a.logits, b.logits)
    assert set(a.dropout_masks) == {3}


def test_sample_mode_requires_rng(tiny_ckpt, tiny_inputs):
    with pytest.raises(ValueError):
        nn_service.forward(tiny_ckpt, tiny_inputs, "sample")


def test_dropout_keep_rate_and_inverted_scaling():
    spec = NetworkSpec(layers=(flatten(), dropout(0.3), dense(36, 2)), input_shape=(1, 6, 6), class_count=2)
    ckpt = nn_service.init_checkpoint(spec, make_generator(0, "init"))
    x = torch.rand((1, 1, 6, 6), generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    batch = x.expand(2800, 1, 6, 6)

    trace = nn_service.forward(ckpt, batch, "sample", make_generator(0, "dropout"))
    mask = trace.dropout_masks[1]
    assert mask.numel() >= 100_000
    assert float(mask.mean()) == pytest.approx(0.7, abs=0.01)

    dropped = trace.layer_outputs[1]
    kept = mask.bool()
    assert torch.allclose(dropped[kept], (batch.flatten(1) / 0.7)[kept])
    assert torch.all(dropped[~kept] == 0)
    # kept units are scaled up so the expectation matches the dropout-off pass
    assert torch.allclose(dropped.mean(0), x.flatten(), atol=0.06)
    assert float(dropped.mean()) == pytest.approx(float(x.mean()), abs=0.01)


def test_softmax_is_stable_for_large_logits():
    probs = nn_service.softmax(torch.tensor([[1000.0, 0.0, -1000.0], [5.0, 5.0, 5.0]], dtype=torch.float64))
    assert torch.isfinite(probs).all()
    assert probs[0, 0] == pytest.approx(1.0)
    assert torch.allclose(probs[1], torch.full((3,), 1 / 3, dtype=torch.float64))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(analytic.norm() + numeric.norm()), 1e-8)
    return float((analytic - numeric).norm()) / scale


def _random_case(case: int):
    """Small conv net with a random shape, perturbed biases and a sampled dropout mask."""
    gen = torch.Generator().manual_seed(1000 + case)
    channels = 1 + case % 2
    filters = 2 + case % 3
    hidden = 3 + case % 4
    k = 2 + case % 3
    spec = NetworkSpec(
        layers=(
            conv(channels, filters), relu(),
            maxpool(2),
            dropout((0.0, 0.25, 0.5)[case % 3]),
            flatten(),
            dense(filters * 9, hidden), relu(),
            dense(hidden, k),
        ),
        input_shape=(channels, 6, 6),
        class_count=k,
    )
    init = nn_service.init_checkpoint(spec, gen)
    weights = {
        name: w + 0.1 * torch.randn(w.shape, generator=gen, dtype=torch.float64)
        for name, w in init.weights.items()
    }
    ckpt = Checkpoint(spec=spec, weights=weights)
    batch = 1 + case % 3
    x = torch.rand((batch, channels, 6, 6), generator=gen, dtype=torch.float64)
    labels = torch.randint(0, k, (batch,), generator=gen)
    trace = nn_service.forward(ckpt, x, "sample", gen)
    return ckpt, x, labels, trace


@pytest.mark.parametrize("case", range(50))
def test_input_gradient_matches_finite_differences(case):
    ckpt, x, labels, trace = _random_case(case)
    grad = nn_service.input_gradient(ckpt, trace, labels)

    numeric = _finite_difference(lambda v: _loss(ckpt, v, labels, trace.dropout_masks, "sum"), x)
    assert _relative_error(grad, numeric) < 1e-4


@pytest.mark.parametrize("case", range(50))
def test_param_gradients_match_finite_differences(case):
    ckpt, x, labels, trace = _random_case(case)
    grads = nn_service.param_gradients(ckpt, trace, labels)
    assert set(grads) == set(ckpt.weights)

    for name, base in ckpt.weights.items():
        def loss_at(w, name=name):
            weights = {**ckpt.weights, name: w}
            logits = nn_service._run_layers(ckpt.spec, weights, x, masks=trace.dropout_masks, keep_outputs=False).logits
            return float(torch.nn.functional.cross_entropy(logits, labels))

        numeric = _finite_difference(loss_at, base)
        assert _relative_error(grads[name], numeric) < 1e-4, name

def test_loss_gradient_uses_deterministic_model(tiny_ckpt, tiny_inputs):
    labels = torch.tensor([0, 0, 1, 2])
    trace = nn_service.forward(tiny_ckpt, tiny_inputs)
    assert torch.equal(
        nn_service.loss_gradient(tiny_ckpt, tiny_inputs, labels),
        nn_service.input_gradient(tiny_ckpt, trace, labels),
    )


def test_gradient_rejects_bad_labels(tiny_ckpt, tiny_inputs):
    with pytest.raises(ValueError):
        nn_service.loss_gradient(tiny_ckpt, tiny_inputs, torch.tensor([0, 1, 3, 0]))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
def test_adam_first_step_moves_by_lr():
    weights = {"w": torch.tensor([1.0], dtype=torch.float64)}
    grads = {"w": torch.tensor([0.5], dtype=torch.float64)}
    new_weights, state = nn_service.adam_step(weights, grads, AdamState(), lr=0.1)

    assert float(new_weights["w"]) == pytest.approx(0.9, abs=1e-6)
    assert state.step == 1
    assert float(state.exp_avg["w"]) == pytest.approx(0.05)
    assert float(state.exp_avg_sq["w"]) == pytest.approx(0.00025)
    assert float(weights["w"]) == 1.0


def test_adam_state_carries_over():
    weights = {"w": torch.tensor([1.0], dtype=torch.float64)}
    grads = {"w": torch.tensor([0.5], dtype=torch.float64)}
    w1, s1 = nn_service.adam_step(weights, grads, AdamState(), lr=0.1)
    w2, s2 = nn_service.adam_step(w1, grads, s1, lr=0.1)
    assert s2.step == 2
    # constant gradient: every bias-corrected step is ~lr
    assert float(w2["w"]) == pytest.approx(0.8, abs=1e-6)


def test_adam_rejects_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        nn_service.adam_step(
            {"w": torch.zeros(2, dtype=torch.float64)},
            {"w": torch.zeros(3, dtype=torch.float64)},
            AdamState(),
        )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
def _toy_problem():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand((200, 2), generator=gen, dtype=torch.float64)
    y = (x[:, 0] > x[:, 1]).long()
    spec = NetworkSpec(layers=(dense(2, 16), relu(), dense(16, 2)), input_shape=(2,), class_count=2)
    return spec, x, y


def test_train_classifier_learns_toy_problem():
    spec, x, y = _toy_problem()
    ckpt, history = nn_service.train_classifier(spec, x, y, TrainHyper(epochs=60, batch_size=20, lr=0.01), seed=1)
    assert nn_service.evaluate_accuracy(ckpt, x, y) >= 0.9
    assert len(history) == 60
    assert ckpt.train_meta.epochs_completed == 60
    assert ckpt.adam_state.step == 600


def test_train_classifier_is_deterministic():
    spec, x, y = _toy_problem()
    hyper = TrainHyper(epochs=3, batch_size=32, lr=0.01)
    a, _ = nn_service.train_classifier(spec, x, y, hyper, seed=4)
    b, _ = nn_service.train_classifier(spec, x, y, hyper, seed=4)
    for name in a.weights:
        assert torch.equal(a.weights[name], b.weights[name])


def test_zero_epochs_returns_initial_weights():
    spec, x, y = _toy_problem()
    ckpt, history = nn_service.train_classifier(spec, x, y, TrainHyper(epochs=0), seed=9)
    init = nn_service.init_checkpoint(spec, make_generator(9, "init"))
    assert history == []
    assert not ckpt.is_trained
    for name in init.weights:
        assert torch.equal(ckpt.weights[name], init.weights[name])


def test_train_rejects_empty_dataset():
    spec, _, _ = _toy_problem()
    with pytest.raises(DataFormatError):
        nn_service.train_classifier(
            spec, torch.zeros((0, 2), dtype=torch.float64), torch.zeros(0, dtype=torch.long), TrainHyper(), seed=0
        )


def test_checkpoint_roundtrip_preserves_predictions(tmp_path, tiny_ckpt, tiny_inputs):
    loaded = nn_service.checkpoint_roundtrip(tiny_ckpt, tmp_path / "cnn.advd")
    assert torch.equal(nn_service.logits_of(loaded, tiny_inputs), nn_service.logits_of(tiny_ckpt, tiny_inputs))
    assert loaded.train_meta == tiny_ckpt.train_meta
