import math

import pytest
import torch

from advdetect.exceptions import DataFormatError
from advdetect.schemas.attack import AttackConfig, AttackName
from advdetect.services import attack_service, nn_service
from advdetect.utils.seeding import make_generator
from tests.conftest import linear_checkpoint


def _logistic_toy():
    # class 1 logit = 2x, class 0 logit = 0
    return linear_checkpoint([[0.0], [2.0]], [0.0, 0.0])


def _margin_toy(margin: float = 0.2):
    """4-d input at 0.5: class 0 wins by ``margin``; w = z1 - z0 gradient is all ones."""
    return linear_checkpoint(
        [[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]],
        [2.0 + margin, 0.0],
    )


# ---------------------------------------------------------------------------
# Gradient-sign attacks
# ---------------------------------------------------------------------------
def test_fgsm_steps_against_the_gradient_sign():
    out = attack_service.fgsm(_logistic_toy(), torch.tensor([[0.3]], dtype=torch.float64), [1], 0.1)
    assert float(out.x_adv[0, 0]) == pytest.approx(0.2)
    assert float(out.final_linf[0]) == pytest.approx(0.1)
    assert out.iterations_used.tolist() == [1]


def test_fgsm_zero_eps_is_identity(tiny_ckpt, tiny_inputs):
    labels = nn_service.predict(tiny_ckpt, tiny_inputs)
    out = attack_service.fgsm(tiny_ckpt, tiny_inputs, labels, 0.0)
    assert torch.equal(out.x_adv, tiny_inputs)
    assert not out.success.any()


def test_bim_single_full_step_equals_fgsm(tiny_ckpt, tiny_inputs):
    labels = torch.tensor([0, 1, 2, 0])
    a = attack_service.fgsm(tiny_ckpt, tiny_inputs, labels, 0.2)
    b = attack_service.bim(tiny_ckpt, tiny_inputs, labels, 0.2, alpha=0.2, iters=1)
    assert torch.equal(a.x_adv, b.x_adv)
    assert torch.equal(a.success, b.success)


@pytest.mark.parametrize("attack", ["fgsm", "bim", "pgd", "deepfool"])
def test_linf_attacks_respect_budget_and_box(tiny_ckpt, tiny_inputs, attack):
    labels = nn_service.predict(tiny_ckpt, tiny_inputs)
    eps = 0.3
    if attack == "fgsm":
        out = attack_service.fgsm(tiny_ckpt, tiny_inputs, labels, eps)
    elif attack == "bim":
        out = attack_service.bim(tiny_ckpt, tiny_inputs, labels, eps, 0.03, 10)
    elif attack == "pgd":
        out = attack_service.pgd(tiny_ckpt, tiny_inputs, labels, eps, 0.03, 10, make_generator(0, "pgd"))
    else:
        out = attack_service.deepfool(tiny_ckpt, tiny_inputs, eps)

    assert float(out.final_linf.max()) <= eps + 1e-9
    assert float((out.x_adv - tiny_inputs).abs().max()) <= eps + 1e-9
    assert float(out.x_adv.min()) >= 0.0 and float(out.x_adv.max()) <= 1.0
    assert out.x_adv.shape == tiny_inputs.shape


@pytest.mark.parametrize("attack", list(AttackName))
@pytest.mark.parametrize("case", range(10))
def test_attacks_stay_in_budget_and_box_on_random_inputs(tiny_ckpt, attack, case):
    gen = torch.Generator().manual_seed(300 + case)
    x = torch.rand((5, 1, 6, 6), generator=gen, dtype=torch.float64)
    # saturated pixels make the box projection bind
    x[0, 0, :2] = 0.0
    x[1, 0, -2:] = 1.0
    eps = float(torch.rand((), generator=gen)) * 0.5
    labels = nn_service.predict(tiny_ckpt, x)
    cfg = AttackConfig(attack=attack, eps=eps, iters=10 if attack == AttackName.cw else None, binary_steps=2, seed=case)

    out = attack_service.run_attack(tiny_ckpt, x, labels, cfg, chunk_size=2)

    assert out.x_adv.shape == x.shape
    assert float(out.x_adv.min()) >= 0.0 and float(out.x_adv.max()) <= 1.0
    if attack == AttackName.cw:
        assert float(out.final_l2.max()) <= attack_service.linf_to_l2(eps, 36) + 1e-9
    else:
        assert float((out.x_adv - x).abs().max()) <= eps + 1e-9
        assert float(out.final_linf.max()) <= eps + 1e-9


def test_pgd_zero_eps_is_identity(tiny_ckpt, tiny_inputs):
    out = attack_service.pgd(tiny_ckpt, tiny_inputs, 0, 0.0, 0.01, 5, make_generator(1, "pgd"))
    assert torch.equal(out.x_adv, tiny_inputs)


def test_pgd_random_start_stays_in_ball(tiny_inputs):
    start = attack_service._uniform_start(tiny_inputs, 0.1, make_generator(2, "pgd"))
    assert float((start - tiny_inputs).abs().max()) <= 0.1 + 1e-12
    assert not torch.equal(start, tiny_inputs)


def test_pgd_is_deterministic_per_seed(tiny_ckpt, tiny_inputs):
    labels = torch.tensor([1, 1, 0, 2])
    a = attack_service.pgd(tiny_ckpt, tiny_inputs, labels, 0.2, 0.02, 5, make_generator(3, "pgd"))
    b = attack_service.pgd(tiny_ckpt, tiny_inputs, labels, 0.2, 0.02, 5, make_generator(3, "pgd"))
    c = attack_service.pgd(tiny_ckpt, tiny_inputs, labels, 0.2, 0.02, 5, make_generator(4, "pgd"))
    assert torch.equal(a.x_adv, b.x_adv)
    assert not torch.equal(a.x_adv, c.x_adv)


def test_attack_rejects_out_of_box_inputs(tiny_ckpt, tiny_inputs):
    with pytest.raises(ValueError):
        attack_service.fgsm(tiny_ckpt, tiny_inputs + 1.0, 0, 0.1)
    with pytest.raises(ValueError):
        attack_service.fgsm(tiny_ckpt, tiny_inputs, 0, -0.1)


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------
def test_deepfool_flips_linear_model_in_one_step():
    ckpt = _margin_toy(0.2)
    x = torch.full((1, 4), 0.5, dtype=torch.float64)
    out = attack_service.deepfool(ckpt, x, eps=0.1)

    assert out.success.tolist() == [True]
    assert out.iterations_used.tolist() == [1]
    # |g| / ||w||_1 = 0.2 / 4 per coordinate, plus the nudge and overshoot
    expected = (0.05 + 1e-4) * 1.02
    assert torch.allclose(out.x_adv - x, torch.full_like(x, expected))


def test_deepfool_on_boundary_flips_immediately():
    ckpt = linear_checkpoint([[0.0], [2.0]], [1.0, 0.0])
    x = torch.tensor([[0.5]], dtype=torch.float64)
    out = attack_service.deepfool(ckpt, x, eps=0.1)
    assert out.success.tolist() == [True]
    assert int(out.iterations_used[0]) <= 1


def test_deepfool_projection_can_undo_success():
    ckpt = _margin_toy(0.2)
    x = torch.full((1, 4), 0.5, dtype=torch.float64)
    out = attack_service.deepfool(ckpt, x, eps=0.01)
    assert out.success.tolist() == [False]
    assert float(out.final_linf[0]) == pytest.approx(0.01)


# ---------------------------------------------------------------------------
# Carlini-Wagner
# ---------------------------------------------------------------------------
def test_linf_to_l2_conversion():
    assert attack_service.linf_to_l2(0.0, 784) == 0.0
    assert attack_service.linf_to_l2(0.30, 784) == pytest.approx(4.065, abs=1e-3)
    assert attack_service.linf_to_l2(0.02, 3072) == pytest.approx(0.5365, abs=1e-4)
    with pytest.raises(ValueError):
        attack_service.linf_to_l2(0.1, 0)


def test_cw_matches_linear_oracle():
    ckpt = _margin_toy(1.0)
    x = torch.full((1, 4), 0.5, dtype=torch.float64)
    out = attack_service.carlini_wagner(ckpt, x, [0], l2_budget=10.0)

    oracle = 1.0 / math.sqrt(4.0)
    assert out.success.tolist() == [True]
    assert float(out.final_l2[0]) == pytest.approx(oracle, rel=0.05)
    assert int(nn_service.predict(ckpt, out.x_adv)[0]) == 1


def test_cw_infeasible_reports_failure():
    ckpt = _margin_toy(50.0)
    x = torch.full((1, 4), 0.5, dtype=torch.float64)
    cfg = AttackConfig(attack="cw", eps=0.1, iters=1, binary_steps=1)
    out = attack_service.carlini_wagner(ckpt, x, [0], l2_budget=0.05, cfg=cfg)
    assert out.success.tolist() == [False]
    assert float(out.final_l2[0]) <= 0.05 + 1e-12
    assert int(out.iterations_used[0]) == 1


def test_cw_rescales_to_budget():
    ckpt = _margin_toy(1.0)
    x = torch.full((1, 4), 0.5, dtype=torch.float64)
    out = attack_service.carlini_wagner(ckpt, x, [0], l2_budget=0.1)
    assert float(out.final_l2[0]) == pytest.approx(0.1)
    assert out.success.tolist() == [False]


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------
def test_run_attack_is_chunk_independent(tiny_ckpt, tiny_inputs):
    labels = nn_service.predict(tiny_ckpt, tiny_inputs)
    cfg = AttackConfig(attack="pgd", eps=0.2, iters=3, seed=5)
    whole = attack_service.run_attack(tiny_ckpt, tiny_inputs, labels, cfg, sample_ids=[10, 11, 12, 13], chunk_size=4)
    split = attack_service.run_attack(tiny_ckpt, tiny_inputs, labels, cfg, sample_ids=[10, 11, 12, 13], chunk_size=1)
    assert torch.allclose(whole.x_adv, split.x_adv, atol=1e-12)
    assert torch.equal(whole.success, split.success)


def test_run_attack_dispatches_cw_with_converted_budget(tiny_ckpt, tiny_inputs):
    labels = nn_service.predict(tiny_ckpt, tiny_inputs)
    cfg = AttackConfig(attack=AttackName.cw, eps=0.05, iters=5, binary_steps=2)
    out = attack_service.run_attack(tiny_ckpt, tiny_inputs, labels, cfg)
    budget = attack_service.linf_to_l2(0.05, 36)
    assert float(out.final_l2.max()) <= budget + 1e-9


def test_run_attack_on_empty_batch(tiny_ckpt):
    empty = torch.zeros((0, 1, 6, 6), dtype=torch.float64)
    out = attack_service.run_attack(tiny_ckpt, empty, torch.zeros(0, dtype=torch.long), AttackConfig(attack="fgsm", eps=0.1))
    assert out.x_adv.shape == (0, 1, 6, 6)
    assert out.success_rate == 0.0


def test_crafted_set_roundtrip(tmp_path, tiny_ckpt, tiny_inputs):
    labels = torch.tensor([2, 0, 1, 1])
    cfg = AttackConfig(attack="bim", eps=0.1)
    out = attack_service.run_attack(tiny_ckpt, tiny_inputs, labels, cfg)
    records = attack_service.craft_records(out, [4, 7, 9, 15], cfg)
    path = tmp_path / "crafted.advd"
    attack_service.write_crafted(path, out, records, labels)

    x_adv, loaded_labels, loaded_records = attack_service.read_crafted(path)
    assert torch.equal(x_adv, out.x_adv)
    assert loaded_labels.tolist() == [2, 0, 1, 1]
    assert [r.source_index for r in loaded_records] == [4, 7, 9, 15]
    assert loaded_records == records


def test_read_crafted_rejects_other_artifacts(tmp_path, tiny_ckpt):
    path = tmp_path / "ckpt.advd"
    nn_service.checkpoint_roundtrip(tiny_ckpt, path)
    with pytest.raises(DataFormatError):
        attack_service.read_crafted(path)


def test_attack_config_defaults():
    assert AttackConfig(attack="bim", eps=0.3).step_size == pytest.approx(0.03)
    assert AttackConfig(attack="pgd", eps=0.3).iterations == 20
    assert AttackConfig(attack="deepfool", eps=0.3).iterations == 50
    with pytest.raises(ValueError):
        AttackConfig(attack="bim", eps=0.3, alpha=0.0)
    with pytest.raises(ValueError):
        AttackConfig(attack="fgsm", eps=-0.1)
