"""Adversarial example crafting against the deterministic (dropout-off) model.

All attacks take a batch ``x`` (N x C x H x W in [0, 1]) and return per-sample
results in an AttackOutcome. L-inf attacks never leave the eps-ball of ``x`` and
the [0, 1] box; Carlini-Wagner is budgeted in L2 instead.
"""
import logging
import math
import pathlib
from collections.abc import Sequence

import torch
from tqdm import tqdm

from advdetect.config import settings
from advdetect.exceptions import DataFormatError
from advdetect.models.checkpoint import Checkpoint
from advdetect.models.results import AttackOutcome
from advdetect.schemas.attack import AttackConfig, AttackName, CraftRecord
from advdetect.services import nn_service
from advdetect.services.nn_service import DTYPE
from advdetect.storage import read_container, write_container
from advdetect.utils.seeding import make_generator

logger = logging.getLogger(__name__)

CRAFTED_KIND = "crafted"

_ATANH_SHRINK = 1.0 - 1e-6
_DEEPFOOL_NUDGE = 1e-4


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------
def _outcome(ckpt: Checkpoint, x: torch.Tensor, x_adv: torch.Tensor, reference: torch.Tensor, iterations) -> AttackOutcome:
    delta = (x_adv - x).flatten(1)
    success = nn_service.predict(ckpt, x_adv) != reference
    if not torch.is_tensor(iterations):
        iterations = torch.full((x.shape[0],), int(iterations), dtype=torch.long)
    return AttackOutcome(
        x_adv=x_adv,
        success=success,
        iterations_used=iterations,
        final_linf=delta.abs().amax(dim=1),
        final_l2=delta.norm(dim=1),
    )


def _project(x: torch.Tensor, candidate: torch.Tensor, eps: float) -> torch.Tensor:
    """Clip onto the eps-ball around x intersected with [0, 1]."""
    return torch.min(torch.max(candidate, x - eps), x + eps).clamp(0.0, 1.0)


def _sign_step(ckpt: Checkpoint, x: torch.Tensor, x_cur: torch.Tensor, y: torch.Tensor, step: float, eps: float) -> torch.Tensor:
    grad = nn_service.loss_gradient(ckpt, x_cur, y)
    return _project(x, x_cur + step * grad.sign(), eps)


def _labels(y_true, n: int) -> torch.Tensor:
    y = torch.as_tensor(y_true, dtype=torch.long).reshape(-1)
    if y.numel() == 1 and n != 1:
        y = y.expand(n)
    if y.numel() != n:
        raise ValueError(f"Got {y.numel()} labels for {n} samples")
    return y


def _prepare(ckpt: Checkpoint, x: torch.Tensor, eps: float) -> torch.Tensor:
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    x = x.detach().to(DTYPE)
    if tuple(x.shape[1:]) != tuple(ckpt.spec.input_shape):
        raise ValueError(f"Attack input {tuple(x.shape)} does not match network input {ckpt.spec.input_shape}")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValueError("Attack inputs must lie in [0, 1]")
    return x


# ---------------------------------------------------------------------------
# Gradient-sign attacks
# ---------------------------------------------------------------------------
def fgsm(ckpt: Checkpoint, x: torch.Tensor, y_true, eps: float) -> AttackOutcome:
    x = _prepare(ckpt, x, eps)
    y = _labels(y_true, x.shape[0])
    x_adv = _sign_step(ckpt, x, x, y, eps, eps)
    return _outcome(ckpt, x, x_adv, y, 1)


def bim(ckpt: Checkpoint, x: torch.Tensor, y_true, eps: float, alpha: float, iters: int) -> AttackOutcome:
    """Iterated FGSM that spends every iteration, even after the prediction flips."""
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    x = _prepare(ckpt, x, eps)
    y = _labels(y_true, x.shape[0])
    x_adv = x
    for _ in range(iters):
        x_adv = _sign_step(ckpt, x, x_adv, y, alpha, eps)
    return _outcome(ckpt, x, x_adv, y, iters)


def _uniform_start(x: torch.Tensor, eps: float, rng: torch.Generator | Sequence[torch.Generator]) -> torch.Tensor:
    if isinstance(rng, torch.Generator):
        noise = torch.rand(x.shape, generator=rng, dtype=DTYPE)
    else:
        if len(rng) != x.shape[0]:
            raise ValueError(f"Got {len(rng)} generators for {x.shape[0]} samples")
        noise = torch.stack([torch.rand(x.shape[1:], generator=g, dtype=DTYPE) for g in rng]) if len(rng) else torch.zeros_like(x)
    return (x + (2.0 * noise - 1.0) * eps).clamp(0.0, 1.0)


def pgd(
    ckpt: Checkpoint,
    x: torch.Tensor,
    y_true,
    eps: float,
    alpha: float,
    iters: int,
    rng: torch.Generator | Sequence[torch.Generator],
) -> AttackOutcome:
    """Projected gradient descent from a uniform random start inside the eps-ball.

    ``rng`` is either one generator for the whole batch or one per sample.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    x = _prepare(ckpt, x, eps)
    y = _labels(y_true, x.shape[0])
    x_adv = _uniform_start(x, eps, rng)
    for _ in range(iters):
        x_adv = _sign_step(ckpt, x, x_adv, y, alpha, eps)
    return _outcome(ckpt, x, x_adv, y, iters)


# ---------------------------------------------------------------------------
# DeepFool (L-inf)
# ---------------------------------------------------------------------------
def _logit_jacobian(ckpt: Checkpoint, x_single: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits (K,) and their input gradients (K x C x H x W) for one sample."""
    k = ckpt.spec.class_count
    rep = x_single.detach().expand(k, *x_single.shape[1:]).clone().requires_grad_(True)
    logits = nn_service.differentiable_logits(ckpt, rep)
    # row k of the replicated batch only feeds logit k into the sum
    (grad,) = torch.autograd.grad(logits.diagonal().sum(), rep)
    return logits[0].detach(), grad


def _deepfool_single(ckpt: Checkpoint, x: torch.Tensor, overshoot: float, max_iter: int) -> tuple[torch.Tensor, int, int]:
    logits, _ = _logit_jacobian(ckpt, x)
    label = int(logits.argmax())
    r_total = torch.zeros_like(x)
    x_cur = x
    current = label
    it = 0
    while current == label and it < max_iter:
        logits, jac = _logit_jacobian(ckpt, x_cur)
        w = jac - jac[label]
        f = logits - logits[label]
        norms = w.flatten(1).abs().sum(dim=1)
        pert = f.abs() / (norms + 1e-12)
        pert[label] = math.inf
        target = int(pert.argmin())
        r_total = r_total + (pert[target] + _DEEPFOOL_NUDGE) * w[target].sign().unsqueeze(0)
        x_cur = (x + (1.0 + overshoot) * r_total).clamp(0.0, 1.0)
        current = int(nn_service.predict(ckpt, x_cur)[0])
        it += 1
    return (1.0 + overshoot) * r_total, label, it


def deepfool(ckpt: Checkpoint, x: torch.Tensor, eps: float, overshoot: float = 0.02, max_iter: int = 50) -> AttackOutcome:
    """Untargeted DeepFool under the L-inf norm; the accumulated step is projected onto the eps-ball.

    Success is measured against each sample's original deterministic prediction.
    """
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    x = _prepare(ckpt, x, eps)
    adv, labels, iterations = [], [], []
    for i in tqdm(range(x.shape[0]), desc="deepfool", disable=not settings.PROGRESS, leave=False):
        r, label, it = _deepfool_single(ckpt, x[i:i + 1], overshoot, max_iter)
        adv.append(_project(x[i:i + 1], x[i:i + 1] + r, eps))
        labels.append(label)
        iterations.append(it)
    x_adv = torch.cat(adv) if adv else x.clone()
    return _outcome(
        ckpt, x, x_adv,
        torch.tensor(labels, dtype=torch.long),
        torch.tensor(iterations, dtype=torch.long),
    )


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------
def linf_to_l2(eps_inf: float, n: int) -> float:
    """L2 radius matching an L-inf budget: eps * sqrt(n) * sqrt(2 / (pi * e))."""
    if eps_inf < 0:
        raise ValueError(f"eps_inf must be >= 0, got {eps_inf}")
    if n < 1:
        raise ValueError(f"Input dimension must be >= 1, got {n}")
    return eps_inf * math.sqrt(n) * math.sqrt(2.0) / math.sqrt(math.pi * math.e)


def _margin(logits: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    real = logits[onehot]
    other = logits.masked_fill(onehot, -math.inf).amax(dim=1)
    return real - other


def carlini_wagner(
    ckpt: Checkpoint,
    x: torch.Tensor,
    y_true,
    l2_budget: float,
    cfg: AttackConfig | None = None,
) -> AttackOutcome:
    """Tanh-space L2 attack with a per-sample binary search on the loss constant c.

    Among successful iterates the minimal-L2 one is kept; samples that never
    succeed return the last iterate. Perturbations longer than ``l2_budget`` are
    shrunk radially and success is re-evaluated on the shrunk point.
    """
    cfg = cfg or AttackConfig(attack=AttackName.cw, eps=0.0)
    if l2_budget < 0:
        raise ValueError(f"l2_budget must be >= 0, got {l2_budget}")
    x = _prepare(ckpt, x, 0.0)
    n = x.shape[0]
    y = _labels(y_true, n)
    onehot = torch.nn.functional.one_hot(y, ckpt.spec.class_count).bool()
    kappa = cfg.confidence

    w0 = torch.atanh((2.0 * x - 1.0) * _ATANH_SHRINK)
    lower = torch.zeros(n, dtype=DTYPE)
    upper = torch.full((n,), 1e10, dtype=DTYPE)
    const = torch.full((n,), cfg.initial_c, dtype=DTYPE)
    best_l2 = torch.full((n,), math.inf, dtype=DTYPE)
    best_adv = x.clone()
    last_adv = x.clone()
    iterations = torch.zeros(n, dtype=torch.long)

    for outer in range(cfg.binary_steps):
        w = w0.clone().requires_grad_(True)
        opt = torch.optim.Adam([w], lr=cfg.cw_lr)
        round_success = torch.zeros(n, dtype=torch.bool)
        for _ in range(cfg.iterations):
            x_new = (torch.tanh(w) + 1.0) / 2.0
            logits = nn_service.differentiable_logits(ckpt, x_new)
            margin = _margin(logits, onehot)
            l2sq = (x_new - x).flatten(1).pow(2).sum(dim=1)
            loss = (l2sq + const * margin.clamp(min=-kappa)).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()

            with torch.no_grad():
                succeeded = margin.detach() < -kappa if kappa > 0 else logits.argmax(dim=1) != y
                l2 = l2sq.detach().sqrt()
                improved = succeeded & (l2 < best_l2)
                best_l2 = torch.where(improved, l2, best_l2)
                best_adv[improved] = x_new.detach()[improved]
                round_success |= succeeded
                last_adv = x_new.detach()
            iterations += 1

        upper = torch.where(round_success, torch.minimum(upper, const), upper)
        lower = torch.where(round_success, lower, torch.maximum(lower, const))
        bounded = upper < 1e9
        const = torch.where(bounded, (lower + upper) / 2.0, const * 10.0)
        logger.debug("CW round %d: %d/%d samples succeeded", outer + 1, int(round_success.sum()), n)

    found = torch.isfinite(best_l2)
    x_adv = torch.where(found.view(-1, *([1] * (x.dim() - 1))), best_adv, last_adv)

    delta = (x_adv - x).flatten(1)
    norms = delta.norm(dim=1)
    over = norms > l2_budget
    if over.any():
        scale = torch.where(over, l2_budget / norms.clamp(min=1e-300), torch.ones_like(norms))
        x_adv = (x + (x_adv - x) * scale.view(-1, *([1] * (x.dim() - 1)))).clamp(0.0, 1.0)
    return _outcome(ckpt, x, x_adv, y, iterations)


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------
def correctly_classified(ckpt: Checkpoint, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return nn_service.predict(ckpt, x) == y


def _concat(parts: list[AttackOutcome], x: torch.Tensor) -> AttackOutcome:
    if not parts:
        empty = torch.zeros(0, dtype=DTYPE)
        return AttackOutcome(
            x_adv=x.clone(),
            success=torch.zeros(0, dtype=torch.bool),
            iterations_used=torch.zeros(0, dtype=torch.long),
            final_linf=empty,
            final_l2=empty,
        )
    return AttackOutcome(
        x_adv=torch.cat([p.x_adv for p in parts]),
        success=torch.cat([p.success for p in parts]),
        iterations_used=torch.cat([p.iterations_used for p in parts]),
        final_linf=torch.cat([p.final_linf for p in parts]),
        final_l2=torch.cat([p.final_l2 for p in parts]),
    )


def run_attack(
    ckpt: Checkpoint,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: AttackConfig,
    sample_ids: Sequence[int] | None = None,
    chunk_size: int | None = None,
) -> AttackOutcome:
    """Dispatch on ``cfg.attack`` over fixed-size chunks.

    PGD random starts come from one ``pgd`` stream per sample id, so the result
    does not depend on the chunk size.
    """
    chunk_size = chunk_size or settings.CHUNK_SIZE
    n = x.shape[0]
    if sample_ids is None:
        sample_ids = range(n)
    if len(sample_ids) != n:
        raise ValueError(f"Got {len(sample_ids)} sample ids for {n} samples")
    y = torch.as_tensor(y, dtype=torch.long)

    parts: list[AttackOutcome] = []
    for start in tqdm(range(0, n, chunk_size), desc=cfg.attack.value, disable=not settings.PROGRESS, leave=False):
        xs = x[start:start + chunk_size]
        ys = y[start:start + chunk_size]
        if cfg.attack == AttackName.fgsm:
            out = fgsm(ckpt, xs, ys, cfg.eps)
        elif cfg.attack == AttackName.bim:
            out = bim(ckpt, xs, ys, cfg.eps, cfg.step_size, cfg.iterations)
        elif cfg.attack == AttackName.pgd:
            rngs = [make_generator(cfg.seed, "pgd", int(i)) for i in sample_ids[start:start + chunk_size]]
            out = pgd(ckpt, xs, ys, cfg.eps, cfg.step_size, cfg.iterations, rngs)
        elif cfg.attack == AttackName.deepfool:
            out = deepfool(ckpt, xs, cfg.eps, cfg.overshoot, cfg.iterations)
        else:
            budget = linf_to_l2(cfg.eps, math.prod(ckpt.spec.input_shape))
            out = carlini_wagner(ckpt, xs, ys, budget, cfg)
        parts.append(out)

    outcome = _concat(parts, x)
    if n and not bool(outcome.success.any()):
        logger.warning("%s at eps=%g fooled none of %d samples", cfg.attack.value, cfg.eps, n)
    logger.info(
        "%s eps=%g: success %.3f, mean L-inf %.4f, mean L2 %.4f over %d samples",
        cfg.attack.value, cfg.eps, outcome.success_rate,
        float(outcome.final_linf.mean()) if n else 0.0,
        float(outcome.final_l2.mean()) if n else 0.0, n,
    )
    return outcome


# ---------------------------------------------------------------------------
# Crafted-set persistence
# ---------------------------------------------------------------------------
def craft_records(outcome: AttackOutcome, source_indices: Sequence[int], cfg: AttackConfig) -> list[CraftRecord]:
    return [
        CraftRecord(
            source_index=int(idx),
            attack=cfg.attack,
            eps=cfg.eps,
            success=bool(outcome.success[i]),
            linf=float(outcome.final_linf[i]),
            l2=float(outcome.final_l2[i]),
        )
        for i, idx in enumerate(source_indices)
    ]


def write_crafted(path: str | pathlib.Path, outcome: AttackOutcome, records: list[CraftRecord], labels: torch.Tensor) -> None:
    metadata = {
        "kind": CRAFTED_KIND,
        "records": [record.model_dump(mode="json") for record in records],
    }
    write_container(path, metadata, {"x_adv": outcome.x_adv, "labels": labels.to(DTYPE)})


def read_crafted(path: str | pathlib.Path) -> tuple[torch.Tensor, torch.Tensor, list[CraftRecord]]:
    metadata, tensors = read_container(path)
    if metadata.get("kind") != CRAFTED_KIND:
        raise DataFormatError(f"{path} holds a '{metadata.get('kind')}' artifact, not a crafted set")
    try:
        records = [CraftRecord.model_validate(r) for r in metadata["records"]]
        x_adv = tensors["x_adv"]
        labels = tensors["labels"].round().to(torch.long)
    except (KeyError, ValueError) as e:
        raise DataFormatError(f"Invalid crafted set {path}: {e}") from e
    if len(records) != x_adv.shape[0]:
        raise DataFormatError(f"{path}: {len(records)} manifest rows for {x_adv.shape[0]} samples")
    return x_adv, labels, records
