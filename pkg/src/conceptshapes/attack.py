"""PGD and the masked adversarial concept attack.

Both attacks take sign-gradient steps on a single image, project onto the
L-infinity ball of radius epsilon around the original, and clamp to the
valid (normalized) pixel range. The concept attack additionally masks the
step so that pixels pushing any "sensitive" concept logit (one inside
[-gamma, gamma]) toward a prediction flip are scaled by beta; the attack
aborts the moment a binary concept prediction actually changes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch

import numpy as np

from . import ops
from .errors import ConceptShapesError, InvalidConfigError, UnsupportedVariantError
from .training import NORM_MEAN, NORM_STD

# Valid pixel range after the [0,1] -> normalized transform.
PIXEL_MIN = (0.0 - NORM_MEAN) / NORM_STD
PIXEL_MAX = (1.0 - NORM_MEAN) / NORM_STD

STATUS_SUCCESS = "success"
STATUS_CONCEPTS_CHANGED = "fail_concepts_changed"
STATUS_ALL_BETA_MASK = "fail_all_beta_mask"
STATUS_MAX_ITERATIONS = "fail_max_iterations"

# Sweep defaults.
ALPHA_GRID = (0.003, 0.001, 0.00075)
GAMMA_GRID = (0.1, 0.05, 0.01)
BETA_LINE = (0.1, 0.0, -0.1, -0.3, -0.5, -0.7, -1.0)
SEARCH_BETA = -0.3
DEFAULT_EPSILON = 1.0
DEFAULT_MAX_STEPS = 800
SEARCH_SAMPLES = 200


class NotEligibleError(ConceptShapesError):
    """The model does not predict the true class on the original image."""


@dataclass(frozen=True)
class AttackConfig:
    alpha: float
    gamma: float = 0.1
    beta: float = -0.3
    epsilon: float = DEFAULT_EPSILON
    max_steps: int = DEFAULT_MAX_STEPS
    x_min: float = PIXEL_MIN
    x_max: float = PIXEL_MAX

    def __post_init__(self):
        if self.alpha <= 0:
            raise InvalidConfigError("alpha must be positive")
        if self.gamma < 0:
            raise InvalidConfigError("gamma must be nonnegative")
        # The nominal range is [-1, 0]; the beta line search also probes
        # slightly positive weights, so allow up to 1.
        if not -1.0 <= self.beta <= 1.0:
            raise InvalidConfigError("beta must lie in [-1, 1]")
        if self.epsilon < 0:
            raise InvalidConfigError("epsilon must be nonnegative")
        if self.max_steps < 1:
            raise InvalidConfigError("max_steps must be at least 1")


@dataclass
class AttackOutcome:
    status: str
    perturbed: torch.Tensor | None
    iterations: int
    final_prediction: int
    class_flipped: bool
    concepts_preserved: bool
    linf_norm: float
    trajectory: list | None = None

    @property
    def success(self) -> bool:
        return self.status == STATUS_SUCCESS


def concept_sensitivity(concept_logits, gamma: float) -> list[int]:
    """Indices of concepts whose logit lies in [-gamma, gamma]."""
    logits = torch.as_tensor(concept_logits).detach().flatten()
    return [j for j in range(len(logits)) if -gamma <= float(logits[j]) <= gamma]


def build_mask(p_hat: torch.Tensor, grad_signs: dict[int, torch.Tensor],
               original_signs: dict[int, float], beta: float) -> torch.Tensor:
    """Elementwise min over per-concept masks: 1 where the step moves the
    sensitive logit away from its decision boundary (or has no effect),
    beta where it moves it toward a flip."""
    mask = torch.ones_like(p_hat)
    for j, q_j in grad_signs.items():
        s_j = original_signs[j]
        if s_j == 0:
            continue  # exactly-zero original logit: treated as safe
        product = p_hat * q_j
        mask_j = torch.where((product == s_j) | (product == 0),
                             torch.ones_like(p_hat),
                             torch.full_like(p_hat, beta))
        mask = torch.minimum(mask, mask_j)
    return mask


def _forward_single(model, x: torch.Tensor, needs_concepts: bool):
    """One tracked forward pass on a (3,H,W) image; returns (x_leaf, class
    logits (p,), concept logits (k,) or None)."""
    x_leaf = x.detach().clone().requires_grad_(True)
    class_logits, concept_logits = model(x_leaf.unsqueeze(0))
    if needs_concepts and concept_logits is None:
        raise UnsupportedVariantError(f"{model.variant} exposes no concept logits")
    return x_leaf, class_logits[0], None if concept_logits is None else concept_logits[0]


def _check_preconditions(model, x, y):
    model.eval()
    with torch.no_grad():
        class_logits, _ = model(x.unsqueeze(0))
    if int(class_logits[0].argmax()) != y:
        raise NotEligibleError(f"model predicts {int(class_logits[0].argmax())}, not {y}")


def _binary(concept_logits: torch.Tensor) -> torch.Tensor:
    return (concept_logits > 0).to(torch.int64)


def _outcome(status, x_adv, x, t, pred, flipped, preserved, trajectory):
    return AttackOutcome(
        status=status,
        perturbed=x_adv.detach().clone() if status == STATUS_SUCCESS else None,
        iterations=t,
        final_prediction=pred,
        class_flipped=flipped,
        concepts_preserved=preserved,
        linf_norm=float((x_adv - x).abs().max()),
        trajectory=trajectory,
    )


def pgd_attack(model, x: torch.Tensor, y: int, config: AttackConfig,
               record_trajectory: bool = False) -> AttackOutcome:
    """Plain sign-gradient PGD; success additionally requires that the
    binary concept predictions at termination match the original ones
    (models without a concept path pass that check vacuously)."""
    _check_preconditions(model, x, y)
    model.eval()
    has_concepts = getattr(model, "has_concept_path", False)
    if has_concepts:
        original_bits = _binary(_concept_logits_no_grad(model, x))

    x_adv = x.detach().clone()
    trajectory = [x_adv.clone()] if record_trajectory else None
    for t in range(config.max_steps + 1):
        x_leaf, class_logits, concept_logits = _forward_single(model, x_adv, False)
        pred = int(class_logits.argmax())
        if pred != y:
            preserved = (not has_concepts) or bool(
                torch.equal(_binary(concept_logits), original_bits))
            status = STATUS_SUCCESS if preserved else STATUS_CONCEPTS_CHANGED
            return _outcome(status, x_adv, x, t, pred, True, preserved, trajectory)
        loss = ops.softmax_cross_entropy(class_logits, y)
        p_hat = ops.sign(ops.input_gradient(loss, x_leaf))
        x_adv = ops.clamp(ops.project_linf(x_adv + config.alpha * p_hat, x, config.epsilon),
                          config.x_min, config.x_max)
        if record_trajectory:
            trajectory.append(x_adv.clone())
    return _outcome(STATUS_MAX_ITERATIONS, x_adv, x, config.max_steps + 1, y,
                    False, True, trajectory)


def _concept_logits_no_grad(model, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        _, concept_logits = model(x.unsqueeze(0))
    if concept_logits is None:
        raise UnsupportedVariantError(f"{model.variant} exposes no concept logits")
    return concept_logits[0]


def concept_attack(model, x: torch.Tensor, y: int, config: AttackConfig,
                   record_trajectory: bool = False) -> AttackOutcome:
    """Masked PGD that aborts on any binary concept change."""
    _check_preconditions(model, x, y)
    model.eval()
    original_logits = _concept_logits_no_grad(model, x)
    original_bits = _binary(original_logits)
    original_signs = {j: float(torch.sign(original_logits[j]))
                      for j in range(len(original_logits))}

    x_adv = x.detach().clone()
    trajectory = [x_adv.clone()] if record_trajectory else None
    for t in range(config.max_steps + 1):
        x_leaf, class_logits, concept_logits = _forward_single(model, x_adv, True)
        bits = _binary(concept_logits)
        if not torch.equal(bits, original_bits):
            return _outcome(STATUS_CONCEPTS_CHANGED, x_adv, x, t,
                            int(class_logits.argmax()), False, False, trajectory)
        pred = int(class_logits.argmax())
        if pred != y:
            return _outcome(STATUS_SUCCESS, x_adv, x, t, pred, True, True, trajectory)

        loss = ops.softmax_cross_entropy(class_logits, y)
        p_hat = ops.sign(ops.input_gradient(loss, x_leaf, retain_graph=True))
        sensitive = concept_sensitivity(concept_logits, config.gamma)
        grad_signs = {
            j: ops.sign(ops.input_gradient(concept_logits[j], x_leaf,
                                           retain_graph=(j != sensitive[-1])))
            for j in sensitive
        }
        mask = build_mask(p_hat, grad_signs, original_signs, config.beta)
        if sensitive and bool((mask == config.beta).all()):
            return _outcome(STATUS_ALL_BETA_MASK, x_adv, x, t, pred, False, True,
                            trajectory)
        step = p_hat * mask
        x_adv = ops.clamp(
            ops.project_linf(x_adv + config.alpha * step, x, config.epsilon),
            config.x_min, config.x_max)
        if record_trajectory:
            trajectory.append(x_adv.clone())
    return _outcome(STATUS_MAX_ITERATIONS, x_adv, x, config.max_steps + 1, y,
                    False, True, trajectory)


ATTACK_METHODS = {"pgd": pgd_attack, "aca": concept_attack}


def eligible_indices(model, images, labels, batch_size: int = 256) -> list[int]:
    """Indices the model classifies correctly (the only ones attacked)."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            logits, _ = model(images[start:start + batch_size])
            preds = logits.argmax(dim=1)
            out.extend(start + i for i in range(len(preds))
                       if int(preds[i]) == int(labels[start + i]))
    return out


def run_attacks(model, images, labels, method: str, config: AttackConfig,
                indices=None) -> list[tuple[int, AttackOutcome]]:
    attack_fn = ATTACK_METHODS[method]
    if indices is None:
        indices = eligible_indices(model, images, labels)
    return [(i, attack_fn(model, images[i], int(labels[i]), config)) for i in indices]


def success_rate(model, images, labels, method: str, config: AttackConfig,
                 indices=None) -> float:
    """Fraction of attacked (correctly classified) samples where the class
    prediction flips while the binary concept predictions are unchanged."""
    if indices is None:
        indices = eligible_indices(model, images, labels)
    if not indices:
        raise InvalidConfigError("no correctly classified samples to attack")
    outcomes = run_attacks(model, images, labels, method, config, indices)
    return sum(o.success for _, o in outcomes) / len(outcomes)


def attack_sweep(model, train_images, train_labels, test_images, test_labels,
                 alpha_grid=ALPHA_GRID, gamma_grid=GAMMA_GRID, beta_line=BETA_LINE,
                 epsilon: float = DEFAULT_EPSILON, max_steps: int = DEFAULT_MAX_STEPS,
                 n_search_samples: int = SEARCH_SAMPLES, seed: int = 0,
                 n_final_samples: int | None = None) -> dict:
    """Grid over (alpha, gamma) at beta=SEARCH_BETA on correctly predicted
    training samples, then a beta line search, then final ACA and PGD rates
    on the eligible test set."""
    rng = np.random.default_rng(seed)
    train_eligible = eligible_indices(model, train_images, train_labels)
    if not train_eligible:
        raise InvalidConfigError("no correctly classified training samples")
    if len(train_eligible) > n_search_samples:
        picked = rng.choice(len(train_eligible), size=n_search_samples, replace=False)
        train_eligible = [train_eligible[i] for i in sorted(picked)]

    rows = []
    best = None
    for alpha in alpha_grid:
        for gamma in gamma_grid:
            cfg = AttackConfig(alpha=alpha, gamma=gamma, beta=SEARCH_BETA,
                               epsilon=epsilon, max_steps=max_steps)
            rate = success_rate(model, train_images, train_labels, "aca", cfg,
                                indices=train_eligible)
            rows.append({"phase": "grid", "alpha": alpha, "gamma": gamma,
                         "beta": SEARCH_BETA, "success_rate": rate})
            if best is None or rate > best["success_rate"]:
                best = rows[-1]

    best_beta, best_beta_rate = None, -1.0
    for beta in beta_line:
        cfg = AttackConfig(alpha=best["alpha"], gamma=best["gamma"], beta=beta,
                           epsilon=epsilon, max_steps=max_steps)
        rate = success_rate(model, train_images, train_labels, "aca", cfg,
                            indices=train_eligible)
        rows.append({"phase": "beta_line", "alpha": best["alpha"],
                     "gamma": best["gamma"], "beta": beta, "success_rate": rate})
        if rate > best_beta_rate:
            best_beta, best_beta_rate = beta, rate

    final_cfg = AttackConfig(alpha=best["alpha"], gamma=best["gamma"], beta=best_beta,
                             epsilon=epsilon, max_steps=max_steps)
    test_eligible = eligible_indices(model, test_images, test_labels)
    if n_final_samples is not None and len(test_eligible) > n_final_samples:
        picked = rng.choice(len(test_eligible), size=n_final_samples, replace=False)
        test_eligible = [test_eligible[i] for i in sorted(picked)]
    aca_rate = success_rate(model, test_images, test_labels, "aca", final_cfg,
                            indices=test_eligible)
    pgd_outcomes = run_attacks(model, test_images, test_labels, "pgd", final_cfg,
                               indices=test_eligible)
    pgd_rate = sum(o.success for _, o in pgd_outcomes) / len(pgd_outcomes)
    pgd_flip_rate = sum(o.class_flipped for _, o in pgd_outcomes) / len(pgd_outcomes)

    return {
        "rows": rows,
        "best_config": dataclasses.asdict(final_cfg),
        "aca_success_rate": aca_rate,
        "pgd_success_rate": pgd_rate,
        "pgd_class_flip_rate": pgd_flip_rate,
        "n_test_attacked": len(test_eligible),
    }
