"""Training losses and their adversarial wiring.

Per task: emotion uses 1 - mean concordance correlation, age uses mean
absolute error on 0-1-normalised ages, country uses cross-entropy. During
training each head scores the shared, task-specific, and combined
representations separately, and the three losses are summed into the output
loss for the batch's task.

The two debiasing terms are trained through gradient reversal rather than by
backpropagating a negated loss: the task discriminator and the cross-task
heads each minimise an ordinary loss, while the reversal node hands the
upstream extractors the same gradient scaled by -weight. The bookkeeping
total reported per batch is

    total = output - w_disc * discriminator - w_adv * adversarial

which is what the parameter updates realise: heads and discriminator descend
their own objectives at weight 1, the shared extractor climbs the
discriminator loss at w_disc, and each task-specific extractor climbs the
other tasks' losses at w_adv.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, reverse_gradient
from .model import Model, RepresentationBundle, TaskId, TASKS

CCC_DENOM_EPS = 1e-12


@dataclass
class LossWeights:
    discriminator_weight: float = 0.5
    adversarial_weight: float = 0.25

    def validate(self):
        if self.discriminator_weight < 0 or self.adversarial_weight < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class BatchTargets:
    emotions: np.ndarray  # (B, 10) in [0, 1]
    age_norm: np.ndarray  # (B,) in [0, 1]
    country: np.ndarray  # (B,) int class indices


@dataclass
class TaskBatchLoss:
    """All loss components of one batch, as plain floats for logging, plus
    the tensor actually backpropagated."""

    task: TaskId
    shared: float
    specific: float
    combined: float
    output: float  # shared + specific + combined
    discriminator: float | None
    adversarial: float | None
    total: float  # output - w_disc*discriminator - w_adv*adversarial
    objective: Tensor


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# -- element losses ------------------------------------------------------------

def ccc(x, y):
    """Per-column concordance correlation and its mean.

    Population (divide-by-B) moments. Columns whose denominator is
    degenerate (< 1e-12) contribute 0 instead of blowing up, which keeps
    constant-target minibatches trainable.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = _as_tensor(y, x)
    if x.data.ndim != 2 or x.data.shape != y.data.shape:
        raise ValueError(f"ccc expects matching (B, K) arrays, got "
                         f"{x.data.shape} vs {y.data.shape}")
    if x.data.shape[0] < 2:
        raise ValueError("ccc needs a batch of at least 2")
    mean_x = x.mean(axis=0)
    mean_y = y.mean(axis=0)
    x_c = x - mean_x
    y_c = y - mean_y
    var_x = x_c.square().mean(axis=0)
    var_y = y_c.square().mean(axis=0)
    cov = (x_c * y_c).mean(axis=0)
    denom = var_x + var_y + (mean_x - mean_y).square()
    mask = (denom.data >= CCC_DENOM_EPS).astype(x.data.dtype)
    safe = denom + Tensor(1.0 - mask)  # avoid 0/0 on masked columns
    per_column = (cov * 2.0 / safe) * Tensor(mask)
    return per_column, per_column.mean()


def ccc_loss(x, y) -> Tensor:
    """1 - mean CCC; 0 for perfect agreement, 2 for perfect reversal."""
    _, mean_ccc = ccc(x, y)
    return 1.0 - mean_ccc


def mae_loss(x, y) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = _as_tensor(y, x)
    if x.data.shape != y.data.shape:
        raise ValueError(f"mae_loss length mismatch: {x.data.shape} vs {y.data.shape}")
    return (x - y).abs().mean()


def ce_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels)
    b, c = logits.data.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label outside [0, {c})")
    onehot = np.zeros((b, c), dtype=logits.data.dtype)
    onehot[np.arange(b), labels] = 1.0
    return -(Tensor(onehot) * logits.log_softmax(axis=1)).sum(axis=1).mean()


def task_loss(task: TaskId, predictions: Tensor, targets: BatchTargets) -> Tensor:
    if task is TaskId.EMOTION:
        return ccc_loss(predictions, targets.emotions)
    if task is TaskId.AGE:
        return mae_loss(predictions.reshape(-1), targets.age_norm)
    return ce_loss(predictions, targets.country)


# -- composite losses ------------------------------------------------------------

def combined_output_loss(model: Model, task: TaskId, bundle: RepresentationBundle,
                         targets: BatchTargets):
    """Three forward passes of the task head (shared, specific, combined);
    returns (sum tensor, component tensors dict)."""
    parts = {
        "shared": task_loss(task, model.head(task, bundle.shared), targets),
        "specific": task_loss(task, model.head(task, bundle.specific[task]), targets),
        "combined": task_loss(task, model.head(task, bundle.combined[task]), targets),
    }
    return parts["shared"] + parts["specific"] + parts["combined"], parts


def discriminator_loss(model: Model, task: TaskId, shared: Tensor,
                       reversal_scale: float) -> Tensor:
    """Cross-entropy of the task discriminator against the batch's task id.

    The reversal node inside `discriminate` hands the shared extractor
    -reversal_scale times this gradient, pushing it toward features the
    discriminator cannot tell apart.
    """
    logits = model.discriminate(shared, reversal_scale)
    labels = np.full(logits.data.shape[0], task.value, dtype=np.int64)
    return ce_loss(logits, labels)


def adversarial_loss(model: Model, task: TaskId, bundle: RepresentationBundle,
                     targets: BatchTargets, reversal_scale: float) -> Tensor:
    """Sum of the task's loss on each *other* task's specific representation.

    Each term routes through gradient reversal, so extractor t is pushed to
    scrub task-`task` information while the head itself still minimises.
    """
    total = None
    for other in TASKS:
        if other is task:
            continue
        rep = reverse_gradient(bundle.specific[other], reversal_scale)
        term = task_loss(task, model.head(task, rep), targets)
        total = term if total is None else total + term
    return total


def total_loss(output: float, discriminator: float, adversarial: float,
               weights: LossWeights) -> float:
    """Bookkeeping combination reported per batch; the updates themselves are
    realised by the reversal nodes, not by backpropagating this number."""
    return (output - weights.discriminator_weight * discriminator
            - weights.adversarial_weight * adversarial)


def batch_losses(model: Model, task: TaskId, bundle: RepresentationBundle,
                 targets: BatchTargets, weights: LossWeights,
                 adversarial: bool = True) -> TaskBatchLoss:
    """Assemble the full objective for one batch of the given task.

    The returned ``objective`` tensor is what ``backward`` runs on: the sum
    of the output loss and, when adversarial training is on, the raw
    discriminator and adversarial losses (their sign flips happen inside the
    reversal nodes).
    """
    weights.validate()
    output, parts = combined_output_loss(model, task, bundle, targets)
    if adversarial:
        disc = discriminator_loss(model, task, bundle.shared,
                                  weights.discriminator_weight)
        adv = adversarial_loss(model, task, bundle, targets,
                               weights.adversarial_weight)
        objective = output + disc + adv
        disc_val, adv_val = disc.item(), adv.item()
        total = total_loss(output.item(), disc_val, adv_val, weights)
    else:
        objective = output
        disc_val = adv_val = None
        total = output.item()
    return TaskBatchLoss(
        task=task,
        shared=parts["shared"].item(),
        specific=parts["specific"].item(),
        combined=parts["combined"].item(),
        output=output.item(),
        discriminator=disc_val,
        adversarial=adv_val,
        total=total,
        objective=objective,
    )
