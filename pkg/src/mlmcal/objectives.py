"""Training objectives.

All losses return a ``LossValue``: the differentiable total plus a map of
detached per-term scalars. The joint objective composes, with non-negative
weights,

    total = alpha_mlm * (masked-token term) + classification term
            + beta_l2 * (pooled representation norm)

where the masked-token term is either the masked cross-entropy on the
model's own predictions or, when distillation is on, the KL divergence
from the frozen pre-trained teacher's masked-token distribution to the
student's. The representation term is the mean norm (unsquared by
default) of the CLS-position hidden state, penalizing drift toward
degenerate high-magnitude features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .corpus import LabeledBatch, MaskedBatch
from .errors import ConfigurationError
from .model import HiddenStates, ParameterStore, cls_logits, encode, mlm_logits

__all__ = [
    "LossValue",
    "loss_mlm",
    "loss_cls",
    "loss_kd_mlm",
    "rep_norm_penalty",
    "loss_joint",
    "smoothed_targets",
]


@dataclass(eq=False)
class LossValue:
    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)


def loss_mlm(
    store: ParameterStore,
    batch: MaskedBatch,
    params: dict[str, torch.Tensor] | None = None,
) -> LossValue:
    """Mean cross-entropy over all masked targets in the batch (flat mean,
    every target weighted equally regardless of row)."""
    hidden = encode(store, batch.corrupted_ids, batch.attention_mask, params)
    logits = mlm_logits(
        store, hidden, batch.target_rows, batch.target_cols, params
    )
    targets = torch.from_numpy(batch.targets).long()
    loss = F.cross_entropy(logits, targets)
    return LossValue(total=loss, components={"mlm": float(loss.detach())})


def smoothed_targets(
    labels: torch.Tensor, num_classes: int, sigma: float
) -> torch.Tensor:
    """Label distribution with 1 - sigma on the true class and the sigma
    mass split evenly over the other classes only."""
    if not 0.0 <= sigma < 1.0:
        raise ConfigurationError("smoothing must lie in [0, 1)")
    B = labels.shape[0]
    t = torch.full(
        (B, num_classes),
        sigma / (num_classes - 1) if sigma > 0 else 0.0,
        dtype=torch.float64,
    )
    t[torch.arange(B), labels] = 1.0 - sigma
    return t


def loss_cls(
    store: ParameterStore,
    batch: LabeledBatch,
    sigma: float = 0.0,
    params: dict[str, torch.Tensor] | None = None,
    hidden: HiddenStates | None = None,
) -> LossValue:
    """Classification cross-entropy with optional label smoothing.

    A precomputed ``hidden`` lets callers share one forward pass (the
    joint objective also needs the pooled vector for its norm term).
    """
    if int(batch.labels.min()) < 0 or int(
        batch.labels.max()
    ) >= store.config.num_classes:
        raise ConfigurationError("label out of range")
    if hidden is None:
        hidden = encode(store, batch.ids, batch.attention_mask, params)
    logits = cls_logits(store, hidden, params)
    labels = torch.from_numpy(batch.labels).long()
    if sigma == 0.0:
        loss = F.cross_entropy(logits, labels)
    else:
        t = smoothed_targets(labels, store.config.num_classes, sigma).to(
            logits.dtype
        )
        loss = -(t * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()
    return LossValue(total=loss, components={"cls": float(loss.detach())})


def loss_kd_mlm(
    store: ParameterStore,
    batch: MaskedBatch,
    params: dict[str, torch.Tensor] | None = None,
) -> LossValue:
    """Distillation on masked positions: KL(teacher || student), flat mean.

    The teacher is the frozen pre-trained snapshot run on the same
    corrupted inputs; its distribution is computed without gradients.
    """
    if store.snapshot is None:
        raise ConfigurationError(
            "distillation requires a pre-trained snapshot"
        )
    with torch.no_grad():
        t_hidden = encode(
            store, batch.corrupted_ids, batch.attention_mask, store.snapshot
        )
        t_logits = mlm_logits(
            store,
            t_hidden,
            batch.target_rows,
            batch.target_cols,
            store.snapshot,
        )
        t_logprobs = F.log_softmax(t_logits, dim=-1)
    s_hidden = encode(store, batch.corrupted_ids, batch.attention_mask, params)
    s_logits = mlm_logits(
        store, s_hidden, batch.target_rows, batch.target_cols, params
    )
    s_logprobs = F.log_softmax(s_logits, dim=-1)
    kl = (t_logprobs.exp() * (t_logprobs - s_logprobs)).sum(dim=-1).mean()
    return LossValue(total=kl, components={"kd": float(kl.detach())})


def rep_norm_penalty(hidden: HiddenStates, squared: bool = False) -> torch.Tensor:
    """Mean norm of the pooled CLS representation over the batch."""
    norms = hidden.pooled.norm(dim=-1)
    if squared:
        norms = norms**2
    return norms.mean()


def loss_joint(
    store: ParameterStore,
    cls_batch: LabeledBatch,
    mlm_batch: MaskedBatch,
    alpha_mlm: float,
    beta_l2: float,
    sigma: float = 0.0,
    use_kd: bool = False,
    rep_penalty_squared: bool = False,
    params: dict[str, torch.Tensor] | None = None,
) -> LossValue:
    """Weighted sum of the auxiliary masked-token term, the classification
    term, and the representation-norm term. The two batches may come from
    different text (task text vs. pre-training text)."""
    if alpha_mlm < 0 or beta_l2 < 0:
        raise ConfigurationError("objective weights must be non-negative")
    hidden = encode(store, cls_batch.ids, cls_batch.attention_mask, params)
    cls_part = loss_cls(store, cls_batch, sigma, params, hidden=hidden)
    if use_kd:
        mlm_part = loss_kd_mlm(store, mlm_batch, params)
    else:
        mlm_part = loss_mlm(store, mlm_batch, params)
    pen = rep_norm_penalty(hidden, squared=rep_penalty_squared)
    total = alpha_mlm * mlm_part.total + cls_part.total + beta_l2 * pen
    components = dict(mlm_part.components)
    components.update(cls_part.components)
    components["rep_norm"] = float(pen.detach())
    components["total"] = float(total.detach())
    return LossValue(total=total, components=components)
