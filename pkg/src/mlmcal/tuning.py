"""Fine-tuning methods and the training loop.

Eight method variants share one loop:

* full fine-tuning: classification loss on all encoder and head weights;
* joint learning (task-text or pretrain-text flavor): classification plus
  a weighted masked-token term and a representation-norm term, optionally
  with the masked-token term distilled from the frozen snapshot;
* mixout: full fine-tuning where each step's forward uses a stochastic
  blend of current and pre-trained block weights;
* anchored decay: full fine-tuning with a gradient penalty pulling
  encoder weights toward the pre-trained snapshot instead of zero;
* adapters, low-rank deltas, prefixes: base frozen, attachment and
  classifier head trained.

The optimizer is AdamW with decoupled weight decay and a linear
learning-rate decay that reaches exactly zero at the final step. All
stochastic choices (shuffling, masking, stochastic blending) derive from
the method config's seed, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import json
import numpy as np
import torch

from .calibration import compute_ece, predict_classifier, records_from_probs
from .corpus import (
    Domain,
    LabeledExample,
    TokenSequence,
    collate_labeled,
    corrupt_joint,
    corrupt_pretrain,
)
from .errors import ConfigurationError
from .model import ParameterStore, is_mixout_eligible, snapshot_pretrained
from .objectives import loss_cls, loss_joint, loss_mlm
from .seeding import derive_seed

__all__ = [
    "Method",
    "MethodConfig",
    "PretrainConfig",
    "FinetuneData",
    "TrainingLog",
    "OptimizerState",
    "init_optimizer",
    "schedule_lr",
    "optimizer_step",
    "anchor_gradients",
    "mixout_apply",
    "train",
    "pretrain_mlm",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Method(str, Enum):
    FULL_FT = "full_ft"
    JL_D = "jl_d"  # auxiliary masked-token loss on task text
    JL_P = "jl_p"  # auxiliary masked-token loss on pre-training text
    MIXOUT = "mixout"
    PWD = "pwd"  # decay toward pre-trained weights
    ADAPTER = "adapter"
    LORA = "lora"
    PREFIX = "prefix"


_JL = (Method.JL_D, Method.JL_P)
_PEFT = (Method.ADAPTER, Method.LORA, Method.PREFIX)


@dataclass
class MethodConfig:
    method: Method = Method.FULL_FT
    lr: float = 1e-3
    weight_decay: float = 0.1
    batch_size: int = 32
    epochs: int = 3
    seed: int = 0
    use_lr_schedule: bool = True
    sigma_ls: float = 0.0  # label smoothing mass
    # Joint-learning knobs
    alpha_mlm: float = 0.0
    beta_l2: float = 0.0
    p_mask: float = 0.4
    use_kd: bool = False
    rep_penalty_squared: bool = False
    mlm_batch_size: int = 32
    mlm_max_len: int = 32
    # Regularized full fine-tuning knobs
    p_mixout: float = 0.0
    lambda_pwd: float = 0.0
    # Attachment knobs
    adapter_dim: int = 8
    lora_rank: int = 4
    lora_alpha: float = 8.0
    prefix_len: int = 8

    def __post_init__(self):
        self.method = Method(self.method)
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs >= 0 and batch_size >= 1 required")
        if not 0.0 <= self.sigma_ls < 1.0:
            raise ConfigurationError("sigma_ls must lie in [0, 1)")
        if self.use_kd and self.method not in _JL:
            raise ConfigurationError(
                "distillation is only defined for joint-learning methods"
            )
        if self.method in _JL:
            if self.alpha_mlm < 0 or self.beta_l2 < 0:
                raise ConfigurationError("joint weights must be non-negative")
            if not 0.0 < self.p_mask < 1.0:
                raise ConfigurationError("p_mask must lie in (0, 1)")
            if self.mlm_batch_size < 1 or self.mlm_max_len < 4:
                raise ConfigurationError(
                    "mlm_batch_size >= 1 and mlm_max_len >= 4 required"
                )
        elif self.alpha_mlm != 0.0 or self.beta_l2 != 0.0:
            raise ConfigurationError(
                f"alpha_mlm/beta_l2 have no effect under {self.method.value}"
            )
        if self.method == Method.MIXOUT:
            if not 0.0 <= self.p_mixout < 1.0:
                raise ConfigurationError("p_mixout must lie in [0, 1)")
        elif self.p_mixout != 0.0:
            raise ConfigurationError(
                f"p_mixout has no effect under {self.method.value}"
            )
        if self.method == Method.PWD:
            if self.lambda_pwd < 0:
                raise ConfigurationError("lambda_pwd must be non-negative")
        elif self.lambda_pwd != 0.0:
            raise ConfigurationError(
                f"lambda_pwd has no effect under {self.method.value}"
            )


@dataclass
class PretrainConfig:
    p_mask: float = 0.15
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64
    epochs: int = 5
    use_lr_schedule: bool = True
    seed: int = 0


@dataclass
class FinetuneData:
    """Task splits. Eval splits are optional; when present the loop logs a
    confidence/accuracy/calibration row per epoch per split. ``mlm_text``
    overrides the masked-token text for task-text joint learning (defaults
    to the training sequences themselves)."""

    train: list[LabeledExample]
    id_eval: list[LabeledExample] | None = None
    od_eval: list[LabeledExample] | None = None
    outlier_eval: list[TokenSequence] | None = None
    mlm_text: list[TokenSequence] | None = None


@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = []
        for rec in self.steps:
            lines.append(json.dumps({"kind": "step", **rec}, sort_keys=True))
        for rec in self.epochs:
            lines.append(json.dumps({"kind": "epoch", **rec}, sort_keys=True))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class OptimizerState:
    step_count: int
    total_steps: int
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]


def init_optimizer(store, total_steps: int) -> OptimizerState:
    if total_steps < 1:
        raise ConfigurationError("total_steps must be >= 1")
    avg = {}
    sq = {}
    for name, p in store.named_arrays.items():
        if p.requires_grad:
            avg[name] = torch.zeros_like(p)
            sq[name] = torch.zeros_like(p)
    return OptimizerState(
        step_count=0, total_steps=total_steps, exp_avg=avg, exp_avg_sq=sq
    )


def schedule_lr(
    base_lr: float, step_index: int, total_steps: int, enabled: bool = True
) -> float:
    """Linear decay, no warmup: full lr at step 0, exactly 0 at the final
    step index. Disabled gives a constant lr."""
    if not 0 <= step_index < total_steps:
        raise ConfigurationError("step_index out of range")
    if not enabled:
        return base_lr
    denom = max(1, total_steps - 1)
    return base_lr * (total_steps - 1 - step_index) / denom


def anchor_gradients(store, lambda_pwd: float) -> dict[str, torch.Tensor]:
    """Gradient of the anchored penalty (lambda/2)||w - w0||^2 for every
    trainable array with a snapshot counterpart outside the classifier
    head: exactly lambda * (w - w0)."""
    if store.snapshot is None:
        raise ConfigurationError("anchored decay requires a snapshot")
    out = {}
    for name, p in store.named_arrays.items():
        if not p.requires_grad or name.startswith("cls_head."):
            continue
        if name in store.snapshot:
            out[name] = lambda_pwd * (p.detach() - store.snapshot[name])
    return out


def _standard_decay_applies(name: str, p: torch.Tensor) -> bool:
    return p.ndim >= 2


def optimizer_step(
    state: OptimizerState,
    store,
    grads: dict[str, torch.Tensor],
    base_lr: float,
    weight_decay: float,
    schedule_enabled: bool = True,
    lambda_pwd: float = 0.0,
) -> float:
    """One AdamW step with decoupled weight decay. Returns the lr used.

    With ``lambda_pwd`` > 0, arrays anchored to the snapshot receive the
    anchor gradient added to their task gradient and are exempt from
    standard decay toward zero; everything else (the classifier head)
    decays normally. Weight decay applies to matrices only, never biases
    or LayerNorm scales.
    """
    lr = schedule_lr(
        base_lr, state.step_count, state.total_steps, schedule_enabled
    )
    anchors = (
        anchor_gradients(store, lambda_pwd) if lambda_pwd > 0 else {}
    )
    t = state.step_count + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    named = store.named_arrays
    with torch.no_grad():
        for name, g in grads.items():
            p = named[name]
            if not p.requires_grad:
                raise ConfigurationError(
                    f"gradient supplied for frozen array {name}"
                )
            if name in anchors:
                g = g + anchors[name]
            # Decoupled decay shrinks the weight before the Adam update,
            # matching the reference AdamW recurrence.
            if (
                weight_decay > 0
                and name not in anchors
                and _standard_decay_applies(name, p)
            ):
                p.mul_(1.0 - lr * weight_decay)
            m = state.exp_avg[name]
            v = state.exp_avg_sq[name]
            m.mul_(ADAM_BETA1).add_(g, alpha=1 - ADAM_BETA1)
            v.mul_(ADAM_BETA2).addcmul_(g, g, value=1 - ADAM_BETA2)
            update = (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS)
            p.add_(update, alpha=-lr)
    state.step_count = t
    return lr


def mixout_apply(
    store, p_mixout: float, seed: int, compensate: bool = True
) -> dict[str, torch.Tensor]:
    """Effective weights for one stochastic-blend forward pass.

    Each eligible block weight matrix gets an elementwise Bernoulli mask
    m ~ B(p): effective = (m * w0 + (1 - m) * w - p * w0) / (1 - p). The
    compensation keeps the expectation equal to w. Gradients flow to w
    through the (1 - m) / (1 - p) factor. The returned map contains only
    the blended arrays; evaluation uses the raw weights.
    """
    if not 0.0 <= p_mixout < 1.0:
        raise ConfigurationError("p_mixout must lie in [0, 1)")
    if store.snapshot is None:
        raise ConfigurationError("stochastic blending requires a snapshot")
    gen = torch.Generator().manual_seed(seed)
    out = {}
    for name, p in store.named_arrays.items():
        if not is_mixout_eligible(name):
            continue
        w0 = store.snapshot[name]
        m = (
            torch.rand(p.shape, generator=gen, dtype=p.dtype) < p_mixout
        ).to(p.dtype)
        eff = m * w0 + (1.0 - m) * p
        if compensate:
            eff = (eff - p_mixout * w0) / (1.0 - p_mixout)
        out[name] = eff
    return out


def _set_trainable_for_method(store, method: Method) -> None:
    if method in _JL:
        store.set_trainable(lambda name: True)
    else:
        # Classification-only objectives leave the MLM head untouched.
        store.set_trainable(lambda name: not name.startswith("mlm_head."))


def _attach_for_method(store, config: MethodConfig) -> None:
    from . import peft

    seed = derive_seed(config.seed, "attach")
    if config.method == Method.ADAPTER:
        peft.attach_adapter(store, config.adapter_dim, seed)
    elif config.method == Method.LORA:
        peft.attach_lora(store, config.lora_rank, config.lora_alpha, seed)
    elif config.method == Method.PREFIX:
        peft.attach_prefix(store, config.prefix_len, seed)
    else:
        _set_trainable_for_method(store, config.method)


class _CyclicSampler:
    """Deterministic reshuffling iterator over a corpus."""

    def __init__(self, items: list, seed: int):
        if not items:
            raise ConfigurationError("empty corpus for cyclic sampling")
        self.items = items
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(items))
        self.pos = 0

    def take(self, k: int) -> list:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(len(self.items))
                self.pos = 0
            out.append(self.items[int(self.order[self.pos])])
            self.pos += 1
        return out


def _epoch_eval(
    store, data: FinetuneData, epoch: int, config: MethodConfig
) -> dict:
    rec: dict = {"epoch": epoch}
    labeled = []
    if data.id_eval:
        labeled.append((Domain.ID, data.id_eval))
    if data.od_eval:
        labeled.append((Domain.OD, data.od_eval))
    for domain, split in labeled:
        probs, labels = predict_classifier(store, split)
        records = records_from_probs(probs, labels, domain)
        rec[domain.value] = {
            "accuracy": float(
                np.mean([r.pred_label == r.true_label for r in records])
            ),
            "mean_confidence": float(
                np.mean([r.confidence for r in records])
            ),
            "ece": compute_ece(records, num_bins=10).ece,
        }
    if data.outlier_eval:
        probs, _ = predict_classifier(store, data.outlier_eval)
        rec["outlier"] = {
            "mean_confidence": float(probs.max(axis=1).mean())
        }
    return rec


def train(
    config: MethodConfig,
    data: FinetuneData,
    pretrain_corpus: list[TokenSequence] | None,
    store: ParameterStore,
) -> tuple[ParameterStore, TrainingLog]:
    """Fine-tune in place according to the method config.

    Requirements checked up front: joint learning on pre-training text
    needs the pre-training corpus; distillation, stochastic blending, and
    anchored decay need the pre-trained snapshot. With zero epochs the
    store is returned untouched.
    """
    config.validate()
    log = TrainingLog()
    if config.method == Method.JL_P and not pretrain_corpus:
        raise ConfigurationError(
            "joint learning on pre-training text needs the pre-training corpus"
        )
    needs_snapshot = (
        (config.method in _JL and config.use_kd)
        or config.method in (Method.MIXOUT, Method.PWD)
    )
    if needs_snapshot and store.snapshot is None:
        raise ConfigurationError(
            f"{config.method.value} requires a pre-trained snapshot"
        )
    if not data.train:
        raise ConfigurationError("training split is empty")
    if config.epochs == 0:
        return store, log

    _attach_for_method(store, config)

    n = len(data.train)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    opt = init_optimizer(store, total_steps)
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))

    mlm_sampler = None
    if config.method in _JL:
        if config.method == Method.JL_P:
            mlm_source = list(pretrain_corpus)
        else:
            mlm_source = list(
                data.mlm_text
                if data.mlm_text
                else [e.sequence for e in data.train]
            )
        mlm_sampler = _CyclicSampler(
            mlm_source, derive_seed(config.seed, "mlm-shuffle")
        )

    max_len = store.config.max_len
    lambda_pwd = config.lambda_pwd if config.method == Method.PWD else 0.0

    log.epochs.append(_epoch_eval(store, data, 0, config))
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            examples = [data.train[int(i)] for i in idx]
            cls_batch = collate_labeled(examples, max_len=max_len)

            if config.method in _JL:
                seqs = mlm_sampler.take(config.mlm_batch_size)
                mlm_batch = corrupt_joint(
                    seqs,
                    config.p_mask,
                    derive_seed(config.seed, f"mask:{step}"),
                    max_len=min(config.mlm_max_len, max_len),
                )
                lv = loss_joint(
                    store,
                    cls_batch,
                    mlm_batch,
                    alpha_mlm=config.alpha_mlm,
                    beta_l2=config.beta_l2,
                    sigma=config.sigma_ls,
                    use_kd=config.use_kd,
                    rep_penalty_squared=config.rep_penalty_squared,
                )
            elif config.method == Method.MIXOUT and config.p_mixout > 0:
                eff = mixout_apply(
                    store,
                    config.p_mixout,
                    derive_seed(config.seed, f"mixout:{step}"),
                )
                lv = loss_cls(store, cls_batch, config.sigma_ls, params=eff)
            else:
                lv = loss_cls(store, cls_batch, config.sigma_ls)

            store.model.zero_grad(set_to_none=True)
            lv.total.backward()
            grads = {
                name: p.grad
                for name, p in store.named_arrays.items()
                if p.requires_grad and p.grad is not None
            }
            lr_used = optimizer_step(
                opt,
                store,
                grads,
                base_lr=config.lr,
                weight_decay=config.weight_decay,
                schedule_enabled=config.use_lr_schedule,
                lambda_pwd=lambda_pwd,
            )
            record = {"step": step, "epoch": epoch, "lr": lr_used}
            record.update(lv.components)
            record["total"] = float(lv.total.detach())
            log.steps.append(record)
            step += 1
        log.epochs.append(_epoch_eval(store, data, epoch, config))
    store.model.zero_grad(set_to_none=True)
    return store, log


def pretrain_mlm(
    store: ParameterStore,
    corpus: list[TokenSequence],
    config: PretrainConfig,
) -> tuple[ParameterStore, TrainingLog]:
    """Masked-token pre-training with the mask/random/keep corruption.

    All arrays train. At the end the pre-trained snapshot is frozen into
    the store, ready for fine-tuning.
    """
    if not corpus:
        raise ConfigurationError("pre-training corpus is empty")
    if not 0.0 < config.p_mask < 1.0:
        raise ConfigurationError("p_mask must lie in (0, 1)")
    if config.epochs < 1 or config.batch_size < 1:
        raise ConfigurationError("epochs and batch_size must be >= 1")
    store.set_trainable(lambda name: True)
    n = len(corpus)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    opt = init_optimizer(store, total_steps)
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    log = TrainingLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            seqs = [corpus[int(i)] for i in idx]
            batch = corrupt_pretrain(
                seqs,
                config.p_mask,
                derive_seed(config.seed, f"mask:{step}"),
                vocab_size=store.config.vocab_size,
                max_len=store.config.max_len,
            )
            lv = loss_mlm(store, batch)
            store.model.zero_grad(set_to_none=True)
            lv.total.backward()
            grads = {
                name: p.grad
                for name, p in store.named_arrays.items()
                if p.grad is not None
            }
            lr_used = optimizer_step(
                opt,
                store,
                grads,
                base_lr=config.lr,
                weight_decay=config.weight_decay,
                schedule_enabled=config.use_lr_schedule,
            )
            log.steps.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr_used,
                    "mlm": lv.components["mlm"],
                }
            )
            step += 1
    store.model.zero_grad(set_to_none=True)
    snapshot_pretrained(store)
    return store, log
