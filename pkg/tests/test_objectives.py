"""Objectives: masked-token CE, smoothed classification, distillation KL,
representation-norm penalty, and the joint composition."""

import math

import numpy as np
import pytest
import torch

import oracles
from conftest import tiny_config
from mlmcal.corpus import (
    CLS_ID,
    SEP_ID,
    Domain,
    TokenSequence,
    collate_labeled,
    corrupt_joint,
    generate_corpus,
    generate_labeled,
)
from mlmcal.errors import ConfigurationError
from mlmcal.model import (
    EncoderConfig,
    HiddenStates,
    encode,
    init_params,
    mlm_logits,
    snapshot_pretrained,
)
from mlmcal.objectives import (
    loss_cls,
    loss_joint,
    loss_kd_mlm,
    loss_mlm,
    rep_norm_penalty,
    smoothed_targets,
)


def _seq(ids):
    return TokenSequence(
        ids=np.array(ids, dtype=np.int64), domain=Domain.PRETRAIN
    )


def _zero_head(store, head):
    with torch.no_grad():
        store.named_arrays[f"{head}.out.weight"].zero_()
        store.named_arrays[f"{head}.out.bias"].zero_()


def _task_batches(task_spec, max_len, seed=0):
    labeled = generate_labeled(task_spec, 16, Domain.ID, seed=seed)
    cls_batch = collate_labeled(labeled, max_len=max_len)
    text = generate_corpus(task_spec, 16, Domain.PRETRAIN, seed=seed + 1)
    mlm_batch = corrupt_joint(text, 0.4, seed=seed + 2, max_len=max_len)
    return cls_batch, mlm_batch


def _store64(task_spec, seed=11, **overrides):
    return init_params(tiny_config(task_spec, **overrides), seed=seed).clone(
        dtype=torch.float64
    )


def test_uniform_mlm_loss_is_log_vocab_size():
    cfg = EncoderConfig(
        vocab_size=8,
        num_classes=2,
        num_layers=1,
        num_heads=2,
        d_model=8,
        d_ff=8,
        max_len=8,
    )
    store = init_params(cfg, seed=0)
    _zero_head(store, "mlm_head")
    seqs = [_seq([CLS_ID, 5, 6, 7, SEP_ID]), _seq([CLS_ID, 7, 5, SEP_ID])]
    batch = corrupt_joint(seqs, 0.6, seed=1)
    value = float(loss_mlm(store, batch).total.detach())
    assert abs(value - math.log(8)) < 1e-6
    assert abs(value - 2.0794) < 1e-4


def test_mlm_matches_direct_summation(task_spec):
    store = _store64(task_spec)
    _, batch = _task_batches(task_spec, store.config.max_len)
    value = float(loss_mlm(store, batch).total.detach())
    with torch.no_grad():
        hidden = encode(store, batch.corrupted_ids, batch.attention_mask)
        logits = mlm_logits(
            store, hidden, batch.target_rows, batch.target_cols
        ).numpy()
    ref = 0.0
    for k in range(batch.num_targets):
        lp = oracles.log_softmax_reference(list(logits[k]))
        ref -= lp[int(batch.targets[k])]
    ref /= batch.num_targets
    assert abs(value - ref) < 1e-12


def test_smoothed_targets_vector():
    t = smoothed_targets(torch.tensor([0, 2]), num_classes=3, sigma=0.03)
    assert torch.allclose(
        t,
        torch.tensor(
            [[0.97, 0.015, 0.015], [0.015, 0.015, 0.97]], dtype=torch.float64
        ),
        atol=1e-12,
    )
    onehot = smoothed_targets(torch.tensor([1]), num_classes=3, sigma=0.0)
    assert torch.equal(onehot, torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64))
    assert float(t.sum()) == pytest.approx(2.0, abs=1e-12)
    for bad in (-0.01, 1.0, 1.5):
        with pytest.raises(ConfigurationError):
            smoothed_targets(torch.tensor([0]), num_classes=3, sigma=bad)


def test_cls_sigma_zero_equals_plain_cross_entropy(task_spec):
    store = _store64(task_spec)
    cls_batch, _ = _task_batches(task_spec, store.config.max_len)
    value = float(loss_cls(store, cls_batch, sigma=0.0).total.detach())
    with torch.no_grad():
        hidden = encode(store, cls_batch.ids, cls_batch.attention_mask)
        logits = store.model.cls_head(hidden.pooled).numpy()
    ref = np.mean(
        [
            -oracles.log_softmax_reference(list(logits[i]))[int(l)]
            for i, l in enumerate(cls_batch.labels)
        ]
    )
    assert abs(value - ref) < 1e-12
    # Identity: the smoothed form at sigma = 0 is the same loss.
    smoothed_path = -(
        smoothed_targets(
            torch.from_numpy(cls_batch.labels), store.config.num_classes, 0.0
        )
        * torch.log_softmax(torch.from_numpy(logits), dim=-1)
    ).sum(dim=-1).mean()
    assert abs(value - float(smoothed_path)) < 1e-12


def test_cls_smoothed_matches_reference(task_spec):
    store = _store64(task_spec)
    cls_batch, _ = _task_batches(task_spec, store.config.max_len, seed=7)
    value = float(loss_cls(store, cls_batch, sigma=0.03).total.detach())
    with torch.no_grad():
        hidden = encode(store, cls_batch.ids, cls_batch.attention_mask)
        logits = store.model.cls_head(hidden.pooled).numpy()
    ref = np.mean(
        [
            oracles.smoothed_ce_reference(
                oracles.log_softmax_reference(list(logits[i])), int(l), 0.03
            )
            for i, l in enumerate(cls_batch.labels)
        ]
    )
    assert abs(value - ref) < 1e-12


def test_uniform_logits_make_smoothing_irrelevant(task_spec):
    # With a uniform predictive distribution the smoothed loss is ln K for
    # every smoothing value, because the targets always sum to one.
    store = _store64(task_spec)
    _zero_head(store, "cls_head")
    cls_batch, _ = _task_batches(task_spec, store.config.max_len)
    for sigma in (0.0, 0.03, 0.2, 0.6):
        value = float(loss_cls(store, cls_batch, sigma=sigma).total.detach())
        assert abs(value - math.log(3)) < 1e-12


def test_cls_label_out_of_range(task_spec, tiny_store):
    cls_batch, _ = _task_batches(task_spec, tiny_store.config.max_len)
    cls_batch.labels[0] = 3
    with pytest.raises(ConfigurationError):
        loss_cls(tiny_store, cls_batch)


def test_kd_crafted_distributions(task_spec):
    # Teacher: uniform over four content tokens; student: (0.7,.1,.1,.1).
    # The crafted logits assign the specials ~1e-14 mass, so the value
    # matches the four-atom hand computation to ~1e-10.
    cfg = EncoderConfig(
        vocab_size=9,
        num_classes=2,
        num_layers=1,
        num_heads=2,
        d_model=8,
        d_ff=8,
        max_len=8,
    )
    store = init_params(cfg, seed=3).clone(dtype=torch.float64)
    _zero_head(store, "mlm_head")
    bias = store.named_arrays["mlm_head.out.bias"]
    student = torch.tensor([0.7, 0.1, 0.1, 0.1], dtype=torch.float64)
    teacher_bias = torch.cat(
        [
            torch.full((5,), -30.0, dtype=torch.float64),
            torch.full((4,), math.log(0.25), dtype=torch.float64),
        ]
    )
    student_bias = torch.cat(
        [torch.full((5,), -30.0, dtype=torch.float64), student.log()]
    )
    with torch.no_grad():
        bias.copy_(teacher_bias)
    snapshot_pretrained(store)
    with torch.no_grad():
        bias.copy_(student_bias)
    seqs = [_seq([CLS_ID, 5, 6, 7, 8, SEP_ID])]
    batch = corrupt_joint(seqs, 0.5, seed=4)
    value = float(loss_kd_mlm(store, batch).total.detach())
    t_full = torch.softmax(teacher_bias, dim=0)
    s_full = torch.softmax(student_bias, dim=0)
    ref_full = oracles.kl_reference(t_full.tolist(), s_full.tolist())
    ref_four = oracles.kl_reference([0.25] * 4, student.tolist())
    assert abs(value - ref_full) < 1e-12
    assert abs(value - ref_four) < 1e-10
    assert abs(ref_four - 0.4299) < 2.5e-4


def test_kd_identity_zero_loss_and_gradient(task_spec):
    store = _store64(task_spec)
    snapshot_pretrained(store)
    _, batch = _task_batches(task_spec, store.config.max_len, seed=9)
    lv = loss_kd_mlm(store, batch)
    assert abs(float(lv.total.detach())) < 1e-12
    lv.total.backward()
    seen = 0
    for name, p in store.named_arrays.items():
        if p.grad is not None:
            assert float(p.grad.abs().max()) < 1e-12, name
            seen += 1
    assert seen > 0


def test_kd_shift_invariance(task_spec):
    store = _store64(task_spec)
    snapshot_pretrained(store)
    with torch.no_grad():
        weight = store.named_arrays["mlm_head.out.weight"]
        weight.add_(0.05 * torch.randn(weight.shape, dtype=torch.float64,
                                       generator=torch.Generator().manual_seed(0)))
    _, batch = _task_batches(task_spec, store.config.max_len, seed=10)
    before = float(loss_kd_mlm(store, batch).total.detach())
    with torch.no_grad():
        store.named_arrays["mlm_head.out.bias"].add_(3.7)
    after = float(loss_kd_mlm(store, batch).total.detach())
    assert abs(before - after) < 1e-12
    assert before > 0.0


def test_kd_requires_snapshot(task_spec, tiny_store):
    _, batch = _task_batches(task_spec, tiny_store.config.max_len)
    with pytest.raises(ConfigurationError):
        loss_kd_mlm(tiny_store, batch)


def test_rep_norm_penalty_cases():
    pooled = torch.zeros(2, 6, dtype=torch.float64)
    pooled[0, 0] = 3.0
    pooled[0, 1] = 4.0
    h = HiddenStates(values=pooled[:, None, :], pooled=pooled)
    assert float(rep_norm_penalty(HiddenStates(values=pooled[:1, None, :], pooled=pooled[:1]))) == pytest.approx(5.0, abs=1e-12)
    assert float(rep_norm_penalty(h)) == pytest.approx(2.5, abs=1e-12)
    assert float(rep_norm_penalty(h, squared=True)) == pytest.approx(12.5, abs=1e-12)


def test_joint_recomposition(task_spec):
    store = _store64(task_spec)
    snapshot_pretrained(store)
    cls_batch, mlm_batch = _task_batches(task_spec, store.config.max_len, seed=12)
    for use_kd in (False, True):
        lv = loss_joint(
            store,
            cls_batch,
            mlm_batch,
            alpha_mlm=0.3,
            beta_l2=1e-5,
            sigma=0.03,
            use_kd=use_kd,
        )
        aux_key = "kd" if use_kd else "mlm"
        aux = (
            loss_kd_mlm(store, mlm_batch) if use_kd else loss_mlm(store, mlm_batch)
        )
        cls_part = loss_cls(store, cls_batch, sigma=0.03)
        with torch.no_grad():
            hidden = encode(store, cls_batch.ids, cls_batch.attention_mask)
            pen = float(rep_norm_penalty(hidden))
        expected = (
            0.3 * float(aux.total.detach())
            + float(cls_part.total.detach())
            + 1e-5 * pen
        )
        assert abs(float(lv.total.detach()) - expected) < 1e-12
        assert set(lv.components) == {aux_key, "cls", "rep_norm", "total"}
        assert lv.components["total"] == pytest.approx(
            float(lv.total.detach()), abs=1e-12
        )
        assert lv.components["rep_norm"] == pytest.approx(pen, abs=1e-12)


def test_joint_zero_weights_reduce_to_classification(task_spec):
    store = _store64(task_spec)
    cls_batch, mlm_batch = _task_batches(task_spec, store.config.max_len, seed=13)
    joint = loss_joint(store, cls_batch, mlm_batch, alpha_mlm=0.0, beta_l2=0.0)
    plain = loss_cls(store, cls_batch)
    assert abs(
        float(joint.total.detach()) - float(plain.total.detach())
    ) < 1e-12


def test_joint_rejects_negative_weights(task_spec, tiny_store):
    cls_batch, mlm_batch = _task_batches(task_spec, tiny_store.config.max_len)
    with pytest.raises(ConfigurationError):
        loss_joint(tiny_store, cls_batch, mlm_batch, alpha_mlm=-0.1, beta_l2=0.0)
    with pytest.raises(ConfigurationError):
        loss_joint(tiny_store, cls_batch, mlm_batch, alpha_mlm=0.1, beta_l2=-1e-9)


def test_joint_alpha_scaling_is_linear(task_spec):
    # Doubling the auxiliary weight moves the total by exactly the
    # auxiliary value, pinning the composition's linearity.
    store = _store64(task_spec)
    cls_batch, mlm_batch = _task_batches(task_spec, store.config.max_len, seed=14)
    one = float(
        loss_joint(store, cls_batch, mlm_batch, 1.0, 0.0).total.detach()
    )
    two = float(
        loss_joint(store, cls_batch, mlm_batch, 2.0, 0.0).total.detach()
    )
    aux = float(loss_mlm(store, mlm_batch).total.detach())
    assert abs((two - one) - aux) < 1e-12
