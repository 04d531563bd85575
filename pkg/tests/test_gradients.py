"""Finite-difference checks of autograd through every loss surface.

The exhaustive sweep over all coordinates lives in the acceptance suite;
here a deterministic random sample of coordinates per loss keeps the
module fast while still touching every parameter tensor class.
"""

import zlib

import numpy as np
import pytest
import torch

from conftest import tiny_config
from mlmcal.config import load_preset, preset_names
from mlmcal.corpus import (
    Domain,
    collate_labeled,
    corrupt_joint,
    generate_corpus,
    generate_labeled,
)
from mlmcal.model import encode, init_params, snapshot_pretrained
from mlmcal.objectives import (
    loss_cls,
    loss_joint,
    loss_kd_mlm,
    loss_mlm,
    rep_norm_penalty,
)
from mlmcal.tuning import Method

H = 1e-5
TOL = 1e-4
FLOOR = 1e-6


@pytest.fixture(scope="module")
def fd_setup(task_spec):
    cfg = tiny_config(task_spec)
    store = init_params(cfg, seed=21).clone(dtype=torch.float64)
    snapshot_pretrained(store)
    # Nudge the live weights off the snapshot so distillation has a
    # nonzero gradient.
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for p in store.named_arrays.values():
            p.add_(
                0.02 * torch.randn(p.shape, dtype=torch.float64, generator=gen)
            )
    labeled = generate_labeled(task_spec, 8, Domain.ID, seed=31)
    cls_batch = collate_labeled(labeled, max_len=cfg.max_len)
    text = generate_corpus(task_spec, 8, Domain.PRETRAIN, seed=32)
    mlm_batch = corrupt_joint(text, 0.4, seed=33, max_len=cfg.max_len)
    return store, cls_batch, mlm_batch


def _loss_fns(store, cls_batch, mlm_batch):
    def pooled():
        return encode(store, cls_batch.ids, cls_batch.attention_mask)

    return {
        "mlm": lambda: loss_mlm(store, mlm_batch).total,
        "cls_plain": lambda: loss_cls(store, cls_batch).total,
        "cls_smoothed": lambda: loss_cls(store, cls_batch, sigma=0.03).total,
        "kd": lambda: loss_kd_mlm(store, mlm_batch).total,
        "rep_norm": lambda: rep_norm_penalty(pooled()),
        "rep_norm_squared": lambda: rep_norm_penalty(pooled(), squared=True),
        "joint": lambda: loss_joint(
            store, cls_batch, mlm_batch, 0.3, 1e-5, sigma=0.03
        ).total,
        "joint_kd": lambda: loss_joint(
            store, cls_batch, mlm_batch, 0.3, 1e-5, use_kd=True
        ).total,
    }


def _autograd_grads(store, loss_fn):
    for p in store.named_arrays.values():
        p.grad = None
    loss_fn().backward()
    return {
        name: (
            p.grad.detach().clone()
            if p.grad is not None
            else torch.zeros_like(p)
        )
        for name, p in store.named_arrays.items()
    }


def _fd_coordinate(param, flat_idx, loss_fn, h=H):
    with torch.no_grad():
        flat = param.view(-1)
        orig = float(flat[flat_idx])
        flat[flat_idx] = orig + h
        up = float(loss_fn().detach())
        flat[flat_idx] = orig - h
        down = float(loss_fn().detach())
        flat[flat_idx] = orig
    return (up - down) / (2 * h)


def _sample_coordinates(store, n, seed):
    names = sorted(store.named_arrays)
    sizes = [store.named_arrays[name].numel() for name in names]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n, total), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for flat in sorted(int(i) for i in picks):
        which = int(np.searchsorted(bounds, flat, side="right"))
        offset = flat - (0 if which == 0 else int(bounds[which - 1]))
        out.append((names[which], offset))
    return out


def _check_sampled(store, loss_fn, n_coords, seed):
    grads = _autograd_grads(store, loss_fn)
    worst = 0.0
    for name, idx in _sample_coordinates(store, n_coords, seed):
        ag = float(grads[name].view(-1)[idx])
        fd = _fd_coordinate(store.named_arrays[name], idx, loss_fn)
        err = abs(ag - fd) / max(abs(ag), abs(fd), FLOOR)
        worst = max(worst, err)
        assert err < TOL, f"{name}[{idx}] autograd={ag} fd={fd} err={err}"
    return worst


@pytest.mark.parametrize(
    "loss_name",
    [
        "mlm",
        "cls_plain",
        "cls_smoothed",
        "kd",
        "rep_norm",
        "rep_norm_squared",
        "joint",
        "joint_kd",
    ],
)
def test_sampled_coordinates_match_finite_differences(fd_setup, loss_name):
    store, cls_batch, mlm_batch = fd_setup
    loss_fn = _loss_fns(store, cls_batch, mlm_batch)[loss_name]
    _check_sampled(
        store, loss_fn, n_coords=30, seed=zlib.crc32(loss_name.encode())
    )


def test_classifier_head_dense_finite_differences(fd_setup):
    # Exhaustive FD over both classifier head output arrays.
    store, cls_batch, mlm_batch = fd_setup
    loss_fn = _loss_fns(store, cls_batch, mlm_batch)["joint"]
    grads = _autograd_grads(store, loss_fn)
    for name in ("cls_head.out.weight", "cls_head.out.bias"):
        param = store.named_arrays[name]
        for idx in range(param.numel()):
            ag = float(grads[name].view(-1)[idx])
            fd = _fd_coordinate(param, idx, loss_fn)
            err = abs(ag - fd) / max(abs(ag), abs(fd), FLOOR)
            assert err < TOL, f"{name}[{idx}] err={err}"


def test_gradients_at_preset_operating_points(fd_setup):
    # Every distinct joint-objective weight setting shipped in a preset
    # gets a sampled FD pass, so no published operating point relies on
    # an unchecked code path.
    store, cls_batch, mlm_batch = fd_setup
    combos = set()
    for name in preset_names():
        method = load_preset(name).method
        if method.method in (Method.JL_D, Method.JL_P):
            combos.add(
                (
                    method.alpha_mlm,
                    method.beta_l2,
                    method.sigma_ls,
                    method.use_kd,
                )
            )
    assert len(combos) >= 8
    for i, (alpha, beta, sigma, use_kd) in enumerate(sorted(combos)):
        loss_fn = lambda: loss_joint(  # noqa: E731
            store,
            cls_batch,
            mlm_batch,
            alpha,
            beta,
            sigma=sigma,
            use_kd=use_kd,
        ).total
        _check_sampled(store, loss_fn, n_coords=8, seed=1000 + i)
