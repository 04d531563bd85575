"""Parameter-efficient attachments: adapters, low-rank deltas, prefixes.

Each attach function mutates the store's model in place, marks the base
network frozen (classification head stays trainable), records attachment
metadata, and initializes the new parameters so the attached model's
forward pass equals the frozen base bit for bit:

* adapters start with a zero up-projection, so each adapter is the
  identity map;
* low-rank deltas start with B = 0, so the delta is zero;
* prefixes change nothing at length zero and, at positive length, start
  tiny but nonzero (exact equality holds only for the empty prefix).

The three attachments are mutually exclusive, and none may be attached
twice or after another.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigurationError
from .model import Adapter, ParameterStore

__all__ = [
    "attach_adapter",
    "attach_lora",
    "attach_prefix",
    "merge_lora",
    "reattach",
]


def _check_unattached(store: ParameterStore) -> None:
    if store.meta.get("peft") is not None:
        kind = store.meta["peft"]["kind"]
        raise ConfigurationError(
            f"a lightweight module is already attached ({kind}); "
            "attachments are mutually exclusive"
        )


def _freeze_base(store: ParameterStore, extra_trainable: set[str]) -> None:
    """Freeze everything except the classification head and new modules."""
    for name, p in store.model.named_parameters():
        p.requires_grad_(name.startswith("cls_head.") or name in extra_trainable)


def attach_adapter(
    store: ParameterStore, bottleneck_dim: int, seed: int = 0
) -> ParameterStore:
    """Insert a bottleneck adapter after the attention and feed-forward
    sub-layers of every block. Down-projections draw from N(0, 0.02^2);
    up-projections start at zero so each adapter begins as identity."""
    _check_unattached(store)
    d = store.config.d_model
    if not 1 <= bottleneck_dim < d:
        raise ConfigurationError(
            f"bottleneck_dim must lie in [1, {d - 1}], got {bottleneck_dim}"
        )
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block in store.model.blocks:
            for slot in ("attn_adapter", "ff_adapter"):
                adapter = Adapter(d, bottleneck_dim)
                adapter.down.weight.normal_(0.0, 0.02, generator=gen)
                adapter.down.bias.zero_()
                adapter.up.weight.zero_()
                adapter.up.bias.zero_()
                setattr(block, slot, adapter)
    new = {
        n for n, _ in store.model.named_parameters() if "_adapter." in n
    }
    _freeze_base(store, new)
    store.meta["peft"] = {
        "kind": "adapter",
        "bottleneck_dim": bottleneck_dim,
        "seed": seed,
    }
    return store


def attach_lora(
    store: ParameterStore,
    rank: int,
    scaling_alpha: float,
    seed: int = 0,
) -> ParameterStore:
    """Add low-rank deltas to the query and value projections of every
    block: W_eff = W + (alpha / rank) * B @ A, with A random and B zero."""
    _check_unattached(store)
    d = store.config.d_model
    if not 1 <= rank <= d:
        raise ConfigurationError(f"rank must lie in [1, {d}], got {rank}")
    if scaling_alpha <= 0:
        raise ConfigurationError("scaling_alpha must be positive")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block in store.model.blocks:
            attn = block.attn
            for proj in ("q", "v"):
                A = nn.Parameter(torch.empty(rank, d).normal_(
                    0.0, 0.02, generator=gen
                ))
                B = nn.Parameter(torch.zeros(d, rank))
                setattr(attn, f"{proj}_lora_A", A)
                setattr(attn, f"{proj}_lora_B", B)
            attn.lora_scale = scaling_alpha / rank
    new = {n for n, _ in store.model.named_parameters() if "_lora_" in n}
    _freeze_base(store, new)
    store.meta["peft"] = {
        "kind": "lora",
        "rank": rank,
        "scaling_alpha": scaling_alpha,
        "seed": seed,
    }
    return store


def attach_prefix(
    store: ParameterStore, prefix_len: int, seed: int = 0
) -> ParameterStore:
    """Prepend learned key/value prefix vectors to every block's attention.

    Queries attend over prefix slots plus real tokens; softmax therefore
    normalizes over length + prefix_len positions. Capacity allows a
    prefix up to max_len on top of a full-length input. A zero-length
    prefix is valid and leaves the forward pass identical to the base.
    """
    _check_unattached(store)
    if prefix_len < 0:
        raise ConfigurationError("prefix_len must be non-negative")
    if prefix_len > store.config.max_len:
        raise ConfigurationError(
            f"prefix_len {prefix_len} exceeds capacity "
            f"{store.config.max_len}"
        )
    d = store.config.d_model
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block in store.model.blocks:
            attn = block.attn
            pk = nn.Parameter(torch.empty(prefix_len, d).normal_(
                0.0, 0.02, generator=gen
            ))
            pv = nn.Parameter(torch.empty(prefix_len, d).normal_(
                0.0, 0.02, generator=gen
            ))
            attn.prefix_k = pk
            attn.prefix_v = pv
    new = {n for n, _ in store.model.named_parameters() if ".prefix_" in n}
    _freeze_base(store, new)
    store.meta["peft"] = {
        "kind": "prefix",
        "prefix_len": prefix_len,
        "seed": seed,
    }
    return store


def reattach(store: ParameterStore, peft_meta: dict) -> ParameterStore:
    """Re-create an attachment from stored metadata (checkpoint loading)."""
    kind = peft_meta["kind"]
    if kind == "adapter":
        return attach_adapter(
            store, peft_meta["bottleneck_dim"], peft_meta.get("seed", 0)
        )
    if kind == "lora":
        return attach_lora(
            store,
            peft_meta["rank"],
            peft_meta["scaling_alpha"],
            peft_meta.get("seed", 0),
        )
    if kind == "prefix":
        return attach_prefix(
            store, peft_meta["prefix_len"], peft_meta.get("seed", 0)
        )
    raise ConfigurationError(f"unknown attachment kind {kind!r}")


def merge_lora(store: ParameterStore) -> ParameterStore:
    """Fold low-rank deltas into the base projections and drop them.

    Returns a fresh, unattached store whose forward pass matches the
    attached model up to floating-point reassociation.
    """
    peft_meta = store.meta.get("peft")
    if not peft_meta or peft_meta["kind"] != "lora":
        raise ConfigurationError("no low-rank attachment to merge")
    from .model import Encoder

    merged = ParameterStore(store.config, Encoder(store.config))
    src = store.named_arrays
    with torch.no_grad():
        for name, p in merged.model.named_parameters():
            p.data = src[name].detach().clone()
        scale = peft_meta["scaling_alpha"] / peft_meta["rank"]
        for i, block in enumerate(merged.model.blocks):
            attn_src = store.model.blocks[i].attn
            block.attn.q.weight += scale * (
                attn_src.q_lora_B @ attn_src.q_lora_A
            )
            block.attn.v.weight += scale * (
                attn_src.v_lora_B @ attn_src.v_lora_A
            )
    return merged
