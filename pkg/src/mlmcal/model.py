"""Tiny pre-LN transformer encoder with MLM and classification heads.

The network is deliberately small and hand-rolled: learned token and
position embeddings, a stack of pre-LN blocks (multi-head self-attention,
GELU feed-forward), a final LayerNorm, an untied MLM head (dense, GELU,
LayerNorm, vocab projection) and a classification head (dense, tanh, class
projection) applied to the hidden state at the CLS position.

``ParameterStore`` wraps a model instance together with its config, an
optional frozen snapshot of the pre-trained weights, and metadata about
attached lightweight modules. Everything downstream (losses, optimizers,
checkpointing) works on the store, never on the bare module.

Attention and block modules carry optional attachment slots (low-rank
deltas on the query/value projections, learned key/value prefixes,
bottleneck adapters after each sub-layer). The slots are inert until an
attach function in ``peft`` fills them, and a freshly attached module is
initialized so the forward pass is unchanged at step 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import Domain, TokenSequence, collate_sequences
from .errors import ConfigurationError

__all__ = [
    "EncoderConfig",
    "HiddenStates",
    "ParameterStore",
    "init_params",
    "encode",
    "mlm_logits",
    "cls_logits",
    "snapshot_pretrained",
    "parameter_count_formula",
    "save_checkpoint",
    "load_checkpoint",
    "dump_representations",
    "MIXOUT_PATTERN",
]


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    num_classes: int
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_len: int = 32

    def __post_init__(self):
        if self.vocab_size <= 5:
            raise ConfigurationError("vocab_size must exceed the 5 specials")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.num_layers < 1 or self.num_heads < 1:
            raise ConfigurationError("num_layers and num_heads must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by "
                f"num_heads={self.num_heads}"
            )
        if self.d_ff < 1 or self.max_len < 4:
            raise ConfigurationError("d_ff must be >= 1 and max_len >= 4")


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.d_model // cfg.num_heads
        d = cfg.d_model
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        # Attachment slots; filled by peft.attach_*.
        self.q_lora_A: nn.Parameter | None = None
        self.q_lora_B: nn.Parameter | None = None
        self.v_lora_A: nn.Parameter | None = None
        self.v_lora_B: nn.Parameter | None = None
        self.lora_scale: float = 0.0
        self.prefix_k: nn.Parameter | None = None
        self.prefix_v: nn.Parameter | None = None
        # Debug probe: set record_attn, read last_attn after a forward.
        self.record_attn: bool = False
        self.last_attn: torch.Tensor | None = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        q = self.q(x)
        k = self.k(x)
        v = self.v(x)
        if self.q_lora_A is not None:
            q = q + self.lora_scale * (x @ self.q_lora_A.T) @ self.q_lora_B.T
            v = v + self.lora_scale * (x @ self.v_lora_A.T) @ self.v_lora_B.T
        if self.prefix_k is not None:
            P = self.prefix_k.shape[0]
            pk = self.prefix_k.unsqueeze(0).expand(B, P, d)
            pv = self.prefix_v.unsqueeze(0).expand(B, P, d)
            k = torch.cat([pk, k], dim=1)
            v = torch.cat([pv, v], dim=1)
            bias = torch.cat(
                [bias.new_zeros(B, 1, 1, P), bias], dim=-1
            )
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores + bias, dim=-1)
        if self.record_attn:
            self.last_attn = attn.detach()
        out = attn @ vh
        out = out.transpose(1, 2).reshape(B, L, d)
        return self.o(out)


class Adapter(nn.Module):
    def __init__(self, d_model: int, bottleneck: int):
        super().__init__()
        self.down = nn.Linear(d_model, bottleneck)
        self.up = nn.Linear(bottleneck, d_model)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.up(torch.nn.functional.gelu(self.down(h)))


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.attn_adapter: Adapter | None = None
        self.ff_adapter: Adapter | None = None

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        a = self.attn(self.ln1(x), bias)
        if self.attn_adapter is not None:
            a = self.attn_adapter(a)
        x = x + a
        f = self.ff2(torch.nn.functional.gelu(self.ff1(self.ln2(x))))
        if self.ff_adapter is not None:
            f = self.ff_adapter(f)
        return x + f


class MlmHead(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.dense = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln = nn.LayerNorm(cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.vocab_size)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.out(self.ln(torch.nn.functional.gelu(self.dense(h))))


class ClsHead(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.dense = nn.Linear(cfg.d_model, cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.num_classes)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.out(torch.tanh(self.dense(pooled)))


class Encoder(nn.Module):
    """forward(ids, attention_mask) -> final hidden states (B, L, d)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(
            Block(cfg) for _ in range(cfg.num_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.mlm_head = MlmHead(cfg)
        self.cls_head = ClsHead(cfg)

    def forward(
        self, ids: torch.Tensor, attention_mask: torch.Tensor
    ) -> torch.Tensor:
        B, L = ids.shape
        pos = torch.arange(L, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        bias = torch.zeros(B, 1, 1, L, dtype=x.dtype)
        bias = bias.masked_fill(
            ~attention_mask[:, None, None, :], float("-inf")
        )
        for block in self.blocks:
            x = block(x, bias)
        return self.ln_f(x)


# Weight matrices eligible for stochastic blending with the pre-trained
# snapshot: the linear maps inside encoder blocks (not embeddings, biases,
# LayerNorms, or heads).
MIXOUT_PATTERN = (
    "attn.q.weight",
    "attn.k.weight",
    "attn.v.weight",
    "attn.o.weight",
    "ff1.weight",
    "ff2.weight",
)


def is_mixout_eligible(name: str) -> bool:
    return name.startswith("blocks.") and name.endswith(MIXOUT_PATTERN)


@dataclass(eq=False)
class HiddenStates:
    values: torch.Tensor  # (B, L, d_model)
    pooled: torch.Tensor  # (B, d_model), hidden state at the CLS position


class ParameterStore:
    """A model plus its config, snapshot, attachment metadata, and flags."""

    def __init__(self, config: EncoderConfig, model: Encoder):
        self.config = config
        self.model = model
        self.snapshot: dict[str, torch.Tensor] | None = None
        self.meta: dict = {}

    @property
    def named_arrays(self) -> dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())

    @property
    def trainable_mask(self) -> dict[str, bool]:
        return {n: p.requires_grad for n, p in self.model.named_parameters()}

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(
            p.numel()
            for p in self.model.parameters()
            if p.requires_grad or not trainable_only
        )

    def set_trainable(self, predicate) -> None:
        for name, p in self.model.named_parameters():
            p.requires_grad_(bool(predicate(name)))

    def clone(self, dtype: torch.dtype | None = None) -> "ParameterStore":
        """Deep copy, optionally cast (e.g. to float64 for gradient checks)."""
        other = ParameterStore(self.config, Encoder(self.config))
        other.meta = json.loads(json.dumps(self.meta))
        peft_meta = self.meta.get("peft")
        if peft_meta is not None:
            from . import peft

            other.meta = {
                k: v for k, v in other.meta.items() if k != "peft"
            }
            peft.reattach(other, peft_meta)
        src = self.named_arrays
        with torch.no_grad():
            for name, p in other.model.named_parameters():
                t = src[name]
                p.data = t.detach().clone().to(dtype or t.dtype)
                p.requires_grad_(src[name].requires_grad)
        if self.snapshot is not None:
            other.snapshot = {
                k: v.detach().clone().to(dtype or v.dtype)
                for k, v in self.snapshot.items()
            }
        if dtype is not None:
            other.model.to(dtype)
        return other


def init_params(config: EncoderConfig, seed: int) -> ParameterStore:
    """Build a model with fully generator-driven init.

    Weights and embeddings draw from N(0, 0.02^2); biases start at zero;
    LayerNorm scales at one. Iteration is over sorted parameter names so
    the result does not depend on module construction order.
    """
    model = Encoder(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        params = dict(model.named_parameters())
        for name in sorted(params):
            p = params[name]
            if name.endswith(".bias"):
                p.zero_()
            elif _is_layernorm_weight(model, name):
                p.fill_(1.0)
            else:
                p.normal_(0.0, 0.02, generator=gen)
    return ParameterStore(config, model)


def _is_layernorm_weight(model: nn.Module, name: str) -> bool:
    if not name.endswith(".weight"):
        return False
    module = model
    for part in name.split(".")[:-1]:
        module = getattr(module, part) if not part.isdigit() else module[int(part)]
    return isinstance(module, nn.LayerNorm)


def _as_long_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.long()
    return torch.from_numpy(np.ascontiguousarray(x)).long()


def encode(
    store: ParameterStore,
    ids,
    attention_mask=None,
    params: dict[str, torch.Tensor] | None = None,
) -> HiddenStates:
    """Run the encoder. ``params`` substitutes named parameters functionally
    (used by stochastic weight blending and by frozen-teacher forwards)."""
    ids_t = _as_long_tensor(ids)
    if ids_t.ndim != 2:
        raise ConfigurationError("ids must be a (batch, length) array")
    B, L = ids_t.shape
    if L > store.config.max_len:
        raise ConfigurationError(
            f"sequence length {L} exceeds max_len {store.config.max_len}"
        )
    if ids_t.numel() and (
        int(ids_t.min()) < 0 or int(ids_t.max()) >= store.config.vocab_size
    ):
        raise ConfigurationError("token id out of vocabulary range")
    if attention_mask is None:
        mask_t = torch.ones(B, L, dtype=torch.bool)
    else:
        mask_t = (
            attention_mask
            if isinstance(attention_mask, torch.Tensor)
            else torch.from_numpy(np.ascontiguousarray(attention_mask))
        ).bool()
    if params:
        values = torch.func.functional_call(
            store.model, params, (ids_t, mask_t)
        )
    else:
        values = store.model(ids_t, mask_t)
    return HiddenStates(values=values, pooled=values[:, 0])


def _sub_params(
    params: dict[str, torch.Tensor] | None, prefix: str
) -> dict[str, torch.Tensor]:
    if not params:
        return {}
    plen = len(prefix)
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix)}


def mlm_logits(
    store: ParameterStore,
    hidden: HiddenStates,
    rows,
    cols,
    params: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Vocabulary logits at the given (row, col) positions: (P, vocab)."""
    rows_t = _as_long_tensor(rows)
    cols_t = _as_long_tensor(cols)
    B, L, _ = hidden.values.shape
    if rows_t.numel() == 0:
        raise ConfigurationError("no positions requested")
    if int(rows_t.max()) >= B or int(cols_t.max()) >= L:
        raise ConfigurationError("position index out of range")
    gathered = hidden.values[rows_t, cols_t]
    sub = _sub_params(params, "mlm_head.")
    if sub:
        return torch.func.functional_call(
            store.model.mlm_head, sub, (gathered,)
        )
    return store.model.mlm_head(gathered)


def cls_logits(
    store: ParameterStore,
    hidden: HiddenStates,
    params: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Class logits from the CLS-position hidden state: (B, num_classes)."""
    sub = _sub_params(params, "cls_head.")
    if sub:
        return torch.func.functional_call(
            store.model.cls_head, sub, (hidden.pooled,)
        )
    return store.model.cls_head(hidden.pooled)


def snapshot_pretrained(store: ParameterStore) -> ParameterStore:
    """Freeze a copy of the current weights as the pre-trained reference.

    Taken once, after pre-training and before any fine-tuning; the copy
    never receives gradients.
    """
    if store.snapshot is not None:
        raise ConfigurationError("snapshot already taken")
    if store.meta.get("peft") is not None:
        raise ConfigurationError(
            "snapshot must be taken before attaching lightweight modules"
        )
    store.snapshot = {
        n: p.detach().clone() for n, p in store.model.named_parameters()
    }
    return store


def parameter_count_formula(cfg: EncoderConfig) -> int:
    """Closed-form total parameter count for an unattached model."""
    d, V, K, F = cfg.d_model, cfg.vocab_size, cfg.num_classes, cfg.d_ff
    per_block = (
        2 * d  # ln1
        + 4 * (d * d + d)  # q k v o
        + 2 * d  # ln2
        + (d * F + F)  # ff1
        + (F * d + d)  # ff2
    )
    return (
        V * d
        + cfg.max_len * d
        + cfg.num_layers * per_block
        + 2 * d  # ln_f
        + (d * d + d) + 2 * d + (d * V + V)  # mlm head
        + (d * d + d) + (d * K + K)  # cls head
    )


def save_checkpoint(
    store: ParameterStore, path: str | Path, extra: dict | None = None
) -> None:
    """Write parameters and metadata to a single npz file.

    Array entries are sorted by name and the metadata JSON uses sorted
    keys, so identical stores produce byte-identical files.
    """
    arrays = {}
    for name, p in store.named_arrays.items():
        arrays[f"param/{name}"] = p.detach().numpy()
    meta = {
        "encoder_config": asdict(store.config),
        "peft": store.meta.get("peft"),
        "trainable": [
            n for n, flag in store.trainable_mask.items() if flag
        ],
        "extra": extra if extra is not None else store.meta.get("extra", {}),
    }
    ordered = {k: arrays[k] for k in sorted(arrays)}
    ordered["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **ordered)


def load_checkpoint(path: str | Path) -> ParameterStore:
    """Rebuild a ParameterStore from ``save_checkpoint`` output.

    Attached modules are re-created from metadata before loading weights;
    the snapshot is not persisted and must be re-taken if needed.
    """
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        arrays = {
            k[len("param/") :]: data[k] for k in data.files if k != "meta"
        }
    config = EncoderConfig(**meta["encoder_config"])
    store = ParameterStore(config, Encoder(config))
    if meta.get("peft"):
        from . import peft

        peft.reattach(store, meta["peft"])
    store.meta["extra"] = meta.get("extra", {})
    named = store.named_arrays
    if set(named) != set(arrays):
        raise ConfigurationError(
            "checkpoint parameter names do not match the rebuilt model"
        )
    with torch.no_grad():
        for name, p in named.items():
            arr = torch.from_numpy(np.ascontiguousarray(arrays[name]))
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigurationError(f"shape mismatch for {name}")
            p.data = arr
    trainable = set(meta.get("trainable", list(named)))
    store.set_trainable(lambda n: n in trainable)
    return store


def dump_representations(
    store: ParameterStore,
    seqs: list[TokenSequence],
    path: str | Path,
    batch_size: int = 128,
) -> None:
    """Write pooled CLS representations to TSV: domain, then one column
    per hidden dimension. Row order follows input order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = store.config.d_model
    header = "domain\t" + "\t".join(f"h{j}" for j in range(d))
    lines = [header]
    store.model.eval()
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            ids, mask = collate_sequences(chunk, max_len=store.config.max_len)
            hidden = encode(store, ids, mask)
            pooled = hidden.pooled.numpy()
            for s, vec in zip(chunk, pooled):
                cells = "\t".join(repr(float(x)) for x in vec)
                lines.append(f"{s.domain.value}\t{cells}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_representations(path: str | Path) -> tuple[list[Domain], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    domains = []
    rows = []
    for line in lines[1:]:
        cells = line.split("\t")
        domains.append(Domain(cells[0]))
        rows.append([float(c) for c in cells[1:]])
    return domains, np.array(rows, dtype=np.float64)
