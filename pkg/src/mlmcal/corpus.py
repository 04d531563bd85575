"""Synthetic text world: vocabulary, corpus generators, and masking.

The task is keyword classification. Each class owns a few keyword tokens;
exactly one keyword appears in every labeled sequence, so a rule oracle can
recover the label with certainty. The remaining positions are filler tokens,
and the filler distribution is what separates the domains:

* ID fillers are partitioned into per-class pools and sampled from the pool
  of the true class with probability ``spurious_strength``. The correlation
  is real in-domain signal but it is spurious: it vanishes off-domain.
* OD sequences use a disjoint filler pool (mixed with ID fillers when
  ``domain_shift`` < 1) with no class correlation, so only the keyword
  carries label information.
* OUTLIER sequences contain generic fillers only and no keywords at all.
* PRETRAIN text mixes all three styles, so a pre-trained model has seen
  every region of the input space that evaluation later probes.

Masking comes in two flavors: the classic corrupt-and-predict scheme used
for pre-training (mask / random-replace / keep at 80/10/10), and a
mask-only scheme used when masked-token prediction runs as an auxiliary
task during fine-tuning, where corrupted inputs never contain random wrong
tokens that could confuse the classifier sharing the encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "PAD_ID",
    "MASK_ID",
    "CLS_ID",
    "SEP_ID",
    "UNK_ID",
    "SPECIAL_TOKENS",
    "Domain",
    "Vocabulary",
    "SyntheticTaskSpec",
    "TokenSequence",
    "LabeledExample",
    "MaskedBatch",
    "LabeledBatch",
    "build_vocabulary",
    "generate_corpus",
    "generate_labeled",
    "oracle_label",
    "contains_keyword",
    "corrupt_pretrain",
    "corrupt_joint",
    "collate_sequences",
    "collate_labeled",
    "save_corpus",
    "load_corpus",
]

SPECIAL_TOKENS = ("PAD", "MASK", "CLS", "SEP", "UNK")
PAD_ID, MASK_ID, CLS_ID, SEP_ID, UNK_ID = range(5)


class Domain(str, Enum):
    ID = "id"
    OD = "od"
    OUTLIER = "outlier"
    PRETRAIN = "pretrain"


@dataclass(frozen=True)
class Vocabulary:
    """Token table. Ids 0..4 are the special tokens, in fixed order."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise ConfigurationError(
                f"vocabulary must start with specials {SPECIAL_TOKENS}"
            )
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigurationError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(5, self.size, dtype=np.int64)

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"unknown token {token!r}") from None

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def is_special(self, idx: int) -> bool:
        return 0 <= idx < 5

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tokens=tuple(lines))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Shape of the synthetic keyword-classification world.

    ``domain_shift`` is the probability that an OD filler slot draws from
    the OD-only pool rather than the ID pool; 1.0 means fully disjoint
    filler support. ``spurious_strength`` is the probability that an ID
    filler slot draws from the true class's filler pool rather than the
    full ID pool.
    """

    num_classes: int = 3
    keywords_per_class: int = 3
    id_filler_count: int = 12
    od_filler_count: int = 12
    generic_filler_count: int = 12
    domain_shift: float = 1.0
    spurious_strength: float = 0.9
    seq_len_range: tuple[int, int] = (8, 16)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.keywords_per_class < 1:
            raise ConfigurationError("keywords_per_class must be >= 1")
        if self.id_filler_count < self.num_classes:
            raise ConfigurationError(
                "id_filler_count must be >= num_classes so every class "
                "gets a filler pool"
            )
        if min(self.od_filler_count, self.generic_filler_count) < 1:
            raise ConfigurationError("filler counts must be >= 1")
        if not 0.0 <= self.domain_shift <= 1.0:
            raise ConfigurationError("domain_shift must lie in [0, 1]")
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise ConfigurationError("spurious_strength must lie in [0, 1]")
        lo, hi = self.seq_len_range
        if lo < 4 or hi < lo:
            raise ConfigurationError(
                "seq_len_range must satisfy 4 <= min <= max (two specials "
                "plus at least one keyword and one filler)"
            )

    # Token layout: specials, then keywords class-major, then ID fillers,
    # then OD fillers, then generic fillers. All id helpers derive from the
    # spec alone so the oracle never needs the Vocabulary object.

    def grammar_tokens(self) -> list[str]:
        toks = []
        for c in range(self.num_classes):
            for k in range(self.keywords_per_class):
                toks.append(f"kw{c}_{k}")
        toks += [f"fid{i}" for i in range(self.id_filler_count)]
        toks += [f"fod{i}" for i in range(self.od_filler_count)]
        toks += [f"gen{i}" for i in range(self.generic_filler_count)]
        return toks

    def keyword_ids(self) -> np.ndarray:
        """(num_classes, keywords_per_class) array of token ids."""
        n = self.num_classes * self.keywords_per_class
        return np.arange(5, 5 + n, dtype=np.int64).reshape(
            self.num_classes, self.keywords_per_class
        )

    def id_filler_ids(self) -> np.ndarray:
        start = 5 + self.num_classes * self.keywords_per_class
        return np.arange(start, start + self.id_filler_count, dtype=np.int64)

    def class_filler_ids(self, label: int) -> np.ndarray:
        """Strided partition of the ID filler pool for one class."""
        return self.id_filler_ids()[label :: self.num_classes]

    def od_filler_ids(self) -> np.ndarray:
        start = (
            5
            + self.num_classes * self.keywords_per_class
            + self.id_filler_count
        )
        return np.arange(start, start + self.od_filler_count, dtype=np.int64)

    def generic_filler_ids(self) -> np.ndarray:
        start = (
            5
            + self.num_classes * self.keywords_per_class
            + self.id_filler_count
            + self.od_filler_count
        )
        return np.arange(
            start, start + self.generic_filler_count, dtype=np.int64
        )

    @property
    def vocab_size(self) -> int:
        return (
            5
            + self.num_classes * self.keywords_per_class
            + self.id_filler_count
            + self.od_filler_count
            + self.generic_filler_count
        )


def build_vocabulary(spec: SyntheticTaskSpec) -> Vocabulary:
    """Assemble the vocabulary: specials first, then grammar tokens."""
    grammar = spec.grammar_tokens()
    if len(grammar) < 3:
        raise ConfigurationError("grammar must contribute at least 3 tokens")
    clash = set(grammar) & set(SPECIAL_TOKENS)
    if clash:
        raise ConfigurationError(
            f"grammar tokens collide with special tokens: {sorted(clash)}"
        )
    if len(set(grammar)) != len(grammar):
        raise ConfigurationError("grammar contains duplicate tokens")
    return Vocabulary(tokens=SPECIAL_TOKENS + tuple(grammar))


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """One tokenized sequence: CLS, content tokens, SEP. No padding."""

    ids: np.ndarray
    domain: Domain

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        if ids.ndim != 1 or len(ids) < 3:
            raise ConfigurationError(
                "sequence must be 1-D with at least CLS, one token, SEP"
            )
        if ids[0] != CLS_ID or ids[-1] != SEP_ID:
            raise ConfigurationError("sequence must be CLS ... SEP")
        if PAD_ID in ids:
            raise ConfigurationError("unpadded sequence must not contain PAD")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def content(self) -> np.ndarray:
        return self.ids[1:-1]


@dataclass(frozen=True, eq=False)
class LabeledExample:
    sequence: TokenSequence
    label: int

    def __post_init__(self):
        if self.label < 0:
            raise ConfigurationError("label must be non-negative")


def _fill_slot(rng, spec: SyntheticTaskSpec, style: Domain, label: int) -> int:
    if style == Domain.ID:
        if rng.random() < spec.spurious_strength:
            pool = spec.class_filler_ids(label)
        else:
            pool = spec.id_filler_ids()
    elif style == Domain.OD:
        if rng.random() < spec.domain_shift:
            pool = spec.od_filler_ids()
        else:
            pool = spec.id_filler_ids()
    else:
        pool = spec.generic_filler_ids()
    return int(pool[rng.integers(len(pool))])


def _generate_ids(
    rng, spec: SyntheticTaskSpec, style: Domain, label: int | None
) -> np.ndarray:
    lo, hi = spec.seq_len_range
    total = int(rng.integers(lo, hi + 1))
    n_content = total - 2
    content = np.empty(n_content, dtype=np.int64)
    for j in range(n_content):
        content[j] = _fill_slot(rng, spec, style, label if label is not None else 0)
    if label is not None:
        kw_pool = spec.keyword_ids()[label]
        pos = int(rng.integers(n_content))
        content[pos] = int(kw_pool[rng.integers(len(kw_pool))])
    return np.concatenate(([CLS_ID], content, [SEP_ID]))


def generate_corpus(
    spec: SyntheticTaskSpec, n: int, domain: Domain, seed: int
) -> list[TokenSequence]:
    """Generate an unlabeled corpus for one domain.

    PRETRAIN mixes the three styles uniformly; the style of each sequence
    is drawn independently, and labeled styles draw a uniform class.
    """
    if n < 0:
        raise ConfigurationError("corpus size must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    styles = (Domain.ID, Domain.OD, Domain.OUTLIER)
    for _ in range(n):
        style = styles[rng.integers(3)] if domain == Domain.PRETRAIN else domain
        if style == Domain.OUTLIER:
            label = None
        else:
            label = int(rng.integers(spec.num_classes))
        ids = _generate_ids(rng, spec, style, label)
        out.append(TokenSequence(ids=ids, domain=domain))
    return out


def generate_labeled(
    spec: SyntheticTaskSpec, n: int, domain: Domain, seed: int
) -> list[LabeledExample]:
    """Generate a labeled, class-balanced split (ID or OD)."""
    if domain not in (Domain.ID, Domain.OD):
        raise ConfigurationError("labeled data exists only for ID and OD")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % spec.num_classes)
    out = []
    for i in range(n):
        label = int(labels[i])
        ids = _generate_ids(rng, spec, domain, label)
        out.append(
            LabeledExample(
                sequence=TokenSequence(ids=ids, domain=domain), label=label
            )
        )
    return out


def oracle_label(spec: SyntheticTaskSpec, ids: np.ndarray) -> int | None:
    """Recover the label from keyword membership alone.

    Returns the class whose keyword set intersects the sequence, or None
    if no class or more than one class matches.
    """
    kw = spec.keyword_ids()
    present = [c for c in range(spec.num_classes) if np.isin(kw[c], ids).any()]
    if len(present) == 1:
        return present[0]
    return None


def contains_keyword(spec: SyntheticTaskSpec, ids: np.ndarray) -> bool:
    return bool(np.isin(spec.keyword_ids().ravel(), ids).any())


@dataclass(eq=False)
class MaskedBatch:
    """A corrupted batch plus flat target bookkeeping.

    ``corrupted_ids`` is right-padded with PAD; ``attention_mask`` marks
    real tokens. Targets are stored flat in row-major (row, col) order:
    ``targets[k]`` is the original token at
    ``(target_rows[k], target_cols[k])``.
    """

    corrupted_ids: np.ndarray
    attention_mask: np.ndarray
    target_rows: np.ndarray
    target_cols: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.targets) == 0:
            raise ConfigurationError("masked batch must have >= 1 target")
        if not (
            len(self.target_rows) == len(self.target_cols) == len(self.targets)
        ):
            raise ConfigurationError("target arrays must align")

    @property
    def num_targets(self) -> int:
        return len(self.targets)

    def mask_positions(self) -> list[np.ndarray]:
        """Target columns per row, one array per batch row."""
        return [
            self.target_cols[self.target_rows == r]
            for r in range(self.corrupted_ids.shape[0])
        ]

    def restored_ids(self) -> np.ndarray:
        """Corrupted ids with the original tokens written back."""
        ids = self.corrupted_ids.copy()
        ids[self.target_rows, self.target_cols] = self.targets
        return ids


@dataclass(eq=False)
class LabeledBatch:
    ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray


def collate_sequences(
    seqs: list[TokenSequence], max_len: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences into (ids, attention_mask) arrays.

    ``max_len`` truncates content while keeping the trailing SEP.
    """
    if not seqs:
        raise ConfigurationError("cannot collate an empty batch")
    clipped = []
    for s in seqs:
        ids = s.ids
        if max_len is not None and len(ids) > max_len:
            ids = np.concatenate((ids[: max_len - 1], [SEP_ID]))
        clipped.append(ids)
    width = max(len(ids) for ids in clipped)
    batch = np.full((len(clipped), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(clipped), width), dtype=bool)
    for i, ids in enumerate(clipped):
        batch[i, : len(ids)] = ids
        mask[i, : len(ids)] = True
    return batch, mask


def collate_labeled(
    examples: list[LabeledExample], max_len: int | None = None
) -> LabeledBatch:
    ids, mask = collate_sequences([e.sequence for e in examples], max_len)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return LabeledBatch(ids=ids, attention_mask=mask, labels=labels)


def _eligible_mask(ids: np.ndarray, attention_mask: np.ndarray) -> np.ndarray:
    return attention_mask & (ids != CLS_ID) & (ids != SEP_ID) & (ids != PAD_ID)


def _select_positions(rng, eligible: np.ndarray, p_mask: float) -> np.ndarray:
    """Bernoulli(p) per eligible position, redrawing any all-zero row."""
    B, L = eligible.shape
    selected = np.zeros((B, L), dtype=bool)
    for i in range(B):
        row_idx = np.flatnonzero(eligible[i])
        if len(row_idx) == 0:
            raise ConfigurationError(
                f"row {i} has no maskable positions"
            )
        while True:
            draw = rng.random(len(row_idx)) < p_mask
            if draw.any():
                break
        selected[i, row_idx[draw]] = True
    return selected


def _masked_batch_from(
    ids: np.ndarray, attention_mask: np.ndarray, selected: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(selected)
    targets = ids[rows, cols].copy()
    return rows.astype(np.int64), cols.astype(np.int64), targets


def corrupt_pretrain(
    batch: list[TokenSequence],
    p_mask: float,
    seed: int,
    vocab_size: int,
    max_len: int | None = None,
) -> MaskedBatch:
    """Corrupt-and-predict masking with the 80/10/10 mix.

    Each eligible position (not CLS, SEP, or PAD) independently becomes a
    prediction target with probability ``p_mask``; rows that select no
    position are redrawn. Of the targets, 80% are replaced by MASK, 10% by
    a uniformly random non-special token, 10% keep the original token.
    ``vocab_size`` bounds the random-replacement draw.
    """
    if not 0.0 < p_mask < 1.0:
        raise ConfigurationError("p_mask must lie in (0, 1)")
    if vocab_size <= 5:
        raise ConfigurationError("vocab_size must exceed the 5 specials")
    rng = np.random.default_rng(seed)
    ids, mask = collate_sequences(batch, max_len)
    selected = _select_positions(rng, _eligible_mask(ids, mask), p_mask)
    rows, cols, targets = _masked_batch_from(ids, mask, selected)

    corrupted = ids.copy()
    action = rng.random(len(targets))
    for k in range(len(targets)):
        if action[k] < 0.8:
            corrupted[rows[k], cols[k]] = MASK_ID
        elif action[k] < 0.9:
            corrupted[rows[k], cols[k]] = int(rng.integers(5, vocab_size))
        # else: keep the original token
    return MaskedBatch(
        corrupted_ids=corrupted,
        attention_mask=mask,
        target_rows=rows,
        target_cols=cols,
        targets=targets,
    )


def corrupt_joint(
    batch: list[TokenSequence],
    p_mask: float,
    seed: int,
    max_len: int | None = None,
) -> MaskedBatch:
    """Mask-only corruption for auxiliary masked-token prediction.

    Same position selection as ``corrupt_pretrain`` but every selected
    position becomes MASK; no random replacement, no kept originals.
    """
    if not 0.0 < p_mask < 1.0:
        raise ConfigurationError("p_mask must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    ids, mask = collate_sequences(batch, max_len)
    selected = _select_positions(rng, _eligible_mask(ids, mask), p_mask)
    rows, cols, targets = _masked_batch_from(ids, mask, selected)
    corrupted = ids.copy()
    corrupted[rows, cols] = MASK_ID
    return MaskedBatch(
        corrupted_ids=corrupted,
        attention_mask=mask,
        target_rows=rows,
        target_cols=cols,
        targets=targets,
    )


def save_corpus(
    seqs: list[TokenSequence],
    vocab: Vocabulary,
    text_path: str | Path,
    manifest_path: str | Path,
) -> None:
    """Write one sequence per line as token strings, domains in a sidecar."""
    lines = []
    for s in seqs:
        lines.append(" ".join(vocab.token_of(int(i)) for i in s.ids))
    Path(text_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = {
        "count": len(seqs),
        "domains": [s.domain.value for s in seqs],
    }
    Path(manifest_path).write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )


def load_corpus(
    text_path: str | Path,
    manifest_path: str | Path,
    vocab: Vocabulary,
) -> list[TokenSequence]:
    lines = Path(text_path).read_text(encoding="utf-8").splitlines()
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    domains = manifest["domains"]
    if len(lines) != manifest["count"] or len(domains) != manifest["count"]:
        raise ConfigurationError("corpus text and manifest disagree on count")
    out = []
    for line, dom in zip(lines, domains):
        ids = np.array([vocab.id_of(t) for t in line.split()], dtype=np.int64)
        out.append(TokenSequence(ids=ids, domain=Domain(dom)))
    return out
