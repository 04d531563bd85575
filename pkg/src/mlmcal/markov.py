"""First-order Markov corpus with exact masked-token posteriors.

This side generator exists to validate the calibration pipeline end to
end: for text drawn from a known Markov chain, the true conditional
distribution of a masked token given the visible tokens is computable
exactly with the forward-backward recursion. A predictor that outputs
those posteriors is perfectly calibrated by construction, so the measured
calibration error of that predictor bounds the pipeline's own bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import (
    CLS_ID,
    MASK_ID,
    SEP_ID,
    SPECIAL_TOKENS,
    Domain,
    MaskedBatch,
    TokenSequence,
    Vocabulary,
)
from .errors import ConfigurationError

__all__ = [
    "MarkovChainSpec",
    "build_markov_vocab",
    "chain_parameters",
    "generate_markov_corpus",
    "exact_mask_posterior",
    "ExactMarkovPredictor",
]


@dataclass(frozen=True)
class MarkovChainSpec:
    """A random but fixed first-order chain over ``num_states`` tokens.

    ``concentration`` is the Dirichlet parameter for each transition row;
    values below 1 give peaked rows, which spreads predictor confidence
    across the unit interval and exercises every calibration bin.
    ``seed`` is part of the chain's identity: the same spec always denotes
    the same transition matrix.
    """

    num_states: int = 12
    seq_len_range: tuple[int, int] = (12, 20)
    concentration: float = 0.5
    seed: int = 7

    def __post_init__(self):
        if self.num_states < 2:
            raise ConfigurationError("num_states must be >= 2")
        lo, hi = self.seq_len_range
        if lo < 4 or hi < lo:
            raise ConfigurationError("seq_len_range must satisfy 4 <= lo <= hi")
        if self.concentration <= 0:
            raise ConfigurationError("concentration must be positive")

    @property
    def vocab_size(self) -> int:
        return 5 + self.num_states


def build_markov_vocab(spec: MarkovChainSpec) -> Vocabulary:
    states = tuple(f"s{i}" for i in range(spec.num_states))
    return Vocabulary(tokens=SPECIAL_TOKENS + states)


def chain_parameters(spec: MarkovChainSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (initial distribution pi, transition matrix T), rows normalized."""
    rng = np.random.default_rng(spec.seed)
    S = spec.num_states
    alpha = np.full(S, spec.concentration)
    pi = rng.dirichlet(alpha)
    T = rng.dirichlet(alpha, size=S)
    return pi, T


def generate_markov_corpus(
    spec: MarkovChainSpec, n: int, seed: int
) -> list[TokenSequence]:
    """Sample sequences CLS s_0 ... s_{m-1} SEP from the chain."""
    pi, T = chain_parameters(spec)
    rng = np.random.default_rng(seed)
    lo, hi = spec.seq_len_range
    out = []
    for _ in range(n):
        total = int(rng.integers(lo, hi + 1))
        m = total - 2
        states = np.empty(m, dtype=np.int64)
        states[0] = rng.choice(spec.num_states, p=pi)
        for j in range(1, m):
            states[j] = rng.choice(spec.num_states, p=T[states[j - 1]])
        ids = np.concatenate(([CLS_ID], states + 5, [SEP_ID]))
        out.append(TokenSequence(ids=ids, domain=Domain.PRETRAIN))
    return out


def _row_posteriors(
    spec: MarkovChainSpec,
    pi: np.ndarray,
    T: np.ndarray,
    row_ids: np.ndarray,
) -> np.ndarray:
    """Forward-backward over one row's content region.

    ``row_ids`` is the content slice (no CLS/SEP/PAD); MASK marks hidden
    positions. Returns an (m, num_states) array of exact posteriors
    p(state_j | visible tokens).
    """
    S = spec.num_states
    m = len(row_ids)
    evid = np.ones((m, S))
    for j in range(m):
        tok = int(row_ids[j])
        if tok != MASK_ID:
            evid[j] = 0.0
            evid[j, tok - 5] = 1.0
    alpha = np.zeros((m, S))
    alpha[0] = pi * evid[0]
    alpha[0] /= alpha[0].sum()
    for j in range(1, m):
        alpha[j] = (alpha[j - 1] @ T) * evid[j]
        alpha[j] /= alpha[j].sum()
    beta = np.zeros((m, S))
    beta[m - 1] = 1.0
    for j in range(m - 2, -1, -1):
        beta[j] = T @ (beta[j + 1] * evid[j + 1])
        beta[j] /= beta[j].sum()
    post = alpha * beta
    post /= post.sum(axis=1, keepdims=True)
    return post


def _grouped_posteriors(
    spec: MarkovChainSpec,
    pi: np.ndarray,
    T: np.ndarray,
    content: np.ndarray,
) -> np.ndarray:
    """Batched forward-backward over rows of equal content length.

    ``content`` is (R, m) with MASK marking hidden positions. Returns the
    (R, m, num_states) posteriors; the recursion runs over positions with
    all rows advanced at once.
    """
    S = spec.num_states
    R, m = content.shape
    visible = content != MASK_ID
    idx = np.clip(content - 5, 0, S - 1)
    onehot = np.zeros((R, m, S))
    onehot[
        np.arange(R)[:, None], np.arange(m)[None, :], idx
    ] = 1.0
    evid = np.where(visible[:, :, None], onehot, 1.0)
    alpha = np.empty((R, m, S))
    a = pi[None, :] * evid[:, 0]
    a /= a.sum(axis=1, keepdims=True)
    alpha[:, 0] = a
    for j in range(1, m):
        a = (a @ T) * evid[:, j]
        a /= a.sum(axis=1, keepdims=True)
        alpha[:, j] = a
    beta = np.empty((R, m, S))
    beta[:, m - 1] = 1.0
    b = np.ones((R, S))
    for j in range(m - 2, -1, -1):
        b = (b * evid[:, j + 1]) @ T.T
        b /= b.sum(axis=1, keepdims=True)
        beta[:, j] = b
    post = alpha * beta
    post /= post.sum(axis=2, keepdims=True)
    return post


def exact_mask_posterior(
    spec: MarkovChainSpec, batch: MaskedBatch
) -> np.ndarray:
    """Exact p(token | visible context) for every target in the batch.

    Returns (num_targets, vocab_size) rows over the full vocabulary with
    zero mass on specials, aligned with the batch's flat target order.
    Only mask-only corruption is supported: a corrupted batch with
    random-replacement noise would make visible tokens untrustworthy and
    the closed-form posterior invalid.
    """
    corrupted = batch.corrupted_ids
    mask = batch.attention_mask
    if np.any(corrupted[batch.target_rows, batch.target_cols] != MASK_ID):
        raise ConfigurationError(
            "exact posterior requires mask-only corruption"
        )
    pi, T = chain_parameters(spec)
    out = np.zeros((batch.num_targets, spec.vocab_size))
    content_len = mask.sum(axis=1) - 2
    target_len = content_len[batch.target_rows]
    # Rows of equal length share one batched sweep.
    for m in np.unique(target_len):
        sel = target_len == m
        rows = np.unique(batch.target_rows[sel])
        content = corrupted[rows[:, None], 1 + np.arange(m)[None, :]]
        post = _grouped_posteriors(spec, pi, T, content)
        slot = np.full(corrupted.shape[0], -1)
        slot[rows] = np.arange(len(rows))
        out[sel, 5:] = post[
            slot[batch.target_rows[sel]], batch.target_cols[sel] - 1
        ]
    return out


class ExactMarkovPredictor:
    """Predictor adapter: MaskedBatch -> (num_targets, vocab_size) probs."""

    def __init__(self, spec: MarkovChainSpec):
        self.spec = spec

    def __call__(self, batch: MaskedBatch) -> np.ndarray:
        return exact_mask_posterior(self.spec, batch)
