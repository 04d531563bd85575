"""Label-conditioned sequence generation by iterative mask filling with
rejection.

Generation starts from a fully masked sequence of fixed length and runs a
fixed number of refinement iterations. Each iteration fills the currently
masked slots from the model's masked-token distributions (sampled, or
argmax in greedy mode), re-masks the lowest-probability slots according to
a linearly shrinking schedule, and then subjects the candidate to a
rejection test driven by the classifier head: the candidate is accepted
with probability min(1, p(y* | candidate) / tau). A rejected candidate is
redrawn; exhausting the retry budget raises ``SamplingFailure`` carrying
the iteration index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import CLS_ID, MASK_ID, SEP_ID
from .errors import ConfigurationError, SamplingFailure
from .model import ParameterStore, cls_logits, encode, mlm_logits

__all__ = [
    "SamplerConfig",
    "SampleResult",
    "mask_schedule",
    "mask_predict_sample",
]


@dataclass(frozen=True)
class SamplerConfig:
    target_label: int
    num_tokens: int = 12
    iterations: int = 6
    tau: float = 1.0
    max_retries: int = 50
    proposal_temperature: float = 1.0
    greedy: bool = False

    def __post_init__(self):
        if self.num_tokens < 1:
            raise ConfigurationError("num_tokens must be >= 1")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.max_retries < 1:
            raise ConfigurationError("max_retries must be >= 1")
        if self.proposal_temperature <= 0 and not self.greedy:
            raise ConfigurationError(
                "proposal_temperature must be positive (or use greedy)"
            )
        if self.target_label < 0:
            raise ConfigurationError("target_label must be non-negative")


def mask_schedule(num_tokens: int, iterations: int, t: int) -> int:
    """Number of slots re-masked at the end of iteration t:
    floor(num_tokens * (iterations - 1 - t) / iterations). Decreases to 0
    at the final iteration, so the last candidate is fully filled."""
    if t < 0 or t >= iterations:
        raise ConfigurationError("iteration index out of range")
    return (num_tokens * (iterations - 1 - t)) // iterations


@dataclass(frozen=True)
class SampleResult:
    ids: np.ndarray  # (num_tokens,) content token ids, no specials
    accept_probability: float  # classifier prob of the target on the result
    attempts: tuple[int, ...]  # accepted attempt number per iteration
    mask_counts: tuple[int, ...]  # MASK count at the start of each iteration


def _default_classifier(store: ParameterStore):
    def classify(ids: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            hidden = encode(store, ids[None])
            logits = cls_logits(store, hidden)
            return torch.softmax(logits.double(), dim=-1)[0].numpy()

    return classify


def mask_predict_sample(
    store: ParameterStore,
    config: SamplerConfig,
    seed: int,
    classifier_fn=None,
) -> SampleResult:
    """Generate one sequence conditioned on ``config.target_label``.

    ``classifier_fn`` maps a full id sequence (CLS ... SEP, possibly with
    MASK) to class probabilities; it defaults to the store's own
    classification head. Proposal support is restricted to non-special
    tokens, so the result never contains specials.
    """
    N = config.num_tokens
    if N + 2 > store.config.max_len:
        raise ConfigurationError(
            f"num_tokens {N} plus specials exceeds max_len "
            f"{store.config.max_len}"
        )
    if config.target_label >= store.config.num_classes:
        raise ConfigurationError("target_label out of range")
    if classifier_fn is None:
        classifier_fn = _default_classifier(store)
    rng = np.random.default_rng(seed)
    V = store.config.vocab_size
    content_lo = 5  # first non-special token id

    ids = np.full(N + 2, MASK_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[-1] = SEP_ID
    slots = np.arange(1, N + 1)

    attempts = []
    mask_counts = []
    store.model.eval()
    for t in range(config.iterations):
        mask_counts.append(int((ids[slots] == MASK_ID).sum()))
        n_remask = mask_schedule(N, config.iterations, t)
        accepted = False
        for attempt in range(1, config.max_retries + 1):
            with torch.no_grad():
                hidden = encode(store, ids[None])
                logits = mlm_logits(
                    store, hidden, np.zeros(N, dtype=np.int64), slots
                ).double()
            probs_full = torch.softmax(logits, dim=-1).numpy()
            candidate = ids.copy()
            masked = candidate[slots] == MASK_ID
            for j in np.flatnonzero(masked):
                row_logits = logits[j, content_lo:V].numpy()
                if config.greedy:
                    choice = content_lo + int(row_logits.argmax())
                else:
                    scaled = row_logits / config.proposal_temperature
                    scaled -= scaled.max()
                    p = np.exp(scaled)
                    p /= p.sum()
                    choice = content_lo + int(rng.choice(len(p), p=p))
                candidate[slots[j]] = choice
            # The rejection test sees the fully filled candidate.
            class_probs = classifier_fn(candidate)
            accept_p = min(
                1.0, float(class_probs[config.target_label]) / config.tau
            )
            if rng.random() <= accept_p:
                # Prediction probability of the token occupying each slot,
                # under this iteration's masked-context forward pass; the
                # n lowest-scoring slots go back to MASK.
                if n_remask > 0:
                    scores = probs_full[np.arange(N), candidate[slots]]
                    lowest = np.argsort(scores, kind="stable")[:n_remask]
                    candidate[slots[lowest]] = MASK_ID
                ids = candidate
                attempts.append(attempt)
                accepted = True
                break
        if not accepted:
            raise SamplingFailure(
                f"retry budget {config.max_retries} exhausted at "
                f"iteration {t}",
                iteration=t,
            )
    final_probs = classifier_fn(ids)
    return SampleResult(
        ids=ids[slots].copy(),
        accept_probability=float(final_probs[config.target_label]),
        attempts=tuple(attempts),
        mask_counts=tuple(mask_counts),
    )
