"""Calibration measurement: expected calibration error, reliability bins,
confidence histograms, confidence trajectories, and masked-token
calibration evaluation.

Conventions: confidences are binned into ``num_bins`` equal-width
half-open intervals ((m-1)/M, m/M]; the expected calibration error is the
bin-count-weighted mean absolute gap between bin accuracy and bin mean
confidence. Unlabeled records (true_label < 0) may appear in confidence
histograms and mean-confidence trajectories but never in accuracy or
calibration-error computations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import (
    Domain,
    LabeledExample,
    MaskedBatch,
    TokenSequence,
    collate_sequences,
    corrupt_joint,
    corrupt_pretrain,
)
from .errors import ConfigurationError
from .model import ParameterStore, cls_logits, encode, mlm_logits
from .seeding import derive_seed

__all__ = [
    "PredictionRecord",
    "BinStats",
    "CalibrationReport",
    "Histogram",
    "TrajectoryRow",
    "records_from_probs",
    "compute_ece",
    "reliability_bins",
    "confidence_histogram",
    "track_confidence",
    "predict_classifier",
    "model_mlm_predictor",
    "mlm_calibration_eval",
    "write_prediction_dump",
    "read_prediction_dump",
]

_ATOL = 1e-6


@dataclass(frozen=True)
class PredictionRecord:
    """One prediction. ``true_label`` is -1 when no label exists."""

    true_label: int
    pred_label: int
    confidence: float
    class_probs: tuple[float, ...]
    domain: Domain

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64)
        if len(probs) < 2:
            raise ConfigurationError("need at least two classes")
        if abs(probs.sum() - 1.0) > _ATOL or (probs < -_ATOL).any():
            raise ConfigurationError("class_probs must form a distribution")
        if abs(self.confidence - probs.max()) > _ATOL:
            raise ConfigurationError("confidence must equal max class prob")
        if self.pred_label != int(probs.argmax()):
            raise ConfigurationError("pred_label must be the argmax class")
        if self.true_label >= len(probs):
            raise ConfigurationError("true_label out of range")


def records_from_probs(
    probs: np.ndarray,
    labels: np.ndarray | None,
    domain: Domain,
) -> list[PredictionRecord]:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ConfigurationError("probs must be (n, num_classes)")
    n = probs.shape[0]
    lab = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels)
    out = []
    for i in range(n):
        row = probs[i]
        out.append(
            PredictionRecord(
                true_label=int(lab[i]),
                pred_label=int(row.argmax()),
                confidence=float(row.max()),
                class_probs=tuple(float(x) for x in row),
                domain=domain,
            )
        )
    return out


@dataclass(frozen=True)
class BinStats:
    index: int  # 1-based bin number m, interval ((m-1)/M, m/M]
    lower: float
    upper: float
    count: int
    accuracy: float | None
    mean_confidence: float | None


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    num_bins: int
    num_records: int
    bins: tuple[BinStats, ...]
    domain: str | None = None

    def to_dict(self) -> dict:
        return {
            "ece": self.ece,
            "num_bins": self.num_bins,
            "num_records": self.num_records,
            "domain": self.domain,
            "bins": [asdict(b) for b in self.bins],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        return cls(
            ece=d["ece"],
            num_bins=d["num_bins"],
            num_records=d["num_records"],
            bins=tuple(BinStats(**b) for b in d["bins"]),
            domain=d.get("domain"),
        )


def _bin_index(conf: np.ndarray, num_bins: int) -> np.ndarray:
    """0-based bin index for half-open bins ((m-1)/M, m/M]."""
    interior = np.arange(1, num_bins) / num_bins
    return np.digitize(conf, interior, right=True)


def compute_ece(
    records: Sequence[PredictionRecord],
    num_bins: int = 10,
    domain: str | None = None,
) -> CalibrationReport:
    """Expected calibration error over labeled records."""
    if num_bins < 1:
        raise ConfigurationError("num_bins must be >= 1")
    if len(records) == 0:
        raise ConfigurationError("cannot compute calibration of zero records")
    if any(r.true_label < 0 for r in records):
        raise ConfigurationError(
            "calibration error is undefined for unlabeled records"
        )
    conf = np.array([r.confidence for r in records])
    correct = np.array(
        [r.pred_label == r.true_label for r in records], dtype=np.float64
    )
    idx = _bin_index(conf, num_bins)
    n = len(records)
    bins = []
    ece = 0.0
    for m in range(num_bins):
        sel = idx == m
        count = int(sel.sum())
        if count:
            acc = float(correct[sel].mean())
            mc = float(conf[sel].mean())
            ece += (count / n) * abs(acc - mc)
        else:
            acc = None
            mc = None
        bins.append(
            BinStats(
                index=m + 1,
                lower=m / num_bins,
                upper=(m + 1) / num_bins,
                count=count,
                accuracy=acc,
                mean_confidence=mc,
            )
        )
    return CalibrationReport(
        ece=float(ece),
        num_bins=num_bins,
        num_records=n,
        bins=tuple(bins),
        domain=domain,
    )


def reliability_bins(
    records: Sequence[PredictionRecord], num_bins: int = 10
) -> tuple[BinStats, ...]:
    return compute_ece(records, num_bins).bins


@dataclass(frozen=True)
class Histogram:
    """Counts over equal-width confidence buckets spanning [1/K, 1]."""

    edges: tuple[float, ...]
    counts: tuple[int, ...]


def confidence_histogram(
    records: Sequence[PredictionRecord], num_buckets: int = 10
) -> Histogram:
    """Histogram of confidences. The support starts at 1/K because the
    max of a K-class distribution cannot fall below it; bucket boundaries
    depend only on (K, num_buckets)."""
    if num_buckets < 1:
        raise ConfigurationError("num_buckets must be >= 1")
    if len(records) == 0:
        raise ConfigurationError("cannot build a histogram of zero records")
    ks = {len(r.class_probs) for r in records}
    if len(ks) != 1:
        raise ConfigurationError("records mix different class counts")
    k = ks.pop()
    edges = np.linspace(1.0 / k, 1.0, num_buckets + 1)
    conf = np.array([r.confidence for r in records])
    idx = np.digitize(conf, edges[1:-1], right=True)
    counts = np.bincount(idx, minlength=num_buckets)
    return Histogram(
        edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
    )


def predict_classifier(
    store: ParameterStore,
    data: Sequence[LabeledExample] | Sequence[TokenSequence],
    batch_size: int = 128,
) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities for a split. Returns (probs, labels); labels
    are -1 for unlabeled sequences."""
    if len(data) == 0:
        raise ConfigurationError("empty evaluation split")
    if isinstance(data[0], LabeledExample):
        seqs = [e.sequence for e in data]
        labels = np.array([e.label for e in data], dtype=np.int64)
    else:
        seqs = list(data)
        labels = np.full(len(data), -1, dtype=np.int64)
    probs = []
    store.model.eval()
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            ids, mask = collate_sequences(chunk, max_len=store.config.max_len)
            hidden = encode(store, ids, mask)
            logits = cls_logits(store, hidden)
            probs.append(torch.softmax(logits.double(), dim=-1).numpy())
    return np.concatenate(probs, axis=0), labels


@dataclass(frozen=True)
class TrajectoryRow:
    checkpoint: int
    domain: Domain
    n: int
    mean_confidence: float
    accuracy: float | None
    ece: float | None


def track_confidence(
    stores: Sequence[ParameterStore],
    splits: dict[Domain, Sequence],
    num_bins: int = 10,
    batch_size: int = 128,
) -> list[TrajectoryRow]:
    """Evaluate every checkpoint on every split; one row per pair.

    Accuracy and calibration error are reported only for labeled splits;
    unlabeled splits (outliers) contribute mean confidence alone.
    """
    rows = []
    for t, store in enumerate(stores):
        for domain, data in splits.items():
            probs, labels = predict_classifier(store, data, batch_size)
            records = records_from_probs(
                probs, labels if labels.min() >= 0 else None, domain
            )
            mean_conf = float(np.mean([r.confidence for r in records]))
            if labels.min() >= 0:
                acc = float(
                    np.mean([r.pred_label == r.true_label for r in records])
                )
                ece = compute_ece(records, num_bins).ece
            else:
                acc = None
                ece = None
            rows.append(
                TrajectoryRow(
                    checkpoint=t,
                    domain=domain,
                    n=len(records),
                    mean_confidence=mean_conf,
                    accuracy=acc,
                    ece=ece,
                )
            )
    return rows


def model_mlm_predictor(
    store: ParameterStore, batch_rows: int = 64
) -> Callable[[MaskedBatch], np.ndarray]:
    """Adapt a model to the predictor protocol: MaskedBatch ->
    (num_targets, vocab_size) probabilities."""

    def predict(batch: MaskedBatch) -> np.ndarray:
        store.model.eval()
        out = np.zeros((batch.num_targets, store.config.vocab_size))
        with torch.no_grad():
            B = batch.corrupted_ids.shape[0]
            for start in range(0, B, batch_rows):
                stop = min(start + batch_rows, B)
                sel = (batch.target_rows >= start) & (batch.target_rows < stop)
                if not sel.any():
                    continue
                hidden = encode(
                    store,
                    batch.corrupted_ids[start:stop],
                    batch.attention_mask[start:stop],
                )
                logits = mlm_logits(
                    store,
                    hidden,
                    batch.target_rows[sel] - start,
                    batch.target_cols[sel],
                )
                out[sel] = torch.softmax(logits.double(), dim=-1).numpy()
        return out

    return predict


def mlm_calibration_eval(
    predictor,
    corpus: Sequence[TokenSequence],
    mask_levels: Sequence[float] = (0.15, 0.3, 0.5),
    num_bins: int = 10,
    seed: int = 0,
    mode: str = "pretrain",
    vocab_size: int | None = None,
) -> dict[float, CalibrationReport]:
    """Masked-token calibration at several masking levels.

    ``predictor`` is either a ParameterStore or a callable mapping a
    MaskedBatch to (num_targets, vocab_size) probabilities. ``mode``
    selects the corruption: "pretrain" (mask / random / keep mix, needs
    ``vocab_size``) or "mask_only". Records treat the original token as
    the true label over the full vocabulary.
    """
    if len(corpus) == 0:
        raise ConfigurationError("empty evaluation corpus")
    if isinstance(predictor, ParameterStore):
        vocab_size = predictor.config.vocab_size
        predictor = model_mlm_predictor(predictor)
    if mode not in ("pretrain", "mask_only"):
        raise ConfigurationError(f"unknown corruption mode {mode!r}")
    if mode == "pretrain" and vocab_size is None:
        raise ConfigurationError("pretrain corruption needs vocab_size")
    out = {}
    for level in mask_levels:
        level_seed = derive_seed(seed, f"mlm-eval:{level!r}")
        if mode == "pretrain":
            batch = corrupt_pretrain(list(corpus), level, level_seed, vocab_size)
        else:
            batch = corrupt_joint(list(corpus), level, level_seed)
        probs = predictor(batch)
        records = []
        for k in range(batch.num_targets):
            row = probs[k]
            seq_domain = corpus[int(batch.target_rows[k])].domain
            records.append(
                PredictionRecord(
                    true_label=int(batch.targets[k]),
                    pred_label=int(row.argmax()),
                    confidence=float(row.max()),
                    class_probs=tuple(float(x) for x in row),
                    domain=seq_domain,
                )
            )
        out[float(level)] = compute_ece(records, num_bins)
    return out


def write_prediction_dump(
    records: Sequence[PredictionRecord], path: str | Path
) -> None:
    """TSV dump: one record per row, probabilities in repr form so the
    file round-trips bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = len(records[0].class_probs) if records else 0
    header = "true_label\tpred_label\tconfidence\tdomain\t" + "\t".join(
        f"p{j}" for j in range(k)
    )
    lines = [header]
    for r in records:
        cells = "\t".join(repr(p) for p in r.class_probs)
        lines.append(
            f"{r.true_label}\t{r.pred_label}\t{repr(r.confidence)}\t"
            f"{r.domain.value}\t{cells}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_prediction_dump(path: str | Path) -> list[PredictionRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines[1:]:
        cells = line.split("\t")
        out.append(
            PredictionRecord(
                true_label=int(cells[0]),
                pred_label=int(cells[1]),
                confidence=float(cells[2]),
                class_probs=tuple(float(c) for c in cells[4:]),
                domain=Domain(cells[3]),
            )
        )
    return out
