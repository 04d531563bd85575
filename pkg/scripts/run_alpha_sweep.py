"""Sweep the auxiliary masked-token loss weight for joint learning.

Reuses one pre-trained checkpoint and one set of corpora, fine-tunes a
joint-learning run per (alpha, seed), and writes a TSV with accuracy,
calibration error, outlier confidence, and the mean pooled-representation
drift from the pre-trained encoder on the out-of-domain split.

Usage:
    python3 scripts/run_alpha_sweep.py --out runs/alpha \
        [--alphas 0.05 0.1 0.3 1.0 3.0] [--seeds 2] [--method jl_d]
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mlmcal.calibration import compute_ece, predict_classifier, records_from_probs
from mlmcal.config import load_preset
from mlmcal.corpus import Domain
from mlmcal.model import collate_sequences, encode
from mlmcal.tuning import Method, train

from run_trend_study import build_shared_state


def pooled_reps(store, seqs) -> np.ndarray:
    store.model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(seqs), 128):
            chunk = seqs[start : start + 128]
            ids, mask = collate_sequences(chunk, max_len=store.config.max_len)
            out.append(encode(store, ids, mask).pooled.numpy())
    return np.concatenate(out, axis=0)


def evaluate(store, pretrained, data) -> dict:
    metrics = {}
    for name, split in (("id", data.id_eval), ("od", data.od_eval)):
        probs, labels = predict_classifier(store, split)
        records = records_from_probs(probs, labels, Domain(name))
        metrics[f"{name}_acc"] = float(
            np.mean([r.pred_label == r.true_label for r in records])
        )
        metrics[f"{name}_ece"] = compute_ece(records, num_bins=10).ece
    probs, _ = predict_classifier(store, data.outlier_eval)
    metrics["outlier_conf"] = float(probs.max(axis=1).mean())
    od_text = [ex.sequence for ex in data.od_eval]
    drift = pooled_reps(store, od_text) - pooled_reps(pretrained, od_text)
    metrics["od_repdist"] = float(np.linalg.norm(drift, axis=1).mean())
    return metrics


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument(
        "--alphas", type=float, nargs="+", default=[0.05, 0.1, 0.3, 1.0, 3.0]
    )
    parser.add_argument("--seeds", type=int, default=2)
    parser.add_argument("--method", default="jl_d", choices=["jl_d", "jl_p"])
    parser.add_argument("--classes", type=int, default=3)
    parser.add_argument("--root-seed", type=int, default=0)
    args = parser.parse_args(argv)

    _, pretrained, data, pretrain_corpus = build_shared_state(
        args.classes, args.root_seed
    )
    preset = load_preset(f"{args.method}_k{args.classes}")
    corpus = pretrain_corpus if preset.method.method == Method.JL_P else None

    fields = ("id_acc", "id_ece", "od_acc", "od_ece", "outlier_conf",
              "od_repdist")
    rows = []
    for alpha in args.alphas:
        for seed in range(args.seeds):
            method = preset.method
            method.alpha_mlm = alpha
            method.seed = seed
            store = pretrained.clone()
            store, _ = train(method, data, corpus, store)
            metrics = evaluate(store, pretrained, data)
            rows.append((alpha, seed, metrics))
            cells = " ".join(f"{k}={metrics[k]:.4f}" for k in fields)
            print(f"alpha={alpha} seed={seed} {cells}")

    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "alpha_sweep.tsv"
    lines = ["alpha\tseed\t" + "\t".join(fields)]
    for alpha, seed, metrics in rows:
        lines.append(
            f"{alpha}\t{seed}\t"
            + "\t".join(repr(metrics[k]) for k in fields)
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
