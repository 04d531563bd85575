"""Multi-seed trend study: full fine-tuning vs joint learning.

Shares one pre-trained checkpoint and one set of task corpora across all
method/seed combinations, fine-tunes each, and writes per-epoch
confidence/accuracy/calibration rows to a TSV plus a seed-averaged
summary. The three directional checks printed at the end mirror the
acceptance gate.

Usage:
    python3 scripts/run_trend_study.py --out runs/trends [--seeds 5]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mlmcal.config import load_preset
from mlmcal.corpus import Domain, generate_corpus, generate_labeled
from mlmcal.model import init_params
from mlmcal.seeding import derive_seed
from mlmcal.tuning import FinetuneData, Method, pretrain_mlm, train

METHODS = ("full_ft", "jl_d", "jl_p")


def build_shared_state(k: int, root_seed: int):
    """Pre-train once and fix the task corpora for every run."""
    cfg = load_preset(f"full_ft_k{k}")
    cfg.seed = root_seed
    pretrain_corpus = generate_corpus(
        cfg.task,
        cfg.data.n_pretrain,
        Domain.PRETRAIN,
        derive_seed(cfg.seed, "corpus:pretrain"),
    )
    store = init_params(cfg.encoder_config(), derive_seed(cfg.seed, "init"))
    store, _ = pretrain_mlm(store, pretrain_corpus, cfg.pretrain)
    data = FinetuneData(
        train=generate_labeled(
            cfg.task,
            cfg.data.n_train,
            Domain.ID,
            derive_seed(cfg.seed, "corpus:train"),
        ),
        id_eval=generate_labeled(
            cfg.task,
            cfg.data.n_eval,
            Domain.ID,
            derive_seed(cfg.seed, "corpus:id-eval"),
        ),
        od_eval=generate_labeled(
            cfg.task,
            cfg.data.n_eval,
            Domain.OD,
            derive_seed(cfg.seed, "corpus:od-eval"),
        ),
        outlier_eval=generate_corpus(
            cfg.task,
            cfg.data.n_outlier,
            Domain.OUTLIER,
            derive_seed(cfg.seed, "corpus:outlier"),
        ),
    )
    return cfg, store, data, pretrain_corpus


def run_study(k: int, n_seeds: int, root_seed: int = 0):
    """Returns per-epoch rows: (method, seed, epoch, metrics dict)."""
    _, pretrained, data, pretrain_corpus = build_shared_state(k, root_seed)
    rows = []
    for method_name in METHODS:
        preset = load_preset(f"{method_name}_k{k}")
        for seed in range(n_seeds):
            method = preset.method
            method.seed = seed
            store = pretrained.clone()
            corpus = (
                pretrain_corpus if method.method == Method.JL_P else None
            )
            _, log = train(method, data, corpus, store)
            for rec in log.epochs:
                rows.append((method_name, seed, rec["epoch"], rec))
    return rows


def epoch_means(rows, method, field_path):
    """Seed-averaged metric per epoch for one method."""
    out = {}
    for m, _, epoch, rec in rows:
        if m != method:
            continue
        value = rec
        for key in field_path:
            value = value[key]
        out.setdefault(epoch, []).append(value)
    return {e: float(np.mean(v)) for e, v in sorted(out.items())}


def write_tsv(rows, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        "method\tseed\tepoch\tid_acc\tid_ece\tid_conf\t"
        "od_acc\tod_ece\tod_conf\toutlier_conf"
    )
    lines = [header]
    for method, seed, epoch, rec in rows:
        lines.append(
            "\t".join(
                [
                    method,
                    str(seed),
                    str(epoch),
                    repr(rec["id"]["accuracy"]),
                    repr(rec["id"]["ece"]),
                    repr(rec["id"]["mean_confidence"]),
                    repr(rec["od"]["accuracy"]),
                    repr(rec["od"]["ece"]),
                    repr(rec["od"]["mean_confidence"]),
                    repr(rec["outlier"]["mean_confidence"]),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--classes", type=int, default=3)
    parser.add_argument("--root-seed", type=int, default=0)
    args = parser.parse_args(argv)

    rows = run_study(args.classes, args.seeds, args.root_seed)
    write_tsv(rows, args.out / "trend_study.tsv")

    final_epoch = max(epoch for _, _, epoch, _ in rows)
    print(f"seed-averaged metrics at epoch {final_epoch}:")
    for method in METHODS:
        od_ece = epoch_means(rows, method, ("od", "ece"))[final_epoch]
        od_conf = epoch_means(rows, method, ("od", "mean_confidence"))[
            final_epoch
        ]
        out_conf = epoch_means(
            rows, method, ("outlier", "mean_confidence")
        )[final_epoch]
        id_acc = epoch_means(rows, method, ("id", "accuracy"))[final_epoch]
        print(
            f"  {method:8s} id_acc={id_acc:.3f} od_ece={od_ece:.3f} "
            f"od_conf={od_conf:.3f} outlier_conf={out_conf:.3f}"
        )

    full_out = epoch_means(rows, "full_ft", ("outlier", "mean_confidence"))
    full_od = epoch_means(rows, "full_ft", ("od", "mean_confidence"))
    trajectory = [full_out[e] for e in sorted(full_out)]
    checks = [
        (
            "full_ft outlier confidence non-decreasing",
            all(a <= b + 1e-12 for a, b in zip(trajectory, trajectory[1:])),
        ),
        (
            "full_ft final outlier confidence exceeds od confidence",
            full_out[final_epoch] > full_od[final_epoch],
        ),
        (
            "jl_d od ece <= full_ft od ece",
            epoch_means(rows, "jl_d", ("od", "ece"))[final_epoch]
            <= epoch_means(rows, "full_ft", ("od", "ece"))[final_epoch],
        ),
        (
            "jl_p outlier confidence <= jl_d outlier confidence",
            epoch_means(rows, "jl_p", ("outlier", "mean_confidence"))[
                final_epoch
            ]
            <= epoch_means(rows, "jl_d", ("outlier", "mean_confidence"))[
                final_epoch
            ],
        ),
    ]
    for label, ok in checks:
        print(f"  [{'pass' if ok else 'FAIL'}] {label}")
    print(f"wrote {args.out / 'trend_study.tsv'}")
    return 0 if all(ok for _, ok in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
