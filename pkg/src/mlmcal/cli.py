"""Command-line entry points.

Five subcommands cover the full workflow:

* ``pretrain``: build the vocabulary and pre-training corpus, train the
  masked language model, save the checkpoint, and report masked-token
  calibration on held-out text at several masking levels.
* ``finetune``: load a pre-trained checkpoint, freeze the snapshot,
  fine-tune with the configured method, save the checkpoint and logs.
* ``evaluate``: run a checkpoint over the in-domain, domain-shifted, and
  outlier splits; write prediction dumps, calibration reports,
  representation dumps, and representation-drift summaries.
* ``sample``: generate label-conditioned sequences by iterative mask
  filling with rejection.
* ``report``: aggregate several fine-tuning runs (same data and encoder,
  different method seeds) into a comparison table, plus a sweep file when
  runs differ in the auxiliary-loss weight.

Every command is deterministic given its config and seed. Commands exit 0
on success; failures print a single ``error: ...`` line to stderr and
exit 2. No command mutates an input checkpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .calibration import (
    compute_ece,
    confidence_histogram,
    mlm_calibration_eval,
    predict_classifier,
    records_from_probs,
    write_prediction_dump,
)
from .config import ExperimentConfig, load_preset, preset_names
from .corpus import (
    Domain,
    build_vocabulary,
    generate_corpus,
    generate_labeled,
    save_corpus,
)
from .errors import ConfigurationError, SamplingFailure
from .model import (
    dump_representations,
    encode,
    init_params,
    load_checkpoint,
    load_representations,
    save_checkpoint,
    snapshot_pretrained,
)
from .sampler import SamplerConfig, mask_predict_sample
from .seeding import derive_seed
from .tuning import FinetuneData, Method, pretrain_mlm, train

__all__ = [
    "main",
    "run_pretrain",
    "run_finetune",
    "run_evaluate",
    "run_sample",
    "run_report",
]


def _resolve_config(args) -> ExperimentConfig:
    if getattr(args, "preset", None) and getattr(args, "config", None):
        raise ConfigurationError("give either --preset or --config, not both")
    if getattr(args, "preset", None):
        cfg = load_preset(args.preset)
    elif getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    else:
        raise ConfigurationError("one of --preset or --config is required")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "method_seed", None) is not None:
        cfg.method.seed = args.method_seed
    return cfg


def _find_run_config(checkpoint: Path) -> ExperimentConfig | None:
    run_dir = checkpoint.parent.parent
    candidate = run_dir / "config.json"
    if candidate.exists():
        return ExperimentConfig.load(candidate)
    return None


def _require_config(args, checkpoint: Path) -> ExperimentConfig:
    if getattr(args, "preset", None) or getattr(args, "config", None):
        return _resolve_config(args)
    cfg = _find_run_config(checkpoint)
    if cfg is None:
        raise ConfigurationError(
            "no config.json found near the checkpoint; pass --config or --preset"
        )
    return cfg


def _eval_splits(cfg: ExperimentConfig) -> dict[str, list]:
    return {
        "id": generate_labeled(
            cfg.task,
            cfg.data.n_eval,
            Domain.ID,
            derive_seed(cfg.seed, "corpus:id-eval"),
        ),
        "od": generate_labeled(
            cfg.task,
            cfg.data.n_eval,
            Domain.OD,
            derive_seed(cfg.seed, "corpus:od-eval"),
        ),
        "outlier": generate_corpus(
            cfg.task,
            cfg.data.n_outlier,
            Domain.OUTLIER,
            derive_seed(cfg.seed, "corpus:outlier"),
        ),
    }


def run_pretrain(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    vocab = build_vocabulary(cfg.task)
    (out / "corpus").mkdir(exist_ok=True)
    vocab.save(out / "corpus" / "vocab.txt")
    corpus = generate_corpus(
        cfg.task,
        cfg.data.n_pretrain,
        Domain.PRETRAIN,
        derive_seed(cfg.seed, "corpus:pretrain"),
    )
    save_corpus(
        corpus,
        vocab,
        out / "corpus" / "pretrain.txt",
        out / "corpus" / "pretrain.json",
    )
    store = init_params(cfg.encoder_config(), derive_seed(cfg.seed, "init"))
    pconf = replace(cfg.pretrain, seed=derive_seed(cfg.seed, "pretrain"))
    store, log = pretrain_mlm(store, corpus, pconf)
    log.to_jsonl(out / "logs" / "pretrain_log.jsonl")
    ckpt = out / "checkpoints" / "pretrained.npz"
    save_checkpoint(store, ckpt, extra={"stage": "pretrained"})
    heldout = generate_corpus(
        cfg.task,
        cfg.data.n_mlm_eval,
        Domain.PRETRAIN,
        derive_seed(cfg.seed, "corpus:pretrain-heldout"),
    )
    reports = mlm_calibration_eval(
        store,
        heldout,
        cfg.eval.mlm_mask_levels,
        cfg.eval.num_bins,
        seed=derive_seed(cfg.seed, "mlm-eval"),
    )
    payload = {repr(level): rep.to_dict() for level, rep in reports.items()}
    (out / "reports").mkdir(exist_ok=True)
    (out / "reports" / "mlm_calibration.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    first_loss = log.steps[0]["mlm"]
    last_loss = log.steps[-1]["mlm"]
    print(f"pretrain: {len(log.steps)} steps, mlm loss "
          f"{first_loss:.4f} -> {last_loss:.4f}")
    for level in sorted(reports):
        print(f"mlm-eval p={level}: ece={reports[level].ece:.4f} "
              f"({reports[level].num_records} targets)")
    print(f"checkpoint: {ckpt}")
    return {"checkpoint": str(ckpt), "mlm_eval": payload}


def run_finetune(
    cfg: ExperimentConfig, pretrained: Path, out: Path
) -> dict:
    if not pretrained.exists():
        raise ConfigurationError(f"pretrained checkpoint not found: {pretrained}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    store = load_checkpoint(pretrained)
    if store.config != cfg.encoder_config():
        raise ConfigurationError(
            "checkpoint encoder config does not match experiment config"
        )
    snapshot_pretrained(store)
    train_split = generate_labeled(
        cfg.task,
        cfg.data.n_train,
        Domain.ID,
        derive_seed(cfg.seed, "corpus:train"),
    )
    splits = _eval_splits(cfg)
    data = FinetuneData(
        train=train_split,
        id_eval=splits["id"],
        od_eval=splits["od"],
        outlier_eval=splits["outlier"],
    )
    pretrain_corpus = None
    if cfg.method.method == Method.JL_P:
        pretrain_corpus = generate_corpus(
            cfg.task,
            cfg.data.n_pretrain,
            Domain.PRETRAIN,
            derive_seed(cfg.seed, "corpus:pretrain"),
        )
    store, log = train(cfg.method, data, pretrain_corpus, store)
    log.to_jsonl(out / "logs" / "train_log.jsonl")
    ckpt = out / "checkpoints" / "finetuned.npz"
    save_checkpoint(store, ckpt, extra={"stage": "finetuned"})
    run_meta = {
        "pretrained_checkpoint": str(pretrained.resolve()),
        "method": cfg.method.method.value,
        "use_kd": cfg.method.use_kd,
        "sigma_ls": cfg.method.sigma_ls,
        "method_seed": cfg.method.seed,
    }
    (out / "run.json").write_text(
        json.dumps(run_meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    final = log.epochs[-1]
    parts = [f"finetune[{cfg.method.method.value}]: {len(log.steps)} steps"]
    for split_name in ("id", "od"):
        if split_name in final:
            m = final[split_name]
            parts.append(
                f"{split_name} acc={m['accuracy']:.3f} ece={m['ece']:.3f}"
            )
    print(", ".join(parts))
    print(f"checkpoint: {ckpt}")
    return {"checkpoint": str(ckpt)}


def run_evaluate(
    checkpoint: Path,
    splits: list[str],
    out: Path,
    cfg: ExperimentConfig,
) -> dict:
    if not checkpoint.exists():
        raise ConfigurationError(f"checkpoint not found: {checkpoint}")
    valid = {"id", "od", "outlier"}
    bad = set(splits) - valid
    if bad:
        raise ConfigurationError(f"unknown split names: {sorted(bad)}")
    store = load_checkpoint(checkpoint)
    all_splits = _eval_splits(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dumps").mkdir(exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)

    pre_store = None
    run_json = checkpoint.parent.parent / "run.json"
    if run_json.exists():
        meta = json.loads(run_json.read_text("utf-8"))
        pre_path = Path(meta["pretrained_checkpoint"])
        if pre_path.exists():
            pre_store = load_checkpoint(pre_path)

    results = {}
    for name in splits:
        data = all_splits[name]
        domain = Domain(name)
        labeled = name in ("id", "od")
        probs, labels = predict_classifier(store, data)
        records = records_from_probs(probs, labels if labeled else None, domain)
        write_prediction_dump(records, out / "dumps" / f"predictions_{name}.tsv")
        seqs = [e.sequence for e in data] if labeled else data
        dump_representations(
            store, seqs, out / "dumps" / f"reps_{name}.tsv"
        )
        hist = confidence_histogram(records, num_buckets=10)
        metrics: dict = {
            "split": name,
            "n": len(records),
            "mean_confidence": float(
                np.mean([r.confidence for r in records])
            ),
            "histogram": {
                "edges": list(hist.edges),
                "counts": list(hist.counts),
            },
        }
        if labeled:
            report = compute_ece(records, num_bins=10)
            metrics["accuracy"] = float(
                np.mean([r.pred_label == r.true_label for r in records])
            )
            metrics["ece"] = report.ece
            metrics["bins"] = [
                {
                    "index": b.index,
                    "lower": b.lower,
                    "upper": b.upper,
                    "count": b.count,
                    "accuracy": b.accuracy,
                    "mean_confidence": b.mean_confidence,
                }
                for b in report.bins
            ]
        if pre_store is not None:
            dump_representations(
                pre_store, seqs, out / "dumps" / f"reps_pretrained_{name}.tsv"
            )
            _, now = load_representations(out / "dumps" / f"reps_{name}.tsv")
            _, then = load_representations(
                out / "dumps" / f"reps_pretrained_{name}.tsv"
            )
            metrics["rep_distance"] = float(
                np.linalg.norm(now - then, axis=1).mean()
            )
        (out / "reports" / f"eval_{name}.json").write_text(
            json.dumps(metrics, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        results[name] = metrics
        line = f"{name}: n={metrics['n']} conf={metrics['mean_confidence']:.3f}"
        if labeled:
            line += f" acc={metrics['accuracy']:.3f} ece={metrics['ece']:.3f}"
        if "rep_distance" in metrics:
            line += f" repdist={metrics['rep_distance']:.3f}"
        print(line)
    return results


def run_sample(
    checkpoint: Path,
    cfg: ExperimentConfig,
    sampler_cfg: SamplerConfig,
    count: int,
    seed: int,
    out: Path,
) -> list[dict]:
    if not checkpoint.exists():
        raise ConfigurationError(f"checkpoint not found: {checkpoint}")
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    store = load_checkpoint(checkpoint)
    vocab = build_vocabulary(cfg.task)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dumps").mkdir(exist_ok=True)
    rows = []
    for i in range(count):
        res = mask_predict_sample(
            store, sampler_cfg, derive_seed(seed, f"sample:{i}")
        )
        tokens = [vocab.token_of(int(t)) for t in res.ids]
        rows.append(
            {
                "index": i,
                "target_label": sampler_cfg.target_label,
                "ids": [int(t) for t in res.ids],
                "tokens": tokens,
                "accept_probability": res.accept_probability,
                "attempts": list(res.attempts),
            }
        )
    path = out / "dumps" / "samples.jsonl"
    path.write_text(
        "\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n",
        encoding="utf-8",
    )
    for r in rows:
        print(
            f"sample {r['index']}: p(y*)={r['accept_probability']:.3f} "
            + " ".join(r["tokens"])
        )
    print(f"wrote {path}")
    return rows


_METRIC_COLS = (
    ("id", "accuracy", "id_acc"),
    ("id", "ece", "id_ece"),
    ("od", "accuracy", "od_acc"),
    ("od", "ece", "od_ece"),
    ("outlier", "mean_confidence", "out_conf"),
    ("od", "rep_distance", "od_repdist"),
)


def _method_label(cfg: ExperimentConfig) -> str:
    label = cfg.method.method.value
    if cfg.method.use_kd:
        label += "+kd"
    if cfg.method.sigma_ls > 0:
        label += "+ls"
    return label


def run_report(run_dirs: list[Path], out: Path) -> dict:
    if not run_dirs:
        raise ConfigurationError("no run directories given")
    rows = []
    shared = None
    for d in run_dirs:
        cfg_path = d / "config.json"
        if not cfg_path.exists():
            raise ConfigurationError(f"missing config.json in {d}")
        cfg = ExperimentConfig.load(cfg_path)
        key = json.dumps(
            {
                "task": cfg.to_dict()["task"],
                "shape": cfg.to_dict()["shape"],
                "data": cfg.to_dict()["data"],
                "seed": cfg.seed,
            },
            sort_keys=True,
        )
        if shared is None:
            shared = key
        elif key != shared:
            raise ConfigurationError(
                f"run {d} has a different task/encoder/data config than the "
                "first run; refusing to aggregate"
            )
        metrics = {}
        for split in ("id", "od", "outlier"):
            p = d / "reports" / f"eval_{split}.json"
            if p.exists():
                metrics[split] = json.loads(p.read_text("utf-8"))
        if not metrics:
            raise ConfigurationError(f"no eval reports found in {d}")
        m = cfg.method
        group = (
            _method_label(cfg),
            m.alpha_mlm,
            m.beta_l2,
            m.p_mask if m.method in (Method.JL_D, Method.JL_P) else None,
            m.sigma_ls,
            m.lambda_pwd,
            m.p_mixout,
            m.lr,
            m.epochs,
        )
        rows.append({"group": group, "seed": m.seed, "metrics": metrics})

    groups: dict = {}
    for row in rows:
        groups.setdefault(row["group"], []).append(row)

    table = []
    for group_key in sorted(groups, key=str):
        members = groups[group_key]
        entry = {
            "method": group_key[0],
            "alpha_mlm": group_key[1],
            "beta_l2": group_key[2],
            "p_mask": group_key[3],
            "sigma_ls": group_key[4],
            "lambda_pwd": group_key[5],
            "p_mixout": group_key[6],
            "lr": group_key[7],
            "epochs": group_key[8],
            "seeds": sorted(m["seed"] for m in members),
        }
        for split, field_name, col in _METRIC_COLS:
            vals = [
                m["metrics"][split][field_name]
                for m in members
                if split in m["metrics"]
                and field_name in m["metrics"][split]
            ]
            if vals:
                entry[col] = {
                    "mean": float(np.mean(vals)),
                    "std": float(np.std(vals)),
                    "n": len(vals),
                }
        table.append(entry)

    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(table, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    cols = [c for _, _, c in _METRIC_COLS]
    lines = ["method".ljust(16) + "seeds".ljust(7) + "".join(c.ljust(16) for c in cols)]
    for entry in table:
        cells = [entry["method"].ljust(16), str(len(entry["seeds"])).ljust(7)]
        for c in cols:
            if c in entry:
                cells.append(
                    f"{entry[c]['mean']:.4f}±{entry[c]['std']:.4f}".ljust(16)
                )
            else:
                cells.append("-".ljust(16))
        lines.append("".join(cells))
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    # Sweep file: joint-learning groups that differ only in the
    # auxiliary-loss weight.
    jl_entries = [e for e in table if e["method"].startswith("jl")]
    alphas = {e["alpha_mlm"] for e in jl_entries}
    if len(alphas) > 1:
        sweep_lines = [
            "alpha_mlm\tbeta_l2\tid_acc\tid_ece\tod_acc\tod_ece\tod_repdist"
        ]
        for e in sorted(jl_entries, key=lambda x: x["alpha_mlm"]):
            cells = [repr(e["alpha_mlm"]), repr(e["beta_l2"])]
            for c in ("id_acc", "id_ece", "od_acc", "od_ece", "od_repdist"):
                cells.append(repr(e[c]["mean"]) if c in e else "-")
            sweep_lines.append("\t".join(cells))
        (out / "alpha_sweep.tsv").write_text(
            "\n".join(sweep_lines) + "\n", encoding="utf-8"
        )

    print("\n".join(lines))
    print(f"wrote {out / 'report.txt'}")
    return {"table": table}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mlmcal",
        description="Calibration study for fine-tuned masked language models",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_config_args(sp, require=True):
        sp.add_argument("--preset", help=f"one of: {', '.join(preset_names())}")
        sp.add_argument("--config", type=Path, help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="override experiment seed")

    sp = sub.add_parser("pretrain", help="pre-train the masked language model")
    add_config_args(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=_cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint")
    add_config_args(sp)
    sp.add_argument("--pretrained", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument(
        "--method-seed", type=int, help="override fine-tuning run seed"
    )
    sp.set_defaults(func=_cmd_finetune)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on the task splits")
    add_config_args(sp, require=False)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument(
        "--splits",
        default="id,od,outlier",
        help="comma-separated subset of id,od,outlier",
    )
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=_cmd_evaluate)

    sp = sub.add_parser("sample", help="generate label-conditioned sequences")
    add_config_args(sp, require=False)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--label", type=int, required=True)
    sp.add_argument("--num-tokens", type=int, default=12)
    sp.add_argument("--iterations", type=int, default=6)
    sp.add_argument("--tau", type=float, default=1.0)
    sp.add_argument("--max-retries", type=int, default=50)
    sp.add_argument("--proposal-temperature", type=float, default=1.0)
    sp.add_argument("--greedy", action="store_true")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--sample-seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=_cmd_sample)

    sp = sub.add_parser("report", help="aggregate evaluated runs into a table")
    sp.add_argument("--runs", type=Path, nargs="+", required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=_cmd_report)
    return p


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    run_pretrain(cfg, args.out)
    return 0


def _cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    run_finetune(cfg, args.pretrained, args.out)
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _require_config(args, args.checkpoint)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    run_evaluate(args.checkpoint, splits, args.out, cfg)
    return 0


def _cmd_sample(args) -> int:
    cfg = _require_config(args, args.checkpoint)
    sampler_cfg = SamplerConfig(
        target_label=args.label,
        num_tokens=args.num_tokens,
        iterations=args.iterations,
        tau=args.tau,
        max_retries=args.max_retries,
        proposal_temperature=args.proposal_temperature,
        greedy=args.greedy,
    )
    run_sample(
        args.checkpoint, cfg, sampler_cfg, args.count, args.sample_seed, args.out
    )
    return 0


def _cmd_report(args) -> int:
    run_report(list(args.runs), args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SamplingFailure as exc:
        print(
            f"error: sampling failed at iteration {exc.iteration}: {exc}",
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
