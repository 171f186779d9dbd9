"""Command-line entry point: synth, impute, preprocess, train, ablate, evaluate, audit, wer.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from speechcare import audio, fairness, metrics, pipeline, synth
from speechcare.data import LABELS, ManifestRecord, impute_education, read_manifest, stratified_split, write_manifest
from speechcare.errors import NumericError, SpeechCareError, ValidationError
from speechcare.model import ModelConfig, SpeechCareModel
from speechcare.nn import checkpoint
from speechcare.training import TrainConfig, compare_runs, oversample, summarize

log = logging.getLogger("speechcare")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_SECTION_DEFAULTS = {"validation_fraction": 0.2, "split": "stratified", "oversample": None}

DEFAULT_VARIANTS = [
    {"name": "acoustic", "model": {"modalities": ["acoustic"], "fusion": "single"}},
    {"name": "text", "model": {"modalities": ["text"], "fusion": "single"}},
    {"name": "demographic", "model": {"modalities": ["demographic"], "fusion": "single"}},
    {"name": "agf", "model": {"fusion": "agf"}},
    {"name": "intermediate", "model": {"fusion": "intermediate"}},
    {"name": "late", "model": {"fusion": "late"}},
    {"name": "cross_attention", "model": {"fusion": "cross_attention"}},
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ config

def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: top level must be an object")
    unknown = set(cfg) - {"synth", "model", "train", "data", "variants", "seeds", "manifest"}
    if unknown:
        raise ValidationError(f"config: unknown sections {sorted(unknown)}")
    return cfg


def configs_from(cfg: dict, seed: int | None) -> tuple[ModelConfig, TrainConfig, dict]:
    model = ModelConfig.from_dict(dict(cfg.get("model", {})))
    train_section = dict(cfg.get("train", {}))
    if seed is not None:
        train_section["seed"] = seed
    train = TrainConfig.from_dict(train_section)
    data = {**DATA_SECTION_DEFAULTS, **cfg.get("data", {})}
    unknown = set(data) - set(DATA_SECTION_DEFAULTS)
    if unknown:
        raise ValidationError(f"data: unknown fields {sorted(unknown)}")
    if data["split"] != "stratified" and not str(data["split"]).startswith("tail:"):
        raise ValidationError("data.split: 'stratified' or 'tail:<n>'")
    return model, train, data


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v)}")


def _clean(obj):
    """Replace non-finite floats so reports stay strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def run_id(*parts: str) -> str:
    h = hashlib.sha1()
    for p in parts:
        h.update(p.encode())
        h.update(b"\0")
    return h.hexdigest()[:12]


def unique_dir(root: Path, ident: str) -> Path:
    path = root / ident
    n = 1
    while path.exists():
        path = root / f"{ident}-{n}"
        n += 1
    return path


def manifest_digest(path: str) -> str:
    return hashlib.sha1(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------- data splits

def split_records(records: list[ManifestRecord], data: dict, seed: int) -> tuple[list, list]:
    if str(data["split"]).startswith("tail:"):
        n_val = int(str(data["split"]).split(":", 1)[1])
        if not 0 < n_val < len(records):
            raise ValidationError("data.split: tail size must leave both splits non-empty")
        return records[:-n_val], records[-n_val:]
    assignment = stratified_split(records, data["validation_fraction"], seed)
    return ([r for r in records if assignment[r.uid] == "train"],
            [r for r in records if assignment[r.uid] == "validation"])


def prepared_splits(manifest: str, model_cfg: ModelConfig, train_cfg: TrainConfig, data: dict, cache=None):
    records = read_manifest(manifest)
    if not records:
        raise ValidationError(f"{manifest}: no records")
    if any(r.label is None for r in records):
        raise ValidationError("training manifest has unlabeled records")
    if any(r.education is None or r.age is None for r in records):
        records = impute_education(records, seed=train_cfg.seed)
    train_recs, val_recs = split_records(records, data, train_cfg.seed)
    if data["oversample"]:
        train_recs = oversample(train_recs, data["oversample"], seed=train_cfg.seed)
    train_ex = pipeline.prepare_examples(train_recs, model_cfg, train_cfg.seed, cache)
    val_ex = pipeline.prepare_examples(val_recs, model_cfg, train_cfg.seed, cache)
    return train_ex, val_ex


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> int:
    section = dict(cfg.get("synth", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    if args.n_records is not None:
        section["n_records"] = args.n_records
    spec = synth.SynthSpec.from_dict(section)
    records = synth.generate(spec, args.out)
    print(json.dumps({"records": len(records), "manifest": str(Path(args.out) / "manifest.jsonl")}))
    return EXIT_OK


def cmd_impute(args, cfg) -> int:
    records = read_manifest(args.manifest)
    filled = impute_education(records, seed=args.seed or 0)
    out = Path(args.out)
    target = out / "manifest.jsonl" if out.suffix != ".jsonl" else out
    target.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(target, filled)
    changed = sum(a != b for a, b in zip(records, filled))
    print(json.dumps({"imputed_records": changed, "manifest": str(target)}))
    return EXIT_OK


def cmd_preprocess(args, cfg) -> int:
    """Cache acoustic frames and write per-record audio statistics."""
    records = read_manifest(args.manifest)
    out = Path(args.out)
    rows = []
    for r in records:
        if not r.audio_path:
            continue
        wave = audio.read_wav(r.audio_path)
        plan = audio.plan_segments(wave.duration)
        frames = pipeline.acoustic_input(r, args.seed or 0, out / "cache").values
        rows.append({"uid": r.uid, "duration": round(wave.duration, 6), "windows": len(plan),
                     "padded": plan.padded, "frames": int(len(frames)),
                     "spectral_flatness": audio.spectral_flatness(wave) if len(wave.samples) >= 512 else None})
    with open(out / "preprocess.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(json.dumps({"records": len(rows), "cache": str(out / "cache")}))
    return EXIT_OK


def train_run(manifest: str, cfg: dict, seed: int | None, out_root: Path, cache=None) -> Path:
    model_cfg, train_cfg, data = configs_from(cfg, seed)
    train_ex, val_ex = prepared_splits(manifest, model_cfg, train_cfg, data, cache)
    model, result = pipeline.run_training(train_ex, val_ex, model_cfg, train_cfg)
    resolved = {"model": model.config.to_dict(), "train": train_cfg.to_dict(), "data": data,
                "manifest": str(manifest)}
    ident = run_id(json.dumps(resolved, sort_keys=True), manifest_digest(manifest))
    run_dir = unique_dir(out_root, ident)
    run_dir.mkdir(parents=True)
    checkpoint.save(run_dir / "checkpoint.bin", model.state_dict())
    result.checkpoint_path = str(run_dir / "checkpoint.bin")
    _write_json(run_dir / "config.json", resolved)
    _write_json(run_dir / "result.json", _clean(result.to_dict()))
    if val_ex:
        pipeline.predictions(model, val_ex).to_jsonl(run_dir / "predictions.jsonl")
    return run_dir


def cmd_train(args, cfg) -> int:
    run_dir = train_run(args.manifest, cfg, args.seed, Path(args.out), args.cache)
    print(json.dumps({"run": str(run_dir)}))
    return EXIT_OK


def load_run(run_dir: Path) -> SpeechCareModel:
    resolved = json.loads((run_dir / "config.json").read_text())
    model = SpeechCareModel(ModelConfig.from_dict(resolved["model"]))
    model.load_state_dict(checkpoint.load(run_dir / "checkpoint.bin"))
    return model


def fusion_trace(model: SpeechCareModel, examples, path: Path) -> None:
    """Per-record gate weights and per-modality scores (AGF models only)."""
    with open(path, "w", encoding="utf-8") as fh:
        for start in range(0, len(examples), 16):
            chunk = examples[start:start + 16]
            out = model.forward(pipeline.collate(chunk))
            for i, ex in enumerate(chunk):
                rec = out.fusion.record(i)
                fh.write(json.dumps({"uid": ex.uid, "gate_weights": rec.gate_weights.tolist(),
                                     "modality_scores": rec.modality_scores.tolist(),
                                     "fused_logits": rec.fused_logits.tolist()}, sort_keys=True) + "\n")


def metrics_report(preds: metrics.PredictionSet, curves_dir: Path | None = None) -> dict:
    m = metrics.confusion_matrix(preds.labels, preds.predicted())
    theta = metrics.optimize_thresholds(preds)
    adjusted = metrics.threshold_adjust(preds, theta)
    report = {
        "records": len(preds),
        "auc_micro": metrics.auc_ovr(preds, "micro"),
        "auc_weighted": metrics.auc_ovr(preds, "weighted"),
        "f1_micro": metrics.micro_f1(m),
        "log_loss": metrics.log_loss(preds.probabilities, preds.labels),
        "confusion_matrix": m.tolist(),
        "per_class": metrics.per_class_pr(m),
        "thresholds": theta.tolist(),
        "confusion_matrix_adjusted": adjusted.tolist(),
        "f1_micro_adjusted": metrics.micro_f1(adjusted),
        "per_class_adjusted": metrics.per_class_pr(adjusted),
    }
    if curves_dir is not None:
        curves = metrics.micro_curves(preds)
        for c, name in enumerate(LABELS):
            if (preds.labels == c).any():
                curves[f"cumulative_gain_{name}"] = metrics.cumulative_gain(preds, c)
        curves["information_gain"] = metrics.information_gain_curve(preds)
        for name, curve in curves.items():
            curve.to_csv(curves_dir / f"{name}.csv")
        onehot = preds.labels[:, None] == np.arange(len(LABELS))[None, :]
        report["average_precision_micro"] = metrics.average_precision(preds.probabilities.ravel(), onehot.ravel())
    return report


def binary_report(preds: metrics.PredictionSet) -> dict:
    """MCI vs control restricted to those two classes, scored by p(MCI) renormalized."""
    keep = preds.labels != 2
    sub = preds.subset(keep)
    p = sub.probabilities[:, [0, 1]]
    score = p[:, 1] / np.maximum(p.sum(axis=1), 1e-15)
    positives = sub.labels == 1
    out = {"records": int(keep.sum())}
    if positives.any() and (~positives).any():
        out["auc"] = metrics.binary_auc(score, positives)
        best = max(((t, _binary_f1(score >= t, positives)) for t in np.unique(score)), key=lambda x: x[1][0])
        out.update({"threshold": float(best[0]), "f1": best[1][0], "precision": best[1][1], "recall": best[1][2]})
    return out


def _binary_f1(pred: np.ndarray, pos: np.ndarray) -> tuple[float, float, float]:
    tp = int((pred & pos).sum())
    precision = tp / max(int(pred.sum()), 1)
    recall = tp / max(int(pos.sum()), 1)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def cmd_evaluate(args, cfg) -> int:
    run_dir = Path(args.run)
    model = load_run(run_dir)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    records = read_manifest(args.manifest)
    if any(r.education is None or r.age is None for r in records):
        records = impute_education(records, seed=args.seed or 0)
    examples = pipeline.prepare_examples(records, model.config, args.seed or 0, args.cache)
    preds = pipeline.predictions(model, examples)
    preds.to_jsonl(out / "predictions.jsonl")
    if model.config.fusion == "agf":
        fusion_trace(model, examples, out / "fusion_trace.jsonl")
    labeled = preds.subset(preds.labels >= 0)
    report = {"run": str(run_dir), "manifest": str(args.manifest)}
    if len(labeled):
        report["metrics"] = metrics_report(labeled, out / "curves")
        if args.binary:
            report["binary_mci_vs_control"] = binary_report(labeled)
    _write_json(out / "report.json", _clean(report))
    print(json.dumps({"report": str(out / "report.json")}))
    return EXIT_OK


def cmd_audit(args, cfg) -> int:
    attributes = args.attributes or ["age_bucket", "gender", "education", "language"]
    classes = [LABELS.index(c) for c in (args.classes or ["mci", "ad"])]
    before = metrics.PredictionSet.from_jsonl(args.predictions)
    report = {"before": fairness.audit(before.subset(before.labels >= 0), attributes, classes)}
    if args.after:
        after = metrics.PredictionSet.from_jsonl(args.after)
        report["after"] = fairness.audit(after.subset(after.labels >= 0), attributes, classes)
        report["comparison"] = fairness.compare_audits(report["before"], report["after"])
    target = Path(args.out) / "fairness.json"
    _write_json(target, _clean(report))
    print(json.dumps({"report": str(target)}))
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    variants = cfg.get("variants", DEFAULT_VARIANTS)
    if len(variants) < 2:
        raise ValidationError("variants: need at least two")
    seeds = args.seeds if args.seeds is not None else cfg.get("seeds", 3)
    base_seed = args.seed or 0
    out = Path(args.out)
    base = {k: v for k, v in cfg.items() if k not in ("variants", "seeds")}
    results: list[list] = []
    names = [v.get("name", f"variant{i}") for i, v in enumerate(variants)]
    for v, name in zip(variants, names):
        vcfg = {**base, "model": {**base.get("model", {}), **v.get("model", {})},
                "train": {**base.get("train", {}), **v.get("train", {})}}
        model_cfg, train_cfg, data = configs_from(vcfg, base_seed)
        runs = []
        for s in range(seeds):
            tc = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": base_seed + s})
            train_ex, val_ex = prepared_splits(args.manifest, model_cfg, tc, data, args.cache)
            _, res = pipeline.run_training(train_ex, val_ex, model_cfg, tc)
            runs.append(res)
            log.info("%s seed %d: %s", name, tc.seed, res.metrics)
        results.append(runs)
    primary = args.primary or ("agf" if "agf" in names else names[0])
    if primary not in names:
        raise ValidationError(f"--primary {primary!r} is not a variant name")
    pi = names.index(primary)
    rows = []
    for i, name in enumerate(names):
        auc_mean, auc_std = summarize(results[i], "auc_micro")
        f1_mean, f1_std = summarize(results[i], "f1_micro")
        row = {"variant": name, "auc_mean": auc_mean, "auc_std": auc_std, "f1_mean": f1_mean, "f1_std": f1_std,
               "p_vs_primary": None, "d_vs_primary": None}
        if i != pi and seeds >= 2:
            cmp = compare_runs(results[pi], results[i], "auc_micro").to_dict()
            row["p_vs_primary"], row["d_vs_primary"] = cmp["p"], cmp["cohens_d"]
        rows.append(row)
    _write_json(out / "ablation.json", _clean({"primary": primary, "seeds": seeds, "rows": rows}))
    print(json.dumps({"table": str(out / "ablation.json"), "rows": len(rows)}))
    return EXIT_OK


def _read_lines(path: str) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_wer(args, cfg) -> int:
    refs, hyps = _read_lines(args.ref), _read_lines(args.hyp)
    if len(refs) != len(hyps):
        raise ValidationError(f"{len(refs)} reference lines but {len(hyps)} hypothesis lines")
    pairs, errors, words = [], 0, 0
    for i, (r, h) in enumerate(zip(refs, hyps)):
        d = metrics.wer_details(r, h)
        pairs.append({"line": i + 1, "wer": d.wer, "substitutions": d.substitutions,
                      "insertions": d.insertions, "deletions": d.deletions})
        errors += d.substitutions + d.insertions + d.deletions
        words += d.reference_length
    report = {"pairs": pairs, "aggregate_wer": errors / words if words else None}
    if args.out:
        _write_json(Path(args.out) / "wer.json", report)
    print(json.dumps({"aggregate_wer": report["aggregate_wer"], "pairs": len(pairs)}))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS keeps a flag given before the verb from being reset by the subparser.
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config with synth/model/train/data sections")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS, help="global seed (u64)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="speechcare", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n-records", type=int)
    p.set_defaults(func=cmd_synth, out_default="corpus")

    p = sub.add_parser("impute", parents=[common], help="fill missing education / age bands")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_impute, out_default="imputed")

    p = sub.add_parser("preprocess", parents=[common], help="cache acoustic frames")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_preprocess, out_default="preprocessed")

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", help="frame cache directory")
    p.set_defaults(func=cmd_train, out_default="runs")

    p = sub.add_parser("ablate", parents=[common], help="compare variants over several seeds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seeds", type=int)
    p.add_argument("--primary", help="variant the others are tested against (default agf)")
    p.add_argument("--cache")
    p.set_defaults(func=cmd_ablate, out_default="ablation")

    p = sub.add_parser("evaluate", parents=[common], help="score a manifest with a trained run")
    p.add_argument("--run", required=True, help="run directory with config.json and checkpoint.bin")
    p.add_argument("--manifest", required=True)
    p.add_argument("--binary", action="store_true", help="add an MCI-vs-control sub-report")
    p.add_argument("--cache")
    p.set_defaults(func=cmd_evaluate, out_default=None)

    p = sub.add_parser("audit", parents=[common], help="fairness report from predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--after", help="second predictions file for a before/after comparison")
    p.add_argument("--attributes", nargs="+")
    p.add_argument("--classes", nargs="+", choices=LABELS)
    p.set_defaults(func=cmd_audit, out_default=".")

    p = sub.add_parser("wer", parents=[common], help="word error rate between line-aligned files")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.set_defaults(func=cmd_wer, out_default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    for name in ("config", "seed", "out", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.out is None:
        args.out = args.out_default
    try:
        return args.func(args, load_config(args.config))
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpeechCareError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
