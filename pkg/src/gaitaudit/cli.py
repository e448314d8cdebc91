"""Command-line pipeline: synth, split, train, eval, audit, experiment.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from .config import SEED_STRIDE, ConfigError, RunConfig, config_hash
from .data import Manifest, SplitManifest, TrialParseError, TrialTooShortError, generate_synthetic, split_patients
from .metrics import BootstrapInfeasibleError, PredictionSet, UndefinedMetricError, metrics_report, sigmoid
from .model import init_model, load_checkpoint, predict, save_checkpoint
from .train import DegenerateTaskError, NonFiniteLossError, train

log = logging.getLogger("gaitaudit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class StageConflictError(ConfigError):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_config(path, seed: int | None = None) -> RunConfig:
    cfg = RunConfig.load(path) if path is not None else RunConfig()
    return cfg.with_seed(seed) if seed is not None else cfg


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, out: Path) -> Manifest:
    return generate_synthetic(cfg.synth, out)


def cmd_split(cfg: RunConfig, manifest_path: Path, out: Path) -> SplitManifest:
    manifest = Manifest.load(manifest_path)
    sp = split_patients(manifest, cfg.split.ratios, cfg.stage_seed("split"), cfg.split.stratify)
    out.mkdir(parents=True, exist_ok=True)
    sp.save(out / "split.json")
    return sp


def cmd_train(cfg: RunConfig, manifest_path: Path, out: Path, split_path: Path | None = None):
    manifest = Manifest.load(manifest_path)
    if split_path is not None:
        sp = SplitManifest.load(split_path)
    else:
        sp = split_patients(manifest, cfg.split.ratios, cfg.stage_seed("split"), cfg.split.stratify)
    train_trials = manifest.load_trials(sp.trials(manifest, "train"))
    val_trials = manifest.load_trials(sp.trials(manifest, "val"))
    model = init_model(cfg.model, cfg.stage_seed("init"))
    model, hist = train(model, train_trials, val_trials, cfg.train)
    out.mkdir(parents=True, exist_ok=True)
    sp.save(out / "split.json")
    save_checkpoint(model, out / "model.ckpt", meta={"split": json.loads(sp.to_json()), "task": manifest.task,
                                                     "pos_weight": hist.pos_weight})
    hist.save(out / "history.json")
    return model, hist


def _split_from(checkpoint_meta: dict, split_path: Path | None) -> SplitManifest:
    if split_path is not None:
        return SplitManifest.load(split_path)
    if "split" not in checkpoint_meta:
        raise ConfigError("checkpoint carries no split; pass --splits")
    s = checkpoint_meta["split"]
    return SplitManifest(s["seed"], tuple(s["ratios"]), s["train"], s["val"], s["test"],
                         s.get("stratified", True), s.get("warnings", []))


def _predict_split(checkpoint: Path, manifest_path: Path, split: str, split_path: Path | None):
    model, meta = load_checkpoint(checkpoint)
    manifest = Manifest.load(manifest_path)
    sp = _split_from(meta, split_path)
    trials = manifest.load_trials(sp.trials(manifest, split))
    if not trials:
        raise DegenerateTaskError(f"split {split!r} has no trials")
    records = predict(model, trials)
    preds = PredictionSet([t.trial_id for t in trials], [t.patient_id for t in trials],
                          np.array([t.label for t in trials]), sigmoid([r.logit for r in records]))
    return manifest, trials, records, preds


def cmd_eval(cfg: RunConfig, checkpoint: Path, manifest_path: Path, out: Path, split: str = "test",
             split_path: Path | None = None) -> dict:
    _, _, _, preds = _predict_split(checkpoint, manifest_path, split, split_path)
    a = cfg.audit
    report = metrics_report(preds, a.n_bootstrap, cfg.stage_seed("bootstrap"), a.ci_level, a.metrics_unit,
                            a.threshold)
    report["meta"]["split"] = split
    out.mkdir(parents=True, exist_ok=True)
    preds.save_csv(out / "predictions.csv")
    _write_json(out / "metrics.json", report)
    return report


def cmd_audit(cfg: RunConfig, checkpoint: Path, manifest_path: Path, out: Path, split: str = "test",
              split_path: Path | None = None) -> dict:
    manifest, trials, records, preds = _predict_split(checkpoint, manifest_path, split, split_path)
    a = cfg.audit
    imap = audit_mod.aggregate_attention(records, a.n_bootstrap, cfg.stage_seed("bootstrap"), manifest.task,
                                         a.ci_level, a.attention_unit, [t.patient_id for t in trials])
    flags = audit_mod.flag_laterality_bias(imap, [tuple(p) for p in a.bilateral_pairs], a.neglect_threshold,
                                           a.dominance_threshold)
    try:
        metrics = metrics_report(preds, a.n_bootstrap, cfg.stage_seed("bootstrap"), a.ci_level, a.metrics_unit,
                                 a.threshold)
    except (UndefinedMetricError, BootstrapInfeasibleError) as exc:
        metrics = {"error": str(exc)}
    rep = audit_mod.render_report(imap, flags, metrics, out)
    with open(out / "attention.csv", "w", encoding="utf-8") as f:
        f.write("trial_id,patient_id,label," + ",".join(f"alpha_{s}" for s in imap.sensors) + "\n")
        for t, r in zip(trials, records):
            f.write(f"{t.trial_id},{t.patient_id},{t.label}," + ",".join(format(v, ".17g") for v in r.alpha) + "\n")
    return rep


# ---------------------------------------------------------------- experiment


def _stage(dirpath: Path, key: dict, outputs: list[str], run) -> bool:
    """Run a pipeline stage unless its outputs already exist for the same config.

    Returns True when the stage ran. A stage directory holding outputs from a
    different config is never overwritten.
    """
    sidecar = dirpath / "stage.json"
    h = config_hash(key)
    if sidecar.exists():
        prev = json.loads(sidecar.read_text(encoding="utf-8"))
        if prev.get("config_hash") != h:
            raise StageConflictError(
                f"{dirpath}: existing outputs were produced by a different config "
                f"(hash {prev.get('config_hash', '?')[:12]} != {h[:12]}); remove the directory or use another --out"
            )
        if all((dirpath / o).exists() for o in outputs):
            log.info("skip %s (up to date)", dirpath)
            return False
    if dirpath.exists():
        shutil.rmtree(dirpath)  # partial output from an interrupted run
    dirpath.mkdir(parents=True)
    run()
    _write_json(sidecar, {"config_hash": h, "stage": key["stage"]})
    return True


def run_replicate(cfg: RunConfig, out: Path) -> dict:
    """synth -> split -> train -> eval -> audit for one master seed."""
    base = cfg.to_dict()
    data_dir, train_dir, eval_dir, audit_dir = (out / s for s in ("data", "train", "eval", "audit"))
    _stage(data_dir, {"stage": "synth", "synth": base["synth"]}, ["manifest.json"],
           lambda: cmd_synth(cfg, data_dir))
    train_key = {"stage": "train", "synth": base["synth"], "model": base["model"], "train": base["train"],
                 "split": base["split"], "seed": cfg.seed}
    _stage(train_dir, train_key, ["model.ckpt", "history.json"],
           lambda: cmd_train(cfg, data_dir / "manifest.json", train_dir))
    post_key = dict(train_key, audit=base["audit"])
    _stage(eval_dir, dict(post_key, stage="eval"), ["metrics.json", "predictions.csv"],
           lambda: cmd_eval(cfg, train_dir / "model.ckpt", data_dir / "manifest.json", eval_dir))
    _stage(audit_dir, dict(post_key, stage="audit"), ["audit.json", "importance.svg"],
           lambda: cmd_audit(cfg, train_dir / "model.ckpt", data_dir / "manifest.json", audit_dir))
    rep = json.loads((audit_dir / "audit.json").read_text(encoding="utf-8"))
    metrics = json.loads((eval_dir / "metrics.json").read_text(encoding="utf-8"))
    hist = json.loads((train_dir / "history.json").read_text(encoding="utf-8"))
    imp = rep["importance"]
    return {
        "seed": cfg.seed,
        "attention": {s: imp[s]["mean"] for s in imp},
        "attention_ci_high": {s: imp[s]["ci_high"] for s in imp},
        "attention_ci_low": {s: imp[s]["ci_low"] for s in imp},
        "critical_flags": [f["sensor"] for f in rep["flags"] if f["severity"] == "critical"],
        "flags": [f"{f['severity']}:{f['sensor']}" for f in rep["flags"]],
        "roc_auc": metrics["roc_auc"]["point"],
        "balanced_accuracy": metrics["balanced_accuracy"]["point"],
        "best_epoch": hist["best_epoch"],
        "epochs_run": len(hist["val_loss"]),
    }


def _judge(arm: str, r: dict, e) -> bool:
    att, hi = r["attention"], r["attention_ci_high"]
    if arm == "confound":
        return (att["RF"] >= e.min_rf_attention and hi["LF"] < e.max_lf_ci_high
                and "LF" in r["critical_flags"] and r["roc_auc"] >= e.min_roc_auc)
    return not r["critical_flags"] and min(att["LF"], att["RF"]) >= e.min_foot_attention_control


def cmd_experiment(cfg: RunConfig, out: Path) -> dict:
    """Planted-laterality experiment: confound and control arms over n_seeds seeds."""
    e = cfg.experiment
    out.mkdir(parents=True, exist_ok=True)
    arms = {"confound": e.confound_laterality, "control": e.control_laterality}
    summary: dict = {"master_seed": cfg.seed, "config_hash": config_hash(cfg.to_dict()), "arms": {}}
    for arm, lat in arms.items():
        rows = []
        for k in range(e.n_seeds):
            rcfg = cfg.with_seed(cfg.seed + SEED_STRIDE * k)
            rcfg.synth.laterality_fraction_right = lat
            log.info("arm %s seed %d", arm, rcfg.seed)
            r = run_replicate(rcfg, out / arm / f"seed{rcfg.seed}")
            r["pass"] = _judge(arm, r, e)
            rows.append(r)
        n_pass = sum(r["pass"] for r in rows)
        summary["arms"][arm] = {"laterality_fraction_right": lat, "replicates": rows, "n_pass": n_pass,
                                "pass": n_pass >= e.min_passing_seeds}
    summary["pass"] = all(a["pass"] for a in summary["arms"].values())
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaitaudit", description="Sensor-attention gait models and dataset auditing")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=False, checkpoint=False, split=False):
        sp.add_argument("--config", type=Path, help="run config JSON (defaults if omitted)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the master seed")
        if manifest:
            sp.add_argument("--manifest", type=Path, required=True)
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, required=True)
        if split:
            sp.add_argument("--split", choices=("train", "val", "test"), default="test")
            sp.add_argument("--splits", type=Path, help="split JSON (default: the one stored in the checkpoint)")

    common(sub.add_parser("synth", help="generate a synthetic cohort"))
    common(sub.add_parser("split", help="patient-level train/val/test split"), manifest=True)
    sp = sub.add_parser("train", help="train one model")
    common(sp, manifest=True)
    sp.add_argument("--splits", type=Path, help="split JSON (default: computed from the split seed)")
    common(sub.add_parser("eval", help="metrics on a split"), manifest=True, checkpoint=True, split=True)
    common(sub.add_parser("audit", help="sensor importance map and bias flags"), manifest=True, checkpoint=True,
           split=True)
    common(sub.add_parser("experiment", help="planted-laterality experiment, both arms"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "split":
            cmd_split(cfg, args.manifest, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.manifest, args.out, args.splits)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.manifest, args.out, args.split, args.splits)
        elif args.command == "audit":
            cmd_audit(cfg, args.checkpoint, args.manifest, args.out, args.split, args.splits)
        elif args.command == "experiment":
            s = cmd_experiment(cfg, args.out)
            print(json.dumps({arm: a["n_pass"] for arm, a in s["arms"].items()}))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrialParseError, TrialTooShortError, DegenerateTaskError, UndefinedMetricError,
            BootstrapInfeasibleError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
