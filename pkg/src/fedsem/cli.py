"""Command line entry points.

Subcommands: ``pretrain-csi`` (train and store a CSI refiner for one
SNR), ``train`` (federated training run), ``eval`` (score a saved
checkpoint on fresh test scenes), ``sweep`` (repeat train+eval along
one axis).  Exit codes: 0 success, 2 invalid configuration or
arguments, 3 missing prerequisite artifact.
"""

import argparse
import dataclasses
import json
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .config import ExperimentConfig, load_config, merge_overrides
from .csi import (SAMPLE_COUNT, CsiRefiner, CsiSampleSet, checkpoint_name,
                  evaluate_refiner, pretrain_refiner)
from .federation import (build_link, build_task_data, evaluate_classification,
                         evaluate_reconstruction, run_federated_training)
from .seeding import Purpose, substream

ROUNDS_CSV_HEADER = ("round,device_count,snr_db,R,delta,train_loss,"
                     "metric_name,metric_value,seed")
SWEEP_CSV_HEADER = ("axis,value,task,snr_db,R,delta,train_loss,"
                    "accuracy,psnr,ssim,seed")
SWEEP_AXES = {"snr": "snr_db", "bandwidth": "bandwidth_ratio",
              "overlap": "delta"}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _fmt(value):
    """Floats via repr for byte-stable, round-trippable CSV cells."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _utc_now():
    return datetime.now(timezone.utc).isoformat()


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--task", choices=("classify", "reconstruct"))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--snr-db", dest="snr_db", type=float)
    parser.add_argument("--delta", type=float, help="view overlap fraction")
    parser.add_argument("--bandwidth-ratio", dest="bandwidth_ratio",
                        type=float)
    parser.add_argument("--devices", type=int)
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--preset", choices=("desk", "paper"))
    parser.add_argument("--epochs", dest="local_epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--train-scenes", dest="train_scenes", type=int)
    parser.add_argument("--test-scenes", dest="test_scenes", type=int)
    parser.add_argument("--lam", type=float)
    parser.add_argument("--tau-k", dest="tau_k", type=float)
    parser.add_argument("--mu", type=float)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedsem",
        description="Federated semantic communication simulator")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-csi",
                       help="pretrain the CSI refiner for one SNR")
    _add_common(p)
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing refiner checkpoint")
    p.add_argument("--steps", type=int, default=None,
                   help="optimization steps (default 2000)")
    p.add_argument("--samples", type=int, default=SAMPLE_COUNT,
                   help="channel draws in the sample set")
    p.add_argument("--target-ls", dest="target_ls", action="store_true",
                   help="regress onto the raw LS estimate instead of the "
                        "true channel")

    p = sub.add_parser("train", help="run federated training")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint",
                   help="model file (default <out>/model_final.flsc)")

    p = sub.add_parser("sweep", help="train and evaluate along one axis")
    _add_common(p)
    p.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p.add_argument("--values", required=True,
                   help="comma separated axis values")
    return parser


def _resolve_config(args):
    """File config plus CLI overrides; raises ValueError on bad input."""
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    override_names = ("task", "seed", "out_dir", "snr_db", "delta",
                      "bandwidth_ratio", "devices", "rounds", "preset",
                      "local_epochs", "batch_size", "train_scenes",
                      "test_scenes", "lam", "tau_k", "mu")
    overrides = {name: getattr(args, name) for name in override_names}
    return merge_overrides(cfg, overrides)


def _load_refiner_state(out, snr_db):
    path = out / checkpoint_name(snr_db)
    if path.exists():
        return checkpoint.load(path), path
    warnings.warn(f"no pretrained CSI refiner at {path}; the run starts "
                  f"from a randomly initialized refiner", stacklevel=2)
    return None, None


def _write_rounds_csv(path, records):
    lines = [ROUNDS_CSV_HEADER]
    for r in records:
        lines.append(",".join([
            _fmt(r.round), _fmt(r.device_count), _fmt(float(r.snr_db)),
            _fmt(float(r.bandwidth_ratio)), _fmt(float(r.delta)),
            _fmt(float(r.train_loss)), r.metric_name,
            _fmt(float(r.metric_value)), _fmt(r.seed)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _final_metrics(cfg, state):
    """Fresh test-set metrics for a trained state dict."""
    link = build_link(cfg.task, cfg.preset, cfg.bandwidth_ratio,
                      substream(cfg.seed, Purpose.INIT))
    link.load_state_dict(state)
    data = build_task_data(cfg)
    eval_round = cfg.resolved_rounds
    if cfg.task == "classify":
        acc = evaluate_classification(link, data, cfg.snr_db, cfg.seed,
                                      eval_round)
        return {"accuracy": acc}
    psnr, ssim = evaluate_reconstruction(link, data, cfg.snr_db, cfg.seed,
                                         eval_round, with_ssim=True)
    return {"psnr": psnr, "ssim": ssim}


def _cmd_pretrain_csi(cfg, args):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / checkpoint_name(cfg.snr_db)
    if path.exists() and not args.force:
        print(f"error: {path} already exists (use --force to overwrite)",
              file=sys.stderr)
        return EXIT_CONFIG
    if args.samples < 10:
        print("error: --samples must be at least 10", file=sys.stderr)
        return EXIT_CONFIG
    samples = CsiSampleSet.draw(cfg.seed, count=args.samples)
    refiner = CsiRefiner(substream(cfg.seed, Purpose.CSI_INIT))
    kwargs = {"target_ls": args.target_ls}
    if args.steps is not None:
        kwargs["steps"] = args.steps
    history = pretrain_refiner(refiner, samples, cfg.snr_db, cfg.seed,
                               **kwargs)
    nmse_ls, nmse_refined = evaluate_refiner(refiner, samples, cfg.snr_db,
                                             cfg.seed)
    checkpoint.save(path, refiner.state_dict())
    report = {
        "snr_db": float(cfg.snr_db),
        "steps": len(history),
        "final_loss": float(history[-1]) if history else None,
        "nmse_ls": float(nmse_ls),
        "nmse_refined": float(nmse_refined),
        "improvement_db": float(10.0 * np.log10(nmse_ls / nmse_refined)),
        "target": "ls" if args.target_ls else "true",
        "seed": cfg.seed,
    }
    report_path = out / f"nmse_report_snr{cfg.snr_db:g}.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    print(f"refiner saved to {path}")
    print(f"held-out NMSE: ls={nmse_ls:.6f} refined={nmse_refined:.6f} "
          f"({report['improvement_db']:.2f} dB)")
    return EXIT_OK


def _cmd_train(cfg, args):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _utc_now()
    refiner_state, refiner_path = _load_refiner_state(out, cfg.snr_db)

    def progress(record):
        print(f"round {record.round}: train_loss={record.train_loss:.5f} "
              f"{record.metric_name}={record.metric_value:.5f}")

    result = run_federated_training(cfg, refiner_state, progress=progress)
    _write_rounds_csv(out / "rounds.csv", result.records)
    checkpoint.save(out / "model_final.flsc", result.state)
    outputs = ["rounds.csv", "model_final.flsc"]
    if result.teacher_state is not None:
        checkpoint.save(out / "teacher.flsc", result.teacher_state)
        outputs.append("teacher.flsc")
    manifest = {
        "command": "train",
        "package_version": __version__,
        "config": cfg.to_dict(),
        "refiner_checkpoint": str(refiner_path) if refiner_path else None,
        "teacher_accuracy": result.teacher_accuracy,
        "outputs": outputs,
        "started_utc": started,
        "finished_utc": _utc_now(),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    last = result.records[-1]
    print(f"final {last.metric_name}: {last.metric_value:.5f}")
    return EXIT_OK


def _cmd_eval(cfg, args):
    out = Path(cfg.out_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model_final.flsc"
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} not found (run `fedsem train` "
              f"first)", file=sys.stderr)
        return EXIT_MISSING
    try:
        state = checkpoint.load(ckpt)
        metrics = _final_metrics(cfg, state)
    except (ValueError, KeyError) as exc:
        print(f"error: checkpoint does not fit this configuration: {exc}",
              file=sys.stderr)
        return EXIT_CONFIG
    payload = {
        "task": cfg.task,
        "snr_db": float(cfg.snr_db),
        "R": float(cfg.bandwidth_ratio),
        "delta": float(cfg.delta),
        "n_samples": cfg.test_scenes,
        "seed": cfg.seed,
    }
    payload.update({k: float(v) for k, v in metrics.items()})
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    (out / "metrics.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _cmd_sweep(cfg, args):
    raw_values = [v.strip() for v in args.values.split(",") if v.strip()]
    if len(raw_values) < 2:
        print("error: --values needs at least two comma separated values",
              file=sys.stderr)
        return EXIT_CONFIG
    seen = []
    for v in raw_values:
        if v in seen:
            warnings.warn(f"duplicate sweep value {v!r} dropped",
                          stacklevel=2)
        else:
            seen.append(v)
    field = SWEEP_AXES[args.axis]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for raw in seen:
        try:
            value = float(raw)
        except ValueError:
            print(f"error: sweep value {raw!r} is not a number",
                  file=sys.stderr)
            return EXIT_CONFIG
        cfg_v = dataclasses.replace(cfg, **{field: value})
        errors = cfg_v.validate()
        if errors:
            for e in errors:
                print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        refiner_state, _ = _load_refiner_state(out, cfg_v.snr_db)
        print(f"sweep {args.axis}={raw}: training...")
        result = run_federated_training(cfg_v, refiner_state)
        metrics = _final_metrics(cfg_v, result.state)
        rows.append({
            "axis": args.axis,
            "value": raw,
            "task": cfg_v.task,
            "snr_db": float(cfg_v.snr_db),
            "R": float(cfg_v.bandwidth_ratio),
            "delta": float(cfg_v.delta),
            "train_loss": float(result.records[-1].train_loss),
            "accuracy": metrics.get("accuracy"),
            "psnr": metrics.get("psnr"),
            "ssim": metrics.get("ssim"),
            "seed": cfg_v.seed,
        })
    lines = [SWEEP_CSV_HEADER]
    for row in rows:
        lines.append(",".join([
            row["axis"], row["value"], row["task"], _fmt(row["snr_db"]),
            _fmt(row["R"]), _fmt(row["delta"]), _fmt(row["train_loss"]),
            _fmt(row["accuracy"]), _fmt(row["psnr"]), _fmt(row["ssim"]),
            _fmt(row["seed"])]))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"sweep results written to {out / 'sweep.csv'}")
    return EXIT_OK


COMMANDS = {
    "pretrain-csi": _cmd_pretrain_csi,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    errors = cfg.validate()
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[args.command](cfg, args)


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
