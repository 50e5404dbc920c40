"""Command line front end: ``generate``, ``train``, ``eval`` and ``km``.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
runtime failures such as a diverging training run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, resolve_config
from .dataio import Schema, generate_cohort, read_cohort, write_cohort
from .errors import TrainingDivergenceError, ValidationError
from .hae import VARIANTS
from .metrics import km_curve, median_risk_split, write_km_csv
from .numerics import RngStream
from .training import cross_validate, evaluate_checkpoint, logrank_summary, write_risks

log = logging.getLogger("foresee")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _seed(value):
    if value is not None:
        return value
    env = os.environ.get("FORESEE_SEED")
    if not env:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"FORESEE_SEED must be an integer, got {env!r}") from None


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_generate(args) -> int:
    if args.n < 2:
        raise ValidationError("--n must be at least 2")
    if not 0 <= args.censoring < 1:
        raise ValidationError("--censoring must lie in [0, 1)")
    seed = _seed(args.seed)
    cohort = generate_cohort(
        args.n,
        Schema(),
        hazard_scale=args.hazard_scale,
        censoring_rate=args.censoring,
        rng=RngStream(seed, "datagen"),
        risk_scale=args.risk_scale,
    )
    write_cohort(cohort, args.out)
    s = cohort.schema
    print(f"wrote {len(cohort)} patients to {args.out}")
    print(f"schema: d_x={s.d_x} rna={s.rna_dim} cnv_mut={s.cnv_mut_dim} grids={list(map(list, s.grid_shapes))}")
    print(f"events: {int(cohort.events.sum())}/{len(cohort)} (censored fraction {1 - cohort.events.mean():.3f})")
    return EXIT_OK


def _train_overrides(args) -> dict:
    ov = {
        "preset": args.preset,
        "seed": args.seed,
        "epochs": args.epochs,
        "decoder_epochs": args.decoder_epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "folds": args.folds,
        "views": args.views,
        "hae_variant": args.hae_variant,
        "mask_ratio": args.mask_ratio,
        "n_patients": args.n,
        "dim": args.dim,
        "out": args.out,
        "cohort": args.cohort,
    }
    if args.no_trimae:
        ov["trimae"] = False
    if args.allow_low_mask:
        ov["allow_low_mask"] = True
    return ov


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _train_overrides(args), default_preset="desk")
    out = Path(cfg.out)
    if cfg.cohort:
        cohort = read_cohort(cfg.cohort)
    else:
        cohort = generate_cohort(
            cfg.n_patients,
            Schema(),
            hazard_scale=cfg.hazard_scale,
            censoring_rate=cfg.censoring,
            rng=RngStream(cfg.seed, "datagen"),
            risk_scale=cfg.risk_scale,
        )
        # kept next to the checkpoints so ``eval`` can reuse it
        write_cohort(cohort, out / "cohort")
    try:
        report = cross_validate(cohort, cfg, out)
    except TrainingDivergenceError as exc:
        last = "none" if exc.epoch is None or exc.epoch == 0 else str(exc.epoch - 1)
        print(f"training diverged: {exc} (last good epoch: {last})", file=sys.stderr)
        return EXIT_RUNTIME
    mean, std = report["c_index_mean"], report["c_index_std"]
    for f in report["folds"]:
        if "skipped" in f:
            print(f"fold {f['fold']}: skipped ({f['skipped']})")
        else:
            print(f"fold {f['fold']}: C-index {f['c_index']:.4f}")
    if mean is not None:
        print(f"C-index {mean:.4f} +/- {std:.4f}")
    lr = report.get("logrank") or {}
    if lr.get("p_value") is not None:
        print(f"median-split log-rank p = {lr['p_value']:.3g}")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.drop_frac and args.drop_modality is None:
        raise ValidationError("--drop-frac needs --drop-modality")
    cohort = read_cohort(args.cohort)
    use_trimae = False if args.no_trimae else None
    result, risk, ids = evaluate_checkpoint(
        args.checkpoint,
        cohort,
        all_patients=args.all,
        drop_modality=args.drop_modality,
        drop_frac=args.drop_frac,
        use_trimae=use_trimae,
        seed=args.seed,
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "eval.json", result)
        pos = {pid: i for i, pid in enumerate(cohort.ids)}
        idx = [pos[i] for i in ids]
        write_risks(out / "risks.csv", ids, risk, cohort.times[idx], cohort.events[idx])
    c = result["c_index"]
    print(f"C-index {c:.4f}" if c is not None else "C-index undefined (no comparable pairs)")
    lr = result.get("logrank") or {}
    if lr.get("p_value") is not None:
        print(f"median-split log-rank p = {lr['p_value']:.3g}")
    return EXIT_OK


def _read_table(path, required):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path} does not exist")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"{path} has no rows")
    missing = set(required) - set(rows[0])
    if missing:
        raise ValidationError(f"{path} lacks columns {sorted(missing)}")
    return rows


def cmd_km(args) -> int:
    risk_rows = _read_table(args.risks, ["id", "risk"])
    risk = {r["id"]: float(r["risk"]) for r in risk_rows}
    surv_source = args.survival or args.risks
    surv_rows = _read_table(surv_source, ["id", "time", "event"])
    surv = {r["id"]: (float(r["time"]), int(r["event"])) for r in surv_rows}
    if set(risk) != set(surv):
        only_r = sorted(set(risk) - set(surv))[:5]
        only_s = sorted(set(surv) - set(risk))[:5]
        raise ValidationError(f"patient ids differ between files (risk only: {only_r}, survival only: {only_s})")
    ids = sorted(risk)
    r = np.array([risk[i] for i in ids])
    t = np.array([surv[i][0] for i in ids])
    e = np.array([surv[i][1] for i in ids])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = median_risk_split(r)
    summary = logrank_summary(r, t, e)
    for name, idx in (("low", split.low), ("high", split.high)):
        if len(idx):
            write_km_csv({name: (km_curve(t[idx], e[idx]), len(idx))}, out / f"km_{name}.csv")
    _dump(out / "logrank.json", summary)
    if summary["degenerate"]:
        log.warning("all risks fall on one side of the median; no log-rank test")
        print("degenerate split: no log-rank test")
    elif summary["p_value"] is None:
        print("log-rank test undefined (no events)")
    else:
        print(f"log-rank statistic {summary['statistic']:.4f}, p = {summary['p_value']:.3g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foresee", description="Multimodal survival models on pathology graphs and molecular profiles.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--seed", type=int, default=None, help="defaults to $FORESEE_SEED, then 0")
    g.add_argument("--censoring", type=float, default=0.3)
    g.add_argument("--hazard-scale", type=float, default=1e-3)
    g.add_argument("--risk-scale", type=float, default=2.5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="k-fold cross-validated training")
    t.add_argument("--cohort", default=None, help="cohort directory; a synthetic cohort is drawn when omitted")
    t.add_argument("--n", type=int, default=None, help="synthetic cohort size")
    t.add_argument("--config", default=None, help="JSON file of RunConfig fields")
    t.add_argument("--preset", choices=sorted(PRESETS), default=None, help="hyperparameter preset (default desk)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--decoder-epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--folds", type=int, default=None)
    t.add_argument("--dim", type=int, default=None)
    t.add_argument("--views", default=None, help="comma separated subset of s,m,l")
    t.add_argument("--hae-variant", choices=VARIANTS, default=None)
    t.add_argument("--mask-ratio", type=float, default=None)
    t.add_argument("--allow-low-mask", action="store_true")
    t.add_argument("--no-trimae", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a fold checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cohort", required=True)
    e.add_argument("--all", action="store_true", help="score every patient, not only the held-out fold")
    e.add_argument("--drop-modality", choices=["P", "R", "CM"], default=None)
    e.add_argument("--drop-frac", type=float, default=0.0)
    e.add_argument("--no-trimae", action="store_true")
    e.add_argument("--seed", type=int, default=None, help="deletion seed; defaults to the training seed")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("km", help="Kaplan-Meier curves of a median risk split")
    k.add_argument("--risks", required=True, help="CSV with id,risk (and optionally time,event)")
    k.add_argument("--survival", default=None, help="CSV with id,time,event")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_km)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDivergenceError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
