"""Cross-validated training, held-out evaluation and report assembly."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataio import Cohort, kfold_split
from .errors import TrainingDivergenceError, UndefinedMetricError, ValidationError
from .metrics import c_index, log_rank_p, median_risk_split
from .model import ForeseeModel, ModelConfig, collate, group_by_signature, patient_tensors
from .numerics import OptimizerState, RngStream, adam_step
from .survival import NoEventsWarning, cox_loss, total_loss
from .trimae import BRANCHES, MaskSpec, _gather

log = logging.getLogger(__name__)


def _batches(index, size):
    return [index[i : i + size] for i in range(0, len(index), size)]


def _forward_groups(model, items, index, **kw):
    """Forward a batch that may mix graph structures; returns outputs in ``index`` order."""
    outs, tl, n = [], 0.0, 0
    order = []
    for group in group_by_signature(items, index):
        res = model(collate([items[i] for i in group]), **kw)
        outs.append(res["outputs"])
        tl = tl + res["trimae_loss"] * len(group)
        n += len(group)
        order += group
    outputs = torch.cat(outs)
    perm = [order.index(i) for i in index]
    return outputs[perm], tl / n


def train_model(model, items, train_index, cfg: RunConfig, fold: int = 0):
    """Minimise the weighted Cox + reconstruction objective; returns per-epoch mean losses."""
    weights = cfg.loss_weights()
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle = RngStream(cfg.seed, "folds").child(100 + fold)
    mask_rng = RngStream(cfg.seed, "masking").child(fold)
    model.set_dropout_rng(RngStream(cfg.seed, "dropout").child(fold))
    times = np.array([it.time for it in items])
    events = np.array([it.event for it in items])
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        order = shuffle.generator.permutation(np.asarray(train_index)).tolist()
        losses = []
        for batch in _batches(order, cfg.batch_size):
            outputs, rec = _forward_groups(model, items, batch, mask_rng=mask_rng)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NoEventsWarning)
                cox = [cox_loss(outputs[:, k], times[batch], events[batch]) for k in range(3)]
            loss = total_loss(cox, rec, weights)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss in fold {fold}, epoch {epoch}", epoch=epoch)
            model.zero_grad(set_to_none=True)
            loss.backward()
            try:
                adam_step(model.named_parameters(), state)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"fold {fold}, epoch {epoch}: {exc}", epoch=epoch) from exc
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("fold %d epoch %d loss %.4f", fold, epoch, history[-1])
    model.eval()
    return history


def refine_decoder(model, items, train_index, cfg: RunConfig, fold: int = 0):
    """Train only the TriMAE branches on frozen eval-mode tokens; returns per-epoch losses.

    During joint training the encoders keep moving, so the decoder never sees
    a stable target and settles on the visible-token mean. A few epochs with
    the encoders frozen let it fit the final token geometry.
    """
    if not model.config.trimae or cfg.decoder_epochs == 0:
        return []
    model.eval()
    with torch.no_grad():
        cached = {i: t for g in group_by_signature(items, train_index) for i, t in _encode_each(model, items, g)}
    params = [(f"trimae.{n}", p) for n, p in model.trimae.named_parameters()]
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle = RngStream(cfg.seed, "folds").child(200 + fold)
    mask_rng = RngStream(cfg.seed, "masking").child(500 + fold)
    history = []
    model.trimae.train()
    for epoch in range(cfg.decoder_epochs):
        order = shuffle.generator.permutation(np.asarray(train_index)).tolist()
        losses = []
        for batch in _batches(order, cfg.batch_size):
            loss = 0.0
            for group in group_by_signature(items, batch):
                tokens = [torch.cat([cached[i][k] for i in group]) for k in range(3)]
                _, rec, _ = model.trimae(tokens, rng=mask_rng)
                loss = loss + rec * len(group)
            loss = loss / len(batch)
            model.trimae.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(params, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    model.eval()
    return history


def _encode_each(model, items, group):
    tokens = model.encode(collate([items[i] for i in group]))
    return [(i, [t[j : j + 1] for t in tokens]) for j, i in enumerate(group)]


@torch.no_grad()
def predict(model, items, index, batch_size=64, missing=None, use_trimae=None):
    """Risk scores (fused) and per-modality outputs for ``index`` in eval mode."""
    model.eval()
    risks, outs = [], []
    for batch in _batches(list(index), batch_size):
        kw = {"use_trimae": use_trimae}
        if missing is not None:
            pos = {i: k for k, i in enumerate(index)}
            kw["missing"] = [m[[pos[i] for i in batch]] for m in missing]
        o, _ = _forward_groups(model, items, batch, **kw)
        outs.append(o)
    outputs = torch.cat(outs)
    return outputs.mean(dim=-1).numpy(), outputs.numpy()


def sample_deletions(counts, n_patients, modality, frac, rng: RngStream):
    """Per-branch (B, k) index arrays deleting ``frac`` of ``modality``'s tokens per patient."""
    out = []
    for b, n in zip(BRANCHES, counts):
        k = int(round(frac * n)) if b == modality else 0
        k = min(k, n - 1)
        rows = [np.sort(rng.generator.choice(n, size=k, replace=False)) for _ in range(n_patients)]
        out.append(np.array(rows, dtype=np.int64).reshape(n_patients, k))
    return out


@torch.no_grad()
def reconstruction_metrics(model, items, index, rng: RngStream, batch_size=64):
    """Masked-position MSE of TriMAE vs filling each masked token with the mean of the visible ones."""
    model.eval()
    mse, base, n = 0.0, 0.0, 0
    for batch in _batches(list(index), batch_size):
        for group in group_by_signature(items, batch):
            tokens = model.encode(collate([items[i] for i in group]))
            specs = model.trimae.sample_masks([t.shape[1] for t in tokens], len(group), rng)
            recon = model.trimae.reconstruct(tokens, specs)
            for t, r, s in zip(tokens, recon, specs):
                target = _gather(t, s.masked)
                visible_mean = _gather(t, s.visible()).mean(dim=1, keepdim=True)
                mse += ((_gather(r, s.masked) - target) ** 2).mean().item() * len(group) / 3
                base += ((visible_mean - target) ** 2).mean().item() * len(group) / 3
            n += len(group)
    return mse / n, base / n


def _safe_c_index(risk, t, e):
    try:
        return c_index(risk, t, e)
    except UndefinedMetricError:
        return None


def write_risks(path, ids, risk, times, events):
    lines = ["id,risk,time,event"] + [f"{i},{float(r)!r},{float(t)!r},{int(e)}" for i, r, t, e in zip(ids, risk, times, events)]
    Path(path).write_text("\n".join(lines) + "\n")


def cross_validate(cohort: Cohort, cfg: RunConfig, out_dir=None):
    """k-fold CV. Writes checkpoints, per-fold risk CSVs and ``report.json`` when ``out_dir`` is given."""
    start = time.perf_counter()
    cohort.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config(cohort.schema)
    items = [patient_tensors(p, cohort.schema, mcfg.views) for p in cohort.patients]
    times, events, ids = cohort.times, cohort.events, cohort.ids
    folds = kfold_split(len(cohort), cfg.folds, RngStream(cfg.seed, "folds"))
    fold_reports, pooled = [], []
    for k, test in enumerate(folds):
        train = np.setdiff1d(np.arange(len(cohort)), test)
        entry = {"fold": k, "n_train": int(len(train)), "n_test": int(len(test)), "events_test": int(events[test].sum())}
        if events[train].sum() == 0:
            warnings.warn(f"fold {k}: no events in the training folds, skipped")
            entry["skipped"] = "no training events"
            fold_reports.append(entry)
            continue
        model = ForeseeModel(mcfg, RngStream(cfg.seed, "init").child(k))
        entry["epoch_losses"] = train_model(model, items, train.tolist(), cfg, fold=k)
        entry["decoder_losses"] = refine_decoder(model, items, train.tolist(), cfg, fold=k)
        risk, outputs = predict(model, items, test.tolist())
        entry["c_index"] = _safe_c_index(risk, times[test], events[test])
        entry["c_index_per_modality"] = {
            m: _safe_c_index(outputs[:, j], times[test], events[test]) for j, m in enumerate(BRANCHES)
        }
        if cohort.latent_risk is not None:
            entry["oracle_c_index"] = _safe_c_index(cohort.latent_risk[test], times[test], events[test])
        if mcfg.trimae:
            mse, base = reconstruction_metrics(model, items, test.tolist(), RngStream(cfg.seed, "masking").child(1000 + k))
            entry["recon_mse"], entry["recon_baseline_mse"] = mse, base
        if entry["c_index"] is None:
            warnings.warn(f"fold {k}: held-out fold has no comparable pairs, skipped")
            entry["skipped"] = "no comparable pairs in held-out fold"
        else:
            pooled += [(ids[i], r, times[i], events[i]) for i, r in zip(test, risk)]
        if out is not None:
            write_risks(out / f"risks_fold{k}.csv", [ids[i] for i in test], risk, times[test], events[test])
            meta = {
                "model_config": mcfg.to_dict(),
                "fold": k,
                "test_ids": [ids[i] for i in test],
                "seed": cfg.seed,
            }
            save_checkpoint(out / f"fold{k}.ckpt", model.state_dict(), meta)
        fold_reports.append(entry)

    scored = [f["c_index"] for f in fold_reports if f.get("c_index") is not None]
    report = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "n_patients": len(cohort),
        "folds": fold_reports,
        "c_index_mean": float(np.mean(scored)) if scored else None,
        "c_index_std": float(np.std(scored)) if scored else None,
    }
    oracle = [f["oracle_c_index"] for f in fold_reports if f.get("oracle_c_index") is not None]
    if oracle:
        report["oracle_c_index_mean"] = float(np.mean(oracle))
    if mcfg.trimae:
        rec = [f for f in fold_reports if "recon_mse" in f]
        report["recon_mse_mean"] = float(np.mean([f["recon_mse"] for f in rec]))
        report["recon_baseline_mse_mean"] = float(np.mean([f["recon_baseline_mse"] for f in rec]))
    if pooled:
        report["logrank"] = logrank_summary(np.array([p[1] for p in pooled]), np.array([p[2] for p in pooled]), np.array([p[3] for p in pooled]))
    if out is not None:
        write_risks(out / "risks_all.csv", [p[0] for p in pooled], [p[1] for p in pooled], [p[2] for p in pooled], [p[3] for p in pooled])
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        (out / "timing.json").write_text(json.dumps({"wall_time_s": time.perf_counter() - start}) + "\n")
    return report


def logrank_summary(risk, times, events):
    split = median_risk_split(risk)
    summary = {"threshold": split.threshold, "n_low": int(len(split.low)), "n_high": int(len(split.high))}
    if split.degenerate:
        summary.update(degenerate=True, statistic=None, p_value=None)
        return summary
    try:
        stat, p = log_rank_p((times[split.low], events[split.low]), (times[split.high], events[split.high]))
    except UndefinedMetricError:
        stat, p = None, None
    summary.update(degenerate=False, statistic=stat, p_value=p)
    return summary


def load_model(path):
    state, meta = load_checkpoint(path)
    mcfg = ModelConfig.from_dict(meta["model_config"])
    model = ForeseeModel(mcfg)
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise ValidationError(f"checkpoint does not match the model layout: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.eval()
    return model, meta


def evaluate_checkpoint(path, cohort: Cohort, all_patients=False, drop_modality=None, drop_frac=0.0, use_trimae=None, seed=None):
    """Held-out (or whole-cohort) metrics of a saved fold model, optionally with token deletion."""
    model, meta = load_model(path)
    mcfg = model.config
    if (mcfg.d_x, mcfg.rna_dim, mcfg.cnv_mut_dim) != (cohort.schema.d_x, cohort.schema.rna_dim, cohort.schema.cnv_mut_dim):
        raise ValidationError("checkpoint was trained on a different cohort schema")
    if drop_modality is not None and drop_modality not in BRANCHES:
        raise ValidationError(f"drop modality must be one of {BRANCHES}")
    if not 0.0 <= drop_frac < 1.0:
        raise ValidationError("drop fraction must lie in [0, 1)")
    items = [patient_tensors(p, cohort.schema, mcfg.views) for p in cohort.patients]
    pos = {pid: i for i, pid in enumerate(cohort.ids)}
    if all_patients:
        index = list(range(len(cohort)))
    else:
        unknown = [pid for pid in meta["test_ids"] if pid not in pos]
        if unknown:
            raise ValidationError(f"held-out patients missing from cohort: {unknown[:5]}")
        index = [pos[pid] for pid in meta["test_ids"]]
    missing = None
    if drop_modality is not None and drop_frac > 0:
        seed = meta.get("seed", 0) if seed is None else seed
        counts = [mcfg.token_counts()[0], *mcfg.token_counts()[1:]]
        missing = sample_deletions(counts, len(index), drop_modality, drop_frac, RngStream(seed, "masking").child(2000 + meta["fold"]))
    risk, _ = predict(model, items, index, missing=missing, use_trimae=use_trimae)
    t, e = cohort.times[index], cohort.events[index]
    result = {
        "checkpoint": str(path),
        "fold": meta.get("fold"),
        "n": len(index),
        "c_index": _safe_c_index(risk, t, e),
        "drop_modality": drop_modality,
        "drop_frac": drop_frac,
        "trimae": bool(mcfg.trimae if use_trimae is None else use_trimae),
        "logrank": logrank_summary(risk, t, e) if len(index) >= 2 else None,
    }
    return result, risk, [cohort.ids[i] for i in index]
