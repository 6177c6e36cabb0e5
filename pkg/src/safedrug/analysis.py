"""Experiment drivers: the γ sweep, mask cosine ablation and error analysis."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from safedrug.data import split
from safedrug.errors import ConfigError, EmptyCohort
from safedrug.metrics import METRIC_NAMES, PatientEval, evaluate, truth_ddi_rate
from safedrug.train import evaluate_model, fit, infer

SWEEP_KEYS = {"ddi": "DDI", "n_med": "Avg. # of Drugs", "jaccard": "Jaccard", "f1": "F1-score", "prauc": "PRAUC"}


@dataclass
class SweepResult:
    gammas: list
    rows: list  # one dict per gamma, averaged over seeds
    cells: list = field(default_factory=list)  # one dict per (gamma, seed)

    def to_dict(self):
        return asdict(self)


def gamma_sweep(cohort, gammas, base_cfg, seeds=(0,), split_seed=0, splits=None):
    """Train one model per (γ, seed) and evaluate it on the test split.

    Rows follow the order of ``gammas``; each cell depends only on its own
    ``(γ, seed)``, so reordering the list reorders rows without changing them.
    """
    if not gammas:
        raise ConfigError("gamma list is empty")
    train, val, test = splits if splits is not None else split(cohort, seed=split_seed)
    cells, rows = [], []
    for gamma in gammas:
        per_seed = []
        for seed in seeds:
            cfg = base_cfg.replace(gamma=float(gamma), seed=int(seed))
            result = fit(train, val, cfg)
            metrics = evaluate_model(result.model, test)
            cell = {"gamma": float(gamma), "seed": int(seed), "best_epoch": result.best_epoch}
            cell.update({k: metrics[name] for k, name in SWEEP_KEYS.items()})
            cells.append(cell)
            per_seed.append(cell)
        row = {"gamma": float(gamma), "seeds": len(per_seed)}
        row.update({k: float(np.mean([c[k] for c in per_seed])) for k in SWEEP_KEYS})
        rows.append(row)
    return SweepResult([float(g) for g in gammas], rows, cells)


def count_inversions(values):
    """Adjacent decreases in a sequence meant to be nondecreasing."""
    return sum(1 for a, b in zip(values, values[1:]) if b < a)


# ---------------------------------------------------------------- mask ablation


@dataclass
class CosineSummary:
    cos_interacted: float | None
    cos_all: float | None
    output_ddi: float | None = None


@dataclass
class MaskAblationResult:
    masked: CosineSummary
    unmasked: CosineSummary | None = None

    def to_dict(self):
        return asdict(self)


def column_cosines(weights):
    """Pairwise cosine between columns; a zero-norm column has cosine 0 with everything."""
    w = np.asarray(weights, dtype=np.float64)
    norms = np.linalg.norm(w, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    cos = (w.T @ w) / np.outer(safe, safe)
    zero = norms == 0
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    return np.clip(cos, -1.0, 1.0)


def mask_cosines(weights, ddi, output_ddi=None):
    """Mean column cosine over interacting pairs and over all ordered pairs i != j.

    ``weights`` is the effective |S| x |M| local weight (``W4 * H`` for the
    masked model). With no interacting pair ``cos_interacted`` is ``None``.
    """
    cos = column_cosines(weights)
    ddi = np.asarray(ddi)
    n = cos.shape[0]
    off = ~np.eye(n, dtype=bool)
    inter = off & (ddi == 1)
    cos_all = float(cos[off].mean()) if off.any() else None
    cos_inter = float(cos[inter].mean()) if inter.any() else None
    return CosineSummary(cos_inter, cos_all, output_ddi)


def model_cosines(model, ddi, test=None):
    out_ddi = evaluate_model(model, test)["DDI"] if test is not None else None
    return mask_cosines(model.effective_local_weights(), ddi, out_ddi)


def mask_ablation(cohort, base_cfg, seeds=(0,), split_seed=0, unmasked=True, splits=None):
    """Per seed: train the masked model (and the dense variant) and report cosines and test DDI."""
    train, val, test = splits if splits is not None else split(cohort, seed=split_seed)
    results = []
    for seed in seeds:
        masked = fit(train, val, base_cfg.replace(seed=int(seed), use_mask=True)).model
        dense = fit(train, val, base_cfg.replace(seed=int(seed), use_mask=False)).model if unmasked else None
        results.append(
            MaskAblationResult(
                model_cosines(masked, cohort.ddi, test),
                model_cosines(dense, cohort.ddi, test) if dense is not None else None,
            )
        )
    return results


# ---------------------------------------------------------------- error analysis


@dataclass
class ErrorRow:
    scenario: str  # "ddi" keeps patients, "med" keeps visits
    threshold: float
    n_patients: int
    n_visits: int
    empty: bool
    metrics: dict | None

    def flat(self):
        row = {k: v for k, v in asdict(self).items() if k != "metrics"}
        for name in METRIC_NAMES:
            row[name] = self.metrics[name] if self.metrics else None
        return row


def _check_sorted(values, what):
    values = [float(v) for v in values]
    if values != sorted(values):
        raise ConfigError(f"{what} thresholds must be sorted ascending")
    return values


def _row(scenario, threshold, patients, ddi):
    n_visits = sum(len(p.visits) for p in patients)
    if not patients:
        return ErrorRow(scenario, threshold, 0, 0, True, None)
    try:
        metrics = evaluate(patients, ddi)
    except EmptyCohort:
        return ErrorRow(scenario, threshold, len(patients), n_visits, True, None)
    return ErrorRow(scenario, threshold, len(patients), n_visits, False, metrics)


def error_analysis(evals, ddi, ddi_thresholds=(), med_thresholds=()):
    """Metric curves on subsets of hard test cases.

    ``ddi`` scenario: keep patients whose ground-truth DDI rate is at least the
    threshold. ``med`` scenario: keep visits whose ground-truth drug count is at
    least the threshold (patients left without visits drop out). Empty subsets
    yield flagged rows instead of errors.
    """
    ddi = np.asarray(ddi)
    rows = []
    truth_rates = [truth_ddi_rate(p, ddi) for p in evals]
    for t in _check_sorted(ddi_thresholds, "DDI"):
        kept = [p for p, rate in zip(evals, truth_rates) if rate >= t]
        rows.append(_row("ddi", t, kept, ddi))
    for t in _check_sorted(med_thresholds, "medication count"):
        kept = []
        for p in evals:
            visits = [v for v in p.visits if int(v.truth.sum()) >= t]
            if visits:
                kept.append(p if len(visits) == len(p.visits) else PatientEval(visits))
        rows.append(_row("med", t, kept, ddi))
    return rows


def error_analysis_for_model(model, test, ddi_thresholds, med_thresholds):
    return error_analysis(infer(model, test.patients), test.ddi, ddi_thresholds, med_thresholds)


# ---------------------------------------------------------------- output


def rows_to_csv(rows):
    rows = [r.flat() if hasattr(r, "flat") else dict(r) for r in rows]
    if not rows:
        return ""
    buf = io.StringIO()
    fieldnames = list(rows[0])
    for r in rows[1:]:
        fieldnames += [k for k in r if k not in fieldnames]
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: "" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in fieldnames})
    return buf.getvalue()


def to_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"
