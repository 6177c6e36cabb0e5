"""Recommendation metrics, bootstrap evaluation and Student's t-test.

Per-visit metrics take 0/1 vectors. Conventions for degenerate visits:

* DDI rate is 0 when no visit of the patient predicts two or more drugs.
* Jaccard of two empty sets is 1.
* Precision with an empty prediction, recall with an empty truth, and F1
  with ``precision + recall == 0`` are 0.
* PRAUC of a visit without any true drug is 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from safedrug.autodiff.rng import Streams
from safedrug.errors import EmptyCohort, EmptyTestSet

METRIC_NAMES = ("DDI", "Jaccard", "F1-score", "PRAUC", "Avg. # of Drugs")


@dataclass
class VisitEval:
    truth: np.ndarray
    predicted: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.int8)
        self.predicted = np.asarray(self.predicted, dtype=np.int8)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not self.truth.shape == self.predicted.shape == self.scores.shape:
            raise ValueError("truth, predicted and scores must have the same length")


@dataclass
class PatientEval:
    visits: list

    def __post_init__(self):
        if not self.visits:
            raise ValueError("a patient needs at least one visit")


def visit_ddi_counts(predicted, ddi):
    """``(interacting ordered pairs, ordered pairs k != l)`` among predicted drugs."""
    idx = np.flatnonzero(predicted)
    n = len(idx)
    if n < 2:
        return 0, 0
    sub = ddi[np.ix_(idx, idx)]
    return int(sub.sum() - np.trace(sub)), n * (n - 1)


def ddi_rate(patient, ddi):
    ddi = np.asarray(ddi)
    hits = pairs = 0
    for v in patient.visits:
        h, p = visit_ddi_counts(v.predicted, ddi)
        hits += h
        pairs += p
    return hits / pairs if pairs else 0.0


def truth_ddi_rate(patient, ddi):
    """DDI rate of the ground-truth prescriptions."""
    return ddi_rate(PatientEval([VisitEval(v.truth, v.truth, v.scores) for v in patient.visits]), ddi)


def visit_jaccard(truth, predicted):
    inter = int(np.sum((truth == 1) & (predicted == 1)))
    union = int(np.sum((truth == 1) | (predicted == 1)))
    return 1.0 if union == 0 else inter / union


def visit_prf(truth, predicted):
    inter = int(np.sum((truth == 1) & (predicted == 1)))
    n_pred, n_true = int(predicted.sum()), int(truth.sum())
    precision = inter / n_pred if n_pred else 0.0
    recall = inter / n_true if n_true else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def visit_prauc(truth, scores):
    n_true = int(truth.sum())
    if n_true == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = truth[order].astype(np.float64)
    cum = np.cumsum(hits)
    precision = cum / np.arange(1, len(hits) + 1)
    delta_recall = hits / n_true
    return float(np.sum(precision * delta_recall))


def jaccard(patient):
    return float(np.mean([visit_jaccard(v.truth, v.predicted) for v in patient.visits]))


def f1(patient):
    return float(np.mean([visit_prf(v.truth, v.predicted)[2] for v in patient.visits]))


def prauc(patient):
    return float(np.mean([visit_prauc(v.truth, v.scores) for v in patient.visits]))


def avg_drug_count(patients):
    counts = [int(v.predicted.sum()) for p in patients for v in p.visits]
    return float(np.mean(counts)) if counts else 0.0


def cohort_mean(values):
    values = list(values)
    if not values:
        raise EmptyCohort("cannot average over an empty cohort")
    return float(np.mean(values))


def evaluate(patients, ddi):
    """All five headline metrics over a list of :class:`PatientEval`."""
    if not patients:
        raise EmptyCohort("no patients to evaluate")
    return {
        "DDI": cohort_mean(ddi_rate(p, ddi) for p in patients),
        "Jaccard": cohort_mean(jaccard(p) for p in patients),
        "F1-score": cohort_mean(f1(p) for p in patients),
        "PRAUC": cohort_mean(prauc(p) for p in patients),
        "Avg. # of Drugs": avg_drug_count(patients),
    }


def bootstrap_eval(patients, ddi, rounds=10, fraction=0.8, streams=None, seed=0):
    """Resample ``floor(fraction * n)`` patients with replacement per round.

    Rounds draw from independent sub-streams, so round ``k`` is the same
    whatever the total number of rounds. ``std`` is the sample standard
    deviation, or ``None`` with a single round.
    """
    if not patients:
        raise EmptyTestSet("empty test set")
    if rounds < 1 or not 0.0 < fraction <= 1.0:
        raise ValueError("need rounds >= 1 and 0 < fraction <= 1")
    streams = streams or Streams(seed).child("bootstrap")
    n = len(patients)
    size = max(1, int(math.floor(fraction * n)))
    raw = {name: [] for name in METRIC_NAMES}
    for r in range(rounds):
        rng = streams.get(f"round-{r}")
        picks = rng.integers(0, n, size=size)
        result = evaluate([patients[i] for i in picks], ddi)
        for name in METRIC_NAMES:
            raw[name].append(result[name])
    out = {}
    for name in METRIC_NAMES:
        values = np.asarray(raw[name])
        out[name] = {
            "mean": float(values.mean()),
            "std": float(values.std(ddof=1)) if rounds > 1 else None,
            "rounds": [float(x) for x in values],
        }
    return out


def _betacf(a, b, x, max_iter=300, tol=3e-16):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h


def betainc_regularized(a, b, x):
    """I_x(a, b) by the Lentz continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_statistic(a, b):
    """Pooled-variance two-sample t and its degrees of freedom."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    df = na + nb - 2
    pooled = ((na - 1) * a.var(ddof=1 if na > 1 else 0) + (nb - 1) * b.var(ddof=1 if nb > 1 else 0)) / max(df, 1)
    se = math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    diff = a.mean() - b.mean()
    return diff, se, df


def t_test(a, b):
    """Two-tailed p-value of Student's pooled-variance t-test."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("t_test needs two non-empty samples")
    diff, se, df = t_statistic(a, b)
    if se == 0.0 or df < 1:
        return 1.0 if diff == 0.0 else 0.0
    t = diff / se
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))
