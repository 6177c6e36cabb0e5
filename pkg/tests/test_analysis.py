import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safedrug.analysis import (
    column_cosines,
    count_inversions,
    error_analysis,
    gamma_sweep,
    mask_cosines,
    model_cosines,
    rows_to_csv,
)
from safedrug.errors import ConfigError
from safedrug.metrics import PatientEval, VisitEval, evaluate
from safedrug.train import TrainConfig, infer, model_for_cohort

FAST = TrainConfig(epochs=1, dim=8, record_wall_time=False)


def oracle_cosines(w, d):
    n = len(w[0])
    inter, every = [], []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = [row[i] for row in w], [row[j] for row in w]
            na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
            c = 0.0 if na == 0 or nb == 0 else sum(x * y for x, y in zip(a, b)) / (na * nb)
            every.append(c)
            if d[i][j] == 1:
                inter.append(c)
    mean = lambda xs: sum(xs) / len(xs) if xs else None  # noqa: E731
    return mean(inter), mean(every)


class TestCosines:
    def test_orthogonal(self):
        assert column_cosines(np.eye(3)[:, :2])[0, 1] == 0.0

    def test_identical(self):
        w = np.array([[1.0, 1.0], [2.0, 2.0]])
        assert column_cosines(w)[0, 1] == pytest.approx(1.0, abs=1e-15)

    def test_zero_column(self):
        w = np.array([[0.0, 1.0], [0.0, 2.0]])
        assert column_cosines(w)[0, 1] == 0.0

    def test_no_interacting_pairs(self):
        summary = mask_cosines(np.random.default_rng(0).normal(size=(4, 3)), np.zeros((3, 3)))
        assert summary.cos_interacted is None and summary.cos_all is not None

    @settings(max_examples=200)
    @given(seed=st.integers(0, 2**32 - 1), rows=st.integers(1, 8), cols=st.integers(2, 10))
    def test_brute_force(self, seed, rows, cols):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(rows, cols)) * (rng.random((rows, cols)) < 0.6)
        upper = np.triu(rng.random((cols, cols)) < 0.4, 1)
        d = (upper | upper.T).astype(int)
        got = mask_cosines(w, d)
        want_inter, want_all = oracle_cosines(w.tolist(), d.tolist())
        assert abs(got.cos_all - want_all) <= 1e-12
        if want_inter is None:
            assert got.cos_interacted is None
        else:
            assert abs(got.cos_interacted - want_inter) <= 1e-12
        assert np.all(np.abs(column_cosines(w)) <= 1.0)

    def test_model_cosines_use_masked_weights(self, small_cohort):
        model = model_for_cohort(small_cohort, FAST)
        summary = model_cosines(model, small_cohort.ddi)
        weights = model.params["W4"].data * model.mask
        assert summary.cos_all == mask_cosines(weights, small_cohort.ddi).cos_all


def evals_for(rng, n_patients=15, n=8):
    patients = []
    for _ in range(n_patients):
        visits = []
        for _ in range(int(rng.integers(1, 4))):
            truth = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(int)
            pred = (rng.random(n) < 0.5).astype(int)
            visits.append(VisitEval(truth, pred, rng.random(n)))
        patients.append(PatientEval(visits))
    upper = np.triu(rng.random((n, n)) < 0.3, 1)
    return patients, (upper | upper.T).astype(int)


class TestErrorAnalysis:
    def test_zero_threshold_is_unfiltered(self):
        evals, d = evals_for(np.random.default_rng(0))
        rows = error_analysis(evals, d, [0.0], [0])
        full = evaluate(evals, d)
        assert rows[0].metrics == full and rows[1].metrics == full

    def test_above_max_is_flagged(self):
        evals, d = evals_for(np.random.default_rng(1))
        rows = error_analysis(evals, d, [1.1], [99])
        assert all(r.empty and r.metrics is None and r.n_patients == 0 for r in rows)

    @settings(max_examples=50)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_sizes_nonincreasing(self, seed):
        evals, d = evals_for(np.random.default_rng(seed))
        rows = error_analysis(evals, d, [0, 0.05, 0.1, 0.2, 0.5], [0, 2, 4, 6, 8])
        for scenario in ("ddi", "med"):
            sizes = [(r.n_patients, r.n_visits) for r in rows if r.scenario == scenario]
            assert all(b[0] <= a[0] and b[1] <= a[1] for a, b in zip(sizes, sizes[1:]))

    def test_med_scenario_drops_small_visits(self):
        n = 4
        small = VisitEval([1, 0, 0, 0], [1, 0, 0, 0], np.zeros(n))
        big = VisitEval([1, 1, 1, 0], [1, 1, 0, 0], np.zeros(n))
        rows = error_analysis([PatientEval([small, big])], np.zeros((n, n)), [], [3])
        assert rows[0].n_visits == 1 and rows[0].metrics["Jaccard"] == pytest.approx(2 / 3)

    def test_unsorted_thresholds(self):
        evals, d = evals_for(np.random.default_rng(2))
        with pytest.raises(ConfigError):
            error_analysis(evals, d, [0.1, 0.0], [])

    def test_csv(self):
        evals, d = evals_for(np.random.default_rng(3))
        rows = error_analysis(evals, d, [0.0, 2.0], [])
        parsed = list(csv.DictReader(io.StringIO(rows_to_csv(rows))))
        assert len(parsed) == 2
        assert float(parsed[0]["Jaccard"]) == rows[0].metrics["Jaccard"]
        assert parsed[1]["empty"] == "True" and parsed[1]["Jaccard"] == ""

    def test_model_zero_threshold(self, small_splits):
        model = model_for_cohort(small_splits[0], FAST)
        test = small_splits[2]
        evals = infer(model, test.patients)
        assert error_analysis(evals, test.ddi, [0.0], [])[0].metrics == evaluate(evals, test.ddi)


class TestSweep:
    def test_single_gamma(self, small_cohort, small_splits):
        result = gamma_sweep(small_cohort, [0.05], FAST, splits=small_splits)
        assert len(result.rows) == 1 and result.rows[0]["gamma"] == 0.05
        assert set(result.rows[0]) == {"gamma", "seeds", "ddi", "n_med", "jaccard", "f1", "prauc"}

    def test_permuting_gammas_permutes_rows(self, small_cohort, small_splits):
        a = gamma_sweep(small_cohort, [0.0, 0.04, 0.08], FAST, seeds=(0, 1), splits=small_splits)
        b = gamma_sweep(small_cohort, [0.08, 0.0, 0.04], FAST, seeds=(0, 1), splits=small_splits)
        by_gamma = {r["gamma"]: r for r in b.rows}
        assert all(by_gamma[r["gamma"]] == r for r in a.rows)
        assert len(a.cells) == 6

    def test_row_is_seed_mean(self, small_cohort, small_splits):
        result = gamma_sweep(small_cohort, [0.06], FAST, seeds=(0, 1, 2), splits=small_splits)
        assert result.rows[0]["jaccard"] == pytest.approx(np.mean([c["jaccard"] for c in result.cells]), abs=1e-15)

    def test_empty(self, small_cohort):
        with pytest.raises(ConfigError):
            gamma_sweep(small_cohort, [], FAST)

    @pytest.mark.parametrize("values, n", [([1, 2, 3], 0), ([1, 3, 2], 1), ([3, 2, 1], 2), ([1, 1], 0)])
    def test_inversions(self, values, n):
        assert count_inversions(values) == n
