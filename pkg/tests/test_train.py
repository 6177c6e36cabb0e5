import json

import numpy as np
import pytest

import safedrug.train as train_mod
from conftest import sweep_cell
from safedrug.autodiff import AdamState, Streams, Tensor
from safedrug.data import PatientRecord, SyntheticSpec, Visit, generate_cohort
from safedrug.errors import ConfigError, NonFiniteLoss, VocabularyMismatch
from safedrug.train import (
    TrainConfig,
    check_vocabulary,
    evaluate_model,
    fit,
    infer,
    model_for_cohort,
    restore,
    train_epoch,
)

FAST = dict(dim=16, record_wall_time=False)


@pytest.fixture(scope="module")
def toy_cohort():
    return generate_cohort(SyntheticSpec(n_patients=5, n_drugs=8, n_clusters=2, drugs_per_cluster=3), seed=0)


def arrays_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"epochs": 0}, {"checkpoint_every": -1}, {"gamma": 2.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    def test_round_trip(self):
        cfg = TrainConfig(lr=1e-3, gamma=0.0, use_mask=False)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrainEpoch:
    def test_zero_learning_rate_keeps_parameters(self, toy_cohort):
        one = toy_cohort.with_patients(toy_cohort.patients[:1])
        cfg = TrainConfig(**FAST)
        model = model_for_cohort(one, cfg)
        before = model.parameter_arrays()
        entries = train_epoch(model, one, cfg, AdamState(lr=0.0), epoch=1)
        assert arrays_equal(before, model.parameter_arrays())
        assert len(entries) == 1 and np.isfinite(entries[0]["total"])

    def test_bit_identical_runs(self, toy_cohort):
        cfg = TrainConfig(**FAST)
        finals = []
        for _ in range(2):
            model = model_for_cohort(toy_cohort, cfg)
            opt = AdamState(lr=cfg.lr)
            for epoch in (1, 2):
                train_epoch(model, toy_cohort, cfg, opt, epoch)
            finals.append(model.parameter_arrays())
        assert arrays_equal(*finals)

    def test_gamma_one_pins_beta(self, toy_cohort):
        cfg = TrainConfig(gamma=1.0, **FAST)
        model = model_for_cohort(toy_cohort, cfg)
        entries = train_epoch(model, toy_cohort, cfg, AdamState(lr=cfg.lr), 1)
        assert all(e["beta"] == 1.0 for e in entries)

    def test_shuffled_order_is_a_permutation(self, toy_cohort):
        cfg = TrainConfig(**FAST)
        model = model_for_cohort(toy_cohort, cfg)
        entries = train_epoch(model, toy_cohort, cfg, AdamState(lr=cfg.lr), 3)
        order = [e["patient_index"] for e in entries]
        assert sorted(order) == list(range(5))
        assert order == Streams(cfg.seed).child("shuffle").get("epoch-3").permutation(5).tolist()

    def test_non_finite_loss(self, toy_cohort, monkeypatch):
        monkeypatch.setattr(train_mod, "patient_loss", lambda *a, **k: (Tensor(float("nan")), {}))
        cfg = TrainConfig(**FAST)
        with pytest.raises(NonFiniteLoss) as info:
            train_epoch(model_for_cohort(toy_cohort, cfg), toy_cohort, cfg, AdamState(), 4)
        assert info.value.epoch == 4
        assert info.value.patient_id in {p.patient_id for p in toy_cohort.patients}

    def test_only_masked_weights_move(self, toy_cohort):
        cfg = TrainConfig(**FAST)
        model = model_for_cohort(toy_cohort, cfg)
        w4 = model.params["W4"].data.copy()
        train_epoch(model, toy_cohort, cfg, AdamState(lr=1e-2), 1)
        off = model.mask == 0
        assert np.array_equal(model.params["W4"].data[off], w4[off])
        assert not np.array_equal(model.params["W4"].data[~off], w4[~off])


class TestFit:
    def test_single_epoch(self, small_splits):
        result = fit(small_splits[0], small_splits[1], TrainConfig(epochs=1, **FAST))
        assert result.best_epoch == 1 and len(result.history) == 1
        assert result.best_val == result.history[0]["val"]

    def test_strictly_improving_validation_picks_last(self, small_splits, monkeypatch):
        scores = iter([0.1, 0.2, 0.3, 0.4])
        monkeypatch.setattr(train_mod, "evaluate_model", lambda model, cohort: {"Jaccard": next(scores)})
        assert fit(small_splits[0], small_splits[1], TrainConfig(epochs=4, **FAST)).best_epoch == 4

    def test_ties_keep_earlier_epoch(self, small_splits, monkeypatch):
        scores = iter([0.1, 0.5, 0.5, 0.2])
        monkeypatch.setattr(train_mod, "evaluate_model", lambda model, cohort: {"Jaccard": next(scores)})
        assert fit(small_splits[0], small_splits[1], TrainConfig(epochs=4, **FAST)).best_epoch == 2

    def test_best_parameters_restored(self, small_splits, tmp_path):
        result = fit(small_splits[0], small_splits[1], TrainConfig(epochs=3, **FAST), out_dir=tmp_path)
        model, _, ckpt = restore(tmp_path / f"epoch_{result.best_epoch}.ckpt")
        assert arrays_equal(model.parameter_arrays(), result.model.parameter_arrays())
        assert ckpt["meta"]["epoch"] == result.best_epoch

    def test_overlapping_splits_rejected(self, small_splits):
        with pytest.raises(ConfigError):
            fit(small_splits[0], small_splits[0], TrainConfig(epochs=1, **FAST))

    def test_loss_decreases_on_toy_cohort(self, toy_cohort):
        losses = [h["loss"] for h in fit(toy_cohort, None, TrainConfig(epochs=20, gamma=1.0, seed=0)).history]
        assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.fixture(scope="module")
def run(small_splits, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(epochs=2, **FAST)
    return fit(small_splits[0], small_splits[1], cfg, out_dir=out, run={"note": "x"}), out


class TestArtifacts:
    def test_files(self, run):
        _, out = run
        assert sorted(p.name for p in out.iterdir()) == ["best.ckpt", "epoch_1.ckpt", "epoch_2.ckpt", "train_log.jsonl"]

    def test_log_ordering(self, run, small_splits):
        _, out = run
        rows = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
        assert rows[0]["kind"] == "header" and rows[0]["run"] == {"note": "x"}
        n = len(small_splits[0].patients)
        kinds = [r["kind"] for r in rows[1:]]
        assert kinds == (["patient"] * n + ["epoch"]) * 2
        epochs = [r["epoch"] for r in rows[1:]]
        assert epochs == sorted(epochs)
        for r in rows[1:]:
            if r["kind"] == "patient":
                assert {"l_bce", "l_multi", "l_ddi", "beta", "total", "ddi_rate", "patient_id"} <= set(r)

    def test_round_trip_inference(self, run, small_splits):
        result, out = run
        model, cfg, ckpt = restore(out / "best.ckpt")
        test = small_splits[2]
        a, b = infer(result.model, test.patients), infer(model, test.patients)
        for pa, pb in zip(a, b):
            for va, vb in zip(pa.visits, pb.visits):
                assert np.array_equal(va.scores, vb.scores) and np.array_equal(va.predicted, vb.predicted)
        assert np.array_equal(ckpt["ddi"], small_splits[0].ddi)
        assert cfg == TrainConfig(epochs=2, **FAST)

    def test_vocabulary_mismatch(self, run, default_cohort):
        _, out = run
        model, _, _ = restore(out / "best.ckpt")
        with pytest.raises(VocabularyMismatch):
            check_vocabulary(model, default_cohort)

    def test_same_run_same_bytes(self, run, small_splits, tmp_path):
        _, out = run
        fit(small_splits[0], small_splits[1], TrainConfig(epochs=2, **FAST), out_dir=tmp_path, run={"note": "x"})
        for name in ("best.ckpt", "epoch_1.ckpt", "train_log.jsonl"):
            assert (out / name).read_bytes() == (tmp_path / name).read_bytes()


class TestInference:
    def test_prefix_property(self, small_splits):
        model = model_for_cohort(small_splits[0], TrainConfig(**FAST))
        patient = small_splits[2].patients[0]
        full = infer(model, [patient])[0]
        head = infer(model, [PatientRecord(patient.patient_id, patient.visits[:1])])[0]
        assert np.array_equal(full.visits[0].scores, head.visits[0].scores)

    def test_repeatable(self, small_splits):
        model = model_for_cohort(small_splits[0], TrainConfig(**FAST))
        a = evaluate_model(model, small_splits[2])
        assert a == evaluate_model(model, small_splits[2])

    def test_zero_final_layers_recommend_nothing(self, small_splits):
        model = model_for_cohort(small_splits[0], TrainConfig(**FAST))
        model.zero_final_layers()
        for p in infer(model, small_splits[2].patients):
            for v in p.visits:
                assert not v.predicted.any()
                assert np.all(v.scores == 0.5)

    def test_visit_without_codes(self, small_splits):
        model = model_for_cohort(small_splits[0], TrainConfig(**FAST))
        empty = Visit.of([], [], [])
        out = infer(model, [PatientRecord("e", (empty, empty))])[0]
        assert all(np.isfinite(v.scores).all() for v in out.visits)


@pytest.mark.slow
def test_ddi_pressure(default_splits):
    """γ=0 should end with a strictly lower test DDI rate than γ=0.08 in at least 4 of 5 seeds."""
    wins = 0
    for seed in range(5):
        low = sweep_cell(default_splits, 0.0, seed)[0]["DDI"]
        high = sweep_cell(default_splits, 0.08, seed)[0]["DDI"]
        print(f"seed {seed}: DDI(γ=0)={low:.4f} DDI(γ=0.08)={high:.4f}")
        wins += low < high
    assert wins >= 4
