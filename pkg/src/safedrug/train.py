"""Training loop, checkpoints, model selection and inference."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from safedrug import __version__
from safedrug.autodiff import AdamState, Streams, add, adam_step, mul
from safedrug.autodiff.checkpoint import load_checkpoint, save_checkpoint
from safedrug.chem import DrugEntry, MaskMatrix, build_mask
from safedrug.data import ddi_edges, ddi_from_edges
from safedrug.errors import ConfigError, NonFiniteLoss, VocabularyMismatch
from safedrug.loss import LossConfig, bce_loss, combine, controller_beta, ddi_loss, multi_hinge_loss
from safedrug.metrics import PatientEval, VisitEval, ddi_rate, evaluate
from safedrug.model import ModelConfig, SafeDrugModel, atom_vocabulary, molecules_for_drugs, multihot


@dataclass
class TrainConfig:
    """Every hyperparameter of one run, flat so that it maps onto TOML and flags."""

    seed: int = 0
    epochs: int = 50
    lr: float = 2e-4
    dim: int = 64
    layers: int = 2
    delta: float = 0.5
    dropout: float = 0.5
    use_mask: bool = True
    alpha: float = 0.95
    kp: float = 0.05
    gamma: float = 0.06
    checkpoint_every: int = 1
    record_wall_time: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0 (0 disables per-epoch checkpoints)")
        self.loss_config()

    def loss_config(self):
        return LossConfig(self.alpha, self.kp, self.gamma)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return TrainConfig.from_dict({**self.to_dict(), **changes})


def build_model(drugs, n_diagnoses, n_procedures, cfg, mask=None):
    """Fresh model for a drug vocabulary, initialised from the ``init`` stream."""
    drugs = list(drugs)
    mask = mask if mask is not None else build_mask(drugs)
    molecules, owner = molecules_for_drugs(drugs)
    mcfg = ModelConfig(
        n_diagnoses=n_diagnoses,
        n_procedures=n_procedures,
        n_drugs=len(drugs),
        n_substructures=mask.shape[0],
        atom_vocab=atom_vocabulary(molecules),
        dim=cfg.dim,
        layers=cfg.layers,
        delta=cfg.delta,
        dropout=cfg.dropout,
        use_mask=cfg.use_mask,
    )
    rng = Streams(cfg.seed).get("init")
    model = SafeDrugModel.build(mcfg, mask, molecules, rng, owner, [d.drug_id for d in drugs])
    model.mask_matrix = mask
    return model


def model_for_cohort(cohort, cfg):
    return build_model(cohort.drugs, cohort.n_diagnoses, cohort.n_procedures, cfg)


# ---------------------------------------------------------------- one step


def patient_loss(model, patient, ddi, loss_cfg, training=True, rng=None, e_g=None):
    """Mean per-visit loss of one patient and its averaged breakdown."""
    if e_g is None:
        e_g = model.drug_memory()
    traces = model.forward_patient(patient.visits, training=training, rng=rng, e_g=e_g)
    n_drugs = model.cfg.n_drugs
    predicted = PatientEval([VisitEval(t.m_hat, t.m_hat, t.o_hat.data) for t in traces])
    realized = ddi_rate(predicted, ddi)
    beta = controller_beta(realized, loss_cfg)
    loss = None
    parts = np.zeros(5)
    for visit, trace in zip(patient.visits, traces):
        target = multihot(visit.medications, n_drugs)
        l, bd = combine(
            bce_loss(target, trace.o_hat, tolerant=True),
            multi_hinge_loss(target, trace.o_hat),
            ddi_loss(trace.o_hat, ddi),
            beta,
            loss_cfg,
        )
        loss = l if loss is None else add(loss, l)
        parts += (bd.l_bce, bd.l_multi, bd.l_ddi, bd.beta, bd.total)
    scale = 1.0 / len(patient.visits)
    summary = dict(zip(("l_bce", "l_multi", "l_ddi", "beta", "total"), (parts * scale).tolist()))
    summary["ddi_rate"] = realized
    return mul(loss, scale), summary


def train_step(model, patient, ddi, loss_cfg, optimizer, rng, epoch=0):
    """Forward, backward and one Adam update for one patient."""
    for p in model.params.values():
        p.grad = None
    loss, parts = patient_loss(model, patient, ddi, loss_cfg, training=True, rng=rng)
    if not math.isfinite(float(loss.data)):
        raise NonFiniteLoss(patient.patient_id, epoch, float(loss.data))
    loss.backward()
    adam_step(model.params, {k: p.grad for k, p in model.params.items()}, optimizer)
    return parts


# ---------------------------------------------------------------- inference


def infer(model, patients):
    """Eval-mode predictions as :class:`PatientEval` records (no dropout)."""
    e_g = model.drug_memory()
    out = []
    for patient in patients:
        traces = model.forward_patient(patient.visits, training=False, e_g=e_g)
        out.append(
            PatientEval(
                [
                    VisitEval(multihot(v.medications, model.cfg.n_drugs).astype(np.int8), t.m_hat, t.o_hat.data.copy())
                    for v, t in zip(patient.visits, traces)
                ]
            )
        )
    return out


def evaluate_model(model, cohort):
    return evaluate(infer(model, cohort.patients), cohort.ddi)


# ---------------------------------------------------------------- checkpoints


def checkpoint_config(model, cfg, drugs, n_diagnoses, n_procedures, ddi=None, run=None):
    return {
        "run": run or {},
        "ddi_edges": ddi_edges(ddi) if ddi is not None else [],
        "train": cfg.to_dict(),
        "model": model.cfg.to_dict(),
        "n_diagnoses": n_diagnoses,
        "n_procedures": n_procedures,
        "drugs": [{"id": d.drug_id, "smiles": list(d.smiles), "fragments": list(d.fragment_keys)} for d in drugs],
        "mask": json.loads(model.mask_matrix.to_json()),
    }


def write_checkpoint(path, model, optimizer, cfg, drugs, n_diagnoses, n_procedures, ddi, run, meta):
    config = checkpoint_config(model, cfg, drugs, n_diagnoses, n_procedures, ddi, run)
    save_checkpoint(path, model.parameter_arrays(), optimizer, config, {"tool_version": __version__, **meta})


def restore(path):
    """Rebuild ``(model, train_config, checkpoint)`` from a checkpoint file.

    ``checkpoint["ddi"]`` holds the DDI matrix the model was trained with.
    """
    ckpt = load_checkpoint(path)
    conf = ckpt["config"]
    cfg = TrainConfig.from_dict(conf["train"])
    drugs = [DrugEntry(d["id"], tuple(d["smiles"]), tuple(d["fragments"])) for d in conf["drugs"]]
    mask = MaskMatrix.from_json(json.dumps(conf["mask"]))
    model = build_model(drugs, conf["n_diagnoses"], conf["n_procedures"], cfg, mask)
    model.load_arrays(ckpt["params"])
    ckpt["ddi"] = ddi_from_edges(conf.get("ddi_edges", []), len(drugs))
    return model, cfg, ckpt


def check_vocabulary(model, cohort):
    if tuple(d.drug_id for d in cohort.drugs) != tuple(model.drug_ids):
        raise VocabularyMismatch("cohort drug vocabulary differs from the checkpoint's")
    if (cohort.n_diagnoses, cohort.n_procedures) != (model.cfg.n_diagnoses, model.cfg.n_procedures):
        raise VocabularyMismatch("cohort diagnosis/procedure space differs from the checkpoint's")


# ---------------------------------------------------------------- fit


@dataclass
class FitResult:
    model: SafeDrugModel
    history: list
    best_epoch: int
    best_val: dict
    optimizer: AdamState


def _json_line(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def train_epoch(model, train, cfg, optimizer, epoch, streams=None):
    """One pass over ``train`` in seeded shuffled order, one Adam step per patient.

    Returns one log entry per patient, in visiting order.
    """
    streams = streams or Streams(cfg.seed)
    loss_cfg = cfg.loss_config()
    order = streams.child("shuffle").get(f"epoch-{epoch}").permutation(len(train.patients))
    drop_rng = streams.child("dropout").get(f"epoch-{epoch}")
    entries = []
    for i in order:
        started = time.perf_counter()
        patient = train.patients[i]
        parts = train_step(model, patient, train.ddi, loss_cfg, optimizer, drop_rng, epoch)
        entry = {"kind": "patient", "epoch": epoch, "patient_index": int(i), "patient_id": patient.patient_id, **parts}
        if cfg.record_wall_time:
            entry["wall_time"] = time.perf_counter() - started
        entries.append(entry)
    return entries


def epoch_summary(epoch, entries, val_metrics):
    keys = ("total", "l_bce", "l_multi", "l_ddi", "beta", "ddi_rate")
    means = {k: float(np.mean([e[k] for e in entries])) if entries else 0.0 for k in keys}
    return {"kind": "epoch", "epoch": epoch, "loss": means.pop("total"), **means, "val": val_metrics}


def fit(train, val, cfg, out_dir=None, log=None, run=None):
    """Train on ``train``; keep the epoch with the highest validation Jaccard.

    Ties keep the earlier epoch; without a validation set the lowest mean
    training loss wins. With ``out_dir`` set, writes ``train_log.jsonl`` (one
    line per patient step plus an epoch summary line), ``epoch_<n>.ckpt``
    every ``checkpoint_every`` epochs and ``best.ckpt``. ``log`` receives each
    epoch summary. ``run`` (the caller's resolved configuration) is echoed
    into the log header and every checkpoint.
    """
    check_disjoint(train, val)
    model = model_for_cohort(train, cfg)
    optimizer = AdamState(lr=cfg.lr)
    streams = Streams(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / "train_log.jsonl").open("w", encoding="utf-8", newline="\n")
        header = {"kind": "header", "tool_version": __version__, "train": cfg.to_dict(), "run": run or {}}
        log_file.write(_json_line(header) + "\n")
    ckpt_args = (cfg, train.drugs, train.n_diagnoses, train.n_procedures, train.ddi, run)
    history = []
    best_epoch, best_score, best_params = 0, None, model.parameter_arrays()
    try:
        for epoch in range(1, cfg.epochs + 1):
            entries = train_epoch(model, train, cfg, optimizer, epoch, streams)
            val_metrics = evaluate_model(model, val) if val is not None and val.patients else None
            summary = epoch_summary(epoch, entries, val_metrics)
            history.append(summary)
            score = val_metrics["Jaccard"] if val_metrics else -summary["loss"]
            if best_score is None or score > best_score:
                best_epoch, best_score, best_params = epoch, score, model.parameter_arrays()
            if log_file is not None:
                log_file.writelines(_json_line(e) + "\n" for e in entries)
                log_file.write(_json_line(summary) + "\n")
                log_file.flush()
            if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                write_checkpoint(out / f"epoch_{epoch}.ckpt", model, optimizer, *ckpt_args, {"epoch": epoch})
            if log is not None:
                log(summary)
    finally:
        if log_file is not None:
            log_file.close()
    model.load_arrays(best_params)
    if out is not None:
        write_checkpoint(out / "best.ckpt", model, None, *ckpt_args, {"epoch": best_epoch, "selection": "val Jaccard"})
    return FitResult(model, history, best_epoch, history[best_epoch - 1]["val"], optimizer)


def check_disjoint(*cohorts):
    seen = set()
    for c in cohorts:
        if c is None:
            continue
        ids = {p.patient_id for p in c.patients}
        if seen & ids:
            raise ConfigError(f"splits share patients: {sorted(seen & ids)[:3]}")
        seen |= ids
