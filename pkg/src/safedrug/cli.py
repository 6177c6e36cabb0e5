"""``safedrug`` command-line tool.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Configuration files are TOML with optional ``[data]``, ``[split]``,
``[train]``, ``[eval]`` and ``[analysis]`` tables; flags override file values.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from safedrug import __version__
from safedrug.analysis import (
    count_inversions,
    error_analysis_for_model,
    gamma_sweep,
    mask_ablation,
    model_cosines,
    rows_to_csv,
    to_json,
)
from safedrug.chem import write_drug_vocabulary
from safedrug.data import (
    SyntheticSpec,
    Visit,
    cohort_statistics,
    format_statistics,
    generate_cohort,
    load_cohort,
    save_cohort,
    save_ddi_edges,
    split,
)
from safedrug.errors import ConfigError, RatioError, SafeDrugError, SpecError
from safedrug.metrics import METRIC_NAMES, bootstrap_eval
from safedrug.train import TrainConfig, check_vocabulary, fit, infer, restore

COHORT_FILE = "cohort.jsonl"

DEFAULTS = {
    "data": {**SyntheticSpec().to_dict(), "seed": 0},
    "split": {"seed": 0, "ratios": [2 / 3, 1 / 6, 1 / 6]},
    "train": TrainConfig().to_dict(),
    "eval": {"rounds": 10, "fraction": 0.8, "seed": 0},
    "analysis": {
        "gammas": [0.0, 0.02, 0.04, 0.06, 0.08],
        "seeds": [0],
        "ddi_thresholds": [0.0, 0.05, 0.1, 0.15, 0.2],
        "med_thresholds": [0, 2, 4, 6, 8, 10],
    },
}

USAGE_ERRORS = (ConfigError, SpecError, RatioError, tomllib.TOMLDecodeError)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def merge(base, overrides):
    """Two-level merge; unknown tables or keys are configuration errors."""
    out = copy.deepcopy(base)
    for section, values in overrides.items():
        if section not in out:
            raise ConfigError(f"unknown config table [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            out[section][key] = value
    return out


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    with p.open("rb") as fh:
        return tomllib.load(fh)


def resolve(args, flag_map):
    """Defaults <- config file <- flags. ``flag_map`` maps arg names to (table, key)."""
    config = merge(DEFAULTS, load_config(getattr(args, "config", None)))
    flags = {}
    for arg, (section, key) in flag_map.items():
        value = getattr(args, arg, None)
        if value is not None:
            flags.setdefault(section, {})[key] = value
    config = merge(config, flags)
    validate(config)
    return config


def validate(config):
    spec = {k: v for k, v in config["data"].items() if k != "seed"}
    SyntheticSpec(**spec)
    TrainConfig.from_dict(config["train"])
    ratios = config["split"]["ratios"]
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise RatioError(f"split ratios must be three numbers summing to 1, got {ratios}")
    ev = config["eval"]
    if int(ev["rounds"]) < 1 or not 0.0 < float(ev["fraction"]) <= 1.0:
        raise ConfigError("eval needs rounds >= 1 and 0 < fraction <= 1")


def envelope(config, **body):
    return {"tool_version": __version__, "config": config, **body}


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def csv_with_header(rows, config):
    comment = "# " + json.dumps({"tool_version": __version__, "config": config}, sort_keys=True) + "\n"
    return comment + rows_to_csv(rows)


def number_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def data_cohort(data_dir):
    d = Path(data_dir)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    f = d / COHORT_FILE
    if not f.is_file():
        raise UsageError(f"no {COHORT_FILE} in {d}")
    return load_cohort(f)


def splits_for(cohort, config):
    return split(cohort, tuple(config["split"]["ratios"]), config["split"]["seed"])


def checkpoint_path(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return p


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    spec_cfg = load_config(args.spec).get("data", {}) if args.spec else {}
    config = merge(DEFAULTS, {"data": spec_cfg})
    flags = {"n_patients": args.patients, "n_drugs": args.drugs, "seed": args.seed}
    config = merge(config, {"data": {k: v for k, v in flags.items() if v is not None}})
    data = dict(config["data"])
    seed = data.pop("seed")
    cohort = generate_cohort(SyntheticSpec(**data), seed=seed)
    cohort.meta["tool_version"] = __version__
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cohort(cohort, out / COHORT_FILE)
    ids = [d.drug_id for d in cohort.drugs]
    save_ddi_edges(out / "ddi_edges.tsv", cohort.ddi, ids)
    write_drug_vocabulary(out / "drugs.tsv", cohort.drugs)
    stats = cohort_statistics(cohort)
    write_text(out / "stats.json", to_json(envelope({"data": config["data"]}, statistics=stats)))
    print(format_statistics(stats))
    return 0


def cmd_train(args):
    config = resolve(
        args,
        {"gamma": ("train", "gamma"), "alpha": ("train", "alpha"), "kp": ("train", "kp"),
         "epochs": ("train", "epochs"), "seed": ("train", "seed"), "lr": ("train", "lr")},
    )
    cohort = data_cohort(args.data)
    train, val, _ = splits_for(cohort, config)
    cfg = TrainConfig.from_dict(config["train"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.json", to_json(envelope(config)))

    def report(entry):
        val = entry["val"] or {}
        print(f"epoch {entry['epoch']:3d}  loss {entry['loss']:.4f}  val Jaccard {val.get('Jaccard', float('nan')):.4f}  val DDI {val.get('DDI', float('nan')):.4f}")

    result = fit(train, val, cfg, out_dir=out, log=report, run=config)
    print(f"best epoch {result.best_epoch}: {out / 'best.ckpt'}")
    return 0


def cmd_evaluate(args):
    model, cfg, ckpt = restore(checkpoint_path(args.ckpt))
    config = merge(DEFAULTS, ckpt["config"].get("run") or {})
    flags = {"rounds": args.rounds, "fraction": args.fraction, "seed": args.seed}
    config = merge(config, {"eval": {k: v for k, v in flags.items() if v is not None}})
    validate(config)
    cohort = data_cohort(args.data)
    check_vocabulary(model, cohort)
    _, val, test = splits_for(cohort, config)
    subset = {"test": test, "val": val, "all": cohort}[args.split]
    ev = config["eval"]
    result = bootstrap_eval(infer(model, subset.patients), cohort.ddi, int(ev["rounds"]), float(ev["fraction"]), seed=int(ev["seed"]))
    notes = [] if int(ev["rounds"]) > 1 else ["std omitted: a single bootstrap round has no spread"]
    report = envelope(config, checkpoint=str(args.ckpt), split=args.split, metrics=result, notes=notes)
    text = to_json(report)
    if args.out:
        write_text(args.out, text)
    for name in METRIC_NAMES:
        m = result[name]
        spread = f" ± {m['std']:.4f}" if m["std"] is not None else " (std omitted, 1 round)"
        print(f"{name:<16} {m['mean']:.4f}{spread}")
    return 0


def read_patient(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"patient file not found: {p}")
    body = json.loads(p.read_text(encoding="utf-8"))
    visits = body.get("visits") if isinstance(body, dict) else None
    if not visits:
        raise ConfigError("patient file needs a non-empty 'visits' list")
    out = []
    for v in visits:
        diag = v.get("d", v.get("diagnoses", []))
        proc = v.get("p", v.get("procedures", []))
        out.append(Visit.of(diag, proc, v.get("m", v.get("medications", []))))
    return body.get("id", p.stem), out


def cmd_recommend(args):
    model, cfg, ckpt = restore(checkpoint_path(args.ckpt))
    patient_id, visits = read_patient(args.patient)
    for v in visits:
        if any(not 0 <= c < model.cfg.n_diagnoses for c in v.diagnoses) or any(
            not 0 <= c < model.cfg.n_procedures for c in v.procedures
        ):
            raise ConfigError("patient codes fall outside the checkpoint's vocabulary")
    traces = model.forward_patient(visits, training=False)
    blocks = []
    for k, t in enumerate(traces):
        chosen = np.flatnonzero(t.m_hat)
        blocks.append(
            {
                "visit": k,
                "drugs": [model.drug_ids[j] for j in chosen],
                "scores": {model.drug_ids[j]: float(t.o_hat.data[j]) for j in range(model.cfg.n_drugs)},
            }
        )
    print(json.dumps(envelope(ckpt["config"].get("run") or {}, patient=patient_id, visits=blocks), sort_keys=True, indent=2))
    return 0


def cmd_sweep_gamma(args):
    config = resolve(args, {"gammas": ("analysis", "gammas"), "seeds": ("analysis", "seeds"), "epochs": ("train", "epochs")})
    cohort = data_cohort(args.data)
    cfg = TrainConfig.from_dict(config["train"])
    result = gamma_sweep(cohort, config["analysis"]["gammas"], cfg, config["analysis"]["seeds"], splits=splits_for(cohort, config))
    out = Path(args.out)
    write_text(out / "sweep.csv", csv_with_header(result.rows, config))
    write_text(out / "sweep_cells.csv", csv_with_header(result.cells, config))
    ddi = [r["ddi"] for r in result.rows]
    write_text(out / "sweep.json", to_json(envelope(config, result=result.to_dict(), ddi_inversions=count_inversions(ddi))))
    for r in result.rows:
        print(f"gamma {r['gamma']:.3f}  DDI {r['ddi']:.4f}  Jaccard {r['jaccard']:.4f}  #drugs {r['n_med']:.2f}")
    return 0


def cmd_analyze_mask(args):
    out = Path(args.out)
    if args.ckpt:
        model, cfg, ckpt = restore(checkpoint_path(args.ckpt))
        run = ckpt["config"].get("run") or {}
        test = None
        if args.data:
            cohort = data_cohort(args.data)
            check_vocabulary(model, cohort)
            test = splits_for(cohort, merge(DEFAULTS, run))[2]
        summary = model_cosines(model, ckpt["ddi"], test)
        label = "masked" if model.cfg.use_mask else "unmasked"
        rows = [{"variant": label, **summary.__dict__}]
        body = envelope(run, checkpoint=str(args.ckpt), results=rows)
    else:
        if not args.data:
            raise UsageError("analyze-mask needs --ckpt or --data")
        config = resolve(args, {"seeds": ("analysis", "seeds"), "epochs": ("train", "epochs")})
        cohort = data_cohort(args.data)
        cfg = TrainConfig.from_dict(config["train"])
        results = mask_ablation(cohort, cfg, config["analysis"]["seeds"], splits=splits_for(cohort, config))
        rows = []
        for seed, r in zip(config["analysis"]["seeds"], results):
            rows.append({"variant": "masked", "seed": seed, **r.masked.__dict__})
            rows.append({"variant": "unmasked", "seed": seed, **r.unmasked.__dict__})
        body = envelope(config, results=rows)
        run = config
    write_text(out / "mask_cosines.csv", csv_with_header(rows, run))
    write_text(out / "mask_cosines.json", to_json(body))
    for r in rows:
        inter = "absent" if r["cos_interacted"] is None else f"{r['cos_interacted']:.4f}"
        print(f"{r['variant']:<9} Cos_interacted {inter}  Cos_all {r['cos_all']:.4f}")
    return 0


def cmd_error_analysis(args):
    model, cfg, ckpt = restore(checkpoint_path(args.ckpt))
    config = merge(DEFAULTS, ckpt["config"].get("run") or {})
    flags = {"ddi_thresholds": args.ddi_thresholds, "med_thresholds": args.med_thresholds}
    config = merge(config, {"analysis": {k: v for k, v in flags.items() if v is not None}})
    cohort = data_cohort(args.data)
    check_vocabulary(model, cohort)
    test = splits_for(cohort, config)[2]
    rows = error_analysis_for_model(model, test, config["analysis"]["ddi_thresholds"], config["analysis"]["med_thresholds"])
    out = Path(args.out)
    write_text(out / "error_analysis.csv", csv_with_header(rows, config))
    write_text(out / "error_analysis.json", to_json(envelope(config, checkpoint=str(args.ckpt), rows=[r.flat() for r in rows])))
    for r in rows:
        tail = "empty" if r.empty else f"Jaccard {r.metrics['Jaccard']:.4f}  DDI {r.metrics['DDI']:.4f}"
        print(f"{r.scenario:<4} >= {r.threshold:<6g} patients {r.n_patients:4d}  visits {r.n_visits:5d}  {tail}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="safedrug", description="DDI-controllable medication recommendation.")
    parser.add_argument("--version", action="version", version=f"safedrug {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int)
    p.add_argument("--drugs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--spec", help="TOML file with a [data] table")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--kp", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="bootstrap evaluation of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rounds", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("test", "val", "all"), default="test")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="per-visit recommendations for one patient")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--patient", required=True, help='JSON file {"visits": [{"d": [...], "p": [...]}, ...]}')
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("sweep-gamma", help="train one model per acceptance DDI rate")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--gammas", type=number_list)
    p.add_argument("--seeds", type=int_list)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_sweep_gamma)

    p = sub.add_parser("analyze-mask", help="column cosines of the local weight matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="analyse one checkpoint")
    p.add_argument("--data", help="cohort directory (trains masked and dense variants without --ckpt)")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int_list)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_analyze_mask)

    p = sub.add_parser("error-analysis", help="metrics on hard test subsets")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ddi-thresholds", type=number_list)
    p.add_argument("--med-thresholds", type=number_list)
    p.set_defaults(func=cmd_error_analysis)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"safedrug {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SafeDrugError, OSError, ValueError) as exc:
        print(f"safedrug {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
