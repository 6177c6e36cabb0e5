import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from safedrug.data import SyntheticSpec, generate_cohort, split

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def default_cohort():
    return generate_cohort(seed=0)


@pytest.fixture(scope="session")
def default_splits(default_cohort):
    return split(default_cohort, seed=0)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SyntheticSpec(n_patients=24, n_drugs=8, n_clusters=3, drugs_per_cluster=3), seed=3)


@pytest.fixture(scope="session")
def small_splits(small_cohort):
    return split(small_cohort, seed=0)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


TOY_SMILES = ("CCO", "c1ccccc1O", "CC(=O)N", "C1CCNCC1", "OC(=O)c1ccccc1")


def toy_model(seed=0, dim=8, n_diag=6, n_proc=4, n_subs=7, use_mask=True, dropout=0.5):
    """Small model on five real molecules with a random mask (every column non-empty)."""
    from safedrug.chem import parse_smiles
    from safedrug.model import ModelConfig, SafeDrugModel, atom_vocabulary

    rng = np.random.default_rng(seed)
    molecules = [parse_smiles(s) for s in TOY_SMILES]
    mask = (rng.random((n_subs, len(molecules))) < 0.4).astype(np.int8)
    mask[rng.integers(0, n_subs, size=len(molecules)), np.arange(len(molecules))] = 1
    cfg = ModelConfig(n_diag, n_proc, len(molecules), n_subs, atom_vocabulary(molecules), dim=dim, dropout=dropout, use_mask=use_mask)
    return SafeDrugModel.build(cfg, mask, molecules, rng, drug_ids=[f"d{j}" for j in range(len(molecules))])


def toy_patient(rng, n_visits=2, n_diag=6, n_proc=4, n_drugs=5):
    from safedrug.data import PatientRecord, Visit

    visits = []
    for _ in range(n_visits):
        visits.append(
            Visit.of(
                rng.choice(n_diag, size=2, replace=False),
                rng.choice(n_proc, size=2, replace=False),
                rng.choice(n_drugs, size=2, replace=False),
            )
        )
    return PatientRecord("toy", tuple(visits))


_CELLS = {}


def sweep_cell(splits, gamma, seed, epochs=30):
    """Test metrics and wall time of one default-config run, cached for the session."""
    import time

    from safedrug.train import TrainConfig, evaluate_model, fit

    key = (id(splits[0]), float(gamma), int(seed), int(epochs))
    if key not in _CELLS:
        train, val, test = splits
        started = time.perf_counter()
        cfg = TrainConfig(epochs=epochs, gamma=float(gamma), seed=int(seed), record_wall_time=False)
        result = fit(train, val, cfg)
        _CELLS[key] = (evaluate_model(result.model, test), time.perf_counter() - started)
    return _CELLS[key]
