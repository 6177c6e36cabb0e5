"""EHR records, the synthetic cohort generator, splitting and file formats.

Cohort file (JSON Lines, UTF-8, LF): the first line is a header::

    {"format": "safedrug-cohort", "version": 1, "n_patients": N,
     "n_diagnoses": D, "n_procedures": P,
     "drugs": [{"id": ..., "smiles": [...], "fragments": [...]}, ...],
     "ddi_edges": [[i, j], ...], "meta": {...}}

followed by one patient per line::

    {"id": "P0000", "visits": [{"d": [...], "p": [...], "m": [...]}, ...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from safedrug.autodiff.rng import Streams
from safedrug.chem import DrugEntry, build_mask, drug_fragment_keys, load_corpus
from safedrug.errors import OutOfRangeId, ParseError, RatioError, SpecError, VersionError

COHORT_FORMAT = "safedrug-cohort"
COHORT_VERSION = 1


@dataclass(frozen=True)
class Visit:
    diagnoses: tuple
    procedures: tuple
    medications: tuple

    @classmethod
    def of(cls, diagnoses, procedures, medications):
        return cls(*(tuple(sorted({int(x) for x in xs})) for xs in (diagnoses, procedures, medications)))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple


@dataclass(eq=False)
class Cohort:
    patients: list
    n_diagnoses: int
    n_procedures: int
    drugs: list  # DrugEntry, column order
    ddi: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_drugs(self):
        return len(self.drugs)

    @property
    def n_visits(self):
        return sum(len(p.visits) for p in self.patients)

    def mask(self):
        return build_mask(self.drugs)

    def with_patients(self, patients):
        return Cohort(list(patients), self.n_diagnoses, self.n_procedures, self.drugs, self.ddi, dict(self.meta))

    def validate(self):
        for p in self.patients:
            if len(p.visits) < 2:
                raise SpecError(f"patient {p.patient_id} has fewer than 2 visits")
            for v in p.visits:
                for codes, bound, what in (
                    (v.diagnoses, self.n_diagnoses, "diagnosis"),
                    (v.procedures, self.n_procedures, "procedure"),
                    (v.medications, self.n_drugs, "medication"),
                ):
                    if len(set(codes)) != len(codes) or any(not 0 <= c < bound for c in codes):
                        raise SpecError(f"patient {p.patient_id}: invalid {what} codes {codes}")
        validate_ddi(self.ddi, self.n_drugs)

    def __eq__(self, other):
        return (
            isinstance(other, Cohort)
            and self.patients == other.patients
            and (self.n_diagnoses, self.n_procedures) == (other.n_diagnoses, other.n_procedures)
            and self.drugs == other.drugs
            and np.array_equal(self.ddi, other.ddi)
            and self.meta == other.meta
        )


def validate_ddi(ddi, n):
    if ddi.shape != (n, n) or not np.array_equal(ddi, ddi.T) or np.any(np.diag(ddi) != 0):
        raise SpecError("DDI matrix must be square, symmetric, with zero diagonal")
    if not np.isin(ddi, (0, 1)).all():
        raise SpecError("DDI matrix must be binary")


def ddi_edges(ddi):
    i, j = np.nonzero(np.triu(ddi, 1))
    return [[int(a), int(b)] for a, b in zip(i, j)]


def ddi_from_edges(edges, n):
    d = np.zeros((n, n), dtype=np.int8)
    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n):
            raise OutOfRangeId(f"DDI edge ({a}, {b}) outside 0..{n - 1}")
        if a != b:
            d[a, b] = d[b, a] = 1
    return d


# ---------------------------------------------------------------- generation


@dataclass
class SyntheticSpec:
    """Knobs of the synthetic cohort; defaults give the desk-scale benchmark cohort."""

    n_patients: int = 200
    n_drugs: int = 20
    n_diagnoses: int = 60
    n_procedures: int = 30
    n_clusters: int = 5
    drugs_per_cluster: int = 4
    diagnoses_per_cluster: int = 6
    procedures_per_cluster: int = 3
    second_condition_prob: float = 0.35
    noise: float = 0.1
    visit_geometric_p: float = 0.73
    max_visits: int = 29
    ddi_within_clusters: int = 2
    ddi_across_clusters: int = 6
    ddi_random: int = 2

    def __post_init__(self):
        if self.n_patients < 1:
            raise SpecError("n_patients must be >= 1")
        if self.n_drugs < 2:
            raise SpecError("n_drugs must be >= 2")
        if self.n_diagnoses < 1 or self.n_procedures < 1:
            raise SpecError("need at least one diagnosis and one procedure code")
        if self.n_clusters < 1 or self.drugs_per_cluster < 1:
            raise SpecError("need at least one cluster with at least one drug")
        if self.drugs_per_cluster > self.n_drugs:
            raise SpecError("drugs_per_cluster exceeds n_drugs")
        if not 0.0 <= self.noise <= 1.0 or not 0.0 <= self.second_condition_prob <= 1.0:
            raise SpecError("probabilities must lie in [0, 1]")
        if not 0.0 < self.visit_geometric_p <= 1.0 or self.max_visits < 2:
            raise SpecError("visit_geometric_p must lie in (0, 1] and max_visits >= 2")

    def to_dict(self):
        return asdict(self)


def synthetic_drugs(n_drugs):
    """First ``n_drugs`` corpus molecules; past the corpus end, methyl-prefixed copies."""
    corpus = load_corpus()
    out = []
    for k in range(n_drugs):
        base = corpus[k % len(corpus)]
        cycle = k // len(corpus)
        smiles = "C" * cycle + base.smiles
        name = base.name if cycle == 0 else f"{base.name}~{cycle}"
        out.append(DrugEntry(name, (smiles,)))
    return [DrugEntry(d.drug_id, d.smiles, tuple(drug_fragment_keys(d))) for d in out]


def _informative_keys(drugs):
    counts = {}
    for d in drugs:
        for k in d.fragment_keys:
            counts[k] = counts.get(k, 0) + 1
    common = max(2, len(drugs) // 2)
    return [frozenset(k for k in d.fragment_keys if counts[k] <= common and len(k) > 2) for d in drugs]


def _drug_clusters(drugs, spec, rng):
    """Greedy clusters of drugs sharing fragment keys (molecule-aware preferences)."""
    keys = _informative_keys(drugs)
    n = len(drugs)

    def sim(i, j):
        union = keys[i] | keys[j]
        return len(keys[i] & keys[j]) / len(union) if union else 0.0

    unused = list(rng.permutation(n))
    clusters = []
    for _ in range(spec.n_clusters):
        pool = unused if len(unused) >= spec.drugs_per_cluster else list(rng.permutation(n))
        seed = pool[0]
        rest = sorted(pool[1:], key=lambda j: (-sim(seed, j), j))
        members = sorted(int(x) for x in [seed, *rest[: spec.drugs_per_cluster - 1]])
        clusters.append(members)
        unused = [j for j in unused if j not in members]
    return clusters


def _plant_ddi(clusters, spec, n, rng):
    d = np.zeros((n, n), dtype=np.int8)

    def put(a, b):
        if a != b:
            d[a, b] = d[b, a] = 1

    within = [c for c in clusters if len(c) >= 2]
    for k in range(min(spec.ddi_within_clusters, len(within))):
        c = within[int(rng.integers(len(within)))] if k >= len(within) else within[k]
        a, b = rng.choice(c, size=2, replace=False)
        put(int(a), int(b))
    if len(clusters) >= 2:
        for _ in range(spec.ddi_across_clusters):
            ca, cb = rng.choice(len(clusters), size=2, replace=False)
            put(int(rng.choice(clusters[ca])), int(rng.choice(clusters[cb])))
    for _ in range(spec.ddi_random):
        a, b = rng.choice(n, size=2, replace=False)
        put(int(a), int(b))
    return d


def _pick(rng, pool, prob):
    chosen = [x for x in pool if rng.random() < prob]
    return chosen or [pool[int(rng.integers(len(pool)))]]


def generate_cohort(spec=None, seed=0):
    """Seeded synthetic cohort built from latent conditions.

    Each condition owns diagnosis, procedure and drug pools; a patient has one
    or two conditions, and every visit samples codes from the active pools
    with ``noise`` controlling omissions and off-pool codes. Visit counts are
    ``2 + Geometric`` truncated at ``max_visits``.
    """
    spec = spec or SyntheticSpec()
    streams = Streams(seed).child("data")
    drugs = synthetic_drugs(spec.n_drugs)
    structure = streams.get("structure")
    clusters = _drug_clusters(drugs, spec, structure)
    diag_pools = [sorted(structure.choice(spec.n_diagnoses, size=min(spec.diagnoses_per_cluster, spec.n_diagnoses), replace=False).tolist()) for _ in clusters]
    proc_pools = [sorted(structure.choice(spec.n_procedures, size=min(spec.procedures_per_cluster, spec.n_procedures), replace=False).tolist()) for _ in clusters]
    ddi = _plant_ddi(clusters, spec, spec.n_drugs, streams.get("ddi"))

    rng = streams.get("patients")
    keep = 1.0 - spec.noise
    patients = []
    for k in range(spec.n_patients):
        conditions = [int(rng.integers(len(clusters)))]
        if len(clusters) > 1 and rng.random() < spec.second_condition_prob:
            other = int(rng.integers(len(clusters) - 1))
            conditions.append(other if other < conditions[0] else other + 1)
        extra = rng.geometric(spec.visit_geometric_p) - 1
        n_visits = int(min(2 + extra, spec.max_visits))
        visits = []
        for _ in range(n_visits):
            active = [c for c in conditions if rng.random() < 0.9] or conditions[:1]
            diag, proc, med = set(), set(), set()
            for c in active:
                diag.update(_pick(rng, diag_pools[c], 0.7 if spec.noise > 0 else 1.0))
                proc.update(_pick(rng, proc_pools[c], 0.7 if spec.noise > 0 else 1.0))
                med.update(_pick(rng, clusters[c], keep))
            if spec.noise > 0:
                diag.update(np.flatnonzero(rng.random(spec.n_diagnoses) < spec.noise * 2 / spec.n_diagnoses).tolist())
                proc.update(np.flatnonzero(rng.random(spec.n_procedures) < spec.noise / spec.n_procedures).tolist())
                med.update(np.flatnonzero(rng.random(spec.n_drugs) < spec.noise * 2 / spec.n_drugs).tolist())
            visits.append(Visit.of(diag, proc, med))
        patients.append(PatientRecord(f"P{k:04d}", tuple(visits)))
    meta = {"generator": "synthetic", "seed": int(seed), "spec": spec.to_dict(), "clusters": clusters}
    cohort = Cohort(patients, spec.n_diagnoses, spec.n_procedures, drugs, ddi, meta)
    cohort.validate()
    return cohort


# ---------------------------------------------------------------- splitting


def split(cohort, ratios=(2 / 3, 1 / 6, 1 / 6), seed=0):
    """Seeded patient-level split into ``(train, val, test)`` cohorts."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise RatioError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(cohort.patients)
    order = Streams(seed).get("split").permutation(n)
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(cohort.with_patients([cohort.patients[i] for i in part]) for part in parts)


# ---------------------------------------------------------------- file formats


def _header(cohort):
    return {
        "format": COHORT_FORMAT,
        "version": COHORT_VERSION,
        "n_patients": len(cohort.patients),
        "n_diagnoses": cohort.n_diagnoses,
        "n_procedures": cohort.n_procedures,
        "drugs": [{"id": d.drug_id, "smiles": list(d.smiles), "fragments": list(d.fragment_keys)} for d in cohort.drugs],
        "ddi_edges": ddi_edges(cohort.ddi),
        "meta": cohort.meta,
    }


def _line(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps_cohort(cohort):
    lines = [_line(_header(cohort))]
    for p in cohort.patients:
        visits = [{"d": list(v.diagnoses), "p": list(v.procedures), "m": list(v.medications)} for v in p.visits]
        lines.append(_line({"id": p.patient_id, "visits": visits}))
    return "\n".join(lines) + "\n"


def save_cohort(cohort, path):
    Path(path).write_text(dumps_cohort(cohort), encoding="utf-8", newline="\n")


def loads_cohort(text):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty cohort file", line=1)
    rows = []
    for k, line in enumerate(lines, 1):
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", line=k) from None
    header = rows[0]
    if not isinstance(header, dict) or header.get("format") != COHORT_FORMAT:
        raise ParseError("missing safedrug-cohort header", line=1)
    if header.get("version") != COHORT_VERSION:
        raise VersionError(f"unsupported cohort version {header.get('version')!r}")
    try:
        drugs = [DrugEntry(d["id"], tuple(d["smiles"]), tuple(d["fragments"])) for d in header["drugs"]]
        n_drugs = len(drugs)
        ddi = ddi_from_edges(header["ddi_edges"], n_drugs)
        patients = []
        for k, row in enumerate(rows[1:], 2):
            try:
                visits = tuple(Visit.of(v["d"], v["p"], v["m"]) for v in row["visits"])
                patients.append(PatientRecord(row["id"], visits))
            except (KeyError, TypeError) as exc:
                raise ParseError(f"malformed patient record ({exc})", line=k) from None
        cohort = Cohort(patients, header["n_diagnoses"], header["n_procedures"], drugs, ddi, header.get("meta", {}))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed header ({exc})", line=1) from None
    if len(patients) != header["n_patients"]:
        raise ParseError(f"expected {header['n_patients']} patients, found {len(patients)} (truncated file?)", line=len(rows) + 1)
    return cohort


def load_cohort(path):
    return loads_cohort(Path(path).read_text(encoding="utf-8"))


def load_ddi_edges(path, n_drugs, ids=None):
    """Read ``a<TAB>b`` lines into a symmetric 0/1 matrix.

    Endpoints are column indices, or drug ids when ``ids`` (column order) is given.
    """
    lookup = {d: j for j, d in enumerate(ids)} if ids is not None else None
    edges = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError("expected drug_id_a<TAB>drug_id_b", line=lineno)
        pair = []
        for tok in parts:
            tok = tok.strip()
            if lookup is not None and tok in lookup:
                pair.append(lookup[tok])
                continue
            try:
                pair.append(int(tok))
            except ValueError:
                raise OutOfRangeId(f"line {lineno}: unknown drug id {tok!r}") from None
        edges.append(pair)
    return ddi_from_edges(edges, n_drugs)


def save_ddi_edges(path, ddi, ids=None):
    lines = ["# drug_id_a\tdrug_id_b"]
    for a, b in ddi_edges(ddi):
        lines.append(f"{ids[a]}\t{ids[b]}" if ids is not None else f"{a}\t{b}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cohort_statistics(cohort):
    """Table-style summary numbers of a cohort."""
    visits = [v for p in cohort.patients for v in p.visits]
    per_patient = [len(p.visits) for p in cohort.patients]

    def avg_max(values):
        return (float(np.mean(values)) if values else 0.0, int(max(values)) if values else 0)

    return {
        "total # of visits": len(visits),
        "total # of patients": len(cohort.patients),
        "diag. / prod. / med. space size": (cohort.n_diagnoses, cohort.n_procedures, cohort.n_drugs),
        "avg. / max # of visits": avg_max(per_patient),
        "avg. / max # of diagnoses per visit": avg_max([len(v.diagnoses) for v in visits]),
        "avg. / max # of procedures per visit": avg_max([len(v.procedures) for v in visits]),
        "avg. / max # of medicines per visit": avg_max([len(v.medications) for v in visits]),
        "total # of DDI pairs": len(ddi_edges(cohort.ddi)),
        "total # of substructures": len(cohort.mask().substructures),
    }


def format_statistics(stats):
    lines = []
    for name, value in stats.items():
        if isinstance(value, tuple) and len(value) == 2 and isinstance(value[0], float):
            text = f"{value[0]:.2f} / {value[1]}"
        elif isinstance(value, tuple):
            text = " / ".join(str(x) for x in value)
        else:
            text = str(value)
        lines.append(f"{name:<40} {text}")
    return "\n".join(lines)
