"""Substructure-to-drug bipartite mask and the drug vocabulary file."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from safedrug.chem.fragment import DEFAULT_RULES, fragment
from safedrug.chem.smiles import parse_smiles
from safedrug.errors import DrugParseError, ParseError, SmilesSyntaxError, UnsupportedFeature


@dataclass(frozen=True)
class DrugEntry:
    """One vocabulary row. ``smiles`` may hold several molecules for one drug code."""

    drug_id: str
    smiles: tuple = ()
    fragment_keys: tuple = ()


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    entries: np.ndarray  # |S| x |M|, 0/1
    substructures: tuple  # row -> canonical key
    drugs: tuple  # column -> drug id

    @property
    def substructure_index(self):
        return {k: i for i, k in enumerate(self.substructures)}

    @property
    def drug_index(self):
        return {d: j for j, d in enumerate(self.drugs)}

    @property
    def shape(self):
        return self.entries.shape

    @property
    def nnz(self):
        return int(self.entries.sum())

    def __eq__(self, other):
        return (
            isinstance(other, MaskMatrix)
            and self.substructures == other.substructures
            and self.drugs == other.drugs
            and np.array_equal(self.entries, other.entries)
        )

    def to_json(self):
        cols = [np.flatnonzero(self.entries[:, j]).tolist() for j in range(self.entries.shape[1])]
        body = {"substructures": list(self.substructures), "drugs": list(self.drugs), "entries": cols}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        body = json.loads(text)
        subs, drugs = tuple(body["substructures"]), tuple(body["drugs"])
        entries = np.zeros((len(subs), len(drugs)), dtype=np.int8)
        for j, rows in enumerate(body["entries"]):
            entries[rows, j] = 1
        return cls(entries, subs, drugs)


def drug_fragment_keys(entry, rules=DEFAULT_RULES):
    """Fragment keys for one drug: the supplied keys, else the union over its molecules."""
    if entry.fragment_keys:
        return sorted(set(entry.fragment_keys))
    keys = set()
    for smi in entry.smiles:
        try:
            mol = parse_smiles(smi)
        except (SmilesSyntaxError, UnsupportedFeature) as exc:
            raise DrugParseError(entry.drug_id, exc) from exc
        keys.update(f.canonical_key for f in fragment(mol, rules))
    return sorted(keys)


def build_mask(drugs, rules=DEFAULT_RULES):
    """Build H from ``(drug_id, smiles-or-keys)`` pairs or :class:`DrugEntry` items.

    The second element of a pair may be a SMILES string, a list of SMILES, or
    a mapping ``{"fragments": [...]}`` of externally computed keys.
    """
    entries = [_as_entry(d) for d in drugs]
    ids = [e.drug_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("drug ids must be unique")
    per_drug = [drug_fragment_keys(e, rules) for e in entries]
    for e, keys in zip(entries, per_drug):
        if not keys:
            raise DrugParseError(e.drug_id, "no fragments")
    vocab = sorted(set().union(*per_drug)) if per_drug else []
    row = {k: i for i, k in enumerate(vocab)}
    h = np.zeros((len(vocab), len(entries)), dtype=np.int8)
    for j, keys in enumerate(per_drug):
        h[[row[k] for k in keys], j] = 1
    return MaskMatrix(h, tuple(vocab), tuple(ids))


def _as_entry(item):
    if isinstance(item, DrugEntry):
        return item
    drug_id, payload = item
    if isinstance(payload, str):
        return DrugEntry(str(drug_id), (payload,))
    if isinstance(payload, dict):
        return DrugEntry(str(drug_id), tuple(payload.get("smiles", ())), tuple(payload.get("fragments", ())))
    return DrugEntry(str(drug_id), tuple(payload))


def read_drug_vocabulary(path):
    """Parse ``drug_id<TAB>smiles[<TAB>key;key;...]`` lines; ``#`` starts a comment.

    Several molecules of one drug code may be joined in the SMILES column with
    ``|``; their fragments are merged by union.
    """
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3) or not parts[0]:
            raise ParseError("expected drug_id<TAB>smiles[<TAB>keys]", line=lineno)
        smiles = tuple(s for s in parts[1].split("|") if s)
        keys = tuple(k for k in parts[2].split(";") if k) if len(parts) == 3 else ()
        if not smiles and not keys:
            raise ParseError(f"drug {parts[0]!r} has neither SMILES nor fragment keys", line=lineno)
        entries.append(DrugEntry(parts[0], smiles, keys))
    return entries


def write_drug_vocabulary(path, entries):
    lines = ["# drug_id\tsmiles\tfragment_keys"]
    for e in entries:
        row = f"{e.drug_id}\t{'|'.join(e.smiles)}"
        if e.fragment_keys:
            row += "\t" + ";".join(e.fragment_keys)
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
