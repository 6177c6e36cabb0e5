"""Bundled corpus of 50 real drug SMILES with reference atom/bond counts."""

from dataclasses import dataclass
from importlib import resources


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    smiles: str
    heavy_atoms: int
    bonds: int
    aromatic_bonds: int
    ring_bonds: int


def load_corpus():
    text = resources.files("safedrug.chem").joinpath("data/corpus.tsv").read_text(encoding="utf-8")
    out = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        name, smiles, *counts = line.split("\t")
        out.append(CorpusEntry(name, smiles, *map(int, counts)))
    return out
