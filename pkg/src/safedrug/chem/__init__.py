"""SMILES parsing, fragmentation and the substructure-to-drug mask."""

from safedrug.chem.corpus import CorpusEntry, load_corpus
from safedrug.chem.fragment import DEFAULT_RULES, FragmentationRuleSet, Substructure, canonical_key, fragment
from safedrug.chem.mask import (
    DrugEntry,
    MaskMatrix,
    build_mask,
    drug_fragment_keys,
    read_drug_vocabulary,
    write_drug_vocabulary,
)
from safedrug.chem.smiles import AROMATIC, DOUBLE, SINGLE, TRIPLE, Atom, Bond, MoleculeGraph, parse_smiles

__all__ = [
    "AROMATIC",
    "DEFAULT_RULES",
    "DOUBLE",
    "SINGLE",
    "TRIPLE",
    "Atom",
    "Bond",
    "CorpusEntry",
    "DrugEntry",
    "FragmentationRuleSet",
    "MaskMatrix",
    "MoleculeGraph",
    "Substructure",
    "build_mask",
    "canonical_key",
    "drug_fragment_keys",
    "fragment",
    "load_corpus",
    "parse_smiles",
    "read_drug_vocabulary",
    "write_drug_vocabulary",
]
