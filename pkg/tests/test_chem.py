import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safedrug.chem import (
    AROMATIC,
    DOUBLE,
    SINGLE,
    TRIPLE,
    DrugEntry,
    FragmentationRuleSet,
    MaskMatrix,
    build_mask,
    canonical_key,
    fragment,
    load_corpus,
    parse_smiles,
    read_drug_vocabulary,
    write_drug_vocabulary,
)
from safedrug.errors import DrugParseError, ParseError, SmilesSyntaxError, UnsupportedFeature

CORPUS = load_corpus()


def bond_orders(mol):
    return collections.Counter(b.order for b in mol.bonds)


def key_multiset(smiles):
    return collections.Counter(f.canonical_key for f in fragment(parse_smiles(smiles)))


class TestParser:
    def test_ethanol(self):
        mol = parse_smiles("CCO")
        assert [a.element for a in mol.atoms] == ["C", "C", "O"]
        assert bond_orders(mol) == {SINGLE: 2}

    def test_benzene(self):
        mol = parse_smiles("c1ccccc1")
        assert mol.n_atoms == 6 and all(a.aromatic and a.element == "C" for a in mol.atoms)
        assert bond_orders(mol) == {AROMATIC: 6}
        assert all(b.in_ring for b in mol.bonds)

    def test_carboxyl(self):
        mol = parse_smiles("C(=O)O")
        assert mol.n_atoms == 3
        assert bond_orders(mol) == {DOUBLE: 1, SINGLE: 1}
        double = next(b for b in mol.bonds if b.order == DOUBLE)
        assert {mol.atoms[double.begin].element, mol.atoms[double.end].element} == {"C", "O"}

    def test_triple_and_explicit_single(self):
        assert bond_orders(parse_smiles("C#N")) == {TRIPLE: 1}
        assert bond_orders(parse_smiles("C-C")) == {SINGLE: 1}

    def test_bracket_atoms(self):
        mol = parse_smiles("[NH4+].[O-]C(=O)[13CH3]")
        assert mol.atoms[0].element == "N" and mol.atoms[0].charge == 1
        assert mol.atoms[1].charge == -1
        assert mol.n_atoms == 5

    def test_two_letter_elements(self):
        assert [a.element for a in parse_smiles("ClCBr").atoms] == ["Cl", "C", "Br"]

    def test_percent_ring_closure(self):
        mol = parse_smiles("C%12CCCCC%12")
        assert mol.n_atoms == 6 and len(mol.bonds) == 6 and all(b.in_ring for b in mol.bonds)

    def test_ring_closure_bond_order(self):
        mol = parse_smiles("C=1CCCCC1")
        assert bond_orders(mol) == {DOUBLE: 1, SINGLE: 5}

    def test_implicit_hydrogens_not_materialized(self):
        assert parse_smiles("C").n_atoms == 1
        assert all(a.element != "H" for a in parse_smiles("[CH4]").atoms)

    def test_stereo_markers_pass_through_with_flag(self):
        plain = parse_smiles("CC=CC")
        marked = parse_smiles("C/C=C\\C")
        chiral = parse_smiles("N[C@@H](C)C(=O)O")
        assert marked.stereo_ignored and chiral.stereo_ignored and not plain.stereo_ignored
        assert marked == plain

    def test_dot_yields_components(self):
        mol = parse_smiles("CC.O")
        assert len(mol.components()) == 2

    def test_single_component_is_connected(self):
        for entry in CORPUS:
            if "." not in entry.smiles:
                assert len(parse_smiles(entry.smiles).components()) == 1, entry.name

    def test_deterministic(self):
        for entry in CORPUS:
            assert parse_smiles(entry.smiles) == parse_smiles(entry.smiles)

    def test_adjacency_symmetric_zero_diagonal(self):
        for entry in CORPUS:
            mol = parse_smiles(entry.smiles)
            a = mol.adjacency
            assert np.array_equal(a, a.T) and not np.any(np.diag(a))
            assert int(a.sum()) == 2 * len(mol.bonds)
            for b in mol.bonds:
                assert a[b.begin, b.end] == 1 and b.begin != b.end

    def test_no_duplicate_bonds(self):
        for entry in CORPUS:
            pairs = [frozenset(b.pair) for b in parse_smiles(entry.smiles).bonds]
            assert len(pairs) == len(set(pairs))

    def test_atom_indices_dense(self):
        mol = parse_smiles("CC(C)(C)c1ccncc1")
        assert [a.index for a in mol.atoms] == list(range(mol.n_atoms))


class TestParserErrors:
    @pytest.mark.parametrize(
        "smiles, position",
        [
            ("CC(C", 2),  # unclosed branch opened at offset 2
            ("CC)C", 2),
            ("C1CC", 1),  # ring bond 1 never closed
            ("CXC", 1),
            ("C[Xx]C", 2),  # points at the element inside the bracket
            ("C==C", 2),
            ("", 0),
        ],
    )
    def test_positioned_errors(self, smiles, position):
        with pytest.raises(SmilesSyntaxError) as info:
            parse_smiles(smiles)
        assert info.value.position == position
        assert f"offset {position}" in str(info.value)

    def test_unsupported_wildcard(self):
        with pytest.raises(UnsupportedFeature):
            parse_smiles("C*C")

    def test_error_is_value_error(self):
        with pytest.raises(ValueError):
            parse_smiles("C(")


class TestCorpus:
    def test_fifty_entries(self):
        assert len(CORPUS) == 50
        assert len({e.name for e in CORPUS}) == 50

    @pytest.mark.parametrize("entry", CORPUS, ids=[e.name for e in CORPUS])
    def test_counts_match_manifest(self, entry):
        mol = parse_smiles(entry.smiles)
        assert mol.n_atoms == entry.heavy_atoms
        assert len(mol.bonds) == entry.bonds
        assert sum(b.order == AROMATIC for b in mol.bonds) == entry.aromatic_bonds
        assert sum(b.in_ring for b in mol.bonds) == entry.ring_bonds


class TestFragment:
    def test_benzene_is_one_fragment(self):
        frags = fragment(parse_smiles("c1ccccc1"))
        assert len(frags) == 1 and frags[0].atom_count == 6

    def test_ethanol_cuts_heteroatom_bond(self):
        frags = fragment(parse_smiles("CCO"))
        assert sorted((f.atom_count, f.canonical_key) for f in frags) == [(1, "O"), (2, "C-C")]

    def test_toluene_cuts_ring_chain_bond(self):
        frags = sorted(fragment(parse_smiles("Cc1ccccc1")), key=lambda f: f.atom_count)
        assert [f.atom_count for f in frags] == [1, 6]

    def test_hand_enumerated_rule_predicate(self):
        # bonds of CC(=O)NC: C-C no rule, C=O not single, C-N heteroatom, N-C heteroatom
        mol = parse_smiles("CC(=O)NC")
        assert sorted(f.atom_count for f in fragment(mol)) == [1, 1, 3]

    def test_no_cuttable_bond_returns_whole_molecule(self):
        mol = parse_smiles("CCCC")
        frags = fragment(mol)
        assert len(frags) == 1 and frags[0].canonical_key == canonical_key(mol)

    def test_rule_subsets(self):
        mol = parse_smiles("Cc1ccccc1O")
        ring_only = FragmentationRuleSet(rules=("ring_chain",))
        hetero_only = FragmentationRuleSet(rules=("heteroatom",))
        assert len(fragment(mol, ring_only)) == 3
        assert len(fragment(mol, hetero_only)) == 2
        assert len(fragment(mol, FragmentationRuleSet(rules=()))) == 1

    def test_ring_bonds_never_cut(self):
        for entry in CORPUS:
            mol = parse_smiles(entry.smiles)
            frags = fragment(mol)
            kept = {frozenset(b.pair) for b in mol.bonds if b.in_ring}
            owner = {}
            for k, f in enumerate(frags):
                for i in f.atom_indices:
                    owner[i] = k
            assert all(owner[min(p)] == owner[max(p)] for p in kept)

    @pytest.mark.parametrize("entry", CORPUS, ids=[e.name for e in CORPUS])
    def test_fragment_atoms_partition_molecule(self, entry):
        mol = parse_smiles(entry.smiles)
        frags = fragment(mol)
        seen = sorted(i for f in frags for i in f.atom_indices)
        assert seen == list(range(mol.n_atoms))
        assert sum(f.atom_count for f in frags) == mol.n_atoms

    @pytest.mark.parametrize(
        "a, b",
        [("CCO", "OCC"), ("CCO", "C(O)C"), ("c1ccccc1C", "Cc1ccccc1"), ("CC(=O)O", "OC(C)=O"), ("NC(C)C(=O)O", "CC(N)C(O)=O")],
    )
    def test_equivalent_smiles_same_key_multiset(self, a, b):
        assert key_multiset(a) == key_multiset(b)

    @settings(max_examples=100)
    @given(data=st.data())
    def test_keys_invariant_under_atom_relabelling(self, data):
        entry = data.draw(st.sampled_from(CORPUS))
        mol = parse_smiles(entry.smiles)
        perm = data.draw(st.permutations(range(mol.n_atoms)))
        moved = mol.permuted(list(perm))
        assert canonical_key(moved) == canonical_key(mol)
        before = collections.Counter(f.canonical_key for f in fragment(mol))
        after = collections.Counter(f.canonical_key for f in fragment(moved))
        assert before == after

    def test_different_molecules_different_keys(self):
        assert canonical_key(parse_smiles("CCO")) != canonical_key(parse_smiles("COC"))
        assert canonical_key(parse_smiles("C=CC")) != canonical_key(parse_smiles("CCC"))


class TestMask:
    def test_disjoint_fragments_give_identity(self):
        mask = build_mask([("a", {"fragments": ["x"]}), ("b", {"fragments": ["y"]})])
        np.testing.assert_array_equal(mask.entries, [[1, 0], [0, 1]])
        assert mask.substructure_index == {"x": 0, "y": 1}
        assert mask.drug_index == {"a": 0, "b": 1}

    def test_identical_smiles_identical_columns(self):
        mask = build_mask([("a", "CC(=O)Oc1ccccc1C(=O)O"), ("b", "CC(=O)Oc1ccccc1C(=O)O")])
        np.testing.assert_array_equal(mask.entries[:, 0], mask.entries[:, 1])

    def test_rows_sorted_and_columns_nonempty(self):
        mask = build_mask([(e.name, e.smiles) for e in CORPUS])
        assert list(mask.substructures) == sorted(mask.substructures)
        assert np.all(mask.entries.sum(axis=0) >= 1)
        assert set(np.unique(mask.entries)) <= {0, 1}

    def test_entry_matches_fragmentation(self):
        mask = build_mask([(e.name, e.smiles) for e in CORPUS[:10]])
        row = mask.substructure_index
        for j, e in enumerate(CORPUS[:10]):
            keys = {f.canonical_key for f in fragment(parse_smiles(e.smiles))}
            assert {k for k, i in row.items() if mask.entries[i, j]} == keys

    def test_multi_molecule_drug_takes_union(self):
        mask = build_mask([DrugEntry("combo", ("CCO", "c1ccccc1"))])
        assert set(mask.substructures) == {"C-C", "O", "c1:c:c:c:c:c:1"}

    def test_precomputed_keys_override(self):
        mask = build_mask([DrugEntry("d", ("CCO",), ("brics-7", "brics-2"))])
        assert mask.substructures == ("brics-2", "brics-7")

    def test_parse_error_names_drug(self):
        with pytest.raises(DrugParseError, match="bad_drug"):
            build_mask([("ok", "CCO"), ("bad_drug", "C1CC")])

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            build_mask([("a", "C"), ("a", "O")])

    def test_deterministic_bytes(self):
        drugs = [(e.name, e.smiles) for e in CORPUS]
        assert build_mask(drugs).to_json() == build_mask(list(drugs)).to_json()

    def test_json_round_trip(self):
        mask = build_mask([(e.name, e.smiles) for e in CORPUS[:12]])
        assert MaskMatrix.from_json(mask.to_json()) == mask


class TestVocabularyFile:
    def test_round_trip(self, tmp_path):
        entries = [DrugEntry("a", ("CCO",)), DrugEntry("b", ("CC", "O"), ("k1", "k2"))]
        path = tmp_path / "drugs.tsv"
        write_drug_vocabulary(path, entries)
        assert read_drug_vocabulary(path) == entries

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "drugs.tsv"
        path.write_text("# header\n\nx\tCCO\n", encoding="utf-8")
        assert read_drug_vocabulary(path) == [DrugEntry("x", ("CCO",))]

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "drugs.tsv"
        path.write_text("x\tCCO\nbroken line\n", encoding="utf-8")
        with pytest.raises(ParseError) as info:
            read_drug_vocabulary(path)
        assert info.value.line == 2
