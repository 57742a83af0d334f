import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fragpretrain.chem import (
    BondOrder,
    MolecularGraph,
    find_bridges,
    load_corpus,
    parse_smiles,
    read_corpus,
)
from fragpretrain.corpus import KNOWN_DRUGS, synthetic_smiles
from fragpretrain.errors import (
    EmptyInput,
    SmilesError,
    UnbalancedParenthesis,
    UnknownElement,
    UnmatchedRingClosure,
    UnsupportedFeature,
)

from oracles import bridges_by_removal

ATOM_TOKEN = re.compile(r"\[[^\]]+\]|Cl|Br|[BCNOPSFI]|[bcnops]")


def count_atom_tokens(smiles: str) -> int:
    return len(ATOM_TOKEN.findall(smiles))


class TestParseBasics:
    def test_single_atom(self):
        mol = parse_smiles("C")
        assert mol.num_atoms == 1 and mol.bonds == ()

    def test_linear_chain(self):
        mol = parse_smiles("CCO")
        assert [a.label for a in mol.atoms] == ["C", "C", "O"]
        assert [(b.begin, b.end, b.order) for b in mol.bonds] == [
            (0, 1, BondOrder.SINGLE), (1, 2, BondOrder.SINGLE)]
        assert not any(b.in_ring for b in mol.bonds)

    def test_benzene_is_aromatic_ring(self):
        mol = parse_smiles("c1ccccc1")
        assert mol.num_atoms == 6 and len(mol.bonds) == 6
        assert all(a.aromatic for a in mol.atoms)
        assert all(b.order == BondOrder.AROMATIC and b.in_ring for b in mol.bonds)

    def test_branches_and_bond_orders(self):
        mol = parse_smiles("CC(=O)C#N")
        assert mol.bond_between(1, 2).order == BondOrder.DOUBLE
        assert mol.bond_between(3, 4).order == BondOrder.TRIPLE
        assert sorted(mol.adjacency[1]) == [0, 2, 3]

    def test_two_letter_halogens(self):
        mol = parse_smiles("ClCBr")
        assert [a.symbol for a in mol.atoms] == ["Cl", "C", "Br"]

    def test_bracket_atoms(self):
        mol = parse_smiles("C[N+](=O)[O-]")
        assert mol.atoms[1].formal_charge == 1 and mol.atoms[1].label == "[N+]"
        assert mol.atoms[3].formal_charge == -1 and mol.atoms[3].label == "[O-]"
        assert parse_smiles("[Fe+2]").atoms[0].formal_charge == 2
        assert parse_smiles("[Fe++]").atoms[0].formal_charge == 2
        assert parse_smiles("c1cc[nH]c1").atoms[3].explicit_h == 1

    def test_percent_ring_closure(self):
        mol = parse_smiles("C%10CCCCC%10")
        assert len(mol.bonds) == 6 and all(b.in_ring for b in mol.bonds)

    def test_ring_closure_bond_order(self):
        mol = parse_smiles("C=1CCCCC1")
        assert mol.bond_between(0, 5).order == BondOrder.DOUBLE

    def test_aromatic_bond_only_between_aromatic_atoms(self):
        mol = parse_smiles("c1ccccc1C")
        assert mol.bond_between(5, 6).order == BondOrder.SINGLE

    def test_adjacency_symmetric(self):
        for smi in KNOWN_DRUGS:
            mol = parse_smiles(smi)
            for b in mol.bonds:
                assert b.end in mol.adjacency[b.begin] and b.begin in mol.adjacency[b.end]


class TestParseErrors:
    @pytest.mark.parametrize("text, exc", [
        ("", EmptyInput),
        ("   ", EmptyInput),
        ("CC(C", UnbalancedParenthesis),
        ("CC)C", UnbalancedParenthesis),
        ("C1CC", UnmatchedRingClosure),
        ("[Xx]", UnknownElement),
        ("C[C@H](N)O", UnsupportedFeature),
        ("F/C=C/F", UnsupportedFeature),
        ("[13CH4]", UnsupportedFeature),
        ("*C", UnsupportedFeature),
        ("CC.O", UnsupportedFeature),
    ])
    def test_rejects(self, text, exc):
        with pytest.raises(exc):
            parse_smiles(text)


class TestRingFlags:
    def test_bridges_match_removal_oracle(self):
        for smi in KNOWN_DRUGS + synthetic_smiles(200, seed=3, max_atoms=20):
            mol = parse_smiles(smi)
            edges = [(b.begin, b.end) for b in mol.bonds]
            oracle = bridges_by_removal(mol.num_atoms, edges)
            assert find_bridges(mol.num_atoms, mol.adjacency) == oracle
            for b in mol.bonds:
                assert b.in_ring == ((min(b.endpoints), max(b.endpoints)) not in oracle)

    def test_fused_rings(self):
        mol = parse_smiles("c1ccc2ccccc2c1")
        assert all(b.in_ring for b in mol.bonds)
        assert mol.ring_atoms() == frozenset(range(10))


@st.composite
def tree_smiles(draw):
    """Random acyclic SMILES with branches over a small atom alphabet."""
    atoms = ["C", "N", "O", "S", "Cl", "[N+]", "[O-]", "F"]
    n = draw(st.integers(1, 15))
    out, depth = [], 0
    for i in range(n):
        out.append(draw(st.sampled_from(atoms)) if i == 0 else draw(st.sampled_from(["", "=", "-"])) + draw(st.sampled_from(atoms)))
        if i < n - 1 and draw(st.booleans()):
            out.append("(")
            depth += 1
        elif depth and draw(st.booleans()):
            out.append(")")
            depth -= 1
    text = "".join(out) + ")" * depth
    return text.replace("()", "")


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(tree_smiles())
    def test_atom_count_equals_tokens(self, smi):
        try:
            mol = parse_smiles(smi)
        except UnbalancedParenthesis:
            return
        assert mol.num_atoms == count_atom_tokens(smi)
        assert len(mol.bonds) == mol.num_atoms - 1
        assert mol.is_connected()

    def test_generated_corpus_token_count(self):
        for smi in synthetic_smiles(300, seed=11):
            assert parse_smiles(smi).num_atoms == count_atom_tokens(smi)


class TestMolecularGraph:
    def test_rejects_duplicate_bond(self):
        mol = parse_smiles("CC")
        with pytest.raises(SmilesError, match="duplicate"):
            MolecularGraph(mol.atoms, mol.bonds + mol.bonds)

    def test_is_connected_subset(self):
        mol = parse_smiles("CCOC")
        assert mol.is_connected({0, 1, 2})
        assert not mol.is_connected({0, 3})


class TestCorpusReading:
    def test_ids_comments_and_skips(self):
        lines = ["# header", "CCO\tethanol", "", "C1CC\tbroken", "c1ccccc1"]
        records, issues = read_corpus(lines)
        assert [r.mol_id for r in records] == ["ethanol", "5"]
        assert [i.line_no for i in issues] == [4]

    def test_abort_mode_reports_line(self):
        with pytest.raises(UnmatchedRingClosure, match="line 2"):
            read_corpus(["CC", "C1CC"], skip_errors=False)

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "c.smi"
        p.write_text("CC\ta\nCO\tb\n")
        records, issues = load_corpus(p)
        assert [r.mol.num_atoms for r in records] == [2, 2] and not issues
