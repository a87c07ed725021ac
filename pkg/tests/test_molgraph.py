import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grafted.errors import (
    Disconnected,
    InvalidGraph,
    LengthMismatch,
    SmilesSyntaxError,
    UnsupportedFeature,
)
from grafted.molgraph import (
    Atom,
    BondState,
    Fingerprint,
    MolecularGraph,
    check_validity,
    fnv1a64,
    graph_from_edges,
    is_isomorphic,
    morgan_fingerprint,
    parse_smiles,
    tanimoto,
    write_smiles,
)


def single_carbon():
    return graph_from_edges([Atom("C")], [])


class TestParse:
    def test_single_atom(self):
        g = parse_smiles("C")
        assert len(g) == 1
        assert g.atoms[0].element == "C"
        assert g.edge_list() == []

    def test_benzene(self):
        g = parse_smiles("c1ccccc1")
        assert len(g) == 6
        assert all(a.aromatic and a.element == "C" for a in g.atoms)
        edges = g.edge_list()
        assert len(edges) == 6
        assert all(state == BondState.AROMATIC for _, _, state in edges)

    def test_dangling_ring_closure(self):
        with pytest.raises(SmilesSyntaxError):
            parse_smiles("C1CC")

    @pytest.mark.parametrize("bad", ["", "C(C", "C)C", "CC=", "C=#C", "C.C", "C%1C"])
    def test_syntax_errors(self, bad):
        with pytest.raises(SmilesSyntaxError):
            parse_smiles(bad)

    @pytest.mark.parametrize("bad", ["[13C]", "*", "[Se]", "[C:1]", "[N+3]", "[Xe]"])
    def test_unsupported(self, bad):
        with pytest.raises(UnsupportedFeature):
            parse_smiles(bad)

    def test_bracket_atoms(self):
        g = parse_smiles("[NH4+]")
        atom = g.atoms[0]
        assert (atom.element, atom.formal_charge, atom.explicit_h) == ("N", 1, 4)

    def test_stereo_stripped_and_flagged(self):
        g = parse_smiles("C/C=C/C")
        assert g.lossy_source
        assert check_validity(g).lossy_parse
        assert g.bond(0, 1) == BondState.SINGLE

    def test_explicit_bonds(self):
        g = parse_smiles("C#N")
        assert g.bond(0, 1) == BondState.TRIPLE

    def test_ring_closure_bond_symbol_conflict(self):
        with pytest.raises(SmilesSyntaxError):
            parse_smiles("C=1CCCC-1")

    def test_percent_ring_closure(self):
        g = parse_smiles("C%11CCCC%11")
        assert len(g.edge_list()) == 5


class TestWrite:
    def test_single_carbon(self):
        assert write_smiles(single_carbon()) == "C"

    def test_benzene_roundtrip(self):
        g = parse_smiles("c1ccccc1")
        out = write_smiles(g)
        again = parse_smiles(out)
        assert len(again) == 6
        assert all(s == BondState.AROMATIC for _, _, s in again.edge_list())
        assert is_isomorphic(again, g)

    def test_mask_bond_rejected(self):
        bonds = np.zeros((2, 2), dtype=np.int8)
        bonds[0, 1] = bonds[1, 0] = int(BondState.MASK)
        g = MolecularGraph((Atom("C"), Atom("C")), bonds)
        with pytest.raises(InvalidGraph):
            write_smiles(g)

    def test_disconnected_rejected(self):
        g = graph_from_edges([Atom("C"), Atom("C")], [])
        with pytest.raises(Disconnected):
            write_smiles(g)

    def test_deterministic_under_permutation(self):
        g = parse_smiles("N#Cc1ccccc1OC(=O)C")
        rng = np.random.default_rng(4)
        for _ in range(5):
            perm = rng.permutation(len(g)).tolist()
            inv = {p: i for i, p in enumerate(perm)}
            bonds = np.zeros((len(g), len(g)), dtype=np.int8)
            for i, j, s in g.edge_list():
                bonds[inv[i], inv[j]] = bonds[inv[j], inv[i]] = int(s)
            shuffled = MolecularGraph(tuple(g.atoms[p] for p in perm), bonds)
            assert write_smiles(shuffled) == write_smiles(g)


ROUNDTRIP_CASES = [
    "C",
    "CCO",
    "CC(C)C",
    "c1ccccc1",
    "c1ccncc1",
    "c1cc[nH]c1",
    "c1ccoc1",
    "c1ccsc1",
    "C1CCCCC1",
    "CC(=O)OC",
    "N#Cc1ccccc1O",
    "O=[N+]([O-])c1ccccc1",
    "C[N+](C)(C)C",
    "FC(F)(F)c1ccccc1",
    "c1ccc2ccccc2c1",
    "C1CC1C2CCC2",
    "OC(=O)c1ccccc1N",
    "CSC(=S)N",
    "ClC(Br)I",
    "C1OC1CN",
]


@pytest.mark.parametrize("smiles", ROUNDTRIP_CASES)
def test_roundtrip(smiles):
    g = parse_smiles(smiles)
    assert check_validity(g).valid, smiles
    assert is_isomorphic(parse_smiles(write_smiles(g)), g), smiles


class TestValidity:
    def test_methane_valid(self):
        assert check_validity(single_carbon()).valid

    def test_five_bond_carbon(self):
        atoms = [Atom("C")] + [Atom("C") for _ in range(5)]
        edges = [(0, i, BondState.SINGLE) for i in range(1, 6)]
        report = check_validity(graph_from_edges(atoms, edges))
        assert not report.valid
        assert any(v.kind == "valence" and v.where == 0 for v in report.violations)

    def test_disconnected(self):
        report = check_validity(graph_from_edges([Atom("C"), Atom("C")], []))
        assert not report.valid
        assert any(v.kind == "disconnected" for v in report.violations)

    def test_mask_flagged(self):
        bonds = np.zeros((2, 2), dtype=np.int8)
        bonds[0, 1] = bonds[1, 0] = int(BondState.MASK)
        report = check_validity(MolecularGraph((Atom("C"), Atom("C")), bonds))
        assert not report.valid
        assert any(v.kind == "mask" for v in report.violations)

    def test_acyclic_aromatic_bond(self):
        g = graph_from_edges(
            [Atom("C", aromatic=True), Atom("C", aromatic=True)],
            [(0, 1, BondState.AROMATIC)],
        )
        report = check_validity(g)
        assert any(v.kind == "aromatic_acyclic" for v in report.violations)

    def test_charged_nitrogen_cap(self):
        assert check_validity(parse_smiles("C[N+](C)(C)C")).valid
        atoms = [Atom("N")] + [Atom("C") for _ in range(4)]
        edges = [(0, i, BondState.SINGLE) for i in range(1, 5)]
        assert not check_validity(graph_from_edges(atoms, edges)).valid

    def test_hydrogen_counts(self):
        g = parse_smiles("CCO")
        assert [g.hydrogen_count(i) for i in range(3)] == [3, 2, 1]
        benzene = parse_smiles("c1ccccc1")
        assert [benzene.hydrogen_count(i) for i in range(6)] == [1] * 6
        thiophene = parse_smiles("c1ccsc1")
        s_index = next(i for i, a in enumerate(thiophene.atoms) if a.element == "S")
        assert thiophene.hydrogen_count(s_index) == 0


class TestIsomorphism:
    def test_permuted_is_isomorphic(self):
        g = parse_smiles("CC(=O)Nc1ccccc1")
        perm = list(reversed(range(len(g))))
        inv = {p: i for i, p in enumerate(perm)}
        bonds = np.zeros((len(g), len(g)), dtype=np.int8)
        for i, j, s in g.edge_list():
            bonds[inv[i], inv[j]] = bonds[inv[j], inv[i]] = int(s)
        assert is_isomorphic(MolecularGraph(tuple(g.atoms[p] for p in perm), bonds), g)

    def test_butane_vs_isobutane(self):
        assert not is_isomorphic(parse_smiles("CCCC"), parse_smiles("CC(C)C"))

    def test_benzene_vs_cyclohexane(self):
        assert not is_isomorphic(parse_smiles("c1ccccc1"), parse_smiles("C1CCCCC1"))

    def test_hydrogen_equivalence(self):
        # [CH4] and C denote the same molecule.
        assert is_isomorphic(parse_smiles("[CH4]"), parse_smiles("C"))

    def test_disubstitution_patterns_differ(self):
        ortho = parse_smiles("Oc1ccccc1O")
        para = parse_smiles("Oc1ccc(O)cc1")
        assert not is_isomorphic(ortho, para)


class TestFingerprint:
    def test_deterministic(self):
        g = parse_smiles("CCO")
        assert morgan_fingerprint(g) == morgan_fingerprint(g)

    def test_distinct_roots_disjoint(self):
        fp_c = morgan_fingerprint(parse_smiles("C"))
        fp_o = morgan_fingerprint(parse_smiles("O"))
        assert fp_c.bits & fp_o.bits == 0
        assert fp_c.popcount() >= 1 and fp_o.popcount() >= 1

    def test_benzene_symmetry(self):
        fp = morgan_fingerprint(parse_smiles("c1ccccc1"), radius=2)
        assert 1 <= fp.popcount() <= 3

    def test_permutation_invariance(self):
        g = parse_smiles("CC(=O)Nc1ccccc1")
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(g)).tolist()
        inv = {p: i for i, p in enumerate(perm)}
        bonds = np.zeros((len(g), len(g)), dtype=np.int8)
        for i, j, s in g.edge_list():
            bonds[inv[i], inv[j]] = bonds[inv[j], inv[i]] = int(s)
        shuffled = MolecularGraph(tuple(g.atoms[p] for p in perm), bonds)
        assert morgan_fingerprint(shuffled) == morgan_fingerprint(g)

    def test_invalid_graph_rejected(self):
        g = graph_from_edges([Atom("C"), Atom("C")], [])
        with pytest.raises(InvalidGraph):
            morgan_fingerprint(g)

    def test_fnv_reference_value(self):
        # FNV-1a 64 of empty input is the offset basis.
        assert fnv1a64(b"") == 0xCBF29CE484222325


class TestTanimoto:
    def test_identity(self):
        fp = morgan_fingerprint(parse_smiles("CCO"))
        assert tanimoto(fp, fp) == 1.0

    def test_disjoint(self):
        assert tanimoto(Fingerprint(0b1100, 4), Fingerprint(0b0011, 4)) == 0.0

    def test_four_bit_example(self):
        assert tanimoto(Fingerprint(0b1100, 4), Fingerprint(0b0110, 4)) == pytest.approx(1 / 3)

    def test_both_empty(self):
        assert tanimoto(Fingerprint(0, 16), Fingerprint(0, 16)) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            tanimoto(Fingerprint(1, 8), Fingerprint(1, 16))

    @given(a=st.integers(0, 2**64 - 1), b=st.integers(0, 2**64 - 1))
    @settings(max_examples=200, deadline=None)
    def test_bounds_and_symmetry(self, a, b):
        fa, fb = Fingerprint(a, 64), Fingerprint(b, 64)
        t = tanimoto(fa, fb)
        assert 0.0 <= t <= 1.0
        assert t == tanimoto(fb, fa)
