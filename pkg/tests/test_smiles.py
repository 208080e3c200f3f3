import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prokcat.smiles import (ATOM_FEATURE_WIDTH, SmilesError, atom_feature_matrix, implicit_hydrogens,
                            parse_smiles)


def test_methane():
    g = parse_smiles("C")
    assert g.n_atoms == 1 and len(g.bonds) == 0
    assert g.atoms[0].total_h == 4


def test_ethane_hydrogens():
    g = parse_smiles("CC")
    assert [a.total_h for a in g.atoms] == [3, 3]
    assert g.bonds[0].order == "single"


def test_cyclopropane_ring_closure():
    g = parse_smiles("C1CC1")
    assert g.n_atoms == 3 and len(g.bonds) == 3
    assert all(a.ring_member for a in g.atoms)


def test_benzene_aromatic():
    g = parse_smiles("c1ccccc1")
    assert g.n_atoms == 6 and len(g.bonds) == 6
    assert all(a.aromatic and a.ring_member and a.total_h == 1 for a in g.atoms)
    assert {b.order for b in g.bonds} == {"aromatic"}


def test_branches_and_bond_orders():
    g = parse_smiles("CC(=O)O")
    assert g.n_atoms == 4
    assert g.bond_between(1, 2).order == "double"
    assert g.degree(1) == 3
    assert [a.total_h for a in g.atoms] == [3, 0, 0, 1]


def test_triple_bond():
    g = parse_smiles("C#N")
    assert g.bonds[0].order == "triple"
    assert g.atoms[0].total_h == 1 and g.atoms[1].total_h == 0


def test_bracket_atom_charge_and_hydrogens():
    g = parse_smiles("[NH4+]")
    a = g.atoms[0]
    assert a.element == "N" and a.formal_charge == 1 and a.total_h == 4 and a.bracket


def test_bracket_atom_isotope_chirality_class():
    g = parse_smiles("N[C@@H](C)C(=O)O")
    assert g.atoms[1].total_h == 1
    g2 = parse_smiles("[13CH3:7]O")
    assert g2.atoms[0].element == "C" and g2.atoms[0].total_h == 3


def test_two_letter_elements_and_ring_percent():
    g = parse_smiles("ClC%12CCBr.C%12")
    assert [a.element for a in g.atoms] == ["Cl", "C", "C", "C", "Br", "C"]
    assert g.bond_between(1, 5) is not None


def test_disconnected_components():
    g = parse_smiles("[Na+].[Cl-]")
    assert g.n_atoms == 2 and len(g.bonds) == 0


def test_acyclic_atoms_are_not_ring_members():
    g = parse_smiles("CC1CC1C")
    assert [a.ring_member for a in g.atoms] == [False, True, True, True, False]


def test_directional_bonds_read_as_single():
    g = parse_smiles("F/C=C/F")
    assert [b.order for b in g.bonds] == ["single", "double", "single"]


def test_pyrrole_nh():
    g = parse_smiles("c1cc[nH]c1")
    n = g.atoms[3]
    assert n.aromatic and n.total_h == 1


@pytest.mark.parametrize("text,kind", [
    ("C(", "unbalanced_parenthesis"),
    ("C)", "unbalanced_parenthesis"),
    ("C1CC", "unmatched_ring_closure"),
    ("[Xx]", "unknown_element"),
    ("Q", "unknown_element"),
    ("[C", "invalid_bracket"),
    ("", "empty"),
    ("C==C", "invalid_bond"),
    ("C&C", "unexpected_token"),
    ("C.", "unexpected_token"),
    ("CÅ", "non_ascii"),
    ("C1C1", "invalid_bond"),
])
def test_error_kinds(text, kind):
    with pytest.raises(SmilesError) as exc:
        parse_smiles(text)
    assert exc.value.kind == kind


def test_error_offset_points_at_problem():
    with pytest.raises(SmilesError) as exc:
        parse_smiles("C(")
    assert exc.value.offset == 1


def test_implicit_hydrogen_rule():
    assert implicit_hydrogens("C", False, 0) == 4
    assert implicit_hydrogens("N", False, 1) == 2
    assert implicit_hydrogens("S", False, 3) == 1  # next allowed valence 4
    assert implicit_hydrogens("C", True, 2) == 1


def test_adjacency_symmetric():
    g = parse_smiles("OCC1OC(O)C(O)C(O)C1O")
    A = g.adjacency_matrix()
    assert np.array_equal(A, A.T) and not A.diagonal().any()
    assert A.sum() == 2 * len(g.bonds)


def test_atom_features_shape_and_one_hot():
    g = parse_smiles("c1ccccc1O")
    X = atom_feature_matrix(g)
    assert X.shape == (7, ATOM_FEATURE_WIDTH)
    assert np.all(X[:, :11].sum(axis=1) == 1.0)


_ATOMS = st.sampled_from(["C", "N", "O", "S", "Cl", "F"])


@settings(max_examples=60, deadline=None)
@given(st.lists(_ATOMS, min_size=1, max_size=12))
def test_chain_has_n_minus_one_bonds(atoms):
    g = parse_smiles("".join(atoms))
    assert g.n_atoms == len(atoms) and len(g.bonds) == len(atoms) - 1
    assert not any(a.ring_member for a in g.atoms)


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="CNO()=#123[]+-.cn", max_size=14))
def test_parser_never_crashes(text):
    try:
        parse_smiles(text)
    except SmilesError:
        pass
