"""SMILES parsing into a heavy-atom molecular graph.

Covers the organic subset, bracket atoms, branches, ring closures (including
``%nn``), explicit bond symbols and ``.`` separated components.  Stereo marks
and isotopes are read and discarded; aromaticity is taken as written.  See
``docs/smiles_grammar.md`` for the accepted grammar.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
_ELEMENT_SET = frozenset(ELEMENTS)

ORGANIC = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
# lowercase symbols allowed inside brackets
AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")

DEFAULT_VALENCES = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5),
    "S": (2, 4, 6), "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}

BOND_ORDERS = ("single", "double", "triple", "aromatic")
_BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic",
                 "/": "single", "\\": "single"}
_BOND_VALENCE = {"single": 1, "double": 2, "triple": 3, "aromatic": 1}


class SmilesError(ValueError):
    """Malformed SMILES; ``kind`` names the failure and ``offset`` its position."""

    def __init__(self, kind: str, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.kind = kind
        self.offset = offset


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool
    formal_charge: int
    explicit_h: int
    ring_member: bool
    index: int
    bracket: bool = False
    implicit_h: int = 0

    @property
    def total_h(self) -> int:
        return self.explicit_h + self.implicit_h


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: str


@dataclass
class MolGraph:
    atoms: list[Atom]
    bonds: list[Bond]
    adjacency: list[list[int]] = field(default_factory=list)
    smiles: str = ""

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def bond_between(self, i: int, j: int) -> Bond | None:
        for bond in self.bonds:
            if {bond.a, bond.b} == {i, j}:
                return bond
        return None

    def neighbor_bonds(self, i: int) -> list[tuple[int, str]]:
        out = []
        for bond in self.bonds:
            if bond.a == i:
                out.append((bond.b, bond.order))
            elif bond.b == i:
                out.append((bond.a, bond.order))
        return out

    def adjacency_matrix(self, self_loops: bool = False) -> np.ndarray:
        n = self.n_atoms
        adj = np.zeros((n, n), dtype=bool)
        for bond in self.bonds:
            adj[bond.a, bond.b] = adj[bond.b, bond.a] = True
        if self_loops:
            adj[np.arange(n), np.arange(n)] = True
        return adj


@dataclass
class _RawAtom:
    element: str
    aromatic: bool
    charge: int = 0
    hcount: int = 0
    bracket: bool = False


class _Parser:
    def __init__(self, s: str):
        self.s = s
        self.i = 0
        self.atoms: list[_RawAtom] = []
        self.bonds: dict[frozenset, tuple[int, int, str]] = {}
        self.bond_list: list[tuple[int, int, str, int]] = []

    def error(self, kind: str, message: str, offset: int | None = None):
        raise SmilesError(kind, message, self.i if offset is None else offset)

    def peek(self) -> str:
        return self.s[self.i] if self.i < len(self.s) else ""

    def parse(self):
        s = self.s
        prev: int | None = None
        pending_bond: tuple[str, int] | None = None
        branch_stack: list[tuple[int, int]] = []
        rings: dict[int, tuple[int, str | None, int]] = {}
        expect_atom = True  # start, after '(' or '.'
        while self.i < len(s):
            ch = s[self.i]
            start = self.i
            if ch == "(":
                if prev is None or pending_bond is not None:
                    self.error("unexpected_token", "branch must follow an atom")
                branch_stack.append((prev, start))
                self.i += 1
                expect_atom = True
                continue
            if ch == ")":
                if not branch_stack:
                    self.error("unbalanced_parenthesis", "unmatched ')'")
                if expect_atom or pending_bond is not None:
                    self.error("unexpected_token", "empty branch or dangling bond")
                prev, _ = branch_stack.pop()
                self.i += 1
                continue
            if ch == ".":
                if pending_bond is not None or expect_atom:
                    self.error("unexpected_token", "'.' must follow an atom")
                prev = None
                self.i += 1
                expect_atom = True
                continue
            if ch in _BOND_SYMBOLS:
                if prev is None or pending_bond is not None:
                    self.error("invalid_bond", f"bond symbol {ch!r} without a preceding atom")
                pending_bond = (_BOND_SYMBOLS[ch], start)
                self.i += 1
                continue
            if ch in "$~":
                self.error("invalid_bond", f"unsupported bond symbol {ch!r}")
            if ch.isdigit() or ch == "%":
                if prev is None or expect_atom:
                    self.error("unexpected_token", "ring closure without a preceding atom")
                num = self.ring_number()
                order = pending_bond[0] if pending_bond else None
                pending_bond = None
                if num in rings:
                    other, other_order, _ = rings.pop(num)
                    if other_order and order and other_order != order:
                        self.error("invalid_bond", f"conflicting bond orders on ring closure {num}", start)
                    self.add_bond(other, prev, order or other_order, start)
                else:
                    rings[num] = (prev, order, start)
                continue
            idx = self.atom()
            if prev is not None:
                self.add_bond(prev, idx, pending_bond[0] if pending_bond else None,
                              pending_bond[1] if pending_bond else start)
            elif pending_bond is not None:
                self.error("invalid_bond", "bond without a preceding atom", pending_bond[1])
            pending_bond = None
            prev = idx
            expect_atom = False
        if pending_bond is not None:
            self.error("invalid_bond", "dangling bond at end of string", pending_bond[1])
        if branch_stack:
            self.error("unbalanced_parenthesis", "unclosed '('", branch_stack[-1][1])
        if rings:
            num, (_, _, off) = min(rings.items(), key=lambda kv: kv[1][2])
            self.error("unmatched_ring_closure", f"ring closure {num} never closed", off)
        if expect_atom:
            self.error("unexpected_token", "string ends where an atom is expected")

    def ring_number(self) -> int:
        s = self.s
        if s[self.i] == "%":
            digits = s[self.i + 1:self.i + 3]
            if len(digits) != 2 or not digits.isdigit():
                self.error("invalid_ring_closure", "'%' must be followed by two digits")
            self.i += 3
            return int(digits)
        self.i += 1
        return int(s[self.i - 1])

    def add_bond(self, a: int, b: int, order: str | None, offset: int):
        if a == b:
            self.error("invalid_bond", "atom bonded to itself", offset)
        key = frozenset((a, b))
        if key in self.bonds:
            self.error("invalid_bond", "duplicate bond between the same atoms", offset)
        aro = self.atoms[a].aromatic and self.atoms[b].aromatic
        if order is None:
            order = "aromatic" if aro else "single"
        elif order == "aromatic" and not aro:
            self.error("invalid_bond", "aromatic bond between non-aromatic atoms", offset)
        self.bonds[key] = (a, b, order)
        self.bond_list.append((a, b, order, offset))

    def atom(self) -> int:
        s, i = self.s, self.i
        if s[i] == "[":
            raw = self.bracket_atom()
        else:
            two = s[i:i + 2]
            if two in ("Cl", "Br"):
                raw = _RawAtom(two, False)
                self.i += 2
            elif s[i] in ORGANIC:
                raw = _RawAtom(s[i], False)
                self.i += 1
            elif s[i] in AROMATIC_ORGANIC:
                raw = _RawAtom(s[i].upper(), True)
                self.i += 1
            elif s[i].isalpha() or s[i] == "*":
                self.error("unknown_element", f"unknown or non-organic element {s[i]!r} outside brackets")
            else:
                self.error("unexpected_token", f"unexpected character {s[i]!r}")
        self.atoms.append(raw)
        return len(self.atoms) - 1

    def bracket_atom(self) -> _RawAtom:
        s = self.s
        start = self.i
        end = s.find("]", start)
        if end < 0:
            self.error("invalid_bracket", "unterminated bracket atom", start)
        body = s[start + 1:end]
        j = 0

        def fail(msg):
            self.error("invalid_bracket", msg, start + 1 + j)

        while j < len(body) and body[j].isdigit():  # isotope, discarded
            j += 1
        aromatic = False
        sym = None
        for cand in AROMATIC_BRACKET:
            if body.startswith(cand, j) and (len(cand) == 2 or not body[j + 1:j + 2].islower()):
                sym, aromatic = cand[0].upper() + cand[1:], True
                break
        if sym is None:
            if j < len(body) and body[j].isupper():
                if body[j + 1:j + 2].islower() and body[j:j + 2] in _ELEMENT_SET:
                    sym = body[j:j + 2]
                elif body[j] in _ELEMENT_SET:
                    sym = body[j]
                else:
                    self.error("unknown_element", f"unknown element in {body!r}", start + 1 + j)
            elif j < len(body) and body[j] == "*":
                self.error("unknown_element", "wildcard atom is not supported", start + 1 + j)
            else:
                fail(f"missing element symbol in [{body}]")
        j += len(sym)
        if j < len(body) and body[j] == "@":  # chirality, discarded
            j += 1
            if j < len(body) and body[j] == "@":
                j += 1
            elif body[j:j + 2] in ("TH", "AL", "SP", "TB", "OH"):
                j += 2
                while j < len(body) and body[j].isdigit():
                    j += 1
        hcount = 0
        if j < len(body) and body[j] == "H":
            j += 1
            hcount = 1
            if j < len(body) and body[j].isdigit():
                hcount = int(body[j])
                j += 1
        charge = 0
        if j < len(body) and body[j] in "+-":
            sign = 1 if body[j] == "+" else -1
            ch = body[j]
            j += 1
            if j < len(body) and body[j].isdigit():
                digits = ""
                while j < len(body) and body[j].isdigit():
                    digits += body[j]
                    j += 1
                charge = sign * int(digits)
            else:
                mag = 1
                while j < len(body) and body[j] == ch:
                    mag += 1
                    j += 1
                charge = sign * mag
            if abs(charge) > 4:
                fail(f"formal charge {charge} outside [-4, 4]")
        if j < len(body) and body[j] == ":":  # atom class, discarded
            j += 1
            if j >= len(body) or not body[j].isdigit():
                fail("atom class needs digits")
            while j < len(body) and body[j].isdigit():
                j += 1
        if j != len(body):
            fail(f"unexpected {body[j]!r} in bracket atom")
        self.i = end + 1
        return _RawAtom(sym, aromatic, charge, hcount, True)


def _ring_bonds(n: int, bonds: list[tuple[int, int, str]]) -> set[int]:
    """Indices of bonds lying on a cycle (non-bridges), via iterative DFS lowlink."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, (a, b, _) in enumerate(bonds):
        adj[a].append((b, k))
        adj[b].append((a, k))
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    timer = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, via, it = stack[-1]
            advanced = False
            for w, k in it:
                if k == via:
                    continue
                if disc[w] < 0:
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, k, iter(adj[w])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if not advanced:
                stack.pop()
                if stack:
                    u = stack[-1][0]
                    low[u] = min(low[u], low[v])
                    if low[v] > disc[u]:
                        bridges.add(via)
    return set(range(len(bonds))) - bridges


def implicit_hydrogens(element: str, aromatic: bool, bond_sum: int) -> int:
    valences = DEFAULT_VALENCES.get(element)
    if valences is None:
        return 0
    used = bond_sum + (1 if aromatic else 0)
    for v in valences:
        if v >= used:
            return v - used
    return 0


def parse_smiles(s: str) -> MolGraph:
    if not isinstance(s, str) or not s:
        raise SmilesError("empty", "empty SMILES string", 0)
    try:
        s.encode("ascii")
    except UnicodeEncodeError:
        bad = next(i for i, c in enumerate(s) if ord(c) > 127)
        raise SmilesError("non_ascii", "non-ASCII character", bad) from None
    p = _Parser(s)
    p.parse()
    bonds = [(a, b, o) for a, b, o, _ in p.bond_list]
    ring = _ring_bonds(len(p.atoms), bonds)
    adjacency: list[list[int]] = [[] for _ in p.atoms]
    bond_sum = [0] * len(p.atoms)
    in_ring = [False] * len(p.atoms)
    for k, (a, b, order) in enumerate(bonds):
        adjacency[a].append(b)
        adjacency[b].append(a)
        bond_sum[a] += _BOND_VALENCE[order]
        bond_sum[b] += _BOND_VALENCE[order]
        if k in ring:
            in_ring[a] = in_ring[b] = True
    atoms = []
    for i, raw in enumerate(p.atoms):
        implicit = 0 if raw.bracket else implicit_hydrogens(raw.element, raw.aromatic, bond_sum[i])
        atoms.append(Atom(raw.element, raw.aromatic, raw.charge, raw.hcount, in_ring[i], i,
                          raw.bracket, implicit))
    return MolGraph(atoms, [Bond(a, b, o) for a, b, o in bonds], adjacency, s)


# ---------------------------------------------------------------- featurisation

FEATURE_ELEMENTS = ORGANIC
MAX_DEGREE = 5
ATOM_FEATURE_WIDTH = len(FEATURE_ELEMENTS) + 1 + (MAX_DEGREE + 1) + 4


def atom_feature_vector(atom: Atom, graph: MolGraph) -> np.ndarray:
    """Element one-hot (+other), degree one-hot 0..5, aromatic, charge/4, ring, explicit H/4."""
    v = np.zeros(ATOM_FEATURE_WIDTH)
    try:
        v[FEATURE_ELEMENTS.index(atom.element)] = 1.0
    except ValueError:
        v[len(FEATURE_ELEMENTS)] = 1.0
    off = len(FEATURE_ELEMENTS) + 1
    v[off + min(graph.degree(atom.index), MAX_DEGREE)] = 1.0
    off += MAX_DEGREE + 1
    v[off] = float(atom.aromatic)
    v[off + 1] = atom.formal_charge / 4.0
    v[off + 2] = float(atom.ring_member)
    v[off + 3] = atom.explicit_h / 4.0
    return v


def atom_feature_matrix(graph: MolGraph) -> np.ndarray:
    return np.stack([atom_feature_vector(a, graph) for a in graph.atoms])
