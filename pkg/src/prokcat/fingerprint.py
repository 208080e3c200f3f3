"""Extended-connectivity (Morgan) fingerprints folded to a fixed bit length."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from prokcat import _kernels
from prokcat.smiles import ELEMENTS, MolGraph
from prokcat.tensor import Tensor

DEFAULT_RADIUS = 2
DEFAULT_BITS = 1024
BOND_CODES = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}


@dataclass
class FingerprintBits:
    bits: np.ndarray
    set_count: int = field(init=False)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        self.set_count = int(self.bits.sum())

    def __len__(self) -> int:
        return len(self.bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, FingerprintBits) and np.array_equal(self.bits, other.bits)

    def on_bits(self) -> list[int]:
        return np.flatnonzero(self.bits).tolist()

    def to_hex(self) -> str:
        """Hex of the integer sum(bit_i * 2**i), most-significant nibble first."""
        value = 0
        for i in self.on_bits():
            value |= 1 << i
        return format(value, f"0{len(self.bits) // 4}x")

    @classmethod
    def from_hex(cls, text: str) -> "FingerprintBits":
        n = len(text) * 4
        value = int(text, 16)
        return cls(np.array([(value >> i) & 1 for i in range(n)], dtype=bool))


def initial_invariant(graph: MolGraph, atom_index: int) -> int:
    atom = graph.atoms[atom_index]
    payload = struct.pack(
        "<7q",
        0,
        ELEMENTS.index(atom.element) + 1,
        graph.degree(atom_index),
        atom.total_h,
        atom.formal_charge,
        int(atom.aromatic),
        int(atom.ring_member),
    )
    return _kernels.fnv1a64(payload)


def _round_hash(round_no: int, own: int, neighbors: list[tuple[int, int]]) -> int:
    parts = [struct.pack("<qQ", round_no, own)]
    parts += [struct.pack("<qQ", code, nid) for code, nid in neighbors]
    return _kernels.fnv1a64(b"".join(parts))


def morgan_identifiers(graph: MolGraph, radius: int = DEFAULT_RADIUS) -> list[int]:
    """Unique-environment identifiers from rounds 0..radius."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    n = graph.n_atoms
    nbrs = [graph.neighbor_bonds(i) for i in range(n)]
    ids = [initial_invariant(graph, i) for i in range(n)]
    envs = [frozenset((i,)) for i in range(n)]
    seen_envs = set(envs)
    out = list(ids)
    for r in range(1, radius + 1):
        new_ids = []
        new_envs = []
        for i in range(n):
            pairs = sorted((BOND_CODES[order], ids[j]) for j, order in nbrs[i])
            new_ids.append(_round_hash(r, ids[i], pairs))
            env = envs[i].union(*(envs[j] for j, _ in nbrs[i])) if nbrs[i] else envs[i]
            new_envs.append(env)
        for ident, env in zip(new_ids, new_envs):
            if env not in seen_envs:
                out.append(ident)
        seen_envs.update(new_envs)
        ids, envs = new_ids, new_envs
    return out


def ecfp(graph: MolGraph, radius: int = DEFAULT_RADIUS, n_bits: int = DEFAULT_BITS) -> FingerprintBits:
    if n_bits <= 0 or n_bits & (n_bits - 1):
        raise ValueError(f"n_bits must be a power of two, got {n_bits}")
    bits = np.zeros(n_bits, dtype=bool)
    for ident in morgan_identifiers(graph, radius):
        bits[ident % n_bits] = True
    return FingerprintBits(bits)


def fingerprint_to_tensor(fp: FingerprintBits) -> Tensor:
    return Tensor(fp.bits.astype(np.float64))
