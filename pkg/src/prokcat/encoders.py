"""Protein (token embedding + CNN + external embeddings) and substrate (GAT) encoders.

All encoders accept a single example (``L x c``) or a padded batch
(``B x L x c``) with a boolean validity mask.  Padded positions are zeroed
between layers so that a padded example encodes exactly like the unpadded one.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np

from prokcat import tensor as T
from prokcat.smiles import ATOM_FEATURE_WIDTH

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWYX"
_AA_INDEX = {c: i for i, c in enumerate(AMINO_ACIDS)}
_VALID_SEQ = re.compile(f"^[{AMINO_ACIDS}]+$")

DEFAULT_EMBED_WIDTH = 64
TOKEN_WIDTH = 32
CNN_KERNEL = 3
GAT_LAYERS = 2
FINGERPRINT_WIDTH = 1024


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class ProteinSequence:
    residues: str

    def __post_init__(self):
        if not self.residues or not _VALID_SEQ.match(self.residues):
            bad = next((i for i, c in enumerate(self.residues) if c not in _AA_INDEX), 0)
            raise SequenceError(f"invalid residue at position {bad} in protein sequence")

    def __len__(self) -> int:
        return len(self.residues)

    def tokens(self) -> np.ndarray:
        return np.array([_AA_INDEX[c] for c in self.residues], dtype=np.intp)


def init_encoder_params(rng: np.random.Generator, d: int = 32, ext_width: int = DEFAULT_EMBED_WIDTH,
                        tok_width: int = TOKEN_WIDTH) -> dict[str, T.Tensor]:
    p = T.parameter
    g = lambda *shape, **kw: T.glorot(rng, shape, **kw)  # noqa: E731
    params = {
        "enc.tok_embed": p(rng.normal(0.0, 1.0 / math.sqrt(tok_width), (len(AMINO_ACIDS), tok_width))),
        "enc.conv1": p(g(CNN_KERNEL, tok_width, tok_width, fan_in=CNN_KERNEL * tok_width, fan_out=tok_width)),
        "enc.conv1_b": p(np.zeros(tok_width)),
        "enc.conv2": p(g(CNN_KERNEL, tok_width, tok_width, fan_in=CNN_KERNEL * tok_width, fan_out=tok_width)),
        "enc.conv2_b": p(np.zeros(tok_width)),
        "enc.palign_w1": p(g(tok_width + ext_width, d)),
        "enc.palign_b1": p(np.zeros(d)),
        "enc.palign_w2": p(g(d, d)),
        "enc.palign_b2": p(np.zeros(d)),
        "enc.atom_w": p(g(ATOM_FEATURE_WIDTH, d)),
        "enc.atom_b": p(np.zeros(d)),
        "enc.falign_w1": p(g(FINGERPRINT_WIDTH, d)),
        "enc.falign_b1": p(np.zeros(d)),
        "enc.falign_w2": p(g(d, d)),
        "enc.falign_b2": p(np.zeros(d)),
    }
    for layer in range(GAT_LAYERS):
        params[f"enc.gat{layer}_W"] = p(g(d, d))
        # attention vector a = [a_src ; a_dst] of length 2d
        params[f"enc.gat{layer}_a_src"] = p(g(d, 1, fan_in=2 * d, fan_out=1))
        params[f"enc.gat{layer}_a_dst"] = p(g(d, 1, fan_in=2 * d, fan_out=1))
    return params


def _masked(x: T.Tensor, mask: np.ndarray | None) -> T.Tensor:
    if mask is None:
        return x
    return T.mul(x, np.asarray(mask, dtype=np.float64)[..., None])


def encode_protein(tokens: np.ndarray, ext: np.ndarray | None, params: dict[str, T.Tensor],
                   mask: np.ndarray | None = None, no_cnn: bool = False) -> T.Tensor:
    """Residue features ``(..., L, d)``.

    ``ext`` holds the external per-residue embeddings; ``None`` substitutes
    zeros of the configured width (the no-external-embedding ablation).
    """
    tokens = np.asarray(tokens, dtype=np.intp)
    ext_width = params["enc.palign_w1"].shape[0] - params["enc.tok_embed"].shape[1]
    if ext is None:
        ext = np.zeros(tokens.shape + (ext_width,))
    ext = np.asarray(ext, dtype=np.float64)
    if ext.shape[:-1] != tokens.shape or ext.shape[-1] != ext_width:
        raise SequenceError(f"external embedding shape {ext.shape} does not match "
                            f"{tokens.shape} residues x width {ext_width}")
    x = _masked(T.take_rows(params["enc.tok_embed"], tokens), mask)
    if not no_cnn:
        x = T.relu(T.add(T.conv1d(x, params["enc.conv1"]), params["enc.conv1_b"]))
        x = _masked(x, mask)
        x = T.add(T.conv1d(x, params["enc.conv2"]), params["enc.conv2_b"])
    x = T.concat([x, T.as_tensor(ext)], axis=-1)
    h = T.relu(T.linear(x, params["enc.palign_w1"], params["enc.palign_b1"]))
    return T.linear(h, params["enc.palign_w2"], params["enc.palign_b2"])


def gat_layer(node_feats: T.Tensor, adjacency: np.ndarray, W: T.Tensor, a_src: T.Tensor,
              a_dst: T.Tensor, return_attention: bool = False):
    """Single-head graph attention with self-loops and a tanh output.

    ``adjacency`` is boolean ``(..., N, N)``; self-loops are added here.
    """
    adj = np.array(adjacency, dtype=bool)
    n = adj.shape[-1]
    adj[..., np.arange(n), np.arange(n)] = True
    wh = T.matmul(node_feats, W)
    s_src = T.matmul(wh, a_src)
    s_dst = T.matmul(wh, a_dst)
    scores = T.leaky_relu(T.add(s_src, T.transpose(s_dst)))
    att = T.softmax(scores, axis=-1, mask=adj)
    out = T.tanh(T.matmul(att, wh))
    return (out, att) if return_attention else out


def encode_substrate(atom_feats: np.ndarray, adjacency: np.ndarray, params: dict[str, T.Tensor],
                     mask: np.ndarray | None = None) -> T.Tensor:
    """Atom features ``(..., N, d)`` from featurised atoms and bond adjacency."""
    h = T.linear(T.as_tensor(atom_feats), params["enc.atom_w"], params["enc.atom_b"])
    for layer in range(GAT_LAYERS):
        h = gat_layer(h, adjacency, params[f"enc.gat{layer}_W"], params[f"enc.gat{layer}_a_src"],
                      params[f"enc.gat{layer}_a_dst"])
        h = _masked(h, mask)
    return h


def align_fingerprint(fp: np.ndarray | T.Tensor, params: dict[str, T.Tensor]) -> T.Tensor:
    h = T.relu(T.linear(T.as_tensor(fp), params["enc.falign_w1"], params["enc.falign_b1"]))
    return T.linear(h, params["enc.falign_w2"], params["enc.falign_b2"])


# ---------------------------------------------------------------- embedding files

class EmbeddingFileError(ValueError):
    pass


def read_embeddings(path) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a ``PEMB1`` residue-embedding file into ``(width, {id: L x width})``."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].startswith("PEMB1"):
        raise EmbeddingFileError(f"{path}: missing 'PEMB1 <width>' header")
    try:
        width = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise EmbeddingFileError(f"{path}: bad header {lines[0]!r}") from None
    out: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if not line.startswith(">"):
            raise EmbeddingFileError(f"{path}:{i}: expected '><id> <length>' record header")
        parts = line[1:].split()
        if len(parts) != 2 or not parts[1].isdigit():
            raise EmbeddingFileError(f"{path}:{i}: bad record header {line!r}")
        key, length = parts[0], int(parts[1])
        if length < 1:
            raise EmbeddingFileError(f"{path}:{i}: sequence length must be >= 1")
        rows = []
        for _ in range(length):
            if i >= len(lines) or not lines[i].strip() or lines[i].startswith(">"):
                raise EmbeddingFileError(f"{path}:{i + 1}: record {key!r} has fewer than {length} rows")
            vals = lines[i].split()
            if len(vals) != width:
                raise EmbeddingFileError(f"{path}:{i + 1}: expected {width} values, got {len(vals)}")
            rows.append([float(v) for v in vals])
            i += 1
        if key in out:
            raise EmbeddingFileError(f"{path}: duplicate record id {key!r}")
        out[key] = np.array(rows)
    return width, out


def write_embeddings(path, table: dict[str, np.ndarray]) -> None:
    widths = {m.shape[1] for m in table.values()}
    if len(widths) > 1:
        raise EmbeddingFileError("all embeddings must share one width")
    width = widths.pop() if widths else DEFAULT_EMBED_WIDTH
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"PEMB1 {width}\n")
        for key, mat in table.items():
            fh.write(f">{key} {mat.shape[0]}\n")
            for row in mat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def sequence_key(sequence: str) -> str:
    """Identifier under which a sequence's embeddings are stored: 16 hex chars of its SHA-256."""
    return hashlib.sha256(sequence.encode("ascii")).hexdigest()[:16]


def lookup_embedding(table: dict[str, np.ndarray], sequence: str) -> np.ndarray | None:
    """Find a sequence's matrix by its :func:`sequence_key` or by the raw sequence."""
    mat = table.get(sequence_key(sequence))
    if mat is None:
        mat = table.get(sequence)
    if mat is not None and mat.shape[0] != len(sequence):
        raise EmbeddingFileError(f"embedding rows {mat.shape[0]} != sequence length {len(sequence)}")
    return mat
