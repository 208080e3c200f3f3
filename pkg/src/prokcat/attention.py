"""Enzyme-substrate interaction attention.

Per head: a tanh soft-alignment matrix between atoms and residues, cross
features routed through it, softmax position weights scored from
``[cross || own]`` features, and row-wise re-weighting of the residue and atom
features.  Heads are concatenated on the width axis and projected back to
``d``.  Shapes below are for one example; a leading batch axis is allowed.
"""
from __future__ import annotations

import numpy as np

from prokcat import tensor as T


def init_attention_params(rng: np.random.Generator, d: int = 32, heads: int = 2) -> dict[str, T.Tensor]:
    p = T.parameter
    g = lambda *shape: T.glorot(rng, shape)  # noqa: E731
    params: dict[str, T.Tensor] = {}
    for h in range(heads):
        params[f"att{h}.W"] = p(g(d, d))
        params[f"att{h}.fcp_w"] = p(g(d, d))
        params[f"att{h}.fcp_b"] = p(np.zeros(d))
        params[f"att{h}.fcc_w"] = p(g(d, d))
        params[f"att{h}.fcc_b"] = p(np.zeros(d))
        params[f"att{h}.score_p_w"] = p(g(2 * d, 1))
        params[f"att{h}.score_p_b"] = p(np.zeros(1))
        params[f"att{h}.score_c_w"] = p(g(2 * d, 1))
        params[f"att{h}.score_c_b"] = p(np.zeros(1))
    params["att.out_p_w"] = p(g(heads * d, d))
    params["att.out_p_b"] = p(np.zeros(d))
    params["att.out_c_w"] = p(g(heads * d, d))
    params["att.out_c_b"] = p(np.zeros(d))
    return params


def head_count(params: dict[str, T.Tensor]) -> int:
    return sum(1 for k in params if k.startswith("att") and k.endswith(".W"))


def soft_alignment(H_c: T.Tensor, H_p: T.Tensor, W: T.Tensor, pair_mask: np.ndarray | None = None,
                   sigma: str = "tanh") -> T.Tensor:
    """``sigma(H_c W H_p^T)``: (N_v x d), (L_p x d) -> N_v x L_p."""
    H_c, H_p = T.as_tensor(H_c), T.as_tensor(H_p)
    if H_c.shape[-1] != W.shape[0] or H_p.shape[-1] != W.shape[1]:
        raise T.ShapeError(f"soft_alignment: widths {H_c.shape[-1]}, {H_p.shape[-1]} vs W {W.shape}")
    A = T.activation(T.matmul(T.matmul(H_c, W), T.transpose(H_p)), sigma)
    if pair_mask is not None:
        A = T.mul(A, np.asarray(pair_mask, dtype=np.float64))
    return A


def cross_features(A: T.Tensor, H_p: T.Tensor, H_c: T.Tensor, fcp_w, fcp_b, fcc_w, fcc_b):
    """Returns ``(h_p2c, h_c2p)`` = ``(A FC_p(H_p), A^T FC_c(H_c))``."""
    if A.shape[-2] != H_c.shape[-2] or A.shape[-1] != H_p.shape[-2]:
        raise T.ShapeError(f"cross_features: A {A.shape} vs H_c {H_c.shape}, H_p {H_p.shape}")
    h_p2c = T.matmul(A, T.linear(H_p, fcp_w, fcp_b))
    h_c2p = T.matmul(T.transpose(A), T.linear(H_c, fcc_w, fcc_b))
    return h_p2c, h_c2p


def attention_weights(h_c2p, H_p, h_p2c, H_c, score_p_w, score_p_b, score_c_w, score_c_b,
                      p_mask: np.ndarray | None = None, c_mask: np.ndarray | None = None):
    """Softmax position weights ``(alpha_p: L_p x 1, alpha_c: N_v x 1)``."""
    s_p = T.linear(T.concat([h_c2p, H_p], axis=-1), score_p_w, score_p_b)
    s_c = T.linear(T.concat([h_p2c, H_c], axis=-1), score_c_w, score_c_b)
    pm = None if p_mask is None else np.asarray(p_mask, dtype=bool)[..., None]
    cm = None if c_mask is None else np.asarray(c_mask, dtype=bool)[..., None]
    return T.softmax(s_p, axis=-2, mask=pm), T.softmax(s_c, axis=-2, mask=cm)


def apply_weights(alpha_p: T.Tensor, H_p: T.Tensor, alpha_c: T.Tensor, H_c: T.Tensor):
    """Scale each residue / atom row by its weight (broadcast, not a contraction)."""
    if alpha_p.shape[-2] != H_p.shape[-2] or alpha_c.shape[-2] != H_c.shape[-2]:
        raise T.ShapeError("apply_weights: weight lengths do not match feature rows")
    return T.mul(alpha_p, H_p), T.mul(alpha_c, H_c)


def head_forward(H_p, H_c, params, h: int, p_mask=None, c_mask=None, sigma: str = "tanh"):
    """One head; returns ``(h'_p, h'_c, A, alpha_p, alpha_c)``."""
    pair = None
    if p_mask is not None and c_mask is not None:
        pair = np.asarray(c_mask, dtype=bool)[..., :, None] & np.asarray(p_mask, dtype=bool)[..., None, :]
    A = soft_alignment(H_c, H_p, params[f"att{h}.W"], pair, sigma)
    h_p2c, h_c2p = cross_features(A, H_p, H_c, params[f"att{h}.fcp_w"], params[f"att{h}.fcp_b"],
                                  params[f"att{h}.fcc_w"], params[f"att{h}.fcc_b"])
    a_p, a_c = attention_weights(h_c2p, H_p, h_p2c, H_c, params[f"att{h}.score_p_w"],
                                 params[f"att{h}.score_p_b"], params[f"att{h}.score_c_w"],
                                 params[f"att{h}.score_c_b"], p_mask, c_mask)
    wp, wc = apply_weights(a_p, H_p, a_c, H_c)
    return wp, wc, A, a_p, a_c


def multi_head_interaction(H_p, H_c, params, p_mask=None, c_mask=None, disabled: bool = False,
                           sigma: str = "tanh", return_details: bool = False):
    """``(h'_p: L_p x d, h'_c: N_v x d)``; ``disabled`` is the no-attention ablation (identity)."""
    if disabled:
        return (H_p, H_c, []) if return_details else (H_p, H_c)
    heads = head_count(params)
    if heads < 1:
        raise ValueError("attention needs at least one head")
    outs_p, outs_c, details = [], [], []
    for h in range(heads):
        wp, wc, A, a_p, a_c = head_forward(H_p, H_c, params, h, p_mask, c_mask, sigma)
        outs_p.append(wp)
        outs_c.append(wc)
        details.append({"A": A, "alpha_p": a_p, "alpha_c": a_c})
    hp = T.linear(T.concat(outs_p, axis=-1), params["att.out_p_w"], params["att.out_p_b"])
    hc = T.linear(T.concat(outs_c, axis=-1), params["att.out_c_w"], params["att.out_c_b"])
    return (hp, hc, details) if return_details else (hp, hc)
