"""Backdoor-adjustment branch.

Expected confounders are read from the joint dictionary with scaled
dot-product cross-attention, fused back into each modality's feature with a
bias-free linear map, and the two adjusted features are concatenated into
the multimodal representation that feeds the shared prediction head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numcore import MLP, Module, Parameter, Tensor, concat, kl_from_logits, matmul, softmax_rows
from .numcore.nn import init_uniform


def _dict_entries(dictionary):
    entries = dictionary if isinstance(dictionary, np.ndarray) else dictionary.entries
    entries = np.asarray(entries, dtype=np.float64)
    if entries.ndim != 2 or entries.shape[0] == 0:
        raise ConfigError("confounder dictionary is empty")
    return entries


class ModalityAttention(Module):
    """Projections W_q, W_k, W_v (d x d_k) and fusion W_f ((d + d_k) x d) for one modality."""

    def __init__(self, d, rng, d_k=None, name="bda"):
        d_k = d if d_k is None else d_k
        if d_k < 1:
            raise ConfigError("d_k must be >= 1")
        self.d, self.d_k = d, d_k
        self.w_q = Parameter(init_uniform(rng, d, (d, d_k)), f"{name}.w_q")
        self.w_k = Parameter(init_uniform(rng, d, (d, d_k)), f"{name}.w_k")
        self.w_v = Parameter(init_uniform(rng, d, (d, d_k)), f"{name}.w_v")
        self.w_f = Parameter(init_uniform(rng, d + d_k, (d + d_k, d)), f"{name}.w_f")


class BdaParams(Module):
    def __init__(self, d, rng, d_k=None):
        self.visual = ModalityAttention(d, rng, d_k, name="bda.visual")
        self.textual = ModalityAttention(d, rng, d_k, name="bda.textual")
        self.d_k = self.visual.d_k


def prediction_head(d, n_answers, rng):
    """Shared head g: 2d -> d -> n_answers with ReLU."""
    return MLP([2 * d, d, n_answers], rng, name="head")


@dataclass
class BdaOutput:
    e_cv: Tensor
    e_cq: Tensor
    f_v_adj: Tensor
    f_q_adj: Tensor
    x: Tensor
    attention_weights: dict


def expected_confounder(f, dictionary, attn):
    """Cross-attention expectation of the confounder for a batch of features.

    Returns ``(e_c, weights)`` where ``weights`` is (B, N) row-stochastic.
    """
    entries = Tensor(_dict_entries(dictionary))
    if f.shape[1] != attn.w_q.shape[0] or entries.shape[1] != attn.w_k.shape[0]:
        raise DimensionError(f"feature {f.shape} / dictionary {entries.shape} do not fit projections {attn.w_q.shape}")
    queries = matmul(f, attn.w_q)
    keys = matmul(entries, attn.w_k)
    values = matmul(entries, attn.w_v)
    weights = softmax_rows(matmul(queries, keys.T), scale=1.0 / math.sqrt(attn.d_k))
    return matmul(weights, values), weights


def fuse(f, e_c, w_f):
    """``[f || e_c] @ w_f``: linear, no bias, no activation."""
    w = w_f if isinstance(w_f, Tensor) else Tensor(w_f)
    if f.shape[0] != e_c.shape[0] or f.shape[1] + e_c.shape[1] != w.shape[0]:
        raise DimensionError(f"cannot fuse {f.shape} and {e_c.shape} with {w.shape}")
    return matmul(concat(f, e_c), w)


def adjust(f_v, f_q, dictionary, params):
    e_cv, a_v = expected_confounder(f_v, dictionary, params.visual)
    e_cq, a_q = expected_confounder(f_q, dictionary, params.textual)
    fv = fuse(f_v, e_cv, params.visual.w_f)
    fq = fuse(f_q, e_cq, params.textual.w_f)
    return BdaOutput(e_cv, e_cq, fv, fq, concat(fv, fq), {"visual": a_v, "textual": a_q})


def interventional_logits(f_v, f_q, dictionary, params, head):
    """Logits of the adjusted prediction and the intermediate BDA tensors."""
    out = adjust(f_v, f_q, dictionary, params)
    return head(out.x), out


def observational_logits(f_v, f_q, head):
    return head(concat(f_v, f_q))


def consistency_loss(p_do, p_obs):
    """Batch-mean KL(softmax(p_do) || softmax(p_obs)); p_do is treated as a constant teacher."""
    if p_do.shape != p_obs.shape:
        raise DimensionError(f"logit shapes differ: {p_do.shape} vs {p_obs.shape}")
    return kl_from_logits(p_do.detach(), p_obs)


def block_identity_fusion(d, d_k=None):
    """W_f that passes the feature through and ignores the expected confounder."""
    d_k = d if d_k is None else d_k
    return np.vstack([np.eye(d), np.zeros((d_k, d))])
