"""Instrumental-variable branch.

A one-block self-attention encoder reads the two raw modality tokens, two
independent MLP heads split the pooled context into an instrument ``I`` and
a confounder code ``C``, and a three-layer regressor maps ``I`` to the
purified representation ``X'`` consumed by the answer decoder.  Mutual
information terms use diagonal-Gaussian variational conditionals.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .numcore import (
    MLP,
    AdamW,
    Linear,
    Module,
    Tensor,
    clamp,
    concat,
    exp,
    logsumexp_rows,
    matmul,
    mul,
    no_grad,
    reshape,
    softmax_rows,
    take,
    tsum,
)

LOGVAR_RANGE = (-10.0, 10.0)
_LOG_2PI = math.log(2.0 * math.pi)
L_IX_MODES = ("verbatim", "standard_infonce")


def stack_tokens(f_v, f_q):
    """(B, d), (B, d) -> (B, 2, d)."""
    if f_v.shape != f_q.shape:
        raise DimensionError(f"modality shapes differ: {f_v.shape} vs {f_q.shape}")
    b, d = f_v.shape
    return reshape(concat(f_v, f_q), (b, 2, d))


class TokenEncoder(Module):
    """Single self-attention block with residual connections and a ReLU feed-forward layer."""

    def __init__(self, d, rng):
        self.d = d
        self.q = Linear(d, d, rng, bias=False, name="enc_o.q")
        self.k = Linear(d, d, rng, bias=False, name="enc_o.k")
        self.v = Linear(d, d, rng, bias=False, name="enc_o.v")
        self.ffn = MLP([d, d, d], rng, name="enc_o.ffn")

    def __call__(self, o):
        b, n, d = o.shape
        flat = reshape(o, (b * n, d))
        q = reshape(self.q(flat), (b, n, 1, d))
        k = reshape(self.k(flat), (b, 1, n, d))
        v = reshape(self.v(flat), (b, 1, n, d))
        scores = reshape(tsum(mul(q, k), axis=3), (b * n, n))
        w = reshape(softmax_rows(scores, scale=1.0 / math.sqrt(d)), (b, n, n, 1))
        h = o + tsum(mul(w, v), axis=2)
        h = reshape(h, (b * n, d))
        h = h + self.ffn(h)
        return tsum(reshape(h, (b, n, d)), axis=1) * (1.0 / n)


class IvParams(Module):
    def __init__(self, d, n_answers, rng, d_i=None):
        d_i = d if d_i is None else d_i
        self.d, self.d_i = d, d_i
        self.enc_o = TokenEncoder(d, rng)
        self.phi_i = MLP([d, d, d_i], rng, name="phi_i")
        self.phi_c = MLP([d, d, d_i], rng, name="phi_c")
        self.r_phi = MLP([d_i, 2 * d, 2 * d, 2 * d], rng, name="r_phi")
        self.decoder = Linear(2 * d, n_answers, rng, name="decoder")


def extract(o, params):
    """Instrument and confounder codes ``(I, C)`` from stacked raw tokens."""
    ctx = params.enc_o(o)
    return params.phi_i(ctx), params.phi_c(ctx)


def regress(i, params):
    """Purified representation X' (width 2d) from the instrument alone."""
    return params.r_phi(i)


class EstimatorHead(Module):
    """Diagonal Gaussian q(y | x) with MLP mean and log-variance."""

    def __init__(self, x_dim, y_dim, rng, hidden=None, role="q"):
        hidden = max(x_dim, y_dim) if hidden is None else hidden
        self.role = role
        self.x_dim, self.y_dim = x_dim, y_dim
        self.mean_net = MLP([x_dim, hidden, y_dim], rng, name=f"{role}.mean")
        self.logvar_net = MLP([x_dim, hidden, y_dim], rng, name=f"{role}.logvar")

    def __call__(self, x):
        return self.mean_net(x), clamp(self.logvar_net(x), *LOGVAR_RANGE)


def log_q(head, y, x):
    """log q(y_b | x_b) for every row b, summed over coordinates."""
    mu, logvar = head(x)
    diff = y - mu
    inv = exp(-logvar)
    per = mul(mul(diff, diff), inv) + logvar + _LOG_2PI
    return tsum(per, axis=1) * -0.5


def pairwise_log_q(head, y, x):
    """(B, B) matrix with entry [i, j] = log q(y_j | x_i)."""
    if y.shape[0] != x.shape[0]:
        raise DimensionError(f"batch sizes differ: {y.shape} vs {x.shape}")
    mu, logvar = head(x)
    inv = exp(-logvar)
    quad = matmul(inv, (y * y).T) - 2.0 * matmul(mul(mu, inv), y.T)
    row = tsum(mul(mul(mu, mu), inv) + logvar, axis=1, keepdims=True) + y.shape[1] * _LOG_2PI
    return (quad + row) * -0.5


def _diag(m):
    n = m.shape[0]
    return take(m, (np.arange(n), np.arange(n)))


def club_upper(head, y, x):
    """(1/B^2) sum_i sum_j [log q(y_i|x_i) - log q(y_j|x_i)]."""
    m = pairwise_log_q(head, y, x)
    return _diag(m).mean() - m.mean()


def infonce_lower(head, x, i, mode="verbatim"):
    """Relevance loss between target ``x`` and instrument ``i`` (to be minimised).

    ``verbatim`` is the negated contrastive double sum.  ``standard_infonce``
    is ``-(mean_i[s_ii - logsumexp_j s_ij] + log B)`` with s_ij = log q(x_j | i_i),
    bounded below by ``-log B``.
    """
    if mode == "verbatim":
        return -club_upper(head, x, i)
    if mode != "standard_infonce":
        raise ConfigError(f"unknown l_ix mode {mode!r}")
    b = x.shape[0]
    if b < 2:
        raise ContractError("standard InfoNCE needs at least two samples for negatives")
    m = pairwise_log_q(head, x, i)
    return -((_diag(m) - logsumexp_rows(m)).mean() + math.log(b))


class EstimatorSet(Module):
    """The three variational heads: q(C|I), q(X|I), q(A|I)."""

    def __init__(self, d_i, d_x, d_a, rng):
        self.q_ci = EstimatorHead(d_i, d_i, rng, role="q_ci")
        self.q_ix = EstimatorHead(d_i, d_x, rng, role="q_ix")
        self.q_ia = EstimatorHead(d_i, d_a, rng, role="q_ia")


def answer_embedding_table(n_answers, d_a, seed):
    """Fixed random unit-norm codes standing in for categorical answers."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    t = rng.standard_normal((n_answers, d_a))
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def embed_answers(table, labels):
    return Tensor(np.asarray(table)[np.asarray(labels, dtype=np.int64)])


def iv_losses(i, c, x, a_emb, heads, mode="verbatim"):
    """(l_ix, l_ic, l_ia) for one batch."""
    l_ix = infonce_lower(heads.q_ix, x, i, mode)
    l_ic = club_upper(heads.q_ci, c, i)
    l_ia = club_upper(heads.q_ia, a_emb, i)
    return l_ix, l_ic, l_ia


def make_estimator_optimizers(heads, lr=1e-3, weight_decay=0.01):
    return {name: AdamW(h.parameters(), lr=lr, weight_decay=weight_decay)
            for name, h in (("q_ci", heads.q_ci), ("q_ix", heads.q_ix), ("q_ia", heads.q_ia))}


def estimator_step(heads, optimizers, i, c, x, a_emb):
    """One maximum-likelihood step per head on matched pairs.

    Inputs are detached first, so main-model parameters never receive
    gradient.  Returns the pre-step mean log-likelihood per head.
    """
    i = Tensor(i.data if isinstance(i, Tensor) else i)
    targets = {"q_ci": c, "q_ix": x, "q_ia": a_emb}
    out = {}
    for name, y in targets.items():
        y = Tensor(y.data if isinstance(y, Tensor) else y)
        head = getattr(heads, name)
        opt = optimizers[name]
        opt.zero_grad()
        ll = log_q(head, y, i).mean()
        (-ll).backward()
        opt.step()
        out[name] = ll.item()
    return out


def gaussian_mi(rho):
    """Analytic MI (nats) of a standard bivariate Gaussian with correlation ``rho``."""
    return 0.5 * math.log(1.0 / (1.0 - rho * rho))


def correlated_pairs(rng, n, rho):
    """``n`` draws of 1-D (x, y) with unit variances and correlation ``rho``."""
    x = rng.standard_normal((n, 1))
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal((n, 1))
    return x, y


def fit_club_gaussian(rho, batch=512, steps=2000, lr=1e-2, hidden=16, seed=0, eval_batches=10):
    """Fit q(y|x) by maximum likelihood on fresh Gaussian batches, then estimate CLUB.

    Returns ``(estimate, analytic)``; the estimate averages ``eval_batches``
    held-out batches.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(21,)))
    head = EstimatorHead(1, 1, rng, hidden=hidden, role="selftest")
    opt = AdamW(head.parameters(), lr=lr, weight_decay=0.0)
    for _ in range(steps):
        x, y = correlated_pairs(rng, batch, rho)
        opt.zero_grad()
        (-log_q(head, Tensor(y), Tensor(x)).mean()).backward()
        opt.step()
    with no_grad():
        est = [club_upper(head, Tensor(y), Tensor(x)).item()
               for x, y in (correlated_pairs(rng, batch, rho) for _ in range(eval_batches))]
    return float(np.mean(est)), gaussian_mi(rho)
