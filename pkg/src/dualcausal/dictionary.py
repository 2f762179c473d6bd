"""Confounder dictionaries: frozen textual, momentum-updated visual, and their joint view."""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

DEFAULT_KV = 64
DEFAULT_KT = 16
DEFAULT_MOMENTUM = 0.99


class ConfounderDictionary:
    """A (K, d) matrix of confounder prototypes.

    ``frozen`` dictionaries reject updates.  Entries are plain float64 rows;
    they are never optimizer parameters.
    """

    def __init__(self, entries, frozen=False, momentum=DEFAULT_MOMENTUM, usage_counts=None):
        entries = np.array(entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 1:
            raise ConfigError(f"dictionary entries must be a non-empty (K, d) matrix, got {entries.shape}")
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {momentum}")
        self._entries = entries
        self.frozen = bool(frozen)
        self.momentum = float(momentum)
        self.usage_counts = (np.zeros(len(entries), dtype=np.int64) if usage_counts is None
                             else np.array(usage_counts, dtype=np.int64))
        if frozen:
            self._entries.setflags(write=False)

    @property
    def entries(self):
        return self._entries

    @property
    def shape(self):
        return self._entries.shape

    def __len__(self):
        return self._entries.shape[0]

    def to_dict(self):
        return {
            "shape": list(self.shape),
            "frozen": self.frozen,
            "momentum": self.momentum,
            "usage_counts": self.usage_counts.tolist(),
            "entries": self._entries.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        entries = np.array(d["entries"], dtype=np.float64).reshape(d["shape"])
        return cls(entries, frozen=d["frozen"], momentum=d["momentum"], usage_counts=d["usage_counts"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


class JointDictionary:
    """Row-concatenated view ``[visual; textual]`` that reads through to both parts."""

    def __init__(self, visual, textual):
        if visual.shape[1] != textual.shape[1]:
            raise ConfigError(f"dictionary widths differ: {visual.shape[1]} vs {textual.shape[1]}")
        self.visual = visual
        self.textual = textual

    @property
    def entries(self):
        return np.vstack([self.visual.entries, self.textual.entries])

    @property
    def shape(self):
        return (len(self.visual) + len(self.textual), self.visual.shape[1])

    def __len__(self):
        return self.shape[0]


def init_textual(concept_features, frequencies, k_t):
    """Keep the ``k_t`` most frequent concepts, most frequent first.

    Ties go to the lower index.  The result is frozen.
    """
    feats = np.asarray(concept_features, dtype=np.float64)
    freqs = np.asarray(frequencies)
    m = feats.shape[0]
    if len(freqs) != m:
        raise ConfigError(f"{len(freqs)} frequencies for {m} concepts")
    if not 1 <= k_t <= m:
        raise ConfigError(f"k_t={k_t} must lie in [1, {m}]")
    order = np.lexsort((np.arange(m), -freqs))[:k_t]
    return ConfounderDictionary(feats[order], frozen=True)


def pca_basis(features, n_components):
    """Top principal directions as columns, sign-fixed so each column's largest |coordinate| is positive."""
    x = features - features.mean(axis=0)
    cov = x.T @ x / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1][:n_components]
    basis = vecs[:, order]
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def kmeans_pp_seeds(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def lloyd(x, centers, max_iter=100):
    """Lloyd iterations until the assignment stops changing.

    An emptied cluster is re-seeded at the point farthest from its own center.
    """
    centers = centers.copy()
    assign = None
    for _ in range(max_iter):
        d2 = (x * x).sum(axis=1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(axis=1)[None, :]
        np.maximum(d2, 0.0, out=d2)
        new = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(len(centers)):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(len(x)), assign]))
                centers[j] = x[far]
                assign[far] = j
    return centers, assign


def init_visual_kmeanspp(features, k_v=DEFAULT_KV, pca_dim=None, seed=0, momentum=DEFAULT_MOMENTUM):
    """Cluster PCA-projected features with K-means++ seeding and Lloyd refinement.

    Centers are mapped back to feature space through the transposed basis
    (plus the feature mean).
    """
    feats = np.asarray(features, dtype=np.float64)
    m, d = feats.shape
    if k_v > m:
        raise ConfigError(f"k_v={k_v} exceeds the number of features {m}")
    if k_v < 1:
        raise ConfigError("k_v must be >= 1")
    pca_dim = min(d, 16) if pca_dim is None else pca_dim
    if not 1 <= pca_dim <= d:
        raise ConfigError(f"pca_dim={pca_dim} must lie in [1, {d}]")
    mu = feats.mean(axis=0)
    basis = pca_basis(feats, pca_dim)
    z = (feats - mu) @ basis
    rng = np.random.default_rng(seed)
    centers, _ = lloyd(z, kmeans_pp_seeds(z, k_v, rng))
    entries = centers @ basis.T + mu
    zero = ~np.any(entries, axis=1)
    if zero.any():
        # a zero prototype has no cosine direction; nudge it onto the mean direction
        entries[zero] = mu + 1e-8 if np.any(mu) else 1e-8
    return ConfounderDictionary(entries, frozen=False, momentum=momentum)


def _nearest(entries, feats):
    en = np.linalg.norm(entries, axis=1)
    fn = np.linalg.norm(feats, axis=1)
    sim = (feats @ entries.T) / np.maximum(fn[:, None] * en[None, :], 1e-300)
    return np.argmax(sim, axis=1)


def update_momentum(dictionary, feature):
    """Move the most cosine-similar entry toward ``feature``: c <- mu*c + (1-mu)*v.

    Returns the updated index, or ``None`` for a zero feature (skipped).
    """
    if dictionary.frozen:
        raise ContractError("cannot update a frozen dictionary")
    feature = np.asarray(feature, dtype=np.float64)
    if not np.any(feature):
        warnings.warn("zero feature has no cosine similarity; update skipped", stacklevel=2)
        return None
    k = int(_nearest(dictionary.entries, feature[None, :])[0])
    mu = dictionary.momentum
    dictionary.entries[k] = mu * dictionary.entries[k] + (1.0 - mu) * feature
    dictionary.usage_counts[k] += 1
    return k


def update_momentum_batch(dictionary, features):
    """Route every sample to its nearest entry, then apply one update per
    touched entry with the mean of the samples routed to it."""
    if dictionary.frozen:
        raise ContractError("cannot update a frozen dictionary")
    feats = np.asarray(features, dtype=np.float64)
    feats = feats[np.any(feats, axis=1)]
    if len(feats) == 0:
        return []
    route = _nearest(dictionary.entries, feats)
    mu = dictionary.momentum
    touched = np.unique(route)
    for k in touched:
        target = feats[route == k].mean(axis=0)
        dictionary.entries[k] = mu * dictionary.entries[k] + (1.0 - mu) * target
        dictionary.usage_counts[k] += 1
    return touched.tolist()


def build_joint(d_v, d_t):
    return JointDictionary(d_v, d_t)
