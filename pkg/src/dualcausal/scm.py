"""Synthetic multimodal classification data from a confounded structural model.

Each sample has a content class that fixes the answer, an observable visual
confounder state ``cv``, an observable textual confounder state ``cq`` and a
latent Gaussian confounder ``c_latent``.  Features are built additively::

    v = content_v[answer] + confound_v[cv] + latent_strength * L_v @ c_latent + noise
    q = content_q[answer] + confound_q[cq] + latent_strength * L_q @ c_latent + noise

On the training split ``cv`` and ``cq`` are drawn from an answer-dependent
prior that puts extra mass ``bias_strength`` on a spurious state per answer.
``test_iid`` reuses that prior; ``test_ood`` moves each answer's spurious
state by a fixed cyclic derangement, so the shortcut points the wrong way.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

GENERATOR_VERSION = "scm-1"
SPLITS = ("train", "test_iid", "test_ood")
_SPLIT_IDS = {"train": 1, "test_iid": 2, "test_ood": 3}
CLOSED_ANSWERS = (0, 1)


@dataclass(frozen=True)
class ScmConfig:
    d_v: int = 32
    d_q: int = 32
    n_answers: int = 8
    n_cv: int = 6
    n_cq: int = 6
    d_c: int = 4
    bias_strength: float = 0.8
    latent_strength: float = 1.0
    noise_sigma: float = 0.1
    n_train: int = 8000
    n_test: int = 2000
    seed: int = 0
    content_scale: float = 0.5
    confounder_scale: float = 1.0

    def __post_init__(self):
        for name in ("d_v", "d_q", "n_answers", "n_cv", "n_cq", "d_c"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("n_train", "n_test"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ConfigError("bias_strength must lie in [0, 1]")
        if self.latent_strength < 0:
            raise ConfigError("latent_strength must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.content_scale < 0 or self.confounder_scale < 0:
            raise ConfigError("content_scale and confounder_scale must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown ScmConfig key: {key!r}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ScmSample:
    v: list
    q: list
    answer: int
    cv_state: int
    cq_state: int
    c_latent: list
    split_tag: str

    def to_json(self):
        return json.dumps(dataclasses.asdict(self))


@dataclass
class Dataset:
    """Column-oriented split.  ``c_latent`` is for auditing only."""

    v: np.ndarray
    q: np.ndarray
    answer: np.ndarray
    cv_state: np.ndarray | None
    cq_state: np.ndarray | None
    c_latent: np.ndarray | None
    split_tag: str
    config: ScmConfig = field(default_factory=ScmConfig)

    def __len__(self):
        return len(self.answer)

    def model_batch(self, idx=None):
        """(v, q, answer) for the given indices; never exposes confounders."""
        if idx is None:
            return self.v, self.q, self.answer
        return self.v[idx], self.q[idx], self.answer[idx]

    def sample(self, i):
        return ScmSample(
            v=self.v[i].tolist(), q=self.q[i].tolist(), answer=int(self.answer[i]),
            cv_state=int(self.cv_state[i]), cq_state=int(self.cq_state[i]),
            c_latent=self.c_latent[i].tolist(), split_tag=self.split_tag,
        )


@dataclass(frozen=True)
class ScmWorld:
    """Fixed mechanism matrices shared by every split of one config.

    Columns of ``content_*`` are indexed by answer, ``confound_*`` by
    confounder state; ``latent_*`` map the latent vector into features.
    """

    content_v: np.ndarray
    content_q: np.ndarray
    confound_v: np.ndarray
    confound_q: np.ndarray
    latent_v: np.ndarray
    latent_q: np.ndarray
    spurious_v: np.ndarray
    spurious_q: np.ndarray


def _unit_columns(rng, d, k, scale):
    m = rng.standard_normal((d, k))
    return scale * m / np.linalg.norm(m, axis=0, keepdims=True)


def spurious_states(n_answers, n_states):
    """Train-time spurious state per answer (answers wrap modulo ``n_states``)."""
    return np.arange(n_answers) % n_states


def derange(states, n_states):
    """Fixed derangement used for the OOD split: shift every state by one."""
    if n_states < 2:
        return states.copy()
    return (states + 1) % n_states


def build_world(config):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    c = config
    content_v = _unit_columns(rng, c.d_v, c.n_answers, c.content_scale)
    confound_v = _unit_columns(rng, c.d_v, c.n_cv, c.confounder_scale)
    latent_v = _unit_columns(rng, c.d_v, c.d_c, 1.0)
    content_q = _unit_columns(rng, c.d_q, c.n_answers, c.content_scale)
    confound_q = _unit_columns(rng, c.d_q, c.n_cq, c.confounder_scale)
    latent_q = _unit_columns(rng, c.d_q, c.d_c, 1.0)
    return ScmWorld(
        content_v, content_q, confound_v, confound_q, latent_v, latent_q,
        spurious_states(c.n_answers, c.n_cv), spurious_states(c.n_answers, c.n_cq),
    )


def confounder_prior(config, split, modality="v"):
    """P(state | answer) as an (n_answers, n_states) matrix for a split."""
    n = config.n_cv if modality == "v" else config.n_cq
    states = spurious_states(config.n_answers, n)
    if split == "test_ood":
        states = derange(states, n)
    b = config.bias_strength
    prior = np.full((config.n_answers, n), (1.0 - b) / n)
    prior[np.arange(config.n_answers), states] += b
    return prior


def _draw_split(config, world, split, n):
    c = config
    prior_v = confounder_prior(c, split, "v")
    prior_q = confounder_prior(c, split, "q")
    answer = np.empty(n, dtype=np.int64)
    cv = np.empty(n, dtype=np.int64)
    cq = np.empty(n, dtype=np.int64)
    lat = np.empty((n, c.d_c))
    nv = np.empty((n, c.d_v))
    nq = np.empty((n, c.d_q))
    sid = _SPLIT_IDS[split]
    for i in range(n):
        # one independent stream per sample: order-free and worker-count free
        rng = np.random.default_rng(np.random.SeedSequence(c.seed, spawn_key=(sid, i)))
        a = int(rng.integers(c.n_answers))
        answer[i] = a
        cv[i] = rng.choice(c.n_cv, p=prior_v[a])
        cq[i] = rng.choice(c.n_cq, p=prior_q[a])
        lat[i] = rng.standard_normal(c.d_c)
        nv[i] = rng.standard_normal(c.d_v)
        nq[i] = rng.standard_normal(c.d_q)
    s = c.latent_strength
    v = world.content_v.T[answer] + world.confound_v.T[cv] + s * lat @ world.latent_v.T + c.noise_sigma * nv
    q = world.content_q.T[answer] + world.confound_q.T[cq] + s * lat @ world.latent_q.T + c.noise_sigma * nq
    return Dataset(v, q, answer, cv, cq, lat, split, c)


def generate(config):
    """Draw the (train, test_iid, test_ood) splits for ``config``."""
    if config.bias_strength > 0 and (config.n_answers > config.n_cv or config.n_answers > config.n_cq):
        warnings.warn(
            "more answers than confounder states: spurious states are assigned modulo the state count",
            stacklevel=2,
        )
    world = build_world(config)
    return (
        _draw_split(config, world, "train", config.n_train),
        _draw_split(config, world, "test_iid", config.n_test),
        _draw_split(config, world, "test_ood", config.n_test),
    )


def textual_concepts(config, train):
    """Concept vectors for the textual dictionary and their training frequencies.

    Rows are the textual confounder-state embeddings followed by the
    answer-word (content) embeddings.
    """
    world = build_world(config)
    feats = np.vstack([world.confound_q.T, world.content_q.T])
    freqs = np.concatenate([
        np.bincount(train.cq_state, minlength=config.n_cq),
        np.bincount(train.answer, minlength=config.n_answers),
    ])
    return feats, freqs


# auditing -------------------------------------------------------------
def plugin_mi(x, y, nx=None, ny=None):
    """Plug-in mutual information (nats) from paired integer samples."""
    table = contingency(x, y, nx, ny)
    return mi_from_table(table)


def contingency(x, y, nx=None, ny=None):
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    nx = int(x.max()) + 1 if nx is None else nx
    ny = int(y.max()) + 1 if ny is None else ny
    table = np.zeros((nx, ny), dtype=np.int64)
    np.add.at(table, (x, y), 1)
    return table


def mi_from_table(table):
    p = table / table.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz])))


@dataclass
class BiasReport:
    table_cv: np.ndarray
    table_cq: np.ndarray
    mi_cv: float
    mi_cq: float
    prior_tv: float | None

    def summary(self):
        out = {"mi_cv_answer": round(self.mi_cv, 6), "mi_cq_answer": round(self.mi_cq, 6)}
        if self.prior_tv is not None:
            out["prior_tv"] = round(self.prior_tv, 6)
        return out


def _joint(ds, states, n_states):
    t = contingency(states, ds.answer, n_states, ds.config.n_answers)
    return t / t.sum()


def audit_bias(dataset, reference=None):
    """Contingency tables and plug-in MI of each confounder with the answer.

    If ``reference`` is given, ``prior_tv`` is the total-variation distance
    between the two splits' empirical P(cv, cq | answer) priors, averaged
    over answers and modalities.
    """
    if dataset.cv_state is None or dataset.cq_state is None:
        raise ContractError("dataset lacks confounder audit fields")
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    c = dataset.config
    tv_ = contingency(dataset.cv_state, dataset.answer, c.n_cv, c.n_answers)
    tq_ = contingency(dataset.cq_state, dataset.answer, c.n_cq, c.n_answers)
    tv = None
    if reference is not None:
        if reference.cv_state is None:
            raise ContractError("reference dataset lacks confounder audit fields")
        parts = []
        for attr, n in (("cv_state", c.n_cv), ("cq_state", c.n_cq)):
            a = _conditional(getattr(dataset, attr), dataset.answer, n, c.n_answers)
            b = _conditional(getattr(reference, attr), reference.answer, n, c.n_answers)
            parts.append(0.5 * np.abs(a - b).sum(axis=1).mean())
        tv = float(np.mean(parts))
    return BiasReport(tv_, tq_, mi_from_table(tv_), mi_from_table(tq_), tv)


def _conditional(states, answer, n_states, n_answers):
    t = contingency(answer, states, n_answers, n_states).astype(float)
    return t / np.maximum(t.sum(axis=1, keepdims=True), 1)


def prior_tv(config, split_a="train", split_b="test_ood"):
    """TV distance between the generating priors of two splits (mean over answers and modalities)."""
    parts = []
    for m in ("v", "q"):
        a = confounder_prior(config, split_a, m)
        b = confounder_prior(config, split_b, m)
        parts.append(0.5 * np.abs(a - b).sum(axis=1).mean())
    return float(np.mean(parts))


# files ------------------------------------------------------------------
def save_dataset(dataset, path):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            fh.write(dataset.sample(i).to_json())
            fh.write("\n")


def load_dataset(path, config):
    recs = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    if not recs:
        c = config
        return Dataset(np.zeros((0, c.d_v)), np.zeros((0, c.d_q)), np.zeros(0, dtype=np.int64),
                       np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                       np.zeros((0, c.d_c)), Path(path).stem, c)
    audit = all("cv_state" in r for r in recs)
    return Dataset(
        v=np.array([r["v"] for r in recs], dtype=np.float64),
        q=np.array([r["q"] for r in recs], dtype=np.float64),
        answer=np.array([r["answer"] for r in recs], dtype=np.int64),
        cv_state=np.array([r["cv_state"] for r in recs], dtype=np.int64) if audit else None,
        cq_state=np.array([r["cq_state"] for r in recs], dtype=np.int64) if audit else None,
        c_latent=np.array([r["c_latent"] for r in recs], dtype=np.float64) if audit else None,
        split_tag=recs[0]["split_tag"],
        config=config,
    )


def write_manifest(config, out_dir):
    manifest = {"generator_version": GENERATOR_VERSION, "config": config.to_dict(),
                "splits": {s: f"{s}.jsonl" for s in SPLITS}}
    Path(out_dir, "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def save_splits(splits, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ds in splits:
        save_dataset(ds, out_dir / f"{ds.split_tag}.jsonl")
    write_manifest(splits[0].config, out_dir)


def load_splits(data_dir):
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    if manifest.get("generator_version") != GENERATOR_VERSION:
        raise ContractError(f"unsupported generator version {manifest.get('generator_version')!r}")
    config = ScmConfig.from_dict(manifest["config"])
    return tuple(load_dataset(data_dir / manifest["splits"][s], config) for s in SPLITS)
