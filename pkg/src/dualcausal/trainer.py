"""Model assembly, joint objective, and the alternating training loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bda, dictionary, iv
from .errors import ConfigError, DivergenceError, NumericError, VersionError
from .numcore import AdamW, Module, Tensor, concat, cross_entropy, no_grad
from .scm import textual_concepts

CHECKPOINT_VERSION = "dci-checkpoint-1"
ABLATIONS = ("baseline", "bda_only", "iv_only", "full")
IV_SOURCES = ("raw", "adjusted")
LOG_COLUMNS = ("step", "ce", "l_ix", "l_ic", "l_ia", "l_bd", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.05
    lambda4: float = 0.5
    epochs: int = 50
    seed: int = 0
    estimator_lr: float = 1e-3
    estimator_steps_per_main_step: int = 1
    l_ix_mode: str = "verbatim"
    ablation: str = "full"
    k_v: int = dictionary.DEFAULT_KV
    k_t: int = dictionary.DEFAULT_KT
    momentum: float = dictionary.DEFAULT_MOMENTUM
    pca_dim: int | None = None
    d_a: int = 16
    log_every: int = 1
    ce_on_bda: bool = False
    iv_source: str = "raw"

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.warmup_fraction <= 0.5:
            raise ConfigError("warmup_fraction must lie in [0, 0.5]")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.iv_source not in IV_SOURCES:
            raise ConfigError(f"iv_source must be one of {IV_SOURCES}, got {self.iv_source!r}")
        if self.l_ix_mode not in iv.L_IX_MODES:
            raise ConfigError(f"l_ix_mode must be one of {iv.L_IX_MODES}, got {self.l_ix_mode!r}")
        for name in ("batch_size", "epochs", "k_v", "k_t", "d_a", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.estimator_steps_per_main_step < 0:
            raise ConfigError("estimator_steps_per_main_step must be >= 0")
        if self.learning_rate <= 0 or self.estimator_lr <= 0:
            raise ConfigError("learning rates must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown TrainConfig key: {key!r}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class LossBreakdown:
    step: int
    ce: float
    l_ix: float
    l_ic: float
    l_ia: float
    l_bd: float
    total: float
    lr: float = 0.0

    def row(self):
        return [self.step, self.ce, self.l_ix, self.l_ic, self.l_ia, self.l_bd, self.total, self.lr]


def loss_weights(config):
    """Effective (ce, l_ix, l_ic, l_ia, l_bd) weights after the ablation switch."""
    w_iv = config.ablation in ("iv_only", "full")
    w_bd = config.ablation in ("bda_only", "full")
    return (
        1.0,
        config.lambda1 if w_iv else 0.0,
        config.lambda2 if w_iv else 0.0,
        config.lambda3 if w_iv else 0.0,
        config.lambda4 if w_bd else 0.0,
    )


def total_loss(components, config):
    """ce + l1*l_ix + l2*l_ic + l3*l_ia + l4*l_bd with ablated branches weighted 0.

    ``components`` maps the five names to scalar tensors or floats.
    """
    names = ("ce", "l_ix", "l_ic", "l_ia", "l_bd")
    total = None
    for name, w in zip(names, loss_weights(config)):
        comp = components.get(name, 0.0)
        val = comp.item() if isinstance(comp, Tensor) else float(comp)
        if not math.isfinite(val):
            raise NumericError(f"non-finite loss component {name}")
        if w == 0.0 and name != "ce":
            continue
        term = comp * w if w != 1.0 else comp
        total = term if total is None else total + term
    return total


def lr_schedule(step, total_steps, config):
    """Linear warm-up from 0 to the base rate, then constant."""
    warm = config.warmup_fraction * total_steps
    if warm <= 0 or step >= warm:
        return config.learning_rate
    return config.learning_rate * step / warm


class DCIModel(Module):
    """BDA branch, shared head g, IV branch and decoder for one data shape.

    Dictionaries and the answer-code table are state, not parameters.
    """

    def __init__(self, d, n_answers, config, rng, d_visual=None, d_textual=None):
        self.d = d
        self.n_answers = n_answers
        self.config = config
        self.bda = bda.BdaParams(d, rng)
        self.head = bda.prediction_head(d, n_answers, rng)
        self.iv = iv.IvParams(d, n_answers, rng)
        self.d_visual = d_visual
        self.d_textual = d_textual
        self.answer_codes = iv.answer_embedding_table(n_answers, config.d_a, config.seed)

    @property
    def joint(self):
        return dictionary.build_joint(self.d_visual, self.d_textual)

    def forward(self, v, q, mode=None):
        """All tensors the requested ablation mode needs, keyed by name."""
        mode = self.config.ablation if mode is None else mode
        f_v, f_q = Tensor(v), Tensor(q)
        out = {}
        if mode in ("baseline", "bda_only", "full"):
            out["obs"] = bda.observational_logits(f_v, f_q, self.head)
        if mode in ("bda_only", "full"):
            out["do"], out["bda"] = bda.interventional_logits(f_v, f_q, self.joint, self.bda, self.head)
        if mode in ("iv_only", "full"):
            out["x"] = out["bda"].x if mode == "full" else concat(f_v, f_q)
            if mode == "full" and self.config.iv_source == "adjusted":
                tokens = iv.stack_tokens(out["bda"].f_v_adj, out["bda"].f_q_adj)
            else:
                tokens = iv.stack_tokens(f_v, f_q)
            out["i"], out["c"] = iv.extract(tokens, self.iv)
            out["x_prime"] = iv.regress(out["i"], self.iv)
            out["dec"] = self.iv.decoder(out["x_prime"])
        return out

    def logits(self, v, q, mode=None):
        """Prediction path used for evaluation in each mode."""
        mode = self.config.ablation if mode is None else mode
        with no_grad():
            out = self.forward(v, q, mode)
        key = {"baseline": "obs", "bda_only": "do", "iv_only": "dec", "full": "dec"}[mode]
        return out[key].data

    def predict(self, v, q, mode=None):
        return np.argmax(self.logits(v, q, mode), axis=1)


def build_model(train, config, scm_config=None):
    """Create a model for ``train`` and initialise its dictionaries."""
    scm_config = train.config if scm_config is None else scm_config
    if train.v.shape[1] != train.q.shape[1]:
        raise ConfigError("visual and textual feature widths must match")
    d = train.v.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    feats, freqs = textual_concepts(scm_config, train)
    d_t = dictionary.init_textual(feats, freqs, min(config.k_t, len(feats)))
    d_v = dictionary.init_visual_kmeanspp(
        train.v, k_v=min(config.k_v, len(train)), pca_dim=config.pca_dim,
        seed=np.random.SeedSequence(config.seed, spawn_key=(2,)), momentum=config.momentum,
    )
    return DCIModel(d, scm_config.n_answers, config, rng, d_v, d_t)


def compute_losses(model, v, q, labels, heads=None, teacher=None):
    """Forward pass and every loss component for the model's ablation mode.

    ``teacher`` optionally pins the consistency target to fixed logits; the
    default uses the detached interventional logits of this pass, which has
    the same gradient.
    """
    cfg = model.config
    mode = cfg.ablation
    out = model.forward(v, q, mode)
    zero = Tensor(0.0)
    comps = {"ce": None, "l_ix": zero, "l_ic": zero, "l_ia": zero, "l_bd": zero}
    if mode == "baseline":
        comps["ce"] = cross_entropy(out["obs"], labels)
    elif mode == "bda_only":
        comps["ce"] = cross_entropy(out["do"], labels)
    else:
        comps["ce"] = cross_entropy(out["dec"], labels)
        if mode == "full" and cfg.ce_on_bda:
            comps["ce"] = comps["ce"] + cross_entropy(out["do"], labels)
    if mode in ("bda_only", "full"):
        target = out["do"] if teacher is None else Tensor(teacher)
        comps["l_bd"] = bda.consistency_loss(target, out["obs"])
    if mode in ("iv_only", "full"):
        a_emb = iv.embed_answers(model.answer_codes, labels)
        comps["l_ix"], comps["l_ic"], comps["l_ia"] = iv.iv_losses(
            out["i"], out["c"], out["x"], a_emb, heads, cfg.l_ix_mode)
    return comps, out


@dataclass
class TrainResult:
    model: DCIModel
    estimators: iv.EstimatorSet
    log: list
    metrics: dict
    checkpoint: dict
    optimizer: AdamW = None
    attention_row_error: float = 0.0
    epoch_log: list = field(default_factory=list)


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def train(train_set, config, eval_sets=None, callback=None):
    """Alternating optimisation of the estimators and the main objective.

    Per step: estimator fit on detached activations, main forward/backward
    and AdamW update at the scheduled rate, then the momentum update of the
    visual dictionary.  Raises :class:`DivergenceError` carrying the last
    finite checkpoint if the total loss stops being finite.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    model = build_model(train_set, config)
    d_x = 2 * model.d
    est_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(3,)))
    heads = iv.EstimatorSet(model.iv.d_i, d_x, config.d_a, est_rng)
    uses_iv = config.ablation in ("iv_only", "full")
    uses_bda = config.ablation in ("bda_only", "full")
    params = _active_parameters(model, config.ablation)
    opt = AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    est_opts = iv.make_estimator_optimizers(heads, config.estimator_lr, config.weight_decay)

    shuffle = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(4,)))
    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    log, epoch_log = [], []
    worst_row_error = 0.0
    step = 0
    last_good = None
    for epoch in range(config.epochs):
        epoch_rows = []
        for idx in _batches(n, config.batch_size, shuffle):
            v, q, labels = train_set.model_batch(idx)
            if uses_iv:
                with no_grad():
                    pre = model.forward(v, q)
                    a_emb = model.answer_codes[labels]
                for _ in range(config.estimator_steps_per_main_step):
                    iv.estimator_step(heads, est_opts, pre["i"], pre["c"], pre["x"], a_emb)
            lr = lr_schedule(step + 1, total_steps, config)
            opt.zero_grad()
            heads.zero_grad()
            try:
                comps, out = compute_losses(model, v, q, labels, heads)
                values = {k: t.item() for k, t in comps.items()}
                total = total_loss(comps, config)
                tval = total.item()
                if not math.isfinite(tval):
                    raise NumericError("non-finite total loss")
            except NumericError as err:
                raise DivergenceError(f"training diverged at step {step}: {err}",
                                      checkpoint=last_good, step=step) from err
            if uses_bda:
                for a in out["bda"].attention_weights.values():
                    worst_row_error = max(worst_row_error, float(np.max(np.abs(a.data.sum(axis=1) - 1.0))))
            total.backward()
            opt.step(lr)
            if uses_bda:
                dictionary.update_momentum_batch(model.d_visual, v)
            row = LossBreakdown(step, values["ce"], values["l_ix"], values["l_ic"], values["l_ia"],
                                values["l_bd"], tval, lr)
            epoch_rows.append(row)
            if step % config.log_every == 0:
                log.append(row)
            step += 1
            if callback is not None:
                callback(step, model)
        last_good = None if epoch == config.epochs - 1 else make_checkpoint(model, heads, opt, step)
        epoch_log.append(LossBreakdown(
            step, *(float(np.mean([getattr(r, k) for r in epoch_rows])) for k in LOG_COLUMNS[1:7]), lr))

    metrics = {"train_accuracy": accuracy(model, train_set)}
    for ds in eval_sets or ():
        metrics[f"{ds.split_tag}_accuracy"] = accuracy(model, ds)
    ckpt = make_checkpoint(model, heads, opt, step)
    ckpt["metrics"] = metrics
    return TrainResult(model, heads, log, metrics, ckpt, opt, worst_row_error, epoch_log)


def _active_parameters(model, mode):
    """Parameters a mode can update; others stay at their initial values."""
    groups = {
        "baseline": [model.head],
        "bda_only": [model.head, model.bda],
        "iv_only": [model.iv],
        "full": [model.head, model.bda, model.iv],
    }[mode]
    out = []
    for g in groups:
        out.extend(g.parameters())
    return out


def accuracy(model, dataset, mode=None):
    if len(dataset) == 0:
        return float("nan")
    v, q, y = dataset.model_batch()
    return float(np.mean(model.predict(v, q, mode) == y))


# checkpoints ------------------------------------------------------------
def _arr(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _unarr(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def make_checkpoint(model, heads, opt, step):
    return {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "config": model.config.to_dict(),
        "model_shape": {"d": model.d, "n_answers": model.n_answers},
        "params": {k: _arr(v) for k, v in model.state_dict().items()},
        "estimators": {k: _arr(v) for k, v in heads.state_dict().items()},
        "dictionaries": {"visual": model.d_visual.to_dict(), "textual": model.d_textual.to_dict()},
        "optimizer": {"t": opt.t, "m": [_arr(a) for a in opt.m], "v": [_arr(a) for a in opt.v]},
        "answer_codes": _arr(model.answer_codes),
    }


def save_checkpoint(ckpt, path):
    Path(path).write_text(json.dumps(ckpt, sort_keys=True))


def load_checkpoint(path_or_dict):
    """Rebuild ``(model, estimators, checkpoint)``."""
    ckpt = path_or_dict if isinstance(path_or_dict, dict) else json.loads(Path(path_or_dict).read_text())
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {ckpt.get('format_version')!r}")
    config = TrainConfig.from_dict(ckpt["config"])
    shape = ckpt["model_shape"]
    rng = np.random.default_rng(0)
    model = DCIModel(shape["d"], shape["n_answers"], config, rng,
                     dictionary.ConfounderDictionary.from_dict(ckpt["dictionaries"]["visual"]),
                     dictionary.ConfounderDictionary.from_dict(ckpt["dictionaries"]["textual"]))
    model.load_state_dict({k: _unarr(v) for k, v in ckpt["params"].items()})
    model.answer_codes = _unarr(ckpt["answer_codes"])
    heads = iv.EstimatorSet(model.iv.d_i, 2 * model.d, config.d_a, rng)
    heads.load_state_dict({k: _unarr(v) for k, v in ckpt["estimators"].items()})
    return model, heads, ckpt


def log_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r.step] + [repr(float(x)) for x in r.row()[1:]])
    return buf.getvalue()

