"""Command-line entry points: data generation, training, evaluation and reports.

Every command is deterministic given its inputs and seed; emitted files carry
no timestamps.  Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import iv, trainer
from .errors import ConfigError, ContractError, DivergenceError, VersionError
from .numcore import Tensor, grad_check, no_grad, numeric_grad
from .numcore import tensor as ops
from .scm import CLOSED_ANSWERS, ScmConfig, audit_bias, generate, load_splits, save_splits

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE = 0, 2, 3, 4
SPLIT_NAMES = ("train", "test_iid", "test_ood")
ABLATION_COLUMNS = ("mode", "seed") + tuple(
    f"{s}_{k}" for s in SPLIT_NAMES for k in ("open", "closed", "overall")) + ("ood_gap",)
SWEEP_COLUMNS = ("k", "mode", "seed", "test_ood_accuracy")


# reports ----------------------------------------------------------------
def _r4(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else round(float(x), 4)


@dataclass
class EvalReport:
    """Split accuracies with the open/closed/overall breakdown and the OOD gap."""

    mode: str
    seed: int
    accuracy: dict
    breakdown: dict
    config: dict = field(default_factory=dict)

    @property
    def ood_gap(self):
        iid, ood = self.accuracy.get("test_iid"), self.accuracy.get("test_ood")
        return None if iid is None or ood is None else _r4(iid - ood)

    def to_dict(self):
        return {"mode": self.mode, "seed": self.seed, "accuracy": self.accuracy,
                "breakdown": self.breakdown, "ood_gap": self.ood_gap, "config": self.config}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def row(self):
        cells = [self.mode, self.seed]
        for s in SPLIT_NAMES:
            b = self.breakdown.get(s, {})
            cells += [b.get("open"), b.get("closed"), b.get("overall")]
        return cells + [self.ood_gap]


def split_breakdown(pred, answer):
    """Open / closed / overall accuracy; closed means an answer in ``CLOSED_ANSWERS``."""
    closed = np.isin(answer, CLOSED_ANSWERS)
    hit = pred == answer

    def acc(mask):
        return _r4(hit[mask].mean()) if mask.any() else None

    return {"open": acc(~closed), "closed": acc(closed), "overall": acc(np.ones_like(closed))}


def evaluate(model, splits, seed=0, config=None):
    """EvalReport for ``model`` on each split, using its mode's prediction path."""
    accuracy, breakdown = {}, {}
    for ds in splits:
        if len(ds) == 0:
            continue
        if ds.v.shape[1] != model.d or ds.q.shape[1] != model.d:
            raise VersionError(f"dataset width {ds.v.shape[1]} does not match checkpoint width {model.d}")
        v, q, y = ds.model_batch()
        pred = model.predict(v, q)
        b = split_breakdown(pred, y)
        breakdown[ds.split_tag] = b
        accuracy[ds.split_tag] = b["overall"]
    cfg = model.config.to_dict() if config is None else config
    return EvalReport(model.config.ablation, int(seed), accuracy, breakdown, cfg)


def rows_to_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if c is None else c for c in r])
    return buf.getvalue()


def linear_probe_r2(fit_feats, fit_target, eval_feats, eval_target):
    """Held-out R^2 of an affine least-squares probe, pooled over target columns."""
    def design(f):
        return np.hstack([f, np.ones((len(f), 1))])

    w = np.linalg.lstsq(design(fit_feats), fit_target, rcond=None)[0]
    resid = eval_target - design(eval_feats) @ w
    total = eval_target - eval_target.mean(axis=0)
    return float(1.0 - np.sum(resid ** 2) / np.sum(total ** 2))


def probe_instrument(model, fit_ds, eval_ds):
    """R^2 of the latent confounder from the instrument I and from the representation X."""
    def feats(ds):
        v, q, _ = ds.model_batch()
        with no_grad():
            out = model.forward(v, q, "full" if model.config.ablation == "full" else "iv_only")
        return out["i"].data, out["x"].data

    fi, fx = feats(fit_ds)
    ei, ex = feats(eval_ds)
    return {"i": linear_probe_r2(fi, fit_ds.c_latent, ei, eval_ds.c_latent),
            "x": linear_probe_r2(fx, fit_ds.c_latent, ex, eval_ds.c_latent)}


# experiments --------------------------------------------------------------
def run_ablation(splits, base_config):
    """Train and evaluate the four modes with one shared seed."""
    reports = []
    for mode in trainer.ABLATIONS:
        cfg = base_config.replace(ablation=mode)
        res = trainer.train(splits[0], cfg)
        reports.append(evaluate(res.model, splits, cfg.seed))
    return reports


def run_sweep_k(splits, base_config, ks, modes=("full", "bda_only")):
    """OOD accuracy for each (K_v, mode); ``bda_only`` is the configuration without IV."""
    rows = []
    for k in ks:
        if int(k) < 1:
            raise ConfigError(f"dictionary size must be >= 1, got {k}")
        for mode in modes:
            cfg = base_config.replace(ablation=mode, k_v=int(k))
            res = trainer.train(splits[0], cfg)
            rows.append((int(k), mode, cfg.seed, _r4(trainer.accuracy(res.model, splits[2]))))
    return rows


def mi_selftest(rhos=(0.0, 0.3, 0.6, 0.9), batch=512, steps=2000, seed=0):
    """Gaussian analytic-MI and shuffled-independence checks of the bounds.

    Each entry holds the estimate, the analytic value and a pass flag; the
    relevance term is reported in both modes on the same fitted estimator.
    """
    entries = []
    for rho in rhos:
        est, mi = iv.fit_club_gaussian(rho, batch=batch, steps=steps, seed=seed)
        ok = (-0.05 <= est <= 0.1) if rho == 0 else est >= mi - 0.1
        entries.append({"check": "club_gaussian", "rho": rho, "estimate": est, "analytic": mi, "pass": bool(ok)})
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(31,)))
    head = iv.EstimatorHead(1, 1, rng, hidden=16)
    vals = []
    for _ in range(10):
        x = rng.standard_normal((batch, 1))
        y = rng.standard_normal((batch, 1))[rng.permutation(batch)]
        vals.append(iv.club_upper(head, Tensor(y), Tensor(x)).item())
    shuffled = float(np.mean(vals))
    entries.append({"check": "club_shuffled", "estimate": shuffled, "analytic": 0.0, "pass": abs(shuffled) < 0.05})
    x, y = iv.correlated_pairs(rng, batch, 0.9)
    for mode in iv.L_IX_MODES:
        val = iv.infonce_lower(head, Tensor(y), Tensor(x), mode).item()
        ok = val >= -math.log(batch) if mode == "standard_infonce" else math.isfinite(val)
        entries.append({"check": f"l_ix_{mode}", "estimate": val, "analytic": None, "pass": bool(ok)})
    return entries


def _op_cases():
    def pos(t):
        return t * t + 0.5

    return {
        "add": lambda t, r: (t + Tensor(r.standard_normal(t.shape))).sum(),
        "mul": lambda t, r: (t * Tensor(r.standard_normal(t.shape))).sum(),
        "div": lambda t, r: (Tensor(r.standard_normal(t.shape)) / pos(t)).sum(),
        "exp": lambda t, r: ops.exp(t).sum(),
        "log": lambda t, r: ops.log(pos(t)).sum(),
        "tanh": lambda t, r: ops.tanh(t).sum(),
        "relu": lambda t, r: (ops.relu(t + 0.05) * Tensor(r.standard_normal(t.shape))).sum(),
        "matmul": lambda t, r: ops.square(ops.matmul(t, Tensor(r.standard_normal((t.shape[1], 2))))).sum(),
        "softmax": lambda t, r: (ops.softmax_rows(t, 0.7) * Tensor(r.standard_normal(t.shape))).sum(),
        "logsumexp": lambda t, r: ops.logsumexp_rows(t).sum(),
        "cross_entropy": lambda t, r: ops.cross_entropy(t, r.integers(0, t.shape[1], t.shape[0])),
        "kl_logits": lambda t, r: ops.kl_from_logits(Tensor(r.standard_normal(t.shape)), t),
        "sub": lambda t, r: ((Tensor(r.standard_normal(t.shape)) - t) * Tensor(r.standard_normal(t.shape))).sum(),
        "neg": lambda t, r: (-t * Tensor(r.standard_normal(t.shape))).sum(),
        "square": lambda t, r: (ops.square(t) * Tensor(r.standard_normal(t.shape))).sum(),
        "clamp": lambda t, r: (ops.clamp(t, -0.5, 0.5) * Tensor(r.standard_normal(t.shape))).sum(),
        "broadcast": lambda t, r: ops.square(t + ops.mean(t, axis=0, keepdims=True)).sum(),
        "sum_axis": lambda t, r: ops.square(ops.tsum(t, axis=1)).sum(),
        "mean_axis": lambda t, r: ops.square(ops.mean(t, axis=0)).sum(),
        "reshape": lambda t, r: ops.square(ops.matmul(ops.reshape(t, (2, 6)), Tensor(r.standard_normal((6, 1))))).sum(),
        "transpose": lambda t, r: ops.square(ops.matmul(ops.transpose(t), Tensor(r.standard_normal((3, 2))))).sum(),
        "take": lambda t, r: ops.square(ops.take(t, [0, 2, 2])).sum(),
        "concat": lambda t, r: ops.square(ops.matmul(ops.concat(t, ops.tanh(t)), Tensor(r.standard_normal((8, 1))))).sum(),
        "log_softmax": lambda t, r: (ops.log_softmax_rows(t) * Tensor(r.standard_normal(t.shape))).sum(),
        "kl_divergence": lambda t, r: ops.kl_divergence(
            ops.softmax_rows(Tensor(r.standard_normal(t.shape))), ops.softmax_rows(t)),
    }


def grad_selftest(seeds=range(5), eps=1e-6, tol=1e-4):
    """Central-difference checks of each primitive and of the composed loss (d=4, B=2)."""
    entries = []
    for name, fn in _op_cases().items():
        worst = 0.0
        for s in seeds:
            x = np.random.default_rng(s).standard_normal((3, 4))
            worst = max(worst, grad_check(lambda t, s=s: fn(t, np.random.default_rng(100 + s)), x, eps))
        entries.append({"check": name, "max_rel_error": worst, "pass": worst < tol})
    for mode in iv.L_IX_MODES:
        worst = max(composed_loss_error(s, mode, eps) for s in seeds)
        entries.append({"check": f"composed_loss_{mode}", "max_rel_error": worst, "pass": worst < tol})
    return entries


def composed_loss_error(seed, l_ix_mode="standard_infonce", eps=1e-6, ce_on_bda=True):
    """Worst relative gradient error of the full objective on a d=4, B=2 model."""
    cfg_scm = ScmConfig(d_v=4, d_q=4, n_answers=3, n_cv=3, n_cq=3, d_c=2, n_train=16, n_test=0, seed=seed)
    train_set = generate(cfg_scm)[0]
    cfg = trainer.TrainConfig(seed=seed, ablation="full", l_ix_mode=l_ix_mode, k_v=3, k_t=3, ce_on_bda=ce_on_bda)
    model = trainer.build_model(train_set, cfg)
    heads = iv.EstimatorSet(model.iv.d_i, 2 * model.d, cfg.d_a, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1000)
    # zero biases sit exactly on ReLU kinks; move them to a generic point
    for m in (model, heads):
        for name, p in m.named_parameters().items():
            if name.endswith("bias"):
                p.data += 0.1 * rng.standard_normal(p.shape)
    v, q, y = train_set.model_batch([0, 1])
    teacher = model.forward(v, q)["do"].data.copy()

    def loss():
        comps, _ = trainer.compute_losses(model, v, q, y, heads, teacher)
        return trainer.total_loss(comps, cfg)

    params = trainer._active_parameters(model, "full")
    for p in params:
        p.grad = None
    loss().backward()
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_grad(loss, params, eps)
    return max(float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))) for a, n in zip(analytic, numeric))


# command plumbing ---------------------------------------------------------
def _read_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise OSError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err


def _train_config(args):
    raw = _read_json(args.config)
    if not isinstance(raw, dict):
        raise ConfigError("train config must be a JSON object")
    for key, flag in (("seed", "seed"), ("ablation", "ablation"), ("l_ix_mode", "l_ix_mode")):
        if getattr(args, flag, None) is not None:
            raw[key] = getattr(args, flag)
    return trainer.TrainConfig.from_dict(raw)


def _load_data(path):
    if path is None:
        raise ConfigError("--data is required")
    if not Path(path, "manifest.json").exists():
        raise OSError(f"no dataset manifest in {path}")
    return load_splits(path)


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(entries):
    for e in entries:
        print(json.dumps(e, sort_keys=True))


def cmd_generate(args):
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    config = ScmConfig.from_dict(raw)
    splits = generate(config)
    out = _out_dir(args)
    save_splits(splits, out)
    print(json.dumps({"seed": config.seed, **audit_bias(splits[0], reference=splits[2]).summary()}, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    config = _train_config(args)
    splits = _load_data(args.data)
    out = _out_dir(args)
    try:
        res = trainer.train(splits[0], config)
    except DivergenceError as err:
        if err.checkpoint is not None:
            trainer.save_checkpoint(err.checkpoint, out / "checkpoint_last_good.json")
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    trainer.save_checkpoint(res.checkpoint, out / "checkpoint.json")
    (out / "loss_log.csv").write_text(trainer.log_to_csv(res.log), newline="")
    metrics = {k: _r4(v) for k, v in res.metrics.items()}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise OSError(f"checkpoint not found: {args.checkpoint}")
    model, _, ckpt = trainer.load_checkpoint(args.checkpoint)
    splits = _load_data(args.data)
    report = evaluate(model, splits, ckpt["config"]["seed"])
    text = report.to_json()
    if args.out:
        (_out_dir(args) / "eval_report.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args):
    config = _train_config(args)
    splits = _load_data(args.data)
    reports = run_ablation(splits, config)
    text = rows_to_csv(ABLATION_COLUMNS, [r.row() for r in reports])
    (_out_dir(args) / "ablation.csv").write_text(text, newline="")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep_k(args):
    config = _train_config(args)
    splits = _load_data(args.data)
    try:
        ks = [int(k) for k in args.k.split(",") if k.strip()]
    except ValueError as err:
        raise ConfigError(f"--k must be a comma-separated list of integers: {args.k!r}") from err
    rows = run_sweep_k(splits, config, ks)
    text = rows_to_csv(SWEEP_COLUMNS, rows)
    (_out_dir(args) / "sweep_k.csv").write_text(text, newline="")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_mi_selftest(args):
    entries = mi_selftest(steps=args.steps, seed=args.seed or 0)
    _emit(entries)
    if args.out:
        (_out_dir(args) / "mi_selftest.json").write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_grad_check(args):
    entries = grad_selftest()
    _emit(entries)
    return EXIT_OK if all(e["pass"] for e in entries) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="dci", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, data=True, train_flags=False):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)
        if data:
            s.add_argument("--data", help="dataset directory written by 'generate'")
        if train_flags:
            s.add_argument("--ablation", choices=trainer.ABLATIONS)
            s.add_argument("--l-ix-mode", dest="l_ix_mode", choices=iv.L_IX_MODES)
        s.set_defaults(func=fn)
        return s

    add("generate", cmd_generate, "write train/test_iid/test_ood splits and a manifest", data=False)
    add("train", cmd_train, "train one model and write checkpoint, loss log and metrics", train_flags=True)
    e = add("eval", cmd_eval, "evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", help="checkpoint JSON written by 'train'")
    add("ablate", cmd_ablate, "train the four ablation modes and write ablation.csv", train_flags=True)
    s = add("sweep-k", cmd_sweep_k, "visual dictionary size sweep with and without IV", train_flags=True)
    s.add_argument("--k", default="4,16,64", help="comma-separated K_v values")
    m = add("mi-selftest", cmd_mi_selftest, "Gaussian and independence checks of the MI bounds", data=False)
    m.add_argument("--steps", type=int, default=2000)
    add("grad-check", cmd_grad_check, "central-difference gradient checks", data=False)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, VersionError, ContractError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
