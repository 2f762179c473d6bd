"""Acceptance gate: one PASS/FAIL line per criterion, printed in the terminal summary.

Directional criteria share one training protocol (3 seeds x 4 modes on biased
SCM data) that is run once per session.  A criterion that does not hold is
reported and left failing.
"""

import contextlib
import csv
import io
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dualcausal import trainer
from dualcausal.bda import (
    BdaParams,
    block_identity_fusion,
    expected_confounder,
    interventional_logits,
    observational_logits,
    prediction_head,
)
from dualcausal.dictionary import ConfounderDictionary, init_visual_kmeanspp, update_momentum
from dualcausal.evalcli import (
    SWEEP_COLUMNS,
    evaluate,
    grad_selftest,
    main,
    probe_instrument,
    rows_to_csv,
    run_sweep_k,
)
from dualcausal.iv import EstimatorHead, EstimatorSet, club_upper, fit_club_gaussian, infonce_lower, iv_losses
from dualcausal.numcore import Tensor
from dualcausal.scm import ScmConfig, generate

SEEDS = (0, 1, 2)
MODES = trainer.ABLATIONS
EPOCHS = 50
SWEEP_KS = (4, 16, 64)
PROTOCOL_SCM = dict(bias_strength=0.8, latent_strength=1.0, n_train=8000, n_test=2000)
PROTOCOL_TRAIN = dict(epochs=EPOCHS, l_ix_mode="standard_infonce")


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# shared protocol -------------------------------------------------------------
@pytest.fixture(scope="module")
def protocol():
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        splits = generate(ScmConfig(seed=seed, **PROTOCOL_SCM))
        for mode in MODES:
            cfg = trainer.TrainConfig(seed=seed, ablation=mode, **PROTOCOL_TRAIN)
            res = trainer.train(splits[0], cfg)
            runs[seed, mode] = {"result": res, "report": evaluate(res.model, splits, seed), "splits": splits,
                                "config": cfg}
    return runs, time.perf_counter() - t0


def mean_over_seeds(runs, mode, fn):
    return float(np.mean([fn(runs[s, mode]) for s in SEEDS]))


def ood(run):
    return run["report"].accuracy["test_ood"]


# 1 ---------------------------------------------------------------------------
def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    entries = grad_selftest(seeds=range(5), eps=1e-6, tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(e["max_rel_error"] for e in entries)
    ok = all(e["pass"] for e in entries) and elapsed < 60
    record(1, ok, f"{len(entries)} checks x 5 seeds, worst rel error {worst:.2e}, {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------
def test_criterion_2_mi_estimator_oracle():
    t0 = time.perf_counter()
    parts, ok = [], True
    for rho in (0.0, 0.3, 0.6, 0.9):
        est, _ = fit_club_gaussian(rho, batch=512, steps=2000, seed=0)
        analytic = 0.5 * math.log(1.0 / (1.0 - rho * rho))
        ok &= (-0.05 <= est <= 0.1) if rho == 0 else est >= analytic - 0.1
        parts.append(f"rho={rho}: {est:.3f} vs {analytic:.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    record(2, ok, "; ".join(parts) + f"; {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------
def test_criterion_3_double_sum_identities():
    rng = np.random.default_rng(3)
    zero = True
    for _ in range(5):
        heads = EstimatorSet(3, 6, 4, rng)
        i, c = Tensor(rng.standard_normal((1, 3))), Tensor(rng.standard_normal((1, 3)))
        x, a = Tensor(rng.standard_normal((1, 6))), Tensor(rng.standard_normal((1, 4)))
        zero &= all(t.item() == 0.0 for t in iv_losses(i, c, x, a, heads, "verbatim"))
        zero &= club_upper(heads.q_ci, c, i).item() == 0.0
        zero &= infonce_lower(heads.q_ix, x, i, "verbatim").item() == 0.0
    head = EstimatorHead(2, 2, rng)
    vals = []
    for _ in range(10):
        x = rng.standard_normal((512, 2))
        y = rng.standard_normal((512, 2))[rng.permutation(512)]
        vals.append(club_upper(head, Tensor(y), Tensor(x)).item())
    shuffled = float(np.mean(vals))
    record(3, zero and abs(shuffled) < 0.05, f"B=1 terms exactly zero: {zero}; shuffled CLUB mean {shuffled:+.4f}")


# 4 ---------------------------------------------------------------------------
def test_criterion_4_bda_degeneracy(protocol):
    runs, _ = protocol
    rng = np.random.default_rng(4)
    d = 6
    params, head = BdaParams(d, rng), prediction_head(d, 5, rng)
    for m in (params.visual, params.textual):
        m.w_f.data = block_identity_fusion(d)
    fv, fq = Tensor(rng.standard_normal((8, d))), Tensor(rng.standard_normal((8, d)))
    do, _ = interventional_logits(fv, fq, np.zeros((5, d)), params, head)
    bitwise = do.data.tobytes() == observational_logits(fv, fq, head).data.tobytes()
    _, w = expected_confounder(fv, rng.standard_normal((1, d)), params.visual)
    single = bool(np.all(w.data == 1.0))
    row_err = max(runs[s, m]["result"].attention_row_error for s in SEEDS for m in ("bda_only", "full"))
    record(4, bitwise and single and row_err <= 1e-10,
           f"bitwise degenerate equality {bitwise}; single entry weight 1.0 {single}; "
           f"worst attention row error over training {row_err:.1e}")


# 5 ---------------------------------------------------------------------------
def test_criterion_5_dictionary_mechanics(protocol):
    runs, _ = protocol
    d = ConfounderDictionary([[1.0, 0.0], [0.0, 1.0]], momentum=1.0)
    before = d.entries.copy()
    update_momentum(d, np.array([0.3, 0.9]))
    noop = d.entries.tobytes() == before.tobytes()
    d = ConfounderDictionary([[1.0, 0.0], [0.0, 1.0]], momentum=0.0)
    update_momentum(d, np.array([0.2, 0.9]))
    replaced = d.entries[1].tolist() == [0.2, 0.9]

    rng = np.random.default_rng(0)
    truth = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
    feats = np.vstack([c + 0.05 * rng.standard_normal((200, 3)) for c in truth])
    found = init_visual_kmeanspp(feats, k_v=3, seed=1).entries
    dist = np.linalg.norm(found[:, None, :] - truth[None, :, :], axis=2)
    blob_err = min(max(dist[p[i], i] for i in range(3))
                   for p in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)))

    run = runs[SEEDS[0], "full"]
    steps = run["result"].checkpoint["step"]
    init = trainer.build_model(run["splits"][0], run["config"])
    frozen = init.d_textual.entries.tobytes() == run["result"].model.d_textual.entries.tobytes()
    ok = noop and replaced and blob_err < 0.1 and frozen and steps >= 1000
    record(5, ok, f"mu=1 no-op {noop}; mu=0 replace {replaced}; blob error {blob_err:.4f}; "
                  f"D_t constant over {steps} steps {frozen}")


# 6 ---------------------------------------------------------------------------
def test_criterion_6_directional_ablation(protocol):
    runs, elapsed = protocol
    m = {mode: mean_over_seeds(runs, mode, ood) for mode in MODES}
    ok = (m["full"] > m["bda_only"] > m["baseline"] and m["full"] > m["iv_only"] > m["baseline"]
          and m["full"] >= m["baseline"] + 0.05 and elapsed < 15 * 60)
    detail = ", ".join(f"{k}={v:.4f}" for k, v in m.items())
    record(6, ok, f"mean test_ood {detail}; protocol runtime {elapsed / 60:.1f} min")


# 7 ---------------------------------------------------------------------------
def test_criterion_7_ood_gap(protocol):
    runs, _ = protocol
    gap = {mode: mean_over_seeds(runs, mode, lambda r: r["report"].ood_gap) for mode in ("baseline", "full")}
    ok = gap["full"] <= 0.7 * gap["baseline"]
    record(7, ok, f"mean ood_gap full={gap['full']:.4f} baseline={gap['baseline']:.4f} "
                  f"(reduction {1 - gap['full'] / gap['baseline']:.1%}, need >= 30%)")


# 8 ---------------------------------------------------------------------------
def test_criterion_8_loss_composition(protocol):
    runs, _ = protocol
    worst, rows = 0.0, 0
    for s in SEEDS:
        for r in runs[s, "full"]["result"].log:
            expect = r.ce + 0.1 * r.l_ix + 0.1 * r.l_ic + 0.05 * r.l_ia + 0.5 * r.l_bd
            worst = max(worst, abs(r.total - expect))
            rows += 1
    cfg = trainer.TrainConfig()
    defaults = (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4) == (0.1, 0.1, 0.05, 0.5)
    record(8, defaults and worst <= 1e-10, f"{rows} logged steps, worst |total - composition| {worst:.1e}")


# 9 ---------------------------------------------------------------------------
def test_criterion_9_unconfoundedness_trace(protocol):
    runs, _ = protocol
    probes = [probe_instrument(runs[s, "full"]["result"].model, runs[s, "full"]["splits"][0],
                               runs[s, "full"]["splits"][1]) for s in SEEDS]
    r2_i = float(np.mean([p["i"] for p in probes]))
    r2_x = float(np.mean([p["x"] for p in probes]))
    record(9, r2_i < r2_x, f"mean held-out R^2 of c_latent: from I {r2_i:.4f}, from X {r2_x:.4f}")


# 10 --------------------------------------------------------------------------
def run_all_commands(root):
    """Run every subcommand once into ``root`` and return stdout per command."""
    scm = root / "scm.json"
    scm.write_text(json.dumps({"d_v": 8, "d_q": 8, "n_cv": 4, "n_cq": 4, "n_answers": 4, "d_c": 2,
                               "n_train": 128, "n_test": 64, "seed": 5}))
    tc = root / "train.json"
    tc.write_text(json.dumps({"epochs": 2, "k_v": 4, "k_t": 3, "seed": 5}))
    data, run = str(root / "data"), str(root / "run")
    commands = {
        "generate": ["generate", "--config", str(scm), "--out", data],
        "train": ["train", "--data", data, "--config", str(tc), "--out", run],
        "eval": ["eval", "--data", data, "--checkpoint", run + "/checkpoint.json", "--out", str(root / "eval")],
        "ablate": ["ablate", "--data", data, "--config", str(tc), "--out", str(root / "ablate")],
        "sweep-k": ["sweep-k", "--data", data, "--config", str(tc), "--out", str(root / "sweep"), "--k", "2,4"],
        "mi-selftest": ["mi-selftest", "--steps", "50", "--out", str(root / "mi")],
        "grad-check": ["grad-check"],
    }
    out = {}
    for name, argv in commands.items():
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main(argv)
        out[name] = (code, buf.getvalue())
    return out


def test_criterion_10_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    out_a, out_b = run_all_commands(a), run_all_commands(b)

    def files(root):
        return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    def normal(text, root):
        return text.replace(str(root), "<root>")

    same_stdout = all(normal(out_a[k][1], a) == normal(out_b[k][1], b) and out_a[k][0] == out_b[k][0]
                      for k in out_a)
    fa, fb = files(a), files(b)
    same_files = fa.keys() == fb.keys() and all(fa[k] == fb[k] for k in fa)
    ok = same_stdout and same_files and all(code == 0 for code, _ in out_a.values())
    record(10, ok, f"{len(out_a)} commands, {len(fa)} files byte-identical {same_files}, stdout identical {same_stdout}")


# 11 --------------------------------------------------------------------------
def test_criterion_11_dictionary_size_sweep(protocol, tmp_path):
    runs, _ = protocol
    rows = []
    for seed in SEEDS:
        splits = runs[seed, "full"]["splits"]
        base = trainer.TrainConfig(seed=seed, **PROTOCOL_TRAIN)
        small = [k for k in SWEEP_KS if k != base.k_v]
        rows += run_sweep_k(splits, base, small)
        # the default dictionary size was already trained by the shared protocol
        for mode in ("full", "bda_only"):
            rows.append((base.k_v, mode, seed, runs[seed, mode]["report"].accuracy["test_ood"]))
    rows.sort(key=lambda r: (SWEEP_KS.index(r[0]), r[2], r[1] != "full"))
    text = rows_to_csv(SWEEP_COLUMNS, rows)
    path = Path(tmp_path, "sweep_k.csv")
    path.write_bytes(text.encode())
    parsed = list(csv.reader(io.StringIO(path.read_bytes().decode(), newline="")))
    back = [(int(k), m, int(s), float(a)) for k, m, s, a in parsed[1:]]
    well_formed = parsed[0] == list(SWEEP_COLUMNS) and back == [tuple(r) for r in rows]

    means = {(k, m): float(np.mean([r[3] for r in rows if r[0] == k and r[1] == m]))
             for k in SWEEP_KS for m in ("full", "bda_only")}
    holds = all(means[k, "full"] >= means[k, "bda_only"] for k in SWEEP_KS)
    shape = ", ".join(f"K={k}: full {means[k, 'full']:.4f} / w/o IV {means[k, 'bda_only']:.4f}" for k in SWEEP_KS)
    record(11, well_formed and holds, f"CSV well-formed {well_formed}; {shape}")
