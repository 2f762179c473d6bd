import csv
import hashlib
import io
import json

import numpy as np
import pytest

from dualcausal import trainer
from dualcausal.evalcli import (
    ABLATION_COLUMNS,
    EXIT_CONFIG,
    EXIT_DIVERGENCE,
    EXIT_IO,
    EXIT_OK,
    SWEEP_COLUMNS,
    EvalReport,
    evaluate,
    linear_probe_r2,
    main,
    mi_selftest,
    rows_to_csv,
    split_breakdown,
)
from dualcausal.scm import ScmConfig, generate, load_splits

SMALL_SCM = {"d_v": 8, "d_q": 8, "n_cv": 4, "n_cq": 4, "n_answers": 4, "d_c": 2, "n_train": 192, "n_test": 96}
SMALL_TRAIN = {"epochs": 2, "k_v": 4, "k_t": 3, "l_ix_mode": "standard_infonce"}


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scm = write_json(root / "scm.json", SMALL_SCM)
    tc = write_json(root / "train.json", SMALL_TRAIN)
    assert main(["generate", "--config", scm, "--out", str(root / "data"), "--seed", "3"]) == EXIT_OK
    return root, scm, tc


# generate ------------------------------------------------------------------
def test_generate_writes_splits_and_manifest(workdir, capsys):
    root, scm, _ = workdir
    data = root / "data"
    names = sorted(p.name for p in data.iterdir())
    assert names == ["manifest.json", "test_iid.jsonl", "test_ood.jsonl", "train.jsonl"]
    assert json.loads((data / "manifest.json").read_text())["config"]["seed"] == 3
    main(["generate", "--config", scm, "--out", str(root / "again"), "--seed", "3"])
    audit = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert audit["seed"] == 3 and "mi_cv_answer" in audit
    for name in names:
        assert digest(data / name) == digest(root / "again" / name)


def test_generate_unbiased_audit(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"bias_strength": 0.0, "n_train": 8000, "n_test": 100})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_OK
    audit = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert audit["mi_cv_answer"] < 0.02 and audit["mi_cq_answer"] < 0.02


def test_generate_unknown_key_names_it(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"bias_strenght": 0.5})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert "bias_strenght" in capsys.readouterr().err


# train / eval --------------------------------------------------------------
@pytest.fixture(scope="module")
def trained(workdir):
    root, _, tc = workdir
    out = root / "run"
    assert main(["train", "--data", str(root / "data"), "--config", tc, "--out", str(out), "--ablation", "full"]) == EXIT_OK
    return root, out


def test_train_writes_artifacts(trained):
    _, out = trained
    assert {p.name for p in out.iterdir()} >= {"checkpoint.json", "loss_log.csv", "metrics.json"}
    rows = list(csv.reader(io.StringIO((out / "loss_log.csv").read_text())))
    assert rows[0] == list(trainer.LOG_COLUMNS)
    assert len(rows) == 1 + 2 * 6


def test_train_is_deterministic_across_invocations(trained, workdir):
    root, out = trained
    again = root / "run2"
    main(["train", "--data", str(root / "data"), "--config", workdir[2], "--out", str(again), "--ablation", "full"])
    for name in ("checkpoint.json", "loss_log.csv", "metrics.json"):
        assert digest(out / name) == digest(again / name)


def test_baseline_train_completes(workdir):
    root, _, tc = workdir
    out = root / "base"
    assert main(["train", "--data", str(root / "data"), "--config", tc, "--out", str(out), "--ablation", "baseline"]) == 0
    assert (out / "checkpoint.json").exists()


def test_eval_reproduces_train_accuracy(trained, capsys):
    root, out = trained
    assert main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--data", str(root / "data"), "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((out / "eval_report.json").read_text())
    metrics = json.loads((out / "metrics.json").read_text())
    assert report["accuracy"]["train"] == metrics["train_accuracy"]
    model, _, _ = trainer.load_checkpoint(out / "checkpoint.json")
    splits = load_splits(root / "data")
    res = trainer.train(splits[0], trainer.TrainConfig(ablation="full", **SMALL_TRAIN))
    assert abs(trainer.accuracy(model, splits[0]) - res.metrics["train_accuracy"]) <= 1e-6


def test_eval_report_schema(trained, capsys):
    root, out = trained
    main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--data", str(root / "data")])
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"mode", "seed", "accuracy", "breakdown", "ood_gap", "config"}
    for split, acc in report["accuracy"].items():
        assert 0 <= acc <= 1 and round(acc, 4) == acc
        assert set(report["breakdown"][split]) == {"open", "closed", "overall"}
    assert report["ood_gap"] == pytest.approx(report["accuracy"]["test_iid"] - report["accuracy"]["test_ood"], abs=1e-4)


def test_eval_dimension_mismatch_is_version_error(trained, tmp_path, capsys):
    _, out = trained
    cfg = write_json(tmp_path / "c.json", {**SMALL_SCM, "d_v": 6, "d_q": 6})
    main(["generate", "--config", cfg, "--out", str(tmp_path / "d")])
    assert main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--data", str(tmp_path / "d")]) == EXIT_CONFIG


@pytest.mark.parametrize("mode", trainer.ABLATIONS)
def test_random_init_is_chance(mode):
    # one random init is a biased guesser; chance level is the mean over inits
    splits = generate(ScmConfig(n_train=2000, n_test=2000, n_answers=8, n_cv=8, n_cq=8, seed=11))
    accs = []
    for seed in range(10):
        model = trainer.build_model(splits[0], trainer.TrainConfig(ablation=mode, seed=seed))
        accs.append(evaluate(model, splits[1:2]).accuracy["test_iid"])
    assert model.n_answers == 8
    assert abs(np.mean(accs) - 0.125) <= 0.03


# exit codes ----------------------------------------------------------------
def test_missing_data_is_io_error(tmp_path, workdir):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--config", workdir[2]]) == EXIT_IO


def test_missing_config_is_io_error(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_IO


def test_bad_lambda_is_config_error(workdir, tmp_path):
    cfg = write_json(tmp_path / "t.json", {"lamda1": 0.1})
    assert main(["train", "--data", str(workdir[0] / "data"), "--config", cfg]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(workdir, tmp_path, capsys):
    cfg = write_json(tmp_path / "t.json", {**SMALL_TRAIN, "learning_rate": 1e200, "warmup_fraction": 0.0,
                                           "ablation": "baseline", "epochs": 3})
    code = main(["train", "--data", str(workdir[0] / "data"), "--config", cfg, "--out", str(tmp_path / "r")])
    assert code == EXIT_DIVERGENCE
    assert "diverg" in capsys.readouterr().err.lower()


# ablate / sweep --------------------------------------------------------------
def test_ablate_has_four_rows_with_shared_seed(workdir, tmp_path):
    root, _, tc = workdir
    assert main(["ablate", "--data", str(root / "data"), "--config", tc, "--out", str(tmp_path), "--seed", "7"]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "ablation.csv").read_text(), newline="")))
    assert [r["mode"] for r in rows] == list(trainer.ABLATIONS)
    assert {r["seed"] for r in rows} == {"7"}
    assert list(rows[0]) == list(ABLATION_COLUMNS)


def test_sweep_k_rows_parse_back(workdir, tmp_path):
    root, _, tc = workdir
    assert main(["sweep-k", "--data", str(root / "data"), "--config", tc, "--out", str(tmp_path), "--k", "1,2,4"]) == 0
    with open(tmp_path / "sweep_k.csv", newline="") as fh:
        text = fh.read()
    rows = list(csv.reader(io.StringIO(text, newline="")))
    assert rows[0] == list(SWEEP_COLUMNS) and len(rows) == 7
    parsed = [(int(k), m, int(s), float(a)) for k, m, s, a in rows[1:]]
    assert [(k, m) for k, m, _, _ in parsed] == [(k, m) for k in (1, 2, 4) for m in ("full", "bda_only")]
    assert rows_to_csv(SWEEP_COLUMNS, parsed) == text


def test_sweep_k_rejects_bad_list(workdir):
    root, _, tc = workdir
    assert main(["sweep-k", "--data", str(root / "data"), "--config", tc, "--k", "4,x"]) == EXIT_CONFIG
    assert main(["sweep-k", "--data", str(root / "data"), "--config", tc, "--k", "0"]) == EXIT_CONFIG


def test_csv_quotes_and_crlf():
    text = rows_to_csv(("a", "b"), [("x,y", 'say "hi"')])
    assert text == 'a,b\r\n"x,y","say ""hi"""\r\n'


# reports -------------------------------------------------------------------
def test_split_breakdown_open_closed():
    pred = np.array([0, 1, 2, 3, 0, 5])
    ans = np.array([0, 1, 2, 4, 1, 5])
    out = split_breakdown(pred, ans)
    assert out == {"closed": round(2 / 3, 4), "open": round(2 / 3, 4), "overall": round(4 / 6, 4)}


def test_report_round_trip():
    r = EvalReport("full", 2, {"train": 0.9, "test_iid": 0.8, "test_ood": 0.5}, {}, {"x": 1})
    assert r.ood_gap == pytest.approx(0.3)
    assert json.loads(r.to_json())["ood_gap"] == 0.3


def test_linear_probe_oracle():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((400, 3))
    y = f @ rng.standard_normal((3, 2)) + 1.0
    assert linear_probe_r2(f[:200], y[:200], f[200:], y[200:]) == pytest.approx(1.0, abs=1e-12)
    noise = rng.standard_normal((400, 2))
    assert linear_probe_r2(f[:200], noise[:200], f[200:], noise[200:]) < 0.05


# self-tests ----------------------------------------------------------------
def test_mi_selftest_report(capsys):
    entries = mi_selftest(rhos=(0.0, 0.9), steps=2000)
    checks = {e["check"] for e in entries}
    assert {"l_ix_verbatim", "l_ix_standard_infonce", "club_gaussian", "club_shuffled"} <= checks
    rho9 = next(e for e in entries if e.get("rho") == 0.9)
    assert rho9["analytic"] == pytest.approx(0.830, abs=1e-3)
    assert rho9["estimate"] >= 0.73
    rho0 = next(e for e in entries if e.get("rho") == 0.0)
    assert abs(rho0["estimate"]) <= 0.05
    assert all(e["pass"] for e in entries)


def test_grad_check_command(capsys):
    assert main(["grad-check"]) == EXIT_OK
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert lines and all(e["pass"] for e in lines)
