import csv
import hashlib
import io
import re
from dataclasses import replace

import numpy as np
import pytest

from advmal import harness, nn
from advmal.attacks import AttackConfig, AttackKind, AttackResult, TABLE_ORDER, classify, run_attack
from advmal.config import ExperimentConfig, parse_attack_campaign, parse_config
from advmal.data import Dataset, SynthSpec
from advmal.defenses import Wrapped
from advmal.errors import ConfigError, DataError
from advmal.harness import (
    AttackEvalRow, Metrics, PredictorReport, Report, evaluate_attack, format_csv, format_markdown,
    metrics_from_predictions, natural_row, render_report,
)

from conftest import GOLDEN


def handmade_report() -> Report:
    undef = PredictorReport(
        "undefended", Metrics(0.98, 0.04, 0.0, 0.96, 1.0),
        [AttackEvalRow("natural", 0.98, 0.98, 0.04, 0.04, 0.0, 0.04),
         AttackEvalRow("jsma", 0.98, 0.5, 0.04, 1.0, 13.567, 1.0)],
    )
    dist = PredictorReport(
        "distillation", Metrics(0.5, 0.0, 1.0, 1.0, 0.0),
        [AttackEvalRow("natural", 0.5, 0.5, 0.0, 0.0, 0.0, 0.0),
         AttackEvalRow("jsma", 0.5, 0.5, 0.0, 0.056, 1.889, 0.056)],
        ["degenerate: FPR 1.00 >= 0.99"],
    )
    return Report([undef, dist])


# --------------------------------------------------------------------------- metrics

def test_all_correct_predictions():
    y = np.array([0, 1, 1, 0])
    m = metrics_from_predictions(y, y)
    assert (m.acc, m.fnr, m.fpr, m.tpr, m.tnr) == (1.0, 0.0, 0.0, 1.0, 1.0)


def test_four_missed_malware_of_hundred():
    y = np.r_[np.ones(100), np.zeros(100)].astype(int)
    pred = y.copy()
    pred[:4] = 0
    m = metrics_from_predictions(pred, y)
    assert m.acc == pytest.approx(0.98) and m.fnr == pytest.approx(0.04) and m.fpr == 0.0
    assert abs(m.tpr + m.fnr - 1) <= 1e-12 and abs(m.tnr + m.fpr - 1) <= 1e-12


def test_swapping_classes_swaps_rates():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 300)
    pred = np.where(rng.random(300) < 0.2, 1 - y, y)
    a = metrics_from_predictions(pred, y)
    b = metrics_from_predictions(1 - pred, 1 - y)
    assert (a.fnr, a.fpr, a.tpr, a.tnr) == pytest.approx((b.fpr, b.fnr, b.tnr, b.tpr))


def test_single_class_is_an_error():
    with pytest.raises(DataError):
        metrics_from_predictions(np.ones(5, int), np.ones(5, int))


def test_degenerate_flag():
    assert harness.is_degenerate(Metrics(0.5, 0.0, 1.0, 1.0, 0.0))
    assert harness.is_degenerate(Metrics(0.5, 0.0, 0.99, 1.0, 0.01))
    assert not harness.is_degenerate(Metrics(0.9, 0.0, 0.2, 1.0, 0.8))


# --------------------------------------------------------------------------- attack rows

def test_table_arithmetic_example():
    n_mal, n_ben = 51, 49
    test = Dataset(np.zeros((100, 1), int), np.r_[np.ones(n_mal), np.zeros(n_ben)].astype(int))
    labels = test.y.copy()
    changes = [2] * 48 + [0, 0, 0]
    results = [AttackResult(np.zeros(1, np.uint8), c, i < 12, c) for i, c in enumerate(changes)]
    row = evaluate_attack(None, results, test, "jsma", labels)
    assert row.evasion == pytest.approx(12 / 51) and round(row.evasion, 3) == 0.235
    assert row.avg_change == pytest.approx(96 / 51) and round(row.avg_change, 2) == 1.88
    assert row.fnr_adv == row.evasion
    assert row.acc_adv == pytest.approx((49 + 39) / 100)


def test_identity_attack_reproduces_natural_row():
    y = np.array([1, 1, 1, 0, 0, 1])
    labels = np.array([1, 0, 1, 0, 1, 1])
    test = Dataset(np.zeros((6, 1), int), y)
    mal_labels = labels[y == 1]
    results = [AttackResult(np.zeros(1, np.uint8), 0, bool(lbl == 0), 0) for lbl in mal_labels]
    row = evaluate_attack(None, results, test, "natural", labels)
    nat = natural_row(metrics_from_predictions(labels, y))
    assert row == nat


def test_misaligned_results_rejected():
    test = Dataset(np.zeros((4, 1), int), np.array([1, 1, 0, 0]))
    with pytest.raises(DataError):
        evaluate_attack(None, [AttackResult(np.zeros(1, np.uint8), 0, True, 0)], test, "x", test.y)


@pytest.fixture(scope="module")
def tiny_victim():
    from advmal.data import generate_synthetic, split_dataset, SplitSpec
    ds = generate_synthetic(SynthSpec(n_benign=200, n_malware=200, d=30, n_malware_markers=4,
                                      n_benign_markers=4, seed=8))
    train, _, test = split_dataset(ds, SplitSpec(seed=1))
    net = nn.train(nn.init_network(nn.dense_specs(30, (16,)), 0), train.X, train.y, nn.TrainConfig(epochs=20))
    return Wrapped(net), test


def test_benign_predictions_untouched_and_acc_adv_bounded(tiny_victim):
    pred, test = tiny_victim
    mal = np.flatnonzero(test.y == 1)
    before = hashlib.sha256(classify(pred, test.X[test.y == 0]).tobytes()).hexdigest()
    results = run_attack(pred, test.X[mal], AttackConfig(AttackKind.JSMA), mal)
    after = hashlib.sha256(classify(pred, test.X[test.y == 0]).tobytes()).hexdigest()
    assert before == after
    row = evaluate_attack(pred, results, test, "jsma")
    m = harness.evaluate_model(pred, test)
    assert row.evasion >= m.fnr and row.acc_adv <= row.acc
    X_adv = test.X.copy()
    X_adv[mal] = np.vstack([r.x_adv for r in results])
    assert row.acc_adv == pytest.approx(np.mean(classify(pred, X_adv) == test.y))


# --------------------------------------------------------------------------- rendering

def test_percent_and_fraction_rendering():
    assert harness.pct(0.056) == "5.6"
    assert harness.pct(1.0) == "100.0"
    assert harness.frac(0.98) == "0.98" and harness.frac(1.889) == "1.89"


def test_markdown_matches_golden():
    assert format_markdown(handmade_report()) == (GOLDEN / "handmade" / "report.md").read_text()


def test_csv_matches_golden():
    files = format_csv(handmade_report())
    for name in ("report.csv", "metrics.csv"):
        assert files[name] == (GOLDEN / "handmade" / name).read_text()


def test_csv_and_markdown_carry_identical_numbers():
    rep = handmade_report()
    md = format_markdown(rep)
    rows = list(csv.reader(io.StringIO(format_csv(rep)["report.csv"])))[1:]
    for label in ("undef.", "Dist."):
        section = md.split(f"## {label}\n")[1].split("## ")[0]
        md_rows = [[c.strip() for c in line.strip("|").split("|")] for line in section.splitlines()
                   if line.startswith("| ") and not line.startswith("| Attack")]
        csv_rows = [r[1:] for r in rows if r[0] == label]
        assert md_rows == csv_rows


def test_single_natural_row_table():
    rep = Report([PredictorReport("undefended", Metrics(1, 0, 0, 1, 1),
                                  [AttackEvalRow("natural", 1, 1, 0, 0, 0, 0)])])
    section = format_markdown(rep).split("## undef.\n")[1]
    body = [line for line in section.splitlines() if line.startswith("| natural")]
    assert body == ["| natural | 1.00 | 1.00 | 0.00 | 0.00 | 0.00 | 0.0 |"]


def test_empty_report_rejected(tmp_path):
    with pytest.raises(DataError):
        render_report(Report([]), tmp_path)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        render_report(handmade_report(), blocker / "sub")


def test_results_round_trip(tmp_path):
    rep = handmade_report()
    harness.save_report(rep, tmp_path)
    back = harness.load_report(tmp_path)
    assert format_markdown(back) == format_markdown(rep)


# --------------------------------------------------------------------------- config

def test_config_defaults_and_overrides(tmp_path):
    cfg = parse_config("""
[experiment]
seed = 5
attacks = jsma, dfgsm_k
defenses = none

[data]
n_benign = 40
feature_k = 10

[victim]
hidden = 8, 4
epochs = 3

[attack.dfgsm_k]
budget = 7
step_size = 0.2

[defense.ensemble]
members = 8x8; 4
""", tmp_path)
    assert cfg.seed == 5 and cfg.train.seed == 5 and cfg.train.epochs == 3
    assert [a.kind for a in cfg.attacks] == [AttackKind.JSMA, AttackKind.DFGSM_K]
    assert (cfg.attacks[1].budget, cfg.attacks[1].step_size) == (7, 0.2)
    assert cfg.defenses == [] and cfg.feature_k == 10 and cfg.synth.n_benign == 40
    assert cfg.victim_hidden == (8, 4)
    assert cfg.defense.ensemble.members == ((8, 8), (4,))
    assert [a.kind for a in ExperimentConfig().attacks] == list(TABLE_ORDER)


@pytest.mark.parametrize("text", [
    "[experiment]\nattacks = nope\n",
    "[experiment]\ndefenses = magic\n",
    "[experiment]\nattacks = jsma, jsma\n",
    "[attack.jsma]\nbudget = x\n[experiment]\nattacks = jsma\n",
    "[victim]\nhidden = a, b\n",
    "not an ini",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_attack_campaign_parsing():
    cfg = parse_attack_campaign("kind = bga_k\nbudget = 3\nseed = 4\n")
    assert (cfg.kind, cfg.budget, cfg.seed) == (AttackKind.BGA_K, 3, 4)
    with pytest.raises(ConfigError):
        parse_attack_campaign("budget = 3\n")


# --------------------------------------------------------------------------- pipeline

def small_config(**kw) -> ExperimentConfig:
    base = ExperimentConfig(
        seed=2,
        synth=SynthSpec(n_benign=150, n_malware=150, d=40, n_malware_markers=4, n_benign_markers=4, seed=3),
        victim_hidden=(16,),
        train=nn.TrainConfig(epochs=15, seed=2),
        defenses=[],
    )
    base.malgan = replace(base.malgan, epochs=3, blackbox_epochs=5, generator_hidden=16, discriminator_hidden=16)
    return replace(base, **kw)


def test_zero_defense_report_has_thirteen_rows():
    rep = harness.run_experiment(small_config())
    assert [p.name for p in rep.predictors] == ["undefended"]
    assert [r.attack for r in rep.predictors[0].rows] == ["natural"] + [k.value for k in TABLE_ORDER]


def test_natural_row_equals_model_fnr_and_grid_is_complete():
    cfg = small_config(attacks=[AttackConfig(AttackKind.JSMA), AttackConfig(AttackKind.BGA_K)],
                       defenses=["rfn", "distillation"])
    rep = harness.run_experiment(cfg)
    assert sum(len(p.rows) for p in rep.predictors) == (2 + 1) * (2 + 1)
    for p in rep.predictors:
        nat = p.rows[0]
        assert nat.attack == "natural" and nat.evasion == p.metrics.fnr and nat.avg_change == 0
    assert "rfn" in rep.manifest["attacker_visibility"]


def test_feature_selection_stage():
    rep = harness.run_experiment(small_config(feature_k=12, attacks=[AttackConfig(AttackKind.JSMA)]))
    assert rep.manifest["data"]["d"] == 40 and len(rep.manifest["data"]["selected_features"]) == 12


def test_stage_name_in_errors(tmp_path):
    with pytest.raises(DataError, match=r"\[load data\]"):
        harness.run_experiment(small_config(data_path=tmp_path / "missing.csv"))
    with pytest.raises(DataError, match=r"\[load data\]"):
        harness.run_experiment(small_config(feature_k=999))


def test_markdown_shape_for_full_grid(tmp_path):
    cfg = small_config(defenses=["distillation", "rfn", "adv_training", "ensemble"],
                       attacks=[AttackConfig(AttackKind.JSMA)])
    cfg.defense.ensemble = replace(cfg.defense.ensemble, members=((8,), (4, 4)), epochs=5)
    cfg.defense.adv_inner = AttackConfig(AttackKind.DFGSM_K, budget=3, step_size=0.2)
    rep = harness.run_experiment(cfg)
    render_report(rep, tmp_path)
    md = (tmp_path / "report.md").read_text()
    assert "| Attack | undef. | Dist. | RFN | AT | Ens. |" in md
    for cell in re.findall(r"^\| (?:natural|jsma) \| (.*) \|$", md.split("## Evasion (%)")[1].split("## undef.")[0], re.M):
        assert all(re.fullmatch(r"\d{1,3}\.\d", c.strip()) for c in cell.split("|"))
