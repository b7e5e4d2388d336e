"""Acceptance criteria, one or more tests per criterion.

Each test carries ``@pytest.mark.acceptance(n)``; the conftest hook prints a
PASS/FAIL line per criterion at the end of the run.
"""
import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmal import harness, nn
from advmal.attacks import (
    ADD_ONLY, BENIGN, FLIP_KINDS, MALWARE, TABLE_ORDER, AttackConfig, AttackKind, classify,
    feature_flip_attack, jsma_attack, run_attack,
)
from advmal.cli import main
from advmal.config import load_config
from advmal.data import SynthSpec, generate_synthetic
from advmal.defenses import Ensemble, RFNConfig, Wrapped, fit_network, nullification_masks, rfn_train
from advmal.harness import load_report
from advmal.malgan import MalganConfig, binarize, malgan_attack, train_blackbox, train_malgan

from conftest import DATA, GOLDEN, small_net
from test_harness import handmade_report
from test_nn import fd, random_case, rel_err

acceptance = pytest.mark.acceptance
NON_GAN = [k for k in TABLE_ORDER if k is not AttackKind.MALGAN]
COUNT_BOUNDED = set(FLIP_KINDS) | {AttackKind.JSMA, AttackKind.BCA_K}
GRID_FILES = ("report.md", "report.csv", "metrics.csv", "results.json")


def evasion(results) -> float:
    return float(np.mean([r.evaded for r in results]))


# --------------------------------------------------------------------------- 1

@acceptance(1)
def test_gradients_match_central_differences():
    start = time.perf_counter()
    for seed in range(20):
        net, X, y = random_case(seed)
        assert net.n_features <= 16 and len(net.specs) <= 3
        g = nn.input_loss_gradient(net, X, y)
        for i in range(X.shape[0]):
            num = fd(lambda: nn.loss(net, X[i:i + 1], y[i:i + 1]), X[i])
            assert rel_err(g[i], num).max() < 1e-4
        gW, gb = nn.parameter_gradients(net, X, y)
        analytic = [g for pair in zip(gW, gb) for g in pair]
        for p, ga in zip(net.parameters(), analytic):
            num = fd(lambda: nn.loss(net, X, y), p)
            assert rel_err(ga, num).max() < 1e-4
    assert time.perf_counter() - start < 10.0


# --------------------------------------------------------------------------- 2

@acceptance(2)
def test_victim_reaches_target_accuracy(victim, splits):
    assert [w.shape for w in victim.network.weights][0] == (500, 300)
    m = harness.evaluate_model(victim, splits[2])
    assert m.acc >= 0.95 and m.fpr <= 0.05, m


# --------------------------------------------------------------------------- 3

@pytest.fixture(scope="module")
def attack_pool(splits):
    pool = splits[2].malware()
    assert pool.shape[0] == 500
    return pool


@acceptance(3)
@pytest.mark.parametrize("kind", sorted(ADD_ONLY - {AttackKind.MALGAN}), ids=str)
def test_add_only_feasibility_sweep(victim, attack_pool, kind):
    cfg = AttackConfig(kind, seed=17)
    res = run_attack(victim, attack_pool, cfg)
    X_adv = np.vstack([r.x_adv for r in res])
    assert np.all(X_adv >= attack_pool)
    assert all(r.iterations_used <= cfg.budget for r in res)
    if kind in COUNT_BOUNDED:
        assert max(r.n_changed for r in res) <= cfg.budget


@acceptance(3)
def test_malgan_feasibility_sweep(victim, attack_pool, malgan_run):
    _, art, _ = malgan_run
    res = malgan_attack(art, victim, attack_pool, seed=17)
    assert len(res) == 500
    assert np.all(np.vstack([r.x_adv for r in res]) >= attack_pool)


# --------------------------------------------------------------------------- 4

def _all_bit_vectors(d: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.uint8)


def _feasible(kind: AttackKind, X: np.ndarray, x: np.ndarray) -> np.ndarray:
    if kind in ADD_ONLY:
        return np.all(X >= x, axis=1)
    if kind in (AttackKind.DEC_POS, AttackKind.RANDOM_DEC_POS):
        return np.all(X <= x, axis=1)
    return np.ones(X.shape[0], dtype=bool)


@pytest.fixture(scope="module")
def brute_force_cases():
    """Fifty (net, x) pairs with d <= 12, each x initially detected as malware."""
    cases = []
    seed = 0
    while len(cases) < 50:
        rng = np.random.default_rng(seed)
        d = int(rng.integers(4, 13))
        net = small_net(seed, d=d, hidden=(int(rng.integers(3, 9)),))
        net.biases[-1][:] = (0.0, 0.5)
        x = (rng.random(d) < 0.4).astype(np.uint8)
        if classify(net, x)[0] == MALWARE:
            cases.append((net, x))
        seed += 1
    return cases


@pytest.fixture(scope="module")
def small_malgan():
    spec = SynthSpec(n_benign=200, n_malware=200, d=12, n_malware_markers=3, n_benign_markers=3, seed=8)
    ds = generate_synthetic(spec)
    cfg = MalganConfig(noise_dim=4, generator_hidden=16, discriminator_hidden=16, epochs=5,
                       blackbox_epochs=10, batch_size=32, seed=8)
    bb = train_blackbox(ds, cfg)
    mal = ds.malware()
    mal = mal[classify(bb, mal) == MALWARE][:50]
    return bb, train_malgan(ds.malware(), ds.benign(), bb, cfg), mal


@acceptance(4)
def test_brute_force_minimal_change(brute_force_cases, small_malgan):
    start = time.perf_counter()
    checked = evaded_total = 0

    def check(net, x, kind, r, cube, benign_cube):
        nonlocal checked, evaded_total
        feasible = _feasible(kind, cube, x)
        assert feasible[np.flatnonzero((cube == r.x_adv).all(axis=1))[0]]
        assert r.evaded == (classify(net, r.x_adv)[0] == BENIGN)
        if r.evaded:
            evaded_total += 1
            dist = np.sum(cube != x, axis=1)
            assert dist[feasible & benign_cube].min() <= r.n_changed
        checked += 1

    cubes = {}
    for net, x in brute_force_cases:
        d = x.size
        cube = cubes.setdefault(d, _all_bit_vectors(d))
        benign_cube = classify(net, cube) == BENIGN
        for kind in NON_GAN:
            (r,) = run_attack(net, x[None, :], AttackConfig(kind, seed=1))
            check(net, x, kind, r, cube, benign_cube)

    bb, art, mal = small_malgan
    cube = _all_bit_vectors(12)
    benign_cube = classify(bb, cube) == BENIGN
    for r, x in zip(malgan_attack(art, bb, mal, seed=1), mal):
        check(bb, x, AttackKind.MALGAN, r, cube, benign_cube)

    assert checked == 50 * len(NON_GAN) + len(mal) and evaded_total > 0
    assert time.perf_counter() - start < 60.0


# --------------------------------------------------------------------------- 5

@acceptance(5)
def test_jsma_and_inc_neg_are_identical():
    rng = np.random.default_rng(5)
    for case in range(100):
        d = int(rng.integers(5, 40))
        net = small_net(case, d=d, hidden=(int(rng.integers(3, 12)),))
        net.biases[-1][:] = (0.0, float(rng.uniform(0, 3)))
        x = (rng.random(d) < 0.3).astype(np.uint8)
        cfg = AttackConfig(AttackKind.JSMA, budget=int(rng.integers(1, 26)))
        a = jsma_attack(net, x, cfg)
        b = feature_flip_attack(net, x, "inc_neg", False, replace(cfg, kind=AttackKind.INC_NEG))
        assert np.array_equal(a.x_adv, b.x_adv) and a.x_adv.dtype == b.x_adv.dtype
        assert (a.n_changed, a.evaded, a.iterations_used) == (b.n_changed, b.evaded, b.iterations_used)


# --------------------------------------------------------------------------- 6

@pytest.fixture(scope="module")
def victim_rows(victim, splits):
    test = splits[2]
    mal = test.malware()
    natural = harness.evaluate_model(victim, test).fnr
    rows = {k: harness.evaluate_attack(victim, run_attack(victim, mal, AttackConfig(k, seed=6)), test, k.value)
            for k in NON_GAN}
    return natural, rows


@acceptance(6)
def test_attack_ordering(victim_rows):
    natural, rows = victim_rows
    assert rows[AttackKind.JSMA].evasion > natural
    for kind, row in rows.items():
        assert row.evasion >= natural, kind
    assert abs(rows[AttackKind.RANDOM_INC_NEG].evasion - natural) <= 0.03


# --------------------------------------------------------------------------- 7

@acceptance(7)
def test_adversarial_training_halves_dfgsm_evasion(victim, adv_trained, splits):
    test = splits[2]
    mal = test.malware()
    cfg = AttackConfig(AttackKind.DFGSM_K, seed=7)
    undefended = evasion(run_attack(victim, mal, cfg))
    defended = evasion(run_attack(adv_trained, mal, cfg))
    assert undefended > 0 and defended <= 0.5 * undefended, (defended, undefended)
    acc_u = harness.evaluate_model(victim, test).acc
    acc_d = harness.evaluate_model(adv_trained, test).acc
    assert abs(acc_u - acc_d) <= 0.05


# --------------------------------------------------------------------------- 8

def always_malware(d: int) -> Wrapped:
    spec = (nn.LayerSpec(d, 2, "softmax"),)
    return Wrapped(nn.Network(spec, [np.zeros((d, 2))], [np.array([0.0, 10.0])]))


@acceptance(8)
def test_degenerate_model_is_flagged(monkeypatch):
    cfg = load_config(DATA / "grid.ini")
    cfg = replace(cfg, attacks=[AttackConfig(AttackKind.JSMA)], defenses=["distillation"],
                  train=replace(cfg.train, epochs=5))
    real = harness.train_defense

    def fake(c, name, train, index=0):
        return always_malware(train.d) if name == "distillation" else real(c, name, train, index)

    monkeypatch.setattr(harness, "train_defense", fake)
    rep = harness.run_experiment(cfg)
    undef, dist = rep.predictors
    assert dist.metrics.fpr == 1.0 and any("degenerate" in f for f in dist.flags)
    assert not undef.flags
    assert "degenerate" in harness.format_markdown(rep)
    assert "degenerate" in harness.format_csv(rep)["metrics.csv"]


@acceptance(8)
def test_degenerate_threshold_boundary():
    y = np.array([0] * 100 + [1] * 10)
    for n_fp, flagged in ((99, True), (100, True), (98, False)):
        pred = np.array([1] * n_fp + [0] * (100 - n_fp) + [1] * 10)
        assert harness.is_degenerate(harness.metrics_from_predictions(pred, y)) is flagged


# --------------------------------------------------------------------------- 9

@acceptance(9)
@pytest.mark.parametrize("p", [0.05, 0.1, 0.3, 0.5])
def test_rfn_mask_zero_fraction(p):
    M = nullification_masks(np.random.default_rng(9), 10_000, 500, p)
    assert abs(np.mean(M == 0) - p) <= 0.01


@acceptance(9)
def test_rfn_zero_rate_is_plain_training(splits, experiment_cfg):
    train = splits[0]
    arch = harness.victim_arch(experiment_cfg, train.d)
    tcfg = replace(experiment_cfg.train, epochs=2)
    rfn = rfn_train(train, arch, RFNConfig(rate=0.0), tcfg)
    plain = fit_network(arch, train.X, train.y, tcfg)
    assert rfn.network.digest() == plain.digest()


# --------------------------------------------------------------------------- 10

@acceptance(10)
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 20), width=st.integers(1, 10))
def test_ensemble_identity_and_normalisation(seed, d, width):
    rng = np.random.default_rng(seed)
    X = (rng.random((16, d)) < 0.5).astype(float)
    net = small_net(seed, d=d, hidden=(width,))
    single = net.predict_proba(X)
    same = Ensemble([net, net.copy(), net.copy()]).predict_proba(X)
    np.testing.assert_allclose(same, single, atol=1e-12, rtol=0)
    mixed = Ensemble([net, small_net(seed + 1, d=d, hidden=(width, 3)), small_net(seed + 2, d=d, hidden=())])
    p = mixed.predict_proba(X)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# --------------------------------------------------------------------------- 11

@acceptance(11)
def test_malgan_bookkeeping_and_feasibility(malgan_run, splits):
    blackbox, art, val = malgan_run
    assert art.best_evasion == max(art.per_epoch_evasion)
    for X in (val.malware(), splits[2].malware()):
        res = malgan_attack(art, blackbox, X, seed=11)
        X_adv = np.vstack([r.x_adv for r in res])
        assert np.all(X_adv >= X)
        np.testing.assert_array_equal(np.maximum(X_adv, X), X_adv)
    # OR-feasibility on raw generator scores, including extreme inputs
    scores = np.random.default_rng(0).random((20, val.d))
    x = (np.random.default_rng(1).random((20, val.d)) < 0.3).astype(float)
    np.testing.assert_array_equal(binarize(scores, x), np.maximum(x, scores > 0.5))
    natural_fnr = float(np.mean(classify(blackbox, val.malware()) == BENIGN))
    assert art.best_evasion >= natural_fnr


# --------------------------------------------------------------------------- 12, 13

@pytest.fixture(scope="module")
def grid_runs(tmp_path_factory):
    dirs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"grid{i}")
        assert main(["experiment", "--config", str(DATA / "grid.ini"), "--out", str(out)]) == 0
        dirs.append(out)
    return dirs


@acceptance(12)
def test_experiment_is_byte_identical(grid_runs):
    a, b = grid_runs
    assert sorted(p.name for p in a.iterdir()) == sorted(GRID_FILES)
    for name in GRID_FILES:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


@acceptance(13)
def test_grid_report_shape(grid_runs):
    rep = load_report(grid_runs[0])
    assert [p.label for p in rep.predictors] == list(harness.PREDICTOR_LABELS.values())
    expected = ["natural"] + [k.value for k in TABLE_ORDER]
    for p in rep.predictors:
        assert [r.attack for r in p.rows] == expected
    md = (grid_runs[0] / "report.md").read_text()
    grid = md.split("## Evasion (%)")[1].split("\n## ")[0]
    body = [ln for ln in grid.splitlines() if ln.startswith("| ") and not ln.startswith("| Attack")]
    assert len(body) == 13
    for ln in body:
        cells = [c.strip() for c in ln.strip("|").split("|")][1:]
        assert len(cells) == 5 and all(c.count(".") == 1 and len(c.split(".")[1]) == 1 for c in cells)


@acceptance(13)
@pytest.mark.parametrize("name", ["report.md", "report.csv", "metrics.csv"])
def test_grid_report_matches_golden(grid_runs, name):
    assert (grid_runs[0] / name).read_text() == (GOLDEN / "grid" / name).read_text()


@acceptance(13)
def test_rendering_conventions_match_handmade_golden(tmp_path):
    harness.render_report(handmade_report(), tmp_path)
    for name in ("report.md", "report.csv", "metrics.csv"):
        assert (tmp_path / name).read_text() == (GOLDEN / "handmade" / name).read_text()
    md = (tmp_path / "report.md").read_text()
    assert "| jsma | 0.98 | 0.50 | 0.04 | 1.00 | 13.57 | 100.0 |" in md
