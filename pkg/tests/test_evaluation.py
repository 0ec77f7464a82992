import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphence import evaluation as ev
from morphence import nn
from morphence.attacks import AttackSpec
from morphence.data import Dataset, TransformSpec, gen_blobs
from morphence.poolgen import GenerationFailure, PoolConfig, StudentPool, generate_pool
from morphence.scheduler import PoolManager


class TableModel:
    """Classifier that looks answers up by row index stored in the first feature."""

    def __init__(self, labels):
        self.table = np.asarray(labels)

    def labels(self, x):
        return self.table[np.asarray(x)[:, 0].astype(int)]


def rows_for(n):
    return np.arange(n, dtype=float).reshape(-1, 1)


def brute_force_average(models, adv_sets, y):
    rates = []
    for i, src in enumerate(models):
        fooling = [k for k in range(len(y)) if src.labels(adv_sets[i][k : k + 1])[0] != y[k]]
        if not fooling:
            continue
        for j, dst in enumerate(models):
            if j != i:
                hits = sum(1 for k in fooling if dst.labels(adv_sets[i][k : k + 1])[0] != y[k])
                rates.append(hits / len(fooling))
    return sum(rates) / len(rates)


# -- transferability ------------------------------------------------------------
def test_hand_computed_two_model_average():
    # set A: 10 examples, A wrong on 0..3, B wrong on 0..1 (and on 8)
    # set B: 10 examples, B wrong on 0..4, A wrong on 0 only
    y = np.zeros(10, dtype=int)
    wrong = lambda idx: np.isin(np.arange(10), idx).astype(int)
    set_a, set_b = rows_for(10), rows_for(10) + 10
    model_a = TableModel(np.concatenate([wrong([0, 1, 2, 3]), wrong([0])]))
    model_b = TableModel(np.concatenate([wrong([0, 1, 8]), wrong([0, 1, 2, 3, 4])]))
    matrix, avg = ev.avg_transferability([model_a, model_b], [set_a, set_b], y)
    assert matrix.rates[0, 1] == pytest.approx(0.5) and matrix.rates[1, 0] == pytest.approx(0.2)
    assert avg == pytest.approx(0.35)
    assert list(matrix.n_adv) == [4, 5] and np.isnan(matrix.rates[0, 0])


def test_identical_models_transfer_everything():
    y = np.zeros(8, dtype=int)
    m = TableModel([1, 0, 1, 0, 0, 1, 1, 0])
    matrix, avg = ev.avg_transferability([m, m, m], [rows_for(8)] * 3, y)
    assert avg == 1.0
    off_diag = matrix.rates[~np.eye(3, dtype=bool)]
    assert np.all(off_diag == 1.0)


def test_unfooled_source_is_excluded_not_zeroed():
    y = np.zeros(4, dtype=int)
    robust, fragile = TableModel([0] * 8), TableModel([1, 1, 0, 0, 1, 0, 0, 0])
    matrix, avg = ev.avg_transferability([robust, fragile], [rows_for(4), rows_for(4) + 4], y)
    assert np.all(np.isnan(matrix.rates[0])) and avg == 0.0
    assert matrix.n_adv[0] == 0


def test_transferability_errors():
    with pytest.raises(ValueError):
        ev.avg_transferability([TableModel([0])], [rows_for(1)], np.zeros(1, dtype=int))
    clean = TableModel([0] * 4)
    with pytest.raises(ev.UndefinedMetric):
        ev.avg_transferability([clean, clean], [rows_for(4)] * 2, np.zeros(4, dtype=int))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), size=st.integers(1, 30))
def test_matches_brute_force_recount(seed, size):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, size)
    models = [TableModel(rng.integers(0, 3, 3 * size)) for _ in range(3)]
    adv_sets = [rows_for(size) + i * size for i in range(3)]
    try:
        _, avg = ev.avg_transferability(models, adv_sets, y)
    except ev.UndefinedMetric:
        assert all(np.all(m.labels(a) == y) for m, a in zip(models, adv_sets))
        return
    assert avg == pytest.approx(brute_force_average(models, adv_sets, y), abs=1e-12)


def test_rates_stay_in_unit_interval_on_a_real_pool(desk_pool, desk):
    small = desk.test.subset(np.arange(120))
    matrix, avg = ev.pool_transferability(desk_pool, small, AttackSpec("fgsm", 0.1))
    defined = matrix.rates[~np.isnan(matrix.rates)]
    assert np.all((defined >= 0) & (defined <= 1)) and 0 <= avg <= 1
    assert matrix.provenance["attack"]["epsilon"] == 0.1


# -- FRQ --------------------------------------------------------------------------
def test_frq_identical_pool_is_zero():
    y = np.zeros(6, dtype=int)
    first = TableModel([1, 1, 0, 0, 1, 0])
    report = ev.frq(first, [first, first], rows_for(6), y)
    assert report.b == 3 and report.frq == [0.0, 0.0]


def test_frq_perfect_later_pool_is_one():
    y = np.array([2, 1, 0, 1])
    report = ev.frq(TableModel([0, 0, 0, 0]), [TableModel(y)], rows_for(4), y)
    assert report.frq == [1.0] and report.a == [3]


def test_frq_undefined_without_successes():
    y = np.zeros(3, dtype=int)
    with pytest.raises(ev.UndefinedMetric):
        ev.frq(TableModel(y), [TableModel(y)], rows_for(3), y)


def test_frq_aggregates():
    y = np.zeros(4, dtype=int)
    first = TableModel([1, 1, 1, 1])
    report = ev.frq(first, [TableModel([0, 1, 1, 1]), TableModel([0, 0, 0, 1])], rows_for(4), y)
    assert report.frq == [0.25, 0.75]
    assert report.mean_over_pools == pytest.approx(0.5) and report.pooled == pytest.approx(0.5)
    assert [r["pool"] for r in report.rows()] == [1, 2]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), size=st.integers(1, 40), later=st.integers(1, 4))
def test_frq_accounting_identity(seed, size, later):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size)
    first = TableModel(rng.integers(0, 2, size))
    if np.all(first.table == y):
        first.table[0] = 1 - y[0]
    pools = [TableModel(rng.integers(0, 2, size)) for _ in range(later)]
    report = ev.frq(first, pools, rows_for(size), y)
    for acc, a, newly in zip(report.accuracies, report.a, report.newly_fooled):
        assert 0 <= a <= report.b
        assert acc - report.first_accuracy == pytest.approx((a - newly) / size, abs=1e-12)


# -- robustness -----------------------------------------------------------------
@pytest.fixture(scope="module")
def blobs_setup():
    full = gen_blobs(120, 4, 0.05, seed=0)
    train, test = full.split(0.25, seed=0)
    base = nn.train(nn.init_model([2, 32, 4], seed=0), train, lr=0.2, epochs=40)
    return base, train, test


def test_no_attack_row_is_clean_accuracy(blobs_setup):
    base, _, test = blobs_setup
    rows = ev.robustness_eval(base, [AttackSpec("fgsm", 0.3)], test, base, provenance={"target": "fixed"})
    assert rows[0]["attack"] == "No Attack" and rows[0]["accuracy"] == nn.accuracy(base, test)
    assert rows[1]["attack"] == "fgsm" and rows[1]["accuracy"] < rows[0]["accuracy"]
    assert all(r["target"] == "fixed" for r in rows)
    assert json.loads(rows[1]["attack_spec"])["epsilon"] == 0.3


def test_black_box_rows_count_queries(blobs_setup):
    base, train, test = blobs_setup
    pool = StudentPool([base, base], [False, False], [TransformSpec()] * 2, 1)
    manager = PoolManager([pool], fixed_qmax=10**9)
    small = test.subset(np.arange(10))
    attacks = [AttackSpec("spsa", 0.3, nb_iter=3), AttackSpec("copycat+fgsm", 0.3)]
    rows = ev.robustness_eval(manager, attacks, small, base, probe=train)
    assert [r["attack"] for r in rows] == ["No Attack", "spsa", "copycat+fgsm"]
    assert rows[1]["queries"] == 10 * 3 * 2 * 64 and rows[2]["queries"] == len(train)
    assert rows[0]["accuracy"] == float(np.mean(nn.predict(base, small.x) == small.y))


class FlakyTarget:
    def __init__(self, model, budget):
        self.model, self.budget = model, budget

    def labels(self, x):
        self.budget -= 1
        if self.budget < 0:
            raise ConnectionResetError("target went away")
        return nn.predict(self.model, x)


def test_endpoint_failure_keeps_partial_rows(blobs_setup):
    base, _, test = blobs_setup
    with pytest.raises(ev.PartialResults) as info:
        ev.robustness_eval(FlakyTarget(base, 2), [AttackSpec("fgsm", 0.1)] * 3, test, base)
    assert [r["attack"] for r in info.value.rows] == ["No Attack", "fgsm"]
    assert isinstance(info.value.cause, ConnectionResetError)


def test_black_box_attack_needs_a_target(blobs_setup):
    base, _, test = blobs_setup
    with pytest.raises(ValueError):
        ev.craft(AttackSpec("spsa", 0.3), test, base)
    with pytest.raises(ValueError):
        ev.craft(AttackSpec("copycat+cw", 0.3), test, base, base)


def test_write_csv_unions_columns(tmp_path):
    path = ev.write_csv([{"a": 1}, {"a": 2, "b": 3}], tmp_path / "r" / "out.csv")
    with open(path) as fh:
        assert list(csv.DictReader(fh)) == [{"a": "1", "b": ""}, {"a": "2", "b": "3"}]


# -- sweeps ---------------------------------------------------------------------
FAST_MIX = (AttackSpec("pgd", 0.1, max_iter=5), AttackSpec("cw", 0.1, steps=10, step_size=0.05))


def fast_cfg(**kw):
    return PoolConfig(**{"n": 3, "p": 1, "lam": 0.05, "adv_mixture": FAST_MIX, **kw})


def test_default_grids():
    cfg = PoolConfig()
    assert ev.default_grid("p", cfg) == [0, 1, 2, 3, 4]
    lam = ev.default_grid("lambda", cfg)
    assert all(b > a for a, b in zip(lam, lam[1:])) and lam[0] == 0.01
    assert ev.default_grid("transform", cfg) == [True, False]


def test_p_sweep_rows_carry_provenance(blobs_setup, tmp_path):
    base, train, test = blobs_setup
    cfg = fast_cfg()
    result = ev.sweep("p", base, train, test, cfg, [AttackSpec("fgsm", 0.1)])
    assert sorted({r["p"] for r in result.rows}) == [0, 1, 2, 3]
    assert all(r["status"] == "ok" for r in result.rows)
    row = next(r for r in result.rows if r["p"] == 2 and r["attack"] == "fgsm")
    regenerated = generate_pool(base, PoolConfig.from_dict(json.loads(row["config"])), train, test)
    again = ev.robustness_eval(regenerated, [AttackSpec(**json.loads(row["attack_spec"]))], test, base)
    assert again[1]["accuracy"] == row["accuracy"]
    path = ev.write_csv(result.rows, tmp_path / "sweep.csv")
    header = path.read_text().splitlines()[0].split(",")
    for column in ("seed", "n", "p", "lambda", "attack_spec", "config", "transferability"):
        assert column in header


def test_parallel_sweep_matches_sequential(blobs_setup):
    base, train, test = blobs_setup
    args = ("transform", base, train, test, fast_cfg(p=0), [AttackSpec("fgsm", 0.1)])
    seq = ev.sweep(*args)
    par = ev.sweep(*args, workers=2)
    assert seq.rows == par.rows


def test_lambda_sweep_reports_first_failure(blobs_setup, monkeypatch):
    base, train, test = blobs_setup
    real = ev.generate_pool

    def gated(b, cfg, *a, **k):
        if cfg.lam >= 0.2:
            raise GenerationFailure("gate")
        return real(b, cfg, *a, **k)

    monkeypatch.setattr(ev, "generate_pool", gated)
    result = ev.sweep("lambda", base, train, test, fast_cfg(p=0), [], grid=[0.01, 0.1, 0.2, 0.4])
    assert result.lambda_max == 0.2
    assert [r["status"] for r in result.rows] == ["ok", "ok", "failed", "failed"]
    assert all(json.loads(r["config"])["max_backoff"] == 0 for r in result.rows)
    stopped = ev.sweep("lambda", base, train, test, fast_cfg(p=0), [], grid=[0.1, 0.2, 0.4], stop_at_lambda_max=True)
    assert [r["status"] for r in stopped.rows] == ["ok", "failed"]


def test_real_gate_failure_sets_lambda_max(blobs_setup):
    base, train, test = blobs_setup
    cfg = fast_cfg(p=0, epoch_cap=1, recovery_rounds=0, max_acc_loss=0.0)
    result = ev.sweep("lambda", base, train, test, cfg, [], grid=[1e-9, 5.0])
    assert result.lambda_max == 5.0
    assert [r["status"] for r in result.rows] == ["ok", "failed"]


def test_sweep_input_validation(blobs_setup):
    base, train, test = blobs_setup
    with pytest.raises(ValueError):
        ev.sweep("p", base, train, test, fast_cfg(), [], grid=[])
    with pytest.raises(ValueError):
        ev.sweep("lambda", base, train, test, fast_cfg(), [], grid=[0.1, 0.05])
    with pytest.raises(ValueError):
        ev.sweep("depth", base, train, test, fast_cfg(), [], grid=[1])


def test_labeler_rejects_unknown_targets():
    with pytest.raises(TypeError):
        ev.labeler(3)
