import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphence import attacks, nn
from morphence.attacks import AttackSpec, QueryOracle
from morphence.data import gen_blobs


def linear(weight):
    w = np.asarray(weight, dtype=np.float64)
    return nn.Model([nn.Layer(w, np.zeros(w.shape[1]), "linear")])


def test_fgsm_follows_the_gradient_sign():
    # d loss / dx for label 0 is proportional to column 1 minus column 0: [+2.3, -0.4]
    m = linear([[0.0, 2.3], [0.0, -0.4]])
    out = attacks.fgsm(m, nn.Batch([[0.5, 0.5]], [0]), 0.1)
    np.testing.assert_allclose(out, [[0.6, 0.4]])


def test_fgsm_saturates_at_bounds():
    m = linear([[0.0, 2.3], [0.0, -0.4]])
    out = attacks.fgsm(m, nn.Batch([[0.95, 0.05]], [0]), 0.3)
    assert out.tolist() == [[1.0, 0.0]]


def test_fgsm_raises_error_rate_on_blobs():
    blobs = gen_blobs(60, 3, 0.06, seed=0)
    m = nn.train(nn.init_model([2, 16, 3], seed=0), blobs, lr=0.2, epochs=40)
    adv = attacks.fgsm(m, blobs, 0.15)
    assert np.mean(nn.predict(m, adv) != blobs.y) > 1 - nn.accuracy(m, blobs)


def test_pgd_step_schedule():
    spec = AttackSpec("pgd", 0.3)
    steps = attacks.pgd_step_sizes(spec)
    assert len(steps) == 100
    assert steps[0] == pytest.approx(2.0 * 0.3 / 100) and steps[-1] == pytest.approx(0.5 * 0.3 / 100)
    ratios = steps[1:] / steps[:-1]
    np.testing.assert_allclose(ratios, ratios[0])
    assert attacks.pgd_step_sizes(AttackSpec("pgd", 0.3, max_iter=1)).tolist() == [pytest.approx(0.15)]


def test_margin_definition():
    z = np.array([[3.0, 1.0, 2.5], [0.0, 4.0, 1.0]])
    np.testing.assert_allclose(attacks.margin(z, np.array([0, 2])), [0.5, -3.0])


def test_white_box_attacks_beat_the_desk_model(desk):
    sub = desk.test.subset(np.arange(150))
    for kind in ("pgd", "cw"):
        adv = attacks.white_box(desk.base, sub, AttackSpec(kind, 0.3))
        assert nn.accuracy(desk.base, sub.with_inputs(adv)) < 0.1


def test_cw_returns_clean_input_when_it_cannot_succeed(desk):
    sub = desk.test.subset(np.arange(20))
    adv = attacks.cw(desk.base, sub, AttackSpec("cw", 1e-4, steps=5))
    still_right = nn.predict(desk.base, adv) == sub.y
    assert np.array_equal(adv[still_right], sub.x[still_right])


_MODELS = {}


def _model(seed):
    if seed not in _MODELS:
        _MODELS[seed] = nn.init_model([6, 8, 3], seed=seed)
    return _MODELS[seed]


@settings(max_examples=30, deadline=None)
@given(
    st.sampled_from(["fgsm", "pgd", "cw", "spsa"]),
    st.sampled_from([0.3, 0.5]),
    st.integers(0, 4),
    st.integers(0, 10_000),
)
def test_every_attack_stays_in_the_ball_and_box(kind, eps, model_seed, data_seed):
    rng = np.random.default_rng(data_seed)
    x = rng.random((8, 6))
    y = rng.integers(0, 3, 8)
    m = _model(model_seed)
    spec = AttackSpec(kind, eps, max_iter=10, steps=10, nb_iter=2, spsa_samples=8, learning_rate=0.2, seed=data_seed)
    if kind == "spsa":
        adv = attacks.spsa_batch(QueryOracle.from_model(m), nn.Batch(x, y), spec)
    else:
        adv = attacks.white_box(m, nn.Batch(x, y), spec)
    assert np.max(np.abs(adv - x)) <= eps + 1e-6
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_spsa_gradient_estimates_a_linear_slope():
    a = np.array([0.5, -1.0, 2.0])
    est = attacks.spsa_gradient(lambda pts: pts @ a, np.zeros(3), 0.01, 20_000, np.random.default_rng(0))
    np.testing.assert_allclose(est, a, atol=0.05)


def test_spsa_query_budget_and_progress(desk):
    oracle = QueryOracle.from_model(desk.base)
    x, y = desk.test.x[0], int(desk.test.y[0])
    spec = AttackSpec("spsa", 0.3, nb_iter=10, spsa_samples=128)
    adv = attacks.spsa(oracle, x, y, spec)
    assert oracle.count == 10 * 128
    before = attacks.margin(nn.forward(desk.base, x[None]), np.array([y]))[0]
    after = attacks.margin(nn.forward(desk.base, adv[None]), np.array([y]))[0]
    assert after < before


def test_spsa_with_zero_iterations_is_a_copy():
    x = np.array([0.2, 0.4])
    out = attacks.spsa(QueryOracle.from_model(linear(np.eye(2))), x, 0, AttackSpec("spsa", 0.3, nb_iter=0))
    assert np.array_equal(out, x) and out is not x


def test_spsa_works_on_confidence_only_oracle(desk):
    oracle = QueryOracle.from_model(desk.base, "confidence")
    adv = attacks.spsa(oracle, desk.test.x[1], int(desk.test.y[1]), AttackSpec("spsa", 0.3))
    assert np.max(np.abs(adv - desk.test.x[1])) <= 0.3 + 1e-9
    with pytest.raises(attacks.AttackError):
        attacks.spsa(QueryOracle.from_model(desk.base, "label"), desk.test.x[1], 0, AttackSpec("spsa", 0.3))


def test_oracle_counts_by_batch_size_across_threads():
    oracle = QueryOracle.from_model(linear(np.eye(2)), "label")
    x = np.zeros((5, 2))
    threads = [threading.Thread(target=lambda: [oracle(x) for _ in range(20)]) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert oracle.count == 4 * 20 * 5


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "fgsm", "epsilon": 0.0},
        {"kind": "deepfool"},
        {"kind": "pgd", "max_iter": 0},
        {"kind": "spsa", "spsa_samples": 7},
        {"kind": "fgsm", "targeted": 3},
    ],
)
def test_attack_spec_validation(kwargs):
    with pytest.raises(attacks.AttackError):
        AttackSpec(**kwargs)


def test_copycat_learns_the_target(desk):
    oracle = QueryOracle.from_model(desk.base, "label")
    result = attacks.copycat_extract(oracle, desk.train, desk.base, epochs=30, seed=0)
    assert result.queries == len(desk.train)
    assert result.agreement > 0.85
    assert result.model.sizes == desk.base.sizes
    with pytest.raises(attacks.AttackError):
        attacks.copycat_extract(oracle, desk.train.subset(np.arange(0)), desk.base)
