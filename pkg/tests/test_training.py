import copy

import numpy as np
import pytest

from mambahawkes.backbone import MHPModel
from mambahawkes.intensity import IntensityHead, NumericalError, QuadratureSpec
from mambahawkes.sequences import EventSequence, SequenceDataset, simulate_dataset, truncate_prefix
from mambahawkes.training import (
    AdamState,
    NextEventHead,
    TrainConfig,
    adam_step,
    finite_difference_grad,
    flatten,
    loss_and_grad,
    max_relative_error,
    predict_next,
    train_mhp,
    train_model,
    train_noHP,
    unflatten,
)

from conftest import random_sequence


def jittered(params, rng, scale):
    return {k: v + scale * rng.normal(size=np.shape(v)) for k, v in params.items()}


def gate_instance(head_kind, seed=0):
    """D=4, N=4, R=2 with two n=6 sequences and parameters moved off their init."""
    rng = np.random.default_rng(seed)
    m = MHPModel.init(2, seed=seed, d_model=4, d_state=4, n_blocks=2, d_hidden=5, d_out=3)
    m.params = jittered(m.params, rng, 0.2)
    h = IntensityHead.init(2, 3, seed=seed) if head_kind == "intensity" else NextEventHead.init(2, 3, seed=seed)
    h.params = jittered(h.params, rng, 0.3)
    seqs = [random_sequence(rng, 6, 2, sid="a"), random_sequence(rng, 6, 2, sid="b")]
    return m, h, seqs


@pytest.mark.parametrize("head_kind,mode", [
    ("intensity", "marked"), ("intensity", "paper_literal"), ("next_event", "marked"),
])
def test_gradient_matches_central_differences(head_kind, mode):
    m, h, seqs = gate_instance(head_kind)
    quad = QuadratureSpec(16)
    flat = flatten(m.params, h.params)
    _, grads = loss_and_grad(m, h, seqs, quad, mode, params=flat)

    def f(p):
        return loss_and_grad(m, h, seqs, quad, mode, params=p)[0]

    err = max_relative_error(grads, finite_difference_grad(f, flat, eps=1e-5))
    assert set(err) == set(flat)
    worst = max(err, key=err.get)
    assert err[worst] < 1e-4, worst


def test_conditional_objective_gradient():
    m, h, seqs = gate_instance("intensity", seed=1)
    flat = flatten(m.params, h.params)
    _, grads = loss_and_grad(m, h, seqs, params=flat, conditional=True)
    num = finite_difference_grad(lambda p: loss_and_grad(m, h, seqs, params=p, conditional=True)[0], flat)
    assert max(max_relative_error(grads, num).values()) < 1e-4


def test_duplicated_sequence_gives_same_gradient(rng):
    m, h, _ = gate_instance("intensity")
    s = random_sequence(rng, 5, 2)
    l1, g1 = loss_and_grad(m, h, [s])
    l2, g2 = loss_and_grad(m, h, [s, s])
    assert l1 == pytest.approx(l2, rel=1e-14)
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=1e-12, atol=1e-15)


def test_absent_type_has_zero_embedding_gradient():
    m, h, _ = gate_instance("intensity")
    s = EventSequence("a", [0.5, 1.0, 2.2, 2.5], [0, 0, 0, 0], 2)
    _, g = loss_and_grad(m, h, [s])
    # W_e is (d_model, R); column 1 embeds the absent type
    assert np.all(g["model/W_e"][:, 1] == 0.0)
    assert np.any(g["model/W_e"][:, 0] != 0.0)


def test_loss_and_grad_errors():
    m, h, _ = gate_instance("intensity")
    with pytest.raises(ValueError):
        loss_and_grad(m, h, [])
    h.params["b"] = np.array([-1e6, -1e6])
    h.params["w"][:] = 0.0
    h.params["alpha"][:] = 0.0
    with pytest.raises(NumericalError, match="'odd-one'"):
        loss_and_grad(m, h, [EventSequence("odd-one", [1.0, 2.0], [0, 1], 2)])


def test_flatten_round_trip():
    m, h, _ = gate_instance("intensity")
    mp, hp = unflatten(flatten(m.params, h.params))
    assert mp.keys() == m.params.keys() and hp.keys() == h.params.keys()


# -- Adam ------------------------------------------------------------------------------
def test_adam_zero_gradient_leaves_parameters():
    p = {"w": np.array([1.0, -2.0]), "b": np.array(0.5)}
    state = AdamState(lr=0.1)
    for _ in range(3):
        p2 = adam_step(state, p, {k: np.zeros_like(v) for k, v in p.items()})
    for k in p:
        np.testing.assert_array_equal(p2[k], p[k])


def test_adam_first_step_closed_form():
    # from zero moments the bias corrections cancel: m_hat = g, v_hat = g^2
    g = np.array([0.3, -4.0, 1e-9])
    state = AdamState(lr=0.01)
    new = adam_step(state, {"x": np.zeros(3)}, {"x": g})["x"]
    np.testing.assert_allclose(new, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert state.step == 1
    assert state.m["x"].shape == state.v["x"].shape == (3,)


def test_adam_second_step_hand_check():
    state = AdamState(lr=1.0, beta1=0.5, beta2=0.75, eps=0.0)
    x = adam_step(state, {"x": np.array(0.0)}, {"x": np.array(2.0)})
    x = adam_step(state, x, {"x": np.array(1.0)})
    # m = 0.5*1 + 0.25*2 = 1.0 -> /0.75; v = 0.25*1 + 0.1875*4 = 1.0 -> /0.4375
    m_hat, v_hat = 1.0 / 0.75, 1.0 / 0.4375
    assert float(x["x"]) == pytest.approx(-1.0 - m_hat / np.sqrt(v_hat), rel=1e-14)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"x": np.zeros(2)}, {"x": np.zeros(3)})


# -- config ------------------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ValueError, match="unknown config key"):
        TrainConfig.from_dict({"lr": 1e-3, "learning_rate": 1e-3})
    with pytest.raises(ValueError):
        TrainConfig(loglik_mode="other")
    with pytest.raises(ValueError):
        TrainConfig(variant="transformer")
    with pytest.raises(ValueError):
        TrainConfig(objective="partial")
    cfg = TrainConfig.from_dict({"lr": 0.5})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- training loops --------------------------------------------------------------------------
SMALL = dict(d_model=4, d_state=3, n_blocks=1, d_hidden=8, d_out=4, epochs=6, batch_size=16, lr=1e-2)


def test_training_is_deterministic_and_log_is_monotone():
    ds = simulate_dataset("poisson", 60, 0, rate=1.0, horizon=8.0, num_types=2)
    a = train_mhp(ds, dict(SMALL, seed=3))
    b = train_mhp(ds, dict(SMALL, seed=3))
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()
    for k in a.head.params:
        assert a.head.params[k].tobytes() == b.head.params[k].tobytes()
    best = [r["best_val_ll_per_event"] for r in a.log]
    assert all(np.diff(best) >= 0)
    assert best[-1] == max(r["val_ll_per_event"] for r in a.log)
    assert all(np.isfinite(r["train_nll"]) for r in a.log[1:])


def test_train_rejects_bad_config():
    ds = simulate_dataset("poisson", 4, 0, rate=1.0, horizon=5.0)
    with pytest.raises(ValueError, match="fit_hawkes"):
        train_model(ds, SMALL | {"variant": "hawkes"})
    with pytest.raises(ValueError, match="unknown"):
        train_mhp(ds, {"bogus": 1})


def alternating(n_seqs, n=8):
    seqs = [EventSequence(f"s{i}", np.arange(1.0, n + 1.0), np.arange(n) % 2 if i % 2 else (np.arange(n) + 1) % 2, 2)
            for i in range(n_seqs)]
    return SequenceDataset(seqs)


def test_noHP_learns_alternating_types():
    ds = alternating(32)
    res = train_noHP(ds, dict(SMALL, epochs=60, truncate=None, patience=60))
    s = ds.sequences[1]
    probs, gaps = predict_next(res.model, res.head, s)
    assert probs.shape == (len(s), 2) and gaps.shape == (len(s),)
    pred = probs[:-1].argmax(axis=1)
    assert np.mean(pred == s.types[1:]) == 1.0


def test_noHP_prefix_predictions_are_causal(rng):
    m = MHPModel.init(3, seed=0, d_model=4, d_state=3, n_blocks=2, d_hidden=5, d_out=3)
    head = NextEventHead.init(3, 3, seed=1)
    s = random_sequence(rng, 7, 3)
    probs, gaps = predict_next(m, head, s)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-14)
    for k in (1, 4):
        p_k, g_k = predict_next(m, head, truncate_prefix(s, k))
        assert np.array_equal(p_k, probs[:k]) and np.array_equal(g_k, gaps[:k])


def test_train_from_init_does_not_mutate_it():
    ds = simulate_dataset("poisson", 20, 1, rate=1.0, horizon=5.0)
    m = MHPModel.init(1, seed=0, d_model=4, d_state=3, n_blocks=1, d_hidden=8, d_out=4)
    h = IntensityHead.init(1, 4, seed=0)
    before = copy.deepcopy(m.params)
    train_model(ds, dict(SMALL, epochs=2), init=(m, h))
    for k in before:
        assert np.array_equal(before[k], m.params[k])
