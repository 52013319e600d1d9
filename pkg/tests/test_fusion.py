import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mambahawkes.fusion import (
    EmbeddingBundle,
    FusionConfig,
    FusionHead,
    Neighbor,
    attention_weights,
    attentive_pool,
    bipolar_attention,
    ffn_integrate,
    interaction_features,
    load_bundles,
    load_fusion,
    make_synthetic_bundles,
    mse_loss_and_grad,
    predict,
    retrieval_aggregate,
    retrieval_weights,
    save_bundles,
    save_fusion,
    score_sas_aggregate,
    train_fusion,
)
from mambahawkes.metrics import nmse
from mambahawkes.training import finite_difference_grad, max_relative_error

from conftest import fusion_oracle


def random_head(d=2, seed=0, alpha=0.3, mode="full"):
    rng = np.random.default_rng(seed + 50)
    head = FusionHead.init(d, seed=seed, alpha=alpha, mode=mode)
    # W_pred starts at zero; give it weight so every path is exercised
    head.params["W_pred"] = rng.normal(size=head.params["W_pred"].shape)
    return head


def bundle(d=2, seed=0, S=1, K=3, n_w=2):
    rng = np.random.default_rng(seed)
    nbs = [Neighbor(rng.normal(size=(K, d)), rng.normal(size=(n_w, d)), float(rng.normal()), float(rng.normal()))
           for _ in range(S)]
    return EmbeddingBundle("v", rng.normal(size=(K, d)), rng.normal(size=(n_w, d)), nbs,
                           sas_users=rng.normal(size=(3, d)), sas_item=rng.normal(size=d),
                           likelihood_mhp=-4.2, likelihood_hawkes=-5.0, likelihood_nohp=-1.0, target=2.0)


# -- bipolar attention ----------------------------------------------------------------------
def test_alpha_one_makes_negative_branch_uniform(rng):
    head = random_head(d=3, alpha=1.0)
    assert head.gamma == 0.0
    X_c, X_t = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    w = attention_weights(head, X_c, X_t, branch="N")
    np.testing.assert_allclose(w, 1 / 5, rtol=1e-15)
    T_P, T_N, C_P, C_N = bipolar_attention(head, X_c, X_t)
    V = X_t @ head.params["W_C_N"]
    np.testing.assert_allclose(T_N, np.tile(V.mean(axis=0), (4, 1)), rtol=1e-12)
    assert T_P.shape == T_N.shape == (4, 3) and C_P.shape == C_N.shape == (5, 3)


def test_identical_keys_give_uniform_weights(rng):
    head = random_head(d=3)
    X_c = rng.normal(size=(2, 3))
    X_t = np.tile(rng.normal(size=3), (4, 1))
    np.testing.assert_allclose(attention_weights(head, X_c, X_t, branch="P"), 0.25, rtol=1e-14)


@pytest.mark.parametrize("alpha", [0.0, 0.2, 1.0])
def test_single_key_returns_its_value(rng, alpha):
    head = random_head(d=3, alpha=alpha)
    X_c, X_t = rng.normal(size=(3, 3)), rng.normal(size=(1, 3))
    T_P, T_N, _, _ = bipolar_attention(head, X_c, X_t)
    np.testing.assert_allclose(T_P, np.tile(X_t @ head.params["W_C_P"], (3, 1)), rtol=1e-14)
    np.testing.assert_allclose(T_N, np.tile(X_t @ head.params["W_C_N"], (3, 1)), rtol=1e-14)


@given(st.floats(0.0, 1.0), st.integers(1, 5), st.integers(1, 5), st.integers(0, 100))
def test_attention_rows_are_stochastic(alpha, nq, nk, seed):
    rng = np.random.default_rng(seed)
    head = FusionHead.init(3, seed=seed, alpha=alpha)
    assert head.gamma == -(1.0 - alpha)
    for br in ("P", "N"):
        w = attention_weights(head, 3 * rng.normal(size=(nq, 3)), 3 * rng.normal(size=(nk, 3)), branch=br)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-14)


def test_width_mismatch_rejected(rng):
    head = random_head(d=3)
    with pytest.raises(ValueError):
        bipolar_attention(head, rng.normal(size=(2, 3)), rng.normal(size=(2, 4)))
    with pytest.raises(ValueError):
        bipolar_attention(head, np.zeros((0, 3)), rng.normal(size=(2, 3)))
    with pytest.raises(ValueError):
        EmbeddingBundle("x", np.zeros((2, 3)), np.zeros((2, 4)))


# -- FFN integration ----------------------------------------------------------------------------
def test_ffn_zero_first_layer_erases_branches(rng):
    head = random_head(d=2)
    head.params["W1_t"][:] = 0.0
    head.params["W1_c"][:] = 0.0
    X_t, X_c = rng.normal(size=(2, 2)), rng.normal(size=(3, 2))
    branches = (rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
    T, C = ffn_integrate(head, X_t, X_c, branches)
    np.testing.assert_allclose(T, np.maximum(X_t, 0) @ head.params["W2_t"], rtol=1e-14)
    np.testing.assert_allclose(C, np.maximum(X_c, 0) @ head.params["W2_c"], rtol=1e-14)


def test_ffn_residual_off_case(rng):
    head = random_head(d=2)
    head.params["W2_t"] = np.eye(2)
    head.params["W1_t"] = np.abs(head.params["W1_t"])
    C_P, C_N = np.abs(rng.normal(size=(2, 2))), np.abs(rng.normal(size=(2, 2)))
    T, _ = ffn_integrate(head, np.zeros((2, 2)), np.zeros((3, 2)), (np.zeros((3, 2)),) * 2 + (C_P, C_N))
    np.testing.assert_array_equal(T, np.hstack([C_P, C_N]) @ head.params["W1_t"])


def test_ffn_hand_oracle():
    head = random_head(d=2)
    p = head.params
    p["W1_t"] = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, -1.0], [2.0, 0.0]])
    p["W2_t"] = np.array([[1.0, 2.0], [-1.0, 0.5]])
    X_t = np.array([[0.1, -0.2], [1.0, 0.0]])
    C_P = np.array([[1.0, 2.0], [0.0, -3.0]])
    C_N = np.array([[0.0, 1.0], [1.0, 1.0]])
    # row 0: X + [1,2,0,1]W1 = [0.1,-0.2] + [1+2, 2] = [3.1, 1.8]
    # row 1: X + [0,-3,1,1]W1 = [1,0] + [2.5, -4] = [3.5, -4] -> relu [3.5, 0]
    expected = np.array([[3.1 - 1.8, 6.2 + 0.9], [3.5, 7.0]])
    T, _ = ffn_integrate(head, X_t, np.zeros((3, 2)), (np.zeros((3, 2)),) * 2 + (C_P, C_N))
    np.testing.assert_allclose(T, expected, rtol=1e-12)
    with pytest.raises(ValueError):
        ffn_integrate(head, X_t, np.zeros((3, 2)), (np.zeros((3, 2)),) * 2 + (C_P[:1], C_N))


# -- pooling ----------------------------------------------------------------------------------
def test_pooling_examples(rng):
    head = random_head(d=3)
    row = rng.normal(size=(1, 3))
    np.testing.assert_array_equal(attentive_pool(head, row), row[0])
    same = np.tile(row, (4, 1))
    np.testing.assert_allclose(attentive_pool(head, same), row[0], rtol=1e-14)
    head.params["vp_c"][:] = 0.0
    X = rng.normal(size=(5, 3))
    np.testing.assert_allclose(attentive_pool(head, X, "c"), X.mean(axis=0), rtol=1e-14)
    with pytest.raises(ValueError):
        attentive_pool(head, np.zeros((0, 3)))


# -- retrieval ---------------------------------------------------------------------------------
def test_equal_similarities_average_neighbours():
    b = bundle(d=2, S=2)
    for nb in b.neighbors:
        nb.similarity = 0.7
    head = random_head(d=2)
    T_r, C_r, L_r = retrieval_aggregate(head, b)
    mean_nb = copy.deepcopy(b)
    mean_nb.neighbors = [Neighbor(np.mean([n.X_c for n in b.neighbors], axis=0),
                                  np.mean([n.X_t for n in b.neighbors], axis=0), 0.0,
                                  float(np.mean([n.label for n in b.neighbors])))]
    T1, C1, L1 = retrieval_aggregate(head, mean_nb)
    np.testing.assert_allclose(T_r, T1, rtol=1e-12)
    np.testing.assert_allclose(C_r, C1, rtol=1e-12)
    np.testing.assert_allclose(L_r, L1, rtol=1e-12)


def test_retrieval_weights_saturate_and_normalise():
    w = retrieval_weights([50.0, 0.0, -1.0])
    assert w[0] > 1 - 1e-6
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, rel=1e-15)
    with pytest.raises(ValueError):
        retrieval_weights([])
    with pytest.raises(ValueError):
        retrieval_weights([np.inf, 0.0])
    head = random_head(d=2)
    b = bundle(d=2, S=1)
    b.neighbors = []
    with pytest.raises(ValueError, match="neighbour"):
        retrieval_aggregate(head, b)


# -- interactions and SAS ---------------------------------------------------------------------------
def test_interaction_features():
    one = np.array([1.0, 2.0])
    I = interaction_features(one, np.array([3.0, 4.0]), one, one, np.zeros(2))
    assert I.shape == (12,)
    # blocks: C*C_r, C*T_r, C*L_r, T*C_r, T*T_r, T*L_r
    np.testing.assert_array_equal(I[:2], [3.0, 8.0])
    np.testing.assert_array_equal(I[4:6], [0.0, 0.0])
    np.testing.assert_array_equal(I[10:], [0.0, 0.0])
    with pytest.raises(ValueError):
        interaction_features(one, one, one, one, np.zeros(3))


def test_sas_examples(rng):
    assert score_sas_aggregate(np.zeros((3, 4)), rng.normal(size=4)) == 0.5
    assert score_sas_aggregate([[np.log(3.0), 0.0]], [1.0, 5.0]) == pytest.approx(0.75, rel=1e-15)
    U, item = rng.normal(size=(6, 4)), rng.normal(size=4)
    assert score_sas_aggregate(U[::-1], item) == pytest.approx(score_sas_aggregate(U, item), rel=1e-15)
    with pytest.raises(ValueError):
        score_sas_aggregate(np.zeros((0, 4)), item)


# -- prediction --------------------------------------------------------------------------------
def test_basis_pred_returns_likelihood():
    head = random_head(d=2)
    head.params["W_pred"] = np.array([0.0, 0.0, 0.0, 1.0])
    assert predict(head, bundle()) == pytest.approx(-4.2, rel=1e-15)


def test_zero_output_predicts_zero():
    head = random_head(d=2)
    head.params["W_output"][:] = 0.0
    head.params["W_pred"][:] = 0.0
    assert predict(head, bundle()) == 0.0


@pytest.mark.parametrize("mode", ["full", "noSAS"])
def test_forward_matches_hand_oracle(mode):
    head = random_head(d=2, mode=mode)
    head.norm = {"target_mean": 0.3, "target_scale": 1.7, "lik_mean": -5.0, "lik_scale": 2.0}
    b = bundle(d=2, S=1)
    expected, Z = fusion_oracle(head.params, head.alpha, head.norm, b, with_sas=(mode == "full"))
    assert Z.size == 10 * 2
    assert predict(head, b) == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_modes_read_their_likelihood_field():
    b = bundle()
    for mode, value in (("noMamba", -5.0), ("noHP", -1.0)):
        head = random_head(d=2, mode=mode)
        head.params["W_pred"] = np.array([0.0, 0.0, 0.0, 1.0])
        assert predict(head, b) == pytest.approx(value)
    b.likelihood_hawkes = None
    with pytest.raises(ValueError, match="likelihood_hawkes"):
        predict(random_head(d=2, mode="noMamba"), b)
    with pytest.raises(ValueError):
        predict(random_head(d=2), b, mode="noSAS")


def test_head_shape_ledger():
    head = FusionHead.init(3)
    assert head.params["W_output"].shape == (30, 3)
    assert head.params["W_pred"].shape == (5,)
    assert FusionHead.init(3, mode="noSAS").params["W_pred"].shape == (4,)
    head.params["W_output"] = np.zeros((27, 3))
    with pytest.raises(ValueError, match="W_output"):
        head.validate()
    with pytest.raises(ValueError):
        FusionHead(3, alpha=1.5)


def test_batch_prediction_matches_single():
    bs = make_synthetic_bundles(7, d=3, seed=2)
    head = random_head(d=3)
    together = predict(head, bs)
    for b, v in zip(bs, together):
        assert predict(head, b) == pytest.approx(v, rel=1e-12)


# -- training ----------------------------------------------------------------------------------
@pytest.mark.parametrize("mode", ["full", "noSAS", "noMamba", "noHP"])
def test_fusion_gradient_matches_central_differences(mode):
    head = random_head(d=2, seed=3, mode=mode)
    head.norm = {"target_mean": 0.5, "target_scale": 2.0, "lik_mean": -8.0, "lik_scale": 3.0}
    bs = make_synthetic_bundles(3, d=2, seed=4, n_av=2, n_text=2)
    _, g = mse_loss_and_grad(head, bs, weight_decay=1e-3)
    num = finite_difference_grad(lambda p: mse_loss_and_grad(head, bs, p, 1e-3)[0], head.params)
    err = max_relative_error(g, num)
    worst = max(err, key=err.get)
    assert err[worst] < 1e-4, worst


def test_noSAS_trains_without_sas_inputs():
    bs = make_synthetic_bundles(30, d=2, seed=5)
    for b in bs:
        b.sas_users = b.sas_item = None
    res = train_fusion(bs, {"mode": "noSAS", "epochs": 3, "lr": 1e-2})
    assert np.all(np.isfinite(predict(res.head, bs)))
    with pytest.raises(ValueError, match="SAS"):
        train_fusion(bs, {"epochs": 1})


def test_fusion_training_is_deterministic_and_logs_best():
    bs = make_synthetic_bundles(40, d=2, seed=6)
    a = train_fusion(bs, {"epochs": 5, "lr": 1e-2, "seed": 1})
    b = train_fusion(bs, {"epochs": 5, "lr": 1e-2, "seed": 1})
    for k in a.head.params:
        assert a.head.params[k].tobytes() == b.head.params[k].tobytes()
    best = [r["best_val_mse"] for r in a.log]
    assert all(np.diff(best) <= 0)
    with pytest.raises(ValueError, match="unknown"):
        FusionConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValueError):
        train_fusion([])


def test_likelihood_slot_carries_the_planted_signal():
    # target driven by likelihood_mhp; wiping that field must cost accuracy
    train = make_synthetic_bundles(150, d=4, seed=7)
    test = make_synthetic_bundles(60, d=4, seed=8)
    cfg = {"epochs": 40, "lr": 1e-2, "patience": 40}
    scores = {}
    for name, mode in (("full", "full"), ("noSAS", "noSAS"), ("zeroed", "full")):
        tr, te = copy.deepcopy(train), copy.deepcopy(test)
        if name == "zeroed":
            for b in tr + te:
                b.likelihood_mhp = 0.0
        res = train_fusion(tr, dict(cfg, mode=mode))
        scores[name] = nmse(np.array([b.target for b in te]), predict(res.head, te))
    assert scores["full"] < scores["zeroed"]
    assert scores["noSAS"] < scores["zeroed"]


# -- persistence ------------------------------------------------------------------------------------
def test_bundle_and_head_round_trip(tmp_path):
    bs = make_synthetic_bundles(4, d=3, seed=9)
    bs[1].sas_users = bs[1].sas_item = None
    bs[2].target = None
    save_bundles(tmp_path / "b.tpa", bs)
    back = load_bundles(tmp_path / "b.tpa")
    for a, b in zip(bs, back):
        assert a.id == b.id and a.target == b.target
        assert np.array_equal(a.X_c, b.X_c) and np.array_equal(a.X_t, b.X_t)
        assert (a.sas_users is None) == (b.sas_users is None)
        assert [n.similarity for n in a.neighbors] == [n.similarity for n in b.neighbors]
    head = random_head(d=3, mode="noHP")
    head.norm["lik_scale"] = 4.0
    save_fusion(tmp_path / "f.tpa", head, {"note": "x"})
    h2, meta = load_fusion(tmp_path / "f.tpa")
    assert meta["note"] == "x" and h2.mode == "noHP" and h2.norm == head.norm
    np.testing.assert_array_equal(predict(h2, bs[0]), predict(head, bs[0]))
