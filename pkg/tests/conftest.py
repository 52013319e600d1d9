import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from mambahawkes.sequences import EventSequence

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@st.composite
def event_sequences(draw, max_len=8, max_types=3, num_types=None):
    """Random valid sequences: positive gaps bounded away from zero."""
    R = num_types or draw(st.integers(1, max_types))
    n = draw(st.integers(1, max_len))
    gaps = draw(st.lists(st.floats(0.05, 3.0), min_size=n, max_size=n))
    types = draw(st.lists(st.integers(0, R - 1), min_size=n, max_size=n))
    return EventSequence("h", np.cumsum(gaps), np.array(types), R)


def random_sequence(rng, n, R, sid="s"):
    times = np.cumsum(rng.uniform(0.1, 1.5, size=n))
    return EventSequence(sid, times, rng.integers(0, R, size=n), R)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _softmax(v):
    z = np.exp(v - v.max())
    return z / z.sum()


def fusion_oracle(p, alpha, norm, bundle, with_sas=True):
    """Loop-level forward pass of the fusion head for a single-neighbour bundle."""
    d = bundle.X_c.shape[1]

    def attend(Xq, Xk, Wq, Wk, Wv, scale):
        Q, K, V = Xq @ Wq, Xk @ Wk, Xk @ Wv
        out = np.zeros((Xq.shape[0], d))
        for i in range(Xq.shape[0]):
            logits = np.array([scale * np.dot(Q[i], K[j]) / np.sqrt(d) for j in range(Xk.shape[0])])
            w = _softmax(logits)
            for j in range(Xk.shape[0]):
                out[i] += w[j] * V[j]
        return out

    def pool(X, Wp, vp):
        s = _softmax(np.array([np.dot(np.tanh(x @ Wp), vp) for x in X]))
        return sum(s[j] * X[j] for j in range(X.shape[0]))

    def encode(Xc, Xt):
        gamma = alpha - 1.0
        T_P = attend(Xc, Xt, p["W_Q_P"], p["W_K_P"], p["W_C_P"], alpha)
        T_N = attend(Xc, Xt, p["W_Q_N"], p["W_K_N"], p["W_C_N"], gamma)
        C_P = attend(Xt, Xc, p["W_Q_P"], p["W_K_P"], p["W_T_P"], alpha)
        C_N = attend(Xt, Xc, p["W_Q_N"], p["W_K_N"], p["W_T_N"], gamma)
        Tt = np.maximum(Xt + np.hstack([C_P, C_N]) @ p["W1_t"], 0.0) @ p["W2_t"]
        Ct = np.maximum(Xc + np.hstack([T_P, T_N]) @ p["W1_c"], 0.0) @ p["W2_c"]
        return pool(Tt, p["Wp_t"], p["vp_t"]), pool(Ct, p["Wp_c"], p["vp_c"])

    T, C = encode(bundle.X_c, bundle.X_t)
    nb = bundle.neighbors[0]
    T_r, C_r = encode(nb.X_c, nb.X_t)
    L_r = (nb.label - norm["target_mean"]) / norm["target_scale"] * p["w_label"] + p["b_label"]
    I = np.concatenate([C * C_r, C * T_r, C * L_r, T * C_r, T * T_r, T * L_r])
    Z = np.concatenate([C, T, C_r, T_r, I])
    out = Z @ p["W_output"]
    lik = (bundle.likelihood_mhp - norm["lik_mean"]) / norm["lik_scale"]
    side = []
    if with_sas:
        side.append(1.0 / (1.0 + np.exp(-np.mean(bundle.sas_users @ bundle.sas_item))))
    side.append(lik)
    pred = np.concatenate([out, side]) @ p["W_pred"]
    return pred * norm["target_scale"] + norm["target_mean"], Z
