import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import stats

from mambahawkes.metrics import MetricReport, mae, nmse, plcc, src

Y = [1.0, 2.0, 3.0]


def test_nmse_examples():
    assert nmse(Y, Y) == 0.0
    assert nmse(Y, [2.0, 2.0, 2.0]) == 1.0
    assert nmse(Y, [1.0, 2.0, 5.0]) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError, match="constant"):
        nmse([2.0, 2.0], [1.0, 3.0])


def test_src_examples():
    assert src(Y, [10.0, 20.0, 30.0]) == 1.0
    assert src(Y, [3.0, 2.0, 1.0]) == pytest.approx(-1.0, abs=1e-12)
    # mid-ranks: yhat ranks (1.5, 1.5, 3), d^2 = (0.25, 0.25, 0) -> 1 - 6*0.5/24
    assert src(Y, [0.0, 0.0, 1.0]) == pytest.approx(0.875, abs=1e-12)
    with pytest.raises(ValueError):
        src([1.0], [1.0])


def test_plcc_examples():
    y = np.array([0.5, 1.0, 4.0, -2.0])
    assert plcc(y, 2 * y + 1) == pytest.approx(1.0, abs=1e-12)
    assert plcc(y, -y) == pytest.approx(-1.0, abs=1e-12)
    assert plcc(Y, [1.0, 3.0, 2.0]) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        plcc(Y, [1.0, 1.0, 1.0])


def test_mae_examples():
    assert mae(Y, [2.0, 2.0, 2.0]) == pytest.approx(2 / 3, abs=1e-12)
    assert mae(Y, Y) == 0.0
    assert mae([4.0], [1.0]) == 3.0


def test_input_validation():
    with pytest.raises(ValueError, match="length"):
        mae([1.0, 2.0], [1.0])
    with pytest.raises(ValueError, match="finite"):
        mae([1.0, np.nan], [1.0, 2.0])
    with pytest.raises(ValueError):
        mae([], [])


# values on a 1e-3 grid so cubing stays strictly increasing in floating point
finite = st.integers(-10**6, 10**6).map(lambda i: i / 1000.0)
pairs = st.integers(3, 30).flatmap(lambda n: st.tuples(st.lists(finite, min_size=n, max_size=n),
                                                       st.lists(finite, min_size=n, max_size=n)))


@given(pairs)
def test_against_scipy(pair):
    y, yhat = map(np.array, pair)
    assume(np.ptp(y) > 1e-3 and np.ptp(yhat) > 1e-3)
    assert plcc(y, yhat) == pytest.approx(stats.pearsonr(y, yhat)[0], abs=1e-9)
    if len(set(y)) == y.size and len(set(yhat)) == yhat.size:
        assert src(y, yhat) == pytest.approx(stats.spearmanr(y, yhat)[0], abs=1e-12)


@given(pairs, st.floats(0.1, 10.0), st.floats(-50, 50))
def test_invariances(pair, scale, shift):
    y, yhat = map(np.array, pair)
    assume(np.ptp(y) > 1e-3 and np.ptp(yhat) > 1e-3)
    r = MetricReport.compute(y, yhat)
    assert -1 <= r.src <= 1 and -1 <= r.plcc <= 1 and r.mae >= 0 and r.nmse >= 0 and r.n == y.size
    assert src(y, yhat**3) == pytest.approx(r.src, abs=1e-12)
    assert plcc(y, scale * yhat + shift) == pytest.approx(r.plcc, abs=1e-9)
    assert mae(y + shift, yhat + shift) == pytest.approx(r.mae, rel=1e-9, abs=1e-9)
    assert nmse(y, np.full_like(y, y.mean())) == pytest.approx(1.0, rel=1e-12)


def test_report_dict():
    d = MetricReport.compute(Y, [2.0, 2.0, 2.5]).as_dict()
    assert set(d) == {"nmse", "src", "plcc", "mae", "n"}
