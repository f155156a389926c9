
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from countclip.captions import COUNTS
from countclip.frequencies import ClassFrequencyTable, compute_class_frequencies
from countclip.lambdas import (
    LambdaScheme,
    LambdaTable,
    LambdaWeighter,
    ZeroFrequencyError,
    lambda_for,
    lambda_log,
    lambda_modal,
    lambda_norm,
    sigma,
    sigma_table,
)


def table_with(n_class, n_total, count=2):
    # the queried class gets n_class, the rest is spread over class 3
    return ClassFrequencyTable({count: n_class, 3: n_total - n_class})


def test_norm_fixtures():
    assert lambda_norm(2, table_with(500, 2000)) == 0.75
    assert lambda_norm(2, ClassFrequencyTable({2: 7})) == 0.0
    assert lambda_norm(5, ClassFrequencyTable({2: 7}), lambda_0=3.0) == 3.0


def test_modal_fixtures():
    t = ClassFrequencyTable({2: 800, 7: 80})
    assert lambda_modal(7, t) == 10.0
    assert lambda_modal(2, t) == 1.0
    uniform = ClassFrequencyTable({c: 11 for c in COUNTS})
    assert all(lambda_modal(c, uniform, 2.5) == 2.5 for c in COUNTS)
    with pytest.raises(ZeroFrequencyError):
        lambda_modal(9, t)


def test_sigma_fixtures():
    assert sigma(2, table_with(25, 100)) == 1.0
    assert sigma(2, table_with(5, 80)) == 2.0
    t = table_with(50, 100)
    assert sigma(2, t) == 0.0
    assert 2 in sigma_table(t).clamped


def test_log_clamps_and_modal_gets_lambda_0():
    # ratios 16, 4 and 2: sigma = 2, 1 and 0 (clamped)
    t = ClassFrequencyTable({2: 8, 3: 32, 4: 64, 5: 24})
    s = sigma_table(t)
    assert s.sigma[2] == 2.0 and s.sigma[3] == 1.0 and s.sigma[4] == 0.0
    assert (s.sigma_min, s.sigma_max) == (0.0, 2.0)
    assert lambda_log(4, t) == 1.0
    assert LambdaTable.build(LambdaScheme("log"), t).flags["sigma_clamped"] == [4]


def test_log_hand_value():
    # n_total=64: ratio 16 for class 2, ratio 4 for classes 3..5, 16/3 for class 6
    t = ClassFrequencyTable({2: 4, 3: 16, 4: 16, 5: 16, 6: 12})
    s = sigma_table(t)
    assert (s.sigma[2], s.sigma_min, s.sigma_max) == (2.0, 1.0, 2.0)
    assert lambda_log(2, t) == 1.5
    assert lambda_log(3, t) == 1.0


def test_log_uniform_falls_back_to_constant():
    t = ClassFrequencyTable({2: 5, 3: 5})
    assert lambda_log(2, t, 1.7) == 1.7
    lt = LambdaTable.build(LambdaScheme("log", 1.7), t)
    assert lt.flags["constant_fallback"] is True
    assert set(lt.values.values()) == {1.7}


def test_constant_and_dispatch_identity():
    t = ClassFrequencyTable({2: 100, 3: 40, 4: 9, 5: 3, 6: 1, 7: 50, 8: 70, 9: 2, 10: 30})
    for c in COUNTS:
        assert lambda_for(LambdaScheme("constant", 0.4), c, t) == 0.4
        assert lambda_for(LambdaScheme("modal", 1.3), c, t) == lambda_modal(c, t, 1.3)
        assert lambda_for(LambdaScheme("log", 1.3), c, t) == lambda_log(c, t, 1.3)
        assert lambda_for(LambdaScheme("norm", 1.3), c, t) == lambda_norm(c, t, 1.3)


def test_norm_strictly_increasing_on_exponential_table():
    t = ClassFrequencyTable({c: 2 ** (12 - c) for c in COUNTS})
    values = [lambda_norm(c, t) for c in COUNTS]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_table_fills_missing_classes_with_max():
    t = ClassFrequencyTable({2: 40, 3: 10})
    lt = LambdaTable.build(LambdaScheme("modal"), t)
    assert lt[3] == 4.0 and lt[2] == 1.0
    assert all(lt[c] == 4.0 for c in range(4, 11))
    assert lt.flags["zero_frequency"] == list(range(4, 11))
    assert LambdaTable.from_dict(lt.to_dict()) == lt


def test_invalid_scheme():
    with pytest.raises(ValueError):
        LambdaScheme("cubic")
    with pytest.raises(ValueError):
        LambdaScheme("modal", -1.0)
    with pytest.raises(ValueError):
        lambda_norm(11, ClassFrequencyTable({2: 1}))


def test_frequency_table_helpers():
    rows = [{"count": 2}, {"count": 2}, {"count": 9}]
    t = compute_class_frequencies(rows)
    assert t[2] == 2 and t[9] == 1 and t[5] == 0 and t.n_total == 3 and t.n_modal == 2
    assert ClassFrequencyTable.from_dict(t.to_dict()) == t
    assert t.scaled(3)[2] == 6
    with pytest.raises(ValueError):
        ClassFrequencyTable({})


frequencies = st.dictionaries(st.sampled_from(COUNTS), st.integers(1, 5000), min_size=1)


@given(frequencies, st.floats(0.1, 10))
def test_lambda_properties_hypothesis(freqs, lam0):
    t = ClassFrequencyTable(freqs)
    present = sorted(freqs)
    for kind in ("norm", "modal", "log"):
        vals = {c: lambda_for(LambdaScheme(kind, lam0), c, t) for c in present}
        for a in present:
            for b in present:
                if t[a] > t[b]:
                    assert vals[a] <= vals[b] * (1 + 1e-12)
        modal = [c for c in present if t[c] == t.n_modal]
        if kind != "norm":
            assert all(v >= lam0 * (1 - 1e-12) for v in vals.values())
            assert all(vals[c] == lam0 for c in modal)


def test_weighter_estimator():
    w = LambdaWeighter(scheme="modal", lambda_0=2.0)
    assert w.get_params() == {"scheme": "modal", "lambda_0": 2.0}
    c = clone(w).set_params(lambda_0=1.0)
    out = c.fit_transform([2, 2, 2, 2, 3, 3])
    np.testing.assert_array_equal(out, [1, 1, 1, 1, 2, 2])
    assert c.frequencies_[2] == 4
    with pytest.raises(Exception):
        LambdaWeighter().transform([2])
    with pytest.raises(ValueError):
        c.transform([1])
