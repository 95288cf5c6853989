import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from permtensor import d4
from permtensor.tensor import (PermTensor, batch_anisotropy_ratio, batch_eigenvalues,
                               batch_offdiag_dominance, is_positive_definite, spectrum,
                               symmetry_error, tensor_functionals)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        PermTensor(1.0, math.nan, 0.0, 1.0)
    with pytest.raises(ValueError):
        PermTensor(math.inf, 0.0, 0.0, 1.0)


def test_round_trips():
    k = PermTensor(1.0, 0.2, 0.3, 4.0)
    assert PermTensor.from_matrix(k.as_matrix()) == k
    assert PermTensor.from_vector(k.as_vector()) == k
    assert k.as_matrix()[0, 1] == 0.2 and k.as_matrix()[1, 0] == 0.3
    with pytest.raises(ValueError):
        PermTensor.from_vector([1, 2, 3])


def test_symmetry_error_examples():
    assert symmetry_error(PermTensor(1, 0.1, 0.1, 1)) == 0.0
    assert symmetry_error(PermTensor(1, 0.2, 0.0, 1)) == 0.2


def test_spectrum_examples():
    s = spectrum(PermTensor(1, 0, 0, 1))
    assert (s.lambda_min, s.lambda_max, s.anisotropy_ratio) == (1.0, 1.0, 1.0)
    s = spectrum(PermTensor(2, 0, 0, 0.5))
    assert (s.lambda_min, s.lambda_max, s.anisotropy_ratio) == (0.5, 2.0, 4.0)
    s = spectrum(PermTensor(1, 0.5, 0.5, 1))
    assert s.lambda_min == pytest.approx(0.5, abs=1e-15)
    assert s.lambda_max == pytest.approx(1.5, abs=1e-15)
    assert s.anisotropy_ratio == pytest.approx(3.0, abs=1e-14)


def test_spectrum_degenerate_is_flagged_not_raised():
    s = spectrum(PermTensor(1, 0, 0, 0))
    assert s.degenerate and math.isinf(s.anisotropy_ratio)


def test_spectrum_uses_symmetric_part():
    s = spectrum(PermTensor(1, 0.8, 0.2, 1))
    ref = np.linalg.eigvalsh([[1, 0.5], [0.5, 1]])
    assert [s.lambda_min, s.lambda_max] == pytest.approx(ref, abs=1e-15)


def test_positive_definite_examples():
    assert is_positive_definite(PermTensor(1, 0, 0, 1))
    assert not is_positive_definite(PermTensor(1, 0, 0, -0.1))
    assert not is_positive_definite(PermTensor(1, 2, 2, 1))


def test_functionals_examples():
    f = tensor_functionals(PermTensor(1, 0, 0, 1))
    assert f == {"frobenius": math.sqrt(2), "trace": 2.0, "determinant": 1.0, "offdiag_dominance": 0.0}
    f = tensor_functionals(PermTensor(0, 0, 0, 0))
    assert all(v == 0.0 for v in f.values())
    f = tensor_functionals(PermTensor(1, 1, 1, 1))
    assert f["offdiag_dominance"] == pytest.approx(0.5, abs=1e-12)


@given(finite, finite, finite, finite)
def test_symmetry_error_zero_iff_symmetric(a, b, c, d):
    k = PermTensor(a, b, c, d)
    assert (symmetry_error(k) == 0.0) == (b == c)


@settings(max_examples=200)
@given(finite, finite, finite, st.sampled_from(d4.TAGS))
def test_spectrum_invariant_under_d4(a, b, c, tag):
    k = PermTensor(a, b, b, c)
    s1, s2 = spectrum(k), spectrum(d4.transform_tensor(k, d4.element(tag)))
    assert s2.lambda_min == pytest.approx(s1.lambda_min, rel=1e-12, abs=1e-12)
    assert s2.lambda_max == pytest.approx(s1.lambda_max, rel=1e-12, abs=1e-12)


def test_positive_definite_matches_principal_minors(rng):
    k = rng.uniform(-2, 2, size=(10_000, 4))
    for row in k:
        b = 0.5 * (row[1] + row[2])
        minors = row[0] > 0 and row[0] * row[3] - b * b > 0
        assert is_positive_definite(PermTensor(*row)) == minors


def test_ar_at_least_one_when_pd(rng):
    k = rng.uniform(-2, 2, size=(5000, 4))
    lo, _ = batch_eigenvalues(k)
    ar = batch_anisotropy_ratio(k)
    assert np.all(ar[lo > 0] >= 1.0)


def test_batch_helpers_match_scalar(rng):
    k = rng.standard_normal((50, 4))
    lo, hi = batch_eigenvalues(k)
    delta = batch_offdiag_dominance(k)
    for i, row in enumerate(k):
        s = spectrum(PermTensor(*row))
        assert lo[i] == s.lambda_min and hi[i] == s.lambda_max
        assert delta[i] == pytest.approx(tensor_functionals(PermTensor(*row))["offdiag_dominance"])
