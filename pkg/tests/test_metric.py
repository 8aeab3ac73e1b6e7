import numpy as np
import pytest

from ccmpc.dynamics import Box
from ccmpc.metric import (
    CertificateFormatError,
    SingularMetric,
    certificate_id,
    constant_certificate,
    dumps,
    gain_at,
    load,
    loads,
    metric_at,
    monomial_exponents,
    save,
)


def test_identity_and_scaled_metric():
    np.testing.assert_allclose(metric_at(constant_certificate(np.eye(2), [[0, 0]], 0.1), [0.3, 0.4]), np.eye(2))
    np.testing.assert_allclose(
        metric_at(constant_certificate(2 * np.eye(2), [[0, 0]], 0.1), [0.3, 0.4]), 0.5 * np.eye(2)
    )


def test_scalar_gain_is_l_over_w(scalar_cert):
    np.testing.assert_allclose(gain_at(scalar_cert, [0.7]), [[-0.3]])


def test_lv_metric_is_symmetric_pd_within_bounds(lv_cert):
    m = metric_at(lv_cert, [1.0, 1.0])
    np.testing.assert_allclose(m, m.T, atol=1e-12)
    lam = np.linalg.eigvalsh(m)
    assert lv_cert.m_lower * (1 - 1e-9) <= lam[0] and lam[-1] <= lv_cert.m_upper * (1 + 1e-9)


def test_metric_eigenvalues_within_certificate_bounds_on_grid(lv_cert):
    lam = np.linalg.eigvalsh(metric_at(lv_cert, lv_cert.state_box.grid(16)))
    assert lam.min() >= lv_cert.m_lower * (1 - 1e-9)
    assert lam.max() <= lv_cert.m_upper * (1 + 1e-9)


def test_metric_broadcasts_over_batch(lv_cert, rng):
    xs = rng.uniform(0.1, 2.0, size=(3, 4, 2))
    batch = metric_at(lv_cert, xs)
    assert batch.shape == (3, 4, 2, 2)
    np.testing.assert_allclose(batch[1, 2], metric_at(lv_cert, xs[1, 2]))
    np.testing.assert_allclose(batch[1, 2] @ lv_cert.w(xs[1, 2]), np.eye(2), atol=1e-9)


def test_singular_metric_raises():
    with pytest.raises(SingularMetric):
        metric_at(constant_certificate(np.diag([1.0, 0.0]), [[0, 0]], 0.1), [0.0, 0.0])


def test_w_gradient_matches_finite_differences(lv_cert):
    x = np.array([0.8, 1.4])
    g = lv_cert.w_gradient(x)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (lv_cert.w(x + e) - lv_cert.w(x - e)) / (2 * h)
        np.testing.assert_allclose(g[k], fd, rtol=1e-6, atol=1e-6)


def test_monomial_count():
    assert len(monomial_exponents(2, 2)) == 6
    assert len(monomial_exponents(3, 0)) == 1


def test_roundtrip_is_exact(lv_cert, tmp_path):
    path = tmp_path / "c.cert"
    save(lv_cert, path)
    back = load(path)
    assert dumps(back) == dumps(lv_cert)
    assert certificate_id(back) == certificate_id(lv_cert)
    np.testing.assert_array_equal(back.w_coeffs, lv_cert.w_coeffs)
    np.testing.assert_array_equal(back.l_coeffs, lv_cert.l_coeffs)


def test_tampered_certificate_rejected(lv_cert):
    text = dumps(lv_cert).replace("beta 0.1", "beta 0.2")
    with pytest.raises(CertificateFormatError, match="checksum"):
        loads(text)
    with pytest.raises(CertificateFormatError):
        loads("not a certificate\n")


def test_constant_certificate_bounds():
    c = constant_certificate(np.diag([2.0, 4.0]), [[0.0, 0.0]], 0.1, state_box=Box([0, 0], [1, 1]))
    assert c.m_lower == pytest.approx(0.25) and c.m_upper == pytest.approx(0.5)


def test_invalid_beta_rejected():
    with pytest.raises(ValueError):
        constant_certificate([[1.0]], [[0.0]], 1.5)
