from __future__ import annotations

import numpy as np
import pytest

from lsvo.models import build_lsvo
from lsvo.pca import compare_subspaces, fit, load_model, project, reconstruct, rmse, save_model


def linear_flows(n=60, k=4, shape=(8, 10, 2), seed=0):
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    basis, _ = np.linalg.qr(rng.normal(size=(d, k)))
    mean = rng.normal(size=d)
    coeffs = rng.normal(size=(n, k)) * np.array([8.0, 4.0, 2.0, 1.0])[:k]
    return (coeffs @ basis.T + mean).reshape(n, *shape), basis


def test_rank_one_recovers_direction():
    rng = np.random.default_rng(1)
    w = rng.normal(size=20)
    w /= np.linalg.norm(w)
    data = np.outer(rng.normal(size=30), w)
    m = fit(data, 1)
    assert abs(abs(m.basis[:, 0] @ w) - 1) < 1e-12
    assert m.basis[np.argmax(np.abs(m.basis[:, 0])), 0] > 0


def test_four_dim_model_reconstructs_exactly():
    fields, _ = linear_flows()
    m = fit(fields, 4)
    rec = reconstruct(m, project(m, fields))
    assert rmse(rec, fields) < 1e-9
    np.testing.assert_allclose(m.basis.T @ m.basis, np.eye(4), atol=1e-9)


def test_error_non_increasing_in_l():
    fields, _ = linear_flows(k=4, seed=2)
    fields = fields + 0.01 * np.random.default_rng(3).normal(size=fields.shape)
    errs = [rmse(reconstruct(m, project(m, fields)), fields) for m in (fit(fields, l) for l in range(1, 9))]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_contract_errors():
    fields, _ = linear_flows()
    with pytest.raises(ValueError):
        fit(fields, 0)
    with pytest.raises(ValueError):
        fit(fields, 61)
    with pytest.raises(ValueError, match="degenerate"):
        fit(np.ones((5, 4, 4, 2)), 1)
    m = fit(fields, 3)
    with pytest.raises(ValueError):
        project(m, np.zeros((2, 3, 3, 2)))
    with pytest.raises(ValueError):
        reconstruct(m, np.zeros(4))


def test_projection_properties():
    fields, _ = linear_flows(k=4, seed=4)
    fields = fields + 0.1 * np.random.default_rng(5).normal(size=fields.shape)
    m = fit(fields, 3)
    np.testing.assert_allclose(project(m, m.mean.reshape(m.shape)), 0.0, atol=1e-12)
    z = np.random.default_rng(6).normal(size=(5, 3))
    np.testing.assert_allclose(project(m, reconstruct(m, z)), z, atol=1e-10)
    x = fields[0]
    resid = (x - reconstruct(m, project(m, x))).reshape(-1)
    assert np.max(np.abs(m.basis.T @ resid)) < 1e-9
    in_span = reconstruct(m, np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(reconstruct(m, project(m, in_span)), in_span, atol=1e-10)


def test_sign_convention_is_deterministic():
    fields, _ = linear_flows(seed=7)
    a, b = fit(fields, 4), fit(fields[::-1].copy(), 4)
    np.testing.assert_allclose(a.basis, b.basis, atol=1e-9)


def test_model_storage(tmp_path):
    fields, _ = linear_flows()
    m = fit(fields, 4)
    save_model(m, tmp_path / "pca.model")
    back = load_model(tmp_path / "pca.model")
    assert back.shape == m.shape
    assert np.abs(back.basis - m.basis).max() < 1e-6
    assert np.abs(back.mean - m.mean).max() / np.abs(m.mean).max() < 1e-6


def test_compare_against_untrained_autoencoder():
    fields, _ = linear_flows(n=12, shape=(16, 16, 2), seed=8)
    m = fit(fields, 4)
    g = build_lsvo((16, 16, 2), seed=0, width=1 / 16)
    rows, summary = compare_subspaces(m, g, fields)
    assert len(rows) == 12
    assert summary["pca_mean"] <= summary["ae_mean"]
    same, s2 = compare_subspaces(m, g, fields[:0])
    assert same == [] and s2["count"] == 0
