import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mrgan.metrics import (accuracy, confusion, dice_from_counts, diversity_delta, evaluate_generated,
                           latent_interpolate, pca_fit, realism_rho, total_variation_sigma)
from mrgan.models import build_dcgan
from mrgan.optim import InitScheme
from mrgan.tensor import Tensor, no_grad

masks = arrays(np.int8, (8, 8), elements=st.integers(0, 1))
matrices = arrays(np.float64, (6, 5), elements=st.floats(-3, 3, allow_nan=False))


def test_confusion_examples():
    m = (np.random.default_rng(0).random((5, 5)) > 0.5).astype(float)
    tp, tn, fp, fn = confusion(m, m)
    assert fp == fn == 0 and tp + tn == 25
    tp, tn, fp, fn = confusion(1 - m, m)
    assert tp == tn == 0
    with pytest.raises(ValueError):
        confusion(np.zeros(3), np.zeros(4))


def test_confusion_matches_pixel_loop():
    rng = np.random.default_rng(1)
    pred, truth = rng.random((64, 64)), rng.random((64, 64)) > 0.5
    counts = [0, 0, 0, 0]
    for p, t in zip(pred.ravel(), truth.ravel()):
        p = p >= 0.5
        counts[0 if p and t else 1 if not p and not t else 2 if p else 3] += 1
    assert tuple(confusion(pred, truth)) == tuple(counts)


def test_accuracy_examples():
    assert accuracy((10, 5, 0, 0)) == 1.0
    assert accuracy((25, 25, 25, 25)) == 0.5
    assert dice_from_counts((6, 0, 2, 2)) == 0.75
    with pytest.raises(ValueError):
        accuracy((0, 0, 0, 0))


@given(masks, masks)
def test_accuracy_invariant_under_complement(a, b):
    assert accuracy(confusion(a, b)) == accuracy(confusion(1 - a, 1 - b))


def test_pca_axis_aligned_rows():
    d, k = 6, 3
    rows = np.vstack([np.eye(d)[:k]] * 4)
    basis = pca_fit(rows, k=k, normalize=False, center=False)
    assert np.allclose(np.abs(basis.eigenvectors[:, k:]), 0, atol=1e-12)
    assert np.allclose(basis.eigenvalues, 4.0)
    with pytest.raises(ValueError, match="achievable"):
        pca_fit(rows, k=k + 1, normalize=False, center=False)


def test_pca_line_data():
    direction = np.array([3.0, 4.0]) / 5
    rows = np.outer(np.arange(-5.0, 6.0), direction)
    basis = pca_fit(rows, k=1, normalize=False)
    assert abs(abs(basis.eigenvectors[0] @ direction) - 1) < 1e-6


def test_pca_matches_dense_eigensolver():
    x = np.random.default_rng(2).standard_normal((40, 12))
    basis = pca_fit(x, k=12, normalize=False, center=False)
    vals, vecs = np.linalg.eig(x.T @ x)  # general solver, independent of the symmetric path
    order = np.argsort(vals.real)[::-1]
    assert np.allclose(basis.eigenvalues, vals.real[order], rtol=1e-8)
    for row, ref in zip(basis.eigenvectors, vecs.real[:, order].T):
        assert min(np.abs(row - ref).max(), np.abs(row + ref).max()) < 1e-8


def test_pca_orthonormal_and_sorted():
    basis = pca_fit(np.random.default_rng(3).standard_normal((30, 20)), k=16)
    gram = basis.eigenvectors @ basis.eigenvectors.T
    assert np.allclose(gram, np.eye(16), atol=1e-6)
    assert np.all(np.diff(basis.eigenvalues) <= 0)


def test_rho_examples():
    basis = pca_fit(np.random.default_rng(4).standard_normal((40, 20)), k=16, center=False)
    e1 = basis.eigenvectors[0]
    assert realism_rho(basis, np.vstack([e1] * 3)) == pytest.approx(1.0, abs=1e-12)
    full, _ = np.linalg.qr(np.hstack([basis.eigenvectors.T, np.random.default_rng(5).standard_normal((20, 4))]))
    outside = full[:, 16:].T
    assert realism_rho(basis, outside) == pytest.approx(0.0, abs=1e-10)
    with pytest.raises(ValueError):
        realism_rho(basis, np.zeros((2, 7)))


def test_rho_matches_projection_loop():
    rng = np.random.default_rng(6)
    basis = pca_fit(rng.standard_normal((50, 24)), k=16)
    gen = rng.standard_normal((9, 24))
    total = 0.0
    for row in gen:
        v = row - basis.mean
        v = v / np.sqrt(sum(c * c for c in v))
        total += np.sqrt(sum(float(e @ v) ** 2 for e in basis.eigenvectors))
    assert realism_rho(basis, gen) == pytest.approx(total / len(gen), abs=1e-8)


@given(matrices)
def test_rho_at_most_one(gen):
    basis = pca_fit(np.random.default_rng(7).standard_normal((30, 5)), k=4)
    assert realism_rho(basis, gen) <= 1 + 1e-12


def test_sigma_examples():
    assert total_variation_sigma(np.zeros((3, 4))) == 0.0
    assert total_variation_sigma(np.eye(3)) == 3.0
    x = np.random.default_rng(8).standard_normal((20, 50))
    assert total_variation_sigma(x) == pytest.approx(np.trace(x @ x.T), rel=1e-9)


@given(matrices, matrices)
def test_sigma_additive_over_rows(a, b):
    joint = total_variation_sigma(np.vstack([a, b]))
    assert joint == pytest.approx(total_variation_sigma(a) + total_variation_sigma(b), rel=1e-12, abs=1e-12)


def test_delta_examples():
    v = np.random.default_rng(9).standard_normal(7)
    assert diversity_delta(np.vstack([v] * 5)) == 1
    assert diversity_delta(2 * np.eye(5)[:3]) == 3
    x = np.random.default_rng(10).standard_normal((30, 10))
    vals = np.linalg.eigvalsh(x.T @ x)
    assert diversity_delta(x) == sum(1 for e in vals if e > np.sum(x ** 2) / 100)


@given(arrays(np.float64, (40, 120), elements=st.floats(-3, 3, allow_nan=False)))
def test_delta_below_hundred(x):
    assert diversity_delta(x) < 100


def test_pca_full_rank_reconstruction():
    x = np.random.default_rng(11).standard_normal((10, 6))
    basis = pca_fit(x, k=6, normalize=False, center=False)
    assert np.allclose((x @ basis.eigenvectors.T) @ basis.eigenvectors, x, atol=1e-6)


def test_evaluate_report_fields():
    rng = np.random.default_rng(12)
    train = rng.standard_normal((30, 20))
    basis = pca_fit(train, k=16)
    rep = evaluate_generated(basis, train[:10])
    assert rep.n_images == 10
    assert rep.sigma == pytest.approx(total_variation_sigma(train[:10] - train.mean(0)))
    assert rep.csv_row("m").startswith("m,")


def test_interpolation_endpoints():
    g, _ = build_dcgan(latent=8, base_res=4, target_res=16, g_filters=8, d_filters=4, disc_final_res=4)
    g.initialize(np.random.default_rng(13), InitScheme())
    rng = np.random.default_rng(14)
    z0, z1 = rng.standard_normal(8), rng.standard_normal(8)
    seq = latent_interpolate(g, z0, z1, 6)
    with no_grad():
        direct = [g(Tensor(z[None].astype(np.float32)), train=False).data[0] for z in (z0, z1)]
    assert seq.shape[0] == 6
    assert seq[0].tobytes() == direct[0].tobytes() and seq[-1].tobytes() == direct[1].tobytes()
    assert np.all(np.isfinite(seq)) and np.all(np.abs(seq) <= 1)
    with pytest.raises(ValueError):
        latent_interpolate(g, z0, z1, 1)
