import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from mftd import vae
from mftd.vae import (
    TrainConfig, VaeError, backward, bce_reconstruction, decode, denormalize_hf, encode,
    extract_scalar_hf, generate, init_model, kl_divergence, load_checkpoint, normalize_hf,
    oversample, oversample_indices, reparameterize, save_checkpoint, train, vae_loss,
)


def tiny(seed=0, activation="relu", latent=2, hidden=6):
    m = init_model(2, 4, 4, hidden=hidden, n_latent=latent, seed=seed, activation=activation)
    rng = np.random.default_rng(seed + 100)
    for k in ("b1", "bmu", "blv", "b3", "b4"):
        m.params[k] = rng.normal(scale=0.3, size=m.params[k].shape)
    return m


def rand_images(n, seed=0, shape=(2, 4, 4)):
    return np.random.default_rng(seed).uniform(size=(n,) + shape)


# forward pieces ----------------------------------------------------------------

def test_zero_weight_encoder_returns_bias():
    m = tiny()
    for k in ("W1", "Wmu", "Wlv"):
        m.params[k][:] = 0
    mu, sigma = encode(m, rand_images(1)[0])
    np.testing.assert_array_equal(mu, m.params["bmu"])
    np.testing.assert_allclose(sigma, np.exp(0.5 * m.params["blv"]))


def test_encode_deterministic_and_matches_matmul_oracle():
    m = tiny(3)
    x = rand_images(1, 3)[0]
    mu1, s1 = encode(m, x)
    mu2, s2 = encode(m, x.copy())
    np.testing.assert_array_equal(mu1, mu2)
    np.testing.assert_array_equal(s1, s2)
    p = m.params
    flat = x.reshape(-1)
    h = np.array([max(0.0, sum(flat[i] * p["W1"][i, j] for i in range(32)) + p["b1"][j]) for j in range(6)])
    mu = np.array([sum(h[j] * p["Wmu"][j, k] for j in range(6)) + p["bmu"][k] for k in range(2)])
    lv = np.array([sum(h[j] * p["Wlv"][j, k] for j in range(6)) + p["blv"][k] for k in range(2)])
    np.testing.assert_allclose(mu1, mu, rtol=1e-12)
    np.testing.assert_allclose(s1, np.exp(lv / 2), rtol=1e-12)
    assert np.all(s1 > 0)


def test_encode_reports_layer_of_nonfinite():
    m = tiny()
    m.params["W1"][0, 0] = np.inf
    with pytest.raises(VaeError, match="layer 1"):
        encode(m, np.ones((2, 4, 4)))


def test_reparameterize_examples():
    np.testing.assert_array_equal(reparameterize([1, 2], [1, 0.5], [1, -2]), [2, 1])
    np.testing.assert_array_equal(reparameterize([1, 2], [3, 4], [0, 0]), [1, 2])
    np.testing.assert_array_equal(reparameterize([1, 2], [0, 0], [5, -7]), [1, 2])


def test_kl_examples():
    assert kl_divergence(np.zeros(4), np.ones(4)) == 0.0
    assert kl_divergence([1.0], [1.0]) == pytest.approx(0.5)


@given(mu=st.floats(-3, 3), sigma=st.floats(0.2, 3))
@settings(max_examples=20, deadline=None)
def test_kl_matches_quadrature(mu, sigma):
    q, p = stats.norm(mu, sigma), stats.norm(0, 1)
    f = lambda z: q.pdf(z) * (q.logpdf(z) - p.logpdf(z))
    ref, _ = integrate.quad(f, mu - 12 * sigma, mu + 12 * sigma, limit=200)
    assert kl_divergence([mu], [sigma]) == pytest.approx(ref, rel=1e-6, abs=1e-9)


@given(mu=st.lists(st.floats(-5, 5), min_size=1, max_size=8), seed=st.integers(0, 100))
def test_kl_nonnegative(mu, seed):
    sigma = np.random.default_rng(seed).uniform(0.05, 4, len(mu))
    assert kl_divergence(mu, sigma) >= 0


def test_bce_examples():
    x = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert bce_reconstruction(x, x) == pytest.approx(-np.log(1 - 1e-7), rel=1e-6)
    assert bce_reconstruction(x, np.full_like(x, 0.5)) == pytest.approx(np.log(2))
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(3, 3)), rng.uniform(0.01, 0.99, (3, 3))
    ref = 0.0
    for i in range(3):
        for j in range(3):
            ref -= a[i, j] * np.log(b[i, j]) + (1 - a[i, j]) * np.log(1 - b[i, j])
    assert bce_reconstruction(a, b) == pytest.approx(ref / 9, rel=1e-13)


def test_loss_is_composition_of_parts():
    m = tiny(1)
    X = rand_images(3, 1)
    eps = np.random.default_rng(2).normal(size=(3, 2))
    mu, sigma = encode(m, X)
    Y = decode(m, reparameterize(mu, sigma, eps))
    for w in (0.0, 1e-3, 5.0):
        expected = np.mean([w * kl_divergence(mu[i], sigma[i])
                            + sum(bce_reconstruction(X[i, c], Y[i, c]) for c in range(2)) for i in range(3)])
        assert vae_loss(m, X, eps, w) == pytest.approx(expected, rel=1e-12)
    assert vae_loss(m, X, eps, 1.0) < vae_loss(m, X, eps, 2.0)


# gradients --------------------------------------------------------------------

def _fd_max_rel_error(m, X, eps, w_kl, step=1e-5):
    _, g = backward(m, X, eps, w_kl)
    worst = 0.0
    for name, arr in m.params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            lp = vae_loss(m, X, eps, w_kl)
            arr[idx] = old - step
            lm = vae_loss(m, X, eps, w_kl)
            arr[idx] = old
            fd = (lp - lm) / (2 * step)
            err = abs(g[name][idx] - fd) / max(abs(fd), abs(g[name][idx]), 1e-6)
            worst = max(worst, err)
    return worst


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_backward_matches_finite_differences(activation):
    m = tiny(4, activation)
    X = rand_images(3, 4)
    eps = np.random.default_rng(5).normal(size=(3, 2))
    assert _fd_max_rel_error(m, X, eps, 0.7) <= 1e-4


def test_bias_gradients_by_hand_for_zero_model():
    m = init_model(2, 4, 4, hidden=5, n_latent=2, seed=0)
    for k in m.params:
        m.params[k][:] = 0
    X = np.zeros((1, 2, 4, 4))
    eps = np.array([[0.3, -1.2]])
    _, g = backward(m, X, eps, 0.5)
    # y = 1/2 everywhere; dL/db4 = (y - x) / pixels_per_channel
    np.testing.assert_allclose(g["b4"], 0.5 / 16)
    # zero weights block every path back to the encoder and the hidden decoder layer
    for k in ("b1", "b3", "bmu"):
        np.testing.assert_array_equal(g[k], 0)
    # KL part only: dKL/dlogvar = -(1 - exp(0)) / 2 = 0
    np.testing.assert_array_equal(g["blv"], 0)


def test_identical_samples_permutation_invariance():
    m = tiny(6)
    a = rand_images(1, 6)[0]
    b = rand_images(1, 7)[0]
    e_same = np.array([0.2, -0.4])
    X1 = np.stack([a, a, b])
    eps = np.stack([e_same, e_same, [1.0, 0.5]])
    _, g1 = backward(m, X1, eps)
    _, g2 = backward(m, X1[[1, 0, 2]], eps[[1, 0, 2]])
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


# training -------------------------------------------------------------------

def test_train_overfits_single_image():
    img = np.zeros((1, 2, 4, 4))
    img[0, 0, :2] = 1.0
    img[0, 1] = 1.0
    res = train(img, TrainConfig(max_epochs=3000, learning_rate=1e-2, batch_size=1, patience=3000, seed=0),
                hidden=16, n_latent=2)
    floor = -np.log(1 - 1e-7) * 2  # clamp-limited BCE summed over two channels
    mu, sigma = encode(res.model, img[0])
    recon = decode(res.model, mu)
    rec = sum(bce_reconstruction(img[0, c], recon[c]) for c in range(2))
    assert rec <= floor * 1.05 + 5e-3


def test_train_deterministic_and_best_snapshot():
    X = rand_images(10, 8)
    cfg = TrainConfig(max_epochs=20, learning_rate=1e-3, batch_size=4, patience=5, seed=11)
    r1 = train(X, cfg, hidden=8, n_latent=2)
    r2 = train(X, cfg, hidden=8, n_latent=2)
    for k in r1.model.params:
        np.testing.assert_array_equal(r1.model.params[k], r2.model.params[k])
    losses = [h["loss"] for h in r1.history]
    assert r1.best_epoch == 1 + int(np.argmin(losses))
    assert r1.model.epoch == r1.best_epoch


def test_train_early_stops():
    X = rand_images(4, 9)
    res = train(X, TrainConfig(max_epochs=300, learning_rate=0.5, batch_size=4, patience=3, seed=0),
                hidden=4, n_latent=2)
    assert res.stopped_early
    assert len(res.history) - res.best_epoch == 3


def test_train_rejects_bad_dataset():
    with pytest.raises(ValueError):
        train(np.zeros((0, 2, 4, 4)), TrainConfig())
    with pytest.raises(ValueError):
        train(np.full((2, 2, 4, 4), 1.5), TrainConfig())


def test_train_history_csv(tmp_path):
    res = train(rand_images(4, 0), TrainConfig(max_epochs=3, patience=3), hidden=4, n_latent=2)
    res.write_history(tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,kl,reconstruction" and len(lines) == 4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=400)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


# generation -------------------------------------------------------------------

def test_generate_count_range_and_determinism():
    m = init_model(2, 4, 4, hidden=8, n_latent=16, seed=0)
    a = generate(m, 256, 5)
    assert a.shape == (256, 2, 4, 4)
    assert a.min() > 0 and a.max() < 1
    np.testing.assert_array_equal(a, generate(m, 256, 5))
    np.testing.assert_array_equal(decode(m, np.zeros(16)), decode(m, np.zeros(16)))


# oversampling and scalar extraction -------------------------------------------

def test_oversample_balanced_unchanged():
    h = np.array([0.02, 0.04, 0.06, 0.09])
    np.testing.assert_array_equal(oversample_indices(h, 4, 0.01, 0.1), [0, 1, 2, 3])


def test_oversample_eight_two():
    h = np.array([0.02] * 8 + [0.09] * 2)
    idx = oversample_indices(h, 4, 0.01, 0.1)
    counts = np.bincount(np.clip(((h[idx] - 0.01) / 0.09 * 4).astype(int), 0, 3), minlength=4)
    assert counts.tolist() == [8, 0, 0, 8]
    assert idx[:10].tolist() == list(range(10))
    assert idx[10:].tolist() == [8, 9, 8, 9, 8, 9]


@given(h=st.lists(st.floats(0.01, 0.1), min_size=1, max_size=60))
@settings(max_examples=50, deadline=None)
def test_oversample_histogram(h):
    h = np.array(h)
    imgs = np.arange(h.size)[:, None] * np.ones((1, 3))
    out_imgs, out_h = oversample(imgs, h)
    bins = lambda v: np.clip(((v - 0.01) / 0.09 * 4).astype(int), 0, 3)
    counts = np.bincount(bins(out_h), minlength=4)
    target = np.bincount(bins(h), minlength=4).max()
    assert set(counts[counts > 0].tolist()) == {target}
    np.testing.assert_array_equal(out_imgs[: h.size], imgs)
    # content of duplicates matches their source
    np.testing.assert_array_equal(out_imgs[:, 0], out_imgs[:, 0].astype(int))
    np.testing.assert_array_equal(h[out_imgs[:, 0].astype(int)], out_h)


def test_extract_scalar_examples():
    img = np.zeros((2, 5, 5))
    img[0, 1:3] = 1
    img[1] = 0.5
    assert extract_scalar_hf(img, 0.01, 0.1) == (pytest.approx(0.055), True)
    img[1] = 1.0
    assert extract_scalar_hf(img, 0.01, 0.1)[0] == pytest.approx(0.1)
    assert extract_scalar_hf(np.zeros((2, 5, 5)), 0.01, 0.1) == (0.01, False)


def test_extract_scalar_masked_mean():
    img = np.random.default_rng(0).uniform(size=(2, 6, 6))
    mask = img[0] >= 0.5
    ref = np.mean(0.01 + img[1][mask] * 0.09)
    assert extract_scalar_hf(img, 0.01, 0.1)[0] == pytest.approx(ref, rel=1e-14)


@given(h=st.floats(0.01, 0.1))
def test_normalization_round_trip(h):
    assert abs(float(denormalize_hf(normalize_hf(h, 0.01, 0.1), 0.01, 0.1)) - h) <= 1e-12


# persistence ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = tiny(2)
    m.epoch = 17
    path = tmp_path / "model.bin"
    save_checkpoint(path, m)
    back = load_checkpoint(path)
    assert (back.channels, back.height, back.width, back.hidden, back.n_latent) == (2, 4, 4, 6, 2)
    assert back.epoch == 17
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    header = path.read_bytes().split(b"\n", 1)[0]
    assert b'"epoch": 17' in header


def test_checkpoint_rejects_truncated(tmp_path):
    path = tmp_path / "model.bin"
    save_checkpoint(path, tiny())
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(VaeError):
        load_checkpoint(path)


def test_toy_dataset_relations():
    X, h = vae.toy_dataset(30, 16, "proportional", seed=0)
    vf = X[:, 0].mean(axis=(1, 2))
    assert stats.spearmanr(vf, h).statistic > 0.99
    X2, h2 = vae.toy_dataset(30, 16, "inverse", seed=0)
    np.testing.assert_array_equal(X2[:, 0], X[:, 0])
    assert stats.spearmanr(vf, h2).statistic < -0.99
    assert X.min() >= 0 and X.max() <= 1
