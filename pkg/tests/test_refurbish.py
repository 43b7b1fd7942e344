"""Confidence estimation (1-D GMM) and label construction."""

import numpy as np
import pytest

from ccl_lab.data import TrainView, gen_blobs
from ccl_lab.errors import ContractError, DegenerateFitError
from ccl_lab.model import Model, init_pair
from ccl_lab.refurbish import (
    GmmParams,
    collaborative_labels,
    confidence,
    estimate_confidence,
    gmm_fit_1d,
    per_sample_losses,
    rolr_pseudo_labels,
)
from ccl_lab.tensor import Tensor


def _constant_model(C, logit_rows):
    """Classifier whose logits are fixed per class of a 1-hot input."""
    d = logit_rows.shape[0]
    m = Model([d, d], C)
    m.weights = [Tensor(np.eye(d), requires_grad=True)]
    m.biases = [Tensor(np.zeros(d), requires_grad=True)]
    m.cls_weight = Tensor(logit_rows, requires_grad=True)
    m.cls_bias = Tensor(np.zeros(C), requires_grad=True)
    return m


def test_per_sample_losses_perfect_peer():
    # peer puts ~all probability on the observed label -> losses ~ 0
    logits = np.array([[60.0, 0.0], [0.0, 60.0]])
    m = _constant_model(2, logits)
    feats = np.eye(2)[[0, 1, 0]]
    labels = np.array([0, 1, 0])
    losses = per_sample_losses(m, feats, labels)
    np.testing.assert_allclose(losses, 0.0, atol=1e-12)


def test_per_sample_losses_uniform_peer():
    m = _constant_model(4, np.zeros((3, 4)))
    feats = np.random.default_rng(0).normal(size=(5, 3))
    losses = per_sample_losses(m, feats, np.array([0, 1, 2, 3, 0]))
    np.testing.assert_allclose(losses, np.log(4), atol=1e-12)


def test_per_sample_losses_matches_scalar_recomputation():
    pair = init_pair(5, 6, [4, 8, 6], 3)
    peer = pair.models[1]
    feats = np.random.default_rng(1).normal(size=(3, 4))
    labels = np.array([2, 0, 1])
    losses = per_sample_losses(peer, feats, labels)
    probs = peer.predict_probs(Tensor(feats)).data
    for i in range(3):
        np.testing.assert_allclose(losses[i], -np.log(probs[i, labels[i]]),
                                   atol=1e-12)


def test_gmm_separated_clusters():
    x = np.array([0.0, 0.0, 0.0, 10.0, 10.0, 10.0])
    params = gmm_fit_1d(x)
    assert abs(params.mean0 - 0.0) < 0.1
    assert abs(params.mean1 - 10.0) < 0.1
    assert abs(params.weight0 - 0.5) < 0.05
    assert params.mean0 <= params.mean1


def test_gmm_loglik_trace_monotone():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = np.concatenate([rng.normal(0.3, 0.2, 150), rng.normal(2.5, 0.5, 100)])
        params = gmm_fit_1d(x)
        trace = np.array(params.log_likelihood_trace)
        assert np.all(np.diff(trace) >= -1e-9)


def test_gmm_symmetric_posterior_at_midpoint():
    # two mirror-image clusters about 5.0
    left = 5.0 - np.array([0.8, 1.0, 1.2, 0.9, 1.1])
    right = 5.0 + np.array([0.8, 1.0, 1.2, 0.9, 1.1])
    params = gmm_fit_1d(np.concatenate([left, right]))
    omega_mid = confidence(params, np.array([5.0]))[0]
    np.testing.assert_allclose(omega_mid, 0.5, atol=1e-6)


def test_gmm_degenerate_inputs():
    with pytest.raises(DegenerateFitError):
        gmm_fit_1d(np.full(10, 3.3))
    with pytest.raises(ContractError):
        gmm_fit_1d(np.array([1.0]))
    with pytest.raises(ContractError):
        gmm_fit_1d(np.array([1.0, np.inf]))


def test_gmm_variance_floor():
    params = gmm_fit_1d(np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]))
    assert params.var0 >= 1e-6 and params.var1 >= 1e-6


def test_confidence_tail_limits():
    # equal variances: the nearer mean dominates each tail
    params = GmmParams(mean0=0.5, mean1=3.0, var0=0.2, var1=0.2,
                       weight0=0.6, weight1=0.4, log_likelihood_trace=[])
    omega = confidence(params, np.array([-50.0, 0.5, 3.0, 80.0]))
    assert omega[0] > 0.999999
    assert omega[1] > 0.99
    assert omega[2] < 0.01
    assert omega[3] < 1e-6
    assert 0.0 <= omega.min() and omega.max() <= 1.0


def test_confidence_in_domain_with_unequal_variances():
    # losses live in [0, inf); at the low edge the clean component wins
    params = GmmParams(mean0=0.5, mean1=3.0, var0=0.1, var1=0.4,
                       weight0=0.6, weight1=0.4, log_likelihood_trace=[])
    omega = confidence(params, np.array([0.0, 0.5, 3.0]))
    assert omega[0] > 0.99
    assert omega[1] > 0.99
    assert omega[2] < 0.01


def test_estimate_confidence_fallback_on_degenerate():
    # a uniform peer gives identical losses -> flat 0.5 confidence
    ds = gen_blobs(C=3, n_per_class=10, dim=4, separation=4.0, spread=1.0, seed=0)
    view = TrainView(ds)
    peer = _constant_model(3, np.zeros((4, 3)))
    omega, params = estimate_confidence(peer, view)
    assert params is None
    np.testing.assert_array_equal(omega, 0.5)


def test_collaborative_labels_endpoints():
    y = np.array([0, 1])
    peer = np.array([[0.6, 0.4], [0.3, 0.7]])
    all_obs = collaborative_labels(np.ones(2), y, peer, T=1.0, num_classes=2)
    np.testing.assert_allclose(all_obs.y_soft, np.eye(2)[y], atol=1e-12)
    all_peer = collaborative_labels(np.zeros(2), y, peer, T=1.0, num_classes=2)
    np.testing.assert_allclose(all_peer.y_soft, peer, atol=1e-9)


def test_collaborative_labels_hand_value():
    out = collaborative_labels(np.array([0.5]), np.array([0]),
                               np.array([[0.6, 0.4]]), T=1.0, num_classes=2)
    np.testing.assert_allclose(out.y_soft, [[0.8, 0.2]], atol=1e-9)
    assert out.y_hard[0] == 0


def test_collaborative_labels_simplex_for_all_omega_T():
    rng = np.random.default_rng(3)
    for T in (0.25, 0.5, 1.0, 2.0):
        omega = rng.uniform(0, 1, size=6)
        y = rng.integers(0, 4, size=6)
        peer = rng.dirichlet(np.ones(4), size=6)
        out = collaborative_labels(omega, y, peer, T=T, num_classes=4)
        np.testing.assert_allclose(out.y_soft.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out.y_soft >= 0)
        np.testing.assert_array_equal(out.y_hard, out.y_soft.argmax(axis=1))


def test_rolr_pseudo_labels_values():
    uniform = np.full((2, 4), 0.25)
    np.testing.assert_allclose(rolr_pseudo_labels(uniform, uniform, 0.5),
                               uniform, atol=1e-9)
    p0 = np.array([[0.9, 0.1]])
    p1 = np.array([[0.7, 0.3]])
    np.testing.assert_allclose(rolr_pseudo_labels(p0, p1, 1.0),
                               [[0.8, 0.2]], atol=1e-12)
    np.testing.assert_allclose(rolr_pseudo_labels(p0, p1, 0.5),
                               [[0.941176, 0.058824]], atol=1e-6)


def test_confidence_separates_clean_from_corrupted():
    # peer trained a little on clean blobs; corrupted labels score higher
    # losses, so mean omega(clean) > mean omega(corrupted)
    from ccl_lab.data import build_transition_matrix, inject_label_noise
    from ccl_lab.model import adam_step
    from ccl_lab.losses import cross_entropy
    from ccl_lab.tensor import backward

    ds = gen_blobs(C=4, n_per_class=100, dim=8, separation=6.0, spread=1.0, seed=9)
    noised = inject_label_noise(ds, build_transition_matrix("symmetric", 0.4, 4),
                                seed=10)
    view = TrainView(noised)
    pair = init_pair(21, 22, [8, 16, 8], 4)
    peer = pair.models[1]
    # brief training on the noisy labels (warm-up analog)
    for _ in range(30):
        probs = peer.predict_probs(Tensor(view.features))
        loss = cross_entropy(probs, view.labels)
        backward(loss)
        adam_step(pair.optimizer_states[1], peer.parameters())
        peer.zero_grad()

    omega, params = estimate_confidence(peer, view)
    assert params is not None
    tr = noised.train_indices()
    clean_mask = noised.noisy_labels[tr] == noised.clean_labels[tr]
    assert omega[clean_mask].mean() > omega[~clean_mask].mean()
