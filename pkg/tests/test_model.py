"""Model pair: initialization, forward passes, Adam, checkpoints."""

import numpy as np
import pytest

from ccl_lab.errors import ConfigError, ContractError, DimensionError, FormatError
from ccl_lab.model import (
    AdamState,
    Model,
    adam_step,
    init_pair,
    load_checkpoint,
    save_checkpoint,
)
from ccl_lab.tensor import Tensor, backward


def test_init_pair_distinct_seeds_differ_elementwise():
    pair = init_pair(1, 2, [2, 16, 8], 4)
    m0, m1 = pair.models
    assert all(np.all(a.data != b.data)
               for a, b in zip(m0.weights, m1.weights))
    assert np.all(m0.cls_weight.data != m1.cls_weight.data)


def test_init_pair_equal_seeds_rejected():
    with pytest.raises(ConfigError):
        init_pair(7, 7, [2, 8], 4)


def test_init_pair_deterministic():
    a = init_pair(1, 2, [3, 8, 4], 5)
    b = init_pair(1, 2, [3, 8, 4], 5)
    for ma, mb in zip(a.models, b.models):
        for pa, pb in zip(ma.parameters(), mb.parameters()):
            assert pa.data.tobytes() == pb.data.tobytes()


def test_init_pair_validates_dims_and_classes():
    with pytest.raises(ConfigError):
        init_pair(1, 2, [], 4)
    with pytest.raises(ConfigError):
        init_pair(1, 2, [5], 4)
    with pytest.raises(ConfigError):
        init_pair(1, 2, [5, 3], 1)


def _manual_model(weights, biases, cls_w, cls_b, C):
    dims = [weights[0].shape[0]] + [w.shape[1] for w in weights]
    m = Model(dims, C)
    m.weights = [Tensor(w, requires_grad=True) for w in weights]
    m.biases = [Tensor(b, requires_grad=True) for b in biases]
    m.cls_weight = Tensor(cls_w, requires_grad=True)
    m.cls_bias = Tensor(cls_b, requires_grad=True)
    return m


def test_encode_zero_model_gives_zero_embedding():
    m = _manual_model([np.zeros((3, 2))], [np.zeros(2)],
                      np.zeros((2, 4)), np.zeros(4), 4)
    out = m.encode(Tensor(np.ones((5, 3))))
    np.testing.assert_array_equal(out.data, np.zeros((5, 2)))


def test_encode_single_identity_layer_is_linear():
    # one encoder layer = the embedding layer, which is linear (no relu)
    m = _manual_model([np.eye(2)], [np.zeros(2)], np.zeros((2, 3)), np.zeros(3), 3)
    out = m.encode(Tensor([[-1.0, 3.0]]))
    np.testing.assert_allclose(out.data, [[-1.0, 3.0]])


def test_hidden_layers_apply_relu():
    m = _manual_model([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)],
                      np.zeros((2, 3)), np.zeros(3), 3)
    out = m.encode(Tensor([[-1.0, 3.0]]))
    np.testing.assert_allclose(out.data, [[0.0, 3.0]])


def test_encode_batch_independence():
    pair = init_pair(3, 4, [6, 16, 8], 4)
    m = pair.models[0]
    rng = np.random.default_rng(0)
    batch = rng.normal(size=(8, 6))
    solo = m.encode(Tensor(batch[2:3])).data
    full = m.encode(Tensor(batch)).data
    np.testing.assert_allclose(full[2:3], solo, rtol=1e-12)


def test_encode_width_mismatch():
    pair = init_pair(3, 4, [6, 8], 4)
    with pytest.raises(DimensionError):
        pair.models[0].encode(Tensor(np.ones((2, 5))))


def test_classify_zero_classifier_uniform():
    m = _manual_model([np.eye(2)], [np.zeros(2)], np.zeros((2, 4)), np.zeros(4), 4)
    probs = m.classify(Tensor(np.random.default_rng(1).normal(size=(3, 2))))
    np.testing.assert_allclose(probs.data, np.full((3, 4), 0.25), atol=1e-12)


def test_classify_dominant_logit():
    m = _manual_model([np.eye(2)], [np.zeros(2)],
                      np.array([[50.0, 0.0], [0.0, 0.0]]), np.zeros(2), 2)
    probs = m.classify(Tensor([[1.0, 0.0]]))
    assert probs.data[0, 0] > 0.999999


def test_classify_empty_batch():
    pair = init_pair(3, 4, [6, 8], 4)
    probs = pair.models[0].predict_probs(Tensor(np.zeros((0, 6))))
    assert probs.shape == (0, 4)


def test_classify_rows_sum_to_one():
    pair = init_pair(3, 4, [6, 16, 8], 5)
    probs = pair.models[0].predict_probs(
        Tensor(np.random.default_rng(5).normal(size=(32, 6))))
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-9)


def test_adam_first_step_matches_hand_value():
    p = Tensor(np.array(0.0), requires_grad=True)
    p.grad = np.array(1.0)
    state = AdamState()
    adam_step(state, [p])
    assert state.t == 1
    # bias-corrected m̂ = v̂ = 1 -> Δ = -lr / (1 + eps)
    np.testing.assert_allclose(p.data, -0.001, rtol=1e-6)


def test_adam_zero_gradient_is_a_no_op():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    state = AdamState()
    adam_step(state, [p])
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    np.testing.assert_array_equal(state.m[0], 0.0)
    np.testing.assert_array_equal(state.v[0], 0.0)


def test_adam_deterministic():
    def run():
        p = Tensor(np.array([0.5, -0.5]), requires_grad=True)
        state = AdamState()
        for step in range(5):
            p.grad = np.array([0.1 * (step + 1), -0.2])
            adam_step(state, [p])
            p.zero_grad()
        return p.data.tobytes()

    assert run() == run()


def test_adam_missing_grad_rejected():
    p = Tensor(np.array(1.0), requires_grad=True)
    with pytest.raises(ContractError):
        adam_step(AdamState(), [p])


def test_snapshot_freezes_targets():
    # mutating the live model must not move a previously taken snapshot
    pair = init_pair(1, 2, [4, 8], 3)
    live = pair.models[0]
    snap = live.snapshot()
    before = snap.cls_weight.data.copy()

    x = Tensor(np.random.default_rng(0).normal(size=(6, 4)))
    loss = live.predict_probs(x).sum()
    backward(loss)
    for p in live.parameters():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adam_step(pair.optimizer_states[0], live.parameters())
    np.testing.assert_array_equal(snap.cls_weight.data, before)
    assert not snap.cls_weight.requires_grad


def test_snapshot_forward_records_no_tape():
    pair = init_pair(1, 2, [4, 8], 3)
    snap = pair.models[0].snapshot()
    probs = snap.predict_probs(Tensor(np.ones((2, 4))))
    assert probs._node is None and not probs.requires_grad


def test_checkpoint_round_trip(tmp_path):
    pair = init_pair(9, 10, [5, 16, 8], 4)
    model = pair.models[0]
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path, step=42)
    loaded, step = load_checkpoint(path)
    assert step == 42
    assert loaded.layer_dims == model.layer_dims
    assert loaded.num_classes == model.num_classes
    for a, b in zip(model.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
        assert b.requires_grad
    # same forward output
    x = Tensor(np.random.default_rng(3).normal(size=(4, 5)))
    np.testing.assert_array_equal(model.predict_probs(x).data,
                                  loaded.predict_probs(x).data)


def test_checkpoint_rejects_dataset_container(tmp_path):
    from ccl_lab.data import gen_blobs, save_container

    ds = gen_blobs(C=3, n_per_class=5, dim=4, separation=3.0, spread=0.5, seed=0)
    path = tmp_path / "ds.bin"
    save_container(ds, path)
    with pytest.raises(FormatError):
        load_checkpoint(path)
