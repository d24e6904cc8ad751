import numpy as np
import pytest

from logitsep import autodiff as ad
from logitsep.errors import DimensionError, FormatError
from logitsep.network import (
    BatchNorm,
    Dense,
    MlpModel,
    batchnorm_update,
    features,
    forward_all,
    forward_single,
    forward_tape,
    init_mlp,
    load_model,
    mnist_mlp,
    save_model,
)


def _randomise_bn(model, rng):
    for bn in model.norms:
        w = bn.scale.size
        bn.scale = rng.uniform(0.5, 1.5, w)
        bn.shift = rng.normal(size=w)
        bn.running_mean = rng.normal(size=w)
        bn.running_var = rng.uniform(0.5, 2.0, w)
    return model


def test_zero_model_gives_zero_logits():
    model = init_mlp(4, (3,), 5, seed=0)
    for layer in model.layers():
        layer.weight[:] = 0
    x = np.random.default_rng(0).normal(size=(2, 4))
    assert np.array_equal(forward_all(model, x), np.zeros((2, 5)))
    assert all(forward_single(model, x[:1], j) == 0.0 for j in range(5))


def test_linear_identity_model():
    model = MlpModel([], [], Dense(np.eye(2), np.zeros(2)))
    assert forward_all(model, [[1.0, 2.0]]).tolist() == [[1.0, 2.0]]


def test_width_mismatch_is_dimension_error():
    model = init_mlp(4, (3,), 2)
    with pytest.raises(DimensionError):
        forward_all(model, np.zeros((1, 5)))


def test_layer_chain_is_validated():
    with pytest.raises(DimensionError):
        MlpModel([Dense(np.zeros((2, 3)), np.zeros(3))], [BatchNorm.fresh(3)], Dense(np.zeros((4, 2)), np.zeros(2)))


def test_single_logit_bit_exact_equivalence():
    rng = np.random.default_rng(42)
    for trial in range(100):
        d = int(rng.integers(1, 12))
        hidden = tuple(int(h) for h in rng.integers(1, 16, size=rng.integers(0, 3)))
        k = int(rng.integers(1, 20))
        model = _randomise_bn(init_mlp(d, hidden, k, seed=trial), rng)
        x = rng.normal(size=(1, d))
        j = int(rng.integers(k))
        assert forward_single(model, x, j) == forward_all(model, x)[0, j]


def test_batch_composition_independence():
    rng = np.random.default_rng(3)
    model = _randomise_bn(init_mlp(6, (8, 5), 4, seed=1), rng)
    x = rng.normal(size=(2, 6))
    both = forward_all(model, x)
    assert np.array_equal(both[0], forward_all(model, x[:1])[0])
    assert np.array_equal(both[1], forward_all(model, x[1:])[0])


def test_k1_model():
    model = init_mlp(3, (4,), 1, seed=2)
    x = np.ones((1, 3))
    assert forward_single(model, x, 0) == forward_all(model, x)[0, 0]


def test_forward_single_class_out_of_range():
    model = init_mlp(3, (), 2)
    with pytest.raises(IndexError):
        forward_single(model, np.ones((1, 3)), 2)


def test_inference_is_deterministic():
    model = mnist_mlp(10, seed=0)
    x = np.random.default_rng(0).uniform(size=(3, 784))
    assert forward_all(model, x).tobytes() == forward_all(model, x).tobytes()


def test_blas_kernel_agrees_numerically():
    rng = np.random.default_rng(9)
    model = _randomise_bn(init_mlp(10, (20, 20), 7, seed=4), rng)
    x = rng.normal(size=(5, 10))
    assert np.allclose(forward_all(model, x, kernel="blas"), forward_all(model, x), rtol=1e-12, atol=1e-12)


def test_constant_batch_normalises_to_shift():
    model = init_mlp(3, (4,), 2, seed=0)
    x = np.ones((5, 3))
    h = features(model, x, mode="train")
    # variance 0: (a - mean) = 0 and eps keeps the division finite; relu(0 + shift 0) = 0
    assert np.array_equal(h, np.zeros((5, 4)))


def test_batchnorm_momentum_one_copies_batch():
    bn = BatchNorm.fresh(2, momentum=1.0)
    batchnorm_update(bn, np.array([3.0, -1.0]), np.array([2.0, 0.5]))
    assert bn.running_mean.tolist() == [3.0, -1.0]
    assert bn.running_var.tolist() == [2.0, 0.5]


def test_batchnorm_two_updates_follow_recurrence():
    bn = BatchNorm.fresh(1, momentum=0.9)
    m1, m2 = 2.0, 4.0
    v1, v2 = 3.0, 5.0
    batchnorm_update(bn, np.array([m1]), np.array([v1]))
    batchnorm_update(bn, np.array([m2]), np.array([v2]))
    mean = 0.0
    var = 1.0
    for m, v in ((m1, v1), (m2, v2)):
        mean = 0.1 * mean + 0.9 * m
        var = 0.1 * var + 0.9 * v
    assert bn.running_mean[0] == mean
    assert bn.running_var[0] == var


def test_taped_forward_matches_train_mode_features():
    rng = np.random.default_rng(1)
    model = _randomise_bn(init_mlp(5, (6, 4), 3, seed=0), rng)
    x = rng.normal(size=(8, 5))
    fw = forward_tape(model, x, ad.Tape())
    expected = features(model, x, mode="train", kernel="blas") @ model.out.weight + model.out.bias
    assert np.allclose(fw.logits.data, expected, atol=1e-12)
    assert len(fw.params) == len(model.parameters())
    assert [p.shape for p in fw.params] == [np.atleast_2d(p).shape for p in model.parameters()]


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    model = _randomise_bn(init_mlp(6, (7, 3), 4, seed=8), rng)
    model.meta["loss"] = {"kind": "batch_ce"}
    path = save_model(tmp_path / "m.npz", model)
    loaded = load_model(path)
    x = rng.normal(size=(4, 6))
    assert forward_all(loaded, x).tobytes() == forward_all(model, x).tobytes()
    assert loaded.meta["loss"] == {"kind": "batch_ce"}
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.tobytes() == b.tobytes()


def test_bad_checkpoint_is_format_error(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        load_model(bad)
    partial = tmp_path / "partial.npz"
    np.savez(partial, header=np.array('{"format": "logitsep-mlp/1", "widths": [2, 3, 2]}'))
    with pytest.raises(FormatError):
        load_model(partial)


def test_mnist_architecture():
    assert mnist_mlp(10).widths == [784, 500, 500, 10]
