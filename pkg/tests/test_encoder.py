import numpy as np
import pytest

import castnet.autodiff as ad
from castnet import encoder as enc


SMALL = enc.EncoderConfig(input_size=16, channels=(4, 8), embedding_dim=8)


def test_config_validation():
    assert SMALL.grid_size == 4
    with pytest.raises(ValueError):
        enc.EncoderConfig(input_size=20, channels=(4, 8, 8))
    with pytest.raises(ValueError):
        enc.EncoderConfig(embedding_dim=0)


def test_init_same_seed_bit_identical():
    a = enc.init_params(SMALL, seed=42)
    b = enc.init_params(SMALL, seed=42)
    assert a.tensors.keys() == b.tensors.keys()
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)


def test_init_different_seeds_differ():
    a = enc.init_params(SMALL, seed=1)
    b = enc.init_params(SMALL, seed=2)
    assert any(not np.array_equal(a.tensors[n].data, b.tensors[n].data)
               for n in a.tensors if n.endswith("weight"))


def test_init_weight_variance_near_kaiming_target():
    cfg = enc.EncoderConfig(input_size=16, channels=(8, 8), embedding_dim=8)
    samples = []
    for seed in range(12):
        p = enc.init_params(cfg, seed)
        samples.append(p.tensors["conv2.weight"].data.ravel())
    w = np.concatenate(samples)
    assert w.size >= 1000
    fan_in = 8 * 9
    target = 2.0 / fan_in
    assert abs(w.var() - target) / target < 0.2


def test_zero_image_zero_bias_propagates_zeros():
    params = enc.init_params(SMALL, seed=0)
    out = enc.forward(params, np.zeros((3, 16, 16), np.float32))
    np.testing.assert_array_equal(out.conv5_acts.data, 0.0)
    # embedding is the eps-guarded normalization of the zero vector
    np.testing.assert_array_equal(out.embedding.data, 0.0)


def test_forward_deterministic():
    params = enc.init_params(SMALL, seed=3)
    img = np.random.default_rng(0).uniform(0, 1, (3, 16, 16)).astype(np.float32)
    a = enc.forward(params, img)
    b = enc.forward(params, img)
    np.testing.assert_array_equal(a.embedding.data, b.embedding.data)
    np.testing.assert_array_equal(a.conv5_acts.data, b.conv5_acts.data)


def test_forward_embedding_unit_norm():
    params = enc.init_params(SMALL, seed=4)
    rng = np.random.default_rng(1)
    for _ in range(5):
        img = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
        out = enc.forward(params, img)
        assert abs(np.linalg.norm(out.embedding.data) - 1.0) < 1e-5


def test_forward_rejects_wrong_size():
    params = enc.init_params(SMALL, seed=0)
    with pytest.raises(ValueError, match="expects"):
        enc.forward(params, np.zeros((3, 8, 8), np.float32))


def test_channel_permutation_equivalence():
    # permuting stage-1 output channels together with stage-2 input channels
    # leaves the embedding unchanged up to float32 reassociation
    params = enc.init_params(SMALL, seed=5)
    img = np.random.default_rng(2).uniform(0, 1, (3, 16, 16)).astype(np.float32)
    base = enc.forward(params, img).embedding.data

    perm = np.random.default_rng(3).permutation(SMALL.channels[0])
    shuffled = params.copy()
    shuffled.tensors["conv1.weight"].data = params.tensors["conv1.weight"].data[perm]
    shuffled.tensors["conv1.bias"].data = params.tensors["conv1.bias"].data[perm]
    shuffled.tensors["conv2.weight"].data = params.tensors["conv2.weight"].data[:, perm]
    out = enc.forward(shuffled, img).embedding.data
    np.testing.assert_allclose(out, base, atol=1e-5)


def test_gradient_reaches_conv5_from_embedding():
    params = enc.init_params(SMALL, seed=6)
    img = np.random.default_rng(4).uniform(0, 1, (3, 16, 16)).astype(np.float32)
    out = enc.forward(params, img)
    loss = ad.reduce_sum(ad.mul(out.embedding, out.embedding))
    (g,) = ad.grad(loss, [out.conv5_acts])
    assert g.shape == out.conv5_acts.shape
    assert np.any(g.data != 0.0)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


def _shade_dataset(n_per_class=20, size=16):
    """Two классes distinguishable by mean brightness."""
    rng = np.random.default_rng(7)
    data = []
    for label, level in ((0, 0.15), (1, 0.85)):
        for _ in range(n_per_class):
            img = np.clip(level + 0.05 * rng.standard_normal((3, size, size)), 0, 1)
            data.append((img.astype(np.float32), label))
    return data


def test_probe_separable_data_high_accuracy():
    params = enc.init_params(SMALL, seed=8)
    probe = enc.linear_probe_train(params, _shade_dataset(), epochs=300)
    assert probe.accuracy >= 0.95


def test_probe_single_class_degenerate():
    params = enc.init_params(SMALL, seed=8)
    data = [(np.full((3, 16, 16), 0.5, np.float32), 0) for _ in range(8)]
    with pytest.warns(UserWarning, match="single-class"):
        probe = enc.linear_probe_train(params, data, epochs=10)
    assert probe.accuracy == 1.0


def test_probe_empty_dataset_rejected():
    params = enc.init_params(SMALL, seed=8)
    with pytest.raises(ValueError, match="empty"):
        enc.linear_probe_train(params, [], epochs=5)


def test_probe_leaves_encoder_frozen():
    params = enc.init_params(SMALL, seed=9)
    before = {n: t.data.copy() for n, t in params.tensors.items()}
    enc.linear_probe_train(params, _shade_dataset(n_per_class=5), epochs=20)
    for n, t in params.tensors.items():
        np.testing.assert_array_equal(t.data, before[n])
