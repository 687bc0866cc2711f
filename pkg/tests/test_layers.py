import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spapnet.graph import SkeletalGraph
from spapnet.layers import (PCSF, BatchNorm, Dropout, LeakyReLU, LocallyConnected,
                            channel_squeeze, pool_matrix)


def toy_graph():
    return SkeletalGraph(edges=((1, 2),), adjacency=np.full((2, 2), 0.5),
                         dist=np.array([[0, 1], [1, 0]]), node_names=("a", "b"))


def test_lcn_toy_graph():
    layer = LocallyConnected(toy_graph(), 1, 1)
    for k in layer.params:
        layer.params[k][:] = 1.0 if k.startswith("W") else 0.0
    out = layer.forward(np.array([1.0, 2.0]).reshape(2, 1, 1))
    np.testing.assert_allclose(out.ravel(), [1.5, 1.5])


def test_lcn_annihilation(graph, rng):
    layer = LocallyConnected(graph, 3, 16, rng=rng)
    for v in layer.params.values():
        v[:] = 0
    assert not layer.forward(rng.normal(size=(7, 10, 3))).any()


def test_lcn_shape_and_keys(graph, rng):
    layer = LocallyConnected(graph, 3, 64, rng=rng)
    assert layer.forward(rng.normal(size=(7, 5, 3))).shape == (7, 5, 64)
    # self plus chain neighbours: 7 + 2 * 6 ordered pairs
    assert sum(k.startswith("W.") for k in layer.params) == 19
    assert "W.1.2" in layer.params and "W.1.3" not in layer.params


def test_lcn_shape_error_names_layer(graph):
    layer = LocallyConnected(graph, 3, 4, name="block1.lcn")
    with pytest.raises(ValueError, match="block1.lcn"):
        layer.forward(np.zeros((7, 2, 5)))


def test_lcn_frames_are_independent(graph, rng):
    layer = LocallyConnected(graph, 3, 4, rng=rng)
    x = rng.normal(size=(7, 6, 3))
    full = layer.forward(x)
    for t in range(6):
        np.testing.assert_allclose(layer.forward(x[:, t:t + 1]), full[:, t:t + 1], atol=1e-14)


def test_lcn_keeps_float32(graph, rng):
    layer = LocallyConnected(graph, 3, 4, rng=rng, dtype=np.float32)
    assert layer.forward(rng.normal(size=(7, 2, 3)).astype(np.float32)).dtype == np.float32


def test_leaky_relu_values():
    act = LeakyReLU(0.2)
    np.testing.assert_allclose(act.forward(np.array([-1.0, 3.0])), [-0.2, 3.0])


def test_dropout_eval_is_identity_and_train_is_seeded(rng):
    drop = Dropout(0.2)
    x = rng.normal(size=(7, 50, 8))
    np.testing.assert_array_equal(drop.forward(x), x)
    a = drop.forward(x, train=True, rng=np.random.default_rng(3))
    b = drop.forward(x, train=True, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    kept = a != 0
    np.testing.assert_allclose(a[kept], x[kept] / 0.8)
    with pytest.raises(ValueError):
        drop.forward(x, train=True)


def test_batchnorm_train_statistics(rng):
    bn = BatchNorm(7, 4)
    x = rng.normal(3.0, 2.0, size=(7, 200, 4))
    y = bn.forward(x, train=True)
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-4)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=1))


def test_batchnorm_eval_uses_initial_running_stats(rng):
    bn = BatchNorm(7, 4)
    x = rng.normal(size=(7, 3, 4))
    np.testing.assert_allclose(bn.forward(x), x / np.sqrt(1 + 1e-5))


@pytest.mark.parametrize("values,c_out,expected", [
    ([1, 3, 5, 7], 2, [2, 6]),
    ([0, 2, 4, 6, 8], 2, [1, 6]),
    ([4, 1, 9], 3, [4, 1, 9]),
])
def test_channel_squeeze_examples(values, c_out, expected):
    np.testing.assert_allclose(channel_squeeze(np.array(values, float), c_out), expected)


def test_channel_squeeze_rejects_widening():
    with pytest.raises(ValueError):
        channel_squeeze(np.ones(3), 4)


@given(c_in=st.integers(1, 64), data=st.data())
def test_pool_matrix_partitions_channels(c_in, data):
    c_out = data.draw(st.integers(1, c_in))
    p = pool_matrix(c_in, c_out)
    # each channel in exactly one group; each group averages its members
    assert np.all((p > 0).sum(axis=1) == 1)
    np.testing.assert_allclose(p.sum(axis=0), 1.0)
    sizes = (p > 0).sum(axis=0)
    assert sizes.max() - sizes.min() <= 1
    # groups are contiguous and ordered
    assert np.all(np.diff(p.argmax(axis=1)) >= 0)


@given(arrays(np.float64, st.integers(1, 12).map(lambda k: 4 * k),
              elements=st.floats(-1e3, 1e3)))
def test_channel_squeeze_preserves_mean_when_divisible(x):
    np.testing.assert_allclose(channel_squeeze(x, 4).mean(), x.mean(), atol=1e-9)


@settings(max_examples=30)
@given(c_in=st.integers(1, 32), data=st.data())
def test_channel_squeeze_adjoint(c_in, data):
    c_out = data.draw(st.integers(1, c_in))
    rng = np.random.default_rng(c_in * 100 + c_out)
    x, y = rng.normal(size=c_in), rng.normal(size=c_out)
    p = pool_matrix(c_in, c_out)
    np.testing.assert_allclose(channel_squeeze(x, c_out) @ y, x @ (p @ y), atol=1e-12)
    # unit upstream gradient spreads 1/group_size over the members
    sizes = (p > 0).sum(axis=0)
    np.testing.assert_allclose(p @ np.ones(c_out), 1.0 / sizes[p.argmax(axis=1)])


def test_pcsf_fused_length_and_output(graph, rng):
    layer = PCSF(graph, 128, 128, rng=rng)
    assert layer.fused_length(1) == 362
    assert layer.params["Wm.1"].shape == (362, 128)
    assert layer.fuse(rng.normal(size=(7, 3, 128)), 1).shape == (3, 362)
    assert layer.forward(rng.normal(size=(7, 3, 128))).shape == (7, 3, 128)


def test_pcsf_has_only_projection_params(graph):
    layer = PCSF(graph, 128, 128)
    assert sorted(layer.params) == [f"Wm.{m}" for m in range(1, 8)]


def test_pcsf_zero_projection_annihilates(graph, rng):
    layer = PCSF(graph, 16, 8, rng=rng)
    layer.params["Wm.3"][:] = 0
    out = layer.forward(rng.normal(size=(7, 4, 16)))
    assert not out[2].any() and out[3].any()


def test_pcsf_fusion_order(graph):
    layer = PCSF(graph, 128, 128)
    # node 4 is distance 3 from node 1 and lands right after self + short-range
    h = np.zeros((7, 1, 128))
    h[3] = 5.0
    fused = layer.fuse(h, 1)[0]
    assert fused[128 + 115 + 115] == 5.0
    assert np.count_nonzero(fused) == 1


def test_pcsf_long_range_permutation(graph, rng):
    layer = PCSF(graph, 128, 16, rng=rng)
    h = rng.normal(size=(7, 5, 128))
    base = layer.forward(h)[0]
    swapped = h.copy()
    swapped[[3, 4]] = h[[4, 3]]
    pos = 128 + 115 + 115
    w = layer.params["Wm.1"]
    w[[pos, pos + 1]] = w[[pos + 1, pos]]
    np.testing.assert_allclose(layer.forward(swapped)[0], base, atol=1e-12)


def test_pcsf_wrong_width(graph):
    with pytest.raises(ValueError, match="pcsf"):
        PCSF(graph, 16, 8).forward(np.zeros((7, 2, 12)))


def test_zero_upstream_gradient(graph, rng):
    lcn = LocallyConnected(graph, 3, 4, rng=rng)
    lcn.forward(rng.normal(size=(7, 5, 3)))
    assert not lcn.backward(np.zeros((7, 5, 4))).any()
    assert not any(g.any() for g in lcn.grads.values())
    pcsf = PCSF(graph, 8, 4, rng=rng)
    pcsf.forward(rng.normal(size=(7, 5, 8)))
    assert not pcsf.backward(np.zeros((7, 5, 4))).any()
    assert not any(g.any() for g in pcsf.grads.values())
