import numpy as np
import pytest

from srlift import numerics as nx
from srlift.layers import (ConfigError, DenseLayer, GroupingScheme, RecombineOp, ResidualBlock,
                           SplitRecombineLayer, fc_layer_forward, group_layer_forward, map_global_context,
                           residual_block_forward, sr_layer_forward, sr_temporal_conv_forward,
                           standard_grouping)
from srlift.numerics import ShapeError, Tensor, finite_diff_check

GROUPS_3 = [np.array([0, 1]), np.array([2, 3, 4]), np.array([5, 6, 7, 8])]


def sr_layer(recombine=None, h=1, interior=False, seed=0, kernel=1, dilation=1, out_groups=None):
    op = RecombineOp(recombine, h) if recombine else None
    return SplitRecombineLayer(GROUPS_3, out_groups or GROUPS_3, op, interior=interior, kernel=kernel,
                               dilation=dilation, rng=np.random.default_rng(seed))


def jacobian(fn, x: np.ndarray) -> np.ndarray:
    """Exact reverse-mode Jacobian [out, in] of a batch-1 function."""
    rows = []
    probe = Tensor(x[None], requires_grad=True)
    out = fn(probe)
    for k in range(out.shape[-1]):
        probe.zero_grad()
        t = Tensor(x[None], requires_grad=True)
        sel = np.zeros(out.shape)
        sel[..., k] = 1.0
        nx.reduce_sum(nx.mul(fn(t), Tensor(sel))).backward()
        rows.append(t.grad.reshape(-1))
    return np.array(rows)


# ---------------------------------------------------------------- grouping

def test_channel_alloc_sums_and_rounding():
    scheme = standard_grouping(5)
    alloc = scheme.channel_alloc(1024)
    assert sum(alloc) == 1024 and min(alloc) >= 1
    sizes = [len(g) for g in scheme.joint_groups]
    expected = [int(np.floor(1024 * s / 17 + 0.5)) for s in sizes]
    diff = np.array(alloc) - np.array(expected)
    assert np.count_nonzero(diff) <= 1 and diff[sizes.index(max(sizes))] == 1024 - sum(expected)


def test_grouping_must_partition():
    with pytest.raises(ConfigError):
        GroupingScheme(((0, 1), (1, 2)))
    with pytest.raises(ConfigError):
        GroupingScheme(((0, 2),))


def test_standard_groupings_cover_every_joint():
    for g in (1, 2, 3, 5, 6, 8, 17):
        scheme = standard_grouping(g)
        assert scheme.n_groups == g
        assert sorted(j for grp in scheme.joint_groups for j in grp) == list(range(17))


def test_shuffled_keeps_sizes_and_is_seeded():
    base = standard_grouping(5)
    a = base.shuffled(5, seed=3)
    assert a == base.shuffled(5, seed=3)
    assert sorted(map(len, a.joint_groups)) == sorted(map(len, base.joint_groups))
    assert [len(g) for g in a.joint_groups] == [len(g) for g in base.joint_groups]
    assert base.shuffled(0, seed=3) == base
    with pytest.raises(ConfigError):
        base.shuffled(6, seed=0)


def test_recombine_rules():
    assert RecombineOp("concat", "full").resolve(3, 9) == 6
    assert RecombineOp("add", "group").resolve(3, 9) == 3
    assert RecombineOp("concat", "50%").resolve(4, 9) == 2
    assert RecombineOp("mult", 1).resolve(4, 9) == 1
    with pytest.raises(ConfigError):
        RecombineOp("mult", 2).resolve(4, 9)
    with pytest.raises(ConfigError):
        RecombineOp("divide", 1)
    with pytest.raises(ConfigError):
        RecombineOp("concat", -1)


# ---------------------------------------------------------------- FC

def test_fc_hand_values_identity_and_zero(rng):
    layer = DenseLayer(2, 2, interior=False)
    layer.weight.data[...] = [[1.0, 2.0], [3.0, 4.0]]
    assert fc_layer_forward(layer, Tensor([[1.0, 1.0]])).data.tolist() == [[3.0, 7.0]]
    layer.weight.data[...] = np.eye(2)
    x = rng.normal(size=(4, 2))
    assert np.array_equal(fc_layer_forward(layer, Tensor(x)).data, x)
    layer.weight.data[...] = 0.0
    assert np.all(fc_layer_forward(layer, Tensor(x)).data == 0.0)


def test_fc_width_mismatch():
    with pytest.raises(ShapeError, match="expects 2 input channels"):
        fc_layer_forward(DenseLayer(2, 2), Tensor(np.ones((1, 3))))


# ---------------------------------------------------------------- group / SR

def test_group_layer_hand_values():
    layer = SplitRecombineLayer([np.array([0]), np.array([1])], [np.array([0]), np.array([1])], interior=False)
    layer.weight[0].data[...] = 2.0
    layer.weight[1].data[...] = 3.0
    assert group_layer_forward(layer, Tensor([[1.0, 1.0]])).data.tolist() == [[2.0, 3.0]]


def test_group_layer_locality(rng):
    layer = sr_layer(interior=True)
    x = rng.normal(size=(6, 9))
    base = layer(Tensor(x)).data
    x2 = x.copy()
    x2[:, GROUPS_3[1]] += rng.normal(size=(6, 3))
    out = layer(Tensor(x2)).data
    for g in (0, 2):
        assert np.array_equal(out[:, GROUPS_3[g]], base[:, GROUPS_3[g]])
    assert not np.array_equal(out[:, GROUPS_3[1]], base[:, GROUPS_3[1]])


def test_single_group_equals_fc(rng):
    dense = DenseLayer(9, 7, interior=False, rng=np.random.default_rng(5))
    grp = SplitRecombineLayer([np.arange(9)], [np.arange(7)], interior=False)
    grp.weight[0].data[...] = dense.weight.data
    x = rng.normal(size=(5, 9))
    assert np.array_equal(group_layer_forward(grp, Tensor(x)).data, fc_layer_forward(dense, Tensor(x)).data)


def test_map_global_context_cases(rng):
    layer = SplitRecombineLayer([np.array([0]), np.array([1])], [np.array([0]), np.array([1])],
                                RecombineOp("concat", 1), interior=False)
    layer.context[0].data[...] = 0.2
    assert map_global_context(layer, Tensor([[7.0, 5.0]]), 0).data[0, 0] == pytest.approx(1.0, abs=1e-15)
    layer.context[0].data[...] = 0.0
    assert map_global_context(layer, Tensor([[7.0, 5.0]]), 0).data[0, 0] == 0.0

    full = sr_layer("concat", "full")
    full.context[1].data[...] = np.eye(6)
    x = rng.normal(size=(3, 9))
    assert np.array_equal(map_global_context(full, Tensor(x), 1).data, x[:, full.rest[1]])


@pytest.mark.parametrize("kind", ["concat", "mult", "add"])
def test_h_zero_is_group_layer(kind, rng):
    a = sr_layer(kind, 0, interior=True, seed=3)
    b = sr_layer(None, interior=True, seed=3)
    for wa, wb in zip(a.weight, b.weight):
        wb.data[...] = wa.data
    x = rng.normal(size=(8, 9))
    assert np.array_equal(a(Tensor(x)).data, b(Tensor(x)).data)


def test_mult_closed_gate_gives_bias(rng):
    layer = sr_layer("mult", 1)
    for g in range(3):
        layer.context[g].data[...] = 0.0
        layer.bias[g].data[...] = np.arange(layer.out_groups[g].size) + g
    out = sr_layer_forward(layer, Tensor(rng.normal(size=(4, 9)))).data
    for g in range(3):
        assert np.array_equal(out[:, layer.out_groups[g]], np.broadcast_to(layer.bias[g].data, (4, layer.out_groups[g].size)))


def test_concat_full_identity_equals_block_assembled_fc(rng):
    layer = sr_layer("concat", "full", seed=11, out_groups=[np.array([0, 1, 2]), np.array([3]), np.array([4, 5])])
    dense = DenseLayer(9, 6, interior=False)
    W = np.zeros((6, 9))
    for g in range(3):
        layer.context[g].data[...] = np.eye(layer.rest[g].size)
        gi, go, rest = layer.in_groups[g], layer.out_groups[g], layer.rest[g]
        W[np.ix_(go, gi)] = layer.weight[g].data[:, :gi.size]
        W[np.ix_(go, rest)] = layer.weight[g].data[:, gi.size:]
        layer.bias[g].data[...] = rng.normal(size=go.size)
        dense.bias.data[go] = layer.bias[g].data
    dense.weight.data[...] = W
    x = rng.normal(size=(10, 9))
    np.testing.assert_allclose(sr_layer_forward(layer, Tensor(x)).data, fc_layer_forward(dense, Tensor(x)).data,
                               rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind,h", [("concat", 1), ("concat", 3), ("add", 1), ("add", 3), ("mult", 1)])
def test_cross_group_jacobian_rank_at_most_h(kind, h, rng):
    layer = sr_layer(kind, h, interior=True, seed=h)
    layer(Tensor(rng.normal(size=(16, 9))), training=True)
    x = rng.normal(size=9)
    J = jacobian(lambda t: layer(t, training=False), x)
    for g in range(3):
        for gp in range(3):
            if g == gp:
                continue
            s = np.linalg.svd(J[np.ix_(layer.out_groups[g], layer.in_groups[gp])], compute_uv=False)
            assert np.all(s[h:] < 1e-8 * max(s[0], 1e-300))


# ---------------------------------------------------------------- temporal

def test_temporal_kernel1_single_frame_equals_connected(rng):
    layer = sr_layer("mult", 1, interior=True)
    x = rng.normal(size=(6, 9))
    a = sr_layer_forward(layer, Tensor(x), training=False).data
    b = sr_temporal_conv_forward(layer, Tensor(x[:, None, :]), training=False).data[:, 0]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_temporal_closed_context_is_per_group_conv(rng):
    layer = sr_layer("add", 1, kernel=3, dilation=2, seed=4)
    plain = sr_layer(None, kernel=3, dilation=2, seed=4)
    for g in range(3):
        layer.context[g].data[...] = 0.0
        plain.weight[g].data[...] = layer.weight[g].data
    x = rng.normal(size=(2, 9, 9))
    np.testing.assert_array_equal(sr_temporal_conv_forward(layer, Tensor(x)).data, plain(Tensor(x)).data)


def test_temporal_kernel3_receptive_field(rng):
    layer = sr_layer("mult", 1, kernel=3)
    x = rng.normal(size=(1, 9, 9))
    base = sr_temporal_conv_forward(layer, Tensor(x)).data
    for s in range(9):
        x2 = x.copy()
        x2[0, s] += 1.0
        changed = np.any(sr_temporal_conv_forward(layer, Tensor(x2)).data != base, axis=-1)[0]
        # output index t is centred on input frame t + 1
        assert set(np.nonzero(changed)[0] + 1) == {c for c in (s - 1, s, s + 1) if 1 <= c <= 7}


def test_temporal_too_short_names_minimum():
    layer = sr_layer("mult", 1, kernel=3, dilation=3)
    with pytest.raises(ShapeError, match="at least 7"):
        sr_temporal_conv_forward(layer, Tensor(np.ones((1, 5, 9))))


# ---------------------------------------------------------------- residual

def zeroed_block(width, depth=2):
    layers = [DenseLayer(width, width, rng=np.random.default_rng(i)) for i in range(depth)]
    for layer in layers:
        layer.weight.data[...] = 0.0
    layers[-1].bn.gamma.data[...] = 0.0
    return ResidualBlock(layers)


def test_zero_residual_block_is_identity(rng):
    x = rng.normal(size=(4, 6))
    block = zeroed_block(6)
    assert np.array_equal(residual_block_forward(block, Tensor(x)).data, x)
    outer = residual_block_forward(zeroed_block(6), residual_block_forward(block, Tensor(x)))
    assert np.array_equal(outer.data, x)


def test_residual_width_mismatch():
    with pytest.raises(ConfigError):
        ResidualBlock([DenseLayer(4, 5), DenseLayer(5, 6)])


def test_two_block_network_gradient(rng):
    blocks = [ResidualBlock([DenseLayer(5, 5, rng=np.random.default_rng(i * 2 + j)) for j in range(2)])
              for i in range(2)]
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    target = Tensor(rng.normal(size=(6, 5)))

    def loss(t):
        out = t
        for b in blocks:
            out = b(out, training=True)
        return nx.reduce_mean(nx.mul(nx.sub(out, target), nx.sub(out, target)))

    assert finite_diff_check(loss, x) < 1e-4


def test_group_permutation_consistency(rng):
    layer = sr_layer("concat", 2, interior=False, seed=9)
    order = [2, 0, 1]
    perm_in = np.concatenate([GROUPS_3[g] for g in order])
    new_in, pos = [], 0
    for g in order:
        new_in.append(np.arange(pos, pos + GROUPS_3[g].size))
        pos += GROUPS_3[g].size
    relabeled = SplitRecombineLayer(new_in, new_in, RecombineOp("concat", 2), interior=False)
    for k, g in enumerate(order):
        relabeled.weight[k].data[...] = layer.weight[g].data
        relabeled.bias[k].data[...] = layer.bias[g].data
        # the context map sees the other channels in (new) ascending order
        old_rest = layer.rest[g]
        new_rest_old_ids = perm_in[relabeled.rest[k]]
        idx = [int(np.nonzero(old_rest == c)[0][0]) for c in new_rest_old_ids]
        relabeled.context[k].data[...] = layer.context[g].data[:, idx]
    x = rng.normal(size=(5, 9))
    np.testing.assert_allclose(relabeled(Tensor(x[:, perm_in])).data, layer(Tensor(x)).data[:, perm_in],
                               rtol=0, atol=1e-12)
