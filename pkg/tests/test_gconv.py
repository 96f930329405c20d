import numpy as np
import pytest

import gatt.tensor as T
from gatt.autodiff import new_rng
from gatt.gconv import (FeatureMapG, GConvLayer, MemoryCapError, filter_bank,
                        gconv_forward, group_conv, group_pool,
                        intermediate_responses, lift_conv, make_gconv_layer,
                        spatial_gpool)
from gatt.groups import make_group, transform_array
from gatt.tensor import Tensor
from gatt.verify import naive_group_conv, relabel, transform_input


def _feature(arr, grp):
    return FeatureMapG(Tensor(np.ascontiguousarray(arr)), grp)


# ---------------------------------------------------------------------------
# degenerate group: everything collapses to a plain convolution

def test_c1_lift_is_plain_conv2d():
    grp = make_group("C1")
    rng = new_rng(0)
    layer = make_gconv_layer(rng, grp, 2, 3, kernel=3, lifting=True, dtype="f64")
    x = new_rng(1).standard_normal((2, 2, 6, 6))
    out = lift_conv(_feature(x[:, :, None], grp), layer).data.data
    want = T.conv2d(Tensor(x), T.reshape(layer.weight, (3, 2, 3, 3))).data \
        + layer.bias.data.reshape(1, 3, 1, 1)
    np.testing.assert_array_equal(out[:, :, 0], want)


def test_c1_group_layer_degenerates_to_lifting():
    # with a trivial pose axis, "group-to-group" and lifting coincide; the
    # dispatcher takes the lifting path and the result is a plain conv
    grp = make_group("C1")
    rng = new_rng(2)
    layer = make_gconv_layer(rng, grp, 2, 3, kernel=3, lifting=False, dtype="f64")
    assert layer.lifting
    x = new_rng(3).standard_normal((1, 2, 1, 5, 5))
    out = gconv_forward(_feature(x, grp), layer).data.data
    want = T.conv2d(Tensor(x[:, :, 0]), T.reshape(layer.weight, (3, 2, 3, 3))).data \
        + layer.bias.data.reshape(1, 3, 1, 1)
    np.testing.assert_array_equal(out[:, :, 0], want)


# ---------------------------------------------------------------------------
# equivariance of single layers (exact: index permutation + shared padding)

@pytest.mark.parametrize("group_name", ["C2", "C4", "D4"])
def test_lift_conv_equivariance(group_name):
    grp = make_group(group_name)
    layer = make_gconv_layer(new_rng(4), grp, 2, 3, kernel=3, lifting=True,
                             dtype="f64")
    x = new_rng(5).standard_normal((2, 2, 7, 7))
    base = lift_conv(_feature(x[:, :, None], grp), layer).data.data
    for h in range(grp.order):
        xt = transform_array(grp, h, x)
        got = lift_conv(_feature(xt[:, :, None], grp), layer).data.data
        want = relabel(grp, h, base, pose_axes=(2,))
        np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("group_name", ["C2", "C4", "D4"])
def test_group_conv_equivariance(group_name):
    grp = make_group(group_name)
    layer = make_gconv_layer(new_rng(6), grp, 2, 3, kernel=3, dtype="f64")
    x = new_rng(7).standard_normal((1, 2, grp.order, 7, 7))
    base = group_conv(_feature(x, grp), layer).data.data
    for h in range(grp.order):
        xt = transform_input(grp, h, x)
        got = group_conv(_feature(xt, grp), layer).data.data
        want = relabel(grp, h, base, pose_axes=(2,))
        np.testing.assert_allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# the double-sum cross-check (small cases; the wide sweep runs in acceptance)

@pytest.mark.parametrize("group_name,lifting", [("C4", True), ("C4", False),
                                                ("D4", False)])
def test_gconv_matches_double_sum(group_name, lifting):
    grp = make_group(group_name)
    layer = make_gconv_layer(new_rng(8), grp, 2, 2, kernel=3, lifting=lifting,
                             dtype="f64")
    hin = 1 if lifting else grp.order
    x = new_rng(9).standard_normal((1, 2, hin, 5, 5))
    got = gconv_forward(_feature(x, grp), layer).data.data
    want = naive_group_conv(x, grp, layer.weight.data, layer.bias.data)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_gconv_stride2_matches_double_sum():
    grp = make_group("C4")
    layer = make_gconv_layer(new_rng(10), grp, 2, 2, kernel=3, stride=2,
                             dtype="f64")
    x = new_rng(11).standard_normal((1, 2, 4, 6, 6))
    got = group_conv(_feature(x, grp), layer).data.data
    want = naive_group_conv(x, grp, layer.weight.data, layer.bias.data, stride=2)
    np.testing.assert_allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# filter bank and per-pair responses

def test_filter_bank_shape_and_identity_block():
    grp = make_group("C4")
    layer = make_gconv_layer(new_rng(12), grp, 3, 2, kernel=3, dtype="f64")
    bank = filter_bank(layer).data
    assert bank.shape == (4 * 2, 3 * 4, 3, 3)
    # block h=0 is the untransformed filter
    np.testing.assert_array_equal(bank[:2], layer.weight.data.reshape(2, 12, 3, 3))


def test_intermediate_responses_sum_reproduces_layer():
    grp = make_group("D4")
    layer = make_gconv_layer(new_rng(13), grp, 3, 2, kernel=3, dtype="f64")
    x = new_rng(14).standard_normal((2, 3, 8, 6, 6))
    f = _feature(x, grp)
    resp = intermediate_responses(f, layer).data  # [N, O, C, H, Hin, Y, X]
    assert resp.shape == (2, 2, 3, 8, 8, 6, 6)
    summed = resp.sum(axis=(2, 4)) + layer.bias.data.reshape(1, 2, 1, 1, 1)
    full = group_conv(f, layer).data.data
    np.testing.assert_allclose(summed, full, atol=1e-13)


def test_intermediate_responses_lifting():
    grp = make_group("C4")
    layer = make_gconv_layer(new_rng(15), grp, 2, 3, kernel=3, lifting=True,
                             dtype="f64")
    x = new_rng(16).standard_normal((1, 2, 1, 5, 5))
    f = _feature(x, grp)
    resp = intermediate_responses(f, layer).data
    assert resp.shape == (1, 3, 2, 4, 1, 5, 5)
    summed = resp.sum(axis=(2, 4)) + layer.bias.data.reshape(1, 3, 1, 1, 1)
    np.testing.assert_allclose(summed, lift_conv(f, layer).data.data, atol=1e-13)


def test_memory_cap_refuses_large_blocks():
    grp = make_group("D4")
    layer = make_gconv_layer(new_rng(17), grp, 4, 4, kernel=3, dtype="f64")
    x = _feature(np.zeros((1, 4, 8, 10, 10)), grp)
    # 1*4*4*8*8*10*10*8 bytes = 819200; a cap below that must refuse
    with pytest.raises(MemoryCapError) as err:
        intermediate_responses(x, layer, memory_cap=819199)
    assert "819200" in str(err.value)
    intermediate_responses(x, layer, memory_cap=819200)  # exactly at the cap fits


# ---------------------------------------------------------------------------
# pooling heads

def test_group_pool_invariant_under_pose_relabel():
    grp = make_group("C4")
    x = new_rng(18).standard_normal((2, 3, 4, 5, 5))
    pooled = group_pool(_feature(x, grp), mode="max").data
    for h in range(grp.order):
        xt = transform_input(grp, h, x)
        got = group_pool(_feature(xt, grp), mode="max").data
        want = transform_array(grp, h, pooled)  # only the spatial part remains
        np.testing.assert_array_equal(got, want)


def test_group_pool_modes():
    grp = make_group("C4")
    x = new_rng(19).standard_normal((1, 2, 4, 3, 3))
    f = _feature(x, grp)
    np.testing.assert_array_equal(group_pool(f, "max").data, x.max(axis=2))
    np.testing.assert_allclose(group_pool(f, "mean").data, x.mean(axis=2),
                               atol=1e-15)


def test_spatial_gpool_shape():
    grp = make_group("D4")
    x = new_rng(20).standard_normal((2, 3, 8, 4, 4))
    out = spatial_gpool(_feature(x, grp), mode="mean").data
    assert out.shape == (2, 3, 8)
    np.testing.assert_allclose(out, x.mean(axis=(3, 4)), atol=1e-15)


# ---------------------------------------------------------------------------
# misuse

def test_layer_shape_validation():
    grp = make_group("C4")
    with pytest.raises(ValueError):
        GConvLayer(grp, Tensor(np.zeros((2, 2, 3, 3))))  # rank 4 weight
    with pytest.raises(ValueError):
        GConvLayer(grp, Tensor(np.zeros((2, 2, 3, 3, 3))))  # pose axis 3
    with pytest.raises(ValueError):
        GConvLayer(grp, Tensor(np.zeros((2, 2, 4, 3, 3))),
                   bias=Tensor(np.zeros(3)))  # bias extent != out channels


def test_forward_input_validation():
    grp = make_group("C4")
    lift_layer = make_gconv_layer(new_rng(21), grp, 2, 2, lifting=True)
    gc_layer = make_gconv_layer(new_rng(22), grp, 2, 2)
    planar = _feature(np.zeros((1, 2, 1, 5, 5), dtype=np.float32), grp)
    stacked = _feature(np.zeros((1, 2, 4, 5, 5), dtype=np.float32), grp)
    with pytest.raises(ValueError):
        lift_conv(stacked, lift_layer)   # lift wants planar input
    with pytest.raises(ValueError):
        group_conv(planar, gc_layer)     # group conv wants a full pose axis
    with pytest.raises(ValueError):
        lift_conv(planar, gc_layer)      # wrong layer kind
    with pytest.raises(ValueError):
        group_conv(stacked, lift_layer)
    with pytest.raises(ValueError):
        group_conv(_feature(np.zeros((1, 3, 4, 5, 5), dtype=np.float32), grp),
                   gc_layer)             # channel mismatch
    with pytest.raises(ValueError):
        group_conv(_feature(np.zeros((1, 2, 3, 5, 5), dtype=np.float32), grp),
                   gc_layer)             # bad pose extent
    with pytest.raises(ValueError):
        intermediate_responses(planar, gc_layer)  # pose mismatch vs filter
