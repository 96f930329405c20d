"""Lifting and group convolutions over the discrete roto-translation groups.

Feature maps on the group are stored as [N, C, |H|, Y, X]; planar maps use a
group axis of extent 1.  Filters are [O, C, |H_in|, k, k] with odd square k.

A group convolution decomposes into |H| spatial convolutions: for each output
pose h the filter is transformed by h (spatial index map plus a permutation of
its |H_in| axis) and cross-correlated with the input, summing over input
channels and input poses.  The bias is a single value per output channel,
shared across the |H| axis; a pose-dependent bias would break equivariance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import Parameter, he_init
from .groups import FiniteGroup, transform_filter
from .tensor import Tensor

# Cap on the materialized per-pair response tensor (bytes).  The full
# [N, O, C, |H|, |H_in|, Y, X] block grows with |H|^2 * O * C and gets out of
# hand quickly, so it is estimated up front and refused beyond the cap.
DEFAULT_MEMORY_CAP = 1 << 30


class MemoryCapError(RuntimeError):
    pass


@dataclass
class FeatureMapG:
    """A Tensor tagged with the group its pose axis refers to."""
    data: Tensor
    group: FiniteGroup

    @property
    def shape(self):
        return self.data.shape

    @property
    def poses(self):
        return self.data.shape[2]

    @property
    def planar(self):
        return self.data.shape[2] == 1


def check_feature(f: FeatureMapG, group=None):
    if f.data.ndim != 5:
        raise ValueError(f"feature map must be [N, C, |H|, Y, X], got rank {f.data.ndim}")
    if f.poses not in (1, f.group.order):
        raise ValueError(f"group axis extent {f.poses} not in {{1, {f.group.order}}}")
    if group is not None and f.group.name != group.name:
        raise ValueError(f"group mismatch: feature {f.group.name} vs layer {group.name}")


class GConvLayer:
    """Weights for one lifting or group convolution layer.

    `weight` is [O, C, |H_in|, k, k] with |H_in| = 1 for a lifting layer and
    |H| for group-to-group layers.  `bias` is per out-channel or None.
    """

    def __init__(self, group, weight, bias=None, stride=1, padding="same"):
        if weight.ndim != 5:
            raise ValueError("gconv weight must be [O, C, |H_in|, k, k]")
        hin = weight.shape[2]
        if hin not in (1, group.order):
            raise ValueError(f"filter pose axis {hin} not in {{1, {group.order}}}")
        if bias is not None and bias.shape != (weight.shape[0],):
            raise ValueError("bias must be one value per output channel")
        self.group = group
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    @property
    def lifting(self):
        return self.weight.shape[2] == 1

    def params(self):
        out = [self.weight]
        if self.bias is not None:
            out.append(self.bias)
        return out


def make_gconv_layer(rng, group, in_channels, out_channels, kernel=3, lifting=False,
                     stride=1, padding="same", dtype="f32", bias=True, name=""):
    hin = 1 if lifting else group.order
    fan_in = in_channels * hin * kernel * kernel
    w = he_init(rng, (out_channels, in_channels, hin, kernel, kernel), fan_in,
                dtype=dtype, name=f"{name}.weight")
    b = Parameter(np.zeros(out_channels), dtype=dtype, name=f"{name}.bias",
                  weight_decay=False) if bias else None
    return GConvLayer(group, w, b, stride=stride, padding=padding)


def filter_bank(layer):
    """Stack of transformed filters, [(|H| * O), C * |H_in|, k, k].

    Row block h holds the filter transformed by group element h, flattened
    over (C, |H_in|); differentiable with respect to layer.weight.
    """
    grp = layer.group
    o, c, hin, k, _ = layer.weight.shape
    banks = []
    for h in range(grp.order):
        th = transform_filter(grp, h, layer.weight)
        banks.append(T.reshape(th, (o, c * hin, k, k)))
    return T.concat(banks, axis=0)


def _conv_on_group(f: FeatureMapG, layer, bank=None):
    grp = layer.group
    n, c, hin, y, x = f.shape
    o = layer.weight.shape[0]
    if bank is None:
        bank = filter_bank(layer)
    flat = T.reshape(f.data, (n, c * hin, y, x))
    out = T.conv2d(flat, bank, padding=layer.padding, stride=layer.stride)
    yo, xo = out.shape[2], out.shape[3]
    out = T.reshape(out, (n, grp.order, o, yo, xo))
    out = T.transpose(out, (0, 2, 1, 3, 4))
    if layer.bias is not None:
        out = T.add(out, T.reshape(layer.bias, (1, o, 1, 1, 1)))
    return FeatureMapG(out, grp)


def lift_conv(f: FeatureMapG, layer) -> FeatureMapG:
    """Planar input -> feature map with one slice per group element."""
    check_feature(f, layer.group)
    if not layer.lifting:
        raise ValueError("lift_conv needs a lifting layer (filter pose axis 1)")
    if not f.planar:
        raise ValueError("lift_conv input must be planar (group axis extent 1)")
    if f.shape[1] != layer.weight.shape[1]:
        raise ValueError(f"channel mismatch: {f.shape[1]} vs {layer.weight.shape[1]}")
    return _conv_on_group(f, layer)


def group_conv(f: FeatureMapG, layer) -> FeatureMapG:
    """Group-to-group convolution, summing over input channels and poses."""
    check_feature(f, layer.group)
    if layer.lifting:
        raise ValueError("group_conv needs a group-to-group layer; use lift_conv")
    if f.planar:
        raise ValueError("group_conv input must carry a full group axis")
    if f.shape[1] != layer.weight.shape[1]:
        raise ValueError(f"channel mismatch: {f.shape[1]} vs {layer.weight.shape[1]}")
    return _conv_on_group(f, layer)


def gconv_forward(f: FeatureMapG, layer) -> FeatureMapG:
    return lift_conv(f, layer) if layer.lifting else group_conv(f, layer)


def intermediate_responses(f: FeatureMapG, layer, memory_cap=DEFAULT_MEMORY_CAP):
    """Per-pair responses before reduction, [N, O, C, |H|, |H_in|, Yo, Xo].

    Entry [n, o, c, h, t] is the spatial cross-correlation of input slice
    (c, t) with slice (c, t) of the h-transformed filter; summing over
    (C, |H_in|) and adding the bias reproduces the layer output.
    """
    check_feature(f, layer.group)
    if f.shape[1] != layer.weight.shape[1]:
        raise ValueError(f"channel mismatch: {f.shape[1]} vs {layer.weight.shape[1]}")
    if f.poses != layer.weight.shape[2]:
        raise ValueError(f"pose mismatch: input {f.poses} vs filter {layer.weight.shape[2]}")
    grp = layer.group
    n, c, hin, y, x = f.shape
    o, _, _, k, _ = layer.weight.shape
    pt, pb, yo = T._pad_amounts(y, k, layer.stride, layer.padding)
    pl, pr, xo = T._pad_amounts(x, k, layer.stride, layer.padding)
    itemsize = f.data.data.dtype.itemsize
    est = n * o * c * grp.order * hin * yo * xo * itemsize
    if est > memory_cap:
        raise MemoryCapError(
            f"per-pair response tensor needs {est} bytes "
            f"(N*O*C*|H|*|H_in|*Y*X*itemsize = {n}*{o}*{c}*{grp.order}*{hin}*{yo}*{xo}*{itemsize}) "
            f"which exceeds the cap of {memory_cap}; reduce the batch or channel counts, "
            f"raise memory_cap, or use the input-attention variant which avoids this tensor")
    bank = filter_bank(layer)  # [(H*O), C*Hin, k, k]
    flat = T.reshape(f.data, (n, c * hin, y, x))
    resp = T.conv2d_multi(flat, bank, padding=layer.padding, stride=layer.stride)
    resp = T.reshape(resp, (n, grp.order, o, c, hin, yo, xo))
    return T.transpose(resp, (0, 2, 3, 1, 4, 5, 6))


def group_pool(f: FeatureMapG, mode="max") -> Tensor:
    """Reduce the pose axis away: [N, C, |H|, Y, X] -> [N, C, Y, X]."""
    check_feature(f)
    return T.reduce(f.data, axes=(2,), mode=mode)


def spatial_gpool(f: FeatureMapG, mode="mean") -> Tensor:
    """Reduce the spatial axes away: [N, C, |H|, Y, X] -> [N, C, |H|]."""
    check_feature(f)
    return T.reduce(f.data, axes=(3, 4), mode=mode)
