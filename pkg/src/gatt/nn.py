"""Layer containers and small reference networks.

Layers pass a FeatureMapG along until a pooling head collapses it to a plain
Tensor of logits.  Everything is built from the differentiable ops in
gatt.tensor, so gradients come from the shared tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (attentive_group_conv, input_attention, make_channel_attention,
                        make_spatial_attention)
from .autodiff import Parameter, dropout, new_rng
from .gconv import (FeatureMapG, GConvLayer, gconv_forward, group_pool,
                    make_gconv_layer, spatial_gpool)
from .groups import make_group
from .tensor import Tensor

VARIANTS = ("plain", "full", "channel", "spatial", "input")


@dataclass
class ForwardCtx:
    training: bool = False
    rng: object = None


def _map_data(x, fn, group=None):
    if isinstance(x, FeatureMapG):
        return FeatureMapG(fn(x.data), x.group)
    return fn(x)


class GBlock:
    """One lifting or group convolution, optionally gated by attention."""

    def __init__(self, layer: GConvLayer, variant="plain", ch_params=None,
                 sp_params=None, residual_branch=True, pool_out=True,
                 index_mode="relative"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.layer = layer
        self.variant = variant
        self.ch_params = ch_params
        self.sp_params = sp_params
        self.residual_branch = residual_branch
        self.pool_out = pool_out
        self.index_mode = index_mode

    def forward(self, f, ctx):
        if self.variant == "plain":
            return gconv_forward(f, self.layer)
        if self.variant == "input":
            gated = input_attention(f, self.ch_params, self.sp_params,
                                    residual_branch=self.residual_branch)
            return gconv_forward(gated, self.layer)
        return attentive_group_conv(
            f, self.layer, self.ch_params, self.sp_params, variant=self.variant,
            residual_branch=self.residual_branch, pool_out=self.pool_out,
            index_mode=self.index_mode)

    def params(self):
        out = list(self.layer.params())
        if self.variant != "plain":
            if self.ch_params is not None and self.variant != "spatial":
                out += self.ch_params.params()
            if self.sp_params is not None and self.variant != "channel":
                out += self.sp_params.params()
        return out


class ReLUG:
    def forward(self, f, ctx):
        return _map_data(f, T.relu)

    def params(self):
        return []


class MaxPoolG:
    """Spatial max pooling applied to every pose slice."""

    def __init__(self, window=2, stride=2):
        self.window = window
        self.stride = stride

    def forward(self, f, ctx):
        def pool(t):
            if t.ndim == 5:
                n, c, hh, y, x = t.shape
                flat = T.reshape(t, (n, c * hh, y, x))
                p = T.max_pool2d(flat, self.window, self.stride)
                return T.reshape(p, (n, c, hh, p.shape[2], p.shape[3]))
            return T.max_pool2d(t, self.window, self.stride)
        return _map_data(f, pool)

    def params(self):
        return []


class GDropout:
    def __init__(self, rate):
        self.rate = rate

    def forward(self, f, ctx):
        if not ctx.training or self.rate == 0.0:
            return f
        return _map_data(f, lambda t: dropout(t, self.rate, ctx.rng, training=True))

    def params(self):
        return []


class GBatchNorm:
    """Per-channel batch norm with statistics shared across the pose axis.

    Sharing the statistics (and the affine pair) over |H| keeps the layer
    equivariant: a transformed batch has the same per-channel moments.
    """

    def __init__(self, channels, eps=2e-5, momentum=0.1, dtype="f32", name=""):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), dtype=dtype, name=f"{name}.gamma",
                               weight_decay=False)
        self.beta = Parameter(np.zeros(channels), dtype=dtype, name=f"{name}.beta",
                              weight_decay=False)
        self.running_mean = np.zeros(channels, dtype=T.DTYPES[dtype])
        self.running_var = np.ones(channels, dtype=T.DTYPES[dtype])

    def forward(self, f, ctx):
        def norm(t):
            c = t.shape[1]
            stat_axes = (0, 2, 3, 4) if t.ndim == 5 else (0, 2, 3)
            bshape = (1, c) + (1,) * (t.ndim - 2)
            if ctx.training:
                mu = T.reduce(t, axes=stat_axes, mode="mean", keepdims=True)
                diff = T.sub(t, mu)
                var = T.reduce(T.mul(diff, diff), axes=stat_axes, mode="mean",
                               keepdims=True)
                m = self.momentum
                self.running_mean = ((1 - m) * self.running_mean
                                     + m * mu.data.reshape(c))
                self.running_var = ((1 - m) * self.running_var
                                    + m * var.data.reshape(c))
            else:
                mu = Tensor(self.running_mean.reshape(bshape))
                var = Tensor(self.running_var.reshape(bshape))
                diff = T.sub(t, mu)
            eps = Tensor(np.full((), self.eps, dtype=t.data.dtype))
            xhat = T.div(diff, T.sqrt(T.add(var, eps)))
            out = T.add(T.mul(xhat, T.reshape(self.gamma, bshape)),
                        T.reshape(self.beta, bshape))
            return out
        return _map_data(f, norm)

    def params(self):
        return [self.gamma, self.beta]


class PoseBias:
    """Adds a distinct bias per (channel, pose).  Breaks equivariance on
    purpose; exists as a verification control."""

    def __init__(self, channels, group, dtype="f32", scale=0.5, name="pose_bias"):
        rng = new_rng(1234)
        data = rng.normal(0.0, scale, size=(1, channels, group.order, 1, 1))
        self.bias = Parameter(data, dtype=dtype, name=name, weight_decay=False)

    def forward(self, f, ctx):
        return FeatureMapG(T.add(f.data, self.bias), f.group)

    def params(self):
        return [self.bias]


class GroupPoolL:
    def __init__(self, mode="max"):
        self.mode = mode

    def forward(self, f, ctx):
        return group_pool(f, mode=self.mode)

    def params(self):
        return []


class SpatialMeanL:
    def forward(self, t, ctx):
        return T.reduce(t, axes=(2, 3), mode="mean")

    def params(self):
        return []


class Network:
    def __init__(self, group, layers):
        self.group = group
        self.layers = list(layers)

    def forward(self, x, ctx=None):
        ctx = ctx or ForwardCtx()
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        if isinstance(x, Tensor) and x.ndim == 4:
            n, c, y, w = x.shape
            x = FeatureMapG(T.reshape(x, (n, c, 1, y, w)), self.group)
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def params(self):
        out = []
        for layer in self.layers:
            out += layer.params()
        return out

    def param_count(self):
        return sum(p.size for p in self.params())


# ---------------------------------------------------------------------------
# reference architectures

def _attention_for(rng, variant, group, in_channels, in_poses, reduction_ratio,
                   kernel, dtype, name):
    """Attention parameter pair sized for a block's input.

    A planar input (pose extent 1) has no relative pose, so a single matrix
    pair / filter slice is allocated and the identity index used throughout.
    """
    if variant == "plain":
        return None, None
    ch = sp = None
    if variant in ("full", "channel", "input"):
        ch = make_channel_attention(rng, in_poses, in_channels, reduction_ratio,
                                    dtype=dtype, name=f"{name}.att_c")
    if variant in ("full", "spatial", "input"):
        sp = make_spatial_attention(rng, in_poses, kernel=kernel, dtype=dtype,
                                    name=f"{name}.att_x")
    return ch, sp


def build_tiny_net(group_name="C4", variant="input", channels=8, n_classes=4,
                   reduction_ratio=2, att_kernel=7, dtype="f32", seed=0,
                   residual_branch=True, pool_out=True, dropout_rate=0.0):
    """Two gconv layers plus a 1x1 head; fits 16x16 inputs.

    Attention (any variant) sits on the second, group-to-group layer; the
    lifting layer stays plain so the whole stack is exactly equivariant.
    """
    grp = make_group(group_name)
    rng = new_rng(seed)
    layers = [
        GBlock(make_gconv_layer(rng, grp, 1, channels, 3, lifting=True,
                                dtype=dtype, name="conv1")),
        GBatchNorm(channels, dtype=dtype, name="bn1"),
        ReLUG(),
        MaxPoolG(2, 2),
    ]
    ch, sp = _attention_for(rng, variant, grp, channels, grp.order,
                            reduction_ratio, att_kernel, dtype, "block2")
    layers += [
        GBlock(make_gconv_layer(rng, grp, channels, channels, 3, dtype=dtype,
                                name="conv2"),
               variant=variant, ch_params=ch, sp_params=sp,
               residual_branch=residual_branch, pool_out=pool_out),
        GBatchNorm(channels, dtype=dtype, name="bn2"),
        ReLUG(),
    ]
    if dropout_rate:
        layers.append(GDropout(dropout_rate))
    layers += [
        GBlock(make_gconv_layer(rng, grp, channels, n_classes, 1, dtype=dtype,
                                name="head")),
        GroupPoolL("max"),
        SpatialMeanL(),
    ]
    return Network(grp, layers)


def build_parity_nets(channels=4, dtype="f32", seed=0):
    """The two 2-layer C4 stacks of the stride/pooling comparison.

    (a) downsamples with a stride-2 group conv; (b) uses stride 1 followed by
    2x2 max pooling.  Both share the same first layer weights.
    """
    grp = make_group("C4")
    rng_a = new_rng(seed)
    net_a = Network(grp, [
        GBlock(make_gconv_layer(rng_a, grp, 1, channels, 3, lifting=True,
                                dtype=dtype, name="a1")),
        ReLUG(),
        GBlock(make_gconv_layer(rng_a, grp, channels, channels, 3, stride=2,
                                dtype=dtype, name="a2")),
    ])
    rng_b = new_rng(seed)
    net_b = Network(grp, [
        GBlock(make_gconv_layer(rng_b, grp, 1, channels, 3, lifting=True,
                                dtype=dtype, name="b1")),
        ReLUG(),
        GBlock(make_gconv_layer(rng_b, grp, channels, channels, 3, stride=1,
                                dtype=dtype, name="b2")),
        MaxPoolG(2, 2),
    ])
    return net_a, net_b


def build_digit_net(group_name="C4", variant="plain", channels=10, n_classes=10,
                    reduction_ratio=2, att_kernel=7, dtype="f32", seed=0,
                    residual_branch=True, pool_out=True, dropout_rate=0.3):
    """Seven-layer digit classifier (28x28 inputs), ~22k weights at width 10."""
    grp = make_group(group_name)
    rng = new_rng(seed)
    layers = [
        GBlock(make_gconv_layer(rng, grp, 1, channels, 3, lifting=True,
                                dtype=dtype, name="conv1")),
        GBatchNorm(channels, dtype=dtype, name="bn1"),
        ReLUG(),
    ]
    for i in range(2, 8):
        ch, sp = _attention_for(rng, variant, grp, channels, grp.order,
                                reduction_ratio, att_kernel, dtype, f"block{i}")
        layers.append(GBlock(make_gconv_layer(rng, grp, channels, channels, 3,
                                              dtype=dtype, name=f"conv{i}"),
                             variant=variant, ch_params=ch, sp_params=sp,
                             residual_branch=residual_branch, pool_out=pool_out))
        layers += [GBatchNorm(channels, dtype=dtype, name=f"bn{i}"), ReLUG()]
        if i == 2:
            layers.append(MaxPoolG(2, 2))
        if dropout_rate and i < 7:
            layers.append(GDropout(dropout_rate))
    layers += [
        GBlock(make_gconv_layer(rng, grp, channels, n_classes, 1, dtype=dtype,
                                name="head")),
        GroupPoolL("max"),
        SpatialMeanL(),
    ]
    return Network(grp, layers)
