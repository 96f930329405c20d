"""Verification routines: equivariance sweeps, map-relabeling laws, a literal
double-sum convolution oracle, the stride/pool parity measurement, and
finite-difference gradient checks.

These functions back both the command-line harness and the acceptance tests,
so each one returns a plain dict of numbers rather than printing.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import (attention_maps, attentive_group_conv, input_attention,
                        input_attention_maps, make_channel_attention,
                        make_spatial_attention)
from .autodiff import (Parameter, backward, dropout, finite_diff_grad,
                       grad_rel_err, new_rng, zero_grads)
from .gconv import (FeatureMapG, gconv_forward, group_conv, lift_conv,
                    make_gconv_layer)
from .groups import (AffineElement, compose_affine, feature_perm, invert_affine,
                     make_group, plane_index_map, transform_array)
from .nn import (ForwardCtx, GBatchNorm, GBlock, Network, PoseBias, ReLUG,
                 VARIANTS, build_parity_nets)
from .tensor import Tape, Tensor

DEFAULT_SHIFTS = ((1, 0), (0, 1), (2, 1))


# ---------------------------------------------------------------------------
# small geometry helpers (independent of the Tensor transform path)

def shift_plane(arr, dy, dx):
    """Translate the last two axes by (dy, dx), filling with zeros."""
    out = np.zeros_like(arr)
    ysz, xsz = arr.shape[-2:]
    ys = slice(max(dy, 0), min(ysz + dy, ysz))
    xs = slice(max(dx, 0), min(xsz + dx, xsz))
    yr = slice(max(-dy, 0), min(ysz - dy, ysz))
    xr = slice(max(-dx, 0), min(xsz - dx, xsz))
    out[..., ys, xs] = arr[..., yr, xr]
    return out


def relabel(grp, h, arr, pose_axes=(), spatial=True):
    """Index relabeling t -> h^-1 t on each pose axis, then x -> h^-1 x.

    This is the predicted effect of transforming the input by h on a map
    whose axes carry group / spatial indices.  Pose axes of extent 1 pass
    through untouched.
    """
    out = np.asarray(arr)
    perm = feature_perm(grp, h)
    for axis in pose_axes:
        if out.shape[axis] == grp.order:
            out = np.take(out, perm, axis=axis)
        elif out.shape[axis] != 1:
            raise ValueError(f"pose axis {axis} has extent {out.shape[axis]}")
    if spatial:
        I, J = plane_index_map(grp, h, out.shape[-1])
        out = out[..., I, J]
    return out


def transform_input(grp, h, x):
    """Transform a network input: planar [N, C, Y, X] or stacked [N, C, |H|, Y, X]."""
    x = np.asarray(x)
    if x.ndim == 4:
        return transform_array(grp, h, x)
    return transform_array(grp, h, x, group_axis=2)


def bordered_noise(rng, shape, margin, dtype=np.float64):
    """Random values with a zero border on the last two axes."""
    x = np.zeros(shape, dtype=dtype)
    inner = tuple(shape[:-2]) + (shape[-2] - 2 * margin, shape[-1] - 2 * margin)
    if inner[-1] <= 0 or inner[-2] <= 0:
        raise ValueError(f"margin {margin} leaves no interior in {shape}")
    x[..., margin:shape[-2] - margin, margin:shape[-1] - margin] = \
        rng.standard_normal(inner)
    return x


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64)
                               - np.asarray(b, dtype=np.float64))))


def crop_interior(arr, margin):
    """Drop a border of the last two axes.

    Translation comparisons use this: the band a shift vacates holds the
    layer's resting output (bias, or a gate's value at zero response) rather
    than zeros, so only the common interior is meaningful.
    """
    if margin <= 0:
        return arr
    return arr[..., margin:arr.shape[-2] - margin, margin:arr.shape[-1] - margin]


# ---------------------------------------------------------------------------
# random stacks and the end-to-end equivariance sweep

_STACK_WIDTHS = (4, 6, 4)


def random_stack(group_name="C4", variant="plain", depth=2, seed=0, dtype="f64",
                 kernel=3, att_kernel=5, reduction_ratio=2, residual_branch=True,
                 pool_out=True, index_mode="relative", in_channels=2,
                 negative_control=None):
    """A lifting layer plus depth-1 further group convolutions, with ReLUs.

    All convolutions are stride-1 same-padded so the stack commutes exactly
    with the group action.  The `input` variant keeps the lifting layer plain
    (gating a planar map with a trivial-group spatial filter would not
    commute with rotations of the surrounding stack).  `negative_control`
    inserts a known equivariance breaker: "per-h-bias" appends a per-pose
    bias layer, "broken-w-indexing" switches the channel-attention matrices
    to absolute pose indexing.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if negative_control not in (None, "per-h-bias", "broken-w-indexing"):
        raise ValueError(f"unknown negative control {negative_control!r}")
    if negative_control == "broken-w-indexing":
        if variant not in ("full", "channel"):
            raise ValueError("broken-w-indexing needs a channel-attentive variant")
        index_mode = "absolute"
    grp = make_group(group_name)
    rng = new_rng(seed)
    widths = [in_channels] + [_STACK_WIDTHS[i % len(_STACK_WIDTHS)]
                              for i in range(depth)]
    layers = []
    for i in range(depth):
        lifting = i == 0
        block_variant = variant
        if variant == "input" and lifting:
            block_variant = "plain"
        conv = make_gconv_layer(rng, grp, widths[i], widths[i + 1], kernel=kernel,
                                lifting=lifting, dtype=dtype, name=f"b{i}")
        # randomize the (shared, equivariance-preserving) biases so the sweep
        # would catch transforms that forget to carry them
        conv.bias.data = conv.bias.data + rng.normal(0.0, 0.3, conv.bias.shape).astype(
            conv.bias.data.dtype)
        ch = sp = None
        if block_variant in ("full", "channel", "input"):
            n_rel = 1 if lifting else grp.order
            ch = make_channel_attention(rng, n_rel, widths[i], reduction_ratio,
                                        dtype=dtype, name=f"b{i}.ch")
        if block_variant in ("full", "spatial", "input"):
            in_poses = 1 if lifting else grp.order
            sp = make_spatial_attention(rng, in_poses, kernel=att_kernel,
                                        dtype=dtype, name=f"b{i}.sp")
        layers.append(GBlock(conv, variant=block_variant, ch_params=ch,
                             sp_params=sp, residual_branch=residual_branch,
                             pool_out=pool_out, index_mode=index_mode))
        if i + 1 < depth:
            layers.append(ReLUG())
    if negative_control == "per-h-bias":
        layers.append(PoseBias(widths[depth], grp, dtype=dtype))
    return Network(grp, layers)


def stack_equivariance_report(net, x, shifts=DEFAULT_SHIFTS, tolerance=1e-10,
                              halo=0):
    """Transform-then-compute vs compute-then-transform for every h and shift.

    `x` must be a planar ndarray [N, C, Y, X] whose support clears the
    boundary by at least max(shift) + the stack's receptive halo; then both
    comparisons are exact up to float noise.  Rotations compare full planes
    (zero padding is rotation symmetric).  Translations crop shift + `halo`:
    nonzero biases give every layer output a constant background, and the
    following convolutions' padding carves that background into boundary
    bands that sit at fixed positions rather than shifting with the data.
    """
    grp = net.group
    ctx = ForwardCtx(training=False)

    def run(inp):
        out = net.forward(Tensor(np.ascontiguousarray(inp)), ctx)
        return out.data.data if isinstance(out, FeatureMapG) else out.data

    base = run(x)
    max_shift = max((max(abs(dy), abs(dx)) for dy, dx in shifts), default=0)
    crop = max_shift + halo
    report = {"dtype": str(x.dtype), "crop_margin": crop, "tolerance": tolerance}
    errs = []
    for h in range(grp.order):
        got = run(transform_input(grp, h, x))
        want = relabel(grp, h, base, pose_axes=(2,))
        report[f"err_h{h}"] = max_abs(got, want)
        errs.append(report[f"err_h{h}"])
    for dy, dx in shifts:
        got = run(shift_plane(x, dy, dx))
        want = shift_plane(base, dy, dx)
        report[f"err_shift_{dy}_{dx}"] = max_abs(crop_interior(got, crop),
                                                 crop_interior(want, crop))
        errs.append(report[f"err_shift_{dy}_{dx}"])
    report["max_err"] = max(errs)
    report["mean_err"] = float(np.mean(errs))
    report["pass"] = report["max_err"] <= tolerance
    return report


def stack_suite(group_name="C4", variant="plain", max_depth=3, trials=5, seed=0,
                dtype="f64", tolerance=1e-10, negative_control=None,
                shifts=DEFAULT_SHIFTS):
    """Equivariance sweep over `trials` random stacks of depth 1..max_depth."""
    reports = []
    np_dtype = np.float64 if dtype == "f64" else np.float32
    max_shift = max(max(abs(dy), abs(dx)) for dy, dx in shifts) if shifts else 0
    for t in range(trials):
        depth = 1 + t % max_depth
        net = random_stack(group_name, variant, depth=depth, seed=seed + t,
                           dtype=dtype, negative_control=negative_control)
        halo = depth * 1 + 2 + 1  # conv halos + attention filter halo + slack
        margin = max_shift + halo
        size = 2 * margin + 7
        rng = new_rng(seed + 1000 + t)
        x = bordered_noise(rng, (2, 2, size, size), margin, dtype=np_dtype)
        rep = stack_equivariance_report(net, x, shifts=shifts, tolerance=tolerance,
                                        halo=halo)
        rep["depth"] = depth
        reports.append(rep)
    summary = {
        "group": group_name,
        "variant": variant,
        "trials": trials,
        "dtype": dtype,
        "tolerance": tolerance,
        "max_err": max(r["max_err"] for r in reports),
        "mean_err": float(np.mean([r["mean_err"] for r in reports])),
        "crop_margin": max(r["crop_margin"] for r in reports),
    }
    summary["pass"] = summary["max_err"] <= tolerance
    if negative_control:
        summary["negative_control"] = negative_control
        summary["detected"] = not summary["pass"]
    return summary, reports


# ---------------------------------------------------------------------------
# attention-map relabeling law

def attention_relabel_report(group_name="C4", seed=0, dtype="f64", lifting=False,
                             index_mode="relative", residual_branch=True,
                             pool_out=True, size=15, shifts=((1, 0), (0, 2)),
                             tolerance=1e-10, channels=4, out_channels=3,
                             kernel=3, att_kernel=5):
    """Check that both attention maps of a transformed input are the
    index-relabeled maps of the original input.

    For input transform h the predicted channel map is
    alpha_C[n, c, h0, t] -> alpha_C[n, c, h^-1 h0, h^-1 t] and the spatial map
    additionally moves x -> h^-1 x; translations leave alpha_C fixed and
    shift alpha_X.  `index_mode="absolute"` is the deliberate violation.
    """
    grp = make_group(group_name)
    rng = new_rng(seed)
    layer = make_gconv_layer(rng, grp, channels, out_channels, kernel=kernel,
                             lifting=lifting, dtype=dtype, name="probe")
    n_rel = 1 if lifting else grp.order
    ch = make_channel_attention(rng, n_rel, channels, 2, dtype=dtype, name="probe.ch")
    sp = make_spatial_attention(rng, n_rel, kernel=att_kernel, dtype=dtype,
                                name="probe.sp")
    margin = max(max(abs(dy), abs(dx)) for dy, dx in shifts) if shifts else 0
    margin += kernel // 2 + att_kernel // 2
    np_dtype = np.float64 if dtype == "f64" else np.float32
    hin = 1 if lifting else grp.order
    x = bordered_noise(new_rng(seed + 1), (2, channels, hin, size, size), margin,
                       dtype=np_dtype)

    def maps(arr):
        f = FeatureMapG(Tensor(np.ascontiguousarray(arr)), grp)
        ac, ax, _ = attention_maps(f, layer, ch, sp, variant="full",
                                   residual_branch=residual_branch,
                                   pool_out=pool_out, index_mode=index_mode)
        return ac.data, ax.data

    ac0, ax0 = maps(x)
    c_axes = (-2, -1)   # [.., H, Hin] trailing axes of alpha_C
    x_axes = (-4, -3)   # [.., H, Hin, Y, X]
    report = {"group": group_name, "dtype": dtype, "lifting": lifting,
              "index_mode": index_mode, "tolerance": tolerance}
    errs_c, errs_x = [], []
    for h in range(grp.order):
        ac_h, ax_h = maps(transform_array(grp, h, x, group_axis=2))
        errs_c.append(max_abs(ac_h, relabel(grp, h, ac0, c_axes, spatial=False)))
        errs_x.append(max_abs(ax_h, relabel(grp, h, ax0, x_axes, spatial=True)))
        report[f"err_alpha_c_h{h}"] = errs_c[-1]
        report[f"err_alpha_x_h{h}"] = errs_x[-1]
    for dy, dx in shifts:
        crop = max(abs(dy), abs(dx))
        ac_s, ax_s = maps(shift_plane(x, dy, dx))
        errs_c.append(max_abs(ac_s, ac0))
        errs_x.append(max_abs(crop_interior(ax_s, crop),
                              crop_interior(shift_plane(ax0, dy, dx), crop)))
        report[f"err_alpha_c_shift_{dy}_{dx}"] = errs_c[-1]
        report[f"err_alpha_x_shift_{dy}_{dx}"] = errs_x[-1]
    report["max_err_alpha_c"] = max(errs_c)
    report["max_err_alpha_x"] = max(errs_x)
    report["max_err"] = max(report["max_err_alpha_c"], report["max_err_alpha_x"])
    report["pass"] = report["max_err"] <= tolerance
    if index_mode == "absolute":
        report["detected"] = not report["pass"]
    return report


# ---------------------------------------------------------------------------
# literal double-sum convolution oracle

def naive_group_conv(x, grp, weight, bias=None, stride=1, padding="same"):
    """Direct evaluation: out(g) = sum over (x~, t~) of f(x~, t~) w(g^-1 (x~, t~)).

    Works entirely through the affine group algebra and the raw weight array,
    sharing no code with the im2col path.  `x` is [N, C, |H_in|, Y, X] and
    `weight` [O, C, |H_in|, k, k]; a pose extent of 1 means a lifting layer.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    n, c, hin, ysz, xsz = x.shape
    o, _, _, k, _ = w.shape
    r = k // 2
    pt, _, yo_sz = T._pad_amounts(ysz, k, stride, padding)
    pl, _, xo_sz = T._pad_amounts(xsz, k, stride, padding)
    out = np.zeros((n, o, grp.order, yo_sz, xo_sz))
    for h in range(grp.order):
        for yo in range(yo_sz):
            for xo in range(xo_sz):
                center = (yo * stride - pt + r, xo * stride - pl + r)
                ginv = invert_affine(grp, AffineElement(center, h))
                for t in range(hin):
                    for ty in range(ysz):
                        for tx in range(xsz):
                            rel = compose_affine(grp, ginv,
                                                 AffineElement((ty, tx), t))
                            du, dv = rel.x
                            if abs(du) > r or abs(dv) > r:
                                continue
                            wslice = w[:, :, rel.h if hin > 1 else 0,
                                       du + r, dv + r]         # [O, C]
                            out[:, :, h, yo, xo] += x[:, :, t, ty, tx] @ wslice.T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, o, 1, 1, 1)
    return out


def conv_oracle_report(group_names=("C4", "D4"), sizes=(4, 5, 6), seed=0,
                       tolerance=1e-12):
    """Compare group_conv / lift_conv against the double-sum oracle."""
    worst = 0.0
    cases = 0
    report = {}
    for gname in group_names:
        grp = make_group(gname)
        for size in sizes:
            for lifting in (False, True):
                for stride, padding in ((1, "same"), (2, "same"), (1, "valid")):
                    if padding == "valid" and size < 3:
                        continue
                    rng = new_rng(seed + cases)
                    layer = make_gconv_layer(rng, grp, 2, 2, kernel=3,
                                             lifting=lifting, stride=stride,
                                             padding=padding, dtype="f64",
                                             name="oracle")
                    hin = 1 if lifting else grp.order
                    x = rng.standard_normal((1, 2, hin, size, size))
                    f = FeatureMapG(Tensor(x), grp)
                    got = gconv_forward(f, layer).data.data
                    want = naive_group_conv(x, grp, layer.weight.data,
                                            layer.bias.data, stride=stride,
                                            padding=padding)
                    err = max_abs(got, want)
                    report[f"err_{gname}_s{size}_{'lift' if lifting else 'gc'}"
                           f"_{padding}{stride}"] = err
                    worst = max(worst, err)
                    cases += 1
    report["cases"] = cases
    report["max_err"] = worst
    report["tolerance"] = tolerance
    report["pass"] = worst <= tolerance
    return report


# ---------------------------------------------------------------------------
# stride / pooling parity measurement

def parity_report(size=32, seed=0, dtype="f32", return_maps=False):
    """Quarter-turn equivariance error of a stride-2 stack vs a pool stack.

    The downsampling grid of a stride-2 convolution keeps even-indexed rows
    and columns; a quarter turn of an even-extent plane maps them onto
    odd-indexed ones, so the two orders of operations disagree.  2x2 pooling
    windows tile an even plane symmetrically instead.  On odd extents the
    situation flips: the stride grid becomes symmetric while no symmetric
    2x2 tiling exists.
    """
    net_a, net_b = build_parity_nets(channels=4, dtype=dtype, seed=seed)
    grp = net_a.group
    np_dtype = np.float32 if dtype == "f32" else np.float64
    rng = new_rng(seed + 99)
    x = rng.standard_normal((2, 1, size, size)).astype(np_dtype)
    ctx = ForwardCtx(training=False)

    def err_and_map(net):
        base = net.forward(Tensor(x), ctx).data.data
        got = net.forward(Tensor(transform_input(grp, 1, x)), ctx).data.data
        want = relabel(grp, 1, base, pose_axes=(2,))
        diff = np.abs(got.astype(np.float64) - want.astype(np.float64))
        return float(diff.max()), diff[0].max(axis=(0, 1))

    err_a, map_a = err_and_map(net_a)
    err_b, map_b = err_and_map(net_b)
    report = {
        "size": size,
        "dtype": dtype,
        "err_stride": err_a,
        "err_pool": err_b,
        "ratio": err_a / err_b if err_b > 0 else float("inf"),
    }
    if return_maps:
        return report, {"stride": map_a, "pool": map_b}
    return report


# ---------------------------------------------------------------------------
# gradient checking

def _p(rng, shape, name, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, dtype="f64", name=name)


def gradcheck_cases(seed=0):
    """(name, params, loss_fn) triples jointly covering every primitive op."""
    cases = []
    grp4 = make_group("C4")

    rng = new_rng(seed)
    a = _p(rng, (2, 3), "a")
    b = _p(rng, (3,), "b")
    c = _p(rng, (2, 3), "c")

    def loss_elementwise():
        u = T.add(T.mul(a, b), c)
        v = T.add(T.relu(u), T.sigmoid(T.neg(u)))
        w = T.log(T.add(T.mul(u, u), Tensor(np.float64(1.0))))
        s = T.sqrt(T.add(T.mul(a, a), Tensor(np.float64(0.5))))
        q = T.div(T.exp(T.mul(u, Tensor(np.float64(0.3)))), T.add(T.mul(b, b), Tensor(np.float64(1.0))))
        total = T.add(T.add(T.reduce(v), T.reduce(w)), T.add(T.reduce(s), T.reduce(q)))
        return total
    cases.append(("elementwise", [a, b, c], loss_elementwise))

    rng = new_rng(seed + 1)
    x1 = _p(rng, (2, 3, 4), "x1")

    def loss_shapes():
        m = T.reduce(x1, axes=(1,), mode="max", keepdims=True)
        mn = T.reduce(x1, axes=(0, 2), mode="mean")
        t = T.transpose(x1, (2, 0, 1))
        rs = T.reshape(t, (4, 6))
        nw = T.narrow(rs, 1, 1, 4)
        cat = T.concat([nw, nw], axis=0)
        st = T.stack([mn, mn], axis=1)
        return T.add(T.add(T.reduce(m), T.reduce(mn)),
                     T.add(T.reduce(cat), T.reduce(st)))
    cases.append(("shapes_reduce", [x1], loss_shapes))

    rng = new_rng(seed + 2)
    A = _p(rng, (3, 4), "A")
    B = _p(rng, (4, 2), "B")
    C = _p(rng, (2, 3, 4), "C")
    D = _p(rng, (1, 4, 5), "D")

    def loss_matmul():
        return T.add(T.reduce(T.sigmoid(T.matmul(A, B))),
                     T.reduce(T.relu(T.bmm(C, D))))
    cases.append(("matmul_bmm", [A, B, C, D], loss_matmul))

    rng = new_rng(seed + 3)
    L = _p(rng, (4, 3), "L")
    labels = np.array([0, 2, 1, 2])

    def loss_sce():
        return T.softmax_cross_entropy(L, labels)
    cases.append(("cross_entropy", [L], loss_sce))

    rng = new_rng(seed + 4)
    xc = _p(rng, (1, 2, 5, 5), "xc")
    wc = _p(rng, (3, 2, 3, 3), "wc", 0.5)
    bc = _p(rng, (1, 3, 1, 1), "bc", 0.1)
    xv = _p(rng, (1, 2, 7, 7), "xv")

    def loss_conv():
        y1 = T.add(T.conv2d(xc, wc, padding="same", stride=1), bc)
        y2 = T.conv2d(xv, wc, padding="valid", stride=2)
        y3 = T.conv2d(xc, wc, padding="same", stride=2)
        return T.add(T.reduce(T.relu(y1)),
                     T.add(T.reduce(y2), T.reduce(y3)))
    cases.append(("conv2d", [xc, wc, bc, xv], loss_conv))

    rng = new_rng(seed + 5)
    xm = _p(rng, (2, 2, 6, 6), "xm")
    wm = _p(rng, (2, 2, 3, 3), "wm", 0.5)

    def loss_pool():
        y = T.conv2d_multi(xm, wm, padding="same", stride=1)
        ys = T.reduce(y, axes=(2,), mode="sum")
        p = T.max_pool2d(ys, window=2, stride=2)
        up = T.upsample_nearest(p, 2)
        pz = T.pad_zero(p, 1)
        return T.add(T.reduce(p), T.add(T.reduce(up), T.reduce(pz)))
    cases.append(("conv_multi_pool", [xm, wm], loss_pool))

    rng = new_rng(seed + 6)
    lift_layer = make_gconv_layer(rng, grp4, 2, 2, kernel=3, lifting=True,
                                  dtype="f64", name="g.lift")
    gc_layer = make_gconv_layer(rng, grp4, 2, 2, kernel=3, lifting=False,
                                dtype="f64", name="g.gc")
    xg = _p(rng, (1, 2, 1, 5, 5), "xg")

    def loss_gconv():
        f = FeatureMapG(xg, grp4)
        lifted = lift_conv(f, lift_layer)
        relued = FeatureMapG(T.relu(lifted.data), grp4)
        out = group_conv(relued, gc_layer)
        return T.reduce(out.data)
    cases.append(("group_conv",
                  [xg] + list(lift_layer.params()) + list(gc_layer.params()),
                  loss_gconv))

    rng = new_rng(seed + 7)
    att_layer = make_gconv_layer(rng, grp4, 2, 2, kernel=3, dtype="f64",
                                 name="a.conv")
    att_ch = make_channel_attention(rng, grp4.order, 2, 2, dtype="f64",
                                    name="a.ch")
    att_sp = make_spatial_attention(rng, grp4.order, kernel=3, dtype="f64",
                                    name="a.sp")
    xa = _p(rng, (1, 2, 4, 5, 5), "xa")

    def loss_attentive():
        f = FeatureMapG(xa, grp4)
        out = attentive_group_conv(f, att_layer, att_ch, att_sp, variant="full")
        return T.reduce(out.data)
    cases.append(("attentive_full",
                  [xa] + list(att_layer.params()) + att_ch.params() + att_sp.params(),
                  loss_attentive))

    rng = new_rng(seed + 8)
    in_ch = make_channel_attention(rng, grp4.order, 2, 2, dtype="f64", name="i.ch")
    in_sp = make_spatial_attention(rng, grp4.order, kernel=3, dtype="f64",
                                   name="i.sp")
    in_layer = make_gconv_layer(rng, grp4, 2, 2, kernel=3, dtype="f64",
                                name="i.conv")
    xi = _p(rng, (1, 2, 4, 5, 5), "xi")

    def loss_input_att():
        f = FeatureMapG(xi, grp4)
        gated = input_attention(f, in_ch, in_sp)
        out = group_conv(gated, in_layer)
        return T.reduce(out.data)
    cases.append(("input_attention",
                  [xi] + list(in_layer.params()) + in_ch.params() + in_sp.params(),
                  loss_input_att))

    rng = new_rng(seed + 9)
    bn = GBatchNorm(3, dtype="f64", name="bn")
    xb = _p(rng, (2, 3, 4, 4), "xb")

    def loss_bn():
        ctx = ForwardCtx(training=True)
        y = bn.forward(xb, ctx)
        return T.reduce(T.mul(y, y))
    cases.append(("batchnorm", [xb, bn.gamma, bn.beta], loss_bn))

    rng = new_rng(seed + 10)
    xd = _p(rng, (3, 8), "xd")

    def loss_dropout():
        y = dropout(xd, 0.4, new_rng(777), training=True)
        return T.reduce(T.mul(y, y))
    cases.append(("dropout", [xd], loss_dropout))

    rng = new_rng(seed + 11)
    xt = _p(rng, (1, 2, 4, 4, 4), "xt")

    def loss_transform():
        from .groups import transform_feature
        pieces = [transform_feature(grp4, h, xt) for h in range(4)]
        s = pieces[0]
        for piece in pieces[1:]:
            s = T.add(s, T.mul(piece, piece))
        return T.reduce(s)
    cases.append(("pose_transforms", [xt], loss_transform))

    return cases


def run_gradcheck_case(params, loss_fn, h=1e-5):
    """Max relative error between taped gradients and central differences."""
    with Tape() as tape:
        loss = loss_fn()
        backward(tape, loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)

    def eval_loss():
        return float(loss_fn().data)

    worst = 0.0
    for p, g in zip(params, analytic):
        fd = finite_diff_grad(eval_loss, [p], h=h)[0]
        got = np.zeros_like(fd) if g is None else g
        worst = max(worst, grad_rel_err(got, fd))
    return worst


def gradcheck_report(seed=0, tolerance=1e-4, h=1e-5):
    report = {"tolerance": tolerance, "h": h}
    worst = 0.0
    for name, params, loss_fn in gradcheck_cases(seed):
        err = run_gradcheck_case(params, loss_fn, h=h)
        report[f"err_{name}"] = err
        worst = max(worst, err)
    report["max_err"] = worst
    report["pass"] = worst <= tolerance
    return report


# ---------------------------------------------------------------------------
# attention maps of a built network (montage + consistency checks)

def forward_upto(net, x, index, ctx=None):
    """Run the first `index` layers, returning the input to layer `index`."""
    ctx = ctx or ForwardCtx(training=False)
    f = x
    if isinstance(f, np.ndarray):
        f = Tensor(f)
    if isinstance(f, Tensor) and f.ndim == 4:
        f = FeatureMapG(T.reshape(f, (f.shape[0], f.shape[1], 1) + f.shape[2:]),
                        net.group)
    for layer in net.layers[:index]:
        f = layer.forward(f, ctx)
    return f


def attentive_block_indices(net):
    return [i for i, layer in enumerate(net.layers)
            if isinstance(layer, GBlock) and layer.variant != "plain"]


def block_alpha_x(net, x, index):
    """The spatial attention map produced inside layer `index` for input x."""
    blk = net.layers[index]
    if not isinstance(blk, GBlock) or blk.variant in ("plain", "channel"):
        raise ValueError(f"layer {index} has no spatial attention")
    f = forward_upto(net, x, index)
    if blk.variant == "input":
        _, ax = input_attention_maps(f, blk.ch_params, blk.sp_params,
                                     residual_branch=blk.residual_branch)
        return ax.data  # [N, 1, Hf, Y, X]
    _, ax, _ = attention_maps(f, blk.layer, blk.ch_params, blk.sp_params,
                              variant=blk.variant,
                              residual_branch=blk.residual_branch,
                              pool_out=blk.pool_out, index_mode=blk.index_mode)
    return ax.data  # [N, 1|O, H, Hin, Y, X]


def alpha_x_consistency(net, x, index, tolerance=1e-4):
    """Are the maps of transformed inputs the relabeled maps of the input?"""
    grp = net.group
    base = block_alpha_x(net, x, index)
    pose_axes = (2,) if base.ndim == 5 else (-4, -3)
    report = {"layer": index, "tolerance": tolerance}
    maps = {0: base}
    errs = []
    for h in range(grp.order):
        got = block_alpha_x(net, transform_input(grp, h, x), index)
        maps[h] = got
        errs.append(max_abs(got, relabel(grp, h, base, pose_axes, spatial=True)))
        report[f"err_h{h}"] = errs[-1]
    report["max_err"] = max(errs)
    report["pass"] = report["max_err"] <= tolerance
    return report, maps


def alpha_panels(alpha_x):
    """Flatten one sample's spatial attention map into a list of [Y, X] planes."""
    a = np.asarray(alpha_x)
    if a.ndim == 5:        # [N, 1, Hf, Y, X]
        a = a[0, 0]
    elif a.ndim == 6:      # [N, 1|O, H, Hin, Y, X]
        a = a[0, 0].reshape(-1, a.shape[-2], a.shape[-1])
    else:
        raise ValueError(f"unexpected attention map rank {a.ndim}")
    return a
