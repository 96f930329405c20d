"""Datasets, image file I/O, run configuration and checkpointing.

File formats kept deliberately plain: IDX for digit data (big-endian header,
raw payload), binary PGM/PPM for image dumps, a line-oriented key=value
config, and a small tagged binary checkpoint ("GATT" magic, little-endian
buffers) that round-trips parameters and optimizer state bitwise.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import new_rng
from .groups import make_group, transform_array

# ---------------------------------------------------------------------------
# IDX

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _open_maybe_gz(path):
    p = str(path)
    return gzip.open(p, "rb") if p.endswith(".gz") else open(p, "rb")


def read_idx(path):
    """Parse an IDX file: u32 big-endian magic, u32 dims, raw payload."""
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise ValueError(f"{path}: payload size {len(raw) - header} does not match "
                         f"dims {dims}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    return magic, data


def load_idx_images(path, dtype=np.float32):
    """[N, Y, X] scaled to [0, 1]."""
    magic, data = read_idx(path)
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{path}: expected an IDX image file")
    return data.astype(dtype) / dtype(255.0)


def load_idx_labels(path):
    magic, data = read_idx(path)
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"{path}: expected an IDX label file")
    return data.astype(np.int64)


# ---------------------------------------------------------------------------
# rotation

def rotate_bilinear(img, angle_deg):
    """Rotate a square plane counterclockwise about its geometric center.

    Off-grid samples are bilinear; pixels pulled from outside the plane are
    zero.  Multiples of 90 degrees take the exact index-permutation path, so
    they match the group transform bit for bit.
    """
    img = np.asarray(img)
    if img.shape[-1] != img.shape[-2]:
        raise ValueError(f"rotate_bilinear needs square planes, got {img.shape[-2:]}")
    angle = float(angle_deg) % 360.0
    if angle % 90.0 == 0.0:
        quarter = int(angle // 90) % 4
        return transform_array(make_group("C4"), quarter, img)
    size = img.shape[-1]
    c = (size - 1) / 2.0
    th = np.deg2rad(angle)
    # inverse map: source = R(-theta) @ (offset), in (row, col) coordinates
    cs, sn = np.cos(th), np.sin(th)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    a = ii - c
    b = jj - c
    src_i = cs * a + sn * b + c
    src_j = -sn * a + cs * b + c
    i0 = np.floor(src_i).astype(np.int64)
    j0 = np.floor(src_j).astype(np.int64)
    di = src_i - i0
    dj = src_j - j0

    def sample(ir, jr):
        valid = (ir >= 0) & (ir < size) & (jr >= 0) & (jr < size)
        iv = np.clip(ir, 0, size - 1)
        jv = np.clip(jr, 0, size - 1)
        return img[..., iv, jv] * valid

    out = (sample(i0, j0) * (1 - di) * (1 - dj)
           + sample(i0, j0 + 1) * (1 - di) * dj
           + sample(i0 + 1, j0) * di * (1 - dj)
           + sample(i0 + 1, j0 + 1) * di * dj)
    return out.astype(img.dtype)


# ---------------------------------------------------------------------------
# datasets

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _find_idx(src_dir, stem):
    from pathlib import Path
    for suffix in ("", ".gz"):
        p = Path(src_dir) / (stem + suffix)
        if p.exists():
            return p
    raise FileNotFoundError(f"missing digit source file {stem}[.gz] under {src_dir}")


def make_rotmnist(src_dir, splits=(10000, 2000, 50000), seed=0):
    """Regenerate the rotated-digit benchmark from the plain digit files.

    Pools train and test images, shuffles them with the seed, rotates each
    kept image by an independent uniform angle in [0, 360), and cuts the
    given train/validation/test splits.
    """
    xs = np.concatenate([load_idx_images(_find_idx(src_dir, MNIST_FILES[0])),
                         load_idx_images(_find_idx(src_dir, MNIST_FILES[2]))])
    ys = np.concatenate([load_idx_labels(_find_idx(src_dir, MNIST_FILES[1])),
                         load_idx_labels(_find_idx(src_dir, MNIST_FILES[3]))])
    total = sum(splits)
    if total > xs.shape[0]:
        raise ValueError(f"splits need {total} images, source has {xs.shape[0]}")
    rng = new_rng(seed)
    order = rng.permutation(xs.shape[0])[:total]
    xs = xs[order]
    ys = ys[order]
    angles = rng.uniform(0.0, 360.0, size=total)
    rotated = np.empty_like(xs)
    for i in range(total):
        rotated[i] = rotate_bilinear(xs[i], angles[i])
    out = []
    lo = 0
    for n in splits:
        out.append((rotated[lo:lo + n, None], ys[lo:lo + n]))
        lo += n
    return out


_SHAPE_STAMPS = {}


def _shape_stamp(kind):
    if kind not in _SHAPE_STAMPS:
        s = np.zeros((5, 5), dtype=np.float32)
        if kind == 0:    # bar
            s[:, 2] = 1.0
        elif kind == 1:  # corner
            s[0, 0:3] = 1.0
            s[0:3, 0] = 1.0
        elif kind == 2:  # T
            s[0, :] = 1.0
            s[:, 2] = 1.0
        elif kind == 3:  # L
            s[:, 0] = 1.0
            s[4, 0:3] = 1.0
        else:
            raise ValueError(f"unknown shape class {kind}")
        _SHAPE_STAMPS[kind] = s
    return _SHAPE_STAMPS[kind]


def synth_shapes(n, seed=0, size=16):
    """N one-channel images, each a single oriented glyph of intensity 1.

    Four classes (bar / corner / T / L), stamped at a random position in one
    of the four quarter-turn orientations.  Class counts are balanced up to
    the remainder; the label order is shuffled.  Returns (x [N,1,S,S] f32 in
    {0,1}, y [N] int64).
    """
    rng = new_rng(seed)
    labels = np.arange(n) % 4
    labels = labels[rng.permutation(n)]
    x = np.zeros((n, 1, size, size), dtype=np.float32)
    grp = make_group("C4")
    margin = size - 5
    for i, cls in enumerate(labels):
        stamp = _shape_stamp(int(cls))
        orient = int(rng.integers(4))
        stamp = transform_array(grp, orient, stamp)
        top = int(rng.integers(margin + 1))
        left = int(rng.integers(margin + 1))
        x[i, 0, top:top + 5, left:left + 5] = stamp
    return x, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# PGM / PPM

def _quantize(plane):
    """Map [0,1] floats to bytes as floor(v * 255), clipped.

    floor keeps 0.0 -> 0 and 1.0 -> 255 exact and sends 0.5 to 127.
    """
    v = np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0)
    return np.minimum(np.floor(v * 255.0), 255).astype(np.uint8)


def write_pgm(path, plane):
    """Binary (P5) graymap, maxval 255, row-major."""
    b = _quantize(plane)
    if b.ndim != 2:
        raise ValueError("write_pgm expects a single [Y, X] plane")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{b.shape[1]} {b.shape[0]}\n255\n".encode())
        fh.write(b.tobytes())


def write_ppm(path, image):
    """Binary (P6) pixmap from [Y, X, 3] floats in [0, 1]."""
    b = _quantize(image)
    if b.ndim != 3 or b.shape[2] != 3:
        raise ValueError("write_ppm expects [Y, X, 3]")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{b.shape[1]} {b.shape[0]}\n255\n".encode())
        fh.write(b.tobytes())


def _read_netpbm(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(magic):
        raise ValueError(f"{path}: not a {magic.decode()} file")
    # header = magic, width, height, maxval; '#' starts a comment
    tokens = []
    pos = len(magic)
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(raw, dtype=np.uint8, offset=pos), w, h


def read_pgm(path):
    data, w, h = _read_netpbm(path, b"P5")
    if data.size != w * h:
        raise ValueError(f"{path}: payload does not match {w}x{h}")
    return data.reshape(h, w)


def read_ppm(path):
    data, w, h = _read_netpbm(path, b"P6")
    if data.size != w * h * 3:
        raise ValueError(f"{path}: payload does not match {w}x{h}x3")
    return data.reshape(h, w, 3)


def attention_montage(input_plane, alpha_planes, upsample=8, gap=1):
    """Input beside each attention plane, jointly normalized, as one graymap.

    The attention planes share one min-max normalization so their relative
    strengths stay comparable; the input is normalized on its own.  Attention
    planes from downsampled layers are nearest-upscaled to the input extent
    (which must be an integer multiple).  Panels are separated by white gap
    columns and the result nearest-upsampled as a whole.
    """
    def norm(p):
        p = np.asarray(p, dtype=np.float64)
        lo, hi = p.min(), p.max()
        return np.full_like(p, 0.5) if hi <= lo else (p - lo) / (hi - lo)

    def fit_to(p, y):
        if p.shape[0] == y:
            return p
        if y % p.shape[0]:
            raise ValueError(f"panel extent {p.shape[0]} does not divide input "
                             f"extent {y}")
        f = y // p.shape[0]
        return np.repeat(np.repeat(p, f, axis=0), f, axis=1)

    alphas = np.asarray(alpha_planes, dtype=np.float64)
    lo, hi = alphas.min(), alphas.max()
    alphas = np.full_like(alphas, 0.5) if hi <= lo else (alphas - lo) / (hi - lo)
    y = np.asarray(input_plane).shape[0]
    panels = [norm(input_plane)] + [fit_to(alphas[k], y)
                                    for k in range(alphas.shape[0])]
    sep = np.ones((y, gap))
    row = []
    for i, p in enumerate(panels):
        if i:
            row.append(sep)
        row.append(p)
    montage = np.concatenate(row, axis=1)
    return np.repeat(np.repeat(montage, upsample, axis=0), upsample, axis=1)


# ---------------------------------------------------------------------------
# run configuration

class ConfigError(ValueError):
    pass


GROUP_ALIASES = {"p4": "C4", "p4m": "D4", "c1": "C1", "c2": "C2"}
_VARIANTS = ("plain", "full", "channel", "spatial", "input")


@dataclass(frozen=True)
class RunConfig:
    group: str = "p4"
    variant: str = "plain"
    filter_size: int = 7
    reduction_ratio: int = 2
    lr: float = 0.001
    epochs: int = 30
    batch: int = 128
    seed: int = 0
    dtype: str = "f32"
    residual_branch: bool = True
    pool_out_channels: bool = True

    @property
    def group_name(self):
        return GROUP_ALIASES[self.group]


def _parse_bool(val, key, lineno):
    lv = val.lower()
    if lv in ("true", "1", "yes"):
        return True
    if lv in ("false", "0", "no"):
        return False
    raise ConfigError(f"line {lineno}: {key} expects a boolean, got {val!r}")


_CONFIG_PARSERS = {
    "group": lambda v, k, ln: _choice(v, k, ln, tuple(GROUP_ALIASES)),
    "variant": lambda v, k, ln: _choice(v, k, ln, _VARIANTS),
    "filter_size": lambda v, k, ln: _int(v, k, ln),
    "reduction_ratio": lambda v, k, ln: _int(v, k, ln),
    "lr": lambda v, k, ln: _float(v, k, ln),
    "epochs": lambda v, k, ln: _int(v, k, ln),
    "batch": lambda v, k, ln: _int(v, k, ln),
    "seed": lambda v, k, ln: _int(v, k, ln),
    "dtype": lambda v, k, ln: _choice(v, k, ln, ("f32", "f64")),
    "residual_branch": _parse_bool,
    "pool_out_channels": _parse_bool,
}


def _choice(val, key, lineno, options):
    if val not in options:
        raise ConfigError(f"line {lineno}: {key} must be one of {options}, got {val!r}")
    return val


def _int(val, key, lineno):
    try:
        return int(val)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects an integer, got {val!r}") from None


def _float(val, key, lineno):
    try:
        return float(val)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects a number, got {val!r}") from None


def load_config(path=None, text=None, overrides=None) -> RunConfig:
    """key=value per line; '#' comments; unknown or repeated keys are errors."""
    if text is None:
        text = ""
        if path is not None:
            with open(path) as fh:
                text = fh.read()
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}; valid keys: "
                              f"{sorted(_CONFIG_PARSERS)}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = _CONFIG_PARSERS[key](val, key, lineno)
    cfg = RunConfig(**seen)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"GATT"
CKPT_VERSION = 1
_DTYPE_TAG = {"f32": 0, "f64": 1}
_TAG_DTYPE = {0: "<f4", 1: "<f8"}


def _write_array(fh, arr):
    tag = _DTYPE_TAG["f32" if arr.dtype == np.float32 else "f64"]
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(_TAG_DTYPE[tag], copy=False).tobytes())


def _read_array(fh):
    tag, ndim = struct.unpack("<BB", fh.read(2))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    dt = np.dtype(_TAG_DTYPE[tag])
    buf = fh.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise ValueError("checkpoint truncated")
    return np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("=")), tag


def save_checkpoint(path, params, optimizer=None):
    """Parameter manifest plus buffers, then optional optimizer state."""
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique for checkpointing")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            nb = p.name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            _write_array(fh, p.data)
        if optimizer is None:
            fh.write(struct.pack("<B", 0))
        else:
            kind = 2 if hasattr(optimizer, "m") else 1
            fh.write(struct.pack("<B", kind))
            fh.write(struct.pack("<Q", optimizer.step_count))
            if kind == 2:
                for buf in optimizer.m + optimizer.v:
                    _write_array(fh, buf)
            else:
                for buf in optimizer.velocity:
                    _write_array(fh, buf)


def load_checkpoint(path, params, optimizer=None):
    """Restore parameters (matched by name, shape and dtype) and optimizer state."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        count = struct.unpack("<I", fh.read(4))[0]
        if count != len(params):
            raise ValueError(f"{path}: checkpoint has {count} parameters, "
                             f"model has {len(params)}")
        for p in params:
            nlen = struct.unpack("<H", fh.read(2))[0]
            name = fh.read(nlen).decode()
            arr, tag = _read_array(fh)
            if name != p.name:
                raise ValueError(f"{path}: parameter order mismatch "
                                 f"({name!r} vs {p.name!r})")
            if arr.shape != p.data.shape or _DTYPE_TAG[p.dtype] != tag:
                raise ValueError(f"{path}: manifest mismatch for {name!r}")
            p.data = arr.astype(p.data.dtype, copy=False).copy()
        kind = struct.unpack("<B", fh.read(1))[0]
        if kind and optimizer is not None:
            optimizer.step_count = struct.unpack("<Q", fh.read(8))[0]
            bufs = optimizer.m + optimizer.v if kind == 2 else optimizer.velocity
            for i in range(len(bufs)):
                arr, _ = _read_array(fh)
                bufs[i][...] = arr
