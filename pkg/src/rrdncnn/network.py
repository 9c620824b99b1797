"""RR-DnCNN v1 (single chain) and v2 (u-shaped) restoration/reconstruction networks.

Both variants map a decoded low-resolution luma plane ``dlr`` (N, 1, h, w) to

* ``r_res``  - restoration residual, ``lr_hat = dlr + r_res``
* ``r_rec``  - reconstruction residual, ``hr_hat = image_upsample(lr_hat) + r_rec``

where ``image_upsample`` is a learned 1->1 stride-2 transposed convolution.

Layer counting
--------------
v2: a 5x5 stem, ``restoration_layers`` layers of ``modules_per_layer`` 3x3
conv modules, one stride-2 deconv per restoration layer, and
``reconstruction_layers`` layers of the same shape.  Restoration layer
``i`` is up-sampled and summed into reconstruction layer ``L + 1 - i``
after that layer's first half of modules.  The up-sampled output of the
last restoration layer is also the reconstruction input.

v1: one chain of single-module layers.  The stem counts as restoration
layer 1; the feature deconv counts as reconstruction layer 1 and the
``r_rec`` head as its last layer, so the default 10/15 lengths hold 9 and
13 plain 3x3 modules respectively.

Every conv module is followed by a leaky ReLU.  Transposed convolutions
and the two residual heads are linear.
"""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from ._io import atomic_write_bytes
from .errors import CheckpointError, ChecksumError, ConfigError, DimensionError
from .tensor import ConvWeights

UP_STRIDE, UP_PAD, UP_OUT_PAD = 2, 1, 1


@dataclass(frozen=True)
class NetworkConfig:
    arch: str = "v2"
    channels: int = 64
    restoration_layers: int = 10
    reconstruction_layers: Optional[int] = None
    modules_per_layer: Optional[int] = None
    stem_kernel: int = 5
    skip_connections: Optional[bool] = None
    scale: int = 2
    slope: float = T.DEFAULT_SLOPE

    def __post_init__(self):
        if self.arch not in ("v1", "v2"):
            raise ConfigError(f"arch must be 'v1' or 'v2', got {self.arch!r}")
        v2 = self.arch == "v2"
        if self.reconstruction_layers is None:
            object.__setattr__(self, "reconstruction_layers", self.restoration_layers if v2 else 15)
        if self.modules_per_layer is None:
            object.__setattr__(self, "modules_per_layer", 2 if v2 else 1)
        if self.skip_connections is None:
            object.__setattr__(self, "skip_connections", v2)
        self.validate()

    def validate(self):
        if self.scale != 2:
            raise ConfigError("only x2 scaling is supported")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ConfigError("stem_kernel must be a positive odd integer")
        if not 0 < self.slope < 1:
            raise ConfigError("leaky ReLU slope must lie in (0, 1)")
        if self.restoration_layers < 1:
            raise ConfigError("restoration_layers must be >= 1")
        if self.arch == "v1":
            if self.modules_per_layer != 1:
                raise ConfigError("v1 layers hold exactly one module")
            if self.skip_connections:
                raise ConfigError("v1 has no skip connections")
            if self.reconstruction_layers < 2:
                raise ConfigError("v1 reconstruction needs >= 2 layers (deconv + head)")
        else:
            if self.reconstruction_layers < 1:
                raise ConfigError("reconstruction_layers must be >= 1")
            if self.modules_per_layer < 1:
                raise ConfigError("modules_per_layer must be >= 1")
            if self.skip_connections:
                if self.reconstruction_layers != self.restoration_layers:
                    raise ConfigError("skip connections need equal restoration/reconstruction depth")
                if self.modules_per_layer < 2:
                    raise ConfigError("skip injection needs >= 2 modules per layer")

    @property
    def inject_after(self) -> int:
        """Module index (1-based) after which a skip is summed in."""
        return self.modules_per_layer // 2

    def with_(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)


class NetworkParams(OrderedDict):
    """Ordered ``name -> ConvWeights`` mapping for one network."""

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Flat view: ``name.weight`` / ``name.bias`` -> array (shared, not copied)."""
        out = OrderedDict()
        for name, w in self.items():
            out[f"{name}.weight"] = w.weights
            if w.bias is not None:
                out[f"{name}.bias"] = w.bias
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "NetworkParams":
        params = cls()
        for key, arr in arrays.items():
            name, kind = key.rsplit(".", 1)
            if kind == "weight":
                params[name] = ConvWeights(arr, arrays.get(f"{name}.bias"))
        return params

    def copy(self) -> "NetworkParams":
        return NetworkParams((k, w.copy()) for k, w in self.items())

    @property
    def size(self) -> int:
        return sum(w.size for w in self.values())


@dataclass
class ForwardOutputs:
    r_res: np.ndarray
    lr_hat: np.ndarray
    r_rec: np.ndarray
    hr_hat: np.ndarray
    cache: Optional[dict] = field(default=None, repr=False)


# --------------------------------------------------------------------------
# topology

def _is_deconv(name: str) -> bool:
    return name in ("upsample", "up") or name.startswith("up.")


def _pad_for(name: str, config: NetworkConfig) -> int:
    if _is_deconv(name):
        return UP_PAD
    if name == "stem":
        return config.stem_kernel // 2
    return 1


def _skip_sources(config: NetworkConfig):
    L = config.restoration_layers
    return list(range(1, L + 1)) if config.skip_connections else [L]


def expected_shapes(config: NetworkConfig) -> "OrderedDict[str, tuple]":
    """Kernel shape (out, in, kh, kw) of every entry, in storage order."""
    C, k = config.channels, config.stem_kernel
    L, Lr, M = config.restoration_layers, config.reconstruction_layers, config.modules_per_layer
    shapes = OrderedDict(stem=(C, 1, k, k))
    if config.arch == "v2":
        for i in range(1, L + 1):
            for m in range(1, M + 1):
                shapes[f"res.{i}.{m}"] = (C, C, 3, 3)
        for i in _skip_sources(config):
            shapes[f"up.{i}"] = (C, C, 3, 3)
        for j in range(1, Lr + 1):
            for m in range(1, M + 1):
                shapes[f"rec.{j}.{m}"] = (C, C, 3, 3)
    else:
        for i in range(2, L + 1):
            shapes[f"res.{i}"] = (C, C, 3, 3)
        shapes["up"] = (C, C, 3, 3)
        for j in range(2, Lr):
            shapes[f"rec.{j}"] = (C, C, 3, 3)
    shapes["head_res"] = (1, C, 3, 3)
    shapes["head_rec"] = (1, C, 3, 3)
    shapes["upsample"] = (1, 1, 3, 3)
    return shapes


INIT_SCHEMES = ("he", "residual")

BILINEAR_X2 = np.outer([0.5, 1.0, 0.5], [0.5, 1.0, 0.5])


def build_network(config: NetworkConfig, init_seed: int = 0, init: str = "he") -> NetworkParams:
    """He fan-in normal kernels (fan-in / stride^2 for deconvs), zero biases.

    ``init="residual"`` draws the same kernels, then sets the image upsampler
    to the bilinear x2 kernel and zeroes both residual heads, so an untrained
    network already outputs ``lr_hat = dlr`` and a bilinear ``hr_hat``.
    """
    if init not in INIT_SCHEMES:
        raise ConfigError(f"init must be one of {INIT_SCHEMES}, got {init!r}")
    rng = np.random.default_rng(init_seed)
    params = NetworkParams()
    for name, shape in expected_shapes(config).items():
        fan_in = shape[1] * shape[2] * shape[3]
        if _is_deconv(name):
            fan_in = max(fan_in / UP_STRIDE ** 2, 1.0)
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = ConvWeights(w.astype(np.float32), np.zeros(shape[0], np.float32))
    if init == "residual":
        params["upsample"].weights[0, 0] = BILINEAR_X2
        params["head_res"].weights[:] = 0
        params["head_rec"].weights[:] = 0
    return params


def count_params(config: NetworkConfig) -> int:
    return sum(int(np.prod(s)) + s[0] for s in expected_shapes(config).values())


MAC_CONVENTION = (
    "MACs = conv: output_elements * in_ch * kh * kw; "
    "stride-2 deconv: input_elements * out_ch * kh * kw (non-zero taps only); "
    "bias adds and activations not counted; input size is the LR plane"
)


def count_macs(config: NetworkConfig, h: int, w: int) -> int:
    """Multiply-accumulates of one forward pass on an ``h`` x ``w`` LR input."""
    lr_px = h * w
    hr_px = 4 * lr_px
    total = 0
    for name, (o, i, kh, kw) in expected_shapes(config).items():
        if _is_deconv(name):
            total += lr_px * i * o * kh * kw
        elif name.startswith("rec.") or name == "head_rec":
            total += hr_px * o * i * kh * kw
        else:
            total += lr_px * o * i * kh * kw
    return total


# --------------------------------------------------------------------------
# forward / backward

def _check_params(params: NetworkParams, config: NetworkConfig):
    shapes = expected_shapes(config)
    if list(params.keys()) != list(shapes.keys()):
        raise DimensionError("parameter names do not match the network config")
    for name, shape in shapes.items():
        if params[name].weights.shape != shape:
            raise DimensionError(
                f"{name}: kernel {params[name].weights.shape} != expected {shape}")


def image_upsample(params: NetworkParams, lr_hat: np.ndarray) -> np.ndarray:
    """Learned x2 deconvolution of the restored LR plane, in the kernel's precision."""
    w = params["upsample"]
    return T.deconv2d(lr_hat.astype(w.weights.dtype), w, UP_STRIDE, UP_PAD, UP_OUT_PAD)


def forward(params: NetworkParams, config: NetworkConfig, dlr: np.ndarray,
            keep_cache: bool = False, check: bool = True) -> ForwardOutputs:
    """Run the network on ``dlr`` (N, 1, h, w).

    Feature maps use the parameters' dtype (float32 in production).
    ``lr_hat`` and ``hr_hat`` are float64 so that the residual additions are
    exact for float32 operands.
    """
    dlr = T.as_tensor4(dlr)
    if dlr.shape[1] != 1:
        raise DimensionError(f"dlr must have one channel, got {dlr.shape[1]}")
    if min(dlr.shape[2:]) < config.stem_kernel:
        raise DimensionError(f"input {dlr.shape[2:]} smaller than the stem kernel")
    if check:
        _check_params(params, config)
    slope = config.slope
    work = params["stem"].weights.dtype
    x = dlr.astype(work)
    convs = []  # (name, input, pre-activation or None)

    def conv(name, inp, act=True):
        pre = T.conv2d(inp, params[name], 1, _pad_for(name, config))
        if keep_cache:
            convs.append((name, inp, pre if act else None))
        return T.leaky_relu(pre, slope) if act else pre

    feats = {}
    f = conv("stem", x)
    if config.arch == "v2":
        for i in range(1, config.restoration_layers + 1):
            for m in range(1, config.modules_per_layer + 1):
                f = conv(f"res.{i}.{m}", f)
            feats[i] = f
    else:
        for i in range(2, config.restoration_layers + 1):
            f = conv(f"res.{i}", f)
    r_res = conv("head_res", f, act=False)

    if config.arch == "v2":
        ups = {i: T.deconv2d(feats[i], params[f"up.{i}"], UP_STRIDE, UP_PAD, UP_OUT_PAD)
               for i in _skip_sources(config)}
        L = config.restoration_layers
        g = ups[L]
        for j in range(1, config.reconstruction_layers + 1):
            for m in range(1, config.modules_per_layer + 1):
                g = conv(f"rec.{j}.{m}", g)
                if config.skip_connections and m == config.inject_after:
                    g = T.add(g, ups[L + 1 - j])
    else:
        g = T.deconv2d(f, params["up"], UP_STRIDE, UP_PAD, UP_OUT_PAD)
        for j in range(2, config.reconstruction_layers):
            g = conv(f"rec.{j}", g)
    r_rec = conv("head_rec", g, act=False)

    lr_hat = dlr.astype(np.float64) + r_res
    up_img = image_upsample(params, lr_hat)
    hr_hat = up_img.astype(np.float64) + r_rec
    cache = None
    if keep_cache:
        cache = {"convs": convs, "x": x, "feats": feats, "last_res": f,
                 "rec_in": g, "lr_hat_work": lr_hat.astype(work)}
        if config.arch == "v1":
            cache["up_in"] = f
    return ForwardOutputs(r_res, lr_hat, r_rec, hr_hat, cache)


def backward(params: NetworkParams, config: NetworkConfig, out: ForwardOutputs,
             d_lr_hat: np.ndarray, d_hr_hat: np.ndarray,
             upsample_input: Optional[np.ndarray] = None) -> "OrderedDict[str, np.ndarray]":
    """Parameter gradients given loss gradients w.r.t. ``lr_hat`` and ``hr_hat``.

    With ``upsample_input`` the image up-sampler is treated as having been
    applied to that plane rather than to ``lr_hat`` (no gradient reaches
    ``lr_hat`` through it).  Returns a flat mapping keyed like
    :meth:`NetworkParams.arrays`.
    """
    if out.cache is None:
        raise ValueError("forward() must be run with keep_cache=True before backward()")
    cache = out.cache
    slope = config.slope
    convs = {name: (inp, pre) for name, inp, pre in cache["convs"]}
    grads = {}

    def put(name, gb):
        grads[f"{name}.weight"] = gb.d_weights
        if gb.d_bias is not None:
            grads[f"{name}.bias"] = gb.d_bias

    def conv_back(name, d_out):
        inp, pre = convs[name]
        if pre is not None:
            d_out = T.leaky_relu_backward(pre, d_out, slope)
        gb = T.conv2d_backward(inp, params[name], 1, _pad_for(name, config), d_out)
        put(name, gb)
        return gb.d_input

    def deconv_back(name, inp, d_out):
        gb = T.deconv2d_backward(inp, params[name], UP_STRIDE, UP_PAD, UP_OUT_PAD, d_out)
        put(name, gb)
        return gb.d_input

    work = cache["x"].dtype
    d_hr = np.asarray(d_hr_hat, dtype=work)
    d_lr = np.asarray(d_lr_hat, dtype=work)
    if upsample_input is None:
        d_lr = d_lr + deconv_back("upsample", cache["lr_hat_work"], d_hr)
    else:
        deconv_back("upsample", np.asarray(upsample_input, dtype=work), d_hr)

    # reconstruction branch
    dg = conv_back("head_rec", d_hr)
    if config.arch == "v2":
        L = config.restoration_layers
        d_ups = {}
        for j in range(config.reconstruction_layers, 0, -1):
            for m in range(config.modules_per_layer, 0, -1):
                if config.skip_connections and m == config.inject_after:
                    src = L + 1 - j
                    d_ups[src] = dg if src not in d_ups else d_ups[src] + dg
                dg = conv_back(f"rec.{j}.{m}", dg)
        d_ups[L] = dg if L not in d_ups else d_ups[L] + dg
        d_feat = {i: deconv_back(f"up.{i}", cache["feats"][i], d) for i, d in d_ups.items()}
    else:
        for j in range(config.reconstruction_layers - 1, 1, -1):
            dg = conv_back(f"rec.{j}", dg)
        d_up_in = deconv_back("up", cache["up_in"], dg)

    # restoration branch
    df = conv_back("head_res", d_lr)
    if config.arch == "v2":
        for i in range(config.restoration_layers, 0, -1):
            if i in d_feat:
                df = df + d_feat[i]
            for m in range(config.modules_per_layer, 0, -1):
                df = conv_back(f"res.{i}.{m}", df)
    else:
        df = df + d_up_in
        for i in range(config.restoration_layers, 1, -1):
            df = conv_back(f"res.{i}", df)
    conv_back("stem", df)

    return OrderedDict((k, grads[k]) for k in params.arrays().keys())


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"RRDN"
FORMAT_VERSION = 1
_ARCH_TAGS = {"v1": 1, "v2": 2}


def serialize_checkpoint(params: NetworkParams, config: NetworkConfig) -> bytes:
    arrays = params.arrays()
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, _ARCH_TAGS[config.arch], len(arrays))]
    for key, arr in arrays.items():
        name = key.encode("utf-8")
        extents = arr.shape + (1,) * (4 - arr.ndim)
        parts.append(struct.pack("<I", len(name)) + name + struct.pack("<4I", *extents))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: NetworkParams, config: NetworkConfig, path) -> None:
    atomic_write_bytes(path, serialize_checkpoint(params, config))


def _infer_config(arch: str, arrays) -> NetworkConfig:
    try:
        stem = arrays["stem.weight"]
    except KeyError:
        raise CheckpointError("checkpoint has no stem entry") from None
    names = {k.rsplit(".", 1)[0] for k in arrays}
    if arch == "v2":
        res = {n.split(".")[1] for n in names if n.startswith("res.")}
        rec = {n.split(".")[1] for n in names if n.startswith("rec.")}
        mods = {n.split(".")[2] for n in names if n.startswith("res.1.")}
        ups = [n for n in names if n.startswith("up.")]
        return NetworkConfig(
            arch="v2", channels=stem.shape[0], restoration_layers=len(res),
            reconstruction_layers=len(rec), modules_per_layer=len(mods),
            stem_kernel=stem.shape[2], skip_connections=len(ups) > 1 or len(res) == 1,
        )
    res = [n for n in names if n.startswith("res.")]
    rec = [n for n in names if n.startswith("rec.")]
    return NetworkConfig(
        arch="v1", channels=stem.shape[0], restoration_layers=len(res) + 1,
        reconstruction_layers=len(rec) + 2, stem_kernel=stem.shape[2],
    )


def deserialize_checkpoint(data: bytes, config: Optional[NetworkConfig] = None):
    if len(data) < 20:
        raise ChecksumError("checkpoint too short to hold a header and checksum")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch (corrupt or truncated file)")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    version, tag, count = struct.unpack_from("<III", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    archs = {v: k for k, v in _ARCH_TAGS.items()}
    if tag not in archs:
        raise CheckpointError(f"unknown architecture tag {tag}")
    arch = archs[tag]
    pos = 16
    arrays = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            extents = struct.unpack_from("<4I", body, pos)
            pos += 16
            n = int(np.prod(extents))
            raw = body[pos:pos + 4 * n]
            if len(raw) != 4 * n:
                raise CheckpointError(f"entry {name!r} runs past the end of the file")
            pos += 4 * n
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            arrays[name] = arr.reshape(extents[:1]) if name.endswith(".bias") else arr.reshape(extents)
    except struct.error as exc:
        raise CheckpointError(f"malformed entry table: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last entry")
    try:
        inferred = _infer_config(arch, arrays)
    except ConfigError as exc:
        raise CheckpointError(f"entry table does not describe a valid network: {exc}") from None
    if config is not None and config != inferred:
        raise CheckpointError(f"checkpoint holds {inferred}, expected {config}")
    params = NetworkParams.from_arrays(arrays)
    try:
        _check_params(params, inferred)
    except DimensionError as exc:
        raise CheckpointError(f"shape table inconsistent with config: {exc}") from None
    if list(params.arrays().keys()) != list(arrays.keys()):
        raise CheckpointError("unexpected or missing entries in checkpoint")
    return params, inferred


def load_checkpoint(path, config: Optional[NetworkConfig] = None):
    """Read a checkpoint; if ``config`` is given it must match the stored network."""
    with open(path, "rb") as fh:
        data = fh.read()
    return deserialize_checkpoint(data, config)
