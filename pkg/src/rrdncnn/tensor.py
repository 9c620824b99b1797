"""Dense NCHW tensor primitives with hand-written gradients.

Tensors are plain ``numpy`` arrays of rank 4 laid out as (batch, channel,
row, col).  Production code uses ``float32``; every primitive is
dtype-generic so the gradient checker can run the very same code in
``float64``.

Convolutions are lowered to a single GEMM over an im2col matrix whose
rows are ordered (in_channel, kernel_row, kernel_col), which fixes the
reduction order of every output element.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, GeometryError

Tensor4 = np.ndarray

DEFAULT_SLOPE = 0.01


def as_tensor4(x, dtype=None) -> Tensor4:
    """Validate ``x`` as a rank-4 array with all extents >= 1."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 4:
        raise DimensionError(f"expected a rank-4 NCHW array, got shape {x.shape}")
    if min(x.shape) < 1:
        raise DimensionError(f"all extents must be >= 1, got {x.shape}")
    return x


@dataclass
class ConvWeights:
    """Kernel of shape (out_ch, in_ch, kh, kw) plus optional per-output bias."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise DimensionError(f"kernel must be rank 4, got {self.weights.shape}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match out_ch {self.weights.shape[0]}"
            )

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1]

    @property
    def kh(self) -> int:
        return self.weights.shape[2]

    @property
    def kw(self) -> int:
        return self.weights.shape[3]

    @property
    def has_bias(self) -> bool:
        return self.bias is not None

    @property
    def size(self) -> int:
        return self.weights.size + (self.bias.size if self.bias is not None else 0)

    @classmethod
    def zeros(cls, out_ch, in_ch, kh, kw, has_bias=True, dtype=np.float32):
        b = np.zeros(out_ch, dtype=dtype) if has_bias else None
        return cls(np.zeros((out_ch, in_ch, kh, kw), dtype=dtype), b)

    def copy(self) -> "ConvWeights":
        return ConvWeights(self.weights.copy(), None if self.bias is None else self.bias.copy())

    def astype(self, dtype) -> "ConvWeights":
        b = None if self.bias is None else self.bias.astype(dtype)
        return ConvWeights(self.weights.astype(dtype), b)


@dataclass
class GradBundle:
    d_input: np.ndarray
    d_weights: np.ndarray
    d_bias: Optional[np.ndarray]


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    if stride < 1 or pad < 0:
        raise GeometryError(f"stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"extent {size} with k={k}, stride={stride}, pad={pad} gives a non-integral "
            f"or empty output"
        )
    return span // stride + 1


def deconv_output_size(size: int, k: int, stride: int, pad: int, out_pad: int) -> int:
    if stride < 1 or pad < 0 or out_pad < 0:
        raise GeometryError("stride must be >= 1, pad and out_pad >= 0")
    if out_pad >= stride:
        raise GeometryError(f"out_pad ({out_pad}) must be smaller than stride ({stride})")
    out = (size - 1) * stride - 2 * pad + k + out_pad
    if out < 1:
        raise GeometryError(f"transposed convolution output extent {out} is empty")
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, gh: int, gw: int) -> np.ndarray:
    """im2col: (C*kh*kw, N*gh*gw) matrix of kernel-sized windows of ``xp``."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, n, gh, gw),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, n * gh * gw)


def _scatter(cols, n, c, kh, kw, stride, gh, gw, hp, wp) -> np.ndarray:
    """col2im: accumulate window columns back onto an (N, C, hp, wp) grid."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    d = cols.reshape(c, kh, kw, n, gh, gw)
    rs = stride * (gh - 1) + 1
    cs = stride * (gw - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + rs:stride, j:j + cs:stride] += d[:, i, j].transpose(1, 0, 2, 3)
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _channels_first(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)."""
    n, c, h, w = x.shape
    return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)


def _batch_first(m: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(C, N*H*W) -> contiguous (N, C, H, W)."""
    return np.ascontiguousarray(m.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _check_conv_operands(x, w: ConvWeights):
    x = as_tensor4(x)
    if x.shape[1] != w.in_ch:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {w.in_ch}")
    return x


def conv2d(x: Tensor4, w: ConvWeights, stride: int = 1, pad: int = 0) -> Tensor4:
    """Zero-padded 2-D cross-correlation, output (N, out_ch, Ho, Wo)."""
    x = _check_conv_operands(x, w)
    n, _, h, wd = x.shape
    ho = conv_output_size(h, w.kh, stride, pad)
    wo = conv_output_size(wd, w.kw, stride, pad)
    cols = _windows(_pad(x, pad), w.kh, w.kw, stride, ho, wo)
    y = w.weights.reshape(w.out_ch, -1) @ cols
    y = _batch_first(y, n, ho, wo)
    if w.bias is not None:
        y += w.bias[None, :, None, None]
    return y


def conv2d_backward(x: Tensor4, w: ConvWeights, stride: int, pad: int,
                    d_output: Tensor4) -> GradBundle:
    """Gradients of ``sum(d_output * conv2d(x, w))`` w.r.t. input, kernel and bias."""
    x = _check_conv_operands(x, w)
    n, c, h, wd = x.shape
    ho = conv_output_size(h, w.kh, stride, pad)
    wo = conv_output_size(wd, w.kw, stride, pad)
    if d_output.shape != (n, w.out_ch, ho, wo):
        raise DimensionError(
            f"d_output shape {d_output.shape} != forward output {(n, w.out_ch, ho, wo)}"
        )
    cols = _windows(_pad(x, pad), w.kh, w.kw, stride, ho, wo)
    dy = _channels_first(d_output)
    d_w = (dy @ cols.T).reshape(w.weights.shape)
    d_cols = w.weights.reshape(w.out_ch, -1).T @ dy
    dxp = _scatter(d_cols, n, c, w.kh, w.kw, stride, ho, wo, h + 2 * pad, wd + 2 * pad)
    d_x = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    d_b = d_output.sum(axis=(0, 2, 3)) if w.has_bias else None
    return GradBundle(np.ascontiguousarray(d_x), d_w, d_b)


def deconv2d(x: Tensor4, w: ConvWeights, stride: int = 2, pad: int = 1,
             out_pad: int = 1) -> Tensor4:
    """Transposed convolution; ``w`` is (out_ch, in_ch, kh, kw) like a forward kernel.

    ``deconv2d(x, w)`` is the adjoint of ``conv2d(., transpose_kernel(w))``
    with the same stride and padding.
    """
    x = _check_conv_operands(x, w)
    n, c, h, wd = x.shape
    ho = deconv_output_size(h, w.kh, stride, pad, out_pad)
    wo = deconv_output_size(wd, w.kw, stride, pad, out_pad)
    w2 = w.weights.transpose(0, 2, 3, 1).reshape(-1, c)
    cols = w2 @ _channels_first(x)
    yp = _scatter(cols, n, w.out_ch, w.kh, w.kw, stride, h, wd, ho + 2 * pad, wo + 2 * pad)
    y = np.ascontiguousarray(yp[:, :, pad:pad + ho, pad:pad + wo])
    if w.bias is not None:
        y += w.bias[None, :, None, None]
    return y


def deconv2d_backward(x: Tensor4, w: ConvWeights, stride: int, pad: int, out_pad: int,
                      d_output: Tensor4) -> GradBundle:
    x = _check_conv_operands(x, w)
    n, c, h, wd = x.shape
    ho = deconv_output_size(h, w.kh, stride, pad, out_pad)
    wo = deconv_output_size(wd, w.kw, stride, pad, out_pad)
    if d_output.shape != (n, w.out_ch, ho, wo):
        raise DimensionError(
            f"d_output shape {d_output.shape} != forward output {(n, w.out_ch, ho, wo)}"
        )
    cols = _windows(_pad(d_output, pad), w.kh, w.kw, stride, h, wd)
    w2 = w.weights.transpose(0, 2, 3, 1).reshape(-1, c)
    d_x = _batch_first(w2.T @ cols, n, h, wd)
    d_w2 = cols @ _channels_first(x).T
    d_w = np.ascontiguousarray(
        d_w2.reshape(w.out_ch, w.kh, w.kw, c).transpose(0, 3, 1, 2))
    d_b = d_output.sum(axis=(0, 2, 3)) if w.has_bias else None
    return GradBundle(d_x, d_w, d_b)


def transpose_kernel(w: ConvWeights) -> ConvWeights:
    """Swap in/out channels; the adjoint partner of a (de)convolution kernel."""
    return ConvWeights(np.ascontiguousarray(w.weights.transpose(1, 0, 2, 3)))


def leaky_relu(x: Tensor4, slope: float = DEFAULT_SLOPE) -> Tensor4:
    return np.where(x >= 0, x, x * slope)


def leaky_relu_backward(x: Tensor4, d_output: Tensor4, slope: float = DEFAULT_SLOPE) -> Tensor4:
    # factor 1 at x == 0
    return np.where(x >= 0, d_output, d_output * slope)


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.shape != b.shape:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def add_backward(d_output: Tensor4):
    return d_output, d_output


def mse(pred: Tensor4, target: Tensor4) -> float:
    if pred.shape != target.shape:
        raise DimensionError(f"mse operands differ: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    return float(np.mean(diff * diff))


def mse_backward(pred: Tensor4, target: Tensor4, d_output: float = 1.0) -> Tensor4:
    if pred.shape != target.shape:
        raise DimensionError(f"mse operands differ: {pred.shape} vs {target.shape}")
    scale = 2.0 * d_output / pred.size
    return ((pred - target) * scale).astype(pred.dtype, copy=False)


# --------------------------------------------------------------------------
# finite-difference oracle

FD_STEP = 1e-3


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _numeric_grad(fn: Callable[[], np.ndarray], operand: np.ndarray,
                  d_out: np.ndarray, step: float) -> np.ndarray:
    """Central differences of ``sum(d_out * fn())`` w.r.t. each element of ``operand``.

    Output differences are formed before the reduction so the subtraction
    does not cancel against the full sum.
    """
    grad = np.zeros_like(operand)
    flat = operand.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = fn()
        flat[i] = old - step
        lo = fn()
        flat[i] = old
        grad.flat[i] = np.sum(d_out * (hi - lo)) / (2 * step)
    return grad


def finite_diff_check(op_id: str, operand_shapes, seed: int = 0, *, stride=None,
                      pad=None, out_pad: int = 1, slope: float = DEFAULT_SLOPE,
                      step: float = FD_STEP) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``operand_shapes`` is (input_shape, kernel_shape) for ``conv2d`` and
    ``deconv2d`` and a single shape (or a 1-tuple of it) for ``leaky_relu``,
    ``add`` and ``mse``.  All arithmetic runs in float64.  For
    ``leaky_relu`` inputs are drawn with magnitude >= 0.05 to stay clear
    of the kink.
    """
    rng = np.random.default_rng(seed)
    shapes = operand_shapes
    if isinstance(shapes[0], int):
        shapes = (tuple(shapes),)
    total = sum(int(np.prod(s)) for s in shapes)
    if total > 4096:
        raise ValueError(f"operands too large for a finite-difference check ({total} > 4096)")

    def normal(shape):
        return rng.standard_normal(shape)

    errs = []
    if op_id in ("conv2d", "deconv2d"):
        if len(shapes) != 2:
            raise ValueError(f"{op_id} needs (input_shape, kernel_shape)")
        x = normal(shapes[0])
        w = ConvWeights(normal(shapes[1]), normal(shapes[1][0]))
        if op_id == "conv2d":
            s = 1 if stride is None else stride
            p = 1 if pad is None else pad

            def fwd():
                return conv2d(x, w, s, p)

            d_out = normal(fwd().shape)
            g = conv2d_backward(x, w, s, p, d_out)
        else:
            s = 2 if stride is None else stride
            p = 1 if pad is None else pad

            def fwd():
                return deconv2d(x, w, s, p, out_pad)

            d_out = normal(fwd().shape)
            g = deconv2d_backward(x, w, s, p, out_pad, d_out)
        for operand, analytic in ((x, g.d_input), (w.weights, g.d_weights), (w.bias, g.d_bias)):
            errs.append(_relative_error(analytic, _numeric_grad(fwd, operand, d_out, step)))
    elif op_id == "leaky_relu":
        x = rng.uniform(0.05, 1.0, shapes[0]) * rng.choice([-1.0, 1.0], shapes[0])
        d_out = normal(shapes[0])
        analytic = leaky_relu_backward(x, d_out, slope)
        errs.append(_relative_error(
            analytic, _numeric_grad(lambda: leaky_relu(x, slope), x, d_out, step)))
    elif op_id == "add":
        a, b = normal(shapes[0]), normal(shapes[-1])
        d_out = normal(a.shape)
        da, db = add_backward(d_out)
        errs.append(_relative_error(da, _numeric_grad(lambda: add(a, b), a, d_out, step)))
        errs.append(_relative_error(db, _numeric_grad(lambda: add(a, b), b, d_out, step)))
    elif op_id == "mse":
        pred, target = normal(shapes[0]), normal(shapes[-1])
        d_out = np.asarray(rng.standard_normal())
        for operand, analytic in (
            (pred, mse_backward(pred, target, float(d_out))),
            (target, -mse_backward(pred, target, float(d_out))),
        ):
            errs.append(_relative_error(
                analytic, _numeric_grad(lambda: np.asarray(mse(pred, target)), operand, d_out, step)))
    else:
        raise ValueError(f"unknown op_id {op_id!r}")
    return max(errs)
