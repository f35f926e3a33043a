"""Forward and backward numeric kernels for volumetric networks.

All kernels operate on single samples in channels-first layout: a volume is
a float64 array of shape (C, D, H, W).  Every forward kernel returns the
output together with whatever the matching backward kernel needs (the
"cache"); backward kernels return exact analytic gradients.  Computation is
64-bit throughout; 32-bit is a storage format only (see voxcnn.volumes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ValidationError

Triple = tuple[int, int, int]

AXIS_NAMES = ("depth", "height", "width")


def _as_triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValidationError(f"expected 3 extents, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3D convolution: channel counts, kernel, stride, padding."""

    in_channels: int
    out_channels: int
    kernel: Triple
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _as_triple(self.kernel))
        object.__setattr__(self, "stride", _as_triple(self.stride))
        object.__setattr__(self, "padding", _as_triple(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValidationError("kernel and stride extents must be positive")
        if min(self.padding) < 0:
            raise ValidationError("padding must be non-negative")

    def out_spatial(self, spatial: Triple) -> Triple:
        return out_extents(spatial, self.kernel, self.stride, self.padding)


@dataclass(frozen=True)
class PoolSpec:
    """Geometry of a 3D max-pooling window."""

    kernel: Triple
    stride: Triple
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _as_triple(self.kernel))
        object.__setattr__(self, "stride", _as_triple(self.stride))
        object.__setattr__(self, "padding", _as_triple(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValidationError("kernel and stride extents must be positive")
        if min(self.padding) < 0:
            raise ValidationError("padding must be non-negative")
        for p, k in zip(self.padding, self.kernel):
            if p >= k:
                # a window could then fall entirely inside the padding
                raise ValidationError(
                    f"pool padding {p} must be smaller than kernel extent {k}"
                )

    def out_spatial(self, spatial: Triple) -> Triple:
        return out_extents(spatial, self.kernel, self.stride, self.padding)


@dataclass(frozen=True)
class OpCount:
    """Multiplication/addition tally for one convolution layer."""

    multiplications: int
    additions: int
    mode: str


def out_extents(spatial, kernel, stride, padding, *, what: str = "layer") -> Triple:
    """floor((in + 2p - k)/s) + 1 per axis; rejects collapse below 1."""
    out = []
    for axis, (n, k, s, p) in enumerate(zip(spatial, kernel, stride, padding)):
        if n < 1:
            raise ValidationError(f"{what}: input {AXIS_NAMES[axis]} extent {n} < 1")
        e = (n + 2 * p - k) // s + 1
        if e < 1:
            raise ValidationError(
                f"{what}: output {AXIS_NAMES[axis]} extent would be {e} "
                f"(input {n}, kernel {k}, stride {s}, padding {p})"
            )
        out.append(e)
    return tuple(out)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{what} contains non-finite values")


def _check_volume(x: np.ndarray, what: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValidationError(f"{what} must be 4-d (C, D, H, W), got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------


def conv3d(x, weights, bias, spec: ConvSpec):
    """3D cross-correlation with symmetric zero padding.

    x: (C_in, D, H, W); weights: (C_out, C_in, kd, kh, kw); bias: (C_out,).
    Returns (output, cache) with output (C_out, D', H', W').
    """
    x = _check_volume(x)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    expected_w = (spec.out_channels, spec.in_channels) + spec.kernel
    if x.shape[0] != spec.in_channels:
        raise ValidationError(
            f"conv3d: input has {x.shape[0]} channels, spec expects {spec.in_channels}"
        )
    if weights.shape != expected_w:
        raise ValidationError(
            f"conv3d: weights shape {weights.shape} != expected {expected_w}"
        )
    if bias.shape != (spec.out_channels,):
        raise ValidationError(
            f"conv3d: bias shape {bias.shape} != ({spec.out_channels},)"
        )
    _require_finite(x, "conv3d input")
    _require_finite(weights, "conv3d weights")
    _require_finite(bias, "conv3d bias")

    out_sp = spec.out_spatial(x.shape[1:])
    pd, ph, pw = spec.padding
    sd, sh, sw = spec.stride
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, spec.kernel, axis=(1, 2, 3))[:, ::sd, ::sh, ::sw]
    out = np.tensordot(weights, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    out += bias[:, None, None, None]
    cache = (xp, x.shape, weights, spec, out_sp)
    return out, cache


def conv3d_backward(cache, grad_out):
    """Gradients of conv3d: returns (grad_input, grad_weights, grad_bias)."""
    xp, x_shape, weights, spec, out_sp = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    expected = (spec.out_channels,) + out_sp
    if grad_out.shape != expected:
        raise ValidationError(
            f"conv3d backward: upstream shape {grad_out.shape} != {expected}"
        )
    sd, sh, sw = spec.stride
    pd, ph, pw = spec.padding
    od, oh, ow = out_sp

    grad_bias = grad_out.sum(axis=(1, 2, 3))

    win = sliding_window_view(xp, spec.kernel, axis=(1, 2, 3))[:, ::sd, ::sh, ::sw]
    grad_weights = np.tensordot(grad_out, win, axes=([1, 2, 3], [1, 2, 3]))

    # scatter-add per kernel offset: windows overlap when stride < kernel
    t = np.tensordot(weights, grad_out, axes=([0], [0]))
    grad_xp = np.zeros_like(xp)
    for i in range(spec.kernel[0]):
        for j in range(spec.kernel[1]):
            for k in range(spec.kernel[2]):
                grad_xp[
                    :,
                    i : i + sd * (od - 1) + 1 : sd,
                    j : j + sh * (oh - 1) + 1 : sh,
                    k : k + sw * (ow - 1) + 1 : sw,
                ] += t[:, i, j, k]
    _, d, h, w = x_shape
    grad_x = grad_xp[:, pd : pd + d, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(grad_x), grad_weights, grad_bias


# ---------------------------------------------------------------------------
# maxpool3d
# ---------------------------------------------------------------------------


def maxpool3d(x, spec: PoolSpec):
    """Max pooling over 3D windows.

    Returns (output, argmax, cache); argmax holds, per output element, the
    flat index into the *unpadded* input of the chosen element (first
    occurrence in row-major window order wins ties).  Padded positions never
    participate in the max.
    """
    x = _check_volume(x)
    _require_finite(x, "maxpool3d input")
    c, d, h, w = x.shape
    out_sp = out_extents(x.shape[1:], spec.kernel, spec.stride, spec.padding,
                         what="maxpool3d")
    kd, kh, kw = spec.kernel
    sd, sh, sw = spec.stride
    pd, ph, pw = spec.padding
    if d + 2 * pd < kd or h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValidationError("maxpool3d: window larger than padded input")

    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, spec.kernel, axis=(1, 2, 3))[:, ::sd, ::sh, ::sw]
    flat_win = win.reshape(win.shape[:4] + (kd * kh * kw,))
    local = flat_win.argmax(axis=-1)
    out = np.take_along_axis(flat_win, local[..., None], axis=-1)[..., 0]

    li, lj, lk = np.unravel_index(local, (kd, kh, kw))
    od, oh, ow = out_sp
    zi = np.arange(od)[None, :, None, None] * sd - pd + li
    yi = np.arange(oh)[None, None, :, None] * sh - ph + lj
    xi = np.arange(ow)[None, None, None, :] * sw - pw + lk
    ci = np.arange(c)[:, None, None, None]
    argmax = ((ci * d + zi) * h + yi) * w + xi
    cache = (x.shape, argmax)
    return np.ascontiguousarray(out), argmax, cache


def maxpool3d_backward(cache, grad_out):
    """Routes each upstream gradient to its argmax position; zeros elsewhere."""
    x_shape, argmax = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != argmax.shape:
        raise ValidationError(
            f"maxpool3d backward: upstream shape {grad_out.shape} != {argmax.shape}"
        )
    grad_x = np.zeros(int(np.prod(x_shape)))
    np.add.at(grad_x, argmax.ravel(), grad_out.ravel())
    return grad_x.reshape(x_shape)


# ---------------------------------------------------------------------------
# relu / dense / dropout / concat
# ---------------------------------------------------------------------------


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0)
    return out, (x > 0.0)


def relu_backward(cache, grad_out):
    return np.asarray(grad_out, dtype=np.float64) * cache


def dense(x, weights, bias):
    """Affine map: out = W @ x + b with W of shape (m, n) and x of shape (n,)."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"dense: input must be 1-d, got shape {x.shape}")
    if weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ValidationError(
            f"dense: weights shape {weights.shape} incompatible with input {x.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise ValidationError(
            f"dense: bias shape {bias.shape} != ({weights.shape[0]},)"
        )
    out = weights @ x + bias
    return out, (x, weights)


def dense_backward(cache, grad_out):
    x, weights = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (weights.shape[0],):
        raise ValidationError(
            f"dense backward: upstream shape {grad_out.shape} != ({weights.shape[0]},)"
        )
    grad_x = weights.T @ grad_out
    grad_w = np.outer(grad_out, x)
    return grad_x, grad_w, grad_out.copy()


def dropout(x, rate: float, mode: str, rng=None):
    """Inverted dropout: zero with probability `rate`, scale survivors.

    Eval mode is a pure identity.  Returns (output, mask); the mask already
    includes the 1/(1-rate) survivor scaling so backward is a plain product.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValidationError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        mask = np.ones_like(x)
        return x.copy(), mask
    gen = np.random.default_rng(rng)
    keep = gen.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, grad_out):
    return np.asarray(grad_out, dtype=np.float64) * mask


def concat_channels(inputs):
    """Channel-axis concatenation of volumes with equal spatial extents."""
    vols = [_check_volume(v, f"concat input {i}") for i, v in enumerate(inputs)]
    if not vols:
        raise ValidationError("concat_channels: need at least one input")
    spatial = vols[0].shape[1:]
    for i, v in enumerate(vols[1:], start=1):
        if v.shape[1:] != spatial:
            raise ValidationError(
                f"concat_channels: input {i} spatial extents {v.shape[1:]} "
                f"!= {spatial}"
            )
    widths = tuple(v.shape[0] for v in vols)
    return np.concatenate(vols, axis=0), widths


def concat_channels_backward(widths, grad_out):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape[0] != sum(widths):
        raise ValidationError(
            f"concat backward: upstream has {grad_out.shape[0]} channels, "
            f"expected {sum(widths)}"
        )
    splits = np.cumsum(widths)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=0)]


# ---------------------------------------------------------------------------
# softmax + cross-entropy
# ---------------------------------------------------------------------------


def softmax_xent(logits, true_class: int | None = None):
    """Stabilised softmax with optional cross-entropy loss and logit gradient.

    Returns (probs, loss, grad_logits); loss and grad_logits are None when no
    true class is given.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValidationError(f"softmax: logits must be 1-d, got {logits.shape}")
    _require_finite(logits, "softmax logits")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    probs = exp / total
    if true_class is None:
        return probs, None, None
    if not 0 <= true_class < logits.size:
        raise ValidationError(
            f"softmax: class {true_class} out of range for {logits.size} logits"
        )
    loss = math.log(total) - shifted[true_class]
    grad = probs.copy()
    grad[true_class] -= 1.0
    return probs, loss, grad


# ---------------------------------------------------------------------------
# operation counting
# ---------------------------------------------------------------------------


def op_count(spec: ConvSpec, input_spatial, mode: str = "paper-convention") -> OpCount:
    """Multiplication/addition tally for one conv3d layer.

    "paper-convention" counts one addition per output voxel (it ignores
    accumulation adds), scaling multiplications by in*out channels and
    additions by out channels.  "standard" counts the full accumulation
    chain plus the bias add.
    """
    if mode not in ("paper-convention", "standard"):
        raise ValidationError(f"op_count: unknown mode {mode!r}")
    out_sp = spec.out_spatial(_as_triple(input_spatial))
    out_vox = int(np.prod(out_sp))
    kvol = int(np.prod(spec.kernel))
    mults = out_vox * kvol * spec.in_channels * spec.out_channels
    if mode == "paper-convention":
        adds = out_vox * spec.out_channels
    else:
        adds = spec.out_channels * (out_vox * (spec.in_channels * kvol - 1) + out_vox)
    return OpCount(multiplications=mults, additions=adds, mode=mode)
