"""Dense layer kernels with hand-written backward passes.

Tensors are plain float64 numpy arrays. Every forward function accepts an
optional leading batch axis; backward functions sum parameter gradients
over that axis.

Convolutions are 3x3, stride 1, zero "same" padding. The public
``conv2d_*`` functions use channel-first layout (C, H, W) / (B, C, H, W).
The network works channel-last internally (``conv3x3_nhwc_*``) so that the
matrix products need no transposes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

DTYPE = np.float64


@dataclass(frozen=True)
class LayerGrad:
    d_input: np.ndarray
    d_params: tuple = ()


def _check(cond, msg):
    if not cond:
        raise DimensionError(msg)


# -- fully connected ---------------------------------------------------------

def fc_forward(x, weight, bias):
    x = np.asarray(x, dtype=DTYPE)
    _check(weight.ndim == 2, f"fc weight must be 2-D, got shape {weight.shape}")
    _check(bias.shape == (weight.shape[0],),
           f"fc bias shape {bias.shape} does not match weight rows {weight.shape[0]}")
    _check(x.shape[-1] == weight.shape[1],
           f"fc input length {x.shape[-1]} != weight columns {weight.shape[1]}")
    return x @ weight.T + bias


def fc_backward(x, weight, upstream):
    x = np.asarray(x, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    _check(upstream.shape == x.shape[:-1] + (weight.shape[0],),
           f"fc upstream shape {upstream.shape} != output shape "
           f"{x.shape[:-1] + (weight.shape[0],)}")
    x2 = x.reshape(-1, x.shape[-1])
    g2 = upstream.reshape(-1, weight.shape[0])
    d_weight = g2.T @ x2
    d_bias = g2.sum(axis=0)
    return LayerGrad(upstream @ weight, (d_weight, d_bias))


# -- relu --------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_backward(x, upstream):
    x = np.asarray(x, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    _check(upstream.shape == x.shape,
           f"relu upstream shape {upstream.shape} != input shape {x.shape}")
    return LayerGrad(np.where(x > 0, upstream, 0.0))


# -- 3x3 same convolution, channel-last core --------------------------------

def kernel_matrix(kernels):
    """(C_out, C_in, 3, 3) -> (9*C_in, C_out), rows ordered (ki, kj, c)."""
    c_out, c_in = kernels.shape[:2]
    return kernels.transpose(2, 3, 1, 0).reshape(9 * c_in, c_out)


def _kernel_from_matrix(kmat, c_out, c_in):
    return kmat.reshape(3, 3, c_in, c_out).transpose(3, 2, 0, 1)


def im2col_nhwc(x):
    """(B, H, W, C) -> (B, H, W, 9*C) patches of a zero-padded input."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=DTYPE)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 9 * c), dtype=DTYPE)
    for ki in range(3):
        for kj in range(3):
            s = (ki * 3 + kj) * c
            cols[..., s:s + c] = xp[:, ki:ki + h, kj:kj + w, :]
    return cols


def col2im_nhwc(dcols, c):
    b, h, w, _ = dcols.shape
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=DTYPE)
    for ki in range(3):
        for kj in range(3):
            s = (ki * 3 + kj) * c
            dxp[:, ki:ki + h, kj:kj + w, :] += dcols[..., s:s + c]
    return dxp[:, 1:-1, 1:-1, :]


def _pad_nhwc(x):
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=DTYPE)
    xp[:, 1:-1, 1:-1, :] = x
    return xp


def _shift_matrix(kernels):
    """(C_out, C_in, 3, 3) -> (C_in, 9*C_out), columns ordered (ki, kj, o)."""
    c_out, c_in = kernels.shape[:2]
    return kernels.transpose(1, 2, 3, 0).reshape(c_in, 9 * c_out)


def conv3x3_nhwc_forward(x, kernels, bias):
    """Returns (output, cache) for :func:`conv3x3_nhwc_backward`.

    Narrow inputs use im2col. Wide inputs (C_in >= C_out) multiply the padded
    input by all nine kernel taps at once and sum the shifted products, which
    moves far less memory than materialising the patch matrix.
    """
    c_out, c_in = kernels.shape[:2]
    if c_in < c_out:
        cols = im2col_nhwc(x)
        return cols @ kernel_matrix(kernels) + bias, ("cols", cols)
    b, h, w, _ = x.shape
    xp = _pad_nhwc(x)
    taps = (xp.reshape(-1, c_in) @ _shift_matrix(kernels)).reshape(b, h + 2, w + 2, 9, c_out)
    out = np.empty((b, h, w, c_out), dtype=DTYPE)
    out[...] = bias
    for ki in range(3):
        for kj in range(3):
            out += taps[:, ki:ki + h, kj:kj + w, ki * 3 + kj, :]
    return out, ("pad", xp)


def conv3x3_nhwc_backward(cache, kernels, upstream, need_input=True):
    kind, saved = cache
    c_out, c_in = kernels.shape[:2]
    g2 = upstream.reshape(-1, c_out)
    d_bias = g2.sum(axis=0)
    if kind == "cols":
        d_kmat = saved.reshape(-1, 9 * c_in).T @ g2
        d_kernels = _kernel_from_matrix(d_kmat, c_out, c_in)
        d_input = None
        if need_input:
            d_input = col2im_nhwc(upstream @ kernel_matrix(kernels).T, c_in)
        return LayerGrad(d_input, (d_kernels, d_bias))
    b, hp, wp, _ = saved.shape
    h, w = hp - 2, wp - 2
    # Upstream gradient placed at each of the nine tap offsets on the padded grid.
    placed = np.zeros((b, hp, wp, 9, c_out), dtype=DTYPE)
    for ki in range(3):
        for kj in range(3):
            placed[:, ki:ki + h, kj:kj + w, ki * 3 + kj, :] = upstream
    placed = placed.reshape(-1, 9 * c_out)
    d_shift = saved.reshape(-1, c_in).T @ placed
    d_kernels = d_shift.reshape(c_in, 3, 3, c_out).transpose(3, 0, 1, 2)
    d_input = None
    if need_input:
        d_input = (placed @ _shift_matrix(kernels).T).reshape(b, hp, wp, c_in)[:, 1:-1, 1:-1, :]
    return LayerGrad(d_input, (d_kernels, d_bias))


# -- public channel-first convolution ----------------------------------------

def _conv_args(x, kernels, bias):
    x = np.asarray(x, dtype=DTYPE)
    _check(kernels.ndim == 4 and kernels.shape[2:] == (3, 3),
           f"kernels must be (C_out, C_in, 3, 3), got {kernels.shape}")
    _check(bias.shape == (kernels.shape[0],),
           f"bias shape {bias.shape} != ({kernels.shape[0]},)")
    _check(x.ndim in (3, 4), f"conv input must be (C,H,W) or (B,C,H,W), got {x.shape}")
    single = x.ndim == 3
    xb = x[None] if single else x
    _check(xb.shape[1] == kernels.shape[1],
           f"input has {xb.shape[1]} channels, kernels expect {kernels.shape[1]}")
    return xb, single


def conv2d_forward(x, kernels, bias):
    xb, single = _conv_args(x, kernels, bias)
    out, _ = conv3x3_nhwc_forward(xb.transpose(0, 2, 3, 1), kernels, bias)
    out = out.transpose(0, 3, 1, 2)
    return out[0] if single else out


def conv2d_backward(x, kernels, upstream):
    xb, single = _conv_args(x, kernels, np.zeros(kernels.shape[0]))
    g = np.asarray(upstream, dtype=DTYPE)
    g = g[None] if single else g
    expected = (xb.shape[0], kernels.shape[0]) + xb.shape[2:]
    _check(g.shape == expected, f"conv upstream shape {g.shape} != output shape {expected}")
    _, cache = conv3x3_nhwc_forward(xb.transpose(0, 2, 3, 1), kernels, np.zeros(kernels.shape[0]))
    lg = conv3x3_nhwc_backward(cache, kernels, g.transpose(0, 2, 3, 1))
    d_input = lg.d_input.transpose(0, 3, 1, 2)
    return LayerGrad(d_input[0] if single else d_input, lg.d_params)
