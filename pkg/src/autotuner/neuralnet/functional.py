"""Differentiable layers used by the CGRU: conv2d, GRU, linear, MSE."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _result, as_tensor, matmul, relu, sigmoid, square, stack, tanh, tsum

__all__ = ["conv2d", "conv_output_shape", "gru_cell", "gru_sequence", "linear", "mse_loss", "relu"]


class ShapeError(ValueError):
    pass


def conv_output_shape(h, w, kernel, stride, padding):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _im2col(xp: np.ndarray, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    """(C*kh*kw, N*Ho*Wo) patch matrix of an already padded N×C×H×W input."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    # win axes: N, C, Ho, Wo, kh, kw; kernel-major rows keep the copy cache friendly
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def conv2d(x, weight, bias, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is N×C×H×W (a 3-D C×H×W input is treated as a batch of one and
    returned without the batch axis).  ``weight`` is O×C×kh×kw and ``bias``
    has O entries.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = xd.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"input has {c} channels but weight expects {cw}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} filters")
    sh, sw = stride
    ph, pw = padding
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    ho, wo = conv_output_shape(h, w, (kh, kw), stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols + bias.data[:, None]).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        if weight.requires_grad:
            weight._accumulate((gmat @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[:, i, j]
            dx = dxp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3)
            x._accumulate(dx[0] if squeeze else dx)

    return _result(out, (x, weight, bias), "conv2d", backward)


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (..., in) flattened to 2-D."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim == 1:
        x2 = x.reshape(1, x.shape[0])
        return linear(x2, weight, bias).reshape(weight.shape[0])
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    return matmul(x, weight.transpose()) + bias


def gru_cell(x, h, w_x, w_h, b) -> Tensor:
    """One GRU step for a batch.

    ``w_x`` stacks the input weights of the reset, update and candidate
    gates (3H×D), ``w_h`` the recurrent weights (3H×H) and ``b`` the biases.
    The reset gate multiplies the state before the candidate's recurrent
    product: ``n = tanh(W_n x + U_n (r * h) + b_n)``.
    """
    hsz = h.shape[-1]
    gx = matmul(x, w_x.transpose()) + b
    return _gru_update(gx, h, w_h, hsz)


def _gru_update(gx, h, w_h, hsz) -> Tensor:
    u_rz = w_h[: 2 * hsz]
    u_n = w_h[2 * hsz:]
    gh = matmul(h, u_rz.transpose())
    r = sigmoid(gx[:, :hsz] + gh[:, :hsz])
    z = sigmoid(gx[:, hsz:2 * hsz] + gh[:, hsz:])
    n = tanh(gx[:, 2 * hsz:] + matmul(r * h, u_n.transpose()))
    return (1.0 - z) * n + z * h


def gru_sequence(inputs, h0, w_x, w_h, b):
    """Run a single-layer GRU over ``inputs`` (N×T×D) from state ``h0`` (N×H).

    Returns ``(outputs, h_T)`` with outputs N×T×H.  Gradients flow through
    every step.
    """
    inputs, h0 = as_tensor(inputs), as_tensor(h0)
    w_x, w_h, b = as_tensor(w_x), as_tensor(w_h), as_tensor(b)
    if inputs.ndim != 3:
        raise ShapeError(f"gru_sequence expects N×T×D input, got {inputs.shape}")
    n, t_len, d = inputs.shape
    hsz = h0.shape[-1]
    if w_x.shape != (3 * hsz, d) or w_h.shape != (3 * hsz, hsz) or b.shape != (3 * hsz,):
        raise ShapeError("GRU parameter shapes do not match input/hidden sizes")
    if t_len < 1:
        raise ShapeError("GRU needs at least one step")
    # input projections for all steps at once
    gx_all = (matmul(inputs.reshape(n * t_len, d), w_x.transpose()) + b).reshape(n, t_len, 3 * hsz)
    h = h0
    outs = []
    for t in range(t_len):
        h = _gru_update(gx_all[:, t, :], h, w_h, hsz)
        outs.append(h)
    return stack(outs, axis=1), h


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.data.size == 0:
        raise ShapeError("empty prediction")
    return tsum(square(pred - target)) * (1.0 / pred.data.size)
