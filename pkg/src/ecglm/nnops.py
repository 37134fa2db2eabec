"""Neural-network operations on top of the autodiff core.

Convolutions accept ``(C, T)`` or ``(B, C, T)`` inputs; the grouped variants
add a lead axis, ``(B, G, C, T)``, so twelve independent per-lead encoders
run as a single batched matmul per kernel tap instead of twelve Python-level
forward passes. Normalization layers carry hand-derived backward formulas;
everything here is exercised by finite-difference checks in the test suite.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, constant, stop_gradient


class InvalidInputError(ValueError):
    """Raised when an operation's preconditions are violated."""


# ---- activations ----------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        if x.requires_grad:
            x._accumulate(g * out_data * (1.0 - out_data))

    return Tensor(out_data, _parents=(x,), _vjp=vjp)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.data > 0.0, 1.0, slope)
    out_data = x.data * scale

    def vjp(g):
        if x.requires_grad:
            x._accumulate(g * scale)

    return Tensor(out_data, _parents=(x,), _vjp=vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences apply)."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            x._accumulate(g * dx)

    return Tensor(out_data, _parents=(x,), _vjp=vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        if x.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            x._accumulate(out_data * (g - inner))

    return Tensor(out_data, _parents=(x,), _vjp=vjp)


# ---- linear maps -----------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    out = x @ weight.transpose()
    if bias is not None:
        out = out + bias
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InvalidInputError(
            f"token id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}"
        )
    out_data = table.data[ids]

    def vjp(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full)

    return Tensor(out_data, _parents=(table,), _vjp=vjp)


def softmax_cross_entropy(logits: Tensor, target_ids: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``target_ids`` under row softmaxes."""
    targets = np.asarray(target_ids, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise InvalidInputError("logits must be (n, V) with one target per row")
    if targets.size == 0:
        raise InvalidInputError("empty target list")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise InvalidInputError("target id outside vocabulary")
    n = logits.shape[0]
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    log_probs = logits.data - m - np.log(z)
    nll = -log_probs[np.arange(n), targets].mean()

    def vjp(g):
        if logits.requires_grad:
            grad = e / z
            grad[np.arange(n), targets] -= 1.0
            logits._accumulate(grad * (float(g) / n))

    return Tensor(nll, _parents=(logits,), _vjp=vjp)


# ---- convolutions -----------------------------------------------------------


def _same_pad(kernel_size: int) -> int:
    if kernel_size % 2 == 0 and kernel_size != 1:
        raise InvalidInputError("'same' padding needs an odd kernel size")
    return (kernel_size - 1) // 2


def _resolve_pad(padding, kernel_size: int) -> int:
    if padding == "same":
        return _same_pad(kernel_size)
    return int(padding)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | str = 0) -> Tensor:
    """Cross-correlation along time. ``x``: (C, T) or (B, C, T); ``weight``:
    (C_out, C_in, K). Output time = floor((T + 2p - K) / stride) + 1."""
    squeeze = x.ndim == 2
    xb = x.reshape((1,) + x.shape) if squeeze else x
    out = _conv_nd(xb, weight, bias, stride, padding, grouped=False)
    return out[0] if squeeze else out


def grouped_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                   stride: int = 1, padding: int | str = 0) -> Tensor:
    """Independent per-group convolutions. ``x``: (B, G, C, T); ``weight``:
    (G, C_out, C_in, K); ``bias``: (G, C_out)."""
    return _conv_nd(x, weight, bias, stride, padding, grouped=True)


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Gather sliding windows: (..., C, T_padded) -> (..., C*K, T_out),
    row index = c * K + j. Contiguous output so the matmul hits BLAS."""
    if k == 1:
        xs = xp[..., ::stride] if stride != 1 else xp
        return np.ascontiguousarray(xs)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)
    if stride != 1:
        win = win[..., ::stride, :]
    moved = np.swapaxes(win, -1, -2)                  # (..., C, K, T_out)
    shape = moved.shape[:-3] + (moved.shape[-3] * k, moved.shape[-1])
    return np.ascontiguousarray(moved).reshape(shape)


def _col2im(cols: np.ndarray, t_padded: int, k: int, stride: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add windows back to (..., C, T_padded)."""
    lead = cols.shape[:-2]
    c = cols.shape[-2] // k
    t_out = cols.shape[-1]
    if k == 1 and stride == 1 and t_out == t_padded:
        return cols
    d = cols.reshape(lead + (c, k, t_out))
    out = np.zeros(lead + (c, t_padded), dtype=cols.dtype)
    if k == stride:
        # non-overlapping taps interleave exactly
        block = np.ascontiguousarray(np.swapaxes(d, -1, -2))   # (..., C, T_out, K)
        out[..., : t_out * k] = block.reshape(lead + (c, t_out * k))
        return out
    span = (t_out - 1) * stride + 1
    for j in range(k):
        out[..., j : j + span : stride] += d[..., j, :]
    return out


def _flatten_weight(w: np.ndarray) -> np.ndarray:
    """(..., O, C, K) -> (..., O, C*K)."""
    return np.ascontiguousarray(w).reshape(w.shape[:-2] + (w.shape[-2] * w.shape[-1],))


def _conv_nd(x: Tensor, weight: Tensor, bias, stride: int, padding, grouped: bool) -> Tensor:
    k = weight.shape[-1]
    c_in = weight.shape[-2]
    pad = _resolve_pad(padding, k)
    t_in = x.shape[-1]
    if x.shape[-2] != c_in:
        raise InvalidInputError(f"input channels {x.shape[-2]} != weight channels {c_in}")
    t_padded = t_in + 2 * pad
    if k > t_padded:
        raise InvalidInputError(f"kernel {k} larger than padded input {t_padded}")

    pad_spec = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x.data, pad_spec) if pad else x.data
    patches = _im2col(xp, k, stride)                  # (..., C*K, T_out)
    w2 = _flatten_weight(weight.data)                 # (..., O, C*K)
    out_data = np.matmul(w2, patches)
    if bias is not None:
        out_data += bias.data[..., :, None]

    def vjp(g):
        if x.requires_grad:
            cols = np.matmul(np.swapaxes(w2, -1, -2), g)
            gx = _col2im(cols, t_padded, k, stride)
            x._accumulate(gx[..., pad : pad + t_in] if pad else gx, own=not pad)
        if weight.requires_grad:
            prod = np.matmul(g, np.swapaxes(patches, -1, -2))   # (..., O, C*K)
            if prod.ndim > w2.ndim:
                prod = prod.sum(axis=tuple(range(prod.ndim - w2.ndim)))
            weight._accumulate(prod.reshape(weight.shape), own=True)
        if bias is not None and bias.requires_grad:
            if grouped:
                bias._accumulate(g.sum(axis=(0, g.ndim - 1)), own=True)
            else:
                bias._accumulate(g.sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,)),
                                 own=True)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor(out_data, _parents=parents, _vjp=vjp)


def conv1d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv1d`` with the same (stride, padding) configuration.
    ``x``: (C_in, T) or (B, C_in, T); ``weight``: (C_in, C_out, K).
    Output time = (T - 1) * stride + K - 2 * padding."""
    squeeze = x.ndim == 2
    xb = x.reshape((1,) + x.shape) if squeeze else x
    out = _conv_transpose_nd(xb, weight, bias, stride, padding, grouped=False)
    return out[0] if squeeze else out


def grouped_conv1d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                             stride: int = 1, padding: int = 0) -> Tensor:
    """Per-group transposed convolution. ``x``: (B, G, C_in, T); ``weight``:
    (G, C_in, C_out, K); ``bias``: (G, C_out)."""
    return _conv_transpose_nd(x, weight, bias, stride, padding, grouped=True)


def _conv_transpose_nd(x: Tensor, weight: Tensor, bias, stride: int, padding: int,
                       grouped: bool) -> Tensor:
    k = weight.shape[-1]
    c_in = weight.shape[-3]
    pad = int(padding)
    if x.shape[-2] != c_in:
        raise InvalidInputError(f"input channels {x.shape[-2]} != weight channels {c_in}")
    t_in = x.shape[-1]
    t_full = (t_in - 1) * stride + k
    t_out = t_full - 2 * pad
    if t_out < 1:
        raise InvalidInputError("padding removes the entire output")

    # (..., C_in, C_out, K) -> (..., C_in, C_out*K): column index = o * K + j
    w2 = _flatten_weight(weight.data)
    cols = np.matmul(np.swapaxes(w2, -1, -2), x.data)      # (..., C_out*K, T_in)
    full = _col2im(cols, t_full, k, stride)                # (..., C_out, T_full)
    out_data = full[..., pad : pad + t_out] if pad else full
    if bias is not None:
        out_data = out_data + bias.data[..., :, None]

    def vjp(g):
        pad_spec = [(0, 0)] * (g.ndim - 1) + [(pad, pad)]
        gf = np.pad(g, pad_spec) if pad else g
        gcols = _im2col(gf, k, stride)                     # (..., C_out*K, T_in)
        if x.requires_grad:
            x._accumulate(np.matmul(w2, gcols), own=True)
        if weight.requires_grad:
            prod = np.matmul(x.data, np.swapaxes(gcols, -1, -2))   # (..., C_in, C_out*K)
            if prod.ndim > w2.ndim:
                prod = prod.sum(axis=tuple(range(prod.ndim - w2.ndim)))
            weight._accumulate(prod.reshape(weight.shape), own=True)
        if bias is not None and bias.requires_grad:
            if grouped:
                bias._accumulate(g.sum(axis=(0, g.ndim - 1)), own=True)
            else:
                bias._accumulate(g.sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,)),
                                 own=True)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor(out_data, _parents=parents, _vjp=vjp)


# ---- normalization ----------------------------------------------------------


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize (channel-group x time) slices to zero mean / unit variance,
    then apply a per-channel affine. ``x``: (..., C, T); ``gamma``/``beta``:
    broadcastable per-channel, e.g. (C, 1) or (G_lead, C, 1)."""
    c = x.shape[-2]
    if c % num_groups != 0:
        raise InvalidInputError(f"channels {c} not divisible by {num_groups} groups")
    t = x.shape[-1]
    lead = x.shape[:-2]
    gshape = lead + (num_groups, c // num_groups, t)
    xg = x.data.reshape(gshape)
    mean = xg.mean(axis=(-2, -1), keepdims=True)
    var = xg.var(axis=(-2, -1), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = ((xg - mean) * inv).reshape(x.shape)
    out_data = norm * gamma.data + beta.data

    def vjp(g):
        if gamma.requires_grad:
            gamma._accumulate(_reduce_like(g * norm, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_reduce_like(g, beta.shape))
        if x.requires_grad:
            dn = (g * gamma.data).reshape(gshape)
            ng = norm.reshape(gshape)
            m = c // num_groups * t
            inner = (dn * ng).sum(axis=(-2, -1), keepdims=True) / m
            mean_dn = dn.sum(axis=(-2, -1), keepdims=True) / m
            dx = inv * (dn - mean_dn - ng * inner)
            x._accumulate(dx.reshape(x.shape))

    return Tensor(out_data, _parents=(x, gamma, beta), _vjp=vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis per position, then per-feature affine."""
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = (x.data - mean) * inv
    out_data = norm * gamma.data + beta.data

    def vjp(g):
        if gamma.requires_grad:
            gamma._accumulate(_reduce_like(g * norm, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_reduce_like(g, beta.shape))
        if x.requires_grad:
            dn = g * gamma.data
            m = x.shape[-1]
            inner = (dn * norm).sum(axis=-1, keepdims=True) / m
            mean_dn = dn.sum(axis=-1, keepdims=True) / m
            x._accumulate(inv * (dn - mean_dn - norm * inner))

    return Tensor(out_data, _parents=(x, gamma, beta), _vjp=vjp)


def _reduce_like(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (for broadcasted affine parameters)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


__all__ = [
    "InvalidInputError", "sigmoid", "leaky_relu", "gelu", "softmax", "affine",
    "embedding_lookup", "softmax_cross_entropy", "conv1d", "grouped_conv1d",
    "conv1d_transpose", "grouped_conv1d_transpose", "group_norm", "layer_norm",
    "constant", "stop_gradient",
]
