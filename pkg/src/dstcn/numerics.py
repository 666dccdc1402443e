"""Differentiable numerics core: 1-D multichannel sequences, dilated convolution,
pointwise ops, softmax, a reverse-mode gradient tape over a fixed op vocabulary,
and the Adam update rule.

Conventions
-----------
A sequence is a float64 array of shape (channels, time). Batches are packed by
concatenating equal-length slices along the time axis into (channels, n*seg_len);
ops that look across time (`dilated_conv1d`, `residual_unit`) take ``seg_len`` so
that no information crosses slice boundaries (each slice is zero-padded on its
own). All ops are pure: inputs are never mutated, shapes are preserved along the
time axis, and identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Node:
    """A value produced by (or fed into) recorded forward ops."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value


@dataclass
class Param:
    """A named learnable array."""

    name: str
    value: np.ndarray


class Tape:
    """Ordered record of forward ops, sufficient to run reverse mode once.

    Each record is ``(out_node, inputs, backward_fn)`` where ``backward_fn``
    maps the gradient at ``out_node`` to one gradient per input (``None`` for
    non-differentiable inputs). Inputs may be Node or Param.
    """

    def __init__(self):
        self._records = []
        self._produced = set()

    def record(self, out, inputs, backward_fn):
        self._records.append((out, tuple(inputs), backward_fn))
        self._produced.add(id(out))

    def __len__(self):
        return len(self._records)

    def produced(self, node):
        return id(node) in self._produced


def as_sequence(values, name="input"):
    """Validate/coerce a (channels, time) float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D (channels, time) array, got ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


def _shift(x, k, seg_len=None):
    # y[..., t] = x[..., t+k] within each segment of length seg_len, zeros outside
    n = x.shape[-1]
    if seg_len is None:
        seg_len = n
    if n % seg_len != 0:
        raise ValueError(f"time axis {n} is not a multiple of seg_len={seg_len}")
    out = np.empty_like(x)
    v = x.reshape(x.shape[0], -1, seg_len)
    ov = out.reshape(x.shape[0], -1, seg_len)
    k = int(k)
    if abs(k) >= seg_len:
        out[...] = 0.0
    elif k > 0:
        ov[:, :, :-k] = v[:, :, k:]
        ov[:, :, seg_len - k:] = 0.0
    elif k < 0:
        ov[:, :, -k:] = v[:, :, :k]
        ov[:, :, :-k] = 0.0
    else:
        ov[...] = v
    return out


def _check_conv_shapes(x, weight, bias):
    if weight.value.ndim != 3 or weight.value.shape[2] != 3:
        raise ValueError(f"{weight.name}: kernel must have shape (out, in, 3), got {weight.value.shape}")
    if x.shape[0] != weight.value.shape[1]:
        raise ValueError(
            f"{weight.name}: input has {x.shape[0]} channels but kernel expects in_channels={weight.value.shape[1]}"
        )
    if bias.value.shape != (weight.value.shape[0],):
        raise ValueError(f"{bias.name}: bias shape {bias.value.shape} != (out_channels={weight.value.shape[0]},)")


def dilated_conv1d(tape, x, weight, bias, dilation, seg_len=None):
    """3-tap dilated convolution with symmetric zero padding of width d.

    Sample t of the output reads the input at t-d, t, t+d (taps 0, 1, 2), so
    the output length equals the input length.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    xv = x.value
    _check_conv_shapes(xv, weight, bias)
    # tap-major contiguous copy keeps the matmuls on the BLAS fast path
    w = np.ascontiguousarray(weight.value.transpose(2, 0, 1))
    xm = _shift(xv, -dilation, seg_len)
    xp = _shift(xv, dilation, seg_len)
    y = w[0] @ xm
    y += w[1] @ xv
    y += w[2] @ xp
    y += bias.value[:, None]
    out = Node(y)
    if tape is not None:
        def backward(gy):
            gw = np.empty_like(weight.value)
            gw[:, :, 0] = gy @ _shift(xv, -dilation, seg_len).T
            gw[:, :, 1] = gy @ xv.T
            gw[:, :, 2] = gy @ _shift(xv, dilation, seg_len).T
            gb = gy.sum(axis=1)
            gx = w[0].T @ _shift(gy, dilation, seg_len)
            gx += w[1].T @ gy
            gx += w[2].T @ _shift(gy, -dilation, seg_len)
            return gx, gw, gb
        tape.record(out, (x, weight, bias), backward)
    return out


def conv1x1(tape, x, weight, bias):
    """Per-sample affine map across channels: y = W x + b."""
    xv = x.value
    w = weight.value
    if w.ndim != 2:
        raise ValueError(f"{weight.name}: weight must be 2-D (out, in), got shape {w.shape}")
    if xv.shape[0] != w.shape[1]:
        raise ValueError(f"{weight.name}: input has {xv.shape[0]} channels but weight expects in={w.shape[1]}")
    if bias.value.shape != (w.shape[0],):
        raise ValueError(f"{bias.name}: bias shape {bias.value.shape} != (out_channels={w.shape[0]},)")
    y = w @ xv
    y += bias.value[:, None]
    out = Node(y)
    if tape is not None:
        def backward(gy):
            return w.T @ gy, gy @ xv.T, gy.sum(axis=1)
        tape.record(out, (x, weight, bias), backward)
    return out


def relu(tape, x):
    y = np.maximum(x.value, 0.0)
    out = Node(y)
    if tape is not None:
        def backward(gy):
            return (gy * (y > 0.0),)
        tape.record(out, (x,), backward)
    return out


def softmax_channels(tape, x):
    """Column-wise softmax over the channel axis, max-subtracted for stability."""
    xv = x.value
    if xv.shape[0] < 2:
        raise ValueError(f"softmax_channels: need at least 2 channels, got {xv.shape[0]}")
    y = xv - xv.max(axis=0, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=0, keepdims=True)
    out = Node(y)
    if tape is not None:
        def backward(gy):
            return (y * (gy - (gy * y).sum(axis=0, keepdims=True)),)
        tape.record(out, (x,), backward)
    return out


def add(tape, a, b):
    out = Node(a.value + b.value)
    if tape is not None:
        def backward(gy):
            return gy, gy
        tape.record(out, (a, b), backward)
    return out


def residual_unit(tape, x, w_dil, b_dil, w_pw, b_pw, dilation, seg_len=None):
    """Fused residual block: x + conv1x1(relu(dilated_conv1d(x, d))).

    Equivalent to composing the standalone ops; fused so that only the
    post-ReLU activation is kept for the backward pass.
    """
    xv = x.value
    _check_conv_shapes(xv, w_dil, b_dil)
    if w_pw.value.shape[1] != w_dil.value.shape[0]:
        raise ValueError(
            f"{w_pw.name}: pointwise in={w_pw.value.shape[1]} != dilated out={w_dil.value.shape[0]}"
        )
    if w_pw.value.shape[0] != xv.shape[0]:
        raise ValueError(
            f"{w_pw.name}: residual add needs out={xv.shape[0]} channels, got {w_pw.value.shape[0]}"
        )
    w1 = np.ascontiguousarray(w_dil.value.transpose(2, 0, 1))
    c = w1[0] @ _shift(xv, -dilation, seg_len)
    c += w1[1] @ xv
    c += w1[2] @ _shift(xv, dilation, seg_len)
    c += b_dil.value[:, None]
    r = np.maximum(c, 0.0, out=c)
    y = w_pw.value @ r
    y += b_pw.value[:, None]
    y += xv
    out = Node(y)
    if tape is not None:
        def backward(gy):
            gw2 = gy @ r.T
            gb2 = gy.sum(axis=1)
            gc = w_pw.value.T @ gy
            gc *= r > 0.0
            gw1 = np.empty_like(w_dil.value)
            gw1[:, :, 0] = gc @ _shift(xv, -dilation, seg_len).T
            gw1[:, :, 1] = gc @ xv.T
            gw1[:, :, 2] = gc @ _shift(xv, dilation, seg_len).T
            gb1 = gc.sum(axis=1)
            gx = gy + w1[0].T @ _shift(gc, dilation, seg_len)
            gx += w1[1].T @ gc
            gx += w1[2].T @ _shift(gc, -dilation, seg_len)
            return gx, gw1, gb1, gw2, gb2
        tape.record(out, (x, w_dil, b_dil, w_pw, b_pw), backward)
    return out


def weighted_sum(tape, terms, weights):
    """Weighted sum of scalar loss terms."""
    if len(terms) != len(weights):
        raise ValueError(f"got {len(terms)} terms but {len(weights)} weights")
    total = float(sum(w * t.value for t, w in zip(terms, weights)))
    out = Node(total)
    if tape is not None:
        def backward(gy):
            return tuple(w * gy for w in weights)
        tape.record(out, tuple(terms), backward)
    return out


def backward(tape, loss):
    """Reverse-mode gradients of a recorded scalar loss.

    Returns gradients keyed by parameter name for every Param that appears on
    the tape; params not on any path to the loss get zeros.
    """
    if tape is None or len(tape) == 0:
        raise ValueError("backward called without a recorded forward pass")
    if not tape.produced(loss):
        raise ValueError("loss was not produced by an op recorded on this tape")
    node_grads = {id(loss): 1.0}
    param_grads = {}

    def accumulate_param(p, g):
        if p.name in param_grads:
            param_grads[p.name] = param_grads[p.name] + g
        else:
            param_grads[p.name] = g

    seen_params = {}
    for out, inputs, backward_fn in reversed(tape._records):
        for inp in inputs:
            if isinstance(inp, Param):
                seen_params[inp.name] = inp
        g = node_grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = backward_fn(g)
        for inp, ig in zip(inputs, input_grads):
            if ig is None:
                continue
            if isinstance(inp, Param):
                accumulate_param(inp, ig)
            else:
                k = id(inp)
                if k in node_grads:
                    node_grads[k] = node_grads[k] + ig
                else:
                    node_grads[k] = ig
    for name, p in seen_params.items():
        if name not in param_grads:
            param_grads[name] = np.zeros_like(p.value)
    return param_grads


@dataclass
class AdamHyper:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators and a step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )


def adam_step(params, grads, state, hyper):
    """One bias-corrected Adam update; mutates params and state in place."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, value in params.items():
        g = grads[name]
        if np.shape(g) != value.shape:
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {value.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * np.square(g)
        value -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return params, state
