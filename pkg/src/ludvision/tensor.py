"""Numerical core: 4-D tensors with reverse-mode gradients.

Values are numpy arrays laid out (n, c, h, w). A :class:`Var` wraps an array
together with the closure that maps an upstream gradient to gradients of its
parents; :meth:`Var.backward` walks the recorded graph in reverse
topological order. Every primitive here computes in float64.

The convolution forward pass accumulates taps one at a time in the fixed
order (input channel, kernel row, kernel column), starting from the bias.
:func:`conv2d_reference` performs the same arithmetic pixel by pixel, so the
two agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents: Sequence["Var | None"] = (), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf reachable from here."""
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if parent is None or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Var) -> list[Var]:
    seen, order = set(), []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError(f"invalid convolution geometry {self}")

    def output_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) // self.stride + 1
        if out < 1:
            raise ShapeError(f"{self} leaves no output for input size {size}")
        return out

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def _check_conv(x: np.ndarray, w: np.ndarray, b, spec: ConvSpec):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D, got {x.shape}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} != {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, expected {spec.in_channels}")
    if spec.has_bias:
        if b is None or np.shape(b) != (spec.out_channels,):
            raise ShapeError(f"bias must have shape ({spec.out_channels},)")
    elif b is not None:
        raise ShapeError("bias given for a bias-free convolution")
    return spec.output_size(x.shape[2]), spec.output_size(x.shape[3])


def _tap_slices(spec: ConvSpec, ky: int, kx: int, oh: int, ow: int):
    y0, x0 = ky * spec.dilation, kx * spec.dilation
    s = spec.stride
    return (
        slice(y0, y0 + s * (oh - 1) + 1, s),
        slice(x0, x0 + s * (ow - 1) + 1, s),
    )


def conv2d_forward(x: np.ndarray, w: np.ndarray, b, spec: ConvSpec) -> np.ndarray:
    oh, ow = _check_conv(x, w, b, spec)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    n = x.shape[0]
    out = np.zeros((n, spec.out_channels, oh, ow))
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    tmp = np.empty_like(out)
    for i in range(spec.in_channels):
        for ky in range(spec.kernel):
            for kx in range(spec.kernel):
                sy, sx = _tap_slices(spec, ky, kx, oh, ow)
                patch = xp[:, i, sy, sx][:, None]
                np.multiply(w[None, :, i, ky, kx, None, None], patch, out=tmp)
                out += tmp
    return out


def conv2d_backward(x, w, spec: ConvSpec, gout):
    """Gradients (input, weight, bias) of a convolution given d(loss)/d(output)."""
    n, _, h, wd = x.shape
    oh, ow = gout.shape[2:]
    p = spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.asarray(x, dtype=np.float64)
    gxp = np.zeros_like(xp, dtype=np.float64)
    gw = np.zeros(spec.weight_shape)
    for ky in range(spec.kernel):
        for kx in range(spec.kernel):
            sy, sx = _tap_slices(spec, ky, kx, oh, ow)
            patch = xp[:, :, sy, sx]
            gw[:, :, ky, kx] = np.tensordot(gout, patch, axes=([0, 2, 3], [0, 2, 3]))
            # (c_in, n, oh, ow) -> (n, c_in, oh, ow)
            contrib = np.tensordot(w[:, :, ky, kx], gout, axes=([0], [1]))
            gxp[:, :, sy, sx] += contrib.transpose(1, 0, 2, 3)
    gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
    gb = gout.sum(axis=(0, 2, 3)) if spec.has_bias else None
    return gx, gw, gb


def conv2d(x, w, b=None, spec: ConvSpec | None = None) -> Var:
    """2-D convolution with stride, dilation and zero padding.

    ``out[n,o,y,x] = b[o] + sum_{i,ky,kx} in[n,i,y*s-p+ky*d, x*s-p+kx*d] * w[o,i,ky,kx]``
    with out-of-range taps contributing nothing.
    """
    x, w = as_var(x), as_var(w)
    b = None if b is None else as_var(b)
    if spec is None:
        o, i, k, _ = w.shape
        spec = ConvSpec(i, o, k, has_bias=b is not None)
    out = conv2d_forward(x.value, w.value, None if b is None else b.value, spec)

    def backward(g):
        return conv2d_backward(x.value, w.value, spec, g)

    return Var(out, (x, w, b), backward)


def conv2d_reference(x, w, b=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Plain (undilated) convolution evaluated one output pixel at a time."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for bi in range(n):
        for o in range(cout):
            for y in range(oh):
                for xo in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for i in range(cin):
                        for ky in range(k):
                            iy = y * stride - padding + ky
                            for kx in range(k):
                                ix = xo * stride - padding + kx
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc = acc + x[bi, i, iy, ix] * w[o, i, ky, kx]
                                else:
                                    acc = acc + 0.0 * w[o, i, ky, kx]
                    out[bi, o, y, xo] = acc
    return out


# ---------------------------------------------------------------------------
# normalization and pointwise ops


class BatchNormState:
    """Running mean/variance of one batch-norm layer (mutated in train mode)."""

    __slots__ = ("mean", "var", "momentum")

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state: BatchNormState | None = None,
               training: bool = True, eps: float = 1e-5) -> Var:
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    c = x.shape[1]
    if x.value.ndim != 4 or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    g4 = gamma.value[None, :, None, None]
    if not training:
        if state is None:
            raise ShapeError("eval-mode batch_norm needs running statistics")
        invstd = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.value - state.mean[None, :, None, None]) * invstd[None, :, None, None]
        out = g4 * xhat + beta.value[None, :, None, None]

        def backward_eval(g):
            return (
                g * (g4 * invstd[None, :, None, None]),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return Var(out, (x, gamma, beta), backward_eval)

    m = x.value.shape[0] * x.value.shape[2] * x.value.shape[3]
    mean = x.value.mean(axis=(0, 2, 3))
    centered = x.value - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd[None, :, None, None]
    out = g4 * xhat + beta.value[None, :, None, None]
    if state is not None:
        mom = state.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.mean = (1 - mom) * state.mean + mom * mean
        state.var = (1 - mom) * state.var + mom * unbiased

    def backward(g):
        gsum = g.sum(axis=(0, 2, 3))
        gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
        gx = (g4 * invstd[None, :, None, None] / m) * (
            m * g - gsum[None, :, None, None] - xhat * gxhat_sum[None, :, None, None]
        )
        return gx, gxhat_sum, gsum

    return Var(out, (x, gamma, beta), backward)


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    return Var(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def add(*xs) -> Var:
    xs = [as_var(x) for x in xs]
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"add: shape {x.shape} != {shape}")
    out = xs[0].value.copy()
    for x in xs[1:]:
        out = out + x.value
    return Var(out, xs, lambda g: (g,) * len(xs))


def scale(x, factor: float) -> Var:
    x = as_var(x)
    return Var(x.value * factor, (x,), lambda g: (g * factor,))


def concat(xs, axis: int = 1) -> Var:
    xs = [as_var(x) for x in xs]
    out = np.concatenate([x.value for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return Var(out, xs, backward)


def reshape(x, shape) -> Var:
    x = as_var(x)
    orig = x.shape
    return Var(x.value.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes) -> Var:
    x = as_var(x)
    inverse = np.argsort(axes)
    return Var(x.value.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def matmul(a, b) -> Var:
    """Batched matrix product over the last two axes."""
    a, b = as_var(a), as_var(b)
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def backward(g):
        return g @ np.swapaxes(b.value, -1, -2), np.swapaxes(a.value, -1, -2) @ g

    return Var(out, (a, b), backward)


def softmax(x, axis: int = -1) -> Var:
    x = as_var(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Var(s, (x,), backward)


def project(x, weights) -> Var:
    """Scalar ``sum(x * weights)`` against a fixed array."""
    x = as_var(x)
    r = np.asarray(weights, dtype=np.float64)
    if r.shape != x.shape:
        raise ShapeError(f"project: weights {r.shape} != {x.shape}")
    return Var(np.sum(x.value * r), (x,), lambda g: (g * r,))


# ---------------------------------------------------------------------------
# resampling


def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row i holds the weights of output sample i over the input samples.

    Half-pixel centers: output i samples input coordinate
    ``(i + 0.5) * in/out - 0.5``, clamped into ``[0, in - 1]``.
    """
    if in_size < 1 or out_size < 1:
        raise ShapeError("resize sizes must be >= 1")
    m = np.zeros((out_size, in_size))
    ratio = in_size / out_size
    for i in range(out_size):
        src = (i + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Var:
    x = as_var(x)
    if x.value.ndim != 4:
        raise ShapeError(f"bilinear_resize needs a 4-D tensor, got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return Var(x.value.copy(), (x,), lambda g: (g,))
    ry = interpolation_matrix(h, out_h)
    rx = interpolation_matrix(w, out_w)
    out = ry @ x.value @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return Var(out, (x,), backward)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits, targets, ignore_code: int = 255) -> Var:
    """Mean over non-ignored pixels of ``-log softmax(logits)[target]``."""
    logits = as_var(logits)
    t = np.asarray(targets)
    if logits.value.ndim != 4:
        raise ShapeError(f"logits must be (n, K, h, w), got {logits.shape}")
    n, k, h, w = logits.shape
    if k < 2:
        raise ShapeError("need at least two classes")
    if t.shape != (n, h, w):
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    valid = t != ignore_code
    if np.any(t[valid] >= k) or np.any(t[valid] < 0):
        raise ValueError(f"target codes must lie in 0..{k - 1} or equal {ignore_code}")
    count = int(valid.sum())
    if count == 0:
        return Var(0.0, (logits,), lambda g: (np.zeros(logits.shape),))
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    safe_t = np.where(valid, t, 0).astype(np.intp)
    picked = np.take_along_axis(z, safe_t[:, None], axis=1)[:, 0]
    loss = float(np.sum((logsum - picked)[valid])) / count

    def backward(g):
        probs = np.exp(z - logsum[:, None])
        np.put_along_axis(
            probs, safe_t[:, None],
            np.take_along_axis(probs, safe_t[:, None], axis=1) - 1.0, axis=1,
        )
        probs *= valid[:, None]
        return (probs * (g / count),)

    return Var(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn: Callable[..., Var], inputs: Sequence[np.ndarray], eps: float = 1e-4,
               seed: int = 0, max_coords: int | None = None,
               wrt: Sequence[int] | None = None) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``fn`` receives one :class:`Var` per input. Non-scalar outputs are reduced
    with a fixed random projection. Relative error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``. ``max_coords`` bounds how many coordinates
    per input are probed (sampled without replacement); ``wrt`` restricts the
    check to a subset of input positions.
    """
    rng = np.random.default_rng(seed)
    values = [np.array(v, dtype=np.float64) for v in inputs]
    probe = fn(*[Var(v) for v in values])
    proj = None if probe.value.size == 1 else rng.standard_normal(probe.shape)

    def scalar(vs):
        out = fn(*vs)
        return out if proj is None else project(out, proj)

    leaves = [Var(v) for v in values]
    scalar(leaves).backward()
    positions = range(len(values)) if wrt is None else wrt
    worst = 0.0
    for idx in positions:
        analytic = leaves[idx].grad
        if analytic is None:
            analytic = np.zeros_like(values[idx])
        flat = values[idx].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(scalar([Var(v) for v in values]).value)
            flat[c] = orig - eps
            f_minus = float(scalar([Var(v) for v in values]).value)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(a_flat[c])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
