"""Minimal reverse-mode autodiff engine on numpy arrays.

Provides exactly the operator set the supernet needs: 2-d convolution
(with grouping for depthwise), batch-statistics batch norm, relu6,
global average pooling, dense layers, softmax cross-entropy, and an
SGD-momentum optimizer. Arrays are NCHW row-major, float32 by default;
building parameters as float64 runs the same code paths in a wider
verification mode used by the gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction for forward-only runs."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """An ndarray plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output, got shape "
                             f"{self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, attaching the graph only when grads are wanted."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def parameter(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array (no gradient to the constant)."""
    c = np.asarray(c, dtype=a.dtype) if not np.isscalar(c) else c

    def backward(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), backward)


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant array; the straight-through hook for quantization."""
    def backward(g):
        a._accumulate(g)

    return _make(a.data + c, (a,), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, keepdims=False), (a,), backward)


def relu6(a: Tensor) -> Tensor:
    out = np.minimum(np.maximum(a.data, 0.0), 6.0)
    # subgradient 0 at both kinks: strict inequalities
    mask = (a.data > 0.0) & (a.data < 6.0)

    def backward(g):
        a._accumulate(g * mask)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# convolution


def _check_conv_shapes(x: Tensor, w: Tensor, groups: int) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got ndim={x.data.ndim}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d, got ndim={w.data.ndim}")
    n, c, h, wid = x.shape
    k_out, k_in, kh, kw = w.shape
    if c % groups != 0:
        raise ShapeError(f"conv2d: input channels {c} not divisible by groups {groups}")
    if k_out % groups != 0:
        raise ShapeError(f"conv2d: output channels {k_out} not divisible by groups {groups}")
    if k_in != c // groups:
        raise ShapeError(f"conv2d: kernel expects {k_in} channels per group, input has {c // groups}")
    if kh not in (1, 3, 5) or kw not in (1, 3, 5):
        raise ShapeError(f"conv2d: kernel size {kh}x{kw} unsupported (need 1, 3 or 5)")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Cross-correlation over NCHW input. groups==C gives depthwise."""
    _check_conv_shapes(x, w, groups)
    n, c, h, wid = x.shape
    k_out, k_in, kh, kw = w.shape
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wid + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: output spatial dims {h_out}x{w_out} empty for "
                         f"input {h}x{wid}, kernel {kh}x{kw}, stride {stride}, pad {padding}")

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    if kh == 1 and kw == 1 and groups == 1:
        return _conv_pointwise(x, w, xp, stride, padding, h_out, w_out)
    if groups == c and k_out == c and k_in == 1:
        return _conv_depthwise(x, w, xp, stride, padding, h_out, w_out)
    return _conv_generic(x, w, xp, stride, padding, groups, h_out, w_out)


def _conv_pointwise(x, w, xp, stride, padding, h_out, w_out):
    n, c = x.shape[0], x.shape[1]
    k_out = w.shape[0]
    xs = xp[:, :, ::stride, ::stride] if stride > 1 else xp
    xr = xs.reshape(n, c, h_out * w_out)
    w2 = w.data.reshape(k_out, c)
    out = np.matmul(w2, xr).reshape(n, k_out, h_out, w_out)

    def backward(g):
        gr = g.reshape(n, k_out, h_out * w_out)
        if w.requires_grad:
            gw = np.einsum("nks,ncs->kc", gr, xr).reshape(w.shape)
            w._accumulate(gw)
        if x.requires_grad:
            gx_s = np.matmul(w2.T, gr).reshape(n, c, h_out, w_out)
            if stride > 1 or padding > 0:
                gxp = np.zeros_like(xp)
                gxp[:, :, ::stride, ::stride] = gx_s
                gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] \
                    if padding > 0 else gxp
            else:
                gx = gx_s
            x._accumulate(gx)

    return _make(out, (x, w), backward)


def _conv_depthwise(x, w, xp, stride, padding, h_out, w_out):
    n, c, h, wid = x.shape
    kh, kw = w.shape[2], w.shape[3]
    wd = w.data[:, 0]  # (C, kh, kw)
    out = np.zeros((n, c, h_out, w_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
            out += sl * wd[:, i, j][None, :, None, None]

    def backward(g):
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    sl = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
                    gw[:, 0, i, j] = np.sum(sl * g, axis=(0, 2, 3))
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        g * wd[:, i, j][None, :, None, None]
            gx = gxp[:, :, padding:padding + h, padding:padding + wid] if padding > 0 else gxp
            x._accumulate(gx)

    return _make(out, (x, w), backward)


def _conv_generic(x, w, xp, stride, padding, groups, h_out, w_out):
    n, c, h, wid = x.shape
    k_out, k_in, kh, kw = w.shape
    cg = c // groups
    kg = k_out // groups
    # patches: (N, C, kh, kw, Ho, Wo) built from 2-d slices
    patches = np.empty((n, c, kh, kw, h_out, w_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride,
                                     j:j + stride * w_out:stride]
    pg = patches.reshape(n, groups, cg * kh * kw, h_out * w_out)
    wg = w.data.reshape(groups, kg, k_in * kh * kw)
    out = np.einsum("gkp,ngps->ngks", wg, pg).reshape(n, k_out, h_out, w_out)

    def backward(g):
        gg = g.reshape(n, groups, kg, h_out * w_out)
        if w.requires_grad:
            gw = np.einsum("ngks,ngps->gkp", gg, pg).reshape(w.shape)
            w._accumulate(gw)
        if x.requires_grad:
            gp = np.einsum("gkp,ngks->ngps", wg, gg).reshape(
                n, c, kh, kw, h_out, w_out)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * h_out:stride,
                        j:j + stride * w_out:stride] += gp[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wid] if padding > 0 else gxp
            x._accumulate(gx)

    return _make(out, (x, w), backward)


# ---------------------------------------------------------------------------
# normalization, pooling, dense, loss


def batchnorm_batchstats(x: Tensor, gamma: Tensor, beta: Tensor,
                         eps: float = 1e-5) -> Tensor:
    """Normalize with the current batch's per-channel statistics.

    No running averages are kept; evaluation uses the same batch-specific
    statistics as training so architecture changes never see stale moments.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm: input must be NCHW, got ndim={x.data.ndim}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},), got "
                         f"{gamma.shape} and {beta.shape}")
    m = n * h * w
    if m < 2:
        raise ShapeError("batchnorm: need at least 2 samples per channel for "
                         "batch statistics (N*H*W == 1)")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(0, 2, 3), keepdims=True)
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivstd
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(np.sum(g, axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate(np.sum(g * xhat, axis=(0, 2, 3)))
        if x.requires_grad:
            gxh = g * gamma.data[None, :, None, None]
            s1 = np.sum(gxh, axis=(0, 2, 3), keepdims=True)
            s2 = np.sum(gxh * xhat, axis=(0, 2, 3), keepdims=True)
            gx = (ivstd / m) * (m * gxh - s1 - xhat * s2)
            x._accumulate(gx)

    return _make(out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be NCHW, got ndim={x.data.ndim}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape)
        x._accumulate(gx)

    return _make(out, (x,), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"dense: input must be (N, D), got ndim={x.data.ndim}")
    n, d = x.shape
    if w.data.ndim != 2 or w.shape[0] != d:
        raise ShapeError(f"dense: weight must be ({d}, K), got {w.shape}")
    k = w.shape[1]
    if b.shape != (k,):
        raise ShapeError(f"dense: bias must be ({k},), got {b.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        if b.requires_grad:
            b._accumulate(np.sum(g, axis=0))
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if x.requires_grad:
            x._accumulate(g @ w.data.T)

    return _make(out, (x, w, b), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the true class, max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, K), got ndim={logits.data.ndim}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    loss = -np.mean(logp[np.arange(n), labels])

    def backward(g):
        p = ez / se
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g * p / n)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


@dataclass
class Parameter:
    """A named trainable tensor; decay=False exempts it from weight decay."""
    name: str
    tensor: Tensor
    decay: bool = True


def sgd_step(params: list[Parameter], state: dict[str, np.ndarray],
             cfg: SgdConfig) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v (in place)."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        if g.shape != p.tensor.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} != param shape "
                             f"{p.tensor.shape} for {p.name}")
        if p.decay and cfg.weight_decay > 0.0:
            g = g + cfg.weight_decay * p.tensor.data
        v = state.get(p.name)
        if v is None:
            v = np.zeros_like(p.tensor.data)
        v = cfg.momentum * v + g
        state[p.name] = v
        p.tensor.data -= cfg.learning_rate * v


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(f, x: Tensor, h: float = 1e-3,
                            max_coords: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Compare reverse-mode gradients of scalar f against central differences.

    Returns the max relative error over checked coordinates with
    denominator max(|analytic|, |numeric|, 1e-8). Large tensors may be
    spot-checked by passing max_coords.
    """
    x.grad = None
    out = f(x)
    out.backward()
    if x.grad is None:
        raise ValueError("finite_difference_check: f does not depend on x")
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        idx = gen.choice(n, size=max_coords, replace=False)
    else:
        idx = np.arange(n)

    worst = 0.0
    ga = analytic.reshape(-1)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = float(f(x).data)
        flat[i] = orig - h
        with no_grad():
            fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        a = float(ga[i])
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
