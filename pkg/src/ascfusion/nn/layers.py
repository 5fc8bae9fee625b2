"""Layers with explicit forward/backward passes on NCHW arrays.

Axis 2 is time and axis 3 is frequency throughout.  Each layer caches what
its backward pass needs during a training-mode forward call; ``backward``
fills ``self.grads`` and returns the gradient with respect to the input.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft

from ..errors import ConfigError
from . import _kernels

# upper bound on im2col elements materialized at once
_COLS_BUDGET = 4_000_000


class Layer:
    name = "layer"
    # piecewise-linear layers can pin their routing (ReLU mask, pooling
    # argmax) so finite differences stay on one linear piece
    route = None

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def output_shape(self, shape):
        return shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def l2_penalty(self):
        return 0.0

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def same_padding(k: int) -> tuple[int, int]:
    """Split k-1 padding with the extra element after, as Keras/TF do."""
    before = (k - 1) // 2
    return before, k - 1 - before


class Conv2D(Layer):
    """2-D cross-correlation, stride 1, with 'same' zero padding or 'valid'.

    Narrow kernels run as per-sample products with (positions, C*kt*kf)
    column blocks, so results land directly in NCHW layout.  Wide
    single-channel kernels run forward as a product with a banded
    (Toeplitz) matrix along frequency and backward through 2-D FFTs.
    """

    WIDE_KF = 48  # single-channel kernels at least this wide take the banded/FFT path
    FUSE_POSITIONS = 2048  # maps this small are multiplied as one batch-wide product
    CACHE_COLS = 16_000_000  # column blocks up to this size are kept for backward

    def __init__(self, in_channels, filters, kernel, padding="same", l2=0.0,
                 input_grad=True, rng=None, dtype=np.float32, name="conv"):
        super().__init__()
        kt, kf = kernel
        if kt < 1 or kf < 1 or filters < 1:
            raise ConfigError(f"{name}: invalid conv extents {kernel} x {filters}")
        if padding not in ("same", "valid"):
            raise ConfigError(f"{name}: unknown padding {padding!r}")
        self.name = name
        self.kernel = (kt, kf)
        self.padding = padding
        self.l2 = l2
        self.input_grad = input_grad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in, fan_out = in_channels * kt * kf, filters * kt * kf
        self.params["W"] = glorot_uniform(rng, (filters, in_channels, kt, kf), fan_in, fan_out, dtype)
        self.params["b"] = np.zeros(filters, dtype=dtype)

    @property
    def filters(self):
        return self.params["W"].shape[0]

    @property
    def wide(self):
        return self.params["W"].shape[1] == 1 and self.kernel[1] >= self.WIDE_KF

    def _pads(self):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return same_padding(self.kernel[0]), same_padding(self.kernel[1])

    def output_shape(self, shape):
        c, t, f = shape
        if c != self.params["W"].shape[1]:
            raise ConfigError(f"{self.name}: expects {self.params['W'].shape[1]} channels, got {c}")
        (pt0, pt1), (pf0, pf1) = self._pads()
        ot, of = t + pt0 + pt1 - self.kernel[0] + 1, f + pf0 + pf1 - self.kernel[1] + 1
        if ot < 1 or of < 1:
            raise ConfigError(f"{self.name}: kernel {self.kernel} larger than input {t}x{f}")
        return self.filters, ot, of

    def _cols(self, xp):
        """Column blocks (b, ot*of, C*kt*kf) of a padded input."""
        b, c = xp.shape[:2]
        kt, kf = self.kernel
        ot, of = xp.shape[2] - kt + 1, xp.shape[3] - kf + 1
        win = sliding_window_view(xp, self.kernel, axis=(2, 3))  # b,C,ot,of,kt,kf
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ot * of, c * kt * kf)

    def _toeplitz(self, f_in, f_out):
        """W as a (kt*f_in, filters*f_out) matrix acting on kt stacked input rows."""
        W = self.params["W"][:, 0]
        o, kt, kf = W.shape
        T = np.zeros((kt, f_in, o, f_out), dtype=W.dtype)
        cols = np.arange(f_out)
        for q in range(kf):
            T[:, cols + q, :, cols] = W[:, :, q].T
        return T.reshape(kt * f_in, o * f_out)

    def forward(self, x, train=False):
        (pt0, pt1), (pf0, pf1) = self._pads()
        xp = np.pad(x, ((0, 0), (0, 0), (pt0, pt1), (pf0, pf1))) if self.padding == "same" else x
        W = self.params["W"]
        o = W.shape[0]
        kt, kf = self.kernel
        n = x.shape[0]
        ot, of = xp.shape[2] - kt + 1, xp.shape[3] - kf + 1
        out = np.empty((n, o, ot * of), dtype=np.result_type(x, W))
        cached = None
        if self.wide:
            T = self._toeplitz(xp.shape[3], of)
            step = max(1, _COLS_BUDGET // (ot * max(T.shape)))
            for s in range(0, n, step):
                rows = sliding_window_view(xp[s:s + step, 0], kt, axis=1)  # b,ot,F,kt
                rows = rows.transpose(0, 1, 3, 2).reshape(-1, T.shape[0])
                r = (rows @ T).reshape(-1, ot, o, of)
                out[s:s + step] = r.transpose(0, 2, 1, 3).reshape(-1, o, ot * of)
        else:
            wmat = W.reshape(o, -1)
            per_item = wmat.shape[1] * ot * of
            keep = train and per_item * n <= self.CACHE_COLS
            cached = [] if keep else None
            step = max(1, _COLS_BUDGET // per_item)
            fuse = ot * of <= self.FUSE_POSITIONS
            for s in range(0, n, step):
                cols = self._cols(xp[s:s + step])
                if fuse:
                    r = cols.reshape(-1, cols.shape[2]) @ wmat.T
                    out[s:s + step] = r.reshape(-1, ot * of, o).transpose(0, 2, 1)
                else:
                    for i in range(cols.shape[0]):
                        np.matmul(wmat, cols[i].T, out=out[s + i])
                if keep:
                    cached.append(cols)
        out = out.reshape(n, o, ot, of)
        out += self.params["b"][None, :, None, None]
        if train:
            self._xp = xp
            self._cached = cached
            self._in_shape = x.shape
        return out

    def backward(self, grad):
        grad = np.ascontiguousarray(grad)
        dxp = self._backward_fft(grad) if self.wide else self._backward_cols(grad)
        if self.l2:
            self.grads["W"] = self.grads["W"] + 2.0 * self.l2 * self.params["W"]
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        self._xp = self._cached = None
        if dxp is None:
            return None
        if self.padding == "same":
            (pt0, _), (pf0, _) = self._pads()
            t, f = self._in_shape[2], self._in_shape[3]
            return np.ascontiguousarray(dxp[:, :, pt0:pt0 + t, pf0:pf0 + f])
        return dxp

    def _backward_cols(self, grad):
        xp = self._xp
        W = self.params["W"]
        o, c, kt, kf = W.shape
        n, _, ot, of = grad.shape
        wmat = W.reshape(o, -1)
        g = grad.reshape(n, o, ot * of)
        dW = np.zeros_like(wmat)
        dxp = np.zeros_like(xp) if self.input_grad else None
        step = max(1, _COLS_BUDGET // (wmat.shape[1] * ot * of))
        for k, s in enumerate(range(0, n, step)):
            cols = self._cached[k] if self._cached is not None else self._cols(xp[s:s + step])
            if ot * of <= self.FUSE_POSITIONS:
                gs = g[s:s + step].transpose(1, 0, 2).reshape(o, -1)
                dW += gs @ cols.reshape(-1, cols.shape[2])
                dcols = gs.T @ wmat if dxp is not None else None
            else:
                for i in range(cols.shape[0]):
                    dW += g[s + i] @ cols[i]
                dcols = np.matmul(g[s:s + step].transpose(0, 2, 1), wmat) if dxp is not None else None
            if dxp is not None:
                _kernels.col2im_add(dcols.reshape(-1, ot, of, c, kt, kf), dxp[s:s + step])
        self.grads["W"] = dW.reshape(W.shape)
        return dxp

    def _backward_fft(self, grad):
        """Single input channel: the weight gradient is a correlation of the
        padded input with the output gradient and the input gradient a full
        convolution of the output gradient with the kernels, both by 2-D FFT."""
        xp = self._xp[:, 0]
        W = self.params["W"][:, 0]
        kt, kf = self.kernel
        shape = (sp_fft.next_fast_len(xp.shape[1], True), sp_fft.next_fast_len(xp.shape[2], True))
        ctype = np.complex64 if W.dtype == np.float32 else np.complex128
        dW_f = None
        dx = np.empty_like(xp) if self.input_grad else None
        W_f = sp_fft.rfft2(W, s=shape).astype(ctype, copy=False) if self.input_grad else None
        step = max(1, _COLS_BUDGET // (W.shape[0] * shape[0] * shape[1]))
        for s in range(0, grad.shape[0], step):
            G = sp_fft.rfft2(grad[s:s + step], s=shape).astype(ctype, copy=False)
            X = sp_fft.rfft2(xp[s:s + step], s=shape).astype(ctype, copy=False)
            part = np.einsum("botk,btk->otk", G.conj(), X)
            dW_f = part if dW_f is None else dW_f + part
            if dx is not None:
                full = sp_fft.irfft2(np.einsum("botk,otk->btk", G, W_f), s=shape)
                dx[s:s + step] = full[:, :xp.shape[1], :xp.shape[2]]
        self.grads["W"] = sp_fft.irfft2(dW_f, s=shape)[:, :kt, :kf][:, None].astype(W.dtype)
        return None if dx is None else dx[:, None]

    def l2_penalty(self):
        return self.l2 * float(np.sum(self.params["W"].astype(np.float64) ** 2)) if self.l2 else 0.0


class ParallelConv2D(Layer):
    """Several same-padded convolutions over one input, concatenated on channels."""

    def __init__(self, branches: list[Conv2D], name="conv1"):
        super().__init__()
        self.name = name
        self.branches = branches
        for i, br in enumerate(branches):
            if br.padding != "same":
                raise ConfigError(f"{name}: branch {i} must use same padding")
            for k, v in br.params.items():
                self.params[f"{i}.{k}"] = v

    def output_shape(self, shape):
        outs = [br.output_shape(shape) for br in self.branches]
        if len({o[1:] for o in outs}) != 1:
            raise ConfigError(f"{self.name}: branch outputs differ spatially: {outs}")
        return sum(o[0] for o in outs), outs[0][1], outs[0][2]

    def forward(self, x, train=False):
        return np.concatenate([br.forward(x, train) for br in self.branches], axis=1)

    def backward(self, grad):
        dx = None
        start = 0
        for i, br in enumerate(self.branches):
            g = grad[:, start:start + br.filters]
            start += br.filters
            d = br.backward(np.ascontiguousarray(g))
            for k, v in br.grads.items():
                self.grads[f"{i}.{k}"] = v
            if d is not None:
                dx = d if dx is None else dx + d
        return dx

    def l2_penalty(self):
        return sum(br.l2_penalty() for br in self.branches)


class BatchNorm(Layer):
    """Per-channel batch normalization for (B, C, T, F) or (B, C) inputs.

    Running statistics follow ``r <- momentum * r + (1 - momentum) * batch``.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-3, dtype=np.float32, name="bn"):
        super().__init__()
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def output_shape(self, shape):
        if shape[0] != len(self.params["gamma"]):
            raise ConfigError(f"{self.name}: expects {len(self.params['gamma'])} channels, got {shape[0]}")
        return shape

    @staticmethod
    def _flat(x):
        return x.reshape(x.shape[0], x.shape[1], -1)

    @staticmethod
    def _bcast(v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x, train=False):
        gamma, beta = self.params["gamma"], self.params["beta"]
        dtype = gamma.dtype
        if train:
            n = x.size // x.shape[1]
            mu = (np.einsum("bci->c", self._flat(x)) / n).astype(dtype)
            xhat = x - self._bcast(mu, x)
            xf = self._flat(xhat)
            var = (np.einsum("bci,bci->c", xf, xf) / n).astype(dtype)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mu).astype(dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(dtype)
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
            xhat = x - self._bcast(mu, x)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(dtype)
        xhat *= self._bcast(inv_std, x)
        if train:
            self._xhat, self._inv_std = xhat, inv_std
        out = xhat * self._bcast(gamma, x)
        out += self._bcast(beta, x)
        return out

    def backward(self, grad):
        xhat, inv_std = self._xhat, self._inv_std
        n = grad.size // grad.shape[1]
        gf, xf = self._flat(grad), self._flat(xhat)
        g_sum = np.einsum("bci->c", gf)
        gx_sum = np.einsum("bci,bci->c", gf, xf)
        self.grads["beta"] = g_sum
        self.grads["gamma"] = gx_sum
        dtype = grad.dtype
        # dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))
        dx = xhat * self._bcast((gx_sum / n).astype(dtype), grad)
        np.subtract(grad, dx, out=dx)
        dx -= self._bcast((g_sum / n).astype(dtype), grad)
        dx *= self._bcast((self.params["gamma"] * inv_std).astype(dtype), grad)
        self._xhat = None
        return dx


class ReLU(Layer):
    name = "relu"

    def __init__(self, name="relu"):
        super().__init__()
        self.name = name

    def forward(self, x, train=False):
        mask = x > 0 if self.route is None else self.route
        if train:
            self._mask = mask
        return np.maximum(x, 0) if self.route is None else x * mask

    def backward(self, grad):
        out = grad * self._mask
        self._mask = None
        return out


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Gradients go to the first maximum of each window in row-major (time,
    frequency) order, so each window passes on exactly its incoming gradient.
    """

    def __init__(self, pool, name="pool"):
        super().__init__()
        self.name = name
        self.pool = tuple(pool)

    def output_shape(self, shape):
        c, t, f = shape
        ot, of = t // self.pool[0], f // self.pool[1]
        if ot < 1 or of < 1:
            raise ConfigError(f"{self.name}: pool {self.pool} larger than input {t}x{f}")
        return c, ot, of

    def forward(self, x, train=False):
        b, c, t, f = x.shape
        pt, pf = self.pool
        out = np.empty((b, c, t // pt, f // pf), dtype=x.dtype)
        arg = np.empty(out.shape, dtype=np.int32)
        _kernels.maxpool_forward(np.ascontiguousarray(x), pt, pf, out, arg)
        if self.route is not None:
            arg = self.route
            ot, of = out.shape[2:]
            win = x[:, :, :ot * pt, :of * pf].reshape(b, c, ot, pt, of, pf).transpose(0, 1, 2, 4, 3, 5)
            out = np.take_along_axis(win.reshape(b, c, ot, of, pt * pf), arg[..., None], -1)[..., 0]
        if train:
            self._arg = arg
            self._in_shape = x.shape
        return out

    def backward(self, grad):
        dx = np.zeros(self._in_shape, dtype=grad.dtype)
        _kernels.maxpool_backward(np.ascontiguousarray(grad), self._arg, self.pool[0], self.pool[1], dx)
        self._arg = None
        return dx


class Flatten(Layer):
    def __init__(self, name="flatten"):
        super().__init__()
        self.name = name

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        if train:
            self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._in_shape)


class Dense(Layer):
    def __init__(self, in_features, units, rng=None, dtype=np.float32, name="dense"):
        super().__init__()
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = glorot_uniform(rng, (in_features, units), in_features, units, dtype)
        self.params["b"] = np.zeros(units, dtype=dtype)

    def output_shape(self, shape):
        if shape != (self.params["W"].shape[0],):
            raise ConfigError(f"{self.name}: expects {self.params['W'].shape[0]} inputs, got {shape}")
        return (self.params["W"].shape[1],)

    def forward(self, x, train=False):
        if train:
            self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        self.grads["W"] = self._x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        self._x = None
        return grad @ self.params["W"].T


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean categorical cross-entropy; labels are class indices."""
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p.astype(np.float64), 1e-300))))
