"""Layer families with forward and backward passes on NCHW float64 arrays.

Every layer caches what its backward pass needs during ``forward`` and exposes
learnable tensors in ``params`` with matching ``grads``. Non-learnable state
(batch-norm running statistics) lives in ``buffers``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    pass


# ------------------------------------------------------------ atrous conv

def same_padding(ksize: int, rate: int) -> tuple[int, int]:
    """(before, after) zero padding keeping the output size equal to the input."""
    c = (ksize - 1) // 2
    return rate * (ksize - 1 - c), rate * c


def _conv_pads(kh, kw, rate, padding):
    if padding == "same":
        return same_padding(kh, rate) + same_padding(kw, rate)
    if padding == "valid":
        return (0, 0, 0, 0)
    raise ValueError(f"unknown padding {padding!r}")


def atrous_conv_forward(x, w, b, rate: int = 1, padding: str = "same"):
    """Dilated 2-D convolution.

    ``y[n, o, p, q] = b[o] + sum_{c,i,j} w[o, c, i, j] * x[n, c, p - rate*(i - ci), q - rate*(j - cj)]``
    with ``ci = (kh - 1) // 2`` (likewise ``cj``) and zeros outside the image.
    For ``rate = 1`` this is ordinary (flipped-kernel) convolution.

    Returns ``(y, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if rate < 1 or int(rate) != rate:
        raise ValueError(f"dilation rate must be a positive integer, got {rate}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("atrous conv expects x as NCHW and w as (out, in, kh, kw)")
    N, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"kernel expects {Cw} input channels, input has {C}")
    pt, pb, pl, pr = _conv_pads(kh, kw, rate, padding)
    Ho, Wo = H + pt + pb - rate * (kh - 1), W + pl + pr - rate * (kw - 1)
    if Ho < 1 or Wo < 1:
        raise ShapeError("input too small for kernel footprint")
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x
    w2 = w.reshape(O, -1)
    y = np.empty((N, O, Ho, Wo))
    cols = np.empty((C, kh, kw, Ho, Wo))
    # one im2col + GEMM per sample bounds the column buffer to a single image
    for n in range(N):
        _im2col(xp[n], cols, rate, Ho, Wo)
        y[n] = (w2 @ cols.reshape(C * kh * kw, -1)).reshape(O, Ho, Wo)
    if b is not None:
        y += np.asarray(b, dtype=np.float64)[None, :, None, None]
    cache = (xp, w, rate, (pt, pb, pl, pr), (N, C, H, W), (Ho, Wo))
    return y, cache


def _im2col(xp_n, cols, rate, Ho, Wo):
    _, kh, kw, _, _ = cols.shape
    for i in range(kh):
        a = rate * (kh - 1 - i)
        for j in range(kw):
            bb = rate * (kw - 1 - j)
            cols[:, i, j] = xp_n[:, a:a + Ho, bb:bb + Wo]


def atrous_conv_backward(grad_out, cache):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`atrous_conv_forward`."""
    if cache is None:
        raise RuntimeError("backward called without a forward cache")
    xp, w, rate, (pt, pb, pl, pr), (N, C, H, W), (Ho, Wo) = cache
    O, _, kh, kw = w.shape
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (N, O, Ho, Wo):
        raise ShapeError(f"upstream gradient shape {g.shape} != {(N, O, Ho, Wo)}")
    w2 = w.reshape(O, -1)
    gb = g.sum(axis=(0, 2, 3))
    gw2 = np.zeros_like(w2)
    gxp = np.zeros_like(xp)
    cols = np.empty((C, kh, kw, Ho, Wo))
    for n in range(N):
        gn = g[n].reshape(O, -1)
        _im2col(xp[n], cols, rate, Ho, Wo)
        gw2 += gn @ cols.reshape(C * kh * kw, -1).T
        gcols = (w2.T @ gn).reshape(C, kh, kw, Ho, Wo)
        for i in range(kh):
            a = rate * (kh - 1 - i)
            for j in range(kw):
                bb = rate * (kw - 1 - j)
                gxp[n, :, a:a + Ho, bb:bb + Wo] += gcols[:, i, j]
    gx = gxp[:, :, pt:pt + H, pl:pl + W]
    return np.ascontiguousarray(gx), gw2.reshape(w.shape), gb


# ------------------------------------------------------------ layer classes

class Layer:
    kind = "layer"
    n_inputs = 1

    def __init__(self, name: str = ""):
        self.name = name or self.kind
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, in_shapes: Sequence[tuple]) -> tuple:
        """Shape excluding the batch axis; raises ShapeError when incompatible."""
        return tuple(in_shapes[0])

    def forward(self, xs: Sequence[np.ndarray], train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> list:
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        return self._cache


class Input(Layer):
    kind = "input"
    n_inputs = 0

    def __init__(self, shape, name=""):
        super().__init__(name)
        self.shape = tuple(int(s) for s in shape)

    def output_shape(self, in_shapes):
        return self.shape


class AtrousConv2D(Layer):
    kind = "conv"

    def __init__(self, in_ch, out_ch, ksize=3, rate=1, padding="same", name=""):
        super().__init__(name)
        if rate < 1:
            raise ValueError("dilation rate must be >= 1")
        kh, kw = (ksize, ksize) if np.isscalar(ksize) else ksize
        self.in_ch, self.out_ch, self.kh, self.kw = in_ch, out_ch, kh, kw
        self.rate, self.padding = rate, padding
        self.params = {"w": np.zeros((out_ch, in_ch, kh, kw)), "b": np.zeros(out_ch)}
        self.zero_grad()

    def init(self, rng: np.random.Generator):
        rf = self.kh * self.kw
        bound = np.sqrt(6.0 / (self.in_ch * rf + self.out_ch * rf))
        self.params["w"][...] = rng.uniform(-bound, bound, self.params["w"].shape)
        self.params["b"][...] = 0.0

    def output_shape(self, in_shapes):
        C, H, W = in_shapes[0]
        if C != self.in_ch:
            raise ShapeError(f"{self.name}: expects {self.in_ch} channels, got {C}")
        pt, pb, pl, pr = _conv_pads(self.kh, self.kw, self.rate, self.padding)
        Ho = H + pt + pb - self.rate * (self.kh - 1)
        Wo = W + pl + pr - self.rate * (self.kw - 1)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"{self.name}: input {H}x{W} too small for dilated kernel")
        return (self.out_ch, Ho, Wo)

    def forward(self, xs, train=False):
        y, self._cache = atrous_conv_forward(xs[0], self.params["w"], self.params["b"], self.rate, self.padding)
        return y

    def backward(self, grad):
        gx, gw, gb = atrous_conv_backward(grad, self._need_cache())
        self.grads["w"] += gw
        self.grads["b"] += gb
        return [gx]


class BatchNorm(Layer):
    """Per-channel normalization over batch (and space for 4-D inputs)."""

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-3, name=""):
        super().__init__(name)
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self.zero_grad()

    def output_shape(self, in_shapes):
        if in_shapes[0][0] != self.channels:
            raise ShapeError(f"{self.name}: expects {self.channels} channels, got {in_shapes[0][0]}")
        return tuple(in_shapes[0])

    def _axes(self, x):
        return (0,) + tuple(range(2, x.ndim))

    def _bcast(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, xs, train=False):
        x = xs[0]
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        self._cache = (xhat, inv, train, axes)
        return xhat * self._bcast(self.params["gamma"], x) + self._bcast(self.params["beta"], x)

    def backward(self, grad):
        xhat, inv, train, axes = self._need_cache()
        self.grads["gamma"] += (grad * xhat).sum(axis=axes)
        self.grads["beta"] += grad.sum(axis=axes)
        gxhat = grad * self._bcast(self.params["gamma"], grad)
        if not train:
            return [gxhat * self._bcast(inv, grad)]
        m = grad.size / grad.shape[1]
        gx = (self._bcast(inv, grad) / m) * (
            m * gxhat
            - self._bcast(gxhat.sum(axis=axes), grad)
            - xhat * self._bcast((gxhat * xhat).sum(axis=axes), grad)
        )
        return [gx]


class ReLU(Layer):
    kind = "relu"

    def forward(self, xs, train=False):
        x = xs[0]
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return [grad * self._need_cache()]


def softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Layer):
    """Softmax over the channel axis (per pixel for 4-D inputs)."""

    kind = "softmax"

    def forward(self, xs, train=False):
        p = softmax(xs[0], axis=1)
        self._cache = p
        return p

    def backward(self, grad):
        p = self._need_cache()
        return [p * (grad - (grad * p).sum(axis=1, keepdims=True))]


class _Pool(Layer):
    def __init__(self, size=2, global_pool=False, name=""):
        super().__init__(name)
        self.size = size
        self.global_pool = global_pool

    def _window(self, H, W):
        return (H, W) if self.global_pool else (self.size, self.size)

    def output_shape(self, in_shapes):
        C, H, W = in_shapes[0]
        ph, pw = self._window(H, W)
        if H < ph or W < pw:
            raise ShapeError(f"{self.name}: {H}x{W} smaller than pool window")
        return (C, H // ph, W // pw)

    def _blocks(self, x):
        N, C, H, W = x.shape
        ph, pw = self._window(H, W)
        Ho, Wo = H // ph, W // pw
        xb = x[:, :, :Ho * ph, :Wo * pw].reshape(N, C, Ho, ph, Wo, pw)
        return xb, (N, C, H, W, ph, pw, Ho, Wo)


class MaxPool(_Pool):
    kind = "maxpool"

    def forward(self, xs, train=False):
        xb, dims = self._blocks(xs[0])
        y = xb.max(axis=(3, 5))
        N, C, H, W, ph, pw, Ho, Wo = dims
        # route ties to one position only
        flat = xb.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, ph * pw)
        arg = flat.argmax(axis=-1)
        self._cache = (arg, dims)
        return y

    def backward(self, grad):
        arg, (N, C, H, W, ph, pw, Ho, Wo) = self._need_cache()
        g = np.zeros((N, C, Ho, Wo, ph * pw))
        np.put_along_axis(g, arg[..., None], grad[..., None], axis=-1)
        g = g.reshape(N, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * ph, Wo * pw)
        out = np.zeros((N, C, H, W))
        out[:, :, :Ho * ph, :Wo * pw] = g
        return [out]


class AvgPool(_Pool):
    kind = "avgpool"

    def forward(self, xs, train=False):
        xb, dims = self._blocks(xs[0])
        self._cache = dims
        return xb.mean(axis=(3, 5))

    def backward(self, grad):
        N, C, H, W, ph, pw, Ho, Wo = self._need_cache()
        g = np.repeat(np.repeat(grad, ph, axis=2), pw, axis=3) / (ph * pw)
        out = np.zeros((N, C, H, W))
        out[:, :, :Ho * ph, :Wo * pw] = g
        return [out]


class ZeroPad(Layer):
    kind = "zeropad"

    def __init__(self, pad=1, name=""):
        super().__init__(name)
        self.pad = (pad,) * 4 if np.isscalar(pad) else tuple(pad)  # top, bottom, left, right

    def output_shape(self, in_shapes):
        C, H, W = in_shapes[0]
        t, b, l, r = self.pad
        return (C, H + t + b, W + l + r)

    def forward(self, xs, train=False):
        t, b, l, r = self.pad
        x = xs[0]
        self._cache = x.shape
        return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))

    def backward(self, grad):
        N, C, H, W = self._need_cache()
        t, _, l, _ = self.pad
        return [grad[:, :, t:t + H, l:l + W]]


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


class Resize(Layer):
    """Lambda node: bilinear resize to a fixed spatial size."""

    kind = "resize"

    def __init__(self, size, name=""):
        super().__init__(name)
        self.size = (int(size[0]), int(size[1]))
        self._mats = {}

    def output_shape(self, in_shapes):
        return (in_shapes[0][0],) + self.size

    def _m(self, H, W):
        key = (H, W)
        if key not in self._mats:
            self._mats[key] = (bilinear_matrix(H, self.size[0]), bilinear_matrix(W, self.size[1]))
        return self._mats[key]

    def forward(self, xs, train=False):
        x = xs[0]
        Rh, Rw = self._m(x.shape[2], x.shape[3])
        self._cache = (Rh, Rw)
        return np.einsum("ph,nchw,qw->ncpq", Rh, x, Rw, optimize=True)

    def backward(self, grad):
        Rh, Rw = self._need_cache()
        return [np.einsum("ph,ncpq,qw->nchw", Rh, grad, Rw, optimize=True)]


class Scale(Layer):
    """Lambda node: multiply by a constant."""

    kind = "scale"

    def __init__(self, factor=1.0, name=""):
        super().__init__(name)
        self.factor = float(factor)

    def forward(self, xs, train=False):
        self._cache = True
        return xs[0] * self.factor

    def backward(self, grad):
        return [grad * self.factor]


class Concat(Layer):
    kind = "concat"
    n_inputs = -1

    def output_shape(self, in_shapes):
        rest = {tuple(s[1:]) for s in in_shapes}
        if len(rest) != 1:
            raise ShapeError(f"{self.name}: cannot concatenate shapes {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + tuple(in_shapes[0][1:])

    def forward(self, xs, train=False):
        self._cache = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        splits = np.cumsum(self._need_cache())[:-1]
        return list(np.split(grad, splits, axis=1))


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape, name=""):
        super().__init__(name)
        self.shape = tuple(int(s) for s in shape)

    def output_shape(self, in_shapes):
        if int(np.prod(in_shapes[0])) != int(np.prod(self.shape)):
            raise ShapeError(f"{self.name}: cannot reshape {in_shapes[0]} to {self.shape}")
        return self.shape

    def forward(self, xs, train=False):
        self._cache = xs[0].shape
        return xs[0].reshape((xs[0].shape[0],) + self.shape)

    def backward(self, grad):
        return [grad.reshape(self._need_cache())]


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shapes):
        return (int(np.prod(in_shapes[0])),)

    def forward(self, xs, train=False):
        self._cache = xs[0].shape
        return xs[0].reshape(xs[0].shape[0], -1)

    def backward(self, grad):
        return [grad.reshape(self._need_cache())]


class Dense(Layer):
    """Fully connected ``y = x @ w + b`` on (N, D) inputs."""

    kind = "dense"

    def __init__(self, in_features, out_features, name=""):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        self.params = {"w": np.zeros((in_features, out_features)), "b": np.zeros(out_features)}
        self.zero_grad()

    def init(self, rng: np.random.Generator):
        bound = np.sqrt(6.0 / (self.in_features + self.out_features))
        self.params["w"][...] = rng.uniform(-bound, bound, self.params["w"].shape)
        self.params["b"][...] = 0.0

    def output_shape(self, in_shapes):
        if tuple(in_shapes[0]) != (self.in_features,):
            raise ShapeError(f"{self.name}: expects ({self.in_features},), got {in_shapes[0]}")
        return (self.out_features,)

    def forward(self, xs, train=False):
        x = xs[0]
        self._cache = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, grad):
        x = self._need_cache()
        self.grads["w"] += x.T @ grad
        self.grads["b"] += grad.sum(axis=0)
        return [grad @ self.params["w"].T]


class Classifier(Dense):
    """Scan-level classification layer (a dense layer producing class logits)."""

    kind = "classify"


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Input, AtrousConv2D, BatchNorm, ReLU, Softmax, MaxPool, AvgPool, ZeroPad,
                Resize, Scale, Concat, Reshape, Flatten, Dense, Classifier)
}


def make_layer(kind: str, name: str, **cfg) -> Layer:
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(name=name, **cfg)


def param_counts(layer: Layer) -> tuple[int, int]:
    """(learnable, non_learnable) parameter counts of a constructed layer."""
    learn = sum(int(v.size) for v in layer.params.values())
    fixed = sum(int(v.size) for v in layer.buffers.values())
    return learn, fixed

