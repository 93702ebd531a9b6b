"""Reverse-mode automatic differentiation over numpy arrays.

Small closure-based tape sized for the image networks in this package:
stride-1 convolutions, 2x pooling/upsampling, instance normalization,
bilinear warps and the elementwise glue between them. Graphs are built
only when an input requires gradients, so inference runs as plain numpy.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Module",
    "Conv2d",
    "Linear",
    "Adam",
    "conv2d",
    "linear",
    "avg_pool2",
    "upsample_nearest2",
    "affine_sample",
    "bilinear_resize",
    "instance_norm",
    "relu",
    "leaky_relu",
    "sigmoid",
    "concat_channels",
    "gradcheck",
    "numeric_gradient",
]


class Tensor:
    """A numpy array plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data)

    def backward(self, seed=None):
        """Accumulate gradients of self (seeded with ones) into the graph."""
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, pg in zip(node._parents, node._backward(node.grad)):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other)
            return _make(self.data + other.data, (self, other), lambda g: (g, g))
        const = np.asarray(other, dtype=self.data.dtype)
        out = self.data + const
        if out.shape != self.data.shape:
            raise ValueError("constant operand may not grow the tensor shape")
        return _make(out, (self,), lambda g: (g,))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other)
            return _make(self.data - other.data, (self, other), lambda g: (g, -g))
        return self + (-np.asarray(other))

    def __rsub__(self, other):
        return (-self) + np.asarray(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other)
            return _make(
                self.data * other.data,
                (self, other),
                lambda g, a=self.data, b=other.data: (g * b, g * a),
            )
        const = np.asarray(other, dtype=self.data.dtype)
        out = self.data * const
        if out.shape != self.data.shape:
            raise ValueError("constant operand may not grow the tensor shape")
        return _make(out, (self,), lambda g: (g * const,))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a constant instead")
        return self * (1.0 / np.asarray(other))

    def abs(self):
        s = np.sign(self.data)
        return _make(np.abs(self.data), (self,), lambda g: (g * s,))

    def sum(self):
        shape = self.data.shape
        return _make(
            np.asarray(self.data.sum(), dtype=self.data.dtype),
            (self,),
            lambda g: (np.broadcast_to(g, shape).copy(),),
        )

    def mean(self):
        n = self.data.size
        return self.sum() * (1.0 / n)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def _check_same_shape(a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}")


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


# -- activations -----------------------------------------------------------


def relu(x):
    m = x.data > 0
    return _make(np.where(m, x.data, 0.0), (x,), lambda g: (g * m,))


def leaky_relu(x, slope=0.2):
    m = x.data > 0
    return _make(
        np.where(m, x.data, slope * x.data),
        (x,),
        lambda g: (g * np.where(m, 1.0, slope),),
    )


def sigmoid(x):
    z = x.data
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


# -- structural ops --------------------------------------------------------


def concat_channels(tensors):
    """Concatenate (N, C, H, W) tensors along the channel axis."""
    datas = [t.data for t in tensors]
    sizes = [d.shape[1] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate(datas, axis=1), tuple(tensors), backward)


def flatten_spatial(x):
    """(N, C, H, W) -> (N, C*H*W)."""
    shape = x.data.shape
    return _make(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C) spatial mean."""
    n, c, h, w = x.data.shape
    inv = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None], x.data.shape) * inv,)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward)


def instance_norm(x, eps=1e-5):
    """Per-sample, per-channel spatial standardization without affine terms."""
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (istd * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), backward)


def avg_pool2(x):
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2 needs even spatial dims")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), backward)


def upsample_nearest2(x):
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def pixel_shuffle2(x):
    """Depth-to-space by 2: (n, 4c, h, w) -> (n, c, 2h, 2w).

    Channel block [c*dy*2 + c*dx ... ] lands at subpixel (dy, dx), so the
    map is a pure permutation and the backward pass is its inverse.
    """
    n, c4, h, w = x.data.shape
    if c4 % 4:
        raise ValueError("pixel_shuffle2 needs a channel count divisible by 4")
    c = c4 // 4
    out = (x.data.reshape(n, 2, 2, c, h, w)
           .transpose(0, 3, 4, 1, 5, 2)
           .reshape(n, c, 2 * h, 2 * w))

    def backward(g):
        gg = (g.reshape(n, c, h, 2, w, 2)
              .transpose(0, 3, 5, 1, 2, 4)
              .reshape(n, c4, h, w),)
        return gg

    return _make(out, (x,), backward)


# -- convolution -----------------------------------------------------------


def _corr2d(x, w, pad):
    """Raw stride-1 cross-correlation. Returns (out, cols) with cols usable for dW."""
    n, cin, h, ww = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise ValueError(f"conv channel mismatch: input {cin}, kernel {cin2}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T
    return out.transpose(0, 2, 1).reshape(n, cout, ho, wo), cols


def conv2d(x, w, b=None, pad=None):
    """Stride-1 2D convolution; pad defaults to (k - 1) // 2 (shape-preserving for odd k)."""
    kh = w.data.shape[2]
    if pad is None:
        pad = (kh - 1) // 2
    out, cols = _corr2d(x.data, w.data, pad)
    if b is not None:
        out = out + b.data[None, :, None, None]
    keep_cols = cols if w.requires_grad else None
    wdata = w.data

    def backward(g):
        n, cout, ho, wo = g.shape
        gx = None
        if x.requires_grad:
            wrot = wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _corr2d(g, wrot, wdata.shape[2] - 1 - pad)
        gw = None
        if w.requires_grad:
            gr = g.reshape(n, cout, ho * wo)
            gw = np.tensordot(gr, keep_cols, axes=([0, 2], [0, 1])).reshape(wdata.shape)
        if b is not None:
            gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
            return gx, gw, gb
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def linear(x, w, b=None):
    """x (N, K) @ w (K, M) + b (M)."""
    out = x.data @ w.data
    if b is not None:
        out = out + b.data[None, :]

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is not None:
            return gx, gw, (g.sum(axis=0) if b.requires_grad else None)
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


# -- resampling ------------------------------------------------------------


def _sample_grid(matrix, h_out, w_out):
    ii, jj = np.meshgrid(np.arange(h_out, dtype=np.float64), np.arange(w_out, dtype=np.float64), indexing="ij")
    m = np.asarray(matrix, dtype=np.float64)
    sy = m[0, 0] * ii + m[0, 1] * jj + m[0, 2]
    sx = m[1, 0] * ii + m[1, 1] * jj + m[1, 2]
    return sy, sx


def affine_sample(x, matrix, out_shape=None, mode="zeros"):
    """Bilinear resampling of (N, C, H, W) at source coords matrix @ (row, col, 1).

    `matrix` is 2x3 and maps output pixel coordinates to input sampling
    coordinates. Out-of-range samples read zero in "zeros" mode and the
    clamped border value in "edge" mode. Gradients flow to x only.
    """
    n, c, h, w = x.data.shape
    ho, wo = out_shape if out_shape is not None else (h, w)
    sy, sx = _sample_grid(matrix, ho, wo)

    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    ty = (sy - y0).astype(x.data.dtype)
    tx = (sx - x0).astype(x.data.dtype)

    corners = []
    for dy, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx_
        wgt = (ty if dy else 1.0 - ty) * (tx if dx_ else 1.0 - tx)
        if mode == "zeros":
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wgt = wgt * valid
        elif mode != "edge":
            raise ValueError(f"unknown sampling mode {mode!r}")
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        corners.append((yc, xc, wgt))

    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for yc, xc, wgt in corners:
        out += x.data[:, :, yc, xc] * wgt

    def backward(g):
        gx = np.zeros_like(x.data).reshape(n, c, h * w)
        for yc, xc, wgt in corners:
            flat = (yc * w + xc).ravel()
            np.add.at(gx, (slice(None), slice(None), flat), (g * wgt).reshape(n, c, -1))
        return (gx.reshape(n, c, h, w),)

    return _make(out, (x,), backward)


def _resize_matrix(h_in, w_in, h_out, w_out):
    # Pixel-center alignment: output center i maps to (i + 0.5) * scale - 0.5.
    ry, rx = h_in / h_out, w_in / w_out
    return np.array([[ry, 0.0, 0.5 * ry - 0.5], [0.0, rx, 0.5 * rx - 0.5]])


def bilinear_resize(x, out_hw, mode="edge"):
    """Bilinear resize of (N, C, H, W) features to (h_out, w_out)."""
    h, w = x.data.shape[2:]
    ho, wo = out_hw
    if (ho, wo) == (h, w):
        return x
    return affine_sample(x, _resize_matrix(h, w, ho, wo), out_shape=(ho, wo), mode=mode)


# -- modules ---------------------------------------------------------------


class Module:
    """Base container tracking parameters and child modules by name."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, array):
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_params(self, prefix=""):
        out = {}
        for k, t in self._params.items():
            out[prefix + k if prefix else k] = t
        for k, m in self._children.items():
            out.update(m.named_params(prefix + k + "." if prefix else k + "."))
        return out

    def load_state(self, state, prefix=""):
        """Copy arrays from a {name: ndarray} mapping into matching parameters."""
        params = self.named_params(prefix)
        missing = [k for k in params if k not in state]
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {missing[:4]}{'...' if len(missing) > 4 else ''}")
        for k, t in params.items():
            src = np.asarray(state[k])
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {t.data.shape}")
            t.data = src.astype(t.data.dtype, copy=True)

    def state_arrays(self, prefix=""):
        return {k: t.data.copy() for k, t in self.named_params(prefix).items()}


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, dtype=np.float32, bias=True, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            std = np.sqrt(2.0 / (cin * k * k))
            w = rng.normal(0.0, std, size=(cout, cin, k, k))
        self.w = self.add_param("w", w.astype(dtype))
        self.b = self.add_param("b", np.zeros(cout, dtype=dtype)) if bias else None
        self.k = k

    def __call__(self, x, pad=None):
        return conv2d(x, self.w, self.b, pad=pad)


class Linear(Module):
    def __init__(self, k_in, k_out, rng, dtype=np.float32):
        super().__init__()
        std = np.sqrt(2.0 / k_in)
        self.w = self.add_param("w", rng.normal(0.0, std, size=(k_in, k_out)).astype(dtype))
        self.b = self.add_param("b", np.zeros(k_out, dtype=dtype))

    def __call__(self, x):
        return linear(x, self.w, self.b)


class Adam:
    """Adaptive moment estimation over a {name: Tensor} parameter table."""

    def __init__(self, params, lr, betas=(0.5, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# -- gradient verification -------------------------------------------------


def numeric_gradient(f, arrays, h=1e-6):
    """Central-difference gradient of scalar f() with respect to each array in-place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f())
            flat[i] = orig - h
            down = float(f())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(build, tensors, h=1e-6, tol=1e-4):
    """Compare analytic gradients of scalar build() against central differences.

    `tensors` are the leaf Tensors to differentiate; their data is perturbed
    in place. Returns the worst relative error across all elements.
    """
    for t in tensors:
        t.grad = None
    loss = build()
    loss.backward()
    analytic = [np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64) for t in tensors]
    numeric = numeric_gradient(lambda: build().data, [t.data for t in tensors], h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    if worst > tol:
        raise AssertionError(f"gradient check failed: worst relative error {worst:.3e} > {tol:.1e}")
    return worst
