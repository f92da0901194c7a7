"""From-scratch neural network: plain conv layers, depthwise-separable convs,
attention gates, the 3-layer residual model, the L1 + gradient-difference
loss, and Adam.

All feature tensors are channel-last float64 arrays (B, H, W, C). Convolutions
are stride 1 with "same" zero padding (odd kernels only); forward passes are
im2col + one BLAS matmul, backward passes return exact gradients of the
forward map (verified against finite differences in the test suite).
"""

from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_odd(k):
    if k % 2 == 0:
        raise ValueError(f"kernel size {k} must be odd for same padding")


class ConvLayer:
    """2D convolution, weights (kh, kw, Cin, Cout) plus bias (Cout)."""

    def __init__(self, kh, kw, cin, cout):
        _check_odd(kh)
        _check_odd(kw)
        self.W = np.zeros((kh, kw, cin, cout))
        self.b = np.zeros(cout)

    def params(self):
        return OrderedDict(W=self.W, b=self.b)

    def forward(self, x):
        kh, kw, cin, cout = self.W.shape
        if x.shape[-1] != cin:
            raise ValueError(f"expected {cin} input channels, got {x.shape[-1]}")
        bsz, h, w = x.shape[:3]
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
            bsz * h * w, kh * kw * cin)
        y = cols @ self.W.reshape(kh * kw * cin, cout) + self.b
        return y.reshape(bsz, h, w, cout), (x.shape, cols)

    def backward(self, cache, dy):
        x_shape, cols = cache
        bsz, h, w, cin = x_shape
        kh, kw, _, cout = self.W.shape
        ph, pw = kh // 2, kw // 2
        dy_mat = dy.reshape(bsz * h * w, cout)
        dW = (cols.T @ dy_mat).reshape(self.W.shape)
        db = dy_mat.sum(axis=0)
        dcols = (dy_mat @ self.W.reshape(kh * kw * cin, cout).T).reshape(
            bsz, h, w, kh, kw, cin)
        dxp = np.zeros((bsz, h + 2 * ph, w + 2 * pw, cin))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, ph:ph + h, pw:pw + w, :]
        return dx, OrderedDict(W=dW, b=db)


class DepthwiseSeparableConv:
    """Channel-wise k x k convolution (no bias) followed by a biased 1x1
    cross-channel convolution."""

    def __init__(self, k, cin, cout):
        _check_odd(k)
        self.dw = np.zeros((k, k, cin))
        self.pw_w = np.zeros((cin, cout))
        self.pw_b = np.zeros(cout)

    def params(self):
        return OrderedDict(dw=self.dw, pw_w=self.pw_w, pw_b=self.pw_b)

    def forward(self, x):
        k, _, cin = self.dw.shape
        if x.shape[-1] != cin:
            raise ValueError(f"expected {cin} input channels, got {x.shape[-1]}")
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B,H,W,C,k,k)
        y1 = np.einsum("bhwcij,ijc->bhwc", win, self.dw)
        y = np.tensordot(y1, self.pw_w, axes=([3], [0])) + self.pw_b
        return y, (xp, x.shape, y1)

    def backward(self, cache, dy):
        xp, x_shape, y1 = cache
        bsz, h, w, cin = x_shape
        k = self.dw.shape[0]
        p = k // 2
        d_pw_w = np.einsum("bhwc,bhwd->cd", y1, dy)
        d_pw_b = dy.sum(axis=(0, 1, 2))
        dy1 = np.tensordot(dy, self.pw_w, axes=([3], [1]))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        d_dw = np.einsum("bhwcij,bhwc->ijc", win, dy1)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dy1 * self.dw[i, j, :]
        dx = dxp[:, p:p + h, p:p + w, :]
        return dx, OrderedDict(dw=d_dw, pw_w=d_pw_w, pw_b=d_pw_b)


class AttentionGate:
    """Gate M = sigmoid(ds_b(relu(ds_a(F)))) applied as F' = M * F.

    ds_a maps C -> C/reduction, ds_b maps back C/reduction -> C; both use the
    same spatial filter size. Gate values are in (0, 1) by construction.
    """

    def __init__(self, channels, filter_size, reduction=2):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.channels = channels
        self.filter_size = filter_size
        self.reduction = reduction
        mid = channels // reduction
        self.ds_a = DepthwiseSeparableConv(filter_size, channels, mid)
        self.ds_b = DepthwiseSeparableConv(filter_size, mid, channels)

    def params(self):
        out = OrderedDict()
        for name, arr in self.ds_a.params().items():
            out[f"a.{name}"] = arr
        for name, arr in self.ds_b.params().items():
            out[f"b.{name}"] = arr
        return out

    def forward(self, f):
        a_out, ca = self.ds_a.forward(f)
        h = relu(a_out)
        b_out, cb = self.ds_b.forward(h)
        m = sigmoid(b_out)
        return m * f, m, (f, a_out, m, ca, cb)

    def backward(self, cache, d_out):
        f, a_out, m, ca, cb = cache
        dm = d_out * f
        df = d_out * m
        db_out = dm * m * (1.0 - m)
        dh, gb = self.ds_b.backward(cb, db_out)
        da_out = dh * (a_out > 0)
        df2, ga = self.ds_a.backward(ca, da_out)
        grads = OrderedDict()
        for name, arr in ga.items():
            grads[f"a.{name}"] = arr
        for name, arr in gb.items():
            grads[f"b.{name}"] = arr
        return df + df2, grads


class AgCnnModel:
    """3-layer residual CNN (9-5-1 kernels, 2->64->32->2 channels) with an
    optional attention gate after each of the first two activations. Filter
    size 0 disables a gate. The residual connection is global: output =
    input + correction branch."""

    def __init__(self, in_channels=2, c1=64, c2=32, f1=3, f2=3, reduction=2,
                 residual=True, kernels=(9, 5, 1)):
        self.config = dict(in_channels=in_channels, c1=c1, c2=c2, f1=f1, f2=f2,
                           reduction=reduction, residual=residual,
                           kernels=list(kernels))
        self.conv1 = ConvLayer(kernels[0], kernels[0], in_channels, c1)
        self.ag1 = AttentionGate(c1, f1, reduction) if f1 else None
        self.conv2 = ConvLayer(kernels[1], kernels[1], c1, c2)
        self.ag2 = AttentionGate(c2, f2, reduction) if f2 else None
        self.conv3 = ConvLayer(kernels[2], kernels[2], c2, in_channels)
        self.residual = residual

    def _blocks(self):
        blocks = [("conv1", self.conv1)]
        if self.ag1 is not None:
            blocks.append(("ag1", self.ag1))
        blocks.append(("conv2", self.conv2))
        if self.ag2 is not None:
            blocks.append(("ag2", self.ag2))
        blocks.append(("conv3", self.conv3))
        return blocks

    def params(self):
        out = OrderedDict()
        for prefix, block in self._blocks():
            for name, arr in block.params().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def forward(self, x):
        """Returns (prediction, cache). Gates emitted this pass are in
        cache["gates"]."""
        z1, c1 = self.conv1.forward(x)
        a1 = relu(z1)
        gates = []
        if self.ag1 is not None:
            g1, m1, cg1 = self.ag1.forward(a1)
            gates.append(m1)
        else:
            g1, cg1 = a1, None
        z2, c2 = self.conv2.forward(g1)
        a2 = relu(z2)
        if self.ag2 is not None:
            g2, m2, cg2 = self.ag2.forward(a2)
            gates.append(m2)
        else:
            g2, cg2 = a2, None
        res, c3 = self.conv3.forward(g2)
        y = x + res if self.residual else res
        cache = {"c1": c1, "z1": z1, "cg1": cg1, "c2": c2, "z2": z2,
                 "cg2": cg2, "c3": c3, "gates": gates}
        return y, cache

    def predict(self, x):
        y, _ = self.forward(x)
        return y

    def backward(self, cache, dy):
        grads = OrderedDict()
        dg2, g3 = self.conv3.backward(cache["c3"], dy)
        for name, arr in g3.items():
            grads[f"conv3.{name}"] = arr
        if self.ag2 is not None:
            da2, gg2 = self.ag2.backward(cache["cg2"], dg2)
            for name, arr in gg2.items():
                grads[f"ag2.{name}"] = arr
        else:
            da2 = dg2
        dz2 = da2 * (cache["z2"] > 0)
        dg1, g2 = self.conv2.backward(cache["c2"], dz2)
        for name, arr in g2.items():
            grads[f"conv2.{name}"] = arr
        if self.ag1 is not None:
            da1, gg1 = self.ag1.backward(cache["cg1"], dg1)
            for name, arr in gg1.items():
                grads[f"ag1.{name}"] = arr
        else:
            da1 = dg1
        dz1 = da1 * (cache["z1"] > 0)
        dx, g1 = self.conv1.backward(cache["c1"], dz1)
        for name, arr in g1.items():
            grads[f"conv1.{name}"] = arr
        if self.residual:
            dx = dx + dy
        # emit in parameter order
        return dx, OrderedDict((k, grads[k]) for k in self.params())


def param_count(model):
    """Exact count of trainable scalars, biases included."""
    return sum(arr.size for arr in model.params().values())


def init_weights(model, rng):
    """He-uniform for layers feeding ReLU, Glorot-uniform for the sigmoid
    branch (ds_b) and the linear output conv; biases zero. Draw order follows
    the parameter registry, so a fixed seed reproduces exactly."""
    glorot_prefixes = ("conv3.",)
    glorot_infix = ".b."  # the ds_b half of each attention gate
    for name, arr in model.params().items():
        if name.endswith(("b", "pw_b")) and arr.ndim == 1:
            arr[...] = 0.0
            continue
        fan_in, fan_out = _fans(name, arr)
        if name.startswith(glorot_prefixes) or glorot_infix in name:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            limit = np.sqrt(6.0 / fan_in)
        arr[...] = rng.uniform_array(arr.shape, -limit, limit)


def _fans(name, arr):
    if arr.ndim == 4:      # conv (kh, kw, cin, cout)
        kh, kw, cin, cout = arr.shape
        return kh * kw * cin, kh * kw * cout
    if arr.ndim == 3:      # depthwise (k, k, c)
        k = arr.shape[0]
        return k * k, k * k
    if arr.ndim == 2:      # pointwise (cin, cout)
        return arr.shape[0], arr.shape[1]
    raise ValueError(f"unexpected parameter shape for {name}: {arr.shape}")


def loss_l1_gdl(pred, target):
    """L1 + gradient-difference loss (exponent 1) and its (sub)gradient.

    L1 is the mean absolute difference over all entries. GDL compares the
    magnitudes of forward neighbor differences along height and width, averaged
    over all neighbor pairs. Subgradient is 0 at ties.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    l1 = np.mean(np.abs(d))
    grad = np.sign(d) / d.size

    # neighbor differences along W (axis -2) and H (axis -3)
    gh_p = np.diff(pred, axis=-2)
    gh_t = np.diff(target, axis=-2)
    gv_p = np.diff(pred, axis=-3)
    gv_t = np.diff(target, axis=-3)
    n_pairs = gh_p.size + gv_p.size
    gdl = 0.0
    if n_pairs:
        eh = np.abs(np.abs(gh_p) - np.abs(gh_t))
        ev = np.abs(np.abs(gv_p) - np.abs(gv_t))
        gdl = (eh.sum() + ev.sum()) / n_pairs
        sh = np.sign(np.abs(gh_p) - np.abs(gh_t)) * np.sign(gh_p) / n_pairs
        sv = np.sign(np.abs(gv_p) - np.abs(gv_t)) * np.sign(gv_p) / n_pairs
        hslice = [slice(None)] * pred.ndim
        hs_hi = tuple(hslice[:-2] + [slice(1, None)] + hslice[-1:])
        hs_lo = tuple(hslice[:-2] + [slice(None, -1)] + hslice[-1:])
        vs_hi = tuple(hslice[:-3] + [slice(1, None)] + hslice[-2:])
        vs_lo = tuple(hslice[:-3] + [slice(None, -1)] + hslice[-2:])
        grad[hs_hi] += sh
        grad[hs_lo] -= sh
        grad[vs_hi] += sv
        grad[vs_lo] -= sv
    return l1 + gdl, grad


class AdamState:
    """Standard bias-corrected Adam; update is lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
        self.v = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / b1c
            v_hat = self.v[k] / b2c
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
