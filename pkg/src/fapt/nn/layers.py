"""Differentiable layers with hand-written backward passes.

Every layer caches what its backward needs during ``forward``; ``backward(dy)``
accumulates parameter gradients and returns the gradient w.r.t. the input.
Batched inputs keep features on the last axis (``Linear``, attention) or use
NCHW layout (convolutions).
"""

import math

import numpy as np
from scipy.special import erf

from .. import kernels
from .core import ConfigError, Module, Parameter

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def leaky_relu(x, slope=0.01):
    return np.where(x >= 0, x, slope * x)


class GELU(Module):
    def forward(self, x):
        self._x = x
        return gelu(x).astype(x.dtype, copy=False)

    def backward(self, dy):
        return (dy * gelu_grad(self._x)).astype(dy.dtype, copy=False)


class LeakyReLU(Module):
    def __init__(self, slope=0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        self._pos = x >= 0
        return np.where(self._pos, x, self.slope * x).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._pos, dy, self.slope * dy).astype(dy.dtype, copy=False)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

class Linear(Module):
    """``y = x W^T + b`` over the last axis; ``W`` is ``(d_out, d_in)``."""

    def __init__(self, d_in, d_out, rng, bias=True, trainable=True, dtype=np.float64,
                 init_std=None, zero=False):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        if zero:
            w = np.zeros((d_out, d_in), dtype)
        elif init_std is not None:
            w = (init_std * rng.standard_normal((d_out, d_in))).astype(dtype)
        else:
            w = _uniform(rng, (d_out, d_in), d_in, dtype)
        self.weight = Parameter(w, trainable)
        if bias:
            b = np.zeros(d_out, dtype) if (zero or init_std is not None) else _uniform(rng, d_out, d_in, dtype)
            self.bias = Parameter(b, trainable)
        else:
            self.bias = None

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        self._x = x
        y = x @ self.weight.value.T
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, dy):
        x2 = self._x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        if self.weight.trainable:
            self.weight.accumulate(dy2.T @ x2)
        if self.bias is not None and self.bias.trainable:
            self.bias.accumulate(dy2.sum(axis=0))
        return dy @ self.weight.value


class LoRALinear(Module):
    """Frozen ``base`` plus a trainable low-rank bypass ``B A``.

    ``y = x W^T + b + (x A^T) B^T`` with ``A ~ N(0, a_std^2)`` and ``B = 0`` at
    construction, so the initial output equals the frozen layer's exactly.
    Setting ``enabled = False`` drops the bypass altogether.
    """

    def __init__(self, base: Linear, rank, rng, a_std=0.02):
        super().__init__()
        if rank < 1 or rank > min(base.d_in, base.d_out):
            raise ConfigError(f"LoRA rank {rank} must lie in 1..{min(base.d_in, base.d_out)}")
        dtype = base.weight.value.dtype
        base.freeze()
        self.base = base
        self.rank = rank
        self.lora_a = Parameter((a_std * rng.standard_normal((rank, base.d_in))).astype(dtype),
                                trainable=True, adapter=True)
        self.lora_b = Parameter(np.zeros((base.d_out, rank), dtype), trainable=True, adapter=True)
        self.enabled = True

    def forward(self, x):
        y = self.base.forward(x)
        if not self.enabled:
            return y
        self._x = x
        self._u = x @ self.lora_a.value.T
        return y + self._u @ self.lora_b.value.T

    def backward(self, dy):
        dx = self.base.backward(dy)
        if not self.enabled:
            return dx
        d_in, r = self.base.d_in, self.rank
        du = dy @ self.lora_b.value
        self.lora_b.accumulate(dy.reshape(-1, self.base.d_out).T @ self._u.reshape(-1, r))
        self.lora_a.accumulate(du.reshape(-1, r).T @ self._x.reshape(-1, d_in))
        return dx + du @ self.lora_a.value


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

class LayerNorm(Module):
    def __init__(self, d, trainable=True, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(d, dtype), trainable)
        self.beta = Parameter(np.zeros(d, dtype), trainable)

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._xhat, self._inv = xhat, inv
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dy):
        xhat, inv = self._xhat, self._inv
        d = xhat.shape[-1]
        self.gamma.accumulate((dy * xhat).reshape(-1, d).sum(axis=0))
        self.beta.accumulate(dy.reshape(-1, d).sum(axis=0))
        g = dy * self.gamma.value
        return inv * (g - g.mean(axis=-1, keepdims=True)
                      - xhat * (g * xhat).mean(axis=-1, keepdims=True))


class BatchNorm2d(Module):
    """Batch statistics while training, running statistics in eval mode."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype))
        self.beta = Parameter(np.zeros(channels, dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype))
        self.register_buffer("running_var", np.ones(channels, dtype))

    def forward(self, x):
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            xc = x - mean[None, :, None, None]
            var = (xc * xc).mean(axis=(0, 2, 3))
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * count / max(count - 1, 1)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
            xc = x - mean[None, :, None, None]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv[None, :, None, None]
        self._xhat, self._inv, self._batch_stats = xhat, inv, self.training
        return (xhat * self.gamma.value[None, :, None, None]
                + self.beta.value[None, :, None, None]).astype(x.dtype, copy=False)

    def backward(self, dy):
        xhat, inv = self._xhat, self._inv
        self.gamma.accumulate((dy * xhat).sum(axis=(0, 2, 3)))
        self.beta.accumulate(dy.sum(axis=(0, 2, 3)))
        g = dy * self.gamma.value[None, :, None, None]
        if not self._batch_stats:
            return g * inv[None, :, None, None]
        gm = g.mean(axis=(0, 2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return inv[None, :, None, None] * (g - gm - xhat * gxm)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

class Conv2d(Module):
    """Zero-padded strided cross-correlation on NCHW input."""

    def __init__(self, c_in, c_out, kernel, stride, padding, rng, bias=True, dtype=np.float64):
        super().__init__()
        if kernel < 1 or stride < 1 or padding < 0:
            raise ConfigError(f"invalid conv spec k={kernel} s={stride} p={padding}")
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(_uniform(rng, c_out, fan_in, dtype)) if bias else None

    def output_size(self, length):
        return kernels.conv_out_size(length, self.kernel, self.stride, self.padding)

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if h + 2 * self.padding < self.kernel or w + 2 * self.padding < self.kernel:
            raise ValueError(f"kernel {self.kernel} larger than padded input {h}x{w}")
        self._x = np.ascontiguousarray(x)
        y = kernels.conv2d_forward(self._x, self.weight.value, self.stride, self.padding)
        if self.bias is not None:
            y = y + self.bias.value[None, :, None, None]
        return y

    def backward(self, dy):
        dy = np.ascontiguousarray(dy)
        dx, dw = kernels.conv2d_backward(self._x, self.weight.value, dy, self.stride, self.padding)
        self.weight.accumulate(dw)
        if self.bias is not None:
            self.bias.accumulate(dy.sum(axis=(0, 2, 3)))
        return dx


class ConvBNAct(Module):
    def __init__(self, channels, kernel, stride, padding, rng, slope=0.01, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(channels, channels, kernel, stride, padding, rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self.act = LeakyReLU(slope)

    def forward(self, x):
        return self.act.forward(self.bn.forward(self.conv.forward(x)))

    def backward(self, dy):
        return self.conv.backward(self.bn.backward(self.act.backward(dy)))


class DownSampling(Module):
    """``skip(x) + conv2(conv1(x))``; halves H and W (rounding up), keeps channels.

    The skip branch is a 1x1 stride-2 convolution without padding so that both
    branches produce ``ceil(L / 2)`` outputs.
    """

    def __init__(self, channels, rng, dtype=np.float64):
        super().__init__()
        self.skip = Conv2d(channels, channels, 1, 2, 0, rng, dtype=dtype)
        self.conv1 = ConvBNAct(channels, 3, 2, 1, rng, dtype=dtype)
        self.conv2 = ConvBNAct(channels, 3, 1, 1, rng, dtype=dtype)

    def forward(self, x):
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ValueError(f"DownSampling needs H, W >= 2, got {x.shape[2:]}")
        a = self.skip.forward(x)
        b = self.conv2.forward(self.conv1.forward(x))
        if a.shape != b.shape:  # pragma: no cover - impossible for the fixed specs above
            raise AssertionError(f"branch shapes differ: {a.shape} vs {b.shape}")
        return a + b

    def backward(self, dy):
        return self.skip.backward(dy) + self.conv1.backward(self.conv2.backward(dy))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class MultiHeadAttention(Module):
    """K-head scaled dot-product attention over ``(B, L, d_model)``.

    ``q``, ``k``, ``v`` and ``out`` are ``Linear`` (or ``LoRALinear``) maps; head
    ``h`` uses feature slice ``h*d : (h+1)*d`` of the projections.
    """

    def __init__(self, d_model, n_heads, rng, causal=False, trainable=True, lora_rank=0,
                 dtype=np.float64, init_std=None, out_std=None):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.d_head = d_model // n_heads
        self.causal = causal

        def lin(std):
            return Linear(d_model, d_model, rng, trainable=trainable, dtype=dtype, init_std=std)

        q, k, v = lin(init_std), lin(init_std), lin(init_std)
        self.out = lin(out_std if out_std is not None else init_std)
        if lora_rank:
            q = LoRALinear(q, lora_rank, rng)
            v = LoRALinear(v, lora_rank, rng)
        self.q, self.k, self.v = q, k, v

    def _split(self, x):
        b, l, _ = x.shape
        return x.reshape(b, l, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, l, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, l, h * d)

    def forward(self, x):
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))
        scale = 1.0 / math.sqrt(self.d_head)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if self.causal:
            l = x.shape[1]
            scores = np.where(np.tril(np.ones((l, l), dtype=bool)), scores, -np.inf)
        att = softmax(scores, axis=-1)
        self._q, self._k, self._v, self._att, self._scale = q, k, v, att, scale
        return self.out.forward(self._merge(att @ v))

    def backward(self, dy):
        q, k, v, att = self._q, self._k, self._v, self._att
        do = self._split(self.out.backward(dy))
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * self._scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        return (self.q.backward(self._merge(dq)) + self.k.backward(self._merge(dk))
                + self.v.backward(self._merge(dv)))


class MLP(Module):
    def __init__(self, d_in, d_hidden, d_out, rng, trainable=True, dtype=np.float64,
                 init_std=None, out_std=None, zero_out=False):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, rng, trainable=trainable, dtype=dtype, init_std=init_std)
        self.act = GELU()
        self.fc2 = Linear(d_hidden, d_out, rng, trainable=trainable, dtype=dtype,
                          init_std=out_std if out_std is not None else init_std, zero=zero_out)

    def forward(self, x):
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class TransformerBlock(Module):
    """Pre-LN block ``x + MHA(LN(x))`` then ``x + MLP(LN(x))``; frozen except Q/V adapters."""

    def __init__(self, d_model, n_heads, rng, lora_rank=4, n_layers=1, dtype=np.float64,
                 causal=True):
        super().__init__()
        std = 0.02
        resid_std = 0.02 / math.sqrt(2 * n_layers)
        self.ln1 = LayerNorm(d_model, trainable=False, dtype=dtype)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, causal=causal, trainable=False,
                                       lora_rank=lora_rank, dtype=dtype, init_std=std,
                                       out_std=resid_std)
        self.ln2 = LayerNorm(d_model, trainable=False, dtype=dtype)
        self.mlp = MLP(d_model, 4 * d_model, d_model, rng, trainable=False, dtype=dtype,
                       init_std=std, out_std=resid_std)

    def forward(self, x):
        h = x + self.attn.forward(self.ln1.forward(x))
        return h + self.mlp.forward(self.ln2.forward(h))

    def backward(self, dy):
        dh = dy + self.ln2.backward(self.mlp.backward(dy))
        return dh + self.ln1.backward(self.attn.backward(dh))


def set_adapters_enabled(module: Module, enabled: bool) -> None:
    for mod in module.modules():
        if isinstance(mod, LoRALinear):
            mod.enabled = enabled
