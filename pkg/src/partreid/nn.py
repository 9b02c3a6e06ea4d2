"""Layers and optimization on top of the autograd primitives.

Parameters live in named slots on modules; ``state_dict`` flattens them with
dotted paths, which is also the naming scheme used by the checkpoint
container. Parameter updates happen only between steps, by the single
optimizer that owns them; eval-mode forward passes over a frozen module are
safe to run concurrently.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._modules: dict[str, Module] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[name] = value
        object.__setattr__(self, name, value)

    def register_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, dtype=value.dtype)
        self._params[name] = t
        return t

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for mname, m in self._modules.items():
            yield from m.named_parameters(prefix + mname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for mname, m in self._modules.items():
            yield from m.named_buffers(prefix + mname + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own_params = dict(self.named_parameters())
        own_bufs: dict[str, tuple[Module, str]] = {}
        for m, prefix in self._walk():
            for key in m._buffers:
                own_bufs[prefix + key] = (m, key)
        missing = (set(own_params) | set(own_bufs)) - set(state)
        extra = set(state) - (set(own_params) | set(own_bufs))
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            if name in own_params:
                p = own_params[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for '{name}': "
                                     f"{p.data.shape} vs {arr.shape}")
                p.data = arr.astype(p.data.dtype).reshape(p.data.shape)
            elif name in own_bufs:
                m, key = own_bufs[name]
                m._buffers[key] = arr.astype(m._buffers[key].dtype).reshape(
                    m._buffers[key].shape)

    def _walk(self, prefix: str = ""):
        yield self, prefix
        for mname, m in self._modules.items():
            yield from m._walk(prefix + mname + ".")

    def train(self, flag: bool = True):
        for m, _ in self._walk():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _kaiming(rng: np.random.Generator, shape, fan_in, dtype):
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.w = self.register_param(
            "w", _kaiming(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.b = self.register_param("b", np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return ag.conv2d(x, self.w, self.b, self.stride, self.padding, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.w = self.register_param(
            "w", _kaiming(rng, (cin, cout, k, k), cin * k * k, dtype))
        self.b = self.register_param("b", np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return ag.conv_transpose2d(x, self.w, self.b, self.stride, self.padding)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.w = self.register_param("w", _kaiming(rng, (cout, cin), cin, dtype))
        self.b = self.register_param("b", np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return ag.affine(x, self.w, self.b)


class BatchNorm(Module):
    """Batch normalization over axis 1 of (N,C) or (N,C,H,W) inputs.

    Train mode normalizes with batch statistics and updates running stats;
    eval mode is a per-channel affine map using the running stats, hence
    deterministic.
    """

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = self.register_param("gamma", np.ones(c, dtype=dtype))
        self.beta = self.register_param("beta", np.zeros(c, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.zeros(c, dtype=dtype))

    def forward(self, x):
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        gamma = ag.reshape(self.gamma, bshape)
        beta = ag.reshape(self.beta, bshape)
        if self.training:
            mu = ag.tmean(x, axis=axes, keepdims=True)
            xc = ag.sub(x, mu)
            var = ag.tmean(ag.mul(xc, xc), axis=axes, keepdims=True)
            inv = ag.div(xc, ag.sqrt(var + self.eps))
            m = self.momentum
            self._buffers["running_mean"] = (
                (1 - m) * self._buffers["running_mean"] + m * mu.data.reshape(-1))
            self._buffers["running_var"] = (
                (1 - m) * self._buffers["running_var"] + m * var.data.reshape(-1))
            return ag.add(ag.mul(inv, gamma), beta)
        rm = self._buffers["running_mean"].reshape(bshape)
        rv = self._buffers["running_var"].reshape(bshape)
        scale = Tensor(1.0 / np.sqrt(rv + self.eps), dtype=x.dtype)
        shift = Tensor(rm, dtype=x.dtype)
        return ag.add(ag.mul(ag.mul(ag.sub(x, shift), scale), gamma), beta)


class Sequential(Module):
    def __init__(self, *mods: Module):
        super().__init__()
        self.mods = list(mods)
        for i, m in enumerate(mods):
            self._modules[str(i)] = m

    def forward(self, x):
        for m in self.mods:
            x = m(x)
        return x


class ConvBnRelu(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, dilation=1,
                 dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride, padding, dilation,
                           bias=False, dtype=dtype)
        self.bn = BatchNorm(cout, dtype=dtype)

    def forward(self, x):
        return ag.relu(self.bn(self.conv(x)))


class ResidualBlock(Module):
    """conv3-bn-relu-conv3-bn plus a (projected) skip, then relu."""

    def __init__(self, cin, cout, rng, stride=1, dtype=np.float32):
        super().__init__()
        self.c1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1,
                         bias=False, dtype=dtype)
        self.bn1 = BatchNorm(cout, dtype=dtype)
        self.c2 = Conv2d(cout, cout, 3, rng, stride=1, padding=1,
                         bias=False, dtype=dtype)
        self.bn2 = BatchNorm(cout, dtype=dtype)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride, bias=False,
                               dtype=dtype)
            self.bn_proj = BatchNorm(cout, dtype=dtype)

    def forward(self, x):
        y = ag.relu(self.bn1(self.c1(x)))
        y = self.bn2(self.c2(y))
        skip = x if self.proj is None else self.bn_proj(self.proj(x))
        return ag.relu(ag.add(y, skip))


class Adam:
    """First-order adaptive-moment optimizer with bias correction."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1 - self.b1 ** self.t
        bc2 = 1 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            p.data -= lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)


def cross_entropy(logits: Tensor, labels: np.ndarray, num_classes: int,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy over the batch, optionally label-smoothed."""
    if logits.ndim != 2 or logits.shape[1] != num_classes:
        raise ag.ShapeError(f"cross_entropy: logits {logits.shape} "
                            f"vs {num_classes} classes")
    n = logits.shape[0]
    target = np.full((n, num_classes), label_smoothing / num_classes,
                     dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    logp = ag.log_softmax(logits, axis=1)
    return ag.neg(ag.tmean(ag.tsum(ag.mul(logp, Tensor(target, dtype=logits.dtype)),
                                   axis=1)))


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = ag.sub(a, b)
    return ag.tmean(ag.mul(d, d))
