"""Differentiable NHWC primitives with hand-written backward passes.

Every activation is a dense ``(n, h, w, c)`` numpy array. Layers cache
what their backward pass needs during ``forward`` and accumulate
parameter gradients into ``Parameter.grad`` during ``backward``; there is
no general autodiff, only the operations the document-cleanup networks
and the perceptual-loss extractor need.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ConfigurationError

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


def _check_nhwc(x, name="input"):
    if x.ndim != 4:
        raise ConfigurationError(f"{name} must be rank-4 (n, h, w, c), got shape {x.shape}")
    if x.size == 0:
        raise ConfigurationError(f"{name} has a zero-size dimension: {x.shape}")


# ---------------------------------------------------------------- functional


def conv2d(x, kernel, bias=None):
    """3x3, stride-1, zero "same"-padded convolution.

    ``kernel`` has shape ``(3, 3, c_in, c_out)``; ``bias`` is ``(c_out,)`` or None.
    """
    x = np.asarray(x)
    _check_nhwc(x)
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise ConfigurationError(f"kernel must be 3x3xCinxCout, got {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise ConfigurationError(
            f"channel mismatch: input has {x.shape[3]} channels, kernel expects {kernel.shape[2]}"
        )
    k = kernel.astype(x.dtype, copy=False)
    b = None if bias is None else bias.astype(x.dtype, copy=False)
    return kernels.conv3x3(x, k, b)


def conv2d_backward(x, kernel, dy, input_grad=True, param_grad=True, bias=False):
    """Gradients of :func:`conv2d` given upstream ``dy``.

    Returns ``(dx, dkernel, dbias)``; entries that were not requested are None.
    """
    dy = dy.astype(x.dtype, copy=False)
    dx = dk = db = None
    if input_grad:
        dx = kernels.conv3x3(dy, kernels.flip_transpose(kernel.astype(x.dtype, copy=False)))
    if param_grad:
        dk = kernels.conv3x3_kernel_grad(x, dy)
        if bias:
            db = dy.sum(axis=(0, 1, 2))
    return dx, dk, db


def _bn_forward(x, gamma, beta, running_mean, running_var, training, eps, momentum):
    _check_nhwc(x)
    c = x.shape[3]
    if c != gamma.shape[0]:
        raise ConfigurationError(f"batch norm expects {gamma.shape[0]} channels, input has {c}")
    x2 = x.reshape(-1, c)
    if training:
        mean, var = kernels.bn_stats(x2)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma * inv_std
    shift = beta - mean * scale
    y = kernels.bn_apply(x2, scale, shift).reshape(x.shape)
    return y, (x, mean, inv_std, training)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               eps=BN_EPSILON, momentum=BN_MOMENTUM):
    """Per-channel batch normalization over ``(n, h, w)``.

    In training mode the batch statistics are used and the running
    statistics are updated in place; otherwise the running statistics are used.
    """
    return _bn_forward(x, gamma, beta, running_mean, running_var, training, eps, momentum)[0]


def batch_norm_backward(cache, gamma, dy):
    """Returns ``(dx, dgamma, dbeta)``."""
    x, mean, inv_std, training = cache
    c = x.shape[3]
    x2, dy2 = x.reshape(-1, c), dy.reshape(-1, c)
    sdy, sdyx = kernels.bn_grad_sums(dy2, x2, mean, inv_std)
    a = gamma * inv_std
    if training:
        m = x2.shape[0]
        b = -a * sdy / m
        cc = -a * inv_std * sdyx / m
    else:
        b = cc = np.zeros_like(a)
    dx = kernels.bn_input_grad(dy2, x2, mean, a, b, cc).reshape(x.shape)
    return dx, sdyx.astype(dy.dtype), sdy.astype(dy.dtype)


def relu6(x):
    return np.clip(x, 0.0, 6.0)


def relu6_backward(x, dy):
    return dy * ((x > 0) & (x < 6))


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    return dy * (x > 0)


def sigmoid(x):
    """Logistic function; stable for any finite input."""
    return expit(x)


def sigmoid_backward(y, dy):
    return dy * y * (1.0 - y)


def max_pool2x2(x):
    """2x2/stride-2 max pooling; odd trailing rows/columns are dropped."""
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ConfigurationError(f"cannot 2x2-pool a {h}x{w} map")
    win = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg


def max_pool2x2_backward(x_shape, arg, dy):
    n, h, w, c = x_shape
    ho, wo = dy.shape[1], dy.shape[2]
    onehot = np.zeros((n, ho, wo, c, 4), dtype=dy.dtype)
    np.put_along_axis(onehot, arg[..., None], dy[..., None], axis=-1)
    onehot = onehot.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :2 * ho, :2 * wo, :] = onehot.reshape(n, 2 * ho, 2 * wo, c)
    return dx


# ------------------------------------------------------------------- modules


class Parameter:
    """A trainable tensor and its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype})"


class Module:
    """Container with named parameters, buffers and child modules."""

    def __init__(self):
        self.training = True
        self._params = OrderedDict()
        self._buffers = OrderedDict()
        self._children = OrderedDict()

    def add_param(self, name, value):
        p = Parameter(value)
        self._params[name] = p
        return p

    def add_buffer(self, name, value):
        self._buffers[name] = value
        return value

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}/")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}/")

    def state_dict(self):
        """All parameters and buffers by slash-joined name."""
        state = OrderedDict((k, p.value) for k, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            p.value[...] = state[name]
        for name, b in self.named_buffers():
            b[...] = state[name]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0

    def train(self, mode=True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast parameters and buffers in place (e.g. float64 for gradient checks)."""
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for child in self._walk():
            for name in child._buffers:
                child._buffers[name] = child._buffers[name].astype(dtype)
        return self

    def _walk(self):
        yield self
        for child in self._children.values():
            yield from child._walk()

    def __call__(self, x):
        return self.forward(x)


def he_normal(rng, shape, dtype=np.float32):
    fan_in = shape[0] * shape[1] * shape[2]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    """3x3 same convolution; bias only when requested."""

    def __init__(self, c_in, c_out, bias=False, rng=None, dtype=np.float32, trainable=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.trainable = trainable
        self.kernel = self.add_param("kernel", he_normal(rng, (3, 3, c_in, c_out), dtype))
        self.bias = self.add_param("bias", np.zeros(c_out, dtype)) if bias else None
        self._x = None

    def forward(self, x):
        self._x = x
        return conv2d(x, self.kernel.value, None if self.bias is None else self.bias.value)

    def backward(self, dy, input_grad=True):
        dx, dk, db = conv2d_backward(
            self._x, self.kernel.value, dy,
            input_grad=input_grad, param_grad=self.trainable, bias=self.bias is not None,
        )
        if self.trainable:
            self.kernel.grad += dk
            if self.bias is not None:
                self.bias.grad += db
        self._x = None
        return dx


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32, eps=BN_EPSILON, momentum=BN_MOMENTUM):
        super().__init__()
        if eps <= 0:
            raise ConfigurationError("batch norm epsilon must be positive")
        self.eps, self.momentum = eps, momentum
        self.gamma = self.add_param("gamma", np.ones(channels, dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype))
        self.add_buffer("running_mean", np.zeros(channels, dtype))
        self.add_buffer("running_var", np.ones(channels, dtype))
        self._cache = None

    def forward(self, x):
        y, self._cache = _bn_forward(
            x, self.gamma.value, self.beta.value,
            self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.eps, self.momentum,
        )
        return y

    def backward(self, dy):
        dx, dg, db = batch_norm_backward(self._cache, self.gamma.value, dy)
        self.gamma.grad += dg
        self.beta.grad += db
        self._cache = None
        return dx


class ConvBNReLU6(Module):
    """conv (no bias) -> batch norm -> ReLU6."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(c_in, c_out, rng=rng, dtype=dtype))
        self.bn = self.add_child("bn", BatchNorm(c_out, dtype=dtype))
        self._pre = None

    def forward(self, x):
        self._pre = self.bn(self.conv(x))
        return relu6(self._pre)

    def backward(self, dy, input_grad=True):
        d = relu6_backward(self._pre, dy)
        self._pre = None
        return self.conv.backward(self.bn.backward(d), input_grad=input_grad)


def gradients(module, x, upstream, wrt=None):
    """Parameter gradients of ``sum(upstream * module(x))``.

    Returns ``{name: grad}`` for every parameter (or just ``wrt`` names);
    parameters the output does not depend on get exact zeros.
    """
    module.zero_grad()
    module.forward(x)
    module.backward(upstream)
    grads = {name: p.grad.copy() for name, p in module.named_parameters()}
    if wrt is None:
        return grads
    missing = [n for n in wrt if n not in grads]
    if missing:
        raise ConfigurationError(f"unknown parameters: {missing}")
    return {n: grads[n] for n in wrt}
