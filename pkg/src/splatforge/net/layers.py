"""Elementwise ops, batch normalization, and residual blocks."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .autodiff import Parameter, Tensor
from .sparse import KERNEL_VOLUME, KernelMap, sparse_conv


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward_fn(grad: np.ndarray) -> None:
        x.accumulate(np.where(mask, grad, 0))

    return Tensor(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError("add requires identical shapes")
    out = a.data + b.data

    def backward_fn(grad: np.ndarray) -> None:
        a.accumulate(grad)
        b.accumulate(grad)

    return Tensor(out, (a, b), backward_fn)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Channel-wise concatenation of two per-cell value tensors."""
    if len(a.data) != len(b.data):
        raise DimensionError("concat requires the same cell count")
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(grad: np.ndarray) -> None:
        a.accumulate(grad[:, :ca])
        b.accumulate(grad[:, ca:])

    return Tensor(out, (a, b), backward_fn)


class BatchNorm:
    """Batch normalization over active cells (per channel).

    Train mode normalizes with batch statistics and updates running stats
    with momentum 0.1; eval mode uses the running stats.  Variance for
    normalization is biased; the running variance stores the unbiased value.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32, name: str = "bn"):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        gamma, beta = self.gamma, self.beta
        data = x.data
        n = len(data)
        if train and n > 0:
            mean = data.mean(axis=0)
            var = data.var(axis=0)
            m = self.momentum
            unbiased = var * (n / max(n - 1, 1))
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        else:
            mean = self.running_mean.astype(data.dtype)
            var = self.running_var.astype(data.dtype)
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (data - mean) * invstd
        out = gamma.data * xhat + beta.data

        use_batch_stats = train and n > 0

        def backward_fn(grad: np.ndarray) -> None:
            gamma.accumulate((grad * xhat).sum(axis=0))
            beta.accumulate(grad.sum(axis=0))
            if use_batch_stats:
                gmean = grad.mean(axis=0)
                gxhat_mean = (grad * xhat).mean(axis=0)
                dx = gamma.data * invstd * (grad - gmean - xhat * gxhat_mean)
            else:
                dx = gamma.data * invstd * grad
            x.accumulate(dx.astype(data.dtype))

        return Tensor(out.astype(data.dtype), (x, gamma, beta), backward_fn)


def init_conv_weight(rng: np.random.Generator, c_in: int, c_out: int,
                     dtype, name: str, zero: bool = False) -> tuple[Parameter, Parameter]:
    """Uniform fan-in initialized (27,Cin,Cout) kernel plus bias."""
    if zero:
        w = np.zeros((KERNEL_VOLUME, c_in, c_out), dtype=dtype)
        b = np.zeros(c_out, dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(KERNEL_VOLUME * c_in)
        w = rng.uniform(-bound, bound, size=(KERNEL_VOLUME, c_in, c_out)).astype(dtype)
        b = rng.uniform(-bound, bound, size=c_out).astype(dtype)
    return Parameter(w, f"{name}.weight"), Parameter(b, f"{name}.bias")


class ConvBlock:
    """conv3 -> BN -> ReLU."""

    def __init__(self, rng, c_in: int, c_out: int, dtype, name: str):
        self.weight, self.bias = init_conv_weight(rng, c_in, c_out, dtype, name)
        self.bn = BatchNorm(c_out, dtype=dtype, name=f"{name}.bn")

    def parameters(self):
        return [self.weight, self.bias] + self.bn.parameters()

    def __call__(self, x: Tensor, kmap: KernelMap, train: bool) -> Tensor:
        return relu(self.bn(sparse_conv(x, self.weight, self.bias, kmap), train))


class ResBlock:
    """conv3 -> BN -> ReLU -> conv3 -> BN, identity skip (1x1 conv when the
    channel count changes), final ReLU."""

    def __init__(self, rng, c_in: int, c_out: int, dtype, name: str):
        self.conv1_w, self.conv1_b = init_conv_weight(rng, c_in, c_out, dtype, f"{name}.conv1")
        self.bn1 = BatchNorm(c_out, dtype=dtype, name=f"{name}.bn1")
        self.conv2_w, self.conv2_b = init_conv_weight(rng, c_out, c_out, dtype, f"{name}.conv2")
        self.bn2 = BatchNorm(c_out, dtype=dtype, name=f"{name}.bn2")
        if c_in != c_out:
            bound = 1.0 / np.sqrt(c_in)
            self.skip_w = Parameter(
                rng.uniform(-bound, bound, size=(c_in, c_out)).astype(dtype), f"{name}.skip")
        else:
            self.skip_w = None

    def parameters(self):
        params = [self.conv1_w, self.conv1_b] + self.bn1.parameters()
        params += [self.conv2_w, self.conv2_b] + self.bn2.parameters()
        if self.skip_w is not None:
            params.append(self.skip_w)
        return params

    def _skip(self, x: Tensor) -> Tensor:
        if self.skip_w is None:
            return x
        w = self.skip_w
        out = x.data @ w.data

        def backward_fn(grad: np.ndarray) -> None:
            x.accumulate(grad @ w.data.T)
            w.accumulate(x.data.T @ grad)

        return Tensor(out, (x, w), backward_fn)

    def __call__(self, x: Tensor, kmap: KernelMap, train: bool) -> Tensor:
        h = relu(self.bn1(sparse_conv(x, self.conv1_w, self.conv1_b, kmap), train))
        h = self.bn2(sparse_conv(h, self.conv2_w, self.conv2_b, kmap), train)
        return relu(add(h, self._skip(x)))
