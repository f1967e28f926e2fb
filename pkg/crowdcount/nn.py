"""Layers shared by the tokenizer, backbone and heads."""

import math

from typing import Optional, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import (Module, Parameter, Tensor, conv2d, conv_transpose2d, gelu, layer_norm,
                     matmul, relu, reshape, softmax, transpose)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                 std: float = 0.02):
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim), std))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear expects last dim {self.in_dim}, got {x.shape}")
        vector = x.ndim == 1
        if vector:
            x = reshape(x, (1, self.in_dim))
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return reshape(out, (self.out_dim,)) if vector else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    """Two-layer perceptron; ``activation`` is "gelu" or "relu"."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator,
                 activation: str = "gelu"):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        h = gelu(h) if self.activation == "gelu" else relu(h)
        return self.fc2(h)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, out_dim: Optional[int] = None):
        """Multi-head self-attention over a [n, dim] token matrix.

        Args:
            dim: Input token dimension
            heads: Number of heads; out_dim must be divisible by it
            rng: Initialisation generator
            out_dim: Query/key/value dimension (default: dim)
        """

        out_dim = out_dim or dim
        if out_dim % heads:
            raise ShapeError(f"attention dim {out_dim} not divisible by {heads} heads")
        self.wq = Parameter(trunc_normal(rng, (dim, out_dim)))
        self.wk = Parameter(trunc_normal(rng, (dim, out_dim)))
        self.wv = Parameter(trunc_normal(rng, (dim, out_dim)))
        self.proj = Linear(out_dim, out_dim, rng)
        self.heads = heads
        self.out_dim = out_dim
        self.scale = (out_dim // heads) ** -0.5

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return transpose(reshape(x, (n, self.heads, self.out_dim // self.heads)), (1, 0, 2))

    def attend(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Returns (projected output, attention weights [heads, n, n], values [n, out_dim])."""

        n = x.shape[0]
        v = matmul(x, self.wv)
        q, k = self._split(matmul(x, self.wq)), self._split(matmul(x, self.wk))
        weights = softmax(matmul(q, transpose(k, (0, 2, 1))) * self.scale, axis=-1)
        mixed = reshape(transpose(matmul(weights, self._split(v)), (1, 0, 2)), (n, self.out_dim))
        return self.proj(mixed), weights, v

    def forward(self, x: Tensor) -> Tensor:
        return self.attend(x)[0]


class EncoderLayer(Module):
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, max(1, int(round(dim * mlp_ratio))), dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0):
        std = math.sqrt(2.0 / (in_ch * k * k))
        self.weight = Parameter(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)))
        self.bias = Parameter(np.zeros(out_ch))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 2,
                 padding: int = 1):
        std = math.sqrt(2.0 / (in_ch * k * k))
        self.weight = Parameter(rng.normal(0.0, std, size=(in_ch, out_ch, k, k)))
        self.bias = Parameter(np.zeros(out_ch))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)
