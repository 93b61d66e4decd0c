"""Differentiable building blocks of the audio transformer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

MASK_VALUE = -1e9


class Module:
    """Minimal parameter container.

    Parameters are discovered from attributes in definition order: tensors
    requiring grad, nested modules, and lists of modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        self.W = ad.parameter(glorot_uniform(rng, n_in, n_out, dtype), name="W")
        if bias:
            self.b = ad.parameter(np.zeros(n_out, dtype=dtype), name="b")
        else:
            self.b = None

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: Dense, x: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` applied at every leading position."""
    if x.shape[-1] != layer.n_in:
        raise DimensionError(f"dense: input last dim {x.shape[-1]} != layer input {layer.n_in}")
    if x.ndim == 1:
        y = ad.matmul(ad.reshape(x, (1, layer.n_in)), layer.W)
        y = ad.reshape(y, (layer.n_out,))
    else:
        y = ad.matmul(x, layer.W)
    return y if layer.b is None else ad.add(y, layer.b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    E = x.shape[-1]
    if gamma.shape != (E,) or beta.shape != (E,):
        raise DimensionError(f"layer_norm: feature dim {E} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        flat_g = g.reshape(-1, E)
        dgamma = (flat_g * xhat.reshape(-1, E)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return ad.make_op(out, (x, gamma, beta), "layer_norm", bw)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-6):
        self.gamma = ad.parameter(np.ones(dim, dtype=dtype), name="gamma")
        self.beta = ad.parameter(np.zeros(dim, dtype=dtype), name="beta")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


def positional_encoding(T: int, E: int, dtype=np.float64) -> Tensor:
    """Sinusoidal encoding: sin on even columns, cos on odd columns."""
    if E % 2:
        raise ContractError(f"positional encoding needs an even embedding size, got {E}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    two_i = np.arange(0, E, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / E)
    pe = np.empty((T, E), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe.astype(dtype))


def causal_mask(T: int) -> np.ndarray:
    """Boolean [T, T]; entry (i, j) is true iff position i may attend to j."""
    return np.tril(np.ones((T, T), dtype=bool))


class AttentionHead(Module):
    def __init__(self, embed_dim: int, head_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.W_Q = ad.parameter(glorot_uniform(rng, embed_dim, head_dim, dtype), name="W_Q")
        self.W_K = ad.parameter(glorot_uniform(rng, embed_dim, head_dim, dtype), name="W_K")
        self.W_V = ad.parameter(glorot_uniform(rng, embed_dim, head_dim, dtype), name="W_V")

    @property
    def head_dim(self) -> int:
        return self.W_Q.shape[1]


class MultiHeadAttention(Module):
    """Causal multi-head scaled dot-product attention without biases.

    ``head_dim`` defaults to ``embed_dim // num_heads``; a wider head makes
    the output projection ``[num_heads * head_dim, embed_dim]``.
    """

    def __init__(
        self,
        embed_dim: int,
        num_heads: int,
        rng: np.random.Generator,
        head_dim: int | None = None,
        max_len: int = 512,
        dtype=np.float64,
    ):
        if head_dim is None:
            if embed_dim % num_heads:
                raise ContractError(f"embed_dim {embed_dim} not divisible by num_heads {num_heads}")
            head_dim = embed_dim // num_heads
        self.embed_dim = embed_dim
        self.heads = [AttentionHead(embed_dim, head_dim, rng, dtype) for _ in range(num_heads)]
        self.W_o = ad.parameter(glorot_uniform(rng, num_heads * head_dim, embed_dim, dtype), name="W_o")
        self.causal_mask = causal_mask(max_len)

    def __call__(self, x: Tensor) -> Tensor:
        return causal_attention(self, x)


def causal_attention(mha: MultiHeadAttention, x: Tensor, weights_out: list | None = None) -> Tensor:
    """Attention over ``x[..., T, E]`` where position i only sees j <= i.

    If ``weights_out`` is a list, each head's attention matrix is appended
    to it as a numpy array (``[..., T, T]``).
    """
    if x.ndim < 2 or x.shape[-1] != mha.embed_dim:
        raise DimensionError(f"attention: expected [..., T, {mha.embed_dim}], got {x.shape}")
    T = x.shape[-2]
    if T > mha.causal_mask.shape[0]:
        raise DimensionError(f"attention: sequence length {T} exceeds mask size {mha.causal_mask.shape[0]}")
    future = ~mha.causal_mask[:T, :T]
    h, d = len(mha.heads), mha.heads[0].head_dim
    lead = x.shape[:-2]

    def project(attr: str) -> Tensor:
        # heads stacked along the output axis, then split to [..., h, T, d]
        w = ad.concat([getattr(head, attr) for head in mha.heads], axis=1)
        y = ad.reshape(ad.matmul(x, w), lead + (T, h, d))
        return ad.swapaxes(y, -3, -2)

    q, k, v = project("W_Q"), project("W_K"), project("W_V")
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    weights = ad.softmax(ad.mask_fill(scores, future, MASK_VALUE), axis=-1)
    if weights_out is not None:
        weights_out.extend(np.moveaxis(weights.data, -3, 0))
    heads = ad.reshape(ad.swapaxes(ad.matmul(weights, v), -3, -2), lead + (T, h * d))
    return ad.matmul(heads, mha.W_o)


class FeedForward(Module):
    """Position-wise MLP ``E -> hidden -> ... -> E`` with ReLU between layers."""

    def __init__(self, embed_dim: int, hidden: int, rng: np.random.Generator, n_layers: int = 2, dtype=np.float64):
        if n_layers < 2:
            raise ContractError("feed-forward needs at least 2 layers")
        dims = [embed_dim] + [hidden] * (n_layers - 1) + [embed_dim]
        self.layers = [Dense(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        return self.layers[-1](x)


class TransformerBlock(Module):
    def __init__(
        self,
        embed_dim: int,
        num_heads: int,
        ff_dim: int,
        rng: np.random.Generator,
        head_dim: int | None = None,
        ff_layers: int = 2,
        max_len: int = 512,
        dtype=np.float64,
    ):
        self.attention = MultiHeadAttention(embed_dim, num_heads, rng, head_dim, max_len, dtype)
        self.norm1 = LayerNorm(embed_dim, dtype)
        self.ff = FeedForward(embed_dim, ff_dim, rng, ff_layers, dtype)
        self.norm2 = LayerNorm(embed_dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return transformer_block(self, x)


def transformer_block(block: TransformerBlock, x: Tensor) -> Tensor:
    y = block.norm1(ad.add(x, block.attention(x)))
    return block.norm2(ad.add(y, block.ff(y)))


def time_average_pool(x: Tensor, factor: int) -> Tensor:
    """Average non-overlapping windows of ``factor`` steps along time (axis -2)."""
    T, E = x.shape[-2], x.shape[-1]
    if factor < 1 or T % factor:
        raise ContractError(f"pool factor {factor} does not divide time length {T}")
    lead = x.shape[:-2]
    windows = ad.reshape(x, lead + (T // factor, factor, E))
    return ad.reduce(windows, -2, "mean")


@dataclass(frozen=True)
class MultiScaleSpec:
    """Per-embedding-dimension averaging window along time."""

    windows: tuple[int, ...]

    def validate(self, T: int, E: int) -> None:
        if len(self.windows) != E:
            raise ContractError(f"multi-scale spec has {len(self.windows)} windows for {E} dims")
        for e, w in enumerate(self.windows):
            if w < 1 or w & (w - 1) or T % w:
                raise ContractError(f"window {w} at dim {e} is not a power of two dividing T={T}")

    @property
    def unchanged(self) -> int:
        return sum(1 for w in self.windows if w == 1)


def _largest_pow2_divisor(T: int, cap: int) -> int:
    w = 1
    while w * 2 <= cap and T % (w * 2) == 0:
        w *= 2
    return w


def make_multiscale_spec(T: int, E: int) -> MultiScaleSpec:
    """Geometric split: half the dims keep window 1, a quarter get 2, and so on.

    Windows are clamped to the largest power of two dividing ``T``; the very
    last dimension takes the largest admissible window.
    """
    windows: list[int] = []
    remaining, w = E, 1
    while remaining > 1:
        n = (remaining + 1) // 2
        windows += [_largest_pow2_divisor(T, w)] * n
        remaining -= n
        w *= 2
    if remaining:
        windows.append(_largest_pow2_divisor(T, T))
    return MultiScaleSpec(tuple(windows))


def _pairwise_mean(block: np.ndarray) -> np.ndarray:
    # halving tree over a power-of-two window axis (-2); (c + c) / 2 == c, so re-averaging is exact
    while block.shape[-2] > 1:
        block = (block[..., 0::2, :] + block[..., 1::2, :]) * 0.5
    return block


def _window_average(arr: np.ndarray, spec: MultiScaleSpec) -> np.ndarray:
    out = arr.copy()
    T = arr.shape[-2]
    windows = np.asarray(spec.windows)
    lead = arr.shape[:-2]
    for w in np.unique(windows):
        if w == 1:
            continue
        dims = np.nonzero(windows == w)[0]
        block = arr[..., dims].reshape(lead + (T // w, w, len(dims)))
        means = _pairwise_mean(block)
        out[..., dims] = np.broadcast_to(means, block.shape).reshape(lead + (T, len(dims)))
    return out


def multi_scale_layer(x: Tensor, spec: MultiScaleSpec) -> Tensor:
    """Replace each window of each dim by its mean, keeping the time length.

    Block averaging is a symmetric projection, so the backward pass applies
    the same averaging to the incoming gradient.
    """
    T, E = x.shape[-2], x.shape[-1]
    spec.validate(T, E)
    out = _window_average(x.data, spec)
    return ad.make_op(out, (x,), "multi_scale", lambda g: (_window_average(g, spec),))
