"""Neural building blocks on top of the autodiff engine.

Linear layers, layer normalization, multi-head attention and pre-norm
transformer encoder/decoder layers. Weight matrices initialize uniformly
in [-1/sqrt(fan_in), +1/sqrt(fan_in)]; embeddings from normal(0, 0.02);
biases and layer-norm shifts at zero. Dropout is deliberately absent so
forward passes are pure functions of (parameters, inputs).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def embedding_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear:
    def __init__(self, params: Parameters, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, bias: bool = True):
        self.w = params.create(f"{name}.w", uniform_init(rng, in_dim, (in_dim, out_dim)))
        self.b = params.create(f"{name}.b", np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out


class LayerNorm:
    def __init__(self, params: Parameters, name: str, dim: int):
        self.g = params.create(f"{name}.g", np.ones(dim))
        self.b = params.create(f"{name}.b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b)


class MultiHeadAttention:
    """Scaled dot-product attention over (batch, tokens, dim) tensors."""

    def __init__(self, params: Parameters, name: str, dim: int, heads: int,
                 rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(params, f"{name}.q", dim, dim, rng)
        # no key bias: softmax is invariant to a per-row score shift, so a
        # key bias would be an inert parameter (and a degenerate direction
        # for finite-difference gradient checks)
        self.wk = Linear(params, f"{name}.k", dim, dim, rng, bias=False)
        self.wv = Linear(params, f"{name}.v", dim, dim, rng)
        self.wo = Linear(params, f"{name}.o", dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor, n_tokens: int, batch: int) -> Tensor:
        x = ad.reshape(x, (batch, n_tokens, self.heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor,
                 mask: np.ndarray | None = None, keep_weights: bool = False,
                 memory_keys: Tensor | None = None) -> Tensor:
        """``mask`` is an additive bias on attention logits, broadcastable to
        (batch, heads, n_q, n_kv); use large negatives to hide keys.
        ``memory_keys`` feeds the key projection when keys should carry
        extra content (e.g. positional encodings) that values do not."""
        b, n_q, _ = query.shape
        n_kv = memory.shape[1]
        q = self._split(self.wq(query), n_q, b)
        k = self._split(self.wk(memory if memory_keys is None else memory_keys), n_kv, b)
        v = self._split(self.wv(memory), n_kv, b)
        scores = (q @ ad.swap_last2(k)) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + ad.constant(mask)
        weights = ad.softmax(scores, axis=-1)
        if keep_weights:
            self.last_weights = weights.data.copy()
        out = weights @ v
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n_q, self.dim))
        return self.wo(out)


class FeedForward:
    def __init__(self, params: Parameters, name: str, dim: int, hidden: int,
                 rng: np.random.Generator):
        self.fc1 = Linear(params, f"{name}.fc1", dim, hidden, rng)
        self.fc2 = Linear(params, f"{name}.fc2", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class EncoderLayer:
    """Pre-norm transformer encoder layer: x + attn(LN(x)), x + ffn(LN(x))."""

    def __init__(self, params: Parameters, name: str, dim: int, heads: int,
                 ffn_dim: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(params, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(params, f"{name}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(params, f"{name}.ln2", dim)
        self.ffn = FeedForward(params, f"{name}.ffn", dim, ffn_dim, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask=mask)
        return x + self.ffn(self.ln2(x))


class DecoderLayer:
    """Pre-norm decoder layer: query self-attention, cross-attention to
    memory, feed-forward."""

    def __init__(self, params: Parameters, name: str, dim: int, heads: int,
                 ffn_dim: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(params, f"{name}.ln1", dim)
        self.self_attn = MultiHeadAttention(params, f"{name}.self", dim, heads, rng)
        self.ln2 = LayerNorm(params, f"{name}.ln2", dim)
        self.cross_attn = MultiHeadAttention(params, f"{name}.cross", dim, heads, rng)
        self.ln3 = LayerNorm(params, f"{name}.ln3", dim)
        self.ffn = FeedForward(params, f"{name}.ffn", dim, ffn_dim, rng)

    def __call__(self, x: Tensor, memory: Tensor,
                 memory_keys: Tensor | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.ln2(x), memory, memory_keys=memory_keys)
        return x + self.ffn(self.ln3(x))


class TransformerEncoder:
    def __init__(self, params: Parameters, name: str, dim: int, heads: int,
                 ffn_dim: int, layers: int, rng: np.random.Generator):
        self.layers = [EncoderLayer(params, f"{name}.{i}", dim, heads, ffn_dim, rng)
                       for i in range(layers)]
        self.ln_out = LayerNorm(params, f"{name}.ln_out", dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask=mask)
        return self.ln_out(x)


class TransformerDecoder:
    def __init__(self, params: Parameters, name: str, dim: int, heads: int,
                 ffn_dim: int, layers: int, rng: np.random.Generator):
        self.layers = [DecoderLayer(params, f"{name}.{i}", dim, heads, ffn_dim, rng)
                       for i in range(layers)]
        self.ln_out = LayerNorm(params, f"{name}.ln_out", dim)

    def __call__(self, x: Tensor, memory: Tensor,
                 memory_keys: Tensor | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory, memory_keys=memory_keys)
        return self.ln_out(x)


class MLP:
    """Stack of linear layers with GELU between them (no output activation)."""

    def __init__(self, params: Parameters, name: str, dims: list[int],
                 rng: np.random.Generator):
        self.layers = [Linear(params, f"{name}.{i}", dims[i], dims[i + 1], rng)
                       for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ad.gelu(x)
        return x
