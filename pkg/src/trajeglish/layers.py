"""Transformer building blocks over the autodiff layer.

Attention is plain scaled dot product in float64; masking is additive
(0 for visible, -1e30 for blocked), so a mask is just a constant bias
tensor. Blocks are pre-norm.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Module, Parameter, Tensor, softmax

MASK_OFF = -1e30


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, scale: float = 0.02):
    return rng.normal(0.0, scale, size=(n_in, n_out))


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True):
        self.w = Parameter(init_linear(rng, n_in, n_out))
        self.b = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        return out + self.b if self.b is not None else out

    def np_forward(self, x: np.ndarray) -> np.ndarray:
        out = x @ self.w.data
        return out + self.b.data if self.b is not None else out


class Embedding(Module):
    def __init__(self, rng, n_rows: int, dim: int, scale: float = 0.02):
        self.weight = Parameter(rng.normal(0.0, scale, size=(n_rows, dim)))

    def __call__(self, idx: np.ndarray) -> Tensor:
        return self.weight[np.asarray(idx, dtype=int)]

    def np_forward(self, idx) -> np.ndarray:
        return self.weight.data[np.asarray(idx, dtype=int)]


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.g = Parameter(np.ones(dim))
        self.b = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc**2).mean(axis=-1, keepdims=True)
        inv = (var + self.eps) ** -0.5
        return xc * inv * self.g + self.b

    def np_forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc**2).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + self.eps) * self.g.data + self.b.data


class MultiHeadAttention(Module):
    """Scaled-dot-product attention; query and memory sequences may differ."""

    def __init__(self, rng, dim: int, n_heads: int):
        if dim % n_heads:
            raise ValueError(f"hidden_dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def _split(self, t: Tensor, b: int, s: int) -> Tensor:
        # (B, S, C) -> (B, H, S, hd)
        return t.reshape(b, s, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, q_in: Tensor, kv_in: Tensor, bias: np.ndarray | None = None) -> Tensor:
        """bias broadcasts against (B, H, Sq, Sk); use MASK_OFF for blocked pairs."""
        b, sq, c = q_in.shape
        sk = kv_in.shape[1]
        q = self._split(self.wq(q_in), b, sq)
        k = self._split(self.wk(kv_in), b, sk)
        v = self._split(self.wv(kv_in), b, sk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        if bias is not None:
            scores = scores + Tensor(bias)
        att = softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, sq, c)
        return self.wo(out)

    # Imperative path for incremental decoding (single query row, cached K/V).
    def _np_split(self, a: np.ndarray) -> np.ndarray:
        # (S, C) -> (H, S, hd)
        return a.reshape(a.shape[0], self.n_heads, self.head_dim).transpose(1, 0, 2)

    def np_q(self, x: np.ndarray) -> np.ndarray:
        return self._np_split(self.wq.np_forward(x))

    def np_kv(self, x: np.ndarray):
        return self._np_split(self.wk.np_forward(x)), self._np_split(self.wv.np_forward(x))

    def np_attend(self, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                  bias: np.ndarray | None = None) -> np.ndarray:
        # q: (H, Sq, hd), k/v: (H, Sk, hd)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        out = att @ v  # (H, Sq, hd)
        out = out.transpose(1, 0, 2).reshape(q.shape[1], -1)
        return self.wo.np_forward(out)


class MLP(Module):
    def __init__(self, rng, dim: int, ratio: int = 4):
        self.fc1 = Linear(rng, dim, ratio * dim)
        self.fc2 = Linear(rng, ratio * dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())

    def np_forward(self, x: np.ndarray) -> np.ndarray:
        h = self.fc1.np_forward(x)
        c = np.sqrt(2.0 / np.pi)
        h = 0.5 * h * (1.0 + np.tanh(c * (h + 0.044715 * h**3)))
        return self.fc2.np_forward(h)


class EncoderBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng, dim: int, n_heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, n_heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, bias)
        return x + self.mlp(self.ln2(x))


class DecoderBlock(Module):
    """Pre-norm masked self-attention + cross-attention + MLP."""

    def __init__(self, rng, dim: int, n_heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(rng, dim, n_heads)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(rng, dim, n_heads)
        self.ln3 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio)

    def __call__(self, x: Tensor, memory: Tensor, self_bias: np.ndarray | None,
                 cross_bias: np.ndarray | None) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_bias)
        x = x + self.cross_attn(self.ln2(x), memory, cross_bias)
        return x + self.mlp(self.ln3(x))


def mask_to_bias(mask: np.ndarray) -> np.ndarray:
    """Boolean may-attend mask -> additive bias (0 visible, MASK_OFF blocked)."""
    return np.where(mask, 0.0, MASK_OFF)
