"""Dense, layer-norm and multi-head attention building blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from speechcare.errors import DomainError, ShapeError
from speechcare.nn import autodiff as ad
from speechcare.nn.autodiff import Parameter, Tensor

ACTIVATIONS = ("none", "tanh")


class Module:
    """Minimal parameter container.

    Parameters, sub-modules and lists of sub-modules assigned as attributes
    are discovered in assignment order, which keeps parameter naming and
    checkpoint layout stable.
    """

    def named_parameters(self, prefix: str = "", trainable_only: bool = False) -> Iterator[tuple[str, Parameter]]:
        frozen = getattr(self, "_frozen", ())
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                if not (trainable_only and attr in frozen):
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".", trainable_only)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.", trainable_only)
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self, trainable_only: bool = False) -> dict[str, Parameter]:
        """Name -> parameter; ``trainable_only`` drops fixed buffers such as normalizers."""
        params = {}
        for name, p in self.named_parameters(trainable_only=trainable_only):
            p.name = name
            params[name] = p
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ShapeError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.size != p.data.size:
                raise ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.reshape(p.shape).astype(p.dtype)


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, activation: str = "none",
                 dtype=np.float32, zero: bool = False):
        if activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {activation!r}")
        w = np.zeros((n_out, n_in), dtype=dtype) if zero else glorot(rng, n_out, n_in, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out, dtype=dtype))
        self.activation = activation

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x, self.weight.dtype)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"dense layer expects {self.n_in} input features, got {x.shape[-1]}")
        out = ad.matmul(x, ad.transpose(self.weight, (1, 0))) + self.bias
        if self.activation == "tanh":
            out = ad.tanh(out)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.scale = Parameter(np.ones(dim, dtype=dtype))
        self.shift = Parameter(np.zeros(dim, dtype=dtype))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.scale, self.shift, self._eps)


class AttentionBlock(Module):
    """Post-norm multi-head attention: ``norm(x + dropout(attn(x)))``."""

    def __init__(self, model_dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.1,
                 dtype=np.float32, kv_dim: int | None = None):
        if model_dim % heads:
            raise ShapeError(f"model_dim {model_dim} not divisible by {heads} heads")
        if not 0.0 <= dropout < 1.0:
            raise DomainError("dropout rate must lie in [0, 1)")
        kv_dim = model_dim if kv_dim is None else kv_dim
        self.query = Dense(model_dim, model_dim, rng, dtype=dtype)
        self.key = Dense(kv_dim, model_dim, rng, dtype=dtype)
        self.value = Dense(kv_dim, model_dim, rng, dtype=dtype)
        self.output = Dense(model_dim, model_dim, rng, dtype=dtype)
        self.norm = LayerNorm(model_dim, dtype=dtype)
        self._heads = heads
        self._dim = model_dim
        self._dropout = dropout
        self._last_weights: np.ndarray | None = None

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def model_dim(self) -> int:
        return self._dim

    @property
    def dropout_rate(self) -> float:
        return self._dropout

    @property
    def last_attention(self) -> np.ndarray | None:
        """Attention weights (..., heads, queries, keys) from the latest call."""
        return self._last_weights

    def _split(self, t: Tensor) -> Tensor:
        # (..., T, d) -> (..., H, T, d/H)
        lead = t.shape[:-2]
        n = t.shape[-2]
        hd = self._dim // self._heads
        t = ad.reshape(t, lead + (n, self._heads, hd))
        nd = len(lead)
        return ad.transpose(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    def attend(self, queries: Tensor, keys: Tensor, key_mask: np.ndarray | None = None,
               training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Attention of ``queries`` (..., Tq, d) over ``keys`` (..., Tk, kv_dim).

        ``key_mask`` (..., Tk) marks valid keys with True; masked keys get a
        large negative score so padded positions receive ~0 weight.
        """
        queries = ad.as_tensor(queries, self.query.weight.dtype)
        keys = ad.as_tensor(keys, self.query.weight.dtype)
        if queries.shape[-1] != self._dim:
            raise ShapeError(f"attention expects width {self._dim}, got {queries.shape[-1]}")
        q = self._split(self.query(queries))
        k = self._split(self.key(keys))
        v = self._split(self.value(keys))
        hd = self._dim // self._heads
        scores = ad.scale(ad.matmul(q, ad.transpose(k, _swap_last(k.data.ndim))), 1.0 / math.sqrt(hd))
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, bool), 0.0, -1e9).astype(scores.dtype)
            scores = scores + bias[..., None, None, :]
        weights = ad.softmax(scores, axis=-1)
        self._last_weights = weights.data
        ctx = ad.matmul(weights, v)
        nd = ctx.data.ndim
        ctx = ad.transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
        ctx = ad.reshape(ctx, ctx.shape[:-2] + (self._dim,))
        out = self.output(ctx)
        out = ad.dropout(out, self._dropout, rng, training)
        return self.norm(queries + out)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        return self.attend(x, x, key_mask, training, rng)


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


# --- array-level conveniences -------------------------------------------------

def dense_forward(layer: Dense, x: np.ndarray) -> np.ndarray:
    return layer(ad.as_tensor(np.asarray(x, dtype=layer.weight.dtype))).data


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector."""
    v = np.asarray(logits, dtype=np.float64)
    if v.size == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def layer_norm(vector, scale, shift, eps: float = 1e-5) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise DomainError("layer norm needs a vector of length >= 2")
    centered = v - v.mean()
    return centered / np.sqrt((centered ** 2).mean() + eps) * np.asarray(scale) + np.asarray(shift)


def multi_head_attention(block: AttentionBlock, sequence: np.ndarray, training: bool = False,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    seq = np.asarray(sequence, dtype=block.query.weight.dtype)
    if seq.ndim != 2 or seq.shape[1] != block.model_dim:
        raise ShapeError(f"sequence must be (T, {block.model_dim}), got {seq.shape}")
    return block(ad.Tensor(seq), training=training, rng=rng).data
