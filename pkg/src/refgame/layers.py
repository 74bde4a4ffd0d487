"""Parameterized building blocks: linear map, vanilla RNN cell, embedding
table, their initialization, and the Adam optimizer.

Weights are drawn uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)] and biases
start at zero; embedding rows use fan_in equal to the embedding dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RngStream


class NonFiniteGradient(RuntimeError):
    """An optimizer update saw a NaN/Inf gradient and was rejected."""


def _uniform_init(rng: RngStream, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    if fan_in <= 0 or any(d <= 0 for d in shape):
        raise ValueError(f"invalid dimensions {shape} (fan_in={fan_in})")
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear:
    """Affine map x -> x W^T + b with weight stored as (out, in)."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(weight)
        self.bias = Tensor(bias)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: RngStream) -> "Linear":
        return cls(_uniform_init(rng, (out_dim, in_dim), in_dim), np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward for evaluation paths."""
        return x @ self.weight.data.T + self.bias.data

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class RnnCell:
    """Vanilla RNN: h' = tanh(W_ih x + b_ih + W_hh h + b_hh)."""

    def __init__(self, weight_ih, weight_hh, bias_ih, bias_hh):
        self.weight_ih = Tensor(weight_ih)
        self.weight_hh = Tensor(weight_hh)
        self.bias_ih = Tensor(bias_ih)
        self.bias_hh = Tensor(bias_hh)

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, rng: RngStream) -> "RnnCell":
        return cls(
            _uniform_init(rng.child("ih"), (hidden_dim, in_dim), in_dim),
            _uniform_init(rng.child("hh"), (hidden_dim, hidden_dim), hidden_dim),
            np.zeros(hidden_dim),
            np.zeros(hidden_dim),
        )

    @property
    def hidden_dim(self) -> int:
        return self.weight_hh.data.shape[0]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        pre = ad.add(
            ad.add(ad.matmul(x, ad.transpose(self.weight_ih)), self.bias_ih),
            ad.add(ad.matmul(h, ad.transpose(self.weight_hh)), self.bias_hh),
        )
        return ad.tanh(pre)

    def step_from_zero(self, x: Tensor) -> Tensor:
        """First step from an all-zero hidden state: the W_hh term vanishes."""
        pre = ad.add(ad.add(ad.matmul(x, ad.transpose(self.weight_ih)), self.bias_ih), self.bias_hh)
        return ad.tanh(pre)

    def step_apply(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        return np.tanh(
            x @ self.weight_ih.data.T + self.bias_ih.data
            + h @ self.weight_hh.data.T + self.bias_hh.data
        )

    def step_apply_from_zero(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.weight_ih.data.T + self.bias_ih.data + self.bias_hh.data)

    def params(self) -> list[Tensor]:
        return [self.weight_ih, self.weight_hh, self.bias_ih, self.bias_hh]


class EmbeddingTable:
    """Lookup table (vocab, embed_dim); accepts hard indices or probability rows.

    A probability-vector lookup is the matrix product p @ table, so looking up
    a one-hot row equals the corresponding table row exactly and a convex
    combination of rows comes out as the same convex combination.
    """

    def __init__(self, table: np.ndarray):
        self.table = Tensor(table)

    @classmethod
    def init(cls, vocab: int, embed_dim: int, rng: RngStream) -> "EmbeddingTable":
        return cls(_uniform_init(rng, (vocab, embed_dim), embed_dim))

    @property
    def vocab(self) -> int:
        return self.table.data.shape[0]

    def lookup(self, indices) -> Tensor:
        return ad.select_rows(self.table, indices)

    def lookup_soft(self, probs: Tensor) -> Tensor:
        return ad.matmul(probs, self.table)

    def lookup_apply(self, indices) -> np.ndarray:
        return self.table.data[np.asarray(indices, dtype=np.int64)]

    def params(self) -> list[Tensor]:
        return [self.table]


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one parameter set."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scratch: list[np.ndarray] = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def for_params(cls, params: list[Tensor], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(params: list[Tensor], grads: list[np.ndarray] | None, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    ``grads=None`` reads each parameter's current ``.grad``. A non-finite
    gradient rejects the whole update (before touching any moment) so the
    caller can flag the run.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("params, grads and moments must align")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient; update rejected")
    if not state.scratch:
        state.scratch = [np.empty_like(p.data) for p in params]

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for p, g, m, v, s in zip(params, grads, state.m, state.v, state.scratch):
        # m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2, all allocation-free
        np.multiply(m, b1, out=m)
        np.multiply(g, 1.0 - b1, out=s)
        np.add(m, s, out=m)
        np.multiply(v, b2, out=v)
        np.multiply(g, g, out=s)
        np.multiply(s, 1.0 - b2, out=s)
        np.add(v, s, out=v)
        # p <- p - lr * (m / bias1) / (sqrt(v / bias2) + eps)
        np.divide(v, bias2, out=s)
        np.sqrt(s, out=s)
        np.add(s, state.eps, out=s)
        np.divide(m, s, out=s)
        np.multiply(s, lr / bias1, out=s)
        np.subtract(p.data, s, out=p.data)
