"""Attention blocks, memory encoder/decoder and the factorized encoder.

All block functions accept optional row-segment offsets so that a batch of
independent memories can be processed as one stacked matrix; segment ``b``
of the query side only ever attends to segment ``b`` of the key side.  With
no offsets the inputs are a single instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigurationError, ContractError


@dataclass
class AttentionParams:
    wu: Tensor
    wk: Tensor
    wv: Tensor
    ff_w: Tensor
    ff_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    heads: int
    eps: float = 1e-5

    @property
    def d_x(self) -> int:
        return self.wu.rows

    @property
    def d_y(self) -> int:
        return self.wk.rows

    @property
    def d_k(self) -> int:
        return self.wu.cols

    @property
    def d_v(self) -> int:
        return self.wv.cols

    def validate(self) -> None:
        if self.wk.cols != self.d_k:
            raise ConfigurationError(f"key width {self.wk.cols} != query width {self.d_k}")
        if self.wv.rows != self.d_y:
            raise ConfigurationError("W^K and W^V must share the input width d_y")
        if self.d_v != self.d_x:
            raise ConfigurationError(f"residual needs d_v == d_x, got {self.d_v} vs {self.d_x}")
        if self.heads < 1 or self.d_k % self.heads or self.d_v % self.heads:
            raise ConfigurationError(
                f"d_k={self.d_k} and d_v={self.d_v} must be divisible by heads={self.heads}")
        if self.ff_w.shape != (self.d_v, self.d_v) or self.ff_b.shape != (1, self.d_v):
            raise ConfigurationError("feed-forward layer must map d_v -> d_v")


def init_attention_params(store: ParamStore, prefix: str, d_x: int, d_y: int, d_k: int,
                          heads: int, rng: np.random.Generator,
                          trainable: bool = True) -> AttentionParams:
    """Register one block's parameters under ``prefix`` (d_v is d_x)."""

    def w(name, fan_in, shape):
        return store.add(f"{prefix}.{name}", rng.normal(0.0, fan_in ** -0.5, size=shape),
                         trainable)

    p = AttentionParams(
        wu=w("wu", d_x, (d_x, d_k)),
        wk=w("wk", d_y, (d_y, d_k)),
        wv=w("wv", d_y, (d_y, d_x)),
        ff_w=w("ff_w", d_x, (d_x, d_x)),
        ff_b=store.add(f"{prefix}.ff_b", np.zeros((1, d_x)), trainable),
        ln1_g=store.add(f"{prefix}.ln1_g", np.ones((1, d_x)), trainable),
        ln1_b=store.add(f"{prefix}.ln1_b", np.zeros((1, d_x)), trainable),
        ln2_g=store.add(f"{prefix}.ln2_g", np.ones((1, d_x)), trainable),
        ln2_b=store.add(f"{prefix}.ln2_b", np.zeros((1, d_x)), trainable),
        heads=heads,
    )
    p.validate()
    return p


def attention_params_from_store(store: ParamStore, prefix: str, heads: int) -> AttentionParams:
    p = AttentionParams(*(store[f"{prefix}.{n}"] for n in
                          ("wu", "wk", "wv", "ff_w", "ff_b", "ln1_g", "ln1_b", "ln2_g", "ln2_b")),
                        heads=heads)
    p.validate()
    return p


def _single(n: int) -> np.ndarray:
    return np.array([0, n], dtype=np.int64)


def att(u: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(U K^T) V`` built from primitive graph ops (one head)."""
    return ad.matmul(ad.softmax_rows(ad.matmul(u, ad.transpose(k))), v)


def att_block(x: Tensor, y: Tensor, p: AttentionParams, x_off=None, y_off=None) -> Tensor:
    """``LN(FC(H) + H)`` with ``H = LN(Att(X W^U, Y W^K, Y W^V) + X)``."""
    if x.cols != p.d_x or y.cols != p.d_y:
        raise ConfigurationError(
            f"block expects inputs of width {p.d_x}/{p.d_y}, got {x.cols}/{y.cols}")
    x_off = _single(x.rows) if x_off is None else x_off
    y_off = _single(y.rows) if y_off is None else y_off
    a = ad.segment_attention(ad.matmul(x, p.wu), ad.matmul(y, p.wk), ad.matmul(y, p.wv),
                             x_off, y_off, p.heads)
    h = ad.layer_norm(ad.add(a, x), p.ln1_g, p.ln1_b, p.eps)
    ff = ad.relu(ad.linear(h, p.ff_w, p.ff_b))
    return ad.layer_norm(ad.add(ff, h), p.ln2_g, p.ln2_b, p.eps)


def encode(m: Tensor, p: AttentionParams, offsets=None) -> Tensor:
    """Self-attention over the memory; row ``i`` is element ``i`` in context."""
    if m.rows < 1:
        raise ContractError("encode: memory is empty")
    return att_block(m, m, p, offsets, offsets)


def decode(q: Tensor, c: Tensor, p: AttentionParams, c_off=None) -> Tensor:
    """One query row per memory segment attends over its encoded memory."""
    if c.rows < 1:
        raise ContractError("decode: context is empty")
    q_off = None if c_off is None else np.arange(len(c_off), dtype=np.int64)
    if c_off is None and q.rows != 1:
        raise ContractError(f"decode: expected a single query row, got {q.rows}")
    return att_block(q, c, p, q_off, c_off)


def att_fact(m: Tensor, centers: Tensor, p_inner: AttentionParams, p_outer: AttentionParams,
             m_off=None, c_off=None) -> Tensor:
    """Factorized encoder ``AttBlock(M, AttBlock(M~, M))``; cost O(|M| |M~|)."""
    if centers.rows < 1:
        raise ContractError("att_fact: center set is empty")
    summary = att_block(centers, m, p_inner, c_off, m_off)
    return att_block(m, summary, p_outer, m_off, c_off)
