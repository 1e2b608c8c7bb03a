"""Decoder-only Transformer used for the algorithmic tasks.

Pre-norm blocks (RMSNorm -> causal RoPE attention -> residual, RMSNorm ->
SiLU FFN -> residual), a final RMSNorm and a linear head read at the last
position.  There are no bias terms.  Weights are stored input-major, so a
projection is ``x @ W`` with ``W`` of shape ``[d_in, d_out]``.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .activations import VARIANTS
from .errors import ConfigError
from .tensor import Tensor, make_rng

# stream ids for make_rng
INIT_STREAM = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    seq_len: int = 4
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 512
    dropout_rate: float = 0.1
    rope_base: float = 10000.0
    rmsnorm_eps: float = 1e-5
    # applies to the training loss only; attention always uses softmax
    softmax_variant: str = "softmax"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dimension {self.head_dim} must be even for RoPE")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.softmax_variant not in VARIANTS:
            raise ConfigError(f"softmax_variant must be one of {VARIANTS}")
        for name in ("vocab_size", "seq_len", "n_layers", "d_ffn"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class ParamSet(dict):
    """Name -> Tensor map of trainable parameters, in creation order."""

    def copy(self) -> "ParamSet":
        return ParamSet({k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.items()})

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.items()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.values())

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "ParamSet":
        return load_checkpoint(path)


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # The +/-2 sigma cut shrinks the variance by ~0.774; widen the underlying
    # normal so the sampled entries end up with standard deviation ``std``.
    trunc_var = 0.7737413035499232
    sigma = std / np.sqrt(trunc_var)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * sigma


def init_params(config: ModelConfig, seed: int, init_std: float = 0.02) -> ParamSet:
    rng = make_rng(seed, INIT_STREAM)
    d, f = config.d_model, config.d_ffn
    params = ParamSet()

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True, name=name)

    # variance 1/sqrt(d_model), matching the variance notation used for the weights
    add("embedding", rng.standard_normal((config.vocab_size, d)) * d ** -0.25)
    for i in range(config.n_layers):
        add(f"layers.{i}.attn_norm.gain", np.ones(d))
        for w in ("W_q", "W_k", "W_v", "W_o"):
            add(f"layers.{i}.attn.{w}", _truncated_normal(rng, (d, d), init_std))
        add(f"layers.{i}.ffn_norm.gain", np.ones(d))
        add(f"layers.{i}.ffn.W_1", _truncated_normal(rng, (d, f), init_std))
        add(f"layers.{i}.ffn.W_2", _truncated_normal(rng, (f, d), init_std))
    add("final_norm.gain", np.ones(d))
    add("W_out", _truncated_normal(rng, (d, config.vocab_size), init_std))
    return params


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    return T.rmsnorm(x, gain, eps)


def rope_rotate(x: Tensor, base: float = 10000.0) -> Tensor:
    """Rotate ``[..., seq, n_heads, head_dim]`` query/key pairs by position."""
    return T.rope(x, base)


def causal_mask(seq_len: int) -> np.ndarray:
    return np.triu(np.full((seq_len, seq_len), -np.inf), k=1)


def attention_block(x: Tensor, params: ParamSet, config: ModelConfig, layer: int,
                    train_mode: bool = False, rng: Optional[np.random.Generator] = None,
                    return_weights: bool = False):
    """``x + dropout(MHA(rmsnorm(x)) @ W_o)`` for ``x`` of shape ``[batch, seq, d_model]``."""
    p = f"layers.{layer}."
    b, s, d = x.shape
    h, hd = config.n_heads, config.head_dim
    xn = T.rmsnorm(x, params[p + "attn_norm.gain"], config.rmsnorm_eps)

    def heads(w):
        return (xn @ params[p + "attn." + w]).reshape(b, s, h, hd)

    q = T.rope(heads("W_q"), config.rope_base).transpose(0, 2, 1, 3)
    k = T.rope(heads("W_k"), config.rope_base).transpose(0, 2, 1, 3)
    v = heads("W_v").transpose(0, 2, 1, 3)
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(hd))
    weights = T.softmax(scores, mask=causal_mask(s))
    ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, s, d)
    out = ctx @ params[p + "attn.W_o"]
    out = T.dropout(out, config.dropout_rate, rng, train_mode)
    y = x + out
    return (y, weights.data) if return_weights else y


def ffn_block(x: Tensor, params: ParamSet, config: ModelConfig, layer: int,
              train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    p = f"layers.{layer}."
    xn = T.rmsnorm(x, params[p + "ffn_norm.gain"], config.rmsnorm_eps)
    hidden = T.silu(xn @ params[p + "ffn.W_1"])
    out = T.dropout(hidden @ params[p + "ffn.W_2"], config.dropout_rate, rng, train_mode)
    return x + out


def forward(tokens, params: ParamSet, config: ModelConfig, train_mode: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Class logits ``[batch, vocab]`` read at the final sequence position."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise IndexError(f"token out of range [0, {config.vocab_size})")
    x = T.embedding(params["embedding"], tokens)
    for i in range(config.n_layers):
        x = attention_block(x, params, config, i, train_mode, rng)
        x = ffn_block(x, params, config, i, train_mode, rng)
    last = x[:, -1, :]
    last = T.rmsnorm(last, params["final_norm.gain"], config.rmsnorm_eps)
    return last @ params["W_out"]


def predict(logits) -> np.ndarray:
    """Argmax over classes; ties resolve to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


# Checkpoint format, little-endian throughout:
#   magic b"GMCK", uint32 record count, then per record
#   uint32 name length, utf-8 name, uint32 rank, rank x uint64 dims,
#   prod(dims) float64 values in row-major order.
_MAGIC = b"GMCK"


def save_checkpoint(params: ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamSet:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    pos = 4
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = ParamSet()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    return params
