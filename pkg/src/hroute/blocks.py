"""Layer blocks of uniform width ``d`` and the routing wrapper.

Hidden blocks map ``(batch, seq, d) -> (batch, seq, d)`` so that any block's
output can be fed to any other block. :class:`WithConnection` attaches a
:class:`RoutingHead` to a block, which turns the block output into a
connection vector over the ``H + O`` routing targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tn
from .errors import ContractError, ShapeError
from .tensor import Tensor

MASK_VALUE = -1e9


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used by float64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


@dataclass(frozen=True)
class BlockConfig:
    d: int = 64
    ff: int = 128
    heads: int = 2
    seq: int = 64
    vocab: int = 64

    def __post_init__(self):
        for name in ("d", "ff", "heads", "seq", "vocab"):
            if getattr(self, name) <= 0:
                raise ContractError(f"BlockConfig.{name} must be positive")
        if self.d % self.heads:
            raise ContractError(f"d={self.d} not divisible by heads={self.heads}")


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return _param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def zeros(*shape: int) -> Tensor:
    return _param(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return _param(np.ones(shape))


def _check_hidden(x: Tensor, cfg: BlockConfig) -> None:
    if x.ndim != 3 or x.shape[-1] != cfg.d:
        raise ShapeError(f"expected (batch, seq, {cfg.d}) hidden state, got {x.shape}")
    if x.shape[1] > cfg.seq:
        raise ContractError(f"sequence length {x.shape[1]} exceeds configured maximum {cfg.seq}")


def causal_mask(s: int, dtype) -> np.ndarray:
    return np.triu(np.full((s, s), MASK_VALUE, dtype=dtype), k=1)


class TransformerBlock(Module):
    """Pre-norm multi-head self-attention followed by a position-wise MLP."""

    kind = "transformer"

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, causal: bool = True):
        self.cfg = cfg
        self.causal = causal
        d, ff = cfg.d, cfg.ff
        self.ln1_gain, self.ln1_bias = ones(d), zeros(d)
        self.wq, self.bq = xavier(rng, d, d), zeros(d)
        self.wk, self.bk = xavier(rng, d, d), zeros(d)
        self.wv, self.bv = xavier(rng, d, d), zeros(d)
        self.wo, self.bo = xavier(rng, d, d), zeros(d)
        self.ln2_gain, self.ln2_bias = ones(d), zeros(d)
        self.w1, self.b1 = xavier(rng, d, ff), zeros(ff)
        self.w2, self.b2 = xavier(rng, ff, d), zeros(d)

    def attention(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        nh = self.cfg.heads
        dh = d // nh
        h = tn.layernorm(x, self.ln1_gain, self.ln1_bias)

        def heads(w, bias):
            return ((h @ w) + bias).reshape(b, s, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.wq, self.bq), heads(self.wk, self.bk), heads(self.wv, self.bv)
        scores = tn.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
        if self.causal:
            scores = scores + causal_mask(s, x.dtype)
        att = tn.softmax(scores, axis=-1) @ v
        merged = att.transpose(0, 2, 1, 3).reshape(b, s, d)
        return merged @ self.wo + self.bo

    def mlp(self, x: Tensor) -> Tensor:
        h = tn.layernorm(x, self.ln2_gain, self.ln2_bias)
        return tn.relu(h @ self.w1 + self.b1) @ self.w2 + self.b2

    def __call__(self, x: Tensor) -> Tensor:
        _check_hidden(x, self.cfg)
        x = x + self.attention(x)
        return x + self.mlp(x)


class FeedForwardBlock(Module):
    """Position-wise two-layer MLP with a residual connection."""

    kind = "feedforward"

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, causal: bool = True):
        self.cfg = cfg
        d, ff = cfg.d, cfg.ff
        self.ln_gain, self.ln_bias = ones(d), zeros(d)
        self.w1, self.b1 = xavier(rng, d, ff), zeros(ff)
        self.w2, self.b2 = xavier(rng, ff, d), zeros(d)

    def __call__(self, x: Tensor) -> Tensor:
        _check_hidden(x, self.cfg)
        h = tn.layernorm(x, self.ln_gain, self.ln_bias)
        return x + tn.relu(h @ self.w1 + self.b1) @ self.w2 + self.b2


class InputEmbedding(Module):
    """Token ids ``(batch, seq)`` to ``(batch, seq, d)`` via token + position tables."""

    kind = "input-embedding"

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.tokens = _param(rng.normal(0.0, 0.1, size=(cfg.vocab, cfg.d)))
        self.positions = _param(rng.normal(0.0, 0.1, size=(cfg.seq, cfg.d)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError(f"token ids must be (batch, seq), got {ids.shape}")
        s = ids.shape[1]
        if s == 0 or s > self.cfg.seq:
            raise ContractError(f"sequence length {s} outside [1, {self.cfg.seq}]")
        return tn.embedding_lookup(self.tokens, ids) + self.positions[:s]


class OutputHead(Module):
    """Final layer norm and linear read-out.

    ``pooling="tokens"`` gives per-position logits ``(batch, seq, n_out)``;
    ``pooling="last"`` reads only the final position, giving ``(batch, n_out)``.
    """

    kind = "output-head"

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, n_out: int, pooling: str = "tokens"):
        if pooling not in ("tokens", "last"):
            raise ContractError(f"unknown pooling {pooling!r}")
        self.cfg = cfg
        self.pooling = pooling
        self.ln_gain, self.ln_bias = ones(cfg.d), zeros(cfg.d)
        # small read-out keeps initial logits near uniform
        self.w, self.b = _param(rng.normal(0.0, 0.02, size=(cfg.d, n_out))), zeros(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        _check_hidden(x, self.cfg)
        if self.pooling == "last":
            x = routing_signal_source(x)
        return tn.layernorm(x, self.ln_gain, self.ln_bias) @ self.w + self.b


HIDDEN_KINDS = {"transformer": TransformerBlock, "feedforward": FeedForwardBlock}


def routing_signal_source(h: Tensor) -> Tensor:
    """Hidden vector at the last sequence position, ``(batch, seq, d) -> (batch, d)``."""
    if h.ndim != 3:
        raise ShapeError(f"expected (batch, seq, d), got {h.shape}")
    if h.shape[1] == 0:
        raise ContractError("routing signal needs a non-empty sequence")
    return h[:, -1, :]


def sharpen(logits: Tensor, alpha: float) -> Tensor:
    """``sigmoid(logits / alpha)``."""
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    return tn.sigmoid(tn.div(logits, float(alpha)))


class RoutingHead(Module):
    """Affine map from the routing signal to ``L`` connection logits.

    Starts at zero so every connection begins at 0.5.
    """

    def __init__(self, d: int, n_targets: int):
        self.weight = zeros(d, n_targets)
        self.bias = zeros(n_targets)

    @property
    def n_targets(self) -> int:
        return self.bias.shape[0]

    def logits(self, h: Tensor) -> Tensor:
        return routing_signal_source(h) @ self.weight + self.bias

    def __call__(self, h: Tensor, alpha: float) -> Tensor:
        return sharpen(self.logits(h), alpha)


class WithConnection(Module):
    """A block plus its routing head; returns ``(output, connection vector)``."""

    def __init__(self, block: Module, head: RoutingHead):
        self.block = block
        self.head = head

    @property
    def kind(self) -> str:
        return self.block.kind

    def __call__(self, x, alpha: float) -> tuple[Tensor, Tensor]:
        if not alpha > 0:
            raise ContractError(f"alpha must be positive, got {alpha}")
        out = self.block(x)
        return out, self.head(out, alpha)


def with_connection_forward(block: Module, head: RoutingHead, x, alpha: float) -> tuple[Tensor, Tensor]:
    return WithConnection(block, head)(x, alpha)
