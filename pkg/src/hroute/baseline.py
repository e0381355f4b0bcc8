"""Plain sequential stack used as a comparator for the routed model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .blocks import HIDDEN_KINDS, BlockConfig, InputEmbedding, Module, OutputHead
from .errors import ContractError


@dataclass
class StackedConfig:
    layers: int = 2
    d: int = 64
    ff: int = 128
    heads: int = 2
    seq: int = 64
    vocab: int = 64
    n_out: int | None = None
    pooling: str = "tokens"
    causal: bool = True
    kinds: list[str] = field(default_factory=list)
    I: int = field(default=1, init=False)  # single token stream, like the routed model's I=1

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError("a stacked model needs at least one layer")
        if not self.kinds:
            self.kinds = ["transformer"] * self.layers
        if len(self.kinds) != self.layers or any(k not in HIDDEN_KINDS for k in self.kinds):
            raise ContractError(f"bad block kinds {self.kinds} for {self.layers} layers")

    @property
    def block_config(self) -> BlockConfig:
        return BlockConfig(self.d, self.ff, self.heads, self.seq, self.vocab)


class StackedModel(Module):
    """Embedding, ``layers`` blocks applied once each in order, then a read-out.

    Built from the same block classes as :class:`~hroute.hmodel.HModel`;
    with ``layers == H`` it has the same blocks minus routing heads and
    iteration embeddings.
    """

    def __init__(self, cfg: StackedConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        bc = cfg.block_config
        self.embed = InputEmbedding(bc, rng)
        self.blocks = [HIDDEN_KINDS[k](bc, rng, causal=cfg.causal) for k in cfg.kinds]
        self.head = OutputHead(bc, rng, cfg.n_out or cfg.vocab, cfg.pooling)

    def __call__(self, x, mode: str = "train", trace=None) -> list[tn.Tensor]:
        if len(x) != 1:
            raise ContractError(f"expected 1 input, got {len(x)}")
        if mode == "infer":
            with tn.no_grad():
                return [self._run(x[0])]
        return [self._run(x[0])]

    def _run(self, ids) -> tn.Tensor:
        h = self.embed(ids)
        for blk in self.blocks:
            h = blk(h)
        return self.head(h)
