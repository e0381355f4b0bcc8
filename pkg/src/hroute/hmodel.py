"""The H-model: hidden blocks that route their states to each other over T iterations.

Slot layout of a state bundle is ``(batch, H + O, seq, d)``: hidden layers
own slots ``0..H-1`` and the trailing ``O`` slots feed the output layers.

Forward pass:

1. every input layer emits ``(substate, con)``; the weighted sum over
   sources fills the bundle, which is divided per slot by
   ``max(1, sum of incoming weights)``. The output slots are added to ``outs``.
2. for each iteration ``j``, hidden layer ``i`` reads slot ``i``, emits
   ``(substate + iter_emb[j], con)`` with temperature ``alpha0 * alpha_rate**j``,
   and the bundle is rebuilt and normalized the same way; output slots are
   again added to ``outs``.
3. ``outs / max(T, 1)`` goes through each output layer once.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .blocks import (
    HIDDEN_KINDS,
    BlockConfig,
    InputEmbedding,
    Module,
    OutputHead,
    RoutingHead,
    WithConnection,
)
from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor

MAX_ITERATIONS = 64


@dataclass
class HModelConfig:
    I: int = 1
    H: int = 2
    O: int = 1
    T: int = 2
    d: int = 64
    ff: int = 128
    heads: int = 2
    seq: int = 64
    vocab: int = 64
    n_out: int | None = None  # output-head width; defaults to vocab
    pooling: str = "tokens"
    causal: bool = True
    alpha0: float = 1.0
    alpha_rate: float = 1.0
    topk: int | None = None
    hidden_kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.I < 1 or self.H < 0 or self.O < 1:
            raise ContractError("need I >= 1, H >= 0, O >= 1")
        if not 0 <= self.T <= MAX_ITERATIONS:
            raise ContractError(f"T must lie in [0, {MAX_ITERATIONS}], got {self.T}")
        if not self.alpha0 > 0 or not self.alpha_rate > 0:
            raise ContractError("alpha0 and alpha_rate must be positive")
        if self.topk is not None and not 1 <= self.topk <= self.L:
            raise ContractError(f"topk must lie in [1, {self.L}], got {self.topk}")
        if not self.hidden_kinds:
            self.hidden_kinds = ["transformer"] * self.H
        if len(self.hidden_kinds) != self.H:
            raise ContractError(f"{len(self.hidden_kinds)} hidden kinds given for H={self.H}")
        for k in self.hidden_kinds:
            if k not in HIDDEN_KINDS:
                raise ContractError(f"unknown hidden block kind {k!r}")
        BlockConfig(self.d, self.ff, self.heads, self.seq, self.vocab)

    @property
    def L(self) -> int:
        return self.H + self.O

    @property
    def block_config(self) -> BlockConfig:
        return BlockConfig(self.d, self.ff, self.heads, self.seq, self.vocab)

    def architecture(self) -> dict:
        """Fields that determine parameter shapes (runtime knobs excluded)."""
        out = asdict(self)
        for k in ("alpha0", "alpha_rate", "topk"):
            out.pop(k)
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def alpha_at(cfg: HModelConfig, j: int) -> float:
    """Sharpening temperature for iteration ``j``."""
    if not 0 <= j < max(cfg.T, 1):
        raise ContractError(f"iteration {j} outside [0, {cfg.T})")
    return cfg.alpha0 * cfg.alpha_rate**j


@dataclass
class StateBundle:
    slots: Tensor  # (batch, L, seq, d)
    weight_sum: Tensor  # (batch, L)


def aggregate(
    contributions: Sequence[tuple[Tensor, Tensor]], empty_shape=None, dtype=np.float32
) -> StateBundle:
    """Slot ``j`` = sum_i con_i[:, j] * substate_i; also returns sum_i con_i[:, j].

    ``empty_shape`` = ``(batch, L, seq, d)`` is needed only when there are no
    contributions, in which case a zero bundle is returned.
    """
    if not contributions:
        if empty_shape is None:
            raise ContractError("empty aggregation needs empty_shape=(batch, L, seq, d)")
        b, L, s, d = empty_shape
        return StateBundle(
            Tensor(np.zeros((b, L, s, d)), dtype=dtype), Tensor(np.zeros((b, L)), dtype=dtype)
        )
    sub_shapes = {sub.shape for sub, _ in contributions}
    con_shapes = {con.shape for _, con in contributions}
    if len(sub_shapes) != 1 or len(con_shapes) != 1:
        raise ShapeError(f"mixed contribution shapes: {sorted(sub_shapes)} / {sorted(con_shapes)}")
    b, s, d = next(iter(sub_shapes))
    (cb, L) = next(iter(con_shapes))
    if cb != b:
        raise ShapeError(f"con batch {cb} != substate batch {b}")
    n = len(contributions)
    subs = tn.stack([sub for sub, _ in contributions], axis=1).reshape(b, n, s * d)
    cons = tn.stack([con for _, con in contributions], axis=1)  # (b, n, L)
    slots = (cons.transpose(0, 2, 1) @ subs).reshape(b, L, s, d)
    return StateBundle(slots, cons.sum(axis=1))


def norm_by_contributors(bundle: StateBundle) -> StateBundle:
    """Divide each slot by ``max(1, incoming weight sum)``."""
    b, L = bundle.weight_sum.shape
    divisor = tn.clamp_min(bundle.weight_sum, 1.0).reshape(b, L, 1, 1)
    return StateBundle(bundle.slots / divisor, bundle.weight_sum)


def sparsify_topk(con: Tensor, k: int) -> Tensor:
    """Keep the ``k`` largest entries per row (lowest index wins ties), zero the rest."""
    L = con.shape[-1]
    if not 1 <= k <= L:
        raise ContractError(f"k must lie in [1, {L}], got {k}")
    order = np.argsort(-con.data, axis=-1, kind="stable")
    mask = np.zeros(con.shape, dtype=con.dtype)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return con * mask


class HModel(Module):
    """Input, hidden and output layers plus the iteration-embedding table."""

    def __init__(self, cfg: HModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        bc = cfg.block_config
        L = cfg.L
        self.inputs = [
            WithConnection(InputEmbedding(bc, rng), RoutingHead(bc.d, L)) for _ in range(cfg.I)
        ]
        self.hidden = [
            WithConnection(HIDDEN_KINDS[kind](bc, rng, causal=cfg.causal), RoutingHead(bc.d, L))
            for kind in cfg.hidden_kinds
        ]
        n_out = cfg.n_out or cfg.vocab
        self.outputs = [OutputHead(bc, rng, n_out, cfg.pooling) for _ in range(cfg.O)]
        self.iter_emb = tn.Tensor(rng.normal(0.0, 0.02, size=(max(cfg.T, 1), bc.d)), requires_grad=True)

    def __call__(self, x, mode: str = "train", trace=None, plan=None) -> list[Tensor]:
        return forward(self, x, mode=mode, trace=trace, plan=plan)


def _guard(stage: int, role: str, index: int, fn, *args):
    try:
        return fn(*args)
    except NumericError as exc:
        raise NumericError(f"non-finite activation at stage {stage}, {role} layer {index}: {exc}") from exc


def _check_plan(cfg: HModelConfig, plan) -> list[np.ndarray]:
    if len(plan) != 1 + cfg.T:
        raise ContractError(f"plan has {len(plan)} stages, expected {1 + cfg.T}")
    out = []
    for t, stage in enumerate(plan):
        arr = np.asarray(stage, dtype=np.float64)
        rows = cfg.I if t == 0 else cfg.H
        if arr.shape != (rows, cfg.L):
            raise ContractError(f"plan stage {t} has shape {arr.shape}, expected {(rows, cfg.L)}")
        if np.any(arr < 0) or np.any(arr > 1):
            raise ContractError(f"plan stage {t} has entries outside [0, 1]")
        out.append(arr)
    return out


@dataclass
class ForwardResult:
    outputs: list[Tensor]
    state: StateBundle  # bundle after the last stage
    outs: Tensor  # accumulated output slots after division by max(T, 1)


def forward(model: HModel, x: Sequence, mode: str = "train", trace=None, plan=None) -> list[Tensor]:
    """Run the iterative forward pass; returns one tensor per output layer.

    ``mode="infer"`` disables graph recording and applies top-k
    sparsification when ``cfg.topk`` is set. ``trace`` receives every
    connection vector actually used. ``plan`` replaces the routing heads
    with fixed connection weights (see :func:`force_routing`).
    """
    return run(model, x, mode, trace, plan).outputs


def run(model: HModel, x: Sequence, mode: str = "train", trace=None, plan=None) -> ForwardResult:
    """:func:`forward`, also returning the final bundle and accumulated outputs."""
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = model.cfg
    if len(x) != cfg.I:
        raise ContractError(f"expected {cfg.I} inputs, got {len(x)}")
    if plan is not None:
        plan = _check_plan(cfg, plan)
    if mode == "infer":
        with tn.no_grad():
            return _forward(model, x, mode, trace, plan)
    return _forward(model, x, mode, trace, plan)


def _forward(model: HModel, x, mode, trace, plan) -> ForwardResult:
    cfg = model.cfg
    H, T = cfg.H, cfg.T
    topk = cfg.topk if mode == "infer" else None

    def route(con: Tensor, stage: int, source: int) -> Tensor:
        if plan is not None:
            fixed = plan[stage][source].astype(con.dtype)
            con = Tensor(np.broadcast_to(fixed, con.shape).copy(), dtype=con.dtype)
        if topk is not None:
            con = sparsify_topk(con, topk)
        if trace is not None:
            trace.record(stage, source, con.data)
        return con

    contribs = []
    for i, layer in enumerate(model.inputs):
        sub, con = _guard(0, "input", i, layer, x[i], cfg.alpha0)
        contribs.append((sub, route(con, 0, i)))
    state = _guard(0, "aggregate", 0, lambda: norm_by_contributors(aggregate(contribs)))
    outs = state.slots[:, H:]

    for j in range(T):
        alpha = alpha_at(cfg, j)
        contribs = []
        for i, layer in enumerate(model.hidden):
            sub, con = _guard(j + 1, "hidden", i, layer, state.slots[:, i], alpha)
            sub = sub + model.iter_emb[j]
            contribs.append((sub, route(con, j + 1, i)))
        b, _, s, d = state.slots.shape
        state = _guard(
            j + 1, "aggregate", 0,
            lambda: norm_by_contributors(aggregate(contribs, (b, cfg.L, s, d), outs.dtype)),
        )
        outs = outs + state.slots[:, H:]

    outs = tn.scale(outs, 1.0 / max(T, 1))
    finals = [_guard(T + 1, "output", o, head, outs[:, o]) for o, head in enumerate(model.outputs)]
    return ForwardResult(finals, state, outs)


class ForcedRouting:
    """A view of a model whose connection weights come from a fixed plan."""

    def __init__(self, model: HModel, plan):
        self.model = model
        self.plan = _check_plan(model.cfg, plan)
        self.cfg = model.cfg

    def __call__(self, x, mode: str = "train", trace=None) -> list[Tensor]:
        return forward(self.model, x, mode=mode, trace=trace, plan=self.plan)


def force_routing(model: HModel, plan) -> ForcedRouting:
    """``plan[t]`` has shape ``(I, L)`` for ``t = 0`` and ``(H, L)`` afterwards."""
    return ForcedRouting(model, plan)


def chain_plan(cfg: HModelConfig) -> list[np.ndarray]:
    """Plan reproducing a sequential stack: input 0 -> h0 -> h1 -> ... -> output 0.

    Needs ``T == H``; hidden layer ``j`` is the only active source at
    iteration ``j``.
    """
    if cfg.T != cfg.H or cfg.H < 1:
        raise ContractError(f"chain plan needs T == H >= 1 (got T={cfg.T}, H={cfg.H})")
    plan = [np.zeros((cfg.I, cfg.L))]
    plan[0][0, 0] = 1.0
    for j in range(cfg.T):
        stage = np.zeros((cfg.H, cfg.L))
        stage[j, j + 1] = 1.0  # j + 1 == H lands on the first output slot
        plan.append(stage)
    return plan
