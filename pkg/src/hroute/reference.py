"""Plain-numpy forward passes, independent of the autodiff tensor code.

These read parameter arrays out of the model and recompute in float64 with
direct numpy expressions. They exist to check the routed forward pass
against a conventional sequentially stacked network.
"""

from __future__ import annotations

import numpy as np


def _ln(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _p(t):
    return np.asarray(t.data, dtype=np.float64)


def transformer_block(block, x: np.ndarray) -> np.ndarray:
    b, s, d = x.shape
    nh = block.cfg.heads
    dh = d // nh
    h = _ln(x, _p(block.ln1_gain), _p(block.ln1_bias))
    out = np.zeros_like(x)
    for head in range(nh):
        cols = slice(head * dh, (head + 1) * dh)
        q = h @ _p(block.wq)[:, cols] + _p(block.bq)[cols]
        k = h @ _p(block.wk)[:, cols] + _p(block.bk)[cols]
        v = h @ _p(block.wv)[:, cols] + _p(block.bv)[cols]
        scores = np.einsum("bqe,bke->bqk", q, k) / np.sqrt(dh)
        if block.causal:
            scores = np.where(np.tril(np.ones((s, s), dtype=bool)), scores, -np.inf)
        att = np.einsum("bqk,bke->bqe", _softmax(scores), v)
        out += att @ _p(block.wo)[cols, :]
    x = x + out + _p(block.bo)
    h = _ln(x, _p(block.ln2_gain), _p(block.ln2_bias))
    return x + np.maximum(h @ _p(block.w1) + _p(block.b1), 0.0) @ _p(block.w2) + _p(block.b2)


def feedforward_block(block, x: np.ndarray) -> np.ndarray:
    h = _ln(x, _p(block.ln_gain), _p(block.ln_bias))
    return x + np.maximum(h @ _p(block.w1) + _p(block.b1), 0.0) @ _p(block.w2) + _p(block.b2)


def hidden_block(block, x: np.ndarray) -> np.ndarray:
    if block.kind == "transformer":
        return transformer_block(block, x)
    if block.kind == "feedforward":
        return feedforward_block(block, x)
    raise ValueError(f"no reference for block kind {block.kind!r}")


def embed(emb, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    return _p(emb.tokens)[ids] + _p(emb.positions)[: ids.shape[1]]


def output_head(head, x: np.ndarray) -> np.ndarray:
    if head.pooling == "last":
        x = x[:, -1, :]
    return _ln(x, _p(head.ln_gain), _p(head.ln_bias)) @ _p(head.w) + _p(head.b)


def routing_logits(head, h: np.ndarray) -> np.ndarray:
    return h[:, -1, :] @ _p(head.weight) + _p(head.bias)


def stacked_forward(model, ids: np.ndarray, add_iter_emb: bool = True, scale_out: bool = True) -> np.ndarray:
    """Conventional stack: embed -> hidden[0] -> ... -> hidden[H-1] -> output head.

    ``add_iter_emb`` adds the model's iteration-embedding row ``j`` after
    hidden block ``j``; ``scale_out`` divides the final state by
    ``max(T, 1)`` before the head, mirroring the output averaging of the
    routed model. With both set this is what the chain plan must compute.
    """
    cfg = model.cfg
    h = embed(model.inputs[0].block, ids)
    for j, layer in enumerate(model.hidden):
        h = hidden_block(layer.block, h)
        if add_iter_emb:
            h = h + _p(model.iter_emb)[j]
    if scale_out:
        h = h / max(cfg.T, 1)
    return output_head(model.outputs[0], h)
