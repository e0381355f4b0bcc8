"""Loss, optimizer, training loop and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import CheckpointError, ContractError, DivergenceError, NumericError
from .tasks import split_indices
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"HMCK"
VERSION = 1


# ---------------------------------------------------------------- loss / metrics


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` is ``(b, C)`` with targets ``(b,)`` or ``(b, s, V)`` with
    targets ``(b, s)``.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} vs targets {targets.shape}")
    n_cls = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_cls):
        raise IndexError(f"target outside [0, {n_cls})")
    flat = tn.log_softmax(logits.reshape(-1, n_cls), axis=-1)
    picked = flat[np.arange(targets.size), targets.reshape(-1)]
    return -picked.mean()


def accuracy(logits, targets) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(data, axis=-1) == np.asarray(targets)))


# ---------------------------------------------------------------- optimizer


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 32
    steps: int = 1000
    grad_clip: float | None = 1.0
    seed: int = 0
    eval_every: int = 100
    eval_batches: int = 4

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr >= 0:
            raise ContractError("lr must be non-negative")
        if not all(0 < b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ContractError("betas must be two values in (0, 1)")
        if self.batch < 1 or self.steps < 0 or self.eval_every < 1:
            raise ContractError("batch, eval_every must be >= 1 and steps >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ContractError("grad_clip must be positive")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so the global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total <= max_norm:
        return grads, total
    factor = max_norm / total
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}, total


def optimizer_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig) -> float:
    """One Adam update with bias correction, reading gradients from ``p.grad``.

    Missing gradients count as zero. Returns the pre-clip gradient norm.
    Raises NumericError, naming the parameter, before touching anything if a
    gradient is non-finite.
    """
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        grads[name] = g
    norm = 0.0
    if cfg.grad_clip is not None:
        grads, norm = clip_grad_norm(grads, cfg.grad_clip)
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data - update).astype(p.dtype)
    return norm


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model, config: dict | None = None) -> None:
    """Write ``HMCK | u32 version | u32 len | manifest JSON | payload``.

    The manifest lists ``name, dtype, shape, offset, nbytes`` for each
    parameter plus a CRC32 of the payload and the config snapshot. Payloads
    are little-endian float32.
    """
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = json.dumps(
        {"tensors": entries, "payload_bytes": offset, "crc32": zlib.crc32(payload), "config": config or {}},
        sort_keys=True,
    ).encode("utf-8")
    blob = MAGIC + struct.pack("<II", VERSION, len(manifest)) + manifest + payload
    Path(path).write_bytes(blob)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    manifest: list[dict]


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if 12 + mlen > len(blob):
        raise CheckpointError(f"{path}: corrupt manifest (truncated)")
    try:
        manifest = json.loads(blob[12 : 12 + mlen].decode("utf-8"))
        entries = manifest["tensors"]
        total = int(manifest["payload_bytes"])
        crc = int(manifest["crc32"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    payload = blob[12 + mlen :]
    if len(payload) != total:
        raise CheckpointError(f"{path}: corrupt payload (expected {total} bytes, found {len(payload)})")
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: corrupt payload (checksum mismatch)")
    tensors = {}
    for e in entries:
        if e.get("dtype") != "f32" or e["name"] in tensors:
            raise CheckpointError(f"{path}: corrupt manifest entry {e.get('name')!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(tensors, manifest.get("config", {}), entries)


# ---------------------------------------------------------------- training loop


def model_outputs(model, tokens, mode="train", trace=None):
    """Logits of the first output layer; every input layer reads the same tokens."""
    n_inputs = getattr(model.cfg, "I", 1)
    return model([tokens] * n_inputs, mode=mode, trace=trace)[0]


def evaluate(model, task, batch: int, n_batches: int, start: int = 0) -> dict:
    """Mean loss and accuracy over ``n_batches`` held-out batches."""
    losses, hits, count = [], 0.0, 0
    indices = split_indices("eval")
    for _ in range(start):
        next(indices)
    for _ in range(n_batches):
        tok, tgt, _ = task.batch(next(indices), batch)
        logits = model_outputs(model, tok, mode="infer")
        with tn.no_grad():
            losses.append(cross_entropy(logits, tgt).item())
        hits += accuracy(logits, tgt) * tgt.size
        count += tgt.size
    return {"loss": float(np.mean(losses)), "acc": hits / count}


@dataclass
class TrainResult:
    history: list[dict]
    final_eval: dict


def train(model, task, cfg: TrainConfig, metrics_path=None, checkpoint_path=None,
          config_snapshot: dict | None = None, stop_at_acc: float | None = None) -> TrainResult:
    """Step-budgeted training on the task's training split.

    Writes one JSON line per step (``split="train"``) and per evaluation
    (``split="eval"``) with ``step, loss, acc, alpha``. ``stop_at_acc`` ends
    training early once an evaluation reaches that accuracy. On a
    non-finite loss or gradient the current (last good) parameters are
    checkpointed and :class:`DivergenceError` is raised.
    """
    params = dict(model.named_parameters())
    state = AdamState()
    history: list[dict] = []
    alpha = getattr(getattr(model, "cfg", None), "alpha0", None)
    fh = Path(metrics_path).open("w", encoding="utf-8") if metrics_path else None

    def emit(rec):
        history.append(rec)
        if fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def checkpoint():
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, config_snapshot)

    final = {}
    try:
        indices = split_indices("train")
        for step in range(1, cfg.steps + 1):
            tok, tgt, _ = task.batch(next(indices), cfg.batch)
            try:
                logits = model_outputs(model, tok)
                loss = cross_entropy(logits, tgt)
                model.zero_grad()
                tn.backward(loss)
                optimizer_step(params, state, cfg)
            except NumericError as exc:
                checkpoint()
                raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
            emit({"split": "train", "step": step, "loss": loss.item(), "acc": accuracy(logits, tgt), "alpha": alpha})
            if step % cfg.eval_every == 0 or step == cfg.steps:
                final = evaluate(model, task, cfg.batch, cfg.eval_batches)
                emit({"split": "eval", "step": step, **final, "alpha": alpha})
                log.info("step %d eval loss %.4f acc %.4f", step, final["loss"], final["acc"])
                if stop_at_acc is not None and final["acc"] >= stop_at_acc:
                    break
        if not final:
            final = evaluate(model, task, cfg.batch, cfg.eval_batches)
        checkpoint()
    finally:
        if fh:
            fh.close()
    return TrainResult(history, final)
