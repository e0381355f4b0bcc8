"""Routing traces: recording, per-condition statistics and exporters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError, TraceFormatError

TRACE_VERSION = 1


@dataclass
class StageEntry:
    stage: int
    source: int
    con: list[float]


@dataclass
class TraceRecord:
    id: int
    condition: Hashable | None
    stages: list[StageEntry] = field(default_factory=list)

    def keys(self) -> list[tuple[int, int]]:
        return [(e.stage, e.source) for e in self.stages]

    def matrix(self) -> np.ndarray:
        """``(entries, L)`` array of connection weights in recording order."""
        return np.array([e.con for e in self.stages], dtype=np.float64)


class RoutingRecorder:
    """Collects every connection vector emitted during forward passes.

    Pass as ``trace=`` to the model. After each forward, :meth:`flush`
    turns the buffered vectors into one :class:`TraceRecord` per example.
    """

    def __init__(self):
        self._buffer: list[tuple[int, int, np.ndarray]] = []
        self.records: list[TraceRecord] = []

    def record(self, stage: int, source: int, con: np.ndarray) -> None:
        self._buffer.append((stage, source, np.array(con, dtype=np.float32)))

    def flush(self, conditions: Sequence | None = None, ids: Sequence[int] | None = None) -> list[TraceRecord]:
        if not self._buffer:
            return []
        batch = self._buffer[0][2].shape[0]
        if ids is None:
            ids = range(len(self.records), len(self.records) + batch)
        new = []
        for n, rid in enumerate(ids):
            stages = [StageEntry(s, src, [float(v) for v in con[n]]) for s, src, con in self._buffer]
            cond = None if conditions is None else _plain(conditions[n])
            new.append(TraceRecord(int(rid), cond, stages))
        self._buffer.clear()
        self.records.extend(new)
        return new


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


@dataclass
class RoutingSummary:
    keys: list[tuple[int, int]]  # (stage, source) per row
    mean: np.ndarray  # (entries, L)
    std: np.ndarray
    count: int

    @property
    def dispersion(self) -> float:
        """Mean over entries of the per-entry standard deviation."""
        return float(self.std.mean())


def summarize(traces: Sequence[TraceRecord], group_by: str | None = "condition") -> dict:
    """Per-condition elementwise mean/std of connection weights.

    With ``group_by=None`` every trace falls under the single key ``None``.
    """
    if not traces:
        raise ContractError("summarize needs at least one trace")
    keys = traces[0].keys()
    groups: dict = {}
    for tr in traces:
        if tr.keys() != keys:
            raise ContractError(f"trace {tr.id} has a different stage layout")
        mat = tr.matrix()
        if mat.shape != traces[0].matrix().shape:
            raise ContractError(f"trace {tr.id} has shape {mat.shape}")
        cond = tr.condition if group_by == "condition" else None
        groups.setdefault(cond, []).append(mat)
    out = {}
    for cond in _ordered(groups):
        stack = np.stack(groups[cond])
        out[cond] = RoutingSummary(list(keys), stack.mean(axis=0), stack.std(axis=0), len(stack))
    return out


def _ordered(conditions: Iterable) -> list:
    conds = list(conditions)
    try:
        return sorted(conds)
    except TypeError:
        return sorted(conds, key=repr)


def routing_divergence(a: RoutingSummary, b: RoutingSummary) -> float:
    """Mean absolute difference of the two mean connection matrices."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"summary shapes differ: {a.mean.shape} vs {b.mean.shape}")
    return float(np.mean(np.abs(a.mean - b.mean)))


def within_divergence(traces: Sequence[TraceRecord], summary: RoutingSummary) -> float:
    """Mean absolute deviation of individual traces from their centroid."""
    return float(np.mean([np.mean(np.abs(t.matrix() - summary.mean)) for t in traces]))


def classify_by_routing(trace: TraceRecord, summaries: dict) -> Hashable:
    """Nearest centroid under L1 distance; ties go to the lowest-ordered condition."""
    if len(summaries) < 2:
        raise ContractError("need at least two conditions")
    mat = trace.matrix()
    best, best_d = None, np.inf
    for cond in _ordered(summaries):
        dist = float(np.abs(mat - summaries[cond].mean).sum())
        if dist < best_d:
            best, best_d = cond, dist
    return best


# ---------------------------------------------------------------- graph export


def _node(kind: str, layer: int, stage: int | None = None) -> str:
    if kind == "in":
        return f"in{layer}"
    if kind == "out":
        return f"out{layer}"
    return f"h{layer}_s{stage}"


def export_dot(summary: RoutingSummary, threshold: float, H: int | None = None, name: str = "hmodel") -> str:
    """Directed graph of mean connection weights at or above ``threshold``.

    Hidden layer ``i`` running at stage ``t`` (``t >= 1``) is node ``h{i}_s{t}``.
    A weight at stage ``t`` from a source to hidden slot ``j`` feeds
    ``h{j}_s{t+1}``; weights into output slot ``o`` feed ``out{o}`` from
    any stage. Hidden targets beyond the last stage are never executed and
    are omitted. ``H`` is inferred from the stage-1 sources when ``T >= 1``.
    """
    if not 0 <= threshold:
        raise ContractError("threshold must be non-negative")
    L = summary.mean.shape[1]
    T = max(s for s, _ in summary.keys)
    if H is None:
        if T == 0:
            raise ContractError("H cannot be inferred from a T=0 summary")
        H = sum(1 for s, _ in summary.keys if s == 1)
    O = L - H
    I = sum(1 for s, _ in summary.keys if s == 0)
    nodes = [_node("in", i) for i in range(I)]
    nodes += [_node("h", i, t) for t in range(1, T + 1) for i in range(H)]
    nodes += [_node("out", o) for o in range(O)]
    edges = []
    for (stage, source), row in zip(summary.keys, summary.mean):
        src = _node("in", source) if stage == 0 else _node("h", source, stage)
        for j, w in enumerate(row):
            if w < threshold:
                continue
            if j < H:
                if stage + 1 > T:
                    continue
                dst = _node("h", j, stage + 1)
            else:
                dst = _node("out", j - H)
            edges.append((src, dst, float(w)))
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    for n in nodes:
        lines.append(f'  {n} [label="{n}"];')
    for src, dst, w in edges:
        lines.append(f'  {src} -> {dst} [weight="{w:.6g}", label="{w:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- JSON


def export_json(traces: Sequence[TraceRecord], model_config_hash: str = "") -> str:
    doc = {
        "version": TRACE_VERSION,
        "model_config_hash": model_config_hash,
        "records": [
            {
                "id": t.id,
                "condition": t.condition,
                "stages": [{"stage": e.stage, "source": e.source, "con": list(e.con)} for e in t.stages],
            }
            for t in traces
        ],
    }
    return json.dumps(doc)


def import_json(text: str) -> tuple[list[TraceRecord], str]:
    """Parse :func:`export_json` output; returns ``(records, model_config_hash)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None

    def need(obj, key, kind, where):
        if not isinstance(obj, dict) or key not in obj:
            raise TraceFormatError(f"{where}: missing field {key!r}")
        val = obj[key]
        if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
            raise TraceFormatError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}")
        return val

    if need(doc, "version", int, "$") != TRACE_VERSION:
        raise TraceFormatError(f"$.version: unsupported trace version {doc['version']}")
    cfg_hash = need(doc, "model_config_hash", str, "$")
    records = []
    for r, rec in enumerate(need(doc, "records", list, "$")):
        where = f"$.records[{r}]"
        stages = []
        for s, st in enumerate(need(rec, "stages", list, where)):
            sw = f"{where}.stages[{s}]"
            con = need(st, "con", list, sw)
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in con):
                raise TraceFormatError(f"{sw}.con: expected numbers")
            stages.append(StageEntry(need(st, "stage", int, sw), need(st, "source", int, sw), [float(v) for v in con]))
        if not isinstance(rec, dict) or "condition" not in rec:
            raise TraceFormatError(f"{where}: missing field 'condition'")
        records.append(TraceRecord(need(rec, "id", int, where), rec["condition"], stages))
    return records, cfg_hash
