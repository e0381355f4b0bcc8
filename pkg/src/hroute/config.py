"""JSON run configuration: parsing, validation and object construction.

A run config has the sections ``model``, ``blocks``, ``task`` (required)
and ``train``, ``trace``, ``baseline`` (optional). Validation errors are
:class:`~hroute.errors.ConfigError` carrying the dotted field path.

Example::

    {
      "model": {"I": 1, "H": 2, "O": 1, "T": 2, "d": 64},
      "blocks": ["embedding", "transformer", "transformer", "head"],
      "task": {"kind": "chain", "n_symbols": 8, "chain_depth": 1},
      "train": {"steps": 500, "batch": 32, "seed": 0},
      "trace": {"enabled": true, "n": 32, "threshold": 0.5}
    }
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .baseline import StackedConfig, StackedModel
from .blocks import HIDDEN_KINDS
from .errors import ConfigError, ContractError
from .hmodel import HModel, HModelConfig
from .tasks import ChainReasoningSpec, ChainTask, MultiLanguageTask
from .training import TrainConfig

_INT = (int,)
_NUM = (int, float)

MODEL_FIELDS = {
    "I": (_INT, True), "H": (_INT, True), "O": (_INT, True), "T": (_INT, True), "d": (_INT, True),
    "ff": (_INT, False), "heads": (_INT, False),
    "alpha0": (_NUM, False), "alpha_rate": (_NUM, False), "topk": (_INT, False),
}
TASK_FIELDS = {
    "chain": {"n_symbols": _INT, "chain_depth": _INT, "seed": _INT},
    "languages": {"n_languages": _INT, "vocab_per_language": _INT, "seq_len": _INT, "peak": _NUM, "seed": _INT},
}
TRAIN_FIELDS = {
    "lr": _NUM, "betas": (list,), "eps": _NUM, "batch": _INT, "steps": _INT, "grad_clip": _NUM,
    "seed": _INT, "eval_every": _INT, "eval_batches": _INT,
}
TRACE_FIELDS = {"enabled": (bool,), "group_by": (str,), "n": _INT, "threshold": _NUM, "json": (str,), "dot": (str,)}
BASELINE_FIELDS = {"enabled": (bool,), "layers": _INT}
TRACE_DEFAULTS = {"enabled": False, "group_by": "condition", "n": 32, "threshold": 0.5,
                  "json": "trace.json", "dot": "routing.dot"}
NULLABLE = {"model.topk", "train.grad_clip", "trace.group_by"}


def _check_type(path: str, value, kinds) -> None:
    if value is None and path in NULLABLE:
        return
    ok = isinstance(value, kinds) and not (isinstance(value, bool) and bool not in kinds)
    if not ok:
        names = "/".join(k.__name__ for k in kinds)
        raise ConfigError(path, f"expected {names}, got {type(value).__name__}")


def _section(doc: dict, name: str, fields: dict, required: bool = False) -> dict:
    if name not in doc:
        if required:
            raise ConfigError(name, "missing required field")
        return {}
    sec = doc[name]
    if not isinstance(sec, dict):
        raise ConfigError(name, "expected an object")
    for key, value in sec.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown field")
        spec = fields[key]
        kinds, _ = spec if isinstance(spec[0], tuple) else (spec, False)
        _check_type(f"{name}.{key}", value, kinds)
    for key, spec in fields.items():
        if isinstance(spec[0], tuple) and spec[1] and key not in sec:
            raise ConfigError(f"{name}.{key}", "missing required field")
    return dict(sec)


@dataclass
class RunConfig:
    model: dict
    blocks: list[str]
    task: dict
    train: dict
    trace: dict
    baseline: dict | None

    def to_dict(self) -> dict:
        out = {"model": self.model, "blocks": self.blocks, "task": self.task, "train": self.train, "trace": self.trace}
        if self.baseline is not None:
            out["baseline"] = self.baseline
        return copy.deepcopy(out)

    # ---- construction

    def build_task(self):
        t = dict(self.task)
        kind = t.pop("kind")
        if kind == "chain":
            return ChainTask(ChainReasoningSpec(**t))
        return MultiLanguageTask.build(**t)

    def model_config(self, task=None) -> HModelConfig:
        task = task or self.build_task()
        m = self.model
        d = m["d"]
        classify = task.kind == "classify"
        I, H = m["I"], m["H"]
        return HModelConfig(
            I=I, H=H, O=m["O"], T=m["T"], d=d, ff=m.get("ff", 2 * d), heads=m.get("heads", 2),
            seq=task.seq_len, vocab=task.vocab, n_out=task.n_out,
            pooling="last" if classify else "tokens", causal=not classify,
            alpha0=float(m.get("alpha0", 1.0)), alpha_rate=float(m.get("alpha_rate", 1.0)), topk=m.get("topk"),
            hidden_kinds=list(self.blocks[I : I + H]),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def build_model(self, task=None) -> HModel:
        return HModel(self.model_config(task), self.train_config().seed)

    def build_baseline(self, task=None) -> StackedModel | None:
        if not self.baseline or not self.baseline.get("enabled", True):
            return None
        cfg = self.model_config(task)
        layers = self.baseline.get("layers", cfg.H)
        kinds = (cfg.hidden_kinds * layers)[:layers] if cfg.hidden_kinds else []
        sc = StackedConfig(layers=layers, d=cfg.d, ff=cfg.ff, heads=cfg.heads, seq=cfg.seq, vocab=cfg.vocab,
                           n_out=cfg.n_out, pooling=cfg.pooling, causal=cfg.causal, kinds=kinds)
        return StackedModel(sc, self.train_config().seed)


def parse_config(doc) -> RunConfig:
    """Validate a decoded JSON document and fill defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("$", "config must be a JSON object")
    for key in doc:
        if key not in ("model", "blocks", "task", "train", "trace", "baseline"):
            raise ConfigError(key, "unknown field")
    model = _section(doc, "model", MODEL_FIELDS, required=True)
    for key in ("I", "H", "O", "T", "d", "ff", "heads"):
        if key in model and model[key] < (0 if key in ("H", "T") else 1):
            raise ConfigError(f"model.{key}", "out of range")
    if model["O"] != 1:
        raise ConfigError("model.O", "tasks provide one target stream; O must be 1")

    if "blocks" not in doc:
        raise ConfigError("blocks", "missing required field")
    blocks = doc["blocks"]
    if not isinstance(blocks, list):
        raise ConfigError("blocks", "expected a list")
    I, H, O = model["I"], model["H"], model["O"]
    if len(blocks) != I + H + O:
        raise ConfigError("blocks", f"expected {I + H + O} entries (I + H + O), got {len(blocks)}")
    for n, kind in enumerate(blocks):
        allowed = ("embedding",) if n < I else tuple(HIDDEN_KINDS) if n < I + H else ("head",)
        if kind not in allowed:
            raise ConfigError(f"blocks[{n}]", f"expected one of {list(allowed)}, got {kind!r}")

    if "task" not in doc:
        raise ConfigError("task", "missing required field")
    raw_task = doc["task"]
    if not isinstance(raw_task, dict):
        raise ConfigError("task", "expected an object")
    kind = raw_task.get("kind")
    if kind not in TASK_FIELDS:
        raise ConfigError("task.kind", f"expected one of {sorted(TASK_FIELDS)}, got {kind!r}")
    task = _section({"task": {k: v for k, v in raw_task.items() if k != "kind"}}, "task", TASK_FIELDS[kind])
    task["kind"] = kind

    train = _section(doc, "train", TRAIN_FIELDS)
    trace = {**TRACE_DEFAULTS, **_section(doc, "trace", TRACE_FIELDS)}
    if trace["group_by"] not in ("condition", None):
        raise ConfigError("trace.group_by", "expected 'condition' or null")
    baseline = _section(doc, "baseline", BASELINE_FIELDS) if "baseline" in doc else None

    cfg = RunConfig(model, list(blocks), task, train, trace, baseline)
    # surface constructor contract violations under the right section
    for section, build in (("task", cfg.build_task), ("train", cfg.train_config), ("model", cfg.model_config)):
        try:
            build()
        except (ContractError, TypeError) as exc:
            raise ConfigError(section, str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("$", f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(doc)
