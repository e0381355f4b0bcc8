"""Command-line entry point: ``hroute {train,eval,trace,verify}``.

Exit codes: 0 success, 1 verification failure / divergence / I/O or
checkpoint error, 2 configuration or contract error. ``HROUTE_LOG`` sets the
log level (error, warning, info, debug; default warning).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_config
from .errors import CheckpointError, ConfigError, ContractError, DivergenceError
from .tasks import split_indices
from .trace import RoutingRecorder, export_dot, export_json, summarize
from .training import evaluate, load_checkpoint, model_outputs, train
from .verify import SUITES, run_suite

log = logging.getLogger("hroute")

LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("HROUTE_LOG", "warning").lower()
    if name not in LOG_LEVELS:
        raise ConfigError("HROUTE_LOG", f"expected one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _apply_overrides(doc: dict, args) -> dict:
    doc = json.loads(json.dumps(doc))
    model = doc.setdefault("model", {})
    if getattr(args, "topk", None) is not None:
        model["topk"] = args.topk
    if getattr(args, "alpha", None) is not None:
        model["alpha0"] = args.alpha
    if getattr(args, "alpha_rate", None) is not None:
        model["alpha_rate"] = args.alpha_rate
    if getattr(args, "seed", None) is not None:
        doc.setdefault("train", {})["seed"] = args.seed
    return doc


def _read_config_doc(path) -> dict:
    # load_config validates; re-read the raw document so overrides can be applied before validation
    load_config(path)
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _check_compatible(model_cfg, task) -> None:
    if task.vocab > model_cfg.vocab or task.seq_len > model_cfg.seq or task.n_out != (model_cfg.n_out or model_cfg.vocab):
        raise ContractError(
            f"checkpoint model (vocab {model_cfg.vocab}, seq {model_cfg.seq}, n_out {model_cfg.n_out}) is incompatible "
            f"with task (vocab {task.vocab}, seq {task.seq_len}, n_out {task.n_out})"
        )


def _restore(args):
    """Model, task and run config from ``--checkpoint`` (+ optional ``--config`` task)."""
    ck = load_checkpoint(args.checkpoint)
    run_cfg = parse_config(_apply_overrides(ck.config, args))
    task = run_cfg.build_task()
    if args.config:
        task = load_config(args.config).build_task()
    model_cfg = run_cfg.model_config(run_cfg.build_task())
    _check_compatible(model_cfg, task)
    from .hmodel import HModel

    model = HModel(model_cfg, 0)
    model.load_state_dict(ck.tensors)
    return model, task, run_cfg


# ---------------------------------------------------------------- trace export


def collect_traces(model, task, n: int, batch: int = 64):
    """Route ``n`` held-out examples per condition through ``model`` in inference mode."""
    want = {c: n for c in task.conditions}
    tokens, conds = [], []
    for index in split_indices("eval"):
        if not any(want.values()):
            break
        tok, _, cond = task.batch(index, batch)
        for row, c in zip(tok, cond):
            c = int(c)
            if want.get(c, 0) > 0:
                tokens.append(row)
                conds.append(c)
                want[c] -= 1
    tokens, conds = np.stack(tokens), np.array(conds)
    rec = RoutingRecorder()
    records = []
    for start in range(0, len(tokens), batch):
        sl = slice(start, start + batch)
        model_outputs(model, tokens[sl], mode="infer", trace=rec)
        records += rec.flush(conditions=conds[sl], ids=range(start, start + len(conds[sl])))
    return records


def write_trace_exports(model, task, run_cfg: RunConfig, out: Path, n: int, threshold: float) -> dict:
    tr = run_cfg.trace
    records = collect_traces(model, task, n)
    json_path, dot_path = out / tr["json"], out / tr["dot"]
    json_path.write_text(export_json(records, model.cfg.config_hash()), encoding="utf-8")
    H = model.cfg.H
    dot_path.write_text(export_dot(summarize(records, group_by=None)[None], threshold, H=H), encoding="utf-8")
    written = [str(json_path), str(dot_path)]
    if tr["group_by"] == "condition":
        for cond, summ in summarize(records).items():
            p = dot_path.with_name(f"{dot_path.stem}.{cond}{dot_path.suffix}")
            p.write_text(export_dot(summ, threshold, H=H, name=f"hmodel_{cond}"), encoding="utf-8")
            written.append(str(p))
    return {"records": len(records), "files": written}


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    run_cfg = parse_config(_apply_overrides(_read_config_doc(args.config), args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = run_cfg.build_task()
    model = run_cfg.build_model(task)
    tcfg = run_cfg.train_config()
    snapshot = run_cfg.to_dict()
    report = {"params": model.num_parameters()}
    try:
        res = train(model, task, tcfg, out / "metrics.jsonl", out / "model.ck", config_snapshot=snapshot)
    except DivergenceError as exc:
        log.error("%s", exc)
        print(json.dumps({"status": "diverged", "error": str(exc), "checkpoint": str(out / "model.ck")}))
        return 1
    report["final_eval"] = res.final_eval
    if run_cfg.trace["enabled"]:
        report["trace"] = write_trace_exports(model, task, run_cfg, out, run_cfg.trace["n"], run_cfg.trace["threshold"])
    baseline = run_cfg.build_baseline(task)
    if baseline is not None:
        try:
            bres = train(baseline, task, tcfg, out / "baseline_metrics.jsonl", out / "baseline.ck", snapshot)
        except DivergenceError as exc:
            log.error("baseline: %s", exc)
            return 1
        report["baseline"] = {"params": baseline.num_parameters(), "final_eval": bres.final_eval}
    print(json.dumps({"status": "ok", **report}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, task, run_cfg = _restore(args)
    tcfg = run_cfg.train_config()
    n = args.n if args.n is not None else tcfg.eval_batches
    metrics = evaluate(model, task, tcfg.batch, n)
    report = {"split": "eval", **metrics, "alpha": model.cfg.alpha0, "alpha_rate": model.cfg.alpha_rate,
              "topk": model.cfg.topk, "batches": n}
    text = json.dumps(report, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_trace(args) -> int:
    model, task, run_cfg = _restore(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n if args.n is not None else run_cfg.trace["n"]
    threshold = args.threshold if args.threshold is not None else run_cfg.trace["threshold"]
    print(json.dumps(write_trace_exports(model, task, run_cfg, out, n, threshold), sort_keys=True))
    return 0


def cmd_verify(args) -> int:
    results = run_suite(args.suite, seed=args.seed or 0)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hroute", description="Train, evaluate and inspect routed H-models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def runtime_flags(p):
        p.add_argument("--topk", type=int, help="keep the k largest connection weights per source at inference")
        p.add_argument("--alpha", type=float, help="initial sharpening temperature")
        p.add_argument("--alpha-rate", type=float, help="per-iteration temperature multiplier")

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="run", help="output directory (default: ./run)")
    runtime_flags(p)
    p.set_defaults(fn=cmd_train)

    for name, fn, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                            ("trace", cmd_trace, "export routing traces of a checkpoint")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", help="run config whose task replaces the checkpoint's")
        p.add_argument("--n", type=int, help="eval batches" if name == "eval" else "examples per condition")
        p.add_argument("--out", required=name == "trace")
        p.add_argument("--seed", type=int)
        runtime_flags(p)
        if name == "trace":
            p.add_argument("--threshold", type=float, help="minimum mean weight for a graph edge")
        p.set_defaults(fn=fn)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.fn(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
