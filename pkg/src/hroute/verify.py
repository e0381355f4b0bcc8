"""Property suites run on small randomized models with fixed seeds.

Each suite returns a :class:`SuiteResult`; ``run_suite("all")`` runs them in
order. The CLI ``verify`` command and the acceptance tests both use these.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import reference
from .blocks import sharpen
from .gradcheck import check_gradients
from .hmodel import HModel, HModelConfig, aggregate, chain_plan, force_routing, norm_by_contributors
from .tensor import Tensor

SUITES = ("grad", "equiv", "norm", "topk", "sharpen")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metric: float  # worst observed value (error, deviation or violation count)
    threshold: float
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail} (worst {self.metric:.3g}, limit {self.threshold:.3g}, {self.seconds:.1f}s)"


def _randomize_routing(model: HModel, rng: np.random.Generator, scale: float = 1.0) -> None:
    for layer in model.inputs + model.hidden:
        for p in (layer.head.weight, layer.head.bias):
            p.data = rng.normal(0.0, scale, p.shape).astype(p.dtype)


def grad_suite(seed: int = 0, d: int = 8, H: int = 2, T: int = 2, seq: int = 8, tol: float = 1e-3) -> SuiteResult:
    """Backprop vs central finite differences on every parameter of a float64 model."""
    cfg = HModelConfig(I=1, H=H, O=1, T=T, d=d, ff=2 * d, heads=2, seq=seq, vocab=6, alpha0=0.8, alpha_rate=0.5)
    rng = np.random.default_rng(seed)
    model = HModel(cfg, rng).astype(np.float64)
    _randomize_routing(model, rng, 0.5)
    ids = [rng.integers(0, cfg.vocab, size=(2, seq))]
    w = rng.normal(size=(2, seq, cfg.vocab))
    errs = check_gradients(lambda: (model(ids, "train")[0] * w).sum(), dict(model.named_parameters()))
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    return SuiteResult("grad", worst <= tol, worst, tol, f"{len(errs)} parameters, worst {name}")


def equiv_suite(seed: int = 0, H: int = 3, d: int = 16, n_inputs: int = 4, tol: float = 1e-5) -> SuiteResult:
    """Chain-plan forward vs an independent numpy stack of the same blocks."""
    worst = 0.0
    for k in range(n_inputs):
        rng = np.random.default_rng([seed, k])
        cfg = HModelConfig(I=1, H=H, O=1, T=H, d=d, ff=2 * d, heads=2, seq=8, vocab=11)
        model = HModel(cfg, rng)
        ids = rng.integers(0, cfg.vocab, size=(3, 8))
        routed = force_routing(model, chain_plan(cfg))([ids], mode="infer")[0].data
        worst = max(worst, float(np.abs(routed - reference.stacked_forward(model, ids)).max()))
    return SuiteResult("equiv", worst <= tol, worst, tol, f"H=T={H}, {n_inputs} models, max abs deviation")


def norm_suite(seed: int = 0, n: int = 100) -> SuiteResult:
    """After normalization no slot is larger (L2, per example) than its largest contributor."""
    rng = np.random.default_rng(seed)
    violations, worst_ratio = 0, 0.0
    for _ in range(n):
        b, s, d = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 6)
        k, L = rng.integers(1, 7), rng.integers(1, 6)
        subs = [rng.normal(0, rng.uniform(0.01, 10), (b, s, d)) for _ in range(k)]
        cons = [rng.uniform(0, 1, (b, L)) * (rng.random((b, L)) < 0.8) for _ in range(k)]
        bundle = norm_by_contributors(
            aggregate([(Tensor(x, dtype=np.float64), Tensor(c, dtype=np.float64)) for x, c in zip(subs, cons)])
        )
        bound = np.max([np.linalg.norm(x.reshape(b, -1), axis=1) for x in subs], axis=0)  # (b,)
        slot = np.linalg.norm(bundle.slots.data.reshape(b, L, -1), axis=2)  # (b, L)
        ratio = slot / np.maximum(bound[:, None], 1e-300)
        worst_ratio = max(worst_ratio, float(ratio.max()))
        violations += int(np.sum(slot > bound[:, None] * (1 + 1e-12)))
    return SuiteResult("norm", violations == 0, violations, 0, f"{n} bundles, max slot/contributor ratio {worst_ratio:.4f}")


def topk_suite(seed: int = 0, n: int = 100) -> SuiteResult:
    """``topk = L`` inference is bitwise identical to dense inference."""
    mismatches = 0
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        H, O, T = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 4))
        kinds = [str(v) for v in rng.choice(["transformer", "feedforward"], size=H)]
        base = dict(I=int(rng.integers(1, 3)), H=H, O=O, T=T, d=8, ff=8, heads=2, seq=6, vocab=9, hidden_kinds=kinds,
                    alpha0=float(rng.uniform(0.2, 2.0)), alpha_rate=float(rng.uniform(0.5, 1.0)))
        dense = HModel(HModelConfig(**base), k)
        _randomize_routing(dense, rng)
        sparse = HModel(HModelConfig(**base, topk=H + O), k)
        sparse.load_state_dict(dense.state_dict())
        x = [rng.integers(0, 9, size=(2, int(rng.integers(1, 7))))] * base["I"]
        a, b = dense(x, "infer"), sparse(x, "infer")
        mismatches += int(any(u.data.tobytes() != v.data.tobytes() for u, v in zip(a, b)))
    return SuiteResult("topk", mismatches == 0, mismatches, 0, f"{n} random models, bitwise mismatches")


def binary_entropy(logits: np.ndarray, alpha: float) -> np.ndarray:
    """Entropy of sigmoid(logit / alpha), evaluated on the minority side for precision."""
    q = sharpen(Tensor(-np.abs(logits), dtype=np.float64), alpha).data
    return -(q * np.log(q) + (1 - q) * np.log1p(-q))


def sharpen_suite(seed: int = 0, n: int = 1000, alphas=(1.0, 0.5, 0.25, 0.125, 0.0625)) -> SuiteResult:
    """Entropy of the sharpened sigmoid strictly falls each time alpha halves."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 3, n)
    logits = np.where(np.abs(logits) < 1e-3, np.sign(logits + 1e-12) * 1e-3, logits)
    ent = np.stack([binary_entropy(logits, a) for a in alphas])  # (len(alphas), n)
    violations = int(np.sum(ent[1:] >= ent[:-1]))
    return SuiteResult("sharpen", violations == 0, violations, 0,
                       f"{n} logits, alpha {alphas[0]} -> {alphas[-1]}, non-decreasing steps")


_RUNNERS = {"grad": grad_suite, "equiv": equiv_suite, "norm": norm_suite, "topk": topk_suite, "sharpen": sharpen_suite}


def run_suite(name: str, seed: int = 0) -> list[SuiteResult]:
    names = SUITES if name == "all" else (name,)
    out = []
    for n in names:
        if n not in _RUNNERS:
            raise KeyError(f"unknown suite {n!r}")
        start = time.perf_counter()
        res = _RUNNERS[n](seed=seed)
        res.seconds = time.perf_counter() - start
        out.append(res)
    return out
