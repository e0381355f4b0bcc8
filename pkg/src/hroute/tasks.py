"""Deterministic synthetic datasets.

Every generator is a pure function of ``(spec, batch index, batch size)``:
the random stream is seeded from ``[spec.seed, index]``. Batch indices are
split 90/10 between training and evaluation by :func:`split_indices`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractError

EVAL_EVERY = 10  # every 10th batch index belongs to the held-out split


def batch_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def split_indices(split: str, start: int = 0) -> Iterable[int]:
    """Infinite stream of batch indices for ``split`` ("train" or "eval")."""
    if split not in ("train", "eval"):
        raise ContractError(f"unknown split {split!r}")
    i = start
    while True:
        if (i % EVAL_EVERY == EVAL_EVERY - 1) == (split == "eval"):
            yield i
        i += 1


# ---------------------------------------------------------------- Markov languages


@dataclass
class SyntheticLanguageSpec:
    id: int
    vocab_start: int
    vocab_size: int
    transition: np.ndarray  # (vocab_size, vocab_size), rows sum to 1
    seq_len: int
    seed: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        n = self.vocab_size
        if self.transition.shape != (n, n):
            raise ContractError(f"transition must be ({n}, {n}), got {self.transition.shape}")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1) > 1e-9):
            raise ContractError("transition rows must be non-negative and sum to 1")
        if self.seq_len < 1:
            raise ContractError("seq_len must be >= 1")

    @property
    def vocab_range(self) -> range:
        return range(self.vocab_start, self.vocab_start + self.vocab_size)


def make_language(
    id: int, vocab_start: int, vocab_size: int, seq_len: int, seed: int = 0, peak: float = 0.95
) -> SyntheticLanguageSpec:
    """A language whose every token has one preferred successor with probability ``peak``.

    The successor map is a random permutation drawn from ``seed`` and
    ``id``; the remaining mass is spread evenly over the other tokens.
    """
    if not 0 < peak <= 1:
        raise ContractError("peak must lie in (0, 1]")
    rng = np.random.default_rng([int(seed), int(id), 7919])
    n = vocab_size
    succ = rng.permutation(n)
    if n == 1:
        trans = np.ones((1, 1))
    else:
        trans = np.full((n, n), (1.0 - peak) / (n - 1))
        trans[np.arange(n), succ] = peak
        trans /= trans.sum(axis=1, keepdims=True)
    return SyntheticLanguageSpec(id, vocab_start, n, trans, seq_len, seed)


def _sample_chain(spec: SyntheticLanguageSpec, rng: np.random.Generator, length: int) -> np.ndarray:
    cdf = np.cumsum(spec.transition, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty(length, dtype=np.int64)
    cur = int(rng.integers(spec.vocab_size))
    out[0] = cur
    u = rng.random(length)
    for t in range(1, length):
        cur = int(np.searchsorted(cdf[cur], u[t], side="right"))
        out[t] = cur
    return out + spec.vocab_start


def gen_language_batch(spec: SyntheticLanguageSpec, batch: int, index: int = 0):
    """Markov-sampled sequences; returns ``(tokens, targets, language_ids)``.

    ``targets`` is ``tokens`` shifted left by one position.
    """
    rng = batch_rng(spec.seed * 1000 + spec.id, index)
    seqs = np.stack([_sample_chain(spec, rng, spec.seq_len + 1) for _ in range(batch)])
    return seqs[:, :-1], seqs[:, 1:], np.full(batch, spec.id, dtype=np.int64)


@dataclass
class MultiLanguageTask:
    """Several disjoint-vocabulary languages; each batch holds an equal share of each."""

    languages: list[SyntheticLanguageSpec]
    seed: int = 0
    kind: str = field(default="lm", init=False)

    @classmethod
    def build(cls, n_languages=3, vocab_per_language=16, seq_len=16, peak=0.95, seed=0):
        langs = [
            make_language(i, i * vocab_per_language, vocab_per_language, seq_len, seed, peak)
            for i in range(n_languages)
        ]
        return cls(langs, seed)

    @property
    def vocab(self) -> int:
        return max(l.vocab_start + l.vocab_size for l in self.languages)

    @property
    def seq_len(self) -> int:
        return self.languages[0].seq_len

    @property
    def n_out(self) -> int:
        return self.vocab

    @property
    def conditions(self) -> list[int]:
        return [l.id for l in self.languages]

    def batch(self, index: int, size: int):
        """``(tokens, targets, conditions)``; examples are interleaved by language."""
        n = len(self.languages)
        per = -(-size // n)
        parts = [gen_language_batch(l, per, index) for l in self.languages]
        order = np.arange(per * n).reshape(n, per).T.reshape(-1)[:size]
        tok = np.concatenate([p[0] for p in parts])[order]
        tgt = np.concatenate([p[1] for p in parts])[order]
        cond = np.concatenate([p[2] for p in parts])[order]
        return tok, tgt, cond

    def condition_batch(self, condition: int, index: int, size: int):
        spec = next(l for l in self.languages if l.id == condition)
        return gen_language_batch(spec, size, index)


# ---------------------------------------------------------------- chain reasoning

FACT, RULE, QUERY = 0, 1, 2
N_SPECIAL = 3


@dataclass(frozen=True)
class ChainReasoningSpec:
    n_symbols: int = 8
    chain_depth: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.chain_depth < 1:
            raise ContractError("chain_depth must be >= 1")
        if self.n_symbols < self.chain_depth + 2:
            raise ContractError("n_symbols must be at least chain_depth + 2")

    @property
    def seq_len(self) -> int:
        return 2 + 3 * self.chain_depth + 2

    @property
    def vocab(self) -> int:
        return N_SPECIAL + self.n_symbols


def decode_chain(tokens) -> tuple[int, list[tuple[int, int]], int]:
    """Split one encoded instance into ``(fact, rules, query)`` symbol ids."""
    toks = [int(t) for t in tokens]
    if toks[0] != FACT or toks[-2] != QUERY:
        raise ContractError("malformed chain instance")
    fact = toks[1] - N_SPECIAL
    rules = []
    for p in range(2, len(toks) - 2, 3):
        if toks[p] != RULE:
            raise ContractError("malformed chain instance")
        rules.append((toks[p + 1] - N_SPECIAL, toks[p + 2] - N_SPECIAL))
    return fact, rules, toks[-1] - N_SPECIAL


def closure(fact: int, rules: list[tuple[int, int]]) -> set[int]:
    """Symbols derivable from ``fact`` by repeatedly applying the rules."""
    known = {fact}
    changed = True
    while changed:
        changed = False
        for a, b in rules:
            if a in known and b not in known:
                known.add(b)
                changed = True
    return known


def gen_chain_batch(spec: ChainReasoningSpec, batch: int, index: int = 0):
    """Encoded instances ``FACT f RULE a b ... QUERY q`` and labels (1 = q derivable).

    The rules form one chain of ``chain_depth`` hops, listed in random
    order. Half the time the chain starts at the fact, otherwise at some
    other symbol; the query is always the end of the chain.
    """
    rng = batch_rng(spec.seed, index)
    L = spec.seq_len
    tokens = np.empty((batch, L), dtype=np.int64)
    labels = np.empty(batch, dtype=np.int64)
    for n in range(batch):
        syms = rng.permutation(spec.n_symbols)
        rooted = bool(rng.integers(2))
        if rooted:
            fact, chain = int(syms[0]), [int(s) for s in syms[: spec.chain_depth + 1]]
        else:
            fact, chain = int(syms[0]), [int(s) for s in syms[1 : spec.chain_depth + 2]]
        rules = [(chain[k], chain[k + 1]) for k in range(spec.chain_depth)]
        rules = [rules[k] for k in rng.permutation(len(rules))]
        query = chain[-1]
        row = [FACT, fact + N_SPECIAL]
        for a, b in rules:
            row += [RULE, a + N_SPECIAL, b + N_SPECIAL]
        row += [QUERY, query + N_SPECIAL]
        tokens[n] = row
        labels[n] = int(query in closure(fact, rules))
    return tokens, labels


@dataclass
class ChainTask:
    spec: ChainReasoningSpec
    kind: str = field(default="classify", init=False)

    @property
    def vocab(self) -> int:
        return self.spec.vocab

    @property
    def seq_len(self) -> int:
        return self.spec.seq_len

    @property
    def n_out(self) -> int:
        return 2

    @property
    def conditions(self) -> list[int]:
        return [0, 1]

    def batch(self, index: int, size: int):
        """``(tokens, labels, conditions)``; the condition is the label."""
        tok, lab = gen_chain_batch(self.spec, size, index)
        return tok, lab, lab.copy()


def export_jsonl(path, tokens, labels, conditions=None) -> None:
    """Write one JSON record per example: ``{"tokens": [...], "label": ...}``."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for n in range(len(tokens)):
            rec = {"tokens": np.asarray(tokens[n]).tolist(), "label": np.asarray(labels[n]).tolist()}
            if conditions is not None:
                rec["condition"] = int(conditions[n])
            fh.write(json.dumps(rec) + "\n")
