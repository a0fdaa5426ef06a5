"""Brute-force reference scorer and a Witten-Bell fixture estimator.

Nothing here touches :mod:`flatlm.lm`: the oracle keeps the n-grams in plain
dictionaries keyed by token sequences and applies the backoff recursion
literally, in float64. It exists to check the flattened model.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from flatlm.arpa import BOS_ID, EOS_ID, NEG_INF, UNK_ID, NGramEntry


@dataclass
class OracleLM:
    """Backoff model as dictionaries; no derived structures."""

    probs: dict[tuple[tuple[int, ...], int], float]
    backoffs: dict[tuple[int, ...], float]
    order: int
    vocab_size: int

    @classmethod
    def from_entries(cls, entries: Iterable[NGramEntry], vocab_size: int, order: int | None = None) -> "OracleLM":
        probs, backoffs = {}, {}
        max_order = 0
        for e in entries:
            probs[(e.context, e.token)] = e.logprob
            backoffs[e.key] = e.backoff
            max_order = max(max_order, e.order)
        return cls(probs, backoffs, order or max_order, vocab_size)

    def __post_init__(self):
        # <unk> mass spread over the vocabulary tokens without a unigram
        missing = sum(1 for v in range(self.vocab_size) if ((), v) not in self.probs)
        unk = self.probs.get(((), UNK_ID), NEG_INF)
        self.unk_weight = unk - math.log(max(1, missing))


def oracle_score(olm: OracleLM, context: Sequence[int], token: int) -> float:
    """log P(token | context) by the textbook backoff recursion."""
    context = tuple(context)
    w = olm.probs.get((context, token))
    if w is not None:
        return w
    if not context:
        return olm.unk_weight
    return olm.backoffs.get(context, 0.0) + oracle_score(olm, context[1:], token)


def oracle_full(olm: OracleLM, context: Sequence[int]) -> np.ndarray:
    """:func:`oracle_score` for every vocabulary token."""
    return np.array([oracle_score(olm, context, v) for v in range(olm.vocab_size)], dtype=np.float64)


def oracle_final(olm: OracleLM, context: Sequence[int]) -> float:
    return oracle_score(olm, context, EOS_ID)


def oracle_next_context(olm: OracleLM, context: Sequence[int], token: int) -> tuple[int, ...]:
    """Longest suffix of ``context + token`` that is a non-final n-gram below the top order."""
    seq = tuple(context) + (token,)
    seq = seq[max(0, len(seq) - (olm.order - 1)) :]
    for i in range(len(seq)):
        suffix = seq[i:]
        if (suffix[:-1], suffix[-1]) in olm.probs:
            return suffix
    return ()


def oracle_sentence(olm: OracleLM, tokens: Sequence[int]) -> float:
    """Sentence log-probability starting from ``<s>`` and ending with ``</s>``."""
    history = [BOS_ID] if ((), BOS_ID) in olm.probs else []
    total = 0.0
    for t in list(tokens) + [EOS_ID]:
        ctx = history[max(0, len(history) - (olm.order - 1)) :] if olm.order > 1 else []
        total += oracle_score(olm, ctx, t)
        history.append(t)
    return total


def estimate_fixture(
    corpus: Sequence[Sequence[int]], order: int, unk_mass: float = 1.0
) -> list[NGramEntry]:
    """Interpolated Witten-Bell n-gram model in ARPA entry form.

    Sentences are padded with ``<s>``/``</s>``. The unigram level is a plain
    relative frequency with ``unk_mass`` pseudo-counts reserved for ``<unk>``.
    Higher orders interpolate with the next lower order:
    ``P(v|c) = (C(c v) + T(c) P(v|c')) / (C(c) + T(c))`` with ``T(c)`` the
    number of distinct followers of ``c``; the backoff of ``c`` is
    ``T(c) / (C(c) + T(c))``, which keeps every context normalized.

    Args:
        corpus: sentences of token ids (no meta symbols)
        order: model order N
        unk_mass: pseudo-count of ``<unk>``

    Returns:
        entries with natural-log weights, sorted by (order, ids)
    """
    if not corpus or not any(len(s) for s in corpus):
        raise ValueError("corpus is empty")
    if order < 1:
        raise ValueError("order must be >= 1")

    counts: list[Counter] = [Counter() for _ in range(order + 1)]
    for sent in corpus:
        padded = (BOS_ID,) + tuple(int(t) for t in sent) + (EOS_ID,)
        for i in range(1, len(padded)):
            for k in range(1, min(order, i + 1) + 1):
                counts[k][padded[i - k + 1 : i + 1]] += 1

    # context statistics per order: total count and number of distinct followers
    ctx_total: list[Counter] = [Counter() for _ in range(order + 1)]
    ctx_types: list[Counter] = [Counter() for _ in range(order + 1)]
    for k in range(2, order + 1):
        for gram, c in counts[k].items():
            ctx_total[k][gram[:-1]] += c
            ctx_types[k][gram[:-1]] += 1

    prob: dict[tuple[int, ...], float] = {}
    denom = sum(counts[1].values()) + unk_mass
    for gram, c in counts[1].items():
        prob[gram] = c / denom
    for k in range(2, order + 1):
        for gram, c in counts[k].items():
            ctx = gram[:-1]
            t = ctx_types[k][ctx]
            prob[gram] = (c + t * prob[gram[1:]]) / (ctx_total[k][ctx] + t)

    def backoff(gram: tuple[int, ...]) -> float:
        k = len(gram) + 1
        if k > order or gram not in ctx_types[k]:
            return 0.0
        t = ctx_types[k][gram]
        return math.log(t / (ctx_total[k][gram] + t))

    entries = [
        NGramEntry((), UNK_ID, math.log(unk_mass / denom)),
        NGramEntry((), BOS_ID, NEG_INF, backoff((BOS_ID,))),
    ]
    for gram in sorted(prob, key=lambda g: (len(g), g)):
        entries.append(NGramEntry(gram[:-1], gram[-1], math.log(prob[gram]), backoff(gram)))
    return entries


def markov_corpus(
    seed: int,
    vocab_size: int,
    num_sentences: int,
    num_used: int | None = None,
    branching: int = 3,
    mean_length: float = 8.0,
) -> list[list[int]]:
    """Sentences sampled from a sparse random bigram chain.

    Only tokens ``0..num_used-1`` are emitted (default ``vocab_size - 1``), so
    at least one vocabulary token is absent and picks up ``<unk>`` mass.
    """
    rng = np.random.default_rng(seed)
    used = num_used if num_used is not None else max(1, vocab_size - 1)
    successors = rng.integers(0, used, size=(used, branching))
    weights = rng.dirichlet(np.ones(branching), size=used)
    corpus = []
    for _ in range(num_sentences):
        length = 1 + rng.poisson(mean_length - 1)
        tok = int(rng.integers(0, used))
        sent = [tok]
        for _ in range(length - 1):
            if rng.random() < 0.1:
                tok = int(rng.integers(0, used))
            else:
                tok = int(successors[tok, rng.choice(branching, p=weights[tok])])
            sent.append(tok)
        corpus.append(sent)
    return corpus

