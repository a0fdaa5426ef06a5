"""Shared fixtures and brute-force reference decoders for the test suite.

The simulators below re-derive every decoding rule from scratch on top of the
float64 dictionary oracle; they never call into :mod:`flatlm.lm` or the
decoder implementations.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flatlm.arpa import BOS_ID, Vocabulary, map_vocab, parse_arpa_file
from flatlm.lm import FlatLM, build
from flatlm.oracle import OracleLM, estimate_fixture, markov_corpus, oracle_final, oracle_score

DATA = Path(__file__).parent / "data"
CAT_SAT_ARPA = DATA / "cat_sat.arpa"
CAT_SAT_VOCAB = DATA / "cat_sat.vocab"


@dataclass(frozen=True)
class FixtureSpec:
    name: str
    seed: int
    vocab_size: int
    order: int
    num_sentences: int


# Witten-Bell fixtures for the exhaustive oracle checks (all <= 10k states)
FIXTURES = (
    FixtureSpec("o2_v16", 11, 16, 2, 60),
    FixtureSpec("o3_v64_seed7", 7, 64, 3, 200),
    FixtureSpec("o5_v128", 5, 128, 5, 300),
    FixtureSpec("o10_v64", 10, 64, 10, 150),
    FixtureSpec("o3_v1024", 3, 1024, 3, 300),
)
BENCH_FIXTURE = FixtureSpec("o10_v1024", 2024, 1024, 10, 1500)


@dataclass
class Fixture:
    spec: FixtureSpec
    entries: list
    lm: FlatLM
    oracle: OracleLM


@functools.lru_cache(maxsize=None)
def make_fixture(spec: FixtureSpec) -> Fixture:
    corpus = markov_corpus(spec.seed, spec.vocab_size, spec.num_sentences)
    entries = estimate_fixture(corpus, spec.order)
    lm = build(entries, spec.vocab_size, spec.order)
    return Fixture(spec, entries, lm, OracleLM.from_entries(entries, spec.vocab_size, spec.order))


@functools.lru_cache(maxsize=None)
def cat_sat():
    """The 3-gram model of "the cat sat on the mat" (vocab adds the unseen "dog")."""
    vocab = Vocabulary.from_file(CAT_SAT_VOCAB)
    header, raw = parse_arpa_file(CAT_SAT_ARPA)
    entries, _ = map_vocab(raw, vocab)
    lm = build(entries, len(vocab), header.order)
    return vocab, entries, lm, OracleLM.from_entries(entries, len(vocab), header.order)


def state_of(lm: FlatLM) -> dict:
    return {ctx: s for s, ctx in enumerate(lm.contexts)}


def words_to_ids(vocab: Vocabulary, text: str) -> tuple[int, ...]:
    return tuple(BOS_ID if w == "<s>" else vocab.id_of(w) for w in text.split())


def edit_distance(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_error_rate(hyps, refs) -> float:
    return sum(edit_distance(h, r) for h, r in zip(hyps, refs)) / sum(len(r) for r in refs)


# --- brute-force decoders on the float64 oracle --------------------------------


def _ctx(olm: OracleLM, history: list[int]) -> tuple[int, ...]:
    keep = olm.order - 1
    return tuple(history[len(history) - keep :]) if keep else ()


def simulate_ctc(rows: np.ndarray, olm: OracleLM, lm_weight: float) -> list[int]:
    """Three-group CTC rule by explicit candidate enumeration."""
    V = rows.shape[1] - 1
    history: list[int] = []
    out: list[int] = []
    prev = None
    for row in rows:
        ctx = _ctx(olm, history)
        # (score, rank) with rank breaking ties: blank first, then lower ids
        cands = [(float(row[V]), 0, "blank")]
        for v in range(V):
            if v == prev:
                score = float(row[v])
            else:
                score = float(row[v]) + lm_weight * oracle_score(olm, ctx, v)
            cands.append((score, v + 1, v))
        best = max(cands, key=lambda c: (c[0], -c[1]))
        label = best[2]
        if label == "blank":
            prev = None
            continue
        if label != prev:
            out.append(label)
            history.append(label)
        prev = label
    return out


def simulate_transducer(scorer, olm: OracleLM, lm_weight: float, num_frames: int, max_symbols: int = 10):
    """Two-stage selection by explicit enumeration; returns tokens and per-step blank decisions."""
    V = scorer.alphabet_size - 1
    out: list[int] = []
    blank_decisions: list[bool] = []
    for t in range(num_frames):
        for _ in range(max_symbols):
            row = scorer(t, len(out), out[-1] if out else None)
            raw_best = max(range(V + 1), key=lambda k: (row[k], -k))
            blank_decisions.append(raw_best == V)
            if raw_best == V:
                break
            ctx = _ctx(olm, out)
            fused = [float(row[v]) + lm_weight * oracle_score(olm, ctx, v) for v in range(V)]
            out.append(max(range(V), key=lambda v: (fused[v], -v)))
    return out, blank_decisions


def simulate_aed(scorer, olm: OracleLM, lm_weight: float, max_length: int):
    V = scorer.alphabet_size - 1
    history = [BOS_ID] if ((), BOS_ID) in olm.probs else []
    out: list[int] = []
    for u in range(max_length):
        row = scorer(0, u, out[-1] if out else None)
        ctx = _ctx(olm, history)
        fused = [float(row[v]) + lm_weight * oracle_score(olm, ctx, v) for v in range(V)]
        fused.append(float(row[V]) + lm_weight * oracle_final(olm, ctx))
        k = max(range(V + 1), key=lambda i: (fused[i], -i))
        if k == V:
            return out, False
        out.append(k)
        history.append(k)
    return out, True


# --- fusion efficacy benchmark ---------------------------------------------------


@dataclass
class EfficacyData:
    lm: FlatLM
    dev: list  # (rows, ref) pairs
    test: list


def make_efficacy_data(
    seed: int = 2025,
    vocab_size: int = 32,
    order: int = 3,
    train_sentences: int = 2000,
    eval_sentences: int = 60,
    confusion_prob: float = 0.3,
) -> EfficacyData:
    """CTC outputs biased toward a wrong token, plus an LM of the right text.

    Sentences come from one sparse Markov source; the LM is estimated on a
    training sample of it. Every reference token gets one frame followed by a
    blank frame. With probability ``confusion_prob`` the frame prefers a fixed
    confusable token by a small margin; otherwise the right token wins.
    """
    rng = np.random.default_rng(seed)
    corpus = markov_corpus(seed, vocab_size, train_sentences + 2 * eval_sentences, branching=2)
    train, held = corpus[:train_sentences], corpus[train_sentences:]
    lm = build(estimate_fixture(train, order), vocab_size, order)
    used = vocab_size - 1
    confusable = (np.arange(used) + 1 + rng.integers(0, used - 1, size=used)) % used

    def frames(ref):
        rows = []
        for y in ref:
            logits = rng.normal(0.0, 0.5, size=vocab_size + 1)
            logits[vocab_size] = 0.0
            logits[y] += 6.0
            if rng.random() < confusion_prob:
                logits[confusable[y]] = logits[y] + rng.uniform(0.2, 1.5)
            rows.append(logits)
            blank = rng.normal(0.0, 0.5, size=vocab_size + 1)
            blank[vocab_size] = 6.0
            rows.append(blank)
        rows = np.asarray(rows)
        m = rows.max(axis=1, keepdims=True)
        return rows - m - np.log(np.exp(rows - m).sum(axis=1, keepdims=True))

    dev = [(frames(r), r) for r in held[:eval_sentences]]
    test = [(frames(r), r) for r in held[eval_sentences:]]
    return EfficacyData(lm, dev, test)
