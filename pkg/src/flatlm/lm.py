"""Flattened trie representation of a backoff n-gram LM.

All arcs live in three parallel arrays sorted by ``(from_state, token)``;
``start_arcs``/``end_arcs`` give each state's half-open arc range, and each
state has one backoff transition. The root (empty context) state holds an arc
for every vocabulary token, so a full-vocabulary query walks at most ``order``
states down the backoff chain and never needs a special unknown-token case.
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from flatlm.arpa import (
    BOS_ID,
    EOS_ID,
    NEG_INF,
    UNK_ID,
    NGramEntry,
    ValidationReport,
    Vocabulary,
    map_vocab,
    parse_arpa_file,
    validate,
)

MAGIC = b"NGLM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQII")
_CRC = struct.Struct("<I")

ROOT_STATE = 0


class BuildError(ValueError):
    """The entries cannot be turned into a model."""

    def __init__(self, message: str, report: ValidationReport | None = None):
        self.report = report
        super().__init__(message)


class ModelFormatError(ValueError):
    """Binary model cannot be loaded."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


@dataclass(frozen=True, eq=False)
class FlatLM:
    """Immutable array-based n-gram model.

    Weights are natural-log float32. ``contexts`` (the token sequence of every
    state) and ``num_unk_filled`` are only known for freshly built models and
    are not persisted.
    """

    arc_tokens: np.ndarray  # [num_arcs] int64
    arc_weights: np.ndarray  # [num_arcs] float32
    arc_to_states: np.ndarray  # [num_arcs] int64
    start_arcs: np.ndarray  # [num_states] int64
    end_arcs: np.ndarray  # [num_states] int64
    boff_weights: np.ndarray  # [num_states] float32
    boff_to_states: np.ndarray  # [num_states] int64
    final_weights: np.ndarray  # [num_states] float32
    root_state: int
    bos_state: int
    order: int
    vocab_size: int
    contexts: tuple[tuple[int, ...], ...] | None = field(default=None, repr=False)
    num_unk_filled: int | None = None

    def __post_init__(self):
        for name in _ARRAY_FIELDS:
            getattr(self, name).setflags(write=False)

    @property
    def num_states(self) -> int:
        return len(self.start_arcs)

    @property
    def num_arcs(self) -> int:
        return len(self.arc_tokens)

    def arrays_equal(self, other: "FlatLM") -> bool:
        """Bit-exact comparison of every array and scalar field."""
        if (self.root_state, self.bos_state, self.order, self.vocab_size) != (
            other.root_state,
            other.bos_state,
            other.order,
            other.vocab_size,
        ):
            return False
        for name in _ARRAY_FIELDS:
            a, b = getattr(self, name), getattr(other, name)
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


_ARRAY_FIELDS = (
    "arc_tokens",
    "arc_weights",
    "arc_to_states",
    "start_arcs",
    "end_arcs",
    "boff_weights",
    "boff_to_states",
    "final_weights",
)


@dataclass(frozen=True)
class QueryResult:
    """Scores and next states over the whole vocabulary for one state."""

    scores: np.ndarray  # [V] float32
    next_states: np.ndarray  # [V] int64
    iterations: int = 0


@dataclass(frozen=True)
class BatchedQueryResult:
    scores: np.ndarray  # [B, V] float32
    next_states: np.ndarray  # [B, V] int64
    iterations: int = 0


def normalized_unk_weight(unk_logprob: float, num_missing: int) -> float:
    """Weight of each vocabulary token absent from the unigrams.

    The ``<unk>`` probability mass is split evenly over the missing tokens.
    """
    return unk_logprob - math.log(max(1, num_missing))


def _longest_suffix_state(seq: tuple[int, ...], state_of: dict[tuple[int, ...], int]) -> int:
    for i in range(len(seq)):
        s = state_of.get(seq[i:])
        if s is not None:
            return s
    return ROOT_STATE


def precompute_finals(
    boff_weights: np.ndarray, boff_to_states: np.ndarray, explicit: dict[int, float]
) -> np.ndarray:
    """Final (end-of-sentence) weight of every state.

    States are visited in id order; backoff targets always have a shorter
    context and therefore a smaller id, so each lookup hits a finished value.

    Args:
        boff_weights: per-state backoff weights (float64 for accuracy)
        boff_to_states: per-state backoff targets
        explicit: state -> weight of an explicit ``</s>`` n-gram; must contain the root

    Returns:
        float64 array of final weights
    """
    num_states = len(boff_weights)
    finals = np.empty(num_states, dtype=np.float64)
    for s in range(num_states):
        w = explicit.get(s)
        if w is None:
            target = int(boff_to_states[s])
            assert target < s, "backoff target must precede its source"
            w = boff_weights[s] + finals[target]
        finals[s] = w
    return finals


def build(entries: Sequence[NGramEntry], vocab_size: int, order: int | None = None) -> FlatLM:
    """Build the flattened trie from id-mapped entries.

    State ids are deterministic: root is 0, then one state per non-final
    n-gram of order below ``order``, sorted by (length, ids). Arcs of the
    highest order point to the longest existing suffix state. N-grams that
    involve ``<unk>`` beyond its unigram are unreachable (no vocabulary token
    maps to it) and are skipped.

    Args:
        entries: output of :func:`flatlm.arpa.map_vocab`
        vocab_size: V, number of scored tokens
        order: model order N (default: highest entry order)

    Returns:
        built model

    Raises:
        BuildError: fatal validation failures, missing ``<unk>`` when needed,
            or n-grams whose context has no state
    """
    if vocab_size <= 0:
        raise BuildError("vocabulary must not be empty")
    if order is None:
        order = max((e.order for e in entries), default=1)
    report = validate(entries, order)
    if report.fatal:
        raise BuildError("invalid n-gram model:\n  " + "\n  ".join(report.messages()), report)

    unk_logprob = None
    eos_logprob = None
    present: set[int] = set()
    usable: list[NGramEntry] = []
    for e in entries:
        if e.order == 1:
            if e.token == UNK_ID:
                unk_logprob = e.logprob
                continue
            if e.token == EOS_ID:
                eos_logprob = e.logprob
                continue
            if e.token >= vocab_size:
                raise BuildError(f"token id {e.token} outside vocabulary of size {vocab_size}")
            if e.token >= 0:
                present.add(e.token)
        elif UNK_ID in e.key:
            continue
        usable.append(e)

    num_missing = vocab_size - len(present)
    if num_missing and unk_logprob is None:
        raise BuildError(f"<unk> unigram is missing while {num_missing} vocabulary tokens have no unigram")

    state_keys = sorted(
        {e.key for e in usable if e.order < order and not e.is_final},
        key=lambda k: (len(k), k),
    )
    state_of: dict[tuple[int, ...], int] = {(): ROOT_STATE}
    for k in state_keys:
        state_of[k] = len(state_of)
    contexts = [()] + state_keys
    num_states = len(contexts)

    backoff_of = {e.key: e.backoff for e in usable}
    boff_w = np.zeros(num_states, dtype=np.float64)
    boff_to = np.zeros(num_states, dtype=np.int64)
    for s, key in enumerate(contexts):
        if s == ROOT_STATE:
            continue
        boff_to[s] = _longest_suffix_state(key[1:], state_of)
        boff_w[s] = backoff_of[key]

    explicit_final = {ROOT_STATE: eos_logprob}
    src, tok, wgt, dst = [], [], [], []
    for e in usable:
        if e.token == BOS_ID:
            continue
        from_state = state_of.get(e.context)
        if from_state is None:
            raise BuildError(f"line {e.line}: context {e.context} of n-gram {e.key} has no state")
        if e.is_final:
            if e.order > 1:
                explicit_final[from_state] = e.logprob
            continue
        src.append(from_state)
        tok.append(e.token)
        wgt.append(e.logprob)
        dst.append(_longest_suffix_state(e.key, state_of))

    unk_w = normalized_unk_weight(unk_logprob, num_missing) if num_missing else 0.0
    for t in range(vocab_size):
        if t not in present:
            src.append(ROOT_STATE)
            tok.append(t)
            wgt.append(unk_w)
            dst.append(ROOT_STATE)

    src_a = np.asarray(src, dtype=np.int64)
    tok_a = np.asarray(tok, dtype=np.int64)
    perm = np.lexsort((tok_a, src_a))
    src_a = src_a[perm]
    state_ids = np.arange(num_states)
    finals = precompute_finals(boff_w, boff_to, explicit_final)

    return FlatLM(
        arc_tokens=tok_a[perm],
        arc_weights=np.asarray(wgt, dtype=np.float64)[perm].astype(np.float32),
        arc_to_states=np.asarray(dst, dtype=np.int64)[perm],
        start_arcs=np.searchsorted(src_a, state_ids, side="left").astype(np.int64),
        end_arcs=np.searchsorted(src_a, state_ids, side="right").astype(np.int64),
        boff_weights=boff_w.astype(np.float32),
        boff_to_states=boff_to,
        final_weights=finals.astype(np.float32),
        root_state=ROOT_STATE,
        bos_state=state_of.get((BOS_ID,), ROOT_STATE),
        order=order,
        vocab_size=vocab_size,
        contexts=tuple(contexts),
        num_unk_filled=num_missing,
    )


def build_from_arpa(path: str | Path, vocab: Vocabulary, lenient: bool = False) -> FlatLM:
    """Parse, map and build in one go."""
    header, raw = parse_arpa_file(path)
    entries, _ = map_vocab(raw, vocab, lenient=lenient)
    return build(entries, len(vocab), header.order)


def _check_state(lm: FlatLM, state: int) -> None:
    if not 0 <= state < lm.num_states:
        raise IndexError(f"state {state} out of range [0, {lm.num_states})")


def query_full(lm: FlatLM, state: int) -> QueryResult:
    """Scores and next states of all V tokens from ``state``.

    Walks the backoff chain from ``state``; at each level the state's arcs
    fill the tokens that are still unresolved, with the accumulated backoff
    added. Only the arc range is touched per level, which gives the same
    result as scattering into a dense row and masking.
    """
    _check_state(lm, state)
    V = lm.vocab_size
    next_states = np.full(V, -1, dtype=np.int64)
    next_scores = np.zeros(V, dtype=np.float32)
    acc_boff = np.float32(0.0)
    remaining = V
    iterations = 0
    while remaining:
        iterations += 1
        s, e = lm.start_arcs[state], lm.end_arcs[state]
        tokens = lm.arc_tokens[s:e]
        mask = next_states[tokens] == -1
        sel = tokens[mask]
        next_scores[sel] = acc_boff + lm.arc_weights[s:e][mask]
        next_states[sel] = lm.arc_to_states[s:e][mask]
        remaining -= len(sel)
        acc_boff = acc_boff + lm.boff_weights[state]
        state = lm.boff_to_states[state]
    return QueryResult(next_scores, next_states, iterations)


def query_full_batched(lm: FlatLM, states: Sequence[int] | np.ndarray) -> BatchedQueryResult:
    """Row-wise :func:`query_full` for a batch of states.

    Each iteration gathers the arc ranges of every still-active row at once.
    Rows drop out as soon as all their tokens are resolved, so the number of
    iterations is the deepest backoff walk in the batch.
    """
    states = np.asarray(states, dtype=np.int64).reshape(-1)
    if states.size == 0:
        raise ValueError("batch must contain at least one state")
    bad = np.flatnonzero((states < 0) | (states >= lm.num_states))
    if bad.size:
        raise IndexError(f"batch index {bad[0]}: state {states[bad[0]]} out of range [0, {lm.num_states})")
    B, V = states.size, lm.vocab_size
    next_states = np.full(B * V, -1, dtype=np.int64)
    next_scores = np.zeros(B * V, dtype=np.float32)
    acc_boff = np.zeros(B, dtype=np.float32)
    remaining = np.full(B, V, dtype=np.int64)
    cur = states.copy()
    active = np.arange(B)
    iterations = 0
    while active.size:
        iterations += 1
        st = cur[active]
        starts = lm.start_arcs[st]
        counts = lm.end_arcs[st] - starts
        offsets = np.cumsum(counts) - counts
        arcs = np.arange(counts.sum()) - np.repeat(offsets - starts, counts)
        rows = np.repeat(active, counts)
        flat = rows * V + lm.arc_tokens[arcs]
        mask = next_states[flat] == -1
        sel = flat[mask]
        next_scores[sel] = np.repeat(acc_boff[active], counts)[mask] + lm.arc_weights[arcs[mask]]
        next_states[sel] = lm.arc_to_states[arcs[mask]]
        remaining -= np.bincount(rows[mask], minlength=B)
        acc_boff[active] = acc_boff[active] + lm.boff_weights[st]
        cur[active] = lm.boff_to_states[st]
        active = active[remaining[active] > 0]
    return BatchedQueryResult(next_scores.reshape(B, V), next_states.reshape(B, V), iterations)


def advance(lm: FlatLM, state: int, token: int) -> tuple[float, int]:
    """Weight and next state for a single token (binary search per level)."""
    _check_state(lm, state)
    if not 0 <= token < lm.vocab_size:
        raise IndexError(f"token {token} out of range [0, {lm.vocab_size})")
    acc_boff = np.float32(0.0)
    while True:
        s, e = lm.start_arcs[state], lm.end_arcs[state]
        i = s + np.searchsorted(lm.arc_tokens[s:e], token)
        if i < e and lm.arc_tokens[i] == token:
            return float(acc_boff + lm.arc_weights[i]), int(lm.arc_to_states[i])
        acc_boff = acc_boff + lm.boff_weights[state]
        state = lm.boff_to_states[state]


def score_sentence(lm: FlatLM, tokens: Sequence[int]) -> float:
    """Natural-log probability of a full sentence, end-of-sentence included."""
    state = lm.bos_state
    total = 0.0
    for t in tokens:
        w, state = advance(lm, state, t)
        total += w
    return total + float(lm.final_weights[state])


def unk_filled_tokens(lm: FlatLM) -> np.ndarray:
    """Tokens whose root arc carries the normalized ``<unk>`` weight.

    Only identifiable for order >= 2, where every real unigram owns a state.
    """
    if lm.order < 2:
        return np.zeros(0, dtype=np.int64)
    s, e = lm.start_arcs[lm.root_state], lm.end_arcs[lm.root_state]
    return lm.arc_tokens[s:e][lm.arc_to_states[s:e] == lm.root_state]


# --- persistence ---------------------------------------------------------------

_DISK_DTYPES = {
    "arc_tokens": "<u4",
    "arc_weights": "<f4",
    "arc_to_states": "<u4",
    "start_arcs": "<u8",
    "end_arcs": "<u8",
    "boff_weights": "<f4",
    "boff_to_states": "<u4",
    "final_weights": "<f4",
}
_MEM_DTYPES = {
    "arc_tokens": np.int64,
    "arc_weights": np.float32,
    "arc_to_states": np.int64,
    "start_arcs": np.int64,
    "end_arcs": np.int64,
    "boff_weights": np.float32,
    "boff_to_states": np.int64,
    "final_weights": np.float32,
}
_PER_ARC = ("arc_tokens", "arc_weights", "arc_to_states")


def to_bytes(lm: FlatLM) -> bytes:
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            MAGIC, FORMAT_VERSION, lm.order, lm.vocab_size, lm.num_states, lm.num_arcs, lm.root_state, lm.bos_state
        )
    )
    for name in _ARRAY_FIELDS:
        buf.write(np.ascontiguousarray(getattr(lm, name), dtype=_DISK_DTYPES[name]).tobytes())
    payload = buf.getvalue()
    return payload + _CRC.pack(zlib.crc32(payload))


def from_bytes(data: bytes) -> FlatLM:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not an NGLM model file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedModelError("model header is truncated")
    _, version, order, vocab_size, num_states, num_arcs, root, bos = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported model format version {version}")
    sizes = {
        name: (num_arcs if name in _PER_ARC else num_states) * np.dtype(_DISK_DTYPES[name]).itemsize
        for name in _ARRAY_FIELDS
    }
    expected = _HEADER.size + sum(sizes.values()) + _CRC.size
    if len(data) < expected:
        raise TruncatedModelError(f"model payload is truncated: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise ModelFormatError(f"unexpected trailing data: {len(data) - expected} bytes")
    (crc,) = _CRC.unpack_from(data, expected - _CRC.size)
    if zlib.crc32(data[: expected - _CRC.size]) != crc:
        raise ChecksumError("model checksum mismatch")
    arrays = {}
    offset = _HEADER.size
    for name in _ARRAY_FIELDS:
        raw = np.frombuffer(data, dtype=_DISK_DTYPES[name], count=sizes[name] // np.dtype(_DISK_DTYPES[name]).itemsize, offset=offset)
        arrays[name] = raw.astype(_MEM_DTYPES[name])
        offset += sizes[name]
    return FlatLM(**arrays, root_state=root, bos_state=bos, order=order, vocab_size=vocab_size)


def save(lm: FlatLM, sink: str | Path | IO[bytes]) -> None:
    """Write the binary model format (little-endian, CRC32-terminated)."""
    data = to_bytes(lm)
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as f:
            f.write(data)
    else:
        sink.write(data)


def load(source: str | Path | IO[bytes]) -> FlatLM:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as f:
            return from_bytes(f.read())
    return from_bytes(source.read())
