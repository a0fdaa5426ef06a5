"""Greedy decoding with n-gram shallow fusion for CTC, transducer and AED outputs.

Every decoder reads per-step log-probability rows from a :class:`StepScorer`
whose alphabet is the LM vocabulary plus one special symbol stored in the last
column (blank for CTC and transducers, eos for AED). The LM row for the current
state is a single :func:`flatlm.lm.query_full` call, cached while the state
does not change.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, Protocol

import numpy as np

from flatlm.lm import FlatLM, advance, query_full

MASK64 = (1 << 64) - 1

LOGITS_MAGIC = b"LGTS"
LOGITS_VERSION = 1
_LOGITS_HEADER = struct.Struct("<4sIII")


class DecodeError(ValueError):
    """Scorer and model do not fit together, or the scorer ran out of rows."""


class LogitFormatError(ValueError):
    """Malformed logit replay file."""


class StepScorer(Protocol):
    """Source of per-step log-probability rows.

    ``alphabet_size`` is V + 1 and ``special_index`` is V (blank or eos).
    """

    alphabet_size: int
    special_index: int

    def __call__(self, t: int, u: int, last_token: int | None) -> np.ndarray: ...


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized :func:`splitmix64` over uint64 (wrap-around arithmetic)."""
    z = x.astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_prefix(*values: int) -> int:
    """Fold values into one 64-bit hash: ``h = splitmix64(h ^ v)`` for each."""
    h = 0
    for v in values:
        h = splitmix64(h ^ (v & MASK64))
    return h


class SyntheticScorer:
    """Deterministic pseudo-random scorer.

    Element ``v`` of the row for ``(t, u, last)`` is the fold of
    ``(seed, t, u, last + 1, v)`` through splitmix64, mapped to [0, 1) from the
    top 53 bits and divided by ``temperature`` before the log-softmax, so a
    small temperature gives peaked rows. ``last=None`` hashes as 0.
    """

    def __init__(self, seed: int, alphabet_size: int, temperature: float = 0.1):
        if alphabet_size < 2:
            raise ValueError("alphabet must hold at least one token and the special symbol")
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.seed = seed
        self.alphabet_size = alphabet_size
        self.special_index = alphabet_size - 1
        self.temperature = temperature
        self._columns = np.arange(alphabet_size, dtype=np.uint64)

    def raw(self, t: int, u: int, last_token: int | None) -> np.ndarray:
        """Uniform [0, 1) values before scaling."""
        prefix = hash_prefix(self.seed, t, u, 0 if last_token is None else last_token + 1)
        h = splitmix64_array(np.uint64(prefix) ^ self._columns)
        return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def __call__(self, t: int, u: int, last_token: int | None) -> np.ndarray:
        return log_softmax(self.raw(t, u, last_token) / self.temperature)


class ReplayScorer:
    """Rows from a stored matrix, indexed by frame (CTC) or emission step (AED)."""

    def __init__(self, rows: np.ndarray, index_by: str = "frame"):
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] < 2:
            raise ValueError(f"expected a [rows, V+1] matrix, got shape {rows.shape}")
        if index_by not in ("frame", "step"):
            raise ValueError(f"index_by must be 'frame' or 'step', got {index_by!r}")
        self.rows = rows
        self.index_by = index_by
        self.alphabet_size = rows.shape[1]
        self.special_index = self.alphabet_size - 1

    @property
    def num_rows(self) -> int:
        return self.rows.shape[0]

    def __call__(self, t: int, u: int, last_token: int | None) -> np.ndarray:
        i = t if self.index_by == "frame" else u
        if i >= self.num_rows:
            raise DecodeError(f"replay scorer has {self.num_rows} rows, row {i} requested")
        return self.rows[i]


def write_logits(rows: np.ndarray, sink: str | Path | IO[bytes]) -> None:
    """Store a [rows, cols] matrix in the LGTS replay format."""
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("logits must be a 2-D matrix")
    data = _LOGITS_HEADER.pack(LOGITS_MAGIC, LOGITS_VERSION, *rows.shape) + rows.tobytes()
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)


def read_logits(source: str | Path | IO[bytes]) -> np.ndarray:
    data = Path(source).read_bytes() if isinstance(source, (str, Path)) else source.read()
    if len(data) < _LOGITS_HEADER.size or data[:4] != LOGITS_MAGIC:
        raise LogitFormatError("not a logit replay file (bad magic)")
    _, version, n_rows, n_cols = _LOGITS_HEADER.unpack_from(data)
    if version != LOGITS_VERSION:
        raise LogitFormatError(f"unsupported logit file version {version}")
    expected = _LOGITS_HEADER.size + 4 * n_rows * n_cols
    if len(data) != expected:
        raise LogitFormatError(f"logit payload has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_LOGITS_HEADER.size).reshape(n_rows, n_cols).astype(np.float32)


@dataclass
class FusionConfig:
    """Shallow-fusion settings.

    Attributes:
        lm_weight: weight of the n-gram LM scores
        ilm_weight: weight of the subtracted internal-LM scores (transducer only)
        ilm_scorer: source of internal-LM rows, called like a :class:`StepScorer`;
            only the first V columns are used
        max_symbols_per_frame: transducer emissions allowed per frame
        max_length: AED emission cap
        start_state: ``"root"`` or ``"bos"``; default is root for CTC and
            transducers and bos for AED
    """

    lm_weight: float = 0.0
    ilm_weight: float = 0.0
    ilm_scorer: Callable[[int, int, int | None], np.ndarray] | None = None
    max_symbols_per_frame: int = 10
    max_length: int = 100
    start_state: str | None = None

    def __post_init__(self):
        for name in ("lm_weight", "ilm_weight"):
            w = getattr(self, name)
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {w}")
        if self.ilm_weight and self.ilm_scorer is None:
            raise ValueError("ilm_weight requires an ilm_scorer")
        if self.max_symbols_per_frame < 1 or self.max_length < 1:
            raise ValueError("max_symbols_per_frame and max_length must be >= 1")
        if self.start_state not in (None, "root", "bos"):
            raise ValueError(f"start_state must be 'root' or 'bos', got {self.start_state!r}")


@dataclass
class DecodeResult:
    tokens: list[int] = field(default_factory=list)
    lm_advances: int = 0
    blank_steps: int = 0
    truncated: bool = False
    symbol_cap_hits: int = 0
    lm_states: list[int] = field(default_factory=list)
    per_step_scores: list[float] = field(default_factory=list)


def fuse_scores(
    asr_row: np.ndarray,
    lm_row: np.ndarray,
    lm_weight: float,
    aux_row: np.ndarray | None = None,
    ilm_weight: float = 0.0,
) -> np.ndarray:
    """``asr + lm_weight * lm - ilm_weight * aux`` over the V regular tokens."""
    asr_row = np.asarray(asr_row, dtype=np.float64)
    lm_row = np.asarray(lm_row)
    if asr_row.shape != lm_row.shape:
        raise ValueError(f"length mismatch: asr {asr_row.shape} vs lm {lm_row.shape}")
    out = asr_row + lm_weight * lm_row.astype(np.float64)
    if aux_row is not None:
        aux_row = np.asarray(aux_row)
        if aux_row.shape != asr_row.shape:
            raise ValueError(f"length mismatch: asr {asr_row.shape} vs aux {aux_row.shape}")
        out -= ilm_weight * aux_row.astype(np.float64)
    return out


class _LMTracker:
    """Current LM state plus a cached full-vocabulary row for it."""

    def __init__(self, lm: FlatLM, state: int):
        self.lm = lm
        self.state = state
        self._row = None
        self.history: list[int] = []

    def scores(self) -> np.ndarray:
        if self._row is None:
            self._row = query_full(self.lm, self.state)
        return self._row.scores

    def step(self, token: int) -> None:
        if self._row is not None:
            self.state = int(self._row.next_states[token])
        else:
            self.state = advance(self.lm, self.state, token)[1]
        self._row = None
        self.history.append(self.state)


def _check_alphabet(scorer: StepScorer, lm: FlatLM) -> int:
    V = lm.vocab_size
    if scorer.alphabet_size != V + 1:
        raise DecodeError(f"scorer alphabet size {scorer.alphabet_size} does not match LM vocabulary {V} + 1")
    if scorer.special_index != V:
        raise DecodeError(f"special symbol must be the last column ({V}), got {scorer.special_index}")
    return V


def _start_state(lm: FlatLM, cfg: FusionConfig, default: str) -> int:
    return lm.bos_state if (cfg.start_state or default) == "bos" else lm.root_state


def _num_frames(scorer: StepScorer, num_frames: int | None) -> int:
    rows = getattr(scorer, "num_rows", None)
    if num_frames is None:
        if rows is None:
            raise DecodeError("num_frames is required for scorers without a fixed row count")
        return rows
    if num_frames < 0:
        raise DecodeError(f"num_frames must be >= 0, got {num_frames}")
    if rows is not None and rows < num_frames:
        raise DecodeError(f"scorer has {rows} rows, {num_frames} frames requested")
    return num_frames


def ctc_greedy_fused(
    scorer: StepScorer, lm: FlatLM, cfg: FusionConfig, num_frames: int | None = None
) -> DecodeResult:
    """Greedy CTC decoding with LM fusion.

    Per frame three groups compete: blank and the previous frame's token keep
    their raw scores (a repeat collapses, so the LM must not see it), every
    other token gets ``lm_weight`` times its LM score added. Ties go to blank,
    then to the lowest token id.
    """
    V = _check_alphabet(scorer, lm)
    T = _num_frames(scorer, num_frames)
    tracker = _LMTracker(lm, _start_state(lm, cfg, "root"))
    res = DecodeResult()
    prev = None
    for t in range(T):
        row = np.asarray(scorer(t, 0, None), dtype=np.float64)
        if cfg.lm_weight:
            cand = fuse_scores(row[:V], tracker.scores(), cfg.lm_weight)
        else:
            cand = row[:V].copy()
        if prev is not None:
            cand[prev] = row[prev]
        best = int(np.argmax(cand))
        if row[V] >= cand[best]:
            res.blank_steps += 1
            res.per_step_scores.append(float(row[V]))
            prev = None
            continue
        res.per_step_scores.append(float(cand[best]))
        if best != prev:
            res.tokens.append(best)
            tracker.step(best)
            res.lm_advances += 1
        prev = best
    res.lm_states = tracker.history
    return res


def transducer_greedy_fused(
    scorer: StepScorer, lm: FlatLM, cfg: FusionConfig, num_frames: int
) -> DecodeResult:
    """Greedy transducer decoding with two-stage token selection.

    Stage one is the plain argmax over tokens and blank; a blank decision is
    final and never touches the LM. Otherwise stage two picks the argmax of the
    fused scores over the regular tokens only. At most
    ``cfg.max_symbols_per_frame`` tokens are emitted per frame.
    """
    V = _check_alphabet(scorer, lm)
    if num_frames < 0:
        raise DecodeError(f"num_frames must be >= 0, got {num_frames}")
    tracker = _LMTracker(lm, _start_state(lm, cfg, "root"))
    res = DecodeResult()
    last = None
    fused_needed = bool(cfg.lm_weight or cfg.ilm_weight)
    for t in range(num_frames):
        emitted = 0
        while True:
            if emitted == cfg.max_symbols_per_frame:
                res.symbol_cap_hits += 1
                res.truncated = True
                break
            u = len(res.tokens)
            row = np.asarray(scorer(t, u, last), dtype=np.float64)
            k = int(np.argmax(row))
            if k == V:
                res.blank_steps += 1
                break
            score = row[k]
            if fused_needed:
                lm_row = tracker.scores() if cfg.lm_weight else np.zeros(V)
                aux = np.asarray(cfg.ilm_scorer(t, u, last))[:V] if cfg.ilm_weight else None
                fused = fuse_scores(row[:V], lm_row, cfg.lm_weight, aux, cfg.ilm_weight)
                k = int(np.argmax(fused))
                score = fused[k]
            res.tokens.append(k)
            res.per_step_scores.append(float(score))
            tracker.step(k)
            res.lm_advances += 1
            last = k
            emitted += 1
    res.lm_states = tracker.history
    return res


def aed_greedy_fused(scorer: StepScorer, lm: FlatLM, cfg: FusionConfig) -> DecodeResult:
    """Greedy AED decoding; eos is fused with the LM final weight of the state."""
    V = _check_alphabet(scorer, lm)
    tracker = _LMTracker(lm, _start_state(lm, cfg, "bos"))
    res = DecodeResult(truncated=True)
    last = None
    for u in range(cfg.max_length):
        row = np.asarray(scorer(0, u, last), dtype=np.float64)
        fused = row.copy()
        if cfg.lm_weight:
            fused[:V] += cfg.lm_weight * tracker.scores().astype(np.float64)
            fused[V] += cfg.lm_weight * float(lm.final_weights[tracker.state])
        k = int(np.argmax(fused))
        res.per_step_scores.append(float(fused[k]))
        if k == V:
            res.truncated = False
            break
        res.tokens.append(k)
        tracker.step(k)
        res.lm_advances += 1
        last = k
    res.lm_states = tracker.history
    return res


# --- unfused counterparts -------------------------------------------------------


def ctc_greedy(scorer: StepScorer, num_frames: int) -> list[int]:
    """Plain greedy CTC: framewise argmax (blank wins ties), collapse, drop blanks."""
    blank = scorer.special_index
    out, prev = [], None
    for t in range(num_frames):
        row = np.asarray(scorer(t, 0, None))
        tokens = np.delete(row, blank)
        best = int(np.argmax(tokens))
        label = blank if row[blank] >= tokens[best] else best
        if label != blank and label != prev:
            out.append(label)
        prev = label
    return out


def transducer_greedy(scorer: StepScorer, num_frames: int, max_symbols_per_frame: int = 10) -> list[int]:
    blank = scorer.special_index
    out: list[int] = []
    for t in range(num_frames):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(scorer(t, len(out), out[-1] if out else None)))
            if k == blank:
                break
            out.append(k)
    return out


def aed_greedy(scorer: StepScorer, max_length: int) -> list[int]:
    eos = scorer.special_index
    out: list[int] = []
    for u in range(max_length):
        k = int(np.argmax(scorer(0, u, out[-1] if out else None)))
        if k == eos:
            break
        out.append(k)
    return out
