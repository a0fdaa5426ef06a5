"""Reading, writing and id-mapping of ARPA-format n-gram models.

Parsing is split in two stages. :func:`parse_arpa` keeps the base-10 values as
the decimal strings found in the file so that a model can be re-emitted
verbatim; :func:`map_vocab` replaces token strings by vocabulary ids and
converts log values to natural log, which is the form consumed by the builder.
"""

from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

logger = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

# meta ids live outside the scored range 0..V-1
BOS_ID = -1
EOS_ID = -2
UNK_ID = -3
RESERVED = {BOS: BOS_ID, EOS: EOS_ID, UNK: UNK_ID}
RESERVED_BY_ID = {v: k for k, v in RESERVED.items()}

LN10 = math.log(10.0)
# ARPA files use -99 (base 10) as "log of zero"
ARPA_DUMMY_LOG10 = -99.0
NEG_INF = -1e30

_HEADER_RE = re.compile(r"^ngram\s+(\d+)\s*=\s*(\d+)$")
_SECTION_RE = re.compile(r"^\\(\d+)-grams:$")


class ArpaError(ValueError):
    """Malformed ARPA input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CountMismatchError(ArpaError):
    """Header count disagrees with the number of lines in a section."""

    def __init__(self, order: int, declared: int, actual: int):
        self.order = order
        self.declared = declared
        self.actual = actual
        self.delta = actual - declared
        super().__init__(
            f"\\{order}-grams: header declares {declared} entries, found {actual} (delta {self.delta:+d})"
        )


class VocabError(ValueError):
    """Token string that does not belong to the vocabulary."""

    def __init__(self, token: str, line: int | None = None):
        self.token = token
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"token {token!r}{where} is not in the vocabulary")


@dataclass(frozen=True)
class ArpaHeader:
    """Declared n-gram counts from the ``\\data\\`` section."""

    counts: tuple[tuple[int, int], ...]

    def __post_init__(self):
        orders = [o for o, _ in self.counts]
        if orders != list(range(1, len(orders) + 1)):
            raise ArpaError(f"n-gram orders must be contiguous from 1, got {orders}")
        if any(c < 0 for _, c in self.counts):
            raise ArpaError("n-gram counts must be non-negative")

    @property
    def order(self) -> int:
        return len(self.counts)

    def as_dict(self) -> dict[int, int]:
        return dict(self.counts)


@dataclass(frozen=True)
class RawEntry:
    """One ARPA line with string tokens and verbatim base-10 values."""

    words: tuple[str, ...]
    logprob10: str
    backoff10: str | None = None
    line: int = field(default=0, compare=False)

    @property
    def order(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class NGramEntry:
    """Id-mapped n-gram with natural-log weights.

    ``context`` and ``token`` hold vocabulary ids; meta symbols use the
    negative ids :data:`BOS_ID`, :data:`EOS_ID` and :data:`UNK_ID`.
    """

    context: tuple[int, ...]
    token: int
    logprob: float
    backoff: float = 0.0
    line: int = field(default=0, compare=False)

    @property
    def order(self) -> int:
        return len(self.context) + 1

    @property
    def key(self) -> tuple[int, ...]:
        return self.context + (self.token,)

    @property
    def is_final(self) -> bool:
        """Entries predicting ``</s>`` carry the final weight of their context."""
        return self.token == EOS_ID


class Vocabulary:
    """Bidirectional map between token strings and dense ids ``0..V-1``."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = list(tokens)
        self._ids: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in RESERVED:
                raise ValueError(f"vocabulary line {i}: reserved symbol {tok!r} is not allowed")
            if tok in self._ids:
                raise ValueError(f"vocabulary line {i}: duplicate token {tok!r}")
            self._ids[tok] = i

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        """Read a vocabulary with one token per line; the id is the line index."""
        with open(path, encoding="utf-8") as f:
            return cls(line.rstrip("\r\n") for line in f)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        """Id of a token or meta symbol; raises ``KeyError`` when unknown."""
        if token in RESERVED:
            return RESERVED[token]
        return self._ids[token]

    def token_of(self, idx: int) -> str:
        if idx < 0:
            return RESERVED_BY_ID[idx]
        return self.tokens[idx]


def parse_arpa(source: IO[str] | Iterable[str]) -> tuple[ArpaHeader, list[RawEntry]]:
    """Parse ARPA text into a header and raw entries.

    Fields may be separated by tabs or spaces. Section order and declared
    counts are checked against the actual lines.

    Args:
        source: text stream or iterable of lines

    Returns:
        header and list of entries in file order

    Raises:
        ArpaError: missing ``\\data\\`` / ``\\end\\``, malformed lines
        CountMismatchError: declared and actual section sizes differ
    """
    counts: list[tuple[int, int]] = []
    entries: list[RawEntry] = []
    section_sizes: dict[int, int] = {}
    header: ArpaHeader | None = None
    state = "preamble"
    order = 0
    seen_end = False

    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        if state == "preamble":
            if line == "\\data\\":
                state = "data"
            continue
        if line == "\\end\\":
            seen_end = True
            break
        if state == "data":
            m = _HEADER_RE.match(line)
            if m:
                counts.append((int(m.group(1)), int(m.group(2))))
                continue
            header = ArpaHeader(tuple(counts))
            state = "body"
        m = _SECTION_RE.match(line)
        if m:
            order = int(m.group(1))
            if order != len(section_sizes) + 1:
                raise ArpaError(f"unexpected section \\{order}-grams:", lineno)
            if order > header.order:
                raise ArpaError(f"section \\{order}-grams: exceeds declared order {header.order}", lineno)
            section_sizes[order] = 0
            continue
        if order == 0:
            raise ArpaError(f"unexpected line outside any section: {line!r}", lineno)
        fields = line.split()
        if len(fields) == order + 1:
            backoff = None
        elif len(fields) == order + 2 and order < header.order:
            backoff = fields[-1]
        else:
            raise ArpaError(f"expected {order + 1} or {order + 2} fields in \\{order}-grams:, got {len(fields)}", lineno)
        try:
            value = float(fields[0])
            if backoff is not None:
                float(backoff)
        except ValueError:
            raise ArpaError(f"non-numeric weight in {line!r}", lineno) from None
        if not math.isfinite(value):
            raise ArpaError(f"non-finite log-probability {fields[0]!r}", lineno)
        entries.append(RawEntry(tuple(fields[1 : order + 1]), fields[0], backoff, lineno))
        section_sizes[order] += 1

    if state == "preamble":
        raise ArpaError("missing \\data\\ section")
    if not seen_end:
        raise ArpaError("missing \\end\\ terminator")
    if header is None:
        header = ArpaHeader(tuple(counts))
    for o, declared in header.counts:
        actual = section_sizes.get(o, 0)
        if actual != declared:
            raise CountMismatchError(o, declared, actual)
    return header, entries


def parse_arpa_file(path: str | Path) -> tuple[ArpaHeader, list[RawEntry]]:
    with open(path, encoding="utf-8") as f:
        return parse_arpa(f)


def write_arpa(entries: Sequence[RawEntry], sink: IO[str]) -> None:
    """Emit raw entries as ARPA text; inverse of :func:`parse_arpa`."""
    by_order: dict[int, list[RawEntry]] = defaultdict(list)
    for e in entries:
        by_order[e.order].append(e)
    max_order = max(by_order) if by_order else 0
    sink.write("\\data\\\n")
    for o in range(1, max_order + 1):
        sink.write(f"ngram {o}={len(by_order[o])}\n")
    for o in range(1, max_order + 1):
        sink.write(f"\n\\{o}-grams:\n")
        for e in by_order[o]:
            cols = [e.logprob10, " ".join(e.words)]
            if e.backoff10 is not None:
                cols.append(e.backoff10)
            sink.write("\t".join(cols) + "\n")
    sink.write("\n\\end\\\n")


def to_raw_entries(entries: Iterable[NGramEntry], vocab: Vocabulary) -> list[RawEntry]:
    """Convert id-mapped entries back to base-10 raw entries (for fixtures)."""
    out = []
    for e in entries:
        words = tuple(vocab.token_of(t) for t in e.key)
        if e.logprob <= NEG_INF:
            lp = f"{ARPA_DUMMY_LOG10:.1f}"
        else:
            lp = repr(e.logprob / LN10)
        has_backoff = e.token != EOS_ID and (e.backoff != 0.0 or e.token == BOS_ID)
        bo = repr(e.backoff / LN10) if has_backoff else None
        out.append(RawEntry(words, lp, bo))
    return out


def _to_natural(value10: str) -> float:
    v = float(value10)
    if v <= ARPA_DUMMY_LOG10:
        return NEG_INF
    return v * LN10


def map_vocab(
    raw: Iterable[RawEntry], vocab: Vocabulary, lenient: bool = False
) -> tuple[list[NGramEntry], int]:
    """Replace token strings by ids and convert weights to natural log.

    The ``<s>`` unigram keeps its backoff but its probability is replaced by
    the "effectively minus infinity" sentinel, since ``<s>`` is never
    predicted. Entries predicting ``</s>`` are kept; the builder turns them into
    final weights.

    Args:
        raw: entries from :func:`parse_arpa`
        vocab: token vocabulary
        lenient: drop entries with unknown tokens instead of raising

    Returns:
        mapped entries (input order preserved) and number of dropped entries
    """
    out: list[NGramEntry] = []
    dropped = 0
    for e in raw:
        try:
            ids = tuple(vocab.id_of(w) for w in e.words)
        except KeyError as exc:
            if not lenient:
                raise VocabError(exc.args[0], e.line) from None
            dropped += 1
            continue
        logprob = _to_natural(e.logprob10)
        if ids == (BOS_ID,):
            logprob = NEG_INF
        backoff = _to_natural(e.backoff10) if e.backoff10 is not None else 0.0
        out.append(NGramEntry(ids[:-1], ids[-1], logprob, backoff, e.line))
    if dropped:
        logger.warning("dropped %d n-grams with out-of-vocabulary tokens", dropped)
    return out, dropped


@dataclass
class ValidationReport:
    """Violations found by :func:`validate`, grouped by check."""

    missing_unigram: list[tuple[int, int]] = field(default_factory=list)  # (token, line)
    missing_eos: bool = False
    predicts_bos: list[int] = field(default_factory=list)  # lines
    duplicates: list[tuple[tuple[int, ...], int, int]] = field(default_factory=list)  # (key, line, line)
    bad_order: list[int] = field(default_factory=list)  # lines

    @property
    def ok(self) -> bool:
        return not (self.missing_unigram or self.missing_eos or self.predicts_bos or self.duplicates or self.bad_order)

    @property
    def fatal(self) -> bool:
        return bool(self.missing_unigram or self.missing_eos or self.duplicates or self.bad_order)

    def messages(self) -> list[str]:
        msgs = []
        for tok, line in self.missing_unigram:
            msgs.append(f"line {line}: token id {tok} has no unigram entry")
        if self.missing_eos:
            msgs.append("missing </s> unigram")
        for line in self.predicts_bos:
            msgs.append(f"line {line}: n-gram predicts <s>")
        for key, first, second in self.duplicates:
            msgs.append(f"lines {first} and {second}: duplicate n-gram {key}")
        for line in self.bad_order:
            msgs.append(f"line {line}: n-gram order outside 1..max order")
        return msgs


def validate(entries: Sequence[NGramEntry], max_order: int) -> ValidationReport:
    """Check the assumptions the builder relies on.

    Checks: every token has a unigram, ``</s>`` unigram exists, only the
    ``<s>`` unigram predicts ``<s>``, no duplicate n-grams, orders within
    ``1..max_order``. Duplicates, missing unigrams, the missing ``</s>``
    unigram and bad orders are fatal for :func:`flatlm.lm.build`.
    """
    report = ValidationReport()
    unigrams = {e.token for e in entries if e.order == 1}
    report.missing_eos = EOS_ID not in unigrams

    first_seen: dict[tuple[int, ...], int] = {}
    reported_missing: set[int] = set()
    for e in entries:
        if not 1 <= e.order <= max_order:
            report.bad_order.append(e.line)
        if e.token == BOS_ID and e.order > 1:
            report.predicts_bos.append(e.line)
        if e.key in first_seen:
            report.duplicates.append((e.key, first_seen[e.key], e.line))
        else:
            first_seen[e.key] = e.line
        for tok in e.key:
            if tok not in unigrams and tok not in reported_missing and tok != EOS_ID:
                reported_missing.add(tok)
                report.missing_unigram.append((tok, e.line))
    return report
