"""Array-based n-gram language model with full-vocabulary batched queries
and greedy shallow-fusion decoders for CTC, transducer and AED outputs."""

from flatlm.arpa import NGramEntry, Vocabulary, map_vocab, parse_arpa, validate
from flatlm.lm import (
    FlatLM,
    advance,
    build,
    build_from_arpa,
    load,
    query_full,
    query_full_batched,
    save,
    score_sentence,
)

__all__ = [
    "FlatLM",
    "NGramEntry",
    "Vocabulary",
    "advance",
    "build",
    "build_from_arpa",
    "load",
    "map_vocab",
    "parse_arpa",
    "query_full",
    "query_full_batched",
    "save",
    "score_sentence",
    "validate",
]
