"""Command line: build, score, decode, bench.

Exit codes: 0 success, 1 domain or validation failure, 2 usage or I/O failure.
"""

from __future__ import annotations

import argparse
import math
import sys
import time

import numpy as np

from flatlm import arpa, decoding
from flatlm.lm import (
    BuildError,
    ModelFormatError,
    advance,
    build,
    load,
    query_full_batched,
    save,
    unk_filled_tokens,
)

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _Usage()


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_model(path):
    try:
        return load(path)
    except (ModelFormatError, OSError) as exc:
        _err(f"cannot load model {path}: {exc}")
        return None


def cmd_build(args) -> int:
    try:
        vocab = arpa.Vocabulary.from_file(args.vocab)
        header, raw = arpa.parse_arpa_file(args.arpa)
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return EXIT_USAGE
    except (arpa.ArpaError, ValueError) as exc:
        _err(f"parse error: {exc}")
        return EXIT_DOMAIN
    try:
        entries, dropped = arpa.map_vocab(raw, vocab, lenient=args.lenient_oov)
        lm = build(entries, len(vocab), header.order)
    except BuildError as exc:
        _err(f"validation failed: {exc}")
        return EXIT_DOMAIN
    except arpa.VocabError as exc:
        _err(f"validation failed: {exc}")
        return EXIT_DOMAIN
    try:
        save(lm, args.out)
    except OSError as exc:
        _err(f"cannot write {args.out}: {exc}")
        return EXIT_USAGE
    print(
        f"order={lm.order} states={lm.num_states} arcs={lm.num_arcs} "
        f"unk_filled={lm.num_unk_filled} dropped_oov={dropped}"
    )
    return EXIT_OK


def cmd_score(args) -> int:
    lm = _load_model(args.model)
    if lm is None:
        return EXIT_DOMAIN
    try:
        vocab = arpa.Vocabulary.from_file(args.vocab)
        with open(args.text, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return EXIT_USAGE
    except ValueError as exc:
        _err(f"bad vocabulary: {exc}")
        return EXIT_DOMAIN
    if len(vocab) != lm.vocab_size:
        _err(f"vocabulary has {len(vocab)} tokens, model expects {lm.vocab_size}")
        return EXIT_DOMAIN

    unk_tokens = unk_filled_tokens(lm)
    oov_token = int(unk_tokens[0]) if len(unk_tokens) else None
    total, count, warnings = 0.0, 0, 0
    for lineno, line in enumerate(lines, start=1):
        words = line.split()
        if not words:
            _err(f"line {lineno}: empty line skipped")
            warnings += 1
            continue
        oov = [w for w in words if w not in vocab]
        if oov and oov_token is None:
            _err(f"line {lineno}: out-of-vocabulary {oov[0]!r} and no <unk>-filled token to score it; skipped")
            warnings += 1
            continue
        state, score = lm.bos_state, 0.0
        for w in words:
            weight, state = advance(lm, state, vocab.id_of(w) if w in vocab else oov_token)
            score += weight
        score += float(lm.final_weights[state])
        n = len(words) + 1
        total += score
        count += n
        print(f"{score:.6f}\t{score / n:.6f}\toov={len(oov)}")
    print(f"total\t{total:.6f}\ttokens\t{count}")
    ppl = f"{math.exp(-total / count):.6f}" if count else "n/a"
    print(f"perplexity\t{ppl}")
    if warnings:
        _err(f"{warnings} line(s) skipped")
    return EXIT_OK


def cmd_decode(args) -> int:
    lm = _load_model(args.model)
    if lm is None:
        return EXIT_DOMAIN
    V = lm.vocab_size
    if args.ilm_weight and args.mode != "rnnt":
        _err("--ilm-weight is only supported with --mode rnnt")
        return EXIT_USAGE
    vocab = None
    if args.vocab:
        try:
            vocab = arpa.Vocabulary.from_file(args.vocab)
        except (OSError, ValueError) as exc:
            _err(f"cannot read vocabulary: {exc}")
            return EXIT_USAGE

    if args.replay:
        if args.mode == "rnnt":
            _err("rnnt decoding needs a synthetic source (--seed)")
            return EXIT_USAGE
        try:
            rows = decoding.read_logits(args.replay)
        except OSError as exc:
            _err(f"I/O error: {exc}")
            return EXIT_USAGE
        except decoding.LogitFormatError as exc:
            _err(f"bad replay file: {exc}")
            return EXIT_DOMAIN
        if rows.shape[1] != V + 1:
            _err(f"replay file has {rows.shape[1]} columns, model vocabulary {V} needs {V + 1}")
            return EXIT_DOMAIN
        sources = [decoding.ReplayScorer(rows, "frame" if args.mode == "ctc" else "step")]
    else:
        sources = [decoding.SyntheticScorer(args.seed + i, V + 1, args.temperature) for i in range(args.utts)]

    ilm = decoding.SyntheticScorer(args.seed ^ 0x5BD1E995, V + 1, args.temperature) if args.ilm_weight else None
    try:
        cfg = decoding.FusionConfig(
            lm_weight=args.lm_weight,
            ilm_weight=args.ilm_weight,
            ilm_scorer=ilm,
            max_symbols_per_frame=args.max_symbols,
            max_length=args.max_len,
            start_state=args.start_state,
        )
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    for i, scorer in enumerate(sources):
        try:
            if args.mode == "ctc":
                res = decoding.ctc_greedy_fused(scorer, lm, cfg, None if args.replay else args.frames)
            elif args.mode == "rnnt":
                res = decoding.transducer_greedy_fused(scorer, lm, cfg, args.frames)
            else:
                res = decoding.aed_greedy_fused(scorer, lm, cfg)
        except decoding.DecodeError as exc:
            _err(f"decode failed: {exc}")
            return EXIT_DOMAIN
        line = " ".join(map(str, res.tokens))
        if vocab is not None:
            line += "\t" + " ".join(vocab.token_of(t) for t in res.tokens)
        print(line)
        _err(
            f"utt={i} lm_advances={res.lm_advances} blank_steps={res.blank_steps} "
            f"truncated={str(res.truncated).lower()} symbol_cap_hits={res.symbol_cap_hits}"
        )
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        batches = [int(b) for b in args.batch.split(",")]
    except ValueError:
        _err(f"--batch must be a comma-separated list of integers, got {args.batch!r}")
        return EXIT_USAGE
    if args.reps < 1 or any(b < 1 for b in batches):
        _err("--reps and every batch size must be >= 1")
        return EXIT_USAGE
    lm = _load_model(args.model)
    if lm is None:
        return EXIT_DOMAIN
    rng = np.random.default_rng(args.seed)
    for B in batches:
        query_full_batched(lm, rng.integers(0, lm.num_states, size=B))
        times = []
        for _ in range(args.reps):
            states = rng.integers(0, lm.num_states, size=B)
            t0 = time.perf_counter()
            query_full_batched(lm, states)
            times.append(time.perf_counter() - t0)
        median = float(np.median(times))
        print(f"{B}\t{B / median:.6f}\t{median / B * 1e6:.6f}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flatlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="convert an ARPA model to the binary format")
    p.add_argument("--arpa", required=True)
    p.add_argument("--vocab", required=True, help="one token per line; id = line index")
    p.add_argument("--out", required=True)
    p.add_argument("--lenient-oov", action="store_true", help="drop n-grams with tokens missing from the vocabulary")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser(
        "score",
        help="score sentences",
        description="Score one sentence per line. Perplexity counts one end-of-sentence event per line.",
    )
    p.add_argument("--model", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("decode", help="greedy decoding with LM fusion")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("ctc", "rnnt", "aed"), required=True)
    p.add_argument("--replay", help="LGTS logit file (ctc: rows per frame, aed: rows per step)")
    p.add_argument("--seed", type=int, default=0, help="synthetic scorer seed")
    p.add_argument("--utts", type=int, default=1, help="synthetic utterances (seeds seed..seed+utts-1)")
    p.add_argument("--frames", type=int, default=50, help="synthetic frames per utterance")
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--lm-weight", type=float, default=0.0)
    p.add_argument("--ilm-weight", type=float, default=0.0)
    p.add_argument("--max-symbols", type=int, default=10)
    p.add_argument("--max-len", type=int, default=100)
    p.add_argument("--start-state", choices=("root", "bos"))
    p.add_argument("--vocab", help="print detokenized output as a second column")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="batched query throughput")
    p.add_argument("--model", required=True)
    p.add_argument("--batch", default="1,32", help="comma-separated batch sizes")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "lm_weight", 0) < 0 or getattr(args, "ilm_weight", 0) < 0:
            parser.error("weights must be >= 0")
        if getattr(args, "utts", 1) < 1 or getattr(args, "frames", 0) < 0:
            parser.error("--utts must be >= 1 and --frames >= 0")
        if getattr(args, "max_symbols", 1) < 1 or getattr(args, "max_len", 1) < 1:
            parser.error("--max-symbols and --max-len must be >= 1")
    except _Usage:
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
