import io

import numpy as np
import pytest

from flatlm.decoding import (
    DecodeError,
    FusionConfig,
    LogitFormatError,
    ReplayScorer,
    SyntheticScorer,
    aed_greedy,
    aed_greedy_fused,
    ctc_greedy,
    ctc_greedy_fused,
    fuse_scores,
    log_softmax,
    read_logits,
    splitmix64,
    splitmix64_array,
    transducer_greedy,
    transducer_greedy_fused,
    write_logits,
)
from flatlm.lm import advance, query_full
from flatlm.oracle import oracle_score
from helpers import FIXTURES, cat_sat, make_fixture, simulate_aed, simulate_ctc, simulate_transducer

V8 = FIXTURES[0]  # 16-token bigram fixture


def onehot_rows(labels, size, high=0.0, low=-10.0):
    rows = np.full((len(labels), size), low)
    rows[np.arange(len(labels)), labels] = high
    return log_softmax(rows)


class TestFuseScores:
    def test_zero_weight_identity(self):
        asr = np.array([-1.0, -2.0, -0.5])
        np.testing.assert_array_equal(fuse_scores(asr, np.array([-3.0, -1.0, -9.0]), 0.0), asr)

    def test_arithmetic(self):
        np.testing.assert_array_equal(fuse_scores(np.array([-1.0, -2.0]), np.array([-3.0, -1.0]), 1.0), [-4.0, -3.0])

    def test_ilm_cancels(self):
        asr, lm = np.array([-1.0, -2.0]), np.array([-3.0, -1.0])
        np.testing.assert_allclose(fuse_scores(asr, lm, 0.7, aux_row=lm, ilm_weight=0.7), asr)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fuse_scores(np.zeros(2), np.zeros(3), 1.0)
        with pytest.raises(ValueError):
            fuse_scores(np.zeros(2), np.zeros(2), 1.0, aux_row=np.zeros(3), ilm_weight=1.0)


class TestSynthetic:
    def test_splitmix_reference_value(self):
        # first output of the reference splitmix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_vectorized_hash_matches_scalar(self):
        xs = [0, 1, 2**63, 2**64 - 1, 123456789]
        out = splitmix64_array(np.array(xs, dtype=np.uint64))
        assert [int(v) for v in out] == [splitmix64(x) for x in xs]

    def test_row_definition(self):
        sc = SyntheticScorer(seed=42, alphabet_size=9, temperature=0.5)
        h = 0
        for x in (42, 3, 1, 5 + 1):
            h = splitmix64(h ^ x)
        expected = [(splitmix64(h ^ v) >> 11) * 2.0**-53 for v in range(9)]
        np.testing.assert_array_equal(sc.raw(3, 1, 5), expected)
        np.testing.assert_allclose(sc(3, 1, 5), log_softmax(np.array(expected) / 0.5))

    def test_normalized_and_deterministic(self):
        sc = SyntheticScorer(7, 17)
        row = sc(0, 0, None)
        assert abs(np.exp(row).sum() - 1.0) <= 1e-4
        np.testing.assert_array_equal(row, SyntheticScorer(7, 17)(0, 0, None))
        assert not np.array_equal(row, sc(0, 0, 3))


class TestLogitFile:
    def test_round_trip(self):
        rows = np.random.default_rng(0).normal(size=(5, 4)).astype(np.float32)
        buf = io.BytesIO()
        write_logits(rows, buf)
        assert buf.getvalue()[:4] == b"LGTS"
        buf.seek(0)
        np.testing.assert_array_equal(read_logits(buf), rows)

    def test_bad_magic_and_size(self):
        with pytest.raises(LogitFormatError):
            read_logits(io.BytesIO(b"XXXX" + bytes(12)))
        buf = io.BytesIO()
        write_logits(np.zeros((2, 2)), buf)
        with pytest.raises(LogitFormatError):
            read_logits(io.BytesIO(buf.getvalue()[:-1]))


class TestCTC:
    def test_plain_collapse(self):
        lm = make_fixture(V8).lm
        a, b, blank = 1, 2, lm.vocab_size
        rows = onehot_rows([a, a, blank, b], lm.vocab_size + 1)
        res = ctc_greedy_fused(ReplayScorer(rows), lm, FusionConfig())
        assert res.tokens == [a, b]
        assert res.blank_steps == 1 and res.lm_advances == 2

    def test_all_blank(self):
        lm = make_fixture(V8).lm
        rows = onehot_rows([lm.vocab_size] * 6, lm.vocab_size + 1)
        res = ctc_greedy_fused(ReplayScorer(rows), lm, FusionConfig(lm_weight=5.0))
        assert res.tokens == [] and res.blank_steps == 6

    def test_lm_overrides_raw_argmax(self):
        f = make_fixture(V8)
        lm, olm = f.lm, f.oracle
        V = lm.vocab_size
        lam = 1.0
        first = 1
        lm_row = np.array([oracle_score(olm, (first,), v) for v in range(V)])
        y = int(np.argmax(lm_row))
        x = next(v for v in range(V) if v not in (y, first) and lm_row[v] < lm_row[y] - 0.5)
        rows = np.full((3, V + 1), -20.0)
        rows[0, first] = 0.0
        rows[1, x], rows[1, y] = -1.0, -1.0 - 0.25 * (lm_row[y] - lm_row[x])
        rows[1, V] = -8.0
        rows[2, V] = 0.0
        expected = simulate_ctc(rows, olm, lam)
        assert expected == [first, y]
        assert int(np.argmax(rows[1])) == x
        assert ctc_greedy_fused(ReplayScorer(rows), lm, FusionConfig(lm_weight=lam)).tokens == expected

    def test_repeat_is_not_rescored(self):
        f = make_fixture(V8)
        V = f.lm.vocab_size
        rows = np.full((2, V + 1), -30.0)
        rows[:, 3] = -0.1
        rows[1, 4] = -0.2
        res = ctc_greedy_fused(ReplayScorer(rows), f.lm, FusionConfig(lm_weight=0.0))
        assert res.tokens == [3] and res.lm_advances == 1

    def test_blank_wins_ties(self):
        lm = make_fixture(V8).lm
        rows = np.full((1, lm.vocab_size + 1), -5.0)
        rows[0, 0] = rows[0, lm.vocab_size] = -1.0
        assert ctc_greedy_fused(ReplayScorer(rows), lm, FusionConfig()).tokens == []

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("lam", [0.0, 0.3, 1.5])
    def test_matches_simulator(self, seed, lam):
        f = make_fixture(FIXTURES[1])
        sc = SyntheticScorer(seed, f.lm.vocab_size + 1, temperature=0.05)
        rows = np.stack([sc(t, 0, None) for t in range(30)])
        res = ctc_greedy_fused(ReplayScorer(rows), f.lm, FusionConfig(lm_weight=lam))
        assert res.tokens == simulate_ctc(rows, f.oracle, lam)
        assert res.lm_advances == len(res.tokens)

    def test_errors(self):
        lm = make_fixture(V8).lm
        with pytest.raises(DecodeError, match="alphabet"):
            ctc_greedy_fused(ReplayScorer(np.zeros((3, lm.vocab_size))), lm, FusionConfig())
        with pytest.raises(DecodeError, match="rows"):
            ctc_greedy_fused(ReplayScorer(np.zeros((3, lm.vocab_size + 1))), lm, FusionConfig(), num_frames=5)


class TestTransducer:
    def test_always_blank(self):
        lm = make_fixture(V8).lm
        V = lm.vocab_size

        def scorer(t, u, last):
            row = np.full(V + 1, -10.0)
            row[V] = 0.0
            return row

        scorer.alphabet_size, scorer.special_index = V + 1, V
        for lam in (0.0, 1.0, 100.0):
            res = transducer_greedy_fused(scorer, lm, FusionConfig(lm_weight=lam), num_frames=7)
            assert res.tokens == [] and res.blank_steps == 7 and res.lm_advances == 0

    def test_zero_weight_equals_plain(self):
        lm = make_fixture(FIXTURES[1]).lm
        for seed in range(10):
            sc = SyntheticScorer(seed, lm.vocab_size + 1, temperature=0.02)
            res = transducer_greedy_fused(sc, lm, FusionConfig(), num_frames=8)
            assert res.tokens == transducer_greedy(sc, 8)

    def test_matches_simulator(self):
        f = make_fixture(V8)
        sc = SyntheticScorer(42, f.lm.vocab_size + 1, temperature=0.02)
        res = transducer_greedy_fused(sc, f.lm, FusionConfig(lm_weight=2.0), num_frames=5)
        expected, _ = simulate_transducer(sc, f.oracle, 2.0, 5)
        assert res.tokens == expected
        assert res.tokens != transducer_greedy(sc, 5)

    def test_blank_decisions_independent_of_weight(self):
        f = make_fixture(V8)
        for seed in range(5):
            sc = SyntheticScorer(seed, f.lm.vocab_size + 1, temperature=0.02)
            for lam in (0.0, 1.0, 10.0):
                tokens, blanks = simulate_transducer(sc, f.oracle, lam, 6)
                res = transducer_greedy_fused(sc, f.lm, FusionConfig(lm_weight=lam), num_frames=6)
                assert res.tokens == tokens
                assert res.blank_steps == sum(blanks)

    def test_symbol_cap(self):
        lm = make_fixture(V8).lm
        V = lm.vocab_size

        def scorer(t, u, last):
            row = np.full(V + 1, -10.0)
            row[0] = 0.0
            return row

        scorer.alphabet_size, scorer.special_index = V + 1, V
        res = transducer_greedy_fused(scorer, lm, FusionConfig(max_symbols_per_frame=3), num_frames=2)
        assert res.tokens == [0] * 6
        assert res.truncated and res.symbol_cap_hits == 2

    def test_ilm_subtraction(self):
        f = make_fixture(V8)
        V = f.lm.vocab_size
        sc = SyntheticScorer(3, V + 1, temperature=0.02)
        ilm = SyntheticScorer(99, V + 1)
        cfg = FusionConfig(lm_weight=1.0, ilm_weight=1.0, ilm_scorer=ilm)
        res = transducer_greedy_fused(sc, f.lm, cfg, num_frames=6)

        # manual two-stage loop with the subtracted term
        out = []
        for t in range(6):
            for _ in range(10):
                row = sc(t, len(out), out[-1] if out else None)
                if int(np.argmax(row)) == V:
                    break
                ctx = tuple(out[-1:])
                aux = ilm(t, len(out), out[-1] if out else None)[:V]
                fused = [row[v] + oracle_score(f.oracle, ctx, v) - aux[v] for v in range(V)]
                out.append(int(np.argmax(fused)))
        assert res.tokens == out

    def test_negative_frames(self):
        lm = make_fixture(V8).lm
        with pytest.raises(DecodeError):
            transducer_greedy_fused(SyntheticScorer(0, lm.vocab_size + 1), lm, FusionConfig(), num_frames=-1)


class TestAED:
    def test_zero_weight_equals_plain(self):
        lm = make_fixture(FIXTURES[1]).lm
        for seed in range(10):
            sc = SyntheticScorer(seed, lm.vocab_size + 1, temperature=0.02)
            res = aed_greedy_fused(sc, lm, FusionConfig(max_length=20))
            assert res.tokens == aed_greedy(sc, 20)

    def test_final_weight_stops_decoding(self):
        vocab, _, lm, olm = cat_sat()
        V = lm.vocab_size
        the, cat, mat = vocab.id_of("the"), vocab.id_of("cat"), vocab.id_of("mat")
        plan = [the, mat, cat, cat, cat]
        lam = 1.0

        def scorer(t, u, last):
            row = np.full(V + 1, -6.0)
            row[plan[u]] = -0.1
            row[V] = -0.6
            return log_softmax(row)

        scorer.alphabet_size, scorer.special_index = V + 1, V
        assert aed_greedy(scorer, 5) == plan
        expected, truncated = simulate_aed(scorer, olm, lam, 5)
        assert expected == [the, mat] and not truncated
        res = aed_greedy_fused(scorer, lm, FusionConfig(lm_weight=lam, max_length=5))
        assert res.tokens == expected and not res.truncated

    def test_truncation(self):
        lm = make_fixture(V8).lm
        V = lm.vocab_size
        rows = onehot_rows([1, 2, 3, 4, 5, 6], V + 1)
        res = aed_greedy_fused(ReplayScorer(rows, index_by="step"), lm, FusionConfig(max_length=4))
        assert res.tokens == [1, 2, 3, 4] and res.truncated

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_simulator(self, seed):
        f = make_fixture(FIXTURES[1])
        sc = SyntheticScorer(seed, f.lm.vocab_size + 1, temperature=0.05)
        res = aed_greedy_fused(sc, f.lm, FusionConfig(lm_weight=0.8, max_length=15))
        assert (res.tokens, res.truncated) == simulate_aed(sc, f.oracle, 0.8, 15)


class TestInvariants:
    @pytest.mark.parametrize("mode", ["ctc", "rnnt", "aed"])
    def test_lm_state_replay(self, mode):
        lm = make_fixture(FIXTURES[1]).lm
        sc = SyntheticScorer(5, lm.vocab_size + 1, temperature=0.05)
        cfg = FusionConfig(lm_weight=0.5, max_length=12)
        if mode == "ctc":
            res, state = ctc_greedy_fused(sc, lm, cfg, num_frames=20), lm.root_state
        elif mode == "rnnt":
            res, state = transducer_greedy_fused(sc, lm, cfg, num_frames=10), lm.root_state
        else:
            res, state = aed_greedy_fused(sc, lm, cfg), lm.bos_state
        replay = []
        for t in res.tokens:
            state = advance(lm, state, t)[1]
            replay.append(state)
        assert res.lm_states == replay and len(replay) == res.lm_advances

    def test_start_state_override(self):
        lm = make_fixture(FIXTURES[1]).lm
        rows = onehot_rows([3, lm.vocab_size], lm.vocab_size + 1)
        res = ctc_greedy_fused(ReplayScorer(rows), lm, FusionConfig(start_state="bos"))
        assert res.lm_states == [int(query_full(lm, lm.bos_state).next_states[3])]

    def test_deterministic(self):
        lm = make_fixture(FIXTURES[1]).lm
        sc = SyntheticScorer(11, lm.vocab_size + 1)
        cfg = FusionConfig(lm_weight=0.5)
        assert transducer_greedy_fused(sc, lm, cfg, 10) == transducer_greedy_fused(sc, lm, cfg, 10)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FusionConfig(lm_weight=-1.0)
        with pytest.raises(ValueError):
            FusionConfig(ilm_weight=1.0)
        with pytest.raises(ValueError):
            FusionConfig(max_symbols_per_frame=0)
        with pytest.raises(ValueError):
            FusionConfig(start_state="middle")
