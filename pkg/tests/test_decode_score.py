import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exhaustive_best, random_lm, recursive_levenshtein
from vqasr.decode_score import (ErrorDistribution, WERReport, align, align_and_score,
                                average_checkpoints, beam_search, error_distribution,
                                greedy_search, merge_distributions, read_hypotheses,
                                read_score_csv, tokenize_words, write_aggregate_csv,
                                write_hypotheses, write_score_csv)
from vqasr.errors import EmptyReference, ManifestMismatch, NoCheckpoints
from vqasr.tensor_core import save_checkpoint

V, BOS, EOS = 5, 5, 0


def table_lm(table):
    """Step function from a dict prefix-tuple (without bos) -> probabilities."""
    def step(prefixes):
        return np.log(np.array([table[tuple(p[1:])] for p in prefixes]))
    return step


class TestGreedyAndBeam:
    def test_beam_finds_better_path(self):
        # Greedy takes 0.6 then at best 0.5 (0.30); the 0.4 branch continues with 0.9 (0.36).
        eos = 2
        table = {(): [0.6, 0.4, 1e-12],
                 (0,): [0.25, 0.25, 0.5], (1,): [0.05, 0.05, 0.9],
                 (0, 0): [1e-12, 1e-12, 1.0], (0, 1): [1e-12, 1e-12, 1.0],
                 (1, 0): [1e-12, 1e-12, 1.0], (1, 1): [1e-12, 1e-12, 1.0]}
        step = table_lm(table)
        greedy = greedy_search(step, 3, eos, 5)
        best = beam_search(step, 3, eos, beam=2, max_len=5)
        assert greedy.tokens == (0, 2)
        assert greedy.log_prob == pytest.approx(np.log(0.3))
        assert best.tokens == (1, 2)
        assert best.log_prob == pytest.approx(np.log(0.36))
        assert best.finished

    def test_immediate_eos(self):
        step = lambda prefixes: np.log(np.tile([0.97, 0.01, 0.01, 0.01, 1e-12], (len(prefixes), 1)))
        for beam in (1, 3, 5):
            hyp = beam_search(step, BOS, EOS, beam=beam, max_len=10)
            assert hyp.tokens == (EOS,) and hyp.finished

    def test_unfinished_at_max_len(self):
        step = lambda prefixes: np.log(np.tile([1e-9, 0.7, 0.3 - 1e-9, 1e-12, 1e-12],
                                               (len(prefixes), 1)))
        # eos never ranks inside the beam, so nothing finishes.
        hyp = beam_search(step, BOS, EOS, beam=2, max_len=4)
        assert hyp.tokens == (1, 1, 1, 1) and not hyp.finished

    def test_tie_prefers_smaller_ids(self):
        step = lambda prefixes: np.log(np.tile([0.5, 0.25, 0.25, 1e-12, 1e-12],
                                               (len(prefixes), 1)))
        # Tokens 1 and 2 tie at every step; paths through 1 must win.
        hyp = beam_search(step, BOS, EOS, beam=3, max_len=3)
        assert hyp.tokens == (EOS,)
        step2 = lambda prefixes: np.log(np.array([[1e-12, 0.5, 0.5, 1e-12, 1e-12]
                                                  if len(p) < 3 else [1.0, 1e-12, 1e-12, 1e-12, 1e-12]
                                                  for p in prefixes]))
        assert beam_search(step2, BOS, EOS, beam=4, max_len=4).tokens == (1, 1, EOS)

    @pytest.mark.parametrize("seed", range(50))
    def test_beam_one_is_greedy(self, seed):
        step = random_lm(seed, V, scale=2.0)
        g = greedy_search(step, BOS, EOS, 6)
        b = beam_search(step, BOS, EOS, beam=1, max_len=6)
        assert (b.tokens, b.finished) == (g.tokens, g.finished)
        assert b.log_prob == pytest.approx(g.log_prob, abs=1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_full_frontier_is_exact(self, seed):
        # A beam as wide as the whole length-2 frontier cannot prune the optimum.
        step = random_lm(seed, V)
        tokens, score = exhaustive_best(step, BOS, EOS, V, 3)
        hyp = beam_search(step, BOS, EOS, beam=V * V, max_len=3)
        assert hyp.tokens == tokens
        assert hyp.log_prob == pytest.approx(score, abs=1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_vocab_beam_misses_only_by_pruning(self, seed):
        """Whenever beam=V disagrees with enumeration, the optimum's prefix was pruned."""
        step = random_lm(seed, V)
        tokens, score = exhaustive_best(step, BOS, EOS, V, 3)
        hyp = beam_search(step, BOS, EOS, beam=V, max_len=3)
        assert hyp.log_prob <= score + 1e-12
        if hyp.tokens != tokens:
            # Rank of the optimum's length-2 candidate among all length-2 candidates.
            def lp(seq):
                s, prefix = 0.0, (BOS,)
                for t in seq:
                    s += float(step([prefix])[0][t])
                    prefix += (t,)
                return s
            firsts = [t for t in range(V) if t != EOS]
            cands = sorted(((-lp((a, b)), (a, b)) for a in firsts for b in range(V)))
            rank = [c[1] for c in cands].index(tokens[:2])
            assert rank >= V

    def test_length_normalisation_option(self):
        step = lambda prefixes: np.log(np.array([[0.4, 0.6, 1e-12, 1e-12, 1e-12]
                                                 if len(p) < 3 else [0.99, 0.01 - 3e-12, 1e-12, 1e-12, 1e-12]
                                                 for p in prefixes]))
        plain = beam_search(step, BOS, EOS, beam=5, max_len=5)
        normed = beam_search(step, BOS, EOS, beam=5, max_len=5, length_normalize=True)
        assert plain.tokens == (EOS,)
        assert normed.tokens == (1, 1, EOS)


class TestAlignment:
    @pytest.mark.parametrize("ref,hyp,sdi,wer", [
        ("the cat sat", "the cat sat", (0, 0, 0), 0.0),
        ("the cat sat", "the bat sat", (1, 0, 0), 100 / 3),
        ("a b c", "a b", (0, 1, 0), 100 / 3),
        ("a b", "a b c", (0, 0, 1), 50.0),
        ("a b c d", "x a b d y", (2, 0, 1), 75.0),
        ("one two", "", (0, 2, 0), 100.0),
    ])
    def test_hand_checked(self, ref, hyp, sdi, wer):
        r = align_and_score(ref, hyp)
        assert (r.substitutions, r.deletions, r.insertions) == sdi
        assert r.wer == pytest.approx(wer)

    def test_substitution_preferred(self):
        ops = [op for op, _, _ in align("a b".split(), "a c".split())]
        assert ops == ["C", "S"]

    def test_brute_force_agreement(self):
        rng = np.random.default_rng(0)
        words = list("abcdef")
        for _ in range(1000):
            ref = list(rng.choice(words, rng.integers(1, 9)))
            hyp = list(rng.choice(words, rng.integers(0, 9)))
            assert align_and_score(ref, hyp).errors == recursive_levenshtein(ref, hyp)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from("abc"), min_size=1, max_size=6),
           st.lists(st.sampled_from("abc"), max_size=6),
           st.lists(st.sampled_from("abcd"), max_size=4))
    def test_common_suffix_invariance(self, ref, hyp, suffix):
        base = align_and_score(ref, hyp)
        ext = align_and_score(ref + suffix, hyp + suffix)
        assert ext.errors == base.errors
        assert ext.wer * ext.n_ref_words == pytest.approx(base.wer * base.n_ref_words)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.sampled_from("ab"), min_size=1, max_size=6),
           st.lists(st.sampled_from("abc"), max_size=6))
    def test_alignment_reconstructs_sequences(self, ref, hyp):
        ops = align(ref, hyp)
        assert [r for _, r, _ in ops if r is not None] == ref
        assert [h for _, _, h in ops if h is not None] == hyp

    def test_tokenisation(self):
        assert tokenize_words("  The, CAT  sat. ") == ["the", "cat", "sat"]
        assert tokenize_words("don't -- stop") == ["don't", "stop"]

    def test_empty_reference(self):
        with pytest.raises(EmptyReference):
            align_and_score("", "a")
        with pytest.raises(EmptyReference):
            WERReport(0).wer


class TestErrorDistribution:
    def test_shares(self):
        dist = error_distribution([WERReport(4, 1, 1, 2)])
        assert dist.shares() == (0.25, 0.25, 0.5)
        assert not dist.degenerate

    def test_all_perfect(self):
        dist = error_distribution([WERReport(3), WERReport(5)])
        assert dist.shares() == (0.0, 0.0, 0.0)
        assert dist.degenerate
        assert dist.row()["wer"] == 0.0

    def test_merge_is_additive(self):
        a = error_distribution([WERReport(4, 1, 0, 2), WERReport(3, 0, 1, 0)], "a")
        b = error_distribution([WERReport(5, 2, 2, 1)], "b")
        m = merge_distributions(a, b, "ab")
        assert (m.total.n_ref_words, m.total.substitutions, m.total.deletions,
                m.total.insertions) == (12, 3, 3, 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            error_distribution([])


class TestReports:
    def test_score_csv_round_trip(self, tmp_path):
        scored = [("u1", WERReport(3, 1, 0, 0)), ("u2", WERReport(2, 0, 1, 1))]
        write_score_csv(tmp_path / "s.csv", scored)
        assert read_score_csv(tmp_path / "s.csv") == scored
        assert (tmp_path / "s.csv").read_text().splitlines()[0] == "id,n_ref,S,D,I,wer"

    def test_aggregate_header(self, tmp_path):
        write_aggregate_csv(tmp_path / "a.csv", [ErrorDistribution("x", WERReport(4, 1, 1, 2), False)])
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "group,S,D,I,S_share,D_share,I_share,wer"
        assert lines[1] == "x,1,1,2,0.25,0.25,0.5,100.0"

    def test_hypotheses_round_trip(self, tmp_path):
        hyps = [("u1", "the cat"), ("u2", ""), ("u3", "a b c")]
        write_hypotheses(tmp_path / "h.tsv", hyps)
        assert list(read_hypotheses(tmp_path / "h.tsv").items()) == hyps


class TestAverageCheckpoints:
    def write(self, path, values):
        save_checkpoint(path, {"w": np.asarray(values, dtype=np.float64), "b": np.zeros(2)}, 1)
        return path

    def test_mean(self, tmp_path):
        a = self.write(tmp_path / "a.bin", [0.0, 1.0])
        b = self.write(tmp_path / "b.bin", [2.0, 3.0])
        out = average_checkpoints([a, b])
        np.testing.assert_array_equal(out["w"], [1.0, 2.0])
        assert list(out) == ["w", "b"]

    def test_identical(self, tmp_path):
        paths = [self.write(tmp_path / f"{i}.bin", [0.1, 0.7]) for i in range(10)]
        np.testing.assert_array_equal(average_checkpoints(paths)["w"], [0.1, 0.7])

    def test_permutation_invariant(self, tmp_path):
        rng = np.random.default_rng(0)
        paths = [self.write(tmp_path / f"{i}.bin", rng.standard_normal(50)) for i in range(7)]
        ref = average_checkpoints(paths)["w"]
        for _ in range(5):
            perm = [paths[i] for i in rng.permutation(7)]
            assert np.array_equal(average_checkpoints(perm)["w"], ref)

    def test_shape_mismatch(self, tmp_path):
        a = self.write(tmp_path / "a.bin", [0.0, 1.0])
        b = self.write(tmp_path / "b.bin", [0.0, 1.0, 2.0])
        with pytest.raises(ManifestMismatch):
            average_checkpoints([a, b])

    def test_name_mismatch(self, tmp_path):
        a = self.write(tmp_path / "a.bin", [0.0])
        save_checkpoint(tmp_path / "c.bin", {"v": np.zeros(1), "b": np.zeros(2)}, 1)
        with pytest.raises(ManifestMismatch):
            average_checkpoints([a, tmp_path / "c.bin"])

    def test_none(self):
        with pytest.raises(NoCheckpoints):
            average_checkpoints([])
