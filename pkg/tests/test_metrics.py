import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multist.metrics import (BleuStats, closest_ref_length, corpus_bleu, corpus_cer, corpus_wer, edit_distance,
                             evaluate, read_report, sentence_stats, wer, write_report)
from oracles import bleu_reference, levenshtein

words = st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=0, max_size=9).map(" ".join)


# ---------------------------------------------------------------- BLEU

def test_clipped_unigram_precision():
    st_ = sentence_stats("the the the the the the the", ["the cat is on the mat"])
    assert (st_.matches[0], st_.totals[0]) == (2, 7)
    assert st_.precisions()[0] == 2 / 7


def test_identity_is_exactly_100():
    hyps = ["the cat sat on the mat", "a b c d e f", "one two three four"]
    assert corpus_bleu(hyps, [[h] for h in hyps]) == 100.0
    assert corpus_bleu(hyps, [["zzz", h] for h in hyps]) == 100.0


def test_empty_hypotheses_score_zero():
    assert corpus_bleu(["", ""], [["a b c d"], ["e f g h"]]) == 0.0
    with pytest.raises(ValueError):
        corpus_bleu([], [])
    with pytest.raises(ValueError):
        corpus_bleu(["a"], [["a"], ["b"]])
    with pytest.raises(ValueError):
        corpus_bleu(["a"], [[]])


def test_no_four_gram_match_gives_zero():
    assert corpus_bleu(["a b c x e"], [["a b c d e"]]) == 0.0


def test_hand_computed_bleu():
    # hyp 5 words, ref 6 words: p1=4/5 p2=2/4 p3=1/3 p4=0/2 -> 0 without smoothing
    assert corpus_bleu(["a b c d x"], [["a b c y d e"]]) == 0.0
    # hyp == first 5 words of a 6-word ref: p_n = 1, BP = exp(1 - 6/5)
    got = corpus_bleu(["a b c d e"], [["a b c d e f"]])
    assert got == pytest.approx(100 * math.exp(1 - 6 / 5), rel=1e-15)


def test_closest_reference_length_ties_to_shorter():
    assert closest_ref_length(5, [4, 6]) == 4
    assert closest_ref_length(5, [6, 4]) == 4
    assert closest_ref_length(5, [7, 3, 5]) == 5
    st_ = sentence_stats("a b c d e", ["a b c d", "a b c d e f"])
    assert st_.ref_len == 4 and st_.brevity_penalty() == 1.0


def test_multi_reference_clipping_takes_max():
    st_ = sentence_stats("a a a b", ["a b", "a a c"])
    assert st_.matches[0] == 3  # two a's from the second ref, one b from the first


def test_case_insensitive():
    assert corpus_bleu(["The Cat sat ON the mat"], [["the cat sat on THE MAT"]]) == 100.0


def test_stats_additive():
    a, b = sentence_stats("a b c d", ["a b c d"]), sentence_stats("a c", ["a b"])
    s = a + b
    assert s.matches == [a.matches[i] + b.matches[i] for i in range(4)]
    assert (s.hyp_len, s.ref_len) == (6, 6)
    assert BleuStats().score() == 0.0


def test_matches_reference_implementation_on_random_corpora():
    rng = random.Random(0)
    vocab = "a b c d e f".split()
    for _ in range(50):
        n = rng.randint(1, 8)
        hyps, refs = [], []
        for _ in range(n):
            hyps.append(" ".join(rng.choice(vocab) for _ in range(rng.randint(0, 12))))
            refs.append([" ".join(rng.choice(vocab) for _ in range(rng.randint(1, 12)))
                         for _ in range(rng.randint(1, 3))])
        assert abs(corpus_bleu(hyps, refs) - bleu_reference(hyps, refs)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(words, st.lists(words, min_size=1, max_size=3)), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_reorder_invariance(pairs, rnd):
    hyps = [p[0] for p in pairs]
    refs = [p[1] for p in pairs]
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    a = corpus_bleu(hyps, refs)
    b = corpus_bleu([hyps[i] for i in order], [refs[i] for i in order])
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 100.0


@settings(max_examples=60, deadline=None)
@given(st.lists(words, min_size=1, max_size=5))
def test_self_bleu_is_100_when_four_grams_exist(hyps):
    score = corpus_bleu(hyps, [[h] for h in hyps])
    assert score == (100.0 if any(len(h.split()) >= 4 for h in hyps) else 0.0)


@settings(max_examples=60, deadline=None)
@given(words, words)
def test_upper_case_invariance(h, r):
    if not r:
        return
    assert corpus_bleu([h.upper()], [[r]]) == corpus_bleu([h], [[r.upper()]])
    assert wer(h.upper(), r) == wer(h, r.upper())


# ---------------------------------------------------------------- WER

@pytest.mark.parametrize("hyp, ref, want", [
    ("a b c", "a b c", 0.0),
    ("a x c", "a b c", 1 / 3),
    ("", "a b", 1.0),
    ("a b c d", "a b", 1.0),
    ("b a", "a b", 1.0),
])
def test_wer_examples(hyp, ref, want):
    assert wer(hyp, ref) == want


def test_wer_errors_and_corpus():
    with pytest.raises(ValueError):
        wer("a", "")
    assert corpus_wer(["a x c", ""], ["a b c", "d e"]) == 3 / 5
    assert corpus_cer(["abd"], ["abc"]) == 1 / 3


@settings(max_examples=150, deadline=None)
@given(words, words, words)
def test_edit_distance_triangle(a, b, c):
    a, b, c = a.split(), b.split(), c.split()
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert edit_distance(a, b) == levenshtein(a, b) == edit_distance(b, a)


# ---------------------------------------------------------------- reports

def test_report_round_trip(tmp_path):
    rep = evaluate(["u1", "u2"], ["A b c d", "x y"], [["a b c d"], ["x y z", "x y"]], "bleu",
                   corpus_id="toy", fingerprint="abc")
    assert rep.score == corpus_bleu(["a b c d", "x y"], [["a b c d"], ["x y z", "x y"]])
    write_report(rep, tmp_path / "r.jsonl")
    back = read_report(tmp_path / "r.jsonl")
    assert back.score == rep.score and back.sentences == rep.sentences and back.fingerprint == "abc"
    assert "BLEU" in rep.summary()


def test_evaluate_strip_punct_and_error_metrics():
    rep = evaluate(["a"], ["Hello, world!"], ["hello world"], "wer", strip_punct=True)
    assert rep.score == 0.0
    assert evaluate(["a"], ["Hello, world!"], ["hello world"], "wer").score == 1.0
    assert evaluate(["a"], ["abd"], ["abc"], "cer").score == 1 / 3
    with pytest.raises(ValueError):
        evaluate(["a"], ["x"], ["x"], "meteor")
