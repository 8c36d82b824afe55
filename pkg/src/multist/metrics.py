"""Corpus BLEU with multi-bleu.perl semantics, WER/CER, and evaluation reports."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import normalize_text

MAX_N = 4


@dataclass
class BleuStats:
    matches: list = field(default_factory=lambda: [0] * MAX_N)
    totals: list = field(default_factory=lambda: [0] * MAX_N)
    hyp_len: int = 0
    ref_len: int = 0

    def __add__(self, other):
        return BleuStats([a + b for a, b in zip(self.matches, other.matches)],
                         [a + b for a, b in zip(self.totals, other.totals)],
                         self.hyp_len + other.hyp_len, self.ref_len + other.ref_len)

    def precisions(self):
        return [m / t if t else 0.0 for m, t in zip(self.matches, self.totals)]

    def brevity_penalty(self):
        if self.hyp_len == 0:
            return 0.0
        if self.hyp_len < self.ref_len:
            return math.exp(1.0 - self.ref_len / self.hyp_len)
        return 1.0

    def score(self):
        """BLEU in [0, 100]; any zero n-gram precision gives 0 (no smoothing)."""
        p = self.precisions()
        if self.hyp_len == 0 or min(p) == 0.0:
            return 0.0
        return 100.0 * self.brevity_penalty() * math.exp(sum(math.log(x) for x in p) / MAX_N)


def _words(text):
    return text.lower().split()


def _ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def closest_ref_length(hyp_len, ref_lens):
    """Reference length closest to the hypothesis length; ties go to the shorter one."""
    return min(ref_lens, key=lambda r: (abs(r - hyp_len), r))


def sentence_stats(hyp, refs):
    if not refs:
        raise ValueError("each hypothesis needs at least one reference")
    h = _words(hyp)
    rs = [_words(r) for r in refs]
    st = BleuStats(hyp_len=len(h), ref_len=closest_ref_length(len(h), [len(r) for r in rs]))
    for n in range(1, MAX_N + 1):
        counts = _ngrams(h, n)
        best = Counter()
        for r in rs:
            best |= _ngrams(r, n)
        st.matches[n - 1] = sum(min(c, best[g]) for g, c in counts.items())
        st.totals[n - 1] = max(len(h) - n + 1, 0)
    return st


def corpus_stats(hyps, ref_sets):
    if not hyps:
        raise ValueError("corpus_bleu: empty hypothesis corpus")
    if len(hyps) != len(ref_sets):
        raise ValueError(f"corpus_bleu: {len(hyps)} hypotheses but {len(ref_sets)} reference sets")
    total = BleuStats()
    for h, refs in zip(hyps, ref_sets):
        total = total + sentence_stats(h, [refs] if isinstance(refs, str) else list(refs))
    return total


def corpus_bleu(hyps, ref_sets):
    """Case-insensitive corpus BLEU from summed sentence statistics."""
    return corpus_stats(hyps, ref_sets).score()


# ---------------------------------------------------------------- error rates

def edit_distance(a, b):
    """Levenshtein distance between two token sequences (unit costs)."""
    index = {}
    ia = [index.setdefault(t, len(index)) for t in a]
    ib = [index.setdefault(t, len(index)) for t in b]
    return kernels.edit_distance(np.array(ia, dtype=np.int64), np.array(ib, dtype=np.int64))


def wer(hyp, ref):
    """Word error rate of one sentence; both arguments are strings or token lists."""
    h = _words(hyp) if isinstance(hyp, str) else list(hyp)
    r = _words(ref) if isinstance(ref, str) else list(ref)
    if not r:
        raise ValueError("wer: empty reference")
    return edit_distance(h, r) / len(r)


def corpus_error_rate(hyps, refs, unit="word"):
    """Total edits over total reference tokens; ``unit`` is 'word' or 'char'."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    split = _words if unit == "word" else (lambda s: list(s.lower()))
    edits = n = 0
    for h, r in zip(hyps, refs):
        rt = split(r)
        if not rt:
            raise ValueError("error rate: empty reference")
        edits += edit_distance(split(h), rt)
        n += len(rt)
    return edits / n


def corpus_wer(hyps, refs):
    return corpus_error_rate(hyps, refs, "word")


def corpus_cer(hyps, refs):
    return corpus_error_rate(hyps, refs, "char")


def cer(hyp, ref):
    return corpus_error_rate([hyp], [ref], "char")


# ---------------------------------------------------------------- reports

METRICS = ("bleu", "wer", "cer")


@dataclass
class EvalReport:
    metric: str
    score: float
    sentences: list
    corpus_id: str = ""
    fingerprint: str = ""

    def summary(self):
        label = "BLEU" if self.metric == "bleu" else self.metric.upper()
        value = f"{self.score:.2f}" if self.metric == "bleu" else f"{100 * self.score:.2f}%"
        return f"{label} = {value} ({len(self.sentences)} sentences, corpus {self.corpus_id or '-'})"


def evaluate(ids, hyps, ref_sets, metric="bleu", strip_punct=False, corpus_id="", fingerprint=""):
    """Score a corpus and keep a per-sentence breakdown."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    ref_sets = [[r] if isinstance(r, str) else list(r) for r in ref_sets]
    if strip_punct:
        hyps = [normalize_text(h, "source") for h in hyps]
        ref_sets = [[normalize_text(r, "source") for r in rs] for rs in ref_sets]
    rows = []
    if metric == "bleu":
        score = corpus_bleu(hyps, ref_sets)
        for i, h, rs in zip(ids, hyps, ref_sets):
            st = sentence_stats(h, rs)
            rows.append({"id": i, "score": st.score(), "matches": st.matches, "totals": st.totals,
                         "hyp_len": st.hyp_len, "ref_len": st.ref_len, "hyp": h})
    else:
        unit = "word" if metric == "wer" else "char"
        score = corpus_error_rate(hyps, [rs[0] for rs in ref_sets], unit)
        for i, h, rs in zip(ids, hyps, ref_sets):
            r = rs[0]
            rows.append({"id": i, "score": corpus_error_rate([h], [r], unit), "hyp": h, "ref": r})
    return EvalReport(metric, score, rows, corpus_id, fingerprint)


def write_report(report, path):
    """JSON-lines file: a summary record followed by one record per sentence."""
    with open(path, "w", encoding="utf-8") as fh:
        head = {"type": "summary", "metric": report.metric, "score": report.score,
                "n": len(report.sentences), "corpus": report.corpus_id, "fingerprint": report.fingerprint}
        fh.write(json.dumps(head, ensure_ascii=False) + "\n")
        for row in report.sentences:
            fh.write(json.dumps({"type": "sentence", **row}, ensure_ascii=False) + "\n")


def read_report(path):
    with open(path, encoding="utf-8") as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    head = recs[0]
    rows = [{k: v for k, v in r.items() if k != "type"} for r in recs[1:]]
    return EvalReport(head["metric"], head["score"], rows, head["corpus"], head["fingerprint"])
