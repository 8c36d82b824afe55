"""Beam search with joint CTC / attention / LM scoring, greedy decoding, n-best files."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import Tensor, no_grad
from .numerics import tensor as ops

NEG_INF = -np.inf


@dataclass
class BeamConfig:
    width: int = 10
    max_len: int = 0
    maxlen_ratio: float = 2.0
    gamma_ctc: float = 0.0
    gamma_lm: float = 0.0
    beta: float = 0.6
    task: str = "st"
    nbest: int = 1
    ctc_prune: float = 1.5

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"beam width must be >= 1, got {self.width}")
        if self.task not in ("asr", "st", "nmt"):
            raise ValueError(f"unknown decoding task {self.task!r}")
        if self.task != "asr" and (self.gamma_ctc or self.gamma_lm):
            raise ValueError("CTC and LM fusion weights apply to ASR decoding only")
        if self.gamma_ctc < 0 or self.gamma_lm < 0:
            raise ValueError("fusion weights must be non-negative")

    @classmethod
    def for_task(cls, task, **overrides):
        """Decoding defaults: width 20 + CTC + LM for ASR, width 10 + length bonus otherwise."""
        base = dict(width=20, gamma_ctc=0.3, gamma_lm=0.3, beta=0.0) if task == "asr" else dict(width=10, beta=0.6)
        base.update(overrides)
        return cls(task=task, **base)

    def limit(self, n_enc):
        return self.max_len if self.max_len > 0 else max(1, math.ceil(self.maxlen_ratio * n_enc))


@dataclass
class Hypothesis:
    tokens: tuple
    att: float = 0.0
    ctc: float = 0.0
    lm: float = 0.0
    length: float = 0.0
    score: float = 0.0
    complete: bool = False
    alignments: list = field(default_factory=list, repr=False)
    state: dict = field(default=None, repr=False)
    ctc_state: np.ndarray = field(default=None, repr=False)
    lm_state: dict = field(default=None, repr=False)

    def key(self):
        return (-self.score, self.tokens)


@dataclass
class DecodeResult:
    hyps: list
    incomplete: bool = False

    @property
    def best(self):
        return self.hyps[0]


def combined_score(att, ctc, lm, n_tokens, cfg):
    return att + cfg.gamma_ctc * ctc + cfg.gamma_lm * lm + cfg.beta * n_tokens


# ---------------------------------------------------------------- CTC prefix scores

def ctc_initial_state(logp, blank):
    r = np.full((logp.shape[0], 2), NEG_INF)
    r[:, 1] = np.cumsum(logp[:, blank])
    return r


def ctc_prefix_score(logp, prefix, blank, eos=None):
    """log P(CTC output starts with ``prefix``); -inf when the prefix cannot fit.

    If ``prefix`` ends with ``eos`` the value is the probability of exactly
    the preceding labels.
    """
    logp = np.asarray(logp, dtype=np.float64)
    r = ctc_initial_state(logp, blank)
    psi = 0.0
    last = -1
    for i, tok in enumerate(prefix):
        if eos is not None and tok == eos:
            return float(np.logaddexp(r[-1, 0], r[-1, 1]))
        rs, ps = kernels.ctc_prefix_extend(logp, r, last, np.array([tok]), blank, i == 0)
        r, psi, last = rs[0], float(ps[0]), tok
    return psi


# ---------------------------------------------------------------- helpers

def _allowed_tokens(vocab, task):
    allowed = np.zeros(len(vocab), dtype=bool)
    allowed[vocab.char_ids] = True
    allowed[vocab.eos] = True
    if task == "asr" and vocab.is_multilingual_source():
        for code in vocab.source_langs:
            allowed[vocab.lid_token(code)] = True
    return allowed


def _start_token(model, cfg, target_lang):
    vocab = model.vocab
    if cfg.task == "asr":
        return vocab.sos
    if target_lang is None:
        raise ValueError("translation decoding needs a target language")
    return vocab.lang_token(target_lang)


def _encode_source(model, source, task):
    """Encoder memory for one input (feature array or source text)."""
    from .data import Utterance

    vocab = model.vocab
    if task == "nmt":
        ids = vocab.encode(source) if isinstance(source, str) else list(source)
        batch = {"src": np.array([ids], dtype=np.int64), "src_lengths": [len(ids)]}
    else:
        feats = np.asarray(source.features if isinstance(source, Utterance) else source, dtype=np.float64)
        batch = {"feats": feats[None], "feat_lengths": [feats.shape[0]]}
    enc, lengths = model.encode(batch)
    return enc, lengths


def _expand_memory(memory, n):
    out = dict(memory)
    for k in ("enc", "proj", "bias"):
        out[k] = Tensor(np.repeat(memory[k].data, n, axis=0))
    out["mask"] = np.repeat(memory["mask"], n, axis=0)
    out["lengths"] = memory["lengths"] * n
    return out


def _stack_states(states):
    return {
        "h": [Tensor(np.stack([s["h"][i] for s in states])) for i in range(len(states[0]["h"]))],
        "c": [Tensor(np.stack([s["c"][i] for s in states])) for i in range(len(states[0]["c"]))],
        **({"align": Tensor(np.stack([s["align"] for s in states]))} if "align" in states[0] else {}),
    }


def _split_state(state, n):
    out = {"h": [t.data[n] for t in state["h"]], "c": [t.data[n] for t in state["c"]]}
    if "align" in state:
        out["align"] = state["align"].data[n]
    return out


def _initial_dec_state(model, memory):
    st = model.decoder.init_state(memory)
    return _split_state(st, 0)


# ---------------------------------------------------------------- search

def beam_search(model, source, cfg: BeamConfig, lm=None, target_lang=None):
    """Left-to-right beam search; returns complete hypotheses ranked by combined score.

    Ties at equal score go to the lexicographically smaller token sequence.
    If nothing completes within the length limit, the best incomplete
    hypothesis is returned and ``incomplete`` is set.
    """
    vocab = model.vocab
    if cfg.gamma_ctc > 0 and not hasattr(model, "ctc"):
        raise ValueError("CTC fusion requested but the model has no CTC branch")
    if cfg.gamma_lm > 0 and lm is None:
        raise ValueError("LM fusion requested but no language model given")
    model.eval()
    with no_grad():
        enc, lengths = _encode_source(model, source, cfg.task)
        memory = model.decoder.att.prepare(enc, lengths)
        n_enc = lengths[0]
        limit = cfg.limit(n_enc)
        start = _start_token(model, cfg, target_lang)
        allowed = _allowed_tokens(vocab, cfg.task)
        allowed_ids = np.flatnonzero(allowed)
        ctc_logp = model.ctc_log_probs(enc).data[0, :n_enc] if cfg.gamma_ctc > 0 else None
        root = Hypothesis(tokens=(), state=_initial_dec_state(model, memory))
        if ctc_logp is not None:
            root.ctc_state = ctc_initial_state(ctc_logp, vocab.blank)
        if cfg.gamma_lm > 0:
            root.lm_state = _split_state(lm.init_state(1), 0)
        running, finished = [root], []
        for step in range(1, limit + 1):
            N = len(running)
            mem = _expand_memory(memory, N)
            state = _stack_states([h.state for h in running])
            prev = np.array([h.tokens[-1] if h.tokens else start for h in running], dtype=np.int64)
            feat, new_state, weights = model.decoder.step(mem, state, prev)
            att_lp = ops.log_softmax(model.decoder.out(feat), axis=-1).data
            if cfg.gamma_lm > 0:
                lm_prev = np.array([h.tokens[-1] if h.tokens else vocab.sos for h in running], dtype=np.int64)
                lm_lp, lm_new = lm.step(_stack_states([h.lm_state for h in running]), lm_prev)
                lm_lp = lm_lp.data
            candidates, lattices = [], []
            for n, h in enumerate(running):
                cands = allowed_ids
                base = h.att + att_lp[n, cands]
                if cfg.gamma_lm > 0:
                    base = base + cfg.gamma_lm * (h.lm + lm_lp[n, cands])
                ctc_new = ctc_r = None
                if ctc_logp is not None:
                    k = min(len(cands), int(math.ceil(cfg.ctc_prune * cfg.width)))
                    top = np.lexsort((cands, -base))[:k]
                    cands = cands[np.sort(top)]
                    ctc_r, ctc_new = kernels.ctc_prefix_extend(
                        ctc_logp, h.ctc_state, h.tokens[-1] if h.tokens else -1, cands, vocab.blank, not h.tokens)
                    is_eos = cands == vocab.eos
                    if is_eos.any():
                        ctc_new = ctc_new.copy()
                        ctc_new[is_eos] = np.logaddexp(h.ctc_state[-1, 0], h.ctc_state[-1, 1])
                lattices.append(ctc_r)
                for j, c in enumerate(cands):
                    att = h.att + att_lp[n, c]
                    ctc = float(ctc_new[j]) if ctc_new is not None else 0.0
                    lmv = h.lm + lm_lp[n, c] if cfg.gamma_lm > 0 else 0.0
                    score = combined_score(att, ctc, lmv, step, cfg)
                    if score == NEG_INF:
                        continue
                    candidates.append((-score, h.tokens + (int(c),), n, j, att, ctc, lmv))
            candidates.sort(key=lambda x: (x[0], x[1]))
            next_running = []
            for neg, toks, n, j, att, ctc, lmv in candidates[:cfg.width]:
                h = running[n]
                hyp = Hypothesis(tokens=toks, att=float(att), ctc=float(ctc), lm=float(lmv), length=float(step),
                                 score=float(-neg), alignments=h.alignments + [weights.data[n, :n_enc].copy()])
                if toks[-1] == vocab.eos:
                    hyp.complete = True
                    finished.append(hyp)
                    continue
                hyp.state = _split_state(new_state, n)
                if ctc_logp is not None:
                    hyp.ctc_state = lattices[n][j]
                if cfg.gamma_lm > 0:
                    hyp.lm_state = _split_state(lm_new, n)
                next_running.append(hyp)
            running = next_running
            if not running:
                break
            if cfg.beta <= 0 and finished:
                best_open = max(h.score for h in running)
                if sum(1 for f in finished if f.score > best_open) >= cfg.nbest:
                    break
    for h in finished + running:
        h.state = h.ctc_state = h.lm_state = None
    if finished:
        return DecodeResult(sorted(finished, key=Hypothesis.key)[:cfg.nbest])
    warnings.warn("beam search produced no complete hypothesis within the length limit")
    return DecodeResult(sorted(running, key=Hypothesis.key)[:cfg.nbest], incomplete=True)


def greedy_decode(model, source, task="st", target_lang=None, max_len=0, maxlen_ratio=2.0):
    """Argmax decoding until <eos> or the length limit; returns the token list (with <eos> if emitted)."""
    vocab = model.vocab
    cfg = BeamConfig(width=1, max_len=max_len, maxlen_ratio=maxlen_ratio, beta=0.0, task=task)
    model.eval()
    with no_grad():
        enc, lengths = _encode_source(model, source, task)
        memory = model.decoder.att.prepare(enc, lengths)
        limit = cfg.limit(lengths[0])
        allowed = _allowed_tokens(vocab, task)
        state = model.decoder.init_state(memory)
        tok = _start_token(model, cfg, target_lang)
        out = []
        for _ in range(limit):
            feat, state, _ = model.decoder.step(memory, state, np.array([tok]))
            lp = ops.log_softmax(model.decoder.out(feat), axis=-1).data[0]
            lp = np.where(allowed, lp, NEG_INF)
            tok = int(np.argmax(lp))
            out.append(tok)
            if tok == vocab.eos:
                break
    return out


def rescore(model, source, tokens, cfg: BeamConfig, lm=None, target_lang=None):
    """Recompute the score components of a token sequence from scratch."""
    vocab = model.vocab
    tokens = list(tokens)
    model.eval()
    with no_grad():
        enc, lengths = _encode_source(model, source, cfg.task)
        memory = model.decoder.att.prepare(enc, lengths)
        start = _start_token(model, cfg, target_lang)
        dec_in = np.array([[start] + tokens[:-1]], dtype=np.int64)
        logits = model.decoder.teacher_forced(memory, dec_in)
        lp = ops.log_softmax(logits, axis=-1).data[0]
        att = float(sum(lp[i, t] for i, t in enumerate(tokens)))
        ctc = 0.0
        if cfg.gamma_ctc > 0:
            ctc = ctc_prefix_score(model.ctc_log_probs(enc).data[0, :lengths[0]], tokens, vocab.blank, vocab.eos)
        lmv = 0.0
        if cfg.gamma_lm > 0:
            st = lm.init_state(1)
            prev = vocab.sos
            for t in tokens:
                llp, st = lm.step(st, np.array([prev]))
                lmv += float(llp.data[0, t])
                prev = t
    return {"att": att, "ctc": float(ctc), "lm": float(lmv), "length": float(len(tokens)),
            "score": float(combined_score(att, ctc, lmv, len(tokens), cfg))}


# ---------------------------------------------------------------- n-best files

NBEST_HEADER = "#id\trank\ttext\tscore\tatt\tctc\tlm\tlength\tcomplete\n"


def detokenize(vocab, tokens):
    return vocab.decode(tokens)


def write_nbest(path, records, vocab):
    """``records``: iterable of (utterance id, DecodeResult); one line per (id, rank)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(NBEST_HEADER)
        for uid, res in records:
            for rank, h in enumerate(res.hyps, 1):
                fh.write(f"{uid}\t{rank}\t{detokenize(vocab, h.tokens)}\t{float(h.score)!r}\t{float(h.att)!r}\t"
                         f"{float(h.ctc)!r}\t{float(h.lm)!r}\t{h.length:g}\t{int(h.complete and not res.incomplete)}\n")


def read_nbest(path, rank=1):
    """Return ``{id: text}`` for hypotheses of the given rank."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip("\n"):
                continue
            cols = line.rstrip("\n").split("\t")
            if int(cols[1]) == rank:
                out[cols[0]] = cols[2]
    return out
