"""Independent brute-force references used by the tests."""
import itertools
import math
from collections import Counter

import numpy as np

from multist.data import SPECIALS, Vocabulary
from multist.models import ModelConfig, build_model
from multist.numerics import no_grad
from multist.numerics import tensor as ops


def collapse(path, blank):
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def all_paths(T, V):
    return itertools.product(range(V), repeat=T)


def path_logprob(logp, path):
    return sum(logp[t, s] for t, s in enumerate(path))


def ctc_brute_force(logp, target, blank):
    """-log of the summed probability of every frame path collapsing to target."""
    T, V = logp.shape
    target = tuple(target)
    total = 0.0
    for path in all_paths(T, V):
        if collapse(path, blank) == target:
            total += math.exp(path_logprob(logp, path))
    return -math.log(total) if total > 0 else math.inf


def prefix_brute_force(logp, prefix, blank):
    """log P(collapsed output starts with prefix), by enumerating every path."""
    T, V = logp.shape
    prefix = tuple(prefix)
    total = 0.0
    for path in all_paths(T, V):
        if collapse(path, blank)[:len(prefix)] == prefix:
            total += math.exp(path_logprob(logp, path))
    return math.log(total) if total > 0 else -math.inf


def exact_brute_force(logp, labels, blank):
    """log P(collapsed output is exactly labels)."""
    nll = ctc_brute_force(logp, labels, blank)
    return -nll


def random_log_probs(rng, T, V):
    z = rng.normal(size=(T, V)) * 1.5
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- BLEU from the definition

def bleu_reference(hyps, ref_sets, max_n=4):
    """Corpus BLEU written directly from the definition, no shared helpers."""
    match = [0] * max_n
    total = [0] * max_n
    c = r = 0
    for hyp, refs in zip(hyps, ref_sets):
        h = hyp.lower().split()
        rs = [x.lower().split() for x in refs]
        c += len(h)
        # closest reference length, shorter one on ties
        best = None
        for ref in rs:
            d = abs(len(ref) - len(h))
            if best is None or d < best[0] or (d == best[0] and len(ref) < best[1]):
                best = (d, len(ref))
        r += best[1]
        for n in range(1, max_n + 1):
            grams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            counts = Counter(grams)
            for g, k in counts.items():
                most = 0
                for ref in rs:
                    rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
                    most = max(most, rg.count(g))
                match[n - 1] += min(k, most)
            total[n - 1] += len(grams)
    if c == 0 or any(t == 0 for t in total) or any(m == 0 for m in match):
        return 0.0
    logs = sum(math.log(m / t) for m, t in zip(match, total)) / max_n
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(logs)


def levenshtein(a, b):
    """Textbook dynamic program."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


# ---------------------------------------------------------------- finite differences on module parameters

def param_fd_errors(loss_fn, params, h=1e-5, sample=None, rng=None):
    """Relative error of autodiff vs central differences for each named parameter.

    ``loss_fn()`` rebuilds the scalar loss from the current parameter values.
    With ``sample`` set, only that many random coordinates per tensor are probed.
    """
    from multist.numerics import backward, relative_error

    for p in params.values():
        p.grad = None
    backward(loss_fn(), params=list(params.values()))
    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idx = rng.choice(flat.size, size=sample, replace=False)
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd[j] = (up - down) / (2 * h)
        errors[name] = relative_error(p.grad.reshape(-1)[idx], fd)
    return errors


# ---------------------------------------------------------------- toy decoders and exhaustive search

TOY_DIMS = dict(feat_dim=3, vgg_channels=(2, 2), enc_layers=1, enc_units=4, dec_layers=1, dec_units=5, emb_dim=3,
            att_dim=4, loc_channels=2, loc_width=3, lm_layers=1, lm_units=4)


def toy_vocab(n_chars=3, targets=("fr",), sources=("en",)):
    chars = "abcdefgh"[:n_chars]
    return Vocabulary(list(SPECIALS) + [f"<2{t}>" for t in targets] + [f"<LID:{s}>" for s in sources] + list(chars))


def toy_model(kind, seed, vocab, sharpen=4.0):
    m = build_model(ModelConfig(kind=kind, init_seed=seed, **TOY_DIMS), vocab)
    # random init is close to uniform; sharpen so the search problem is not trivial
    m.decoder.out.weight.data *= sharpen
    m.decoder.out.bias.data[:] = np.random.default_rng(seed).normal(size=len(vocab))
    return m


def feats(seed, T=12):
    return np.random.default_rng([seed, 1]).normal(size=(T, 3))


def seq_logprob(model, x, tokens, start):
    """Attention log-probability of a token sequence by stepping the decoder directly."""
    with no_grad():
        enc, lengths = model.encode({"feats": x[None], "feat_lengths": [len(x)]})
        memory = model.decoder.att.prepare(enc, lengths)
        state = model.decoder.init_state(memory)
        prev, total = start, 0.0
        for t in tokens:
            feat, state, _ = model.decoder.step(memory, state, np.array([prev]))
            total += ops.log_softmax(model.decoder.out(feat), axis=-1).data[0, t]
            prev = t
    return total


def exhaustive_best(model, x, vocab, start, max_len):
    symbols = list(vocab.char_ids) + [vocab.eos]
    best = None
    for n in range(1, max_len + 1):
        for body in itertools.product(vocab.char_ids, repeat=n - 1):
            toks = tuple(int(t) for t in body) + (vocab.eos,)
            s = seq_logprob(model, x, toks, start)
            if best is None or s > best[0] or (s == best[0] and toks < best[1]):
                best = (s, toks)
    assert len(symbols) <= 4
    return best
