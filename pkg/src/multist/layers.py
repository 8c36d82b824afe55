"""Neural building blocks: embeddings, (B)LSTMs, VGG front-end, attention, losses."""
from __future__ import annotations

import numpy as np

from . import kernels
from .numerics import Tensor, ShapeError, record
from .numerics import tensor as ops

INIT_SCALE = 0.1
MASK_VALUE = -1e30


class Module:
    """Container whose Tensor attributes (and nested Modules) are parameters."""

    training = False

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return dict(self.named_parameters())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)


def uniform(rng, shape, scale=INIT_SCALE):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def fan_in_uniform(rng, shape, fan_in):
    """Uniform with variance ``1 / fan_in``."""
    return uniform(rng, shape, np.sqrt(3.0 / fan_in))


def zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True):
        self.weight = fan_in_uniform(rng, (n_in, n_out), n_in)
        self.bias = zeros((n_out,)) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, rng, n_tokens, dim):
        self.weight = fan_in_uniform(rng, (n_tokens, dim), 1)

    def __call__(self, ids):
        return ops.embedding(self.weight, ids)


class LSTMParams(Module):
    """Packed gate weights (order i, f, g, o); biases start at 0 except the forget gate at 1."""

    def __init__(self, rng, n_in, hidden):
        self.hidden = hidden
        self.wx = fan_in_uniform(rng, (n_in, 4 * hidden), n_in)
        self.wh = fan_in_uniform(rng, (hidden, 4 * hidden), hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def step(self, x, h, c):
        hc = ops.lstm_cell(x, h, c, self.wx, self.wh, self.b)
        H = self.hidden
        return hc[:, :H], hc[:, H:]

    def sequence(self, x):
        return ops.lstm_sequence(x, self.wx, self.wh, self.b)


def reverse_index(lengths, T):
    """Per-row time index that reverses each sequence within its length; padding stays in place."""
    idx = np.tile(np.arange(T), (len(lengths), 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n - 1, -1, -1)
    return idx


class BLSTM(Module):
    """Stack of bidirectional LSTM layers; each layer consumes the previous layer's output."""

    def __init__(self, rng, n_in, hidden, layers, dropout=0.0):
        self.dropout = dropout
        self.fwd = []
        self.bwd = []
        for i in range(layers):
            d = n_in if i == 0 else 2 * hidden
            self.fwd.append(LSTMParams(rng, d, hidden))
            self.bwd.append(LSTMParams(rng, d, hidden))
        self.rng = rng

    def __call__(self, x, lengths=None):
        return blstm_forward(self, x, lengths)


def blstm_forward(blstm, frames, lengths=None):
    """Run a BLSTM stack over (B, T, D) frames (or a single (T, D) sequence)."""
    single = frames.ndim == 2
    if single:
        frames = frames.reshape(1, *frames.shape)
    B, T, _ = frames.shape
    if T < 1:
        raise ShapeError("blstm_forward: empty input")
    if lengths is None:
        lengths = [T] * B
    rev = reverse_index(lengths, T)
    rows = np.arange(B)[:, None]
    h = frames
    for fwd, bwd in zip(blstm.fwd, blstm.bwd):
        out_f = fwd.sequence(h)
        out_b = bwd.sequence(h[rows, rev])[rows, rev]
        h = ops.concat([out_f, out_b], axis=-1)
        h = ops.dropout(h, blstm.dropout, blstm.rng, blstm.training)
    return h[0] if single else h


def time_mask(lengths, T):
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


class VggBlock(Module):
    """Two 3x3 conv + ReLU layers followed by 2x2 max pooling (stride 2)."""

    def __init__(self, rng, c_in, c_out):
        self.conv0_w = uniform(rng, (c_out, c_in, 3, 3), np.sqrt(6.0 / (9 * c_in)))
        self.conv0_b = zeros((c_out,))
        self.conv1_w = uniform(rng, (c_out, c_out, 3, 3), np.sqrt(6.0 / (9 * c_out)))
        self.conv1_b = zeros((c_out,))

    def __call__(self, x, mask):
        m = Tensor(mask[:, None, :, None])
        x = ops.mul(ops.relu(ops.conv2d_3x3(x, self.conv0_w, self.conv0_b)), m)
        x = ops.mul(ops.relu(ops.conv2d_3x3(x, self.conv1_w, self.conv1_b)), m)
        return ops.max_pool2d(x)


def pooled_length(n, blocks=2):
    for _ in range(blocks):
        n = -(-n // 2)
    return n


class VggFront(Module):
    def __init__(self, rng, feat_dim, channels=(4, 8)):
        self.feat_dim = feat_dim
        self.blocks = []
        c_in = 1
        for c in channels:
            self.blocks.append(VggBlock(rng, c_in, c))
            c_in = c
        self.out_dim = c_in * pooled_length(feat_dim, len(channels))

    def __call__(self, frames, lengths=None):
        return vgg_encoder_front(self, frames, lengths)


def vgg_encoder_front(front, frames, lengths=None):
    """(B, T, D) frames -> ((B, T', C*D') features, output lengths)."""
    single = frames.ndim == 2
    if single:
        frames = frames.reshape(1, *frames.shape)
    B, T, D = frames.shape
    if T < 4:
        raise ShapeError(f"vgg_encoder_front: need at least 4 frames, got {T}")
    if D != front.feat_dim:
        raise ShapeError(f"vgg_encoder_front: expected feature dim {front.feat_dim}, got {D}")
    lengths = [T] * B if lengths is None else list(lengths)
    x = frames.reshape(B, 1, T, D)
    for block in front.blocks:
        x = block(x, time_mask(lengths, x.shape[2]))
        lengths = [pooled_length(n, 1) for n in lengths]
    _, C, T2, D2 = x.shape
    x = ops.transpose(x, (0, 2, 1, 3)).reshape(B, T2, C * D2)
    if single:
        return x[0], lengths[0]
    return x, lengths


# ---------------------------------------------------------------- attention

class Attention(Module):
    """Additive (content) or location-aware scorer over encoder frames."""

    def __init__(self, rng, kind, enc_dim, dec_dim, att_dim, loc_channels=8, loc_width=11):
        if kind not in ("additive", "location"):
            raise ValueError(f"unknown attention kind {kind!r}")
        self.kind = kind
        self.enc_proj = Linear(rng, enc_dim, att_dim)
        self.dec_proj = Linear(rng, dec_dim, att_dim, bias=False)
        if kind == "location":
            self.loc_conv = fan_in_uniform(rng, (loc_channels, loc_width), loc_width)
            self.loc_proj = Linear(rng, loc_channels, att_dim, bias=False)
        self.score = fan_in_uniform(rng, (att_dim, 1), att_dim)

    def prepare(self, enc, lengths=None):
        """Precompute per-utterance quantities reused at every decoder step."""
        B, T, _ = enc.shape
        lengths = [T] * B if lengths is None else list(lengths)
        mask = time_mask(lengths, T)
        return {
            "enc": enc,
            "proj": self.enc_proj(enc),
            "mask": mask,
            "bias": Tensor((1.0 - mask) * MASK_VALUE),
            "lengths": lengths,
        }

    def initial_alignment(self, memory):
        mask = memory["mask"]
        return Tensor(mask / mask.sum(axis=1, keepdims=True))

    def __call__(self, memory, dec_state, prev_align=None):
        return attend(self, memory, dec_state, prev_align)


def attend(att, memory, dec_state, prev_align=None):
    """Return (weights (B, T), context (B, E)) for one decoder step."""
    enc = memory["enc"]
    B, T, E = enc.shape
    if dec_state.shape[0] != B or dec_state.shape[1] != att.dec_proj.weight.shape[0]:
        raise ShapeError(f"attend: decoder state {dec_state.shape} does not match batch {B} / "
                         f"dim {att.dec_proj.weight.shape[0]}")
    pre = ops.add(memory["proj"], att.dec_proj(dec_state).reshape(B, 1, -1))
    if att.kind == "location":
        if prev_align is None:
            raise ValueError("attend: location attention needs the previous alignment")
        if prev_align.shape != (B, T):
            raise ShapeError(f"attend: previous alignment {prev_align.shape} != {(B, T)}")
        feats = ops.conv1d_same(prev_align, att.loc_conv)
        pre = ops.add(pre, att.loc_proj(feats))
    energy = ops.matmul(ops.tanh(pre), att.score).reshape(B, T)
    weights = ops.softmax(ops.add(energy, memory["bias"]), axis=-1)
    context = ops.matmul(weights.reshape(B, 1, T), enc).reshape(B, E)
    return weights, context


# ---------------------------------------------------------------- losses

def label_smoothed_nll(logits, targets, eps=0.0, weights=None):
    """Sum over rows of ``-sum_v q_v log p_v`` with ``q = (1-eps) onehot + eps/V``.

    ``logits`` is (N, V) or a single (V,) row; ``weights`` (N,) scales rows
    (e.g. a padding mask).
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label_smoothed_nll: eps must lie in [0, 1), got {eps}")
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    N, V = z.shape
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.shape != (N,):
        raise ShapeError(f"label_smoothed_nll: {N} rows but targets of shape {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= V):
        raise IndexError(f"label_smoothed_nll: target index out of range [0, {V})")
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=np.float64)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    q = np.full((N, V), eps / V)
    q[np.arange(N), targets] += 1.0 - eps
    loss = float((w * -(q * logp).sum(axis=1)).sum())

    def bw(g):
        grad = w[:, None] * (np.exp(logp) - q) * g
        return (grad.reshape(logits.shape),)

    return record("label_smoothed_nll", np.array(loss), (logits,), bw)


def ctc_feasible(T, target):
    """Whether T frames can emit ``target`` (repeats need a separating blank)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return T >= len(target) + repeats


def ctc_loss_batch(log_probs, lengths, targets, blank):
    """Per-utterance ``-log P_ctc`` (B,) for log-probs (B, T, V) and token lists."""
    B = log_probs.shape[0]
    if len(targets) != B or len(lengths) != B:
        raise ShapeError(f"ctc_loss: batch {B} but {len(targets)} targets / {len(lengths)} lengths")
    losses = np.empty(B)
    grads = np.zeros(log_probs.shape)
    for b in range(B):
        T, tgt = int(lengths[b]), np.asarray(targets[b], dtype=np.int64)
        if len(tgt) < 1:
            raise ValueError("ctc_loss: empty target")
        if not ctc_feasible(T, tgt):
            raise ValueError(f"ctc_loss: target of length {len(tgt)} infeasible for {T} frames")
        losses[b], grads[b, :T] = kernels.ctc_loss_grad(log_probs.data[b, :T], tgt, blank)

    def bw(g):
        return (grads * g[:, None, None],)

    return record("ctc_loss", losses, (log_probs,), bw)


def ctc_loss(log_probs, target, blank):
    """``-log P_ctc(target | x)`` for a single (T, V) log-probability matrix."""
    T = log_probs.shape[0]
    return ctc_loss_batch(log_probs.reshape(1, *log_probs.shape), [T], [target], blank)[0]


def joint_asr_loss(l_att, l_ctc, lam):
    """``(1 - lam) * l_att + lam * l_ctc``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"joint_asr_loss: lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return l_att
    if lam == 1.0:
        return l_ctc
    return ops.add(ops.mul(l_att, 1.0 - lam), ops.mul(l_ctc, lam))
