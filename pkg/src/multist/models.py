"""ASR (hybrid CTC/attention), NMT, E2E-ST and RNNLM networks, checkpoints and transfer."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import Vocabulary, make_decoder_io
from .layers import (BLSTM, Attention, Embedding, Linear, LSTMParams, Module, VggFront,
                     ctc_feasible, ctc_loss_batch, joint_asr_loss, label_smoothed_nll)
from .numerics import Tensor
from .numerics import tensor as ops

KINDS = ("asr", "st", "nmt", "lm")
CKPT_MAGIC = b"MSTCKPT\x00"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    kind: str = "st"
    feat_dim: int = 8
    vgg_channels: tuple = (4, 8)
    enc_layers: int = 2
    enc_units: int = 64
    dec_layers: int = 2
    dec_units: int = 64
    emb_dim: int = 64
    att_dim: int = 64
    loc_channels: int = 8
    loc_width: int = 11
    lm_layers: int = 2
    lm_units: int = 64
    ctc_weight: float = 0.3
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        self.vgg_channels = tuple(self.vgg_channels)
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["vgg_channels"] = list(self.vgg_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- components

class SpeechEncoder(Module):
    """VGG front-end followed by a BLSTM stack."""

    def __init__(self, rng, cfg):
        self.vgg = VggFront(rng, cfg.feat_dim, cfg.vgg_channels)
        self.blstm = BLSTM(rng, self.vgg.out_dim, cfg.enc_units, cfg.enc_layers)
        self.out_dim = 2 * cfg.enc_units

    def __call__(self, feats, lengths):
        x, lengths = self.vgg(feats, lengths)
        return self.blstm(x, lengths), lengths


class TextEncoder(Module):
    """Source embedding followed by a BLSTM stack."""

    def __init__(self, rng, cfg, n_tokens):
        self.embed = Embedding(rng, n_tokens, cfg.emb_dim)
        self.blstm = BLSTM(rng, cfg.emb_dim, cfg.enc_units, cfg.enc_layers)
        self.out_dim = 2 * cfg.enc_units

    def __call__(self, ids, lengths):
        return self.blstm(self.embed(ids), lengths), list(lengths)


class Decoder(Module):
    """Stacked LSTM decoder with attention; the output layer sees [state; context]."""

    def __init__(self, rng, cfg, n_tokens, enc_dim, att_kind):
        self.embed = Embedding(rng, n_tokens, cfg.emb_dim)
        self.att = Attention(rng, att_kind, enc_dim, cfg.dec_units, cfg.att_dim,
                             cfg.loc_channels, cfg.loc_width)
        self.cells = [LSTMParams(rng, (cfg.emb_dim + enc_dim) if i == 0 else cfg.dec_units, cfg.dec_units)
                      for i in range(cfg.dec_layers)]
        self.out = Linear(rng, cfg.dec_units + enc_dim, n_tokens)
        self.units = cfg.dec_units
        self.dropout = 0.0
        self.rng = rng

    def init_state(self, memory):
        B = memory["enc"].shape[0]
        zeros = Tensor(np.zeros((B, self.units)))
        return {"h": [zeros] * len(self.cells), "c": [zeros] * len(self.cells),
                "align": self.att.initial_alignment(memory)}

    def step(self, memory, state, tokens):
        """One decoder step: returns (output features (B, H+E), new state, attention weights)."""
        weights, context = self.att(memory, state["h"][-1], state["align"])
        x = ops.concat([self.embed(tokens), context], axis=-1)
        hs, cs = [], []
        for cell, h, c in zip(self.cells, state["h"], state["c"]):
            h, c = cell.step(x, h, c)
            hs.append(h)
            cs.append(c)
            x = ops.dropout(h, self.dropout, self.rng, self.training)
        feat = ops.concat([x, context], axis=-1)
        return feat, {"h": hs, "c": cs, "align": weights}, weights

    def teacher_forced(self, memory, dec_in, sampling_prob=0.0, rng=None):
        """Logits (B, L, V) with ground-truth inputs, optionally replaced by model predictions."""
        B, L = dec_in.shape
        state = self.init_state(memory)
        feats = []
        tokens = dec_in[:, 0]
        for i in range(L):
            if i > 0:
                tokens = dec_in[:, i]
                if sampling_prob > 0.0:
                    prev = feats[-1].data @ self.out.weight.data + self.out.bias.data
                    pick = rng.random(B) < sampling_prob
                    tokens = np.where(pick, prev.argmax(axis=1), tokens)
            feat, state, _ = self.step(memory, state, tokens)
            feats.append(feat)
        return self.out(ops.stack(feats, axis=1))


class SpeechTranslator(Module):
    """Shared pieces of the encoder-decoder models."""

    task = "st"

    def __init__(self, cfg, vocab):
        self.cfg = cfg
        self.vocab = vocab

    def set_dropout(self, rate, rng):
        for m in self.modules():
            if hasattr(m, "dropout"):
                m.dropout = rate
            if hasattr(m, "rng"):
                m.rng = rng

    def encode(self, batch):
        enc, lengths = self.encoder(Tensor(batch["feats"]), batch["feat_lengths"])
        return enc, lengths


class StModel(SpeechTranslator):
    task = "st"

    def __init__(self, cfg, vocab):
        super().__init__(cfg, vocab)
        rng = np.random.default_rng([cfg.init_seed, 0])
        self.encoder = SpeechEncoder(rng, cfg)
        self.decoder = Decoder(rng, cfg, len(vocab), self.encoder.out_dim, "additive")


class AsrModel(SpeechTranslator):
    task = "asr"

    def __init__(self, cfg, vocab):
        super().__init__(cfg, vocab)
        rng = np.random.default_rng([cfg.init_seed, 0])
        self.encoder = SpeechEncoder(rng, cfg)
        self.decoder = Decoder(rng, cfg, len(vocab), self.encoder.out_dim, "location")
        self.ctc = Linear(rng, self.encoder.out_dim, len(vocab))

    def ctc_log_probs(self, enc):
        return ops.log_softmax(self.ctc(enc), axis=-1)


class NmtModel(SpeechTranslator):
    task = "nmt"

    def __init__(self, cfg, vocab):
        super().__init__(cfg, vocab)
        rng = np.random.default_rng([cfg.init_seed, 0])
        self.encoder = TextEncoder(rng, cfg, len(vocab))
        self.decoder = Decoder(rng, cfg, len(vocab), self.encoder.out_dim, "additive")

    def encode(self, batch):
        return self.encoder(batch["src"], batch["src_lengths"])


class RnnLm(Module):
    task = "lm"

    def __init__(self, cfg, vocab):
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng([cfg.init_seed, 0])
        self.embed = Embedding(rng, len(vocab), cfg.emb_dim)
        self.cells = [LSTMParams(rng, cfg.emb_dim if i == 0 else cfg.lm_units, cfg.lm_units)
                      for i in range(cfg.lm_layers)]
        self.out = Linear(rng, cfg.lm_units, len(vocab))
        self.dropout = 0.0
        self.rng = rng

    def set_dropout(self, rate, rng):
        self.dropout = rate
        self.rng = rng

    def init_state(self, B):
        zeros = Tensor(np.zeros((B, self.cfg.lm_units)))
        return {"h": [zeros] * len(self.cells), "c": [zeros] * len(self.cells)}

    def step(self, state, tokens):
        """Next-token log-probabilities (B, V) and the new state."""
        x = self.embed(tokens)
        hs, cs = [], []
        for cell, h, c in zip(self.cells, state["h"], state["c"]):
            h, c = cell.step(x, h, c)
            hs.append(h)
            cs.append(c)
            x = h
        return ops.log_softmax(self.out(x), axis=-1), {"h": hs, "c": cs}


MODEL_CLASSES = {"st": StModel, "asr": AsrModel, "nmt": NmtModel, "lm": RnnLm}


def build_model(cfg, vocab):
    return MODEL_CLASSES[cfg.kind](cfg, vocab)


# ---------------------------------------------------------------- batching

def _pad(seqs, value):
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def collate(utts, task, vocab, multilingual=None):
    """Padded arrays for a list of utterances."""
    if not utts:
        raise ValueError("collate: empty batch")
    io_pairs = [make_decoder_io(u, task, vocab, multilingual) for u in utts]
    batch = {
        "ids": [u.id for u in utts],
        "dec_in": _pad([p[0] for p in io_pairs], vocab.pad),
        "dec_tgt": _pad([p[1] for p in io_pairs], vocab.pad),
        "n_tokens": sum(len(p[1]) for p in io_pairs),
    }
    batch["tgt_mask"] = (np.arange(batch["dec_tgt"].shape[1])[None, :]
                         < np.array([len(p[1]) for p in io_pairs])[:, None]).astype(np.float64)
    if task == "nmt":
        src = [vocab.encode(u.transcript) for u in utts]
        if any(len(s) == 0 for s in src):
            raise ValueError("collate: empty source text")
        batch["src"] = _pad(src, vocab.pad)
        batch["src_lengths"] = [len(s) for s in src]
    else:
        feats = [u.features for u in utts]
        T = max(f.shape[0] for f in feats)
        D = feats[0].shape[1]
        arr = np.zeros((len(feats), T, D))
        for i, f in enumerate(feats):
            if f.shape[1] != D:
                raise ValueError(f"collate: feature dims differ ({f.shape[1]} vs {D})")
            arr[i, :f.shape[0]] = f
        batch["feats"] = arr
        batch["feat_lengths"] = [f.shape[0] for f in feats]
    if task == "asr":
        batch["ctc_targets"] = [p[1][:-1] for p in io_pairs]
    return batch


def _att_loss(model, batch, enc, lengths, sampling_prob, eps, rng):
    memory = model.decoder.att.prepare(enc, lengths)
    logits = model.decoder.teacher_forced(memory, batch["dec_in"], sampling_prob, rng)
    V = logits.shape[-1]
    total = label_smoothed_nll(logits.reshape(-1, V), batch["dec_tgt"].reshape(-1), eps,
                               batch["tgt_mask"].reshape(-1))
    return ops.mul(total, 1.0 / batch["n_tokens"])


def asr_forward(model, utts, sampling_prob=0.0, lam=None, eps=0.0, rng=None):
    """Return (L_att, L_ctc, L_asr), each averaged per target token."""
    lam = model.cfg.ctc_weight if lam is None else lam
    batch = collate(utts, "asr", model.vocab)
    enc, lengths = model.encode(batch)
    l_att = _att_loss(model, batch, enc, lengths, sampling_prob, eps, rng)
    for uid, n, tgt in zip(batch["ids"], lengths, batch["ctc_targets"]):
        if not ctc_feasible(n, tgt):
            raise ValueError(f"{uid}: {n} encoder frames cannot emit {len(tgt)} CTC labels")
    nll = ctc_loss_batch(model.ctc_log_probs(enc), lengths, batch["ctc_targets"], model.vocab.blank)
    l_ctc = ops.mul(ops.sum(nll), 1.0 / sum(len(t) for t in batch["ctc_targets"]))
    return l_att, l_ctc, joint_asr_loss(l_att, l_ctc, lam)


def st_forward(model, utts, sampling_prob=0.0, eps=0.0, rng=None):
    """Per-token label-smoothed NLL of the first target translation."""
    batch = collate(utts, "st", model.vocab)
    enc, lengths = model.encode(batch)
    return _att_loss(model, batch, enc, lengths, sampling_prob, eps, rng)


def nmt_forward(model, utts, sampling_prob=0.0, eps=0.0, rng=None):
    batch = collate(utts, "nmt", model.vocab)
    enc, lengths = model.encode(batch)
    return _att_loss(model, batch, enc, lengths, sampling_prob, eps, rng)


def lm_sequences(utts, vocab, task="asr"):
    """Token sequences an LM is trained on: the decoder targets without <eos>."""
    return [make_decoder_io(u, task, vocab)[1][:-1] for u in utts]


def lm_forward(model, sequences):
    """Per-token NLL of ``<sos> seq <eos>`` teacher forcing over a list of token lists."""
    vocab = model.vocab
    for s in sequences:
        for t in s:
            if not 0 <= t < len(vocab):
                raise ValueError(f"lm_forward: token id {t} outside vocabulary")
    inp = _pad([[vocab.sos] + list(s) for s in sequences], vocab.pad)
    tgt = _pad([list(s) + [vocab.eos] for s in sequences], vocab.pad)
    mask = (np.arange(tgt.shape[1])[None, :] < np.array([len(s) + 1 for s in sequences])[:, None])
    B, L = inp.shape
    emb = model.embed(inp)
    h = emb
    for i, cell in enumerate(model.cells):
        h = cell.sequence(h)
        if i < len(model.cells) - 1:
            h = ops.dropout(h, model.dropout, model.rng, model.training)
    logits = model.out(h)
    total = label_smoothed_nll(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), 0.0,
                               mask.reshape(-1).astype(np.float64))
    return ops.mul(total, 1.0 / mask.sum())


def model_loss(model, utts, sampling_prob=0.0, eps=0.0, rng=None, lam=None):
    kind = model.cfg.kind
    if kind == "asr":
        return asr_forward(model, utts, sampling_prob, lam, eps, rng)[2]
    if kind == "st":
        return st_forward(model, utts, sampling_prob, eps, rng)
    if kind == "nmt":
        return nmt_forward(model, utts, sampling_prob, eps, rng)
    return lm_forward(model, lm_sequences(utts, model.vocab))


# ---------------------------------------------------------------- checkpoints

def fingerprint(cfg, vocab):
    blob = json.dumps({"config": cfg.to_dict(), "vocab": vocab.tokens}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    params: dict = field(default_factory=dict)
    step: int = 0

    @property
    def fingerprint(self):
        return fingerprint(self.config, self.vocab)


def checkpoint_of(model, step=0):
    return Checkpoint(model.cfg, model.vocab, {k: v.data.copy() for k, v in model.named_parameters()}, step)


def model_from_checkpoint(ckpt):
    model = build_model(ckpt.config, ckpt.vocab)
    load_params(model, ckpt.params)
    return model


def load_params(model, params):
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    bad = sorted(k for k in own if k in params and own[k].shape != params[k].shape)
    if missing or extra or bad:
        raise ValueError(f"checkpoint does not fit model: missing={missing} unexpected={extra} shape={bad}")
    for k, t in own.items():
        t.data = np.array(params[k], dtype=np.float64, copy=True)


def _put_str(buf, s):
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _get_str(buf):
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n).decode("utf-8")


def checkpoint_bytes(ckpt):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    _put_str(buf, ckpt.fingerprint)
    _put_str(buf, json.dumps(ckpt.config.to_dict(), sort_keys=True))
    buf.write(struct.pack("<Q", ckpt.step))
    buf.write(struct.pack("<I", len(ckpt.vocab)))
    for tok in ckpt.vocab.tokens:
        _put_str(buf, tok)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        _put_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(blob):
    buf = io.BytesIO(blob)
    if buf.read(8) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    fp = _get_str(buf)
    cfg = ModelConfig.from_dict(json.loads(_get_str(buf)))
    (step,) = struct.unpack("<Q", buf.read(8))
    (n_tok,) = struct.unpack("<I", buf.read(4))
    vocab = Vocabulary([_get_str(buf) for _ in range(n_tok)])
    (n_par,) = struct.unpack("<I", buf.read(4))
    params = {}
    for _ in range(n_par):
        name = _get_str(buf)
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    ckpt = Checkpoint(cfg, vocab, params, step)
    if ckpt.fingerprint != fp:
        raise ValueError("checkpoint fingerprint does not match its config and vocabulary")
    return ckpt


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# ---------------------------------------------------------------- transfer

VOCAB_INDEXED = ("decoder.embed.", "decoder.out.", "ctc.", "encoder.embed.")


def init_transfer(target, asr=None, nmt=None, st=None):
    """Copy donor parameters into ``target`` (an StModel) in place.

    ``asr`` donates the speech encoder, ``nmt`` the translation decoder
    including its output layer, ``st`` every parameter. Parameters no donor
    covers keep their current values. Returns the list of copied names.
    """
    plan = {}
    own = dict(target.named_parameters())
    for donor, prefixes in ((asr, ("encoder.",)), (nmt, ("decoder.",)), (st, ("",))):
        if donor is None:
            continue
        for name in own:
            if name.startswith(prefixes) and name in donor.params:
                plan[name] = donor
            elif name.startswith(prefixes) and prefixes != ("",) and name not in donor.params:
                raise ValueError(f"donor checkpoint lacks parameter {name}")
        if st is donor:
            missing = sorted(n for n in own if n not in donor.params)
            if missing:
                raise ValueError(f"ST donor lacks parameters: {missing}")
    bad = sorted(n for n, d in plan.items() if d.params[n].shape != own[n].shape)
    if bad:
        raise ValueError("shape mismatch for parameters: " + ", ".join(
            f"{n} {plan[n].params[n].shape} vs {own[n].shape}" for n in bad))
    vocab_bad = sorted(n for n, d in plan.items() if n.startswith(VOCAB_INDEXED) and d.vocab != target.vocab)
    if vocab_bad:
        raise ValueError(f"vocabulary mismatch for vocabulary-indexed parameters: {vocab_bad}")
    for name, donor in plan.items():
        own[name].data = np.array(donor.params[name], dtype=np.float64, copy=True)
    return sorted(plan)
