import math

import numpy as np
import pytest

from multist.data import SyntheticSpec, Utterance, Vocabulary, VocabularyError, build_vocab, generate_synthetic_corpus
from multist.models import (ModelConfig, RnnLm, StModel, asr_forward, build_model,
                            checkpoint_bytes, checkpoint_from_bytes, checkpoint_of, init_transfer, lm_forward,
                            load_checkpoint, model_from_checkpoint, model_loss, nmt_forward, save_checkpoint,
                            st_forward)
from multist.numerics import backward, make_optimizer, no_grad, optimizer_step
from multist.training import TrainingConfig, evaluate_loss, train

TINY = dict(vgg_channels=(2, 3), enc_layers=1, enc_units=4, dec_layers=1, dec_units=4, emb_dim=3, att_dim=4,
            loc_channels=2, loc_width=3, lm_layers=1, lm_units=4)
SMALL = dict(vgg_channels=(4, 4), enc_layers=1, enc_units=32, dec_layers=1, dec_units=32, emb_dim=32,
             att_dim=32, loc_channels=4, loc_width=5, lm_layers=1, lm_units=32)


@pytest.fixture(scope="module")
def corpus():
    spec = SyntheticSpec(pairs=[("en", "fr"), ("en", "de")], n_train=6, n_dev=2, n_test=2, seed=2,
                         frames_per_char=(6, 8), feat_dim=4)
    return generate_synthetic_corpus(spec)


@pytest.fixture(scope="module")
def vocab(corpus):
    return build_vocab(corpus.split("train") + corpus.split("dev"))


def make(kind, vocab, seed=0, **kw):
    return build_model(ModelConfig(kind=kind, feat_dim=4, init_seed=seed, **{**TINY, **kw}), vocab)


# ---------------------------------------------------------------- loss contracts

@pytest.mark.parametrize("lam", [0.0, 0.3, 0.5, 1.0])
def test_asr_loss_is_interpolation(corpus, vocab, lam):
    m = make("asr", vocab)
    a, c, total = asr_forward(m, corpus.split("train")[:3], lam=lam)
    assert total.item() == (1 - lam) * a.item() + lam * c.item()
    if lam == 0.0:
        assert total.item() == a.item()


@pytest.mark.parametrize("kind", ["asr", "st", "nmt"])
def test_duplicated_batch_mean(corpus, vocab, kind):
    m = make(kind, vocab)
    u = corpus.split("train")[0]
    one = model_loss(m, [u]).item()
    two = model_loss(m, [u, u]).item()
    assert abs(one - two) < 1e-12 * max(1.0, abs(one))


def test_target_language_token_changes_loss(corpus, vocab):
    m = make("st", vocab)
    u = corpus.split("train")[0]
    other = Utterance(u.id, u.src_lang, "de" if u.tgt_lang == "fr" else "fr", u.features, u.transcript,
                      u.translations)
    assert st_forward(m, [u]).item() != st_forward(m, [other]).item()


def test_unknown_character_and_language(corpus, vocab):
    m = make("st", vocab)
    u = corpus.split("train")[0]
    bad = Utterance("x", "en", u.tgt_lang, u.features, u.transcript, ("@",))
    with pytest.raises(VocabularyError, match="'@'"):
        st_forward(m, [bad])
    with pytest.raises(VocabularyError, match="<2es>"):
        st_forward(m, [Utterance("y", "en", "es", u.features, u.transcript, u.translations)])


def test_nmt_matches_st_contracts(corpus, vocab):
    m = make("nmt", vocab)
    u = corpus.split("train")[1]
    assert nmt_forward(m, [u]).item() == pytest.approx(nmt_forward(m, [u, u]).item(), rel=1e-12)


def test_encoder_decoder_shapes_compatible(vocab):
    asr, st, nmt = make("asr", vocab), make("st", vocab), make("nmt", vocab)
    sp = dict(st.named_parameters())
    for k, p in asr.named_parameters():
        if k.startswith("encoder."):
            assert sp[k].shape == p.shape
    for k, p in nmt.named_parameters():
        if k.startswith("decoder."):
            assert sp[k].shape == p.shape
    assert asr.ctc.weight.shape[1] == asr.decoder.out.weight.shape[1] == len(vocab)


def test_forward_deterministic(corpus, vocab):
    m = make("st", vocab, seed=4)
    us = corpus.split("train")[:4]
    assert st_forward(m, us).item() == st_forward(m, us).item()
    assert st_forward(make("st", vocab, seed=4), us).item() == st_forward(m, us).item()


# ---------------------------------------------------------------- language model

def test_lm_single_token_conditionals(vocab):
    m = make("lm", vocab)
    a = vocab.char_ids[0]
    with no_grad():
        lp1, s = m.step(m.init_state(1), np.array([vocab.sos]))
        lp2, _ = m.step(s, np.array([a]))
        want = -(lp1.data[0, a] + lp2.data[0, vocab.eos]) / 2
        got = lm_forward(m, [[int(a)]]).item()
    assert got == pytest.approx(want, rel=1e-12)
    assert np.allclose(np.exp(lp1.data).sum(axis=1), 1.0, atol=1e-14)


def test_lm_uniform_projection(vocab):
    m = make("lm", vocab)
    m.out.weight.data[:] = 0
    m.out.bias.data[:] = 0
    assert lm_forward(m, [[5, 6, 7]]).item() == pytest.approx(math.log(len(vocab)), rel=1e-14)
    with pytest.raises(ValueError):
        lm_forward(m, [[len(vocab)]])


# ---------------------------------------------------------------- memorization

@pytest.fixture(scope="module")
def one_utt():
    spec = SyntheticSpec(n_train=1, n_dev=0, n_test=0, seed=1, frames_per_char=(6, 8))
    return generate_synthetic_corpus(spec).split("train")[0]


def memorize(kind, u, steps):
    v = build_vocab([u])
    m = build_model(ModelConfig(kind=kind, **SMALL), v)
    cfg = TrainingConfig(epochs=steps, batch_size=1, dropout=0.0, sampling_max=0.0, label_smoothing=0.0,
                         eps=1e-4)
    return train(m, [u], [u], cfg).trace[-1]["dev_loss"]


@pytest.mark.parametrize("kind, steps", [("asr", 50), ("st", 100), ("nmt", 100)])
def test_memorization(one_utt, kind, steps):
    assert memorize(kind, one_utt, steps) < 0.1


def test_lm_memorization():
    u = Utterance("m", "xx", "yy", np.zeros((1, 1)), "abcdefghij", ("k",))
    v = build_vocab([u])
    m = RnnLm(ModelConfig(kind="lm", **SMALL), v)
    seq = [v.encode("abcdefghij")]
    opt = make_optimizer("adam", lr=1e-2)
    params = m.parameters()
    for _ in range(150):
        for p in params.values():
            p.grad = None
        loss = lm_forward(m, seq)
        backward(loss, params.values())
        optimizer_step({k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items()}, opt)
    assert lm_forward(m, seq).item() < 0.05


# ---------------------------------------------------------------- gradients of the full ST loss

def test_st_loss_gradient_sample(corpus, vocab):
    m = make("st", vocab, seed=7)
    us = corpus.split("train")[:2]
    params = m.parameters()
    rng = np.random.default_rng(0)
    # zero-initialised conv biases put dead ReLU units exactly on the kink; move off it
    for p in params.values():
        p.data += 0.01 * rng.standard_normal(p.shape)
        p.grad = None
    backward(st_forward(m, us), params.values())
    names = sorted(params)
    h = 1e-5
    for _ in range(20):
        name = names[rng.integers(len(names))]
        flat = params[name].data.reshape(-1)
        i = rng.integers(flat.size)
        orig = flat[i]
        flat[i] = orig + h
        up = st_forward(m, us).item()
        flat[i] = orig - h
        down = st_forward(m, us).item()
        flat[i] = orig
        fd = (up - down) / (2 * h)
        g = params[name].grad.reshape(-1)[i]
        assert abs(g - fd) / max(abs(g), abs(fd), 1e-8) < 1e-3, (name, i, g, fd)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bitwise(corpus, vocab, tmp_path):
    m = make("asr", vocab, seed=3)
    ck = checkpoint_of(m, step=17)
    blob = checkpoint_bytes(ck)
    back = checkpoint_from_bytes(blob)
    assert checkpoint_bytes(back) == blob
    assert back.step == 17 and back.vocab == vocab and back.config == m.cfg
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    save_checkpoint(ck, tmp_path / "c.bin")
    m2 = model_from_checkpoint(load_checkpoint(tmp_path / "c.bin"))
    us = corpus.split("train")[:3]
    assert model_loss(m2, us).item() == model_loss(m, us).item()


def test_checkpoint_corruption_detected(vocab):
    blob = bytearray(checkpoint_bytes(checkpoint_of(make("st", vocab))))
    with pytest.raises(ValueError):
        checkpoint_from_bytes(b"XXXXXXXX" + bytes(blob[8:]))
    i = blob.index(b'"dec_units"')
    blob[i + 13] = ord("5")
    with pytest.raises(ValueError):
        checkpoint_from_bytes(bytes(blob))


def test_checkpoint_subsequent_training_identical(corpus, vocab):
    cfg = TrainingConfig(epochs=2, batch_size=3, optimizer="adam", lr=1e-3, seed=5)
    us, dev = corpus.split("train"), corpus.split("dev")
    m = make("st", vocab, seed=1)
    clone = model_from_checkpoint(checkpoint_from_bytes(checkpoint_bytes(checkpoint_of(m))))
    a = train(m, us, dev, cfg).trace
    b = train(clone, us, dev, cfg).trace
    assert a == b


# ---------------------------------------------------------------- transfer

def test_transfer_from_self_is_identity(vocab):
    m = make("st", vocab, seed=2)
    before = {k: v.copy() for k, v in checkpoint_of(m).params.items()}
    init_transfer(m, st=checkpoint_of(m))
    for k, p in m.named_parameters():
        assert p.data.tobytes() == before[k].tobytes()


def test_asr_and_mt_pretraining_partition(corpus, vocab):
    fresh = make("st", vocab, seed=0)
    asr = checkpoint_of(make("asr", vocab, seed=11))
    nmt = checkpoint_of(make("nmt", vocab, seed=12))
    target = make("st", vocab, seed=0)
    copied = init_transfer(target, asr=asr)
    fp = dict(fresh.named_parameters())
    for k, p in target.named_parameters():
        want = asr.params[k] if k.startswith("encoder.") else fp[k].data
        assert p.data.tobytes() == want.tobytes(), k
    assert all(k.startswith("encoder.") for k in copied)
    st_forward(target, corpus.split("train")[:1])

    both = make("st", vocab, seed=0)
    init_transfer(both, asr=asr, nmt=nmt)
    for k, p in both.named_parameters():
        donor = asr if k.startswith("encoder.") else nmt
        assert p.data.tobytes() == donor.params[k].tobytes(), k


def test_transfer_each_param_from_exactly_one_source(vocab):
    fresh = dict(make("st", vocab, seed=0).named_parameters())
    asr = checkpoint_of(make("asr", vocab, seed=5))
    for k in asr.params:
        asr.params[k] = asr.params[k] + 0.5  # a trained donor shares no values with a fresh model
    target = make("st", vocab, seed=0)
    init_transfer(target, asr=asr)
    for k, p in target.named_parameters():
        hits = [p.data.tobytes() == fresh[k].data.tobytes(),
                k in asr.params and p.data.tobytes() == asr.params[k].tobytes()]
        assert sum(hits) == 1, k


def test_transfer_shape_mismatch_lists_names(vocab):
    target = make("st", vocab)
    donor = checkpoint_of(make("asr", vocab, enc_units=5))
    with pytest.raises(ValueError) as err:
        init_transfer(target, asr=donor)
    assert "encoder.blstm" in str(err.value)


def test_transfer_vocab_mismatch(corpus, vocab):
    tokens = list(vocab.tokens)
    tokens[-1], tokens[-2] = tokens[-2], tokens[-1]
    shuffled = Vocabulary(tokens)
    target = make("st", vocab)
    with pytest.raises(ValueError, match="vocabulary"):
        init_transfer(target, st=checkpoint_of(make("st", shuffled)))


# ---------------------------------------------------------------- training loop

def test_zero_epochs_returns_initialization(corpus, vocab):
    m = make("st", vocab, seed=9)
    init = checkpoint_of(m)
    r = train(m, corpus.split("train"), corpus.split("dev"), TrainingConfig(epochs=0))
    assert checkpoint_bytes(r.checkpoint) == checkpoint_bytes(init)
    assert len(r.trace) == 1


def test_training_deterministic(corpus, vocab):
    cfg = TrainingConfig(epochs=2, batch_size=4, seed=3)
    runs = [train(make("st", vocab, seed=1), corpus.split("train"), corpus.split("dev"), cfg) for _ in range(2)]
    assert runs[0].trace == runs[1].trace
    assert checkpoint_bytes(runs[0].checkpoint) == checkpoint_bytes(runs[1].checkpoint)


def test_training_errors(vocab):
    with pytest.raises(ValueError):
        train(make("st", vocab), [], [], TrainingConfig())
    for bad in (dict(ctc_weight=1.5), dict(label_smoothing=1.0), dict(optimizer="sgd")):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)


def test_sampling_schedule_non_decreasing():
    cfg = TrainingConfig(epochs=10, sampling_max=0.4)
    probs = [cfg.sampling_prob(e) for e in range(10)]
    assert probs[0] == 0.0 and probs[-1] == pytest.approx(0.4)
    assert all(a <= b for a, b in zip(probs, probs[1:]))


def test_bilingual_run_beats_untrained_baseline():
    spec = SyntheticSpec(pairs=[("en", "fr")], n_train=200, n_dev=20, n_test=0, seed=0, frames_per_char=(4, 6))
    c = generate_synthetic_corpus(spec)
    v = build_vocab(c.split("train") + c.split("dev"))
    m = StModel(ModelConfig(enc_units=32, dec_units=32, emb_dim=32, att_dim=32), v)
    baseline = evaluate_loss(m, c.split("dev"))
    cfg = TrainingConfig(epochs=15, optimizer="adam", lr=2e-3, criterion=baseline * 0.999, stop_at_criterion=True)
    r = train(m, c.split("train"), c.split("dev"), cfg)
    assert r.epochs_to_criterion is not None and r.epochs_to_criterion <= 15
