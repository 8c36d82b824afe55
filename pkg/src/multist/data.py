"""Corpus material: normalization, vocabularies, synthetic corpora, batching, file formats."""
from __future__ import annotations

import logging
import struct
import unicodedata
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<sos>", "<eos>", "<unk>", "<blank>")
FEAT_MAGIC = b"MSTFEAT1"
SPLITS = ("train", "dev", "test")

_PUNCT_MAP = str.maketrans({
    "‘": "'", "’": "'", "‚": "'", "‛": "'", "′": "'", "`": "'",
    "“": '"', "”": '"', "„": '"', "«": '"', "»": '"',
    "–": "-", "—": "-", "−": "-", "…": "...",
})


class VocabularyError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    src_lang: str
    tgt_lang: str
    features: np.ndarray
    transcript: str
    translations: tuple = ()

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.translations = tuple(self.translations)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"utterance {self.id}: features must be (T>=1, D), got {self.features.shape}")
        if not self.translations:
            raise ValueError(f"utterance {self.id}: at least one translation required")

    @property
    def n_frames(self):
        return self.features.shape[0]

    @property
    def pair(self):
        return f"{self.src_lang}-{self.tgt_lang}"


# ---------------------------------------------------------------- text

def normalize_text(raw: str, side: str = "target") -> str:
    """Lowercase, unify punctuation and collapse whitespace.

    The source side also drops every punctuation mark except the apostrophe.
    """
    if side not in ("source", "target"):
        raise ValueError(f"normalize_text: side must be 'source' or 'target', not {side!r}")
    text = unicodedata.normalize("NFKC", raw).lower()
    text = unicodedata.normalize("NFKC", text).translate(_PUNCT_MAP)
    if side == "source":
        text = "".join(ch for ch in text if ch == "'" or not unicodedata.category(ch).startswith("P"))
    return " ".join(text.split())


class Vocabulary:
    """Specials, target-language tokens <2xx>, source-language tokens <LID:xx>, then characters."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.index:
                raise VocabularyError(f"vocabulary lacks special token {s}")
        self.target_langs = [t[2:-1] for t in self.tokens if t.startswith("<2") and t.endswith(">")]
        self.source_langs = [t[5:-1] for t in self.tokens if t.startswith("<LID:")]
        self.char_ids = np.array([i for i, t in enumerate(self.tokens) if len(t) == 1], dtype=np.int64)

    pad = property(lambda self: self.index["<pad>"])
    sos = property(lambda self: self.index["<sos>"])
    eos = property(lambda self: self.index["<eos>"])
    unk = property(lambda self: self.index["<unk>"])
    blank = property(lambda self: self.index["<blank>"])

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self):
        return f"Vocabulary({len(self)} tokens, targets={self.target_langs}, sources={self.source_langs})"

    def encode(self, text):
        ids = []
        for ch in text:
            i = self.index.get(ch)
            if i is None:
                raise VocabularyError(f"character {ch!r} (U+{ord(ch):04X}) is not in the vocabulary")
            ids.append(i)
        return ids

    def decode(self, ids):
        """Characters only; special and language tokens are dropped."""
        return "".join(self.tokens[i] for i in ids if len(self.tokens[i]) == 1)

    def lang_token(self, code):
        tok = f"<2{code}>"
        if tok not in self.index:
            raise VocabularyError(f"target language token {tok} is not in the vocabulary")
        return self.index[tok]

    def lid_token(self, code):
        tok = f"<LID:{code}>"
        if tok not in self.index:
            raise VocabularyError(f"language-ID token {tok} is not in the vocabulary")
        return self.index[tok]

    def is_multilingual_source(self):
        return len(self.source_langs) > 1


def build_vocab(utterances) -> Vocabulary:
    """Joint character vocabulary over all source and target texts."""
    utterances = list(utterances)
    if not utterances:
        raise ValueError("build_vocab: empty corpus")
    chars, tgts, srcs = set(), set(), set()
    for u in utterances:
        chars.update(u.transcript)
        for t in u.translations:
            chars.update(t)
        tgts.add(u.tgt_lang)
        srcs.add(u.src_lang)
    tokens = list(SPECIALS)
    tokens += [f"<2{c}>" for c in sorted(tgts)]
    tokens += [f"<LID:{c}>" for c in sorted(srcs)]
    tokens += sorted(chars)
    return Vocabulary(tokens)


def make_decoder_io(utt, task, vocab, multilingual=None, reference=0):
    """Decoder (input, target) token lists for one utterance.

    ST/NMT start from the target-language token instead of <sos>; multilingual
    ASR prepends the source-language ID to the reference.
    """
    if task in ("st", "nmt"):
        ys = vocab.encode(utt.translations[reference])
        return [vocab.lang_token(utt.tgt_lang)] + ys, ys + [vocab.eos]
    if task == "asr":
        ys = vocab.encode(utt.transcript)
        if multilingual is None:
            multilingual = vocab.is_multilingual_source()
        if multilingual:
            ys = [vocab.lid_token(utt.src_lang)] + ys
        return [vocab.sos] + ys, ys + [vocab.eos]
    raise ValueError(f"make_decoder_io: unknown task {task!r}")


# ---------------------------------------------------------------- corpus transforms

def length_filter(utterances, max_frames=3000, max_chars=400):
    """Drop utterances longer than ``max_frames`` frames or ``max_chars`` characters (any text)."""
    if max_frames <= 0 or max_chars <= 0:
        raise ValueError("length_filter: limits must be positive")
    kept = []
    n_frames = n_chars = 0
    for u in utterances:
        if u.n_frames > max_frames:
            n_frames += 1
        elif max(len(t) for t in (u.transcript,) + u.translations) > max_chars:
            n_chars += 1
        else:
            kept.append(u)
    log.info("length_filter: kept %d, removed %d over %d frames, %d over %d chars",
             len(kept), n_frames, max_frames, n_chars, max_chars)
    return kept


def resample_frames(feats, factor):
    """Linear interpolation of the time axis to ``round(T / factor)`` frames."""
    T = feats.shape[0]
    n = int(round(T / factor))
    if n < 1:
        raise ValueError(f"speed_perturb: factor {factor} leaves no frames from {T}")
    if factor == 1.0:
        return feats.copy()
    pos = np.minimum(np.arange(n) * factor, T - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None]
    return (1.0 - w) * feats[lo] + w * feats[hi]


def speed_perturb(utt, factors=(0.9, 1.0, 1.1)):
    """One copy of ``utt`` per speed factor, ids suffixed ``-sp<factor>``."""
    if any(f <= 0 for f in factors):
        raise ValueError("speed_perturb: factors must be positive")
    return [Utterance(f"{utt.id}-sp{f:g}", utt.src_lang, utt.tgt_lang, resample_frames(utt.features, f),
                      utt.transcript, utt.translations) for f in factors]


@dataclass
class BatchPlan:
    batches: list
    boundaries: list

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


def bucket_batches(utterances, batch_size, seed=0, max_ratio=None, length=None):
    """Sort by length, slice into batches, shuffle the batch order.

    Language pair is never part of the key. Equal lengths are ordered
    randomly per ``seed``. With ``max_ratio`` a batch is closed early rather
    than exceed ``max_len / min_len > max_ratio``.
    """
    if batch_size < 1:
        raise ValueError("bucket_batches: batch size must be >= 1")
    length = length or (lambda u: u.n_frames)
    rng = np.random.default_rng(seed)
    utts = list(utterances)
    keys = rng.random(len(utts))
    order = sorted(range(len(utts)), key=lambda i: (length(utts[i]), keys[i]))
    batches, bounds, cur = [], [], []
    for i in order:
        n = length(utts[i])
        if cur and (len(cur) == batch_size or (max_ratio and n > max_ratio * length(utts[cur[0]]))):
            batches.append(cur)
            cur = []
        cur.append(i)
    if cur:
        batches.append(cur)
    perm = rng.permutation(len(batches))
    batches = [batches[p] for p in perm]
    bounds = [(length(utts[b[0]]), length(utts[b[-1]])) for b in batches]
    return BatchPlan([[utts[i].id for i in b] for b in batches], bounds)


# ---------------------------------------------------------------- synthetic corpora

_POOLS = ("abcdefghijklmnopqrstuvwxyz",
          "αβγδεζηθικλμνξοπρστυφχψω",
          "абвгдежзийклмнопрстуфхцчшщъыьэюя")


def _stable(*parts):
    return zlib.crc32("|".join(str(p) for p in parts).encode("utf-8"))


def default_alphabets(codes, size):
    pool = "".join(_POOLS)
    if size * len(codes) > len(pool):
        raise ValueError(f"cannot assign {len(codes)} disjoint alphabets of size {size}")
    return {c: pool[k * size:(k + 1) * size] for k, c in enumerate(sorted(codes))}


@dataclass
class SyntheticSpec:
    """Cipher-translation corpus with prototype-vector "speech"."""

    pairs: list = field(default_factory=lambda: [["en", "fr"]])
    alphabets: dict = field(default_factory=dict)
    alphabet_size: int = 8
    feat_dim: int = 8
    frames_per_char: tuple = (2, 4)
    noise: float = 0.1
    chars_per_word: tuple = (2, 4)
    words_per_utt: tuple = (1, 3)
    reorder_window: int = 2
    n_train: int = 200
    n_dev: int = 20
    n_test: int = 20
    n_references: int = 1
    seed: int = 0

    def __post_init__(self):
        self.pairs = [list(p) for p in self.pairs]
        self.frames_per_char = tuple(self.frames_per_char)
        self.chars_per_word = tuple(self.chars_per_word)
        self.words_per_utt = tuple(self.words_per_utt)

    def languages(self):
        return sorted({c for p in self.pairs for c in p})

    def resolved_alphabets(self):
        codes = self.languages()
        auto = default_alphabets([c for c in codes if c not in self.alphabets], self.alphabet_size)
        # auto-assigned alphabets must avoid user-supplied characters
        taken = set("".join(self.alphabets.values()))
        if taken & set("".join(auto.values())):
            pool = [ch for ch in "".join(_POOLS) if ch not in taken]
            auto = {}
            for k, c in enumerate(sorted(c for c in codes if c not in self.alphabets)):
                auto[c] = "".join(pool[k * self.alphabet_size:(k + 1) * self.alphabet_size])
        alph = {**auto, **{c: a for c, a in self.alphabets.items() if c in codes}}
        seen = {}
        for code in sorted(alph):
            for ch in alph[code]:
                if ch in seen:
                    raise ValueError(f"alphabets of {seen[ch]!r} and {code!r} overlap on {ch!r}")
                seen[ch] = code
            if " " in alph[code] or len(set(alph[code])) != len(alph[code]):
                raise ValueError(f"alphabet of {code!r} must be distinct non-space characters")
        return alph


def make_cipher(spec, src, tgt, alphabets=None):
    alphabets = alphabets or spec.resolved_alphabets()
    a, b = alphabets[src], alphabets[tgt]
    if len(a) != len(b):
        raise ValueError(f"cipher {src}->{tgt}: alphabet sizes differ ({len(a)} vs {len(b)})")
    rng = np.random.default_rng([spec.seed, _stable("cipher", src, tgt)])
    perm = rng.permutation(len(b))
    return {ch: b[perm[i]] for i, ch in enumerate(a)}


def reorder_word(word, window):
    """Reverse consecutive blocks of ``window`` characters (self-inverse)."""
    if window <= 1:
        return word
    return "".join(word[i:i + window][::-1] for i in range(0, len(word), window))


def translate(text, cipher, window):
    return " ".join(reorder_word("".join(cipher[ch] for ch in w), window) for w in text.split(" "))


def inverse_translate(text, cipher, window):
    inv = {v: k for k, v in cipher.items()}
    return " ".join("".join(inv[ch] for ch in reorder_word(w, window)) for w in text.split(" "))


def prototypes(spec, lang, alphabet):
    rng = np.random.default_rng([spec.seed, _stable("proto", lang)])
    table = {ch: rng.standard_normal(spec.feat_dim) for ch in alphabet}
    table[" "] = np.random.default_rng([spec.seed, _stable("proto", "<space>")]).standard_normal(spec.feat_dim)
    return table


def _render(text, protos, spec, rng):
    lo, hi = spec.frames_per_char
    reps = rng.integers(lo, hi + 1, size=len(text))
    frames = np.concatenate([np.tile(protos[ch], (r, 1)) for ch, r in zip(text, reps)])
    if spec.noise > 0:
        frames = frames + spec.noise * rng.standard_normal(frames.shape)
    return frames


@dataclass
class Corpus:
    splits: dict
    pairs: list
    spec: SyntheticSpec = None

    def split(self, name, pairs=None):
        utts = self.splits.get(name, [])
        if pairs is None:
            return list(utts)
        keys = {f"{s}-{t}" for s, t in pairs}
        return [u for u in utts if u.pair in keys]

    def manifest(self):
        """Per (pair, split) rows: name, languages, count, hours at 10 ms frames."""
        rows = []
        for s, t in self.pairs:
            for split in SPLITS:
                utts = self.split(split, [(s, t)])
                hours = sum(u.n_frames for u in utts) * 0.01 / 3600.0
                rows.append({"name": f"{s}-{t}", "src": s, "tgt": t, "split": split,
                             "utterances": len(utts), "hours": hours,
                             "manifest": f"{s}-{t}/{split}/manifest.tsv"})
        return rows


def generate_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    """Deterministic corpus for every language pair in ``spec``."""
    alph = spec.resolved_alphabets()
    splits = {s: [] for s in SPLITS}
    counts = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    protos = {lang: prototypes(spec, lang, alph[lang]) for lang in alph}
    for src, tgt in spec.pairs:
        cipher = make_cipher(spec, src, tgt, alph)
        for k, split in enumerate(SPLITS):
            rng = np.random.default_rng([spec.seed, _stable("utts", src, tgt, split)])
            for i in range(counts[split]):
                n_words = rng.integers(spec.words_per_utt[0], spec.words_per_utt[1] + 1)
                words = []
                for _ in range(n_words):
                    n = rng.integers(spec.chars_per_word[0], spec.chars_per_word[1] + 1)
                    words.append("".join(alph[src][j] for j in rng.integers(0, len(alph[src]), size=n)))
                text = " ".join(words)
                refs = [translate(text, cipher, spec.reorder_window)]
                if spec.n_references > 1:
                    refs.append(translate(text, cipher, 1))
                feats = _render(text, protos[src], spec, rng)
                splits[split].append(Utterance(f"{src}-{tgt}_{split}_{i:05d}", src, tgt, feats, text, refs))
    return Corpus(splits, [list(p) for p in spec.pairs], spec)


# ---------------------------------------------------------------- file formats

def write_features(path, feats):
    feats = np.ascontiguousarray(feats, dtype="<f8")
    T, D = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<II", T, D))
        fh.write(feats.tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    T, D = struct.unpack("<II", blob[8:16])
    data = np.frombuffer(blob, dtype="<f8", offset=16)
    if data.size != T * D:
        raise ValueError(f"{path}: expected {T}x{D} values, found {data.size}")
    return data.reshape(T, D).astype(np.float64)


def write_manifest(path, utterances, feat_dir="feats"):
    base = Path(path).parent
    (base / feat_dir).mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utterances:
        rel = f"{feat_dir}/{u.id}.feat"
        write_features(base / rel, u.features)
        lines.append("\t".join([u.id, u.src_lang, u.tgt_lang, rel, u.transcript, *u.translations]))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path):
    base = Path(path).parent
    utts = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 6:
            raise ValueError(f"{path}:{n}: expected >= 6 tab-separated fields, found {len(cols)}")
        uid, src, tgt, rel, transcript, *refs = cols
        utts.append(Utterance(uid, src, tgt, read_features(base / rel), transcript, refs))
    return utts


def write_corpus(corpus, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = corpus.manifest()
    for s, t in corpus.pairs:
        for split in SPLITS:
            d = root / f"{s}-{t}" / split
            d.mkdir(parents=True, exist_ok=True)
            write_manifest(d / "manifest.tsv", corpus.split(split, [(s, t)]))
    header = "#name\tsrc\ttgt\tsplit\tutterances\thours\tmanifest\n"
    body = "".join(f"{r['name']}\t{r['src']}\t{r['tgt']}\t{r['split']}\t{r['utterances']}\t"
                   f"{r['hours']:.6f}\t{r['manifest']}\n" for r in rows)
    (root / "corpus.tsv").write_text(header + body, encoding="utf-8")
    return root


def read_corpus(root, pairs=None):
    root = Path(root)
    index = root / "corpus.tsv"
    if not index.exists():
        raise FileNotFoundError(f"{root}: no corpus.tsv")
    splits = {s: [] for s in SPLITS}
    found = []
    for line in index.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        name, src, tgt, split, _, _, rel = line.split("\t")
        if pairs is not None and [src, tgt] not in [list(p) for p in pairs]:
            continue
        if [src, tgt] not in found:
            found.append([src, tgt])
        splits.setdefault(split, []).extend(read_manifest(root / rel))
    return Corpus(splits, found)
