"""Command-line entry point: gen-data, train, decode, eval, transfer, experiment."""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from . import config as C
from .data import (VocabularyError, build_vocab, generate_synthetic_corpus, length_filter, read_corpus,
                   read_manifest, speed_perturb, write_corpus)
from .decoding import (BeamConfig, DecodeResult, Hypothesis, beam_search, greedy_decode, read_nbest, rescore,
                       write_nbest)
from .metrics import evaluate, write_report
from .models import build_model, init_transfer, load_checkpoint, model_from_checkpoint, save_checkpoint
from .training import train

log = logging.getLogger("multist")

EXIT_OK = 0
EXIT_FAILURE = 1  # experiment comparison did not hold
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def prepare_out(out, force):
    if not out:
        raise C.ConfigError("no output directory: pass --out or set 'out' in the config")
    p = Path(out)
    if p.exists() and any(p.iterdir()):
        if not force:
            raise C.ConfigError(f"output directory {p} is not empty (use --force to overwrite)")
        shutil.rmtree(p)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _log_to(out):
    h = logging.FileHandler(Path(out) / "run.log", mode="w", encoding="utf-8")
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    lg = logging.getLogger("multist")
    lg.addHandler(h)
    if lg.level == logging.NOTSET:
        lg.setLevel(logging.INFO)  # run.log always gets INFO, even if the root logger is quieter
    return h


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_corpus(sec: C.CorpusSection):
    if not sec.path:
        raise C.ConfigError("[corpus] path is required")
    try:
        return read_corpus(sec.path, sec.pairs)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e


def _split(corpus, name, sec, augment=False):
    utts = corpus.split(name)
    if not utts:
        raise DataError(f"corpus {sec.path}: split {name!r} is empty for pairs {corpus.pairs}")
    utts = length_filter(utts, sec.max_frames, sec.max_chars)
    if augment and sec.speed_perturb:
        utts = [v for u in utts for v in speed_perturb(u, tuple(sec.perturb_factors))]
    return utts


def _load_ckpt(path, what):
    if not path:
        raise C.ConfigError(f"{what} checkpoint path is required")
    try:
        return load_checkpoint(path)
    except FileNotFoundError as e:
        raise DataError(f"{what} checkpoint not found: {path}") from e


def _trace_tsv(path, trace):
    cols = ["epoch", "train_loss", "dev_loss", "mixed_batches", "sampling_prob"]
    lines = ["\t".join(cols)]
    for rec in trace:
        lines.append("\t".join("" if rec.get(c) is None else repr(rec[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_and_save(model, cfg, train_utts, dev_utts, out, extra=None, step_offset=0):
    res = train(model, train_utts, dev_utts, cfg["training"])
    ckpt = res.checkpoint
    ckpt.step += step_offset
    save_checkpoint(ckpt, out / "checkpoint.bin")
    _trace_tsv(out / "trace.tsv", res.trace)
    result = {
        "best_epoch": res.best_epoch,
        "best_dev_loss": res.trace[res.best_epoch]["dev_loss"],
        "final_dev_loss": res.trace[-1]["dev_loss"],
        "initial_dev_loss": res.trace[0]["dev_loss"],
        "epochs_to_criterion": res.epochs_to_criterion,
        "mixed_batches": sum(r["mixed_batches"] for r in res.trace),
        "fingerprint": ckpt.fingerprint,
        "n_train": len(train_utts),
        **(extra or {}),
    }
    _write_json(out / "result.json", result)
    return result


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: C.RunConfig, out):
    spec = cfg["data"]
    try:
        spec.resolved_alphabets()
    except ValueError as e:
        raise C.ConfigError(f"[data] {e}") from e
    corpus = generate_synthetic_corpus(spec)
    write_corpus(corpus, out)
    rows = corpus.manifest()
    log.info("wrote %d pair(s), %d utterances", len(corpus.pairs), sum(r["utterances"] for r in rows))
    return {"pairs": corpus.pairs, "utterances": {f"{r['name']}/{r['split']}": r["utterances"] for r in rows}}


def cmd_train(cfg: C.RunConfig, out):
    sec = cfg["corpus"]
    corpus = load_corpus(sec)
    tr = _split(corpus, "train", sec, augment=True)
    dv = _split(corpus, sec.dev_split, sec)
    vocab = build_vocab([u for s in corpus.splits.values() for u in s])
    model = build_model(cfg["model"], vocab)
    log.info("training %s model on %d utterances (%d pairs), vocabulary %d", cfg["model"].kind, len(tr),
             len(corpus.pairs), len(vocab))
    return _train_and_save(model, cfg, tr, dv, out)


def _beam_for(cfg, kind):
    raw = cfg.sections["beam"]
    given = {k: getattr(raw, k) for k in cfg.present.get("beam", ()) if k != "task"}
    task = kind if "task" not in cfg.present.get("beam", ()) else raw.task
    try:
        return BeamConfig.for_task(task, **given)
    except ValueError as e:
        raise C.ConfigError(f"[beam] {e}") from e


def cmd_decode(cfg: C.RunConfig, out):
    dsec = cfg["decode"]
    ckpt = _load_ckpt(dsec.checkpoint, "model")
    if dsec.expect_fingerprint and dsec.expect_fingerprint != ckpt.fingerprint:
        raise DataError(f"checkpoint fingerprint {ckpt.fingerprint} does not match expected "
                        f"{dsec.expect_fingerprint}")
    model = model_from_checkpoint(ckpt)
    kind = ckpt.config.kind
    if kind == "lm":
        raise C.ConfigError("cannot decode with a language model checkpoint")
    if dsec.target_lang and kind != "asr":
        try:
            model.vocab.lang_token(dsec.target_lang)
        except VocabularyError as e:
            raise C.ConfigError(f"[decode] target_lang: {e}") from e
    beam = _beam_for(cfg, kind)
    cfg.sections["beam"] = beam
    lm = None
    if dsec.lm_checkpoint:
        lck = _load_ckpt(dsec.lm_checkpoint, "LM")
        if lck.vocab != ckpt.vocab:
            raise DataError("LM vocabulary differs from the model vocabulary")
        lm = model_from_checkpoint(lck)
    corpus = load_corpus(cfg["corpus"])
    utts = corpus.split(dsec.split)
    if not utts:
        raise DataError(f"split {dsec.split!r} is empty")
    records, incomplete = [], 0
    for u in utts:
        source = u.transcript if kind == "nmt" else u.features
        tgt = None if kind == "asr" else (dsec.target_lang or u.tgt_lang)
        if dsec.greedy:
            toks = tuple(greedy_decode(model, source, kind, tgt, beam.max_len, beam.maxlen_ratio))
            parts = rescore(model, source, toks, beam, lm, tgt)
            done = bool(toks) and toks[-1] == model.vocab.eos
            res = DecodeResult([Hypothesis(toks, parts["att"], parts["ctc"], parts["lm"], parts["length"],
                                           parts["score"], done)], incomplete=not done)
        else:
            res = beam_search(model, source, beam, lm, tgt)
        incomplete += res.incomplete
        records.append((u.id, res))
    write_nbest(out / "nbest.tsv", records, model.vocab)
    log.info("decoded %d utterances (%d incomplete) into %s", len(records), incomplete, out / "nbest.tsv")
    result = {"utterances": len(records), "incomplete": incomplete, "fingerprint": ckpt.fingerprint}
    _write_json(out / "result.json", result)
    return result


def cmd_eval(cfg: C.RunConfig, out):
    esec = cfg["eval"]
    if not esec.hypotheses:
        raise C.ConfigError("[eval] hypotheses is required")
    try:
        hyps = read_nbest(esec.hypotheses, esec.rank)
    except FileNotFoundError as e:
        raise DataError(f"hypothesis file not found: {esec.hypotheses}") from e
    if esec.manifest:
        refs = read_manifest(esec.manifest)
        corpus_id = esec.manifest
    else:
        refs = load_corpus(cfg["corpus"]).split(esec.split)
        corpus_id = f"{cfg['corpus'].path}:{esec.split}"
    ref_ids = [u.id for u in refs]
    missing = sorted(set(ref_ids) - set(hyps))
    extra = sorted(set(hyps) - set(ref_ids))
    if missing or extra:
        raise DataError(f"hypothesis/reference ids differ: missing {missing[:20]}"
                        f"{' ...' if len(missing) > 20 else ''}, unexpected {extra[:20]}")
    if esec.reference not in ("translation", "transcript"):
        raise C.ConfigError(f"[eval] reference must be 'translation' or 'transcript', got {esec.reference!r}")
    use_transcript = esec.reference == "transcript"
    ref_sets = [[u.transcript] if use_transcript else u.translations for u in refs]
    report = evaluate(ref_ids, [hyps[i] for i in ref_ids], ref_sets, esec.metric, esec.strip_punct, corpus_id)
    write_report(report, out / "report.jsonl")
    print(report.summary())
    result = {"metric": esec.metric, "score": report.score, esec.metric: report.score, "n": len(ref_ids)}
    _write_json(out / "result.json", result)
    return result


def cmd_transfer(cfg: C.RunConfig, out):
    tsec = cfg["transfer"]
    donors = {k: _load_ckpt(getattr(tsec, f"{k}_checkpoint"), k) for k in ("st", "asr", "nmt")
              if getattr(tsec, f"{k}_checkpoint")}
    vocab_src = donors.get("st") or (_load_ckpt(tsec.vocab_from, "vocabulary") if tsec.vocab_from else None) \
        or donors.get("nmt") or donors.get("asr")
    if vocab_src is None:
        raise C.ConfigError("[transfer] needs at least one donor checkpoint or vocab_from")
    given = {k: getattr(cfg["model"], k) for k in cfg.present.get("model", ())}
    base = donors["st"].config if "st" in donors else vocab_src.config
    mcfg = replace(base, kind="st", **{k: v for k, v in given.items() if k != "kind"})
    if cfg.seed is not None:
        mcfg = replace(mcfg, init_seed=cfg.seed)
    model = build_model(mcfg, vocab_src.vocab)
    copied = init_transfer(model, asr=donors.get("asr"), nmt=donors.get("nmt"), st=donors.get("st"))
    log.info("transferred %d parameter tensors from %s", len(copied), ", ".join(donors) or "nothing")
    sec = cfg["corpus"]
    corpus = load_corpus(sec)
    tr = _split(corpus, "train", sec, augment=True)
    dv = _split(corpus, sec.dev_split, sec)
    offset = donors["st"].step if "st" in donors else 0
    return _train_and_save(model, cfg, tr, dv, out, {"transferred": len(copied), "donors": sorted(donors)}, offset)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "decode": cmd_decode, "eval": cmd_eval,
            "transfer": cmd_transfer}


def run_command(command, cfg: C.RunConfig, force=False):
    out = prepare_out(cfg.out, force)
    handler = _log_to(out)
    try:
        result = COMMANDS[command](cfg, out)
        C.write_resolved(cfg, out / "config.resolved.toml")
    finally:
        logging.getLogger("multist").removeHandler(handler)
        handler.close()
    return result


# ---------------------------------------------------------------- experiments

def _substitute(value, leg_dirs):
    if isinstance(value, str):
        for name, d in leg_dirs.items():
            value = value.replace("${legs." + name + "}", str(d))
        return value
    if isinstance(value, dict):
        return {k: _substitute(v, leg_dirs) for k, v in value.items()}
    if isinstance(value, list):
        return [_substitute(v, leg_dirs) for v in value]
    return value


def cmd_experiment(config_path, out, seed=None, force=False):
    raw, legs, comps = C.load_experiment(config_path)
    base = Path(config_path).parent
    out = Path(out) if out else (base / raw["out"] if raw.get("out") else None)
    if out is None:
        raise C.ConfigError("no output directory: pass --out or set 'out' in the experiment")
    root = prepare_out(str(Path(out).resolve()), force)
    seed = raw.get("seed") if seed is None else seed
    leg_dirs = {leg.name: root / leg.name for leg in legs}
    values = {}
    for leg in legs:
        conf = _substitute(leg.config, leg_dirs)
        cfg = C.resolve(leg.command, conf, base, seed, str(leg_dirs[leg.name]))
        log.info("leg %s: %s", leg.name, leg.command)
        values[leg.name] = run_command(leg.command, cfg, force)
    rows = []
    for leg in legs:
        v = values[leg.name].get(leg.metric) if leg.metric else None
        rows.append((leg.label, "yes" if leg.multilingual else "no", leg.metric or "-",
                     "-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)))
    ok = True
    checks = []
    for c in comps:
        a, b = values[c.left].get(c.metric), values[c.right].get(c.metric)
        holds = a is not None and b is not None and C.OPS[c.op](a, b)
        ok &= holds
        checks.append(f"{c.left}.{c.metric}={a} {c.op} {c.right}.{c.metric}={b}: {'PASS' if holds else 'FAIL'}")
    table = ["system\tmultilingual\tmetric\tvalue"] + ["\t".join(r) for r in rows]
    (root / "comparison.tsv").write_text("\n".join(table + [""] + checks) + "\n", encoding="utf-8")
    w = max(len(r[0]) for r in rows)
    print(f"{'system':<{w}}  multi  metric                value")
    for r in rows:
        print(f"{r[0]:<{w}}  {r[1]:<5}  {r[2]:<20}  {r[3]}")
    for line in checks:
        print(line)
    return ok


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="multist", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["experiment"]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML config file")
        sp.add_argument("--out", help="output directory (overrides the config's 'out')")
        sp.add_argument("--seed", type=int, help="run seed (overrides data, training and init seeds)")
        sp.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("MULTIST_LOG", "INFO"), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "experiment":
            return EXIT_OK if cmd_experiment(args.config, args.out, args.seed, args.force) else EXIT_FAILURE
        cfg = C.load(args.command, args.config, args.seed, args.out)
        run_command(args.command, cfg, args.force)
        return EXIT_OK
    except C.ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except FloatingPointError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except (DataError, VocabularyError, ValueError, OSError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
