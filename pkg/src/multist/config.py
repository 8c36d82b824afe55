"""Run configuration: TOML files with typed sections, unknown keys rejected."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SyntheticSpec
from .decoding import BeamConfig
from .models import ModelConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    path: str = ""
    pairs: list = None
    max_frames: int = 3000
    max_chars: int = 400
    speed_perturb: bool = False
    perturb_factors: list = field(default_factory=lambda: [0.9, 1.0, 1.1])
    dev_split: str = "dev"


@dataclass
class DecodeSection:
    checkpoint: str = ""
    lm_checkpoint: str = ""
    split: str = "test"
    target_lang: str = ""
    greedy: bool = False
    expect_fingerprint: str = ""


@dataclass
class EvalSection:
    hypotheses: str = ""
    manifest: str = ""
    split: str = "test"
    metric: str = "bleu"
    reference: str = "translation"
    strip_punct: bool = False
    rank: int = 1


@dataclass
class TransferSection:
    st_checkpoint: str = ""
    asr_checkpoint: str = ""
    nmt_checkpoint: str = ""
    vocab_from: str = ""


# section name -> dataclass, per command
COMMAND_SECTIONS = {
    "gen-data": {"data": SyntheticSpec},
    "train": {"corpus": CorpusSection, "model": ModelConfig, "training": TrainingConfig},
    "decode": {"corpus": CorpusSection, "decode": DecodeSection, "beam": BeamConfig},
    "eval": {"corpus": CorpusSection, "eval": EvalSection},
    "transfer": {"corpus": CorpusSection, "transfer": TransferSection, "model": ModelConfig,
                 "training": TrainingConfig},
}
TOP_LEVEL = {"seed", "out"}
PATH_KEYS = {("corpus", "path"), ("decode", "checkpoint"), ("decode", "lm_checkpoint"),
             ("eval", "hypotheses"), ("eval", "manifest"), ("transfer", "st_checkpoint"),
             ("transfer", "asr_checkpoint"), ("transfer", "nmt_checkpoint"), ("transfer", "vocab_from")}


@dataclass
class RunConfig:
    command: str
    sections: dict
    seed: int = None
    out: str = ""
    present: dict = field(default_factory=dict)  # section -> keys given explicitly

    def __getitem__(self, name):
        return self.sections[name]

    def to_dict(self):
        d = {"seed": self.seed}
        for name, obj in self.sections.items():
            d[name] = asdict(obj)
        return _drop_none(d)


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_drop_none(v) for v in d]
    return d


def read_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def _build(cls, values, where):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}] {e}") from e


def resolve(command, raw, base_dir=".", seed=None, out=None):
    """Typed RunConfig from a parsed TOML mapping; relative paths resolve against ``base_dir``."""
    if command not in COMMAND_SECTIONS:
        raise ConfigError(f"command {command!r} takes no config sections")
    schema = COMMAND_SECTIONS[command]
    raw = dict(raw)
    unknown = sorted(k for k in raw if k not in schema and k not in TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown sections or keys for {command}: {', '.join(unknown)}")
    seed = raw.get("seed") if seed is None else seed
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    sections, present = {}, {}
    for name, cls in schema.items():
        values = dict(raw.get(name, {}))
        if not isinstance(raw.get(name, {}), dict):
            raise ConfigError(f"[{name}] must be a table")
        for key in list(values):
            if (name, key) in PATH_KEYS and values[key]:
                values[key] = str((Path(base_dir) / values[key]).resolve())
        present[name] = set(values)
        if seed is not None:
            if name == "data":
                values["seed"] = seed
            elif name == "training":
                values["seed"] = seed
            elif name == "model":
                values["init_seed"] = seed
        if name == "beam" and "task" not in values:
            values["task"] = "asr"  # most permissive; decode picks the checkpoint's task
        sections[name] = _build(cls, values, name)
    # --out is relative to the working directory, the config's own "out" to the config file
    if out is not None:
        out = str(Path(out).resolve())
    elif raw.get("out"):
        out = str((Path(base_dir) / raw["out"]).resolve())
    return RunConfig(command, sections, seed, out or "", present)


def load(command, path, seed=None, out=None):
    path = Path(path)
    return resolve(command, read_toml(path), path.parent, seed, out)


def write_resolved(cfg: RunConfig, path):
    with open(path, "wb") as fh:
        tomli_w.dump(cfg.to_dict(), fh)


# ---------------------------------------------------------------- experiments

@dataclass
class Leg:
    name: str
    command: str
    config: dict
    label: str = ""
    multilingual: bool = False
    metric: str = ""


@dataclass
class Comparison:
    left: str
    right: str
    metric: str
    op: str = "<="


OPS = {"<": lambda a, b: a < b, "<=": lambda a, b: a <= b, ">": lambda a, b: a > b,
       ">=": lambda a, b: a >= b}


def load_experiment(path):
    """Legs (in file order) and comparisons of an experiment manifest."""
    path = Path(path)
    raw = read_toml(path)
    unknown = sorted(set(raw) - {"legs", "comparisons", "seed", "out", "name"})
    if unknown:
        raise ConfigError(f"experiment: unknown keys: {', '.join(unknown)}")
    legs, names = [], set()
    for i, r in enumerate(raw.get("legs", [])):
        bad = sorted(set(r) - {"name", "command", "config", "config_file", "label", "multilingual", "metric"})
        if bad:
            raise ConfigError(f"legs[{i}]: unknown keys: {', '.join(bad)}")
        if "name" not in r or "command" not in r:
            raise ConfigError(f"legs[{i}]: 'name' and 'command' are required")
        if r["name"] in names:
            raise ConfigError(f"duplicate leg name {r['name']!r}")
        if r["command"] not in COMMAND_SECTIONS:
            raise ConfigError(f"leg {r['name']!r}: unknown command {r['command']!r}")
        names.add(r["name"])
        conf = dict(r.get("config", {}))
        if "config_file" in r:
            conf = {**read_toml(path.parent / r["config_file"]), **conf}
        legs.append(Leg(r["name"], r["command"], conf, r.get("label", r["name"]),
                        bool(r.get("multilingual", False)), r.get("metric", "")))
    if not legs:
        raise ConfigError("experiment has no legs")
    comps = []
    for i, c in enumerate(raw.get("comparisons", [])):
        comp = _build(Comparison, c, f"comparisons[{i}]")
        for side in (comp.left, comp.right):
            if side not in names:
                raise ConfigError(f"comparison references unknown leg {side!r}")
        if comp.op not in OPS:
            raise ConfigError(f"comparison operator {comp.op!r} not in {sorted(OPS)}")
        comps.append(comp)
    return raw, legs, comps
