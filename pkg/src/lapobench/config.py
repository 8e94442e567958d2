"""Experiment configuration files.

A config is one YAML mapping::

    env: quadrant4              # builtin name, {builtin: affine8, seed: 0}, or an inline spec
    seeds: [0, 1, 2]
    out: results/quadrant4
    train:   {beta: 0.05, k_hat: 4, steps: 20000}      # any TrainConfig field
    policy:  {hidden: [16], l2: 1.0e-5, max_iter: 300}  # any PolicyConfig field
    audit:   {samples: 5000, determinism: 0.05, disentanglement: 0.99, checkpoint: null}
    data:    {n: 50000, labeled: false}
    pipeline: {N: 50000, N_a: [8, 40, 80, 800], baseline: true}
    certify: {n: 10000, k_hat: null, resolution: 256}
    counterexample: {name: deterministic-policy, n: 20000}
    gates:   {loss: null, divergence: null}

Every section is optional. Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .envlib import Environment, env_from_config
from .objective import TrainConfig
from .pipeline import COUNTEREXAMPLES, ContinuousConfig, PolicyConfig


class ConfigError(ValueError):
    """Malformed configuration; the message names the file, line and field."""


_SECTIONS = {
    "audit": {"samples": int, "determinism": float, "disentanglement": float, "checkpoint": (str, type(None))},
    "data": {"n": int, "labeled": bool, "path": (str, type(None))},
    "pipeline": {"N": int, "N_a": list, "baseline": bool, "audit_samples": int},
    "certify": {"n": int, "k_hat": (int, type(None)), "resolution": int},
    "counterexample": {"name": str, "n": int, "env": (str, type(None))},
    "gates": {"loss": (float, type(None)), "divergence": (float, type(None))},
}
_DEFAULTS = {
    "audit": {"samples": 5000, "determinism": 0.05, "disentanglement": 0.99, "checkpoint": None},
    "data": {"n": 50000, "labeled": False, "path": None},
    "pipeline": {"N": 50000, "N_a": [8, 40, 80, 800], "baseline": True, "audit_samples": 5000},
    "certify": {"n": 10000, "k_hat": None, "resolution": 256},
    "counterexample": {"name": "deterministic-policy", "n": 20000, "env": None},
    "gates": {"loss": None, "divergence": None},
}
_TOP = {"env", "seeds", "out", "train", "policy", "continuous", *_SECTIONS}


@dataclass
class ExperimentConfig:
    env: Environment
    env_spec: object
    seeds: list[int]
    out: Path
    train: TrainConfig
    policy: PolicyConfig
    continuous: ContinuousConfig
    audit: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    pipeline: dict = field(default_factory=dict)
    certify: dict = field(default_factory=dict)
    counterexample: dict = field(default_factory=dict)
    gates: dict = field(default_factory=dict)
    source: str = "<config>"


def _line_index(text: str) -> dict[tuple, int]:
    """Map key paths to 1-based source lines."""
    out: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                p = path + (key.value,)
                out[p] = key.start_mark.line + 1
                walk(value, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                out[path + (i,)] = item.start_mark.line + 1
                walk(item, path + (i,))

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out
    if root is not None:
        walk(root, ())
    return out


class _Checker:
    def __init__(self, source: str, lines: dict):
        self.source, self.lines = source, lines

    def fail(self, path: tuple, message: str):
        line = None
        for cut in range(len(path), 0, -1):
            line = self.lines.get(path[:cut])
            if line is not None:
                break
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: field '{'.'.join(map(str, path)) or '<root>'}': {message}")

    def typed(self, path, value, expected):
        kinds = expected if isinstance(expected, tuple) else (expected,)
        if float in kinds and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, bool) and bool not in kinds:
            self.fail(path, f"expected {'/'.join(k.__name__ for k in kinds)}, got {value!r}")
        if not isinstance(value, kinds):
            self.fail(path, f"expected {'/'.join(k.__name__ for k in kinds)}, got {value!r}")
        return value


def _dataclass_section(chk: _Checker, name: str, raw, cls, base: dict | None = None):
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        chk.fail((name,), "expected a mapping")
    names = {f.name for f in fields(cls)}
    for key in raw:
        if key not in names:
            chk.fail((name, key), f"unknown key; expected one of {sorted(names)}")
    try:
        return cls(**{**(base or {}), **raw})
    except (TypeError, ValueError) as exc:
        chk.fail((name,), str(exc))


def parse_config(text: str, source: str = "<config>", seeds: list[int] | None = None,
                 out: str | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: not valid YAML ({getattr(exc, 'problem', exc)})") from None
    data = {} if data is None else data
    chk = _Checker(source, _line_index(text))
    if not isinstance(data, dict):
        chk.fail((), "top level must be a mapping")
    for key in data:
        if key not in _TOP:
            chk.fail((key,), f"unknown section; expected one of {sorted(_TOP)}")
    if "env" not in data:
        chk.fail(("env",), "missing required field")
    try:
        env = env_from_config(data["env"])
    except (ValueError, KeyError, TypeError) as exc:
        chk.fail(("env",), str(exc))

    seed_list = seeds if seeds is not None else data.get("seeds", [0])
    if not isinstance(seed_list, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seed_list):
        chk.fail(("seeds",), "expected a list of integers")
    if len(set(seed_list)) != len(seed_list):
        chk.fail(("seeds",), f"seeds must be distinct, got {seed_list}")
    if not seed_list:
        chk.fail(("seeds",), "need at least one seed")

    sections = {}
    for name, schema in _SECTIONS.items():
        raw = data.get(name) or {}
        if not isinstance(raw, dict):
            chk.fail((name,), "expected a mapping")
        merged = dict(_DEFAULTS[name])
        for key, value in raw.items():
            if key not in schema:
                chk.fail((name, key), f"unknown key; expected one of {sorted(schema)}")
            merged[key] = chk.typed((name, key), value, schema[key])
        sections[name] = merged
    if not all(isinstance(v, int) and v >= 1 for v in sections["pipeline"]["N_a"]):
        chk.fail(("pipeline", "N_a"), "expected a list of positive integers")
    if sections["counterexample"]["name"] not in COUNTEREXAMPLES:
        chk.fail(("counterexample", "name"), f"expected one of {list(COUNTEREXAMPLES)}")
    for name, key in (("data", "n"), ("pipeline", "N"), ("audit", "samples"), ("certify", "n")):
        if sections[name][key] < 1:
            chk.fail((name, key), "must be positive")

    train = _dataclass_section(chk, "train", data.get("train"), TrainConfig, {"k_hat": env.k})
    if train.k_hat < env.k:
        chk.fail(("train", "k_hat"), f"k_hat={train.k_hat} is below the number of actions k={env.k}")
    policy = _dataclass_section(chk, "policy", data.get("policy"), PolicyConfig)
    continuous = _dataclass_section(chk, "continuous", data.get("continuous"), ContinuousConfig)
    out_dir = out if out is not None else data.get("out", "results")
    if not isinstance(out_dir, str):
        chk.fail(("out",), "expected a path string")
    return ExperimentConfig(env=env, env_spec=data["env"], seeds=list(seed_list), out=Path(out_dir),
                            train=train, policy=policy, continuous=continuous, source=source, **sections)


def load_config(path, seeds: list[int] | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path), seeds, out)
