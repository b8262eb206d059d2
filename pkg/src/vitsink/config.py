"""Flat ``dotted.key = value`` configuration files.

Lines are UTF-8; ``#`` starts a comment; values are parsed as bool, int,
float or left as strings. ``null`` or an empty value means unset; ``none``
stays a string because it is a legal selection/placement value.
Command-line flags override file values.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import FormatError

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out": "runs",
    "checkpoint": None,
    "fixture.mode": "injected",
    "fixture.k": 3,
    "fixture.gain": 40.0,
    "data.global": 200,
    "data.local": 200,
    "data.mixed": 200,
    "data.grid": 8,
    "data.test": 100,
    "train.lr": 0.5,
    "train.steps": 500,
    "train.batch_size": 32,
    "train.optimizer": "sgd",
    "train.max_grad_norm": 1.0,
    "train.report_every": 50,
    "reweighter.lr": 0.01,
    "reweighter.steps": 300,
    "reweighter.examples": 120,
    "reorder.placement": "front",
    "reorder.position_ids": "transport",
    "selection.mode": "none",
    "analysis.layer": None,
    "analysis.head": None,
    "analysis.tau": None,
    "analysis.phi": "norm",
    "analysis.target": None,
    "analysis.examples": 20,
    "analysis.tau_propagated": 0.8,
    "analysis.tau_emerged": 4.0,
    "evolution.checkpoints": None,
}


def _parse_value(raw: str):
    s = raw.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    return s


def parse_config(text: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, value = body.split("=", 1)
        key = key.strip()
        if not key or any(c.isspace() for c in key):
            raise FormatError(f"line {lineno}: bad key {key!r}")
        out[key] = _parse_value(value)
    return out


def load_config(path: str | Path | None, overrides: dict | None = None) -> dict[str, object]:
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_config(Path(path).read_text(encoding="utf-8")))
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return cfg


def dumps_config(cfg: dict) -> str:
    return "".join(f"{k} = {'null' if cfg[k] is None else cfg[k]}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.blake2b(dumps_config(cfg).encode("utf-8"), digest_size=8).hexdigest()
