"""Experiment configuration: a sectioned key-value text file with typed fields.

The on-disk format is INI with one section per module.  Serialization is
canonical (sorted keys, ``repr`` floats), so a config round-trips unchanged
and its hash is stable.  Command-line flags override file values; the
``NLMC_OUTPUT_ROOT`` environment variable overrides the output root only.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, fields

__all__ = ["ExperimentConfig", "load_config", "save_config", "config_text", "config_hash"]


@dataclass
class ExperimentConfig:
    # mesh
    nx_coarse: int = 8
    ny_coarse: int = 8
    ratio: int = 10
    layers: int = 2
    # media
    field_file: str = ""
    field_seed: int = 20250810
    contrast: float = 1e3
    correlation_len: float = 0.125
    field_scale: float = 0.05
    fracture_file: str = ""
    k_frac: float = 1e6
    law_family: str = "damped"
    law_alpha: float = 0.5
    # fine_solver
    atol: float = 1e-12
    rtol: float = 1e-12
    max_iter: int = 40
    # spacetime
    intervals: int = 10
    substeps: int = 1
    back_intervals: int = 1
    # surrogate
    family: str = "knn"
    stride: int = 1
    split_seed: int = 7
    # harness
    seed: int = 0
    output_dir: str = "out"
    source_q: float = 1e3
    source_radius: float = 0.1
    inject_at: str = "0.1875 0.1875"
    produce_at: str = "0.8125 0.8125"
    t_max: float = 0.05
    steps: int = 10
    rel_perm_a: float = 0.1
    t_max2: float = 0.025
    steps2: int = 100
    k_frac2: float = 1e3

    def point(self, name):
        x, y = (float(v) for v in getattr(self, name).split())
        return x, y


_SECTIONS = {
    "mesh": ["nx_coarse", "ny_coarse", "ratio", "layers"],
    "media": ["field_file", "field_seed", "contrast", "correlation_len",
              "field_scale", "fracture_file", "k_frac", "law_family", "law_alpha"],
    "fine_solver": ["atol", "rtol", "max_iter"],
    "spacetime": ["intervals", "substeps", "back_intervals"],
    "surrogate": ["family", "stride", "split_seed"],
    "harness": ["seed", "output_dir", "source_q", "source_radius", "inject_at",
                "produce_at", "t_max", "steps", "rel_perm_a", "t_max2", "steps2",
                "k_frac2"],
}

_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name, raw):
    kind = _TYPES[name]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def config_text(cfg):
    """Canonical text form of a configuration."""
    buf = io.StringIO()
    for section in _SECTIONS:
        buf.write(f"[{section}]\n")
        for key in _SECTIONS[section]:
            buf.write(f"{key} = {_format(getattr(cfg, key))}\n")
        buf.write("\n")
    return buf.getvalue()


def save_config(cfg, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(config_text(cfg))


def load_config(path):
    """Load a config file; unknown keys are rejected, referenced files must exist."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            setattr(cfg, key, _parse(key, raw))
    validate(cfg, base_dir=os.path.dirname(os.path.abspath(path)))
    return cfg


def validate(cfg, base_dir="."):
    if cfg.atol <= 0 or cfg.rtol < 0:
        raise ValueError("tolerances must be positive")
    if cfg.ratio < 2:
        raise ValueError("refinement ratio must be at least 2")
    for name in ("field_file", "fracture_file"):
        rel = getattr(cfg, name)
        if rel and not os.path.exists(os.path.join(base_dir, rel)):
            raise FileNotFoundError(f"{name} refers to a missing file: {rel}")
    return cfg


def config_hash(cfg):
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()
