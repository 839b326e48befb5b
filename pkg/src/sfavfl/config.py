"""Flat ``section.key = value`` run configuration.

Values resolve in layers: built-in defaults, then the config file, then the
``VFL_SFA_KEYBITS`` environment variable, then command-line flags. The
resolved mapping is what gets written to a run manifest, and a manifest is
itself a valid config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable, Optional

from . import he
from .attack import GrnConfig
from .data import DatasetSpec, SyntheticTaskSpec
from .training import ConfigError, ExperimentConfig

KEYBITS_ENV = "VFL_SFA_KEYBITS"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> Optional[int]:
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else int(t)


def _opt_float(text: str) -> Optional[float]:
    t = text.strip().lower()
    return None if t in ("", "none") else float(t)


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _ranges(text: str) -> Optional[list]:
    """``0:10,10:20`` -> [(0, 10), (10, 20)]; empty or ``auto`` -> None."""
    t = text.strip().lower()
    if t in ("", "none", "auto"):
        return None
    out = []
    for part in t.split(","):
        lo, hi = part.split(":")
        out.append((int(lo), int(hi)))
    return out


def _label(text: str):
    t = text.strip()
    return int(t) if t.lstrip("-").isdigit() else t


def _choice(*options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t

    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    doc: str


# every documented key, with its default written as it would appear in a file
SCHEMA = {
    "run.seed": Key(int, "0", "master seed; every random stream derives from it"),
    "run.deterministic": Key(_bool, "true", "zero wall-clock columns so reruns give identical CSVs"),
    "run.jobs": Key(int, "1", "worker processes for sweep points"),
    "run.out": Key(str, "runs/latest", "output directory"),
    "run.plots": Key(_bool, "true", "render PNG figures next to the CSVs"),
    "data.source": Key(str, "synthetic", "'synthetic' or a CSV path"),
    "data.label_column": Key(_label, "-1", "label column name or index (CSV only)"),
    "data.normalization": Key(_choice("minmax01", "none"), "minmax01", "feature scaling (CSV only)"),
    "data.train_fraction": Key(float, "0.8", "fraction of rows used for training"),
    "data.n_samples": Key(int, "10000", "synthetic rows"),
    "data.n_features": Key(int, "20", "synthetic feature count"),
    "data.n_classes": Key(int, "2", "synthetic classes"),
    "data.interaction": Key(_bool, "true", "labels depend on cross-party feature products"),
    "data.noise_std": Key(float, "0.0", "label-score noise, relative to the score spread"),
    "model.protocol": Key(_choice("sfa", "splitnn"), "sfa", "cut-layer aggregation"),
    "model.total_layers": Key(int, "6", "dense layers end to end"),
    "model.hidden_width": Key(int, "64", "width of hidden layers"),
    "model.cut_width": Key(int, "64", "width of each bottom model output"),
    "model.bottom_height": Key(_opt_int, "auto", "bottom layers; auto = 1 for sfa, 5 for splitnn"),
    "model.party_count": Key(int, "2", "parties, the active one included"),
    "model.partition": Key(_ranges, "auto", "column ranges per party, e.g. 0:10,10:20"),
    "train.epochs": Key(int, "60", "training epochs"),
    "train.batch_size": Key(int, "32", "minibatch size"),
    "train.learning_rate": Key(float, "0.05", "SGD step size"),
    "train.lr_grid": Key(_float_list, "", "if set, train once per rate and keep the best"),
    "train.verbose": Key(_bool, "false", "log every step"),
    "he.mode": Key(_choice("mock", "paillier"), "mock", "real Paillier or plaintext stand-in"),
    "he.key_bits": Key(int, str(he.DEFAULT_KEY_BITS), "Paillier modulus size"),
    "he.fraction_bits": Key(int, str(he.DEFAULT_FRACTION_BITS), "fixed-point fraction bits"),
    "he.mask_scale": Key(float, "1.0", "mask amplitude in mock mode"),
    "attack.epochs": Key(int, "60", "generator training epochs"),
    "attack.hidden_width": Key(int, "64", "generator hidden width"),
    "attack.layers": Key(int, "3", "generator dense layers"),
    "attack.learning_rate": Key(float, "0.001", "generator Adam step size"),
    "attack.batch_size": Key(int, "64", "generator minibatch size"),
    "attack.target_acc": Key(_opt_float, "0.9", "stop victim training at this test accuracy"),
    "attack.victim_epochs": Key(int, "20", "victim training epoch cap"),
    "attack.train_samples": Key(int, "400", "rows the adversary observes for fitting"),
    "attack.test_samples": Key(int, "200", "rows used to score reconstruction"),
    "attack.key_bits": Key(_opt_int, "auto", "Paillier key size for SFA attack views; auto = he.key_bits"),
    "attack.all_variants": Key(_bool, "false", "report both SFA variants instead of the stronger"),
    "sweep.heights": Key(_int_list, "1,3,5", "bottom heights to sweep"),
    "sweep.protocols": Key(_str_list, "splitnn,sfa", "protocols to sweep"),
    "sweep.seeds": Key(_int_list, "", "seeds to sweep; empty = run.seed only"),
    "audit.batches": Key(int, "3", "SFA batches to record for the audit"),
    "audit.batch_size": Key(int, "8", "rows per audited batch"),
}


class RunConfig:
    """Resolved values plus where each one came from."""

    def __init__(self):
        self.values = {k: spec.parse(spec.default) for k, spec in SCHEMA.items()}
        self.raw = {k: spec.default for k, spec in SCHEMA.items()}
        self.origin = {k: "default" for k in SCHEMA}

    def set(self, key: str, text: str, origin: str = "api") -> None:
        if key not in SCHEMA:
            raise ConfigError(key, f"unknown key ({origin})")
        try:
            self.values[key] = SCHEMA[key].parse(str(text))
        except ValueError as exc:
            raise ConfigError(key, f"bad value {text!r} ({origin}): {exc}") from None
        self.raw[key] = str(text).strip()
        self.origin[key] = origin

    def __getitem__(self, key: str):
        return self.values[key]

    def to_text(self, header: str = "") -> str:
        lines = [f"# {line}" for line in header.splitlines()]
        section = None
        for key in SCHEMA:
            sec = key.split(".", 1)[0]
            if sec != section:
                if section is not None:
                    lines.append("")
                section = sec
            lines.append(f"{key} = {self.raw[key]}")
        return "\n".join(lines) + "\n"

    # typed views --------------------------------------------------------

    def experiment(self) -> ExperimentConfig:
        v = self.values
        return ExperimentConfig(
            protocol=v["model.protocol"],
            total_layers=v["model.total_layers"],
            hidden_width=v["model.hidden_width"],
            cut_width=v["model.cut_width"],
            bottom_height=v["model.bottom_height"],
            party_count=v["model.party_count"],
            feature_partition=v["model.partition"],
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            learning_rate=v["train.learning_rate"],
            seed=v["run.seed"],
            he_mode=v["he.mode"],
            key_bits=v["he.key_bits"],
            fraction_bits=v["he.fraction_bits"],
            mask_scale=v["he.mask_scale"],
            deterministic=v["run.deterministic"],
            verbose=v["train.verbose"],
        )

    @property
    def attack_key_bits(self) -> int:
        bits = self.values["attack.key_bits"]
        return self.values["he.key_bits"] if bits is None else bits

    def grn(self) -> GrnConfig:
        v = self.values
        return GrnConfig(
            hidden_width=v["attack.hidden_width"],
            layers=v["attack.layers"],
            epochs=v["attack.epochs"],
            learning_rate=v["attack.learning_rate"],
            batch_size=v["attack.batch_size"],
            seed=v["run.seed"],
        )

    def dataset_spec(self) -> DatasetSpec:
        v = self.values
        return DatasetSpec(
            source=v["data.source"],
            label_column=v["data.label_column"],
            normalization=v["data.normalization"],
            partition=v["model.partition"],
            train_fraction=v["data.train_fraction"],
            seed=v["run.seed"],
        )

    def synthetic_spec(self) -> SyntheticTaskSpec:
        v = self.values
        return SyntheticTaskSpec(
            n_samples=v["data.n_samples"],
            n_features=v["data.n_features"],
            n_classes=v["data.n_classes"],
            cross_party_interaction=v["data.interaction"],
            noise_std=v["data.noise_std"],
            seed=v["run.seed"],
        )


def parse_text(text: str, origin: str = "file") -> list:
    """Parse config text into ``(key, value)`` pairs; '#' starts a comment."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'section.key = value' in {origin}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def resolve(
    path: Optional[str] = None,
    flags: Optional[dict] = None,
    env: Optional[dict] = None,
    allow_insecure: bool = False,
) -> RunConfig:
    """Layer defaults < file < environment < flags and validate key size."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        for key, value in parse_text(text, path):
            cfg.set(key, value, "file")
    env = os.environ if env is None else env
    if env.get(KEYBITS_ENV):
        cfg.set("he.key_bits", env[KEYBITS_ENV], "env")
        cfg.set("attack.key_bits", env[KEYBITS_ENV], "env")
    for key, value in (flags or {}).items():
        if value is not None:
            cfg.set(key, str(value), "flag")
    for key in ("he.key_bits", "attack.key_bits"):
        bits = cfg[key]
        if bits is None:
            continue
        if bits < he.DEFAULT_KEY_BITS and not allow_insecure:
            raise ConfigError(key, f"{bits}-bit keys need --insecure-test-keys")
        if bits < he.TEST_KEY_BITS:
            raise ConfigError(key, f"must be at least {he.TEST_KEY_BITS}")
    return cfg
