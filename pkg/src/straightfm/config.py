"""Sectioned key=value run configuration with CLI overrides."""

from __future__ import annotations

import configparser
import os
from pathlib import Path


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _names(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


# section -> key -> (parser, default text)
SCHEMA = {
    "run": {"seed": (int, "")},
    "data": {"dataset": (str, ""), "scale": (float, "2.0"), "noise_std": (_opt_float, "auto")},
    "schedule": {"beta_min": (float, "0.1"), "beta_max": (float, "20.0"), "t_min": (float, "0.001")},
    "diffusion": {
        "iters": (int, "20000"),
        "batch": (int, "256"),
        "lr": (float, "0.001"),
        "hidden": (_ints, "128,128,128"),
    },
    "fm": {
        "variant": (str, "II"),
        "iters": (int, "20000"),
        "batch": (int, "256"),
        "lr": (float, "0.001"),
        "lambda": (_opt_float, "auto"),
        "mix": (_opt_float, "auto"),
        "ema_decay": (_opt_float, "0.999"),
        "hidden": (_ints, "128,128,128"),
        "encoder_hidden": (_ints, "64,64"),
        "dropout": (float, "0.0"),
        "coupling_steps": (int, "50"),
        "cache_size": (int, "200000"),
        "on_the_fly": (_bool, "false"),
        "workers": (int, "1"),
    },
    "sample": {
        "solver": (str, "euler"),
        "steps": (int, "100"),
        "n": (int, "1000"),
        "rtol": (float, "1e-5"),
        "atol": (float, "1e-5"),
        "trajectories": (_bool, "false"),
    },
    "eval": {"metrics": (_names, "straightness,w2,cost"), "steps_list": (_ints, "1,3,5,100"), "n": (int, "512")},
}


class RunConfig:
    """Resolved configuration. Values are kept as text and parsed on access."""

    def __init__(self):
        self._text = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        cfg = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
        return cfg

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]; valid: {', '.join(SCHEMA[section])}")
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        text = str(value)
        try:
            SCHEMA[section][key][0](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {text!r} ({exc})") from None
        self._text[section][key] = text

    def override(self, pairs: dict) -> None:
        """Apply ``{(section, key): value}``, skipping ``None`` values."""
        for (section, key), value in pairs.items():
            if value is not None:
                self.set(section, key, value)

    def get(self, section: str, key: str):
        return SCHEMA[section][key][0](self._text[section][key])

    def is_set(self, section: str, key: str) -> bool:
        return self._text[section][key].strip() != ""

    def seed(self) -> int:
        if self.is_set("run", "seed"):
            return self.get("run", "seed")
        return int(os.environ.get("SFM_SEED", "0"))

    def write(self, path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, keys in self._text.items():
            parser[section] = dict(keys)
        parser["run"]["seed"] = str(self.seed())
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            parser.write(fh)


def sidecar(out, suffix: str) -> Path:
    """``runs/fm.sfmw`` -> ``runs/fm<suffix>``."""
    out = Path(out)
    return out.with_name(out.stem + suffix)
