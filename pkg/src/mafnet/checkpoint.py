"""Plain-text ``key=value`` configs and checkpoint directories.

A checkpoint is a directory holding ``config.txt`` (the model config as
``key=value`` lines) and one MAFT file per parameter tensor under
``params/``, named by its dotted parameter path.
"""

from __future__ import annotations

import dataclasses
import os
import shutil
import tempfile
from pathlib import Path

from .data import FormatError, load_tensor, save_tensor
from .model import ConfigError, MafConfig, MafParams, init_params
from .tensor import Tensor
from .train import TrainConfig

CONFIG_FILE = "config.txt"
PARAMS_DIR = "params"

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(MafConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
EXTRA_KEYS = {"seeds"}


def parse_key_values(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_value(name: str, default, value: str):
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false"):
                raise ValueError
            return value.lower() == "true"
        if isinstance(default, tuple):
            h, w = value.lower().split("x")
            return int(h), int(w)
        return type(default)(value)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def configs_from_mapping(values: dict[str, str]) -> tuple[MafConfig, TrainConfig, dict[str, str]]:
    """Split a parsed mapping into model config, trainer config, and extras.

    Unknown keys and invariant violations raise :class:`ConfigError`.
    """
    unknown = sorted(set(values) - set(_MODEL_FIELDS) - set(_TRAIN_FIELDS) - EXTRA_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    model_defaults, train_defaults = MafConfig(), TrainConfig()
    model = {k: _parse_value(k, getattr(model_defaults, k), v) for k, v in values.items() if k in _MODEL_FIELDS}
    trainer = {k: _parse_value(k, getattr(train_defaults, k), v) for k, v in values.items() if k in _TRAIN_FIELDS}
    config = MafConfig(**model).validate()
    tc = TrainConfig(**trainer)
    bad = tc.violations()
    if bad:
        raise ConfigError("invalid trainer config: " + "; ".join(bad))
    return config, tc, {k: v for k, v in values.items() if k in EXTRA_KEYS}


def load_config_file(path: str | os.PathLike) -> tuple[MafConfig, TrainConfig, dict[str, str]]:
    return configs_from_mapping(parse_key_values(Path(path).read_text()))


def config_to_text(config: MafConfig) -> str:
    return "".join(f"{f}={_format_value(getattr(config, f))}\n" for f in _MODEL_FIELDS)


def save_checkpoint(directory: str | os.PathLike, config: MafConfig, params: MafParams) -> Path:
    """Write a checkpoint directory atomically (temp dir, then rename)."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        (tmp / CONFIG_FILE).write_text(config_to_text(config))
        (tmp / PARAMS_DIR).mkdir()
        for name, t in params.named_tensors().items():
            save_tensor(tmp / PARAMS_DIR / f"{name}.maft", t)
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_checkpoint(directory: str | os.PathLike) -> tuple[MafConfig, MafParams]:
    directory = Path(directory)
    cfg_path = directory / CONFIG_FILE
    if not cfg_path.is_file():
        raise FileNotFoundError(f"no {CONFIG_FILE} in checkpoint {directory}")
    values = parse_key_values(cfg_path.read_text())
    unknown = sorted(set(values) - set(_MODEL_FIELDS))
    if unknown:
        raise ConfigError(f"unknown checkpoint config keys: {', '.join(unknown)}")
    defaults = MafConfig()
    config = MafConfig(**{k: _parse_value(k, getattr(defaults, k), v) for k, v in values.items()}).validate()

    template = init_params(config, 0)

    def fill(name: str, t: Tensor) -> Tensor:
        path = directory / PARAMS_DIR / f"{name}.maft"
        if not path.is_file():
            raise FormatError(f"checkpoint is missing tensor {name}")
        loaded = load_tensor(path)
        if loaded.shape != t.shape:
            raise FormatError(f"tensor {name} has shape {loaded.shape}, config implies {t.shape}")
        return Tensor(loaded.data, requires_grad=True)

    return config, template.map_tensors(fill)
