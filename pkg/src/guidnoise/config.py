"""Line-oriented run configuration.

A config file holds ``key = value`` lines grouped under ``[section]`` headers
(``section.key = value`` also works anywhere). ``#`` starts a comment.
Unknown sections or keys are errors that name the offending file and line.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

from .denoise import DenoiserConfig
from .errors import InvalidConfigError
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


class ConfigParseError(InvalidConfigError):
    def __init__(self, message: str, source: str = "<override>", line: int | None = None):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.source, self.line = source, line


def _defaults(cls, skip=()) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls) if f.name not in skip}


SCHEMA: dict[str, dict] = {
    "model": _defaults(ModelConfig),
    "schedule": {"T": 50, "kind": "cosine", "eta": 0.0},
    "loss": _defaults(LossWeights),
    "train": _defaults(TrainConfig, skip=("T", "schedule", "eta", "loss", "model")),
    "data": {
        "train_root": "",
        "val_root": "",
        "test_root": "",
        "kind": "awgn",
        "sigmas": [10.0, 25.0, 50.0],
        "patches_per_spec": 64,
        "val_per_spec": 8,
        "test_per_spec": 16,
        "patch_size": 32,
        "clean_sources": "",
        "toy_seed": 0,
    },
    "synth": {"steps": 0, "sigma_mode": "deterministic", "overlap": 8, "strategy": "all_pairs",
              "save_raw": True, "batch": 16},
    "metrics": {"bins": 256, "akld_samples": 4, "akld_window": 7, "variance_floor": 1e-6},
    "denoise": {**_defaults(DenoiserConfig), "n_real": 4},
}


def _parse_value(raw: str, default, source: str, line):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]
        return raw
    except ValueError:
        raise ConfigParseError(f"cannot parse {raw!r} as {type(default).__name__}", source, line)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(f"{v:g}" for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(SCHEMA))

    def set(self, dotted: str, raw: str, source: str = "<override>", line: int | None = None) -> None:
        section, _, key = dotted.strip().partition(".")
        if not key:
            raise ConfigParseError(f"expected section.key, got {dotted!r}", source, line)
        self._assign(section, key, raw, source, line)

    def _assign(self, section: str, key: str, raw: str, source: str, line) -> None:
        if section not in SCHEMA:
            raise ConfigParseError(f"unknown section [{section}]", source, line)
        if key not in SCHEMA[section]:
            raise ConfigParseError(f"unknown key {section}.{key}", source, line)
        self.values[section][key] = _parse_value(raw, SCHEMA[section][key], source, line)

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "RunConfig":
        cfg = cls()
        section = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if stripped.startswith("[") and stripped.endswith("]"):
                section = stripped[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigParseError(f"unknown section [{section}]", source, lineno)
                continue
            key, sep, raw = stripped.partition("=")
            if not sep:
                raise ConfigParseError(f"expected 'key = value', got {stripped!r}", source, lineno)
            key = key.strip()
            if "." in key:
                cfg.set(key, raw, source, lineno)
            elif section is None:
                raise ConfigParseError(f"key {key!r} outside any section", source, lineno)
            else:
                cfg._assign(section, key, raw, source, lineno)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigParseError(f"cannot read config: {exc.strerror}", str(path))
        return cls.from_text(text, str(path))

    def dumps(self) -> str:
        lines = []
        for section, entries in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_format_value(v)}" for k, v in entries.items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    # -- typed views --------------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.values["model"])

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.values["loss"])

    def train_config(self) -> TrainConfig:
        s = self.values["schedule"]
        return TrainConfig(**self.values["train"], T=s["T"], schedule=s["kind"], eta=s["eta"],
                           loss=self.loss_weights(), model=self.model_config())

    def denoiser_config(self) -> DenoiserConfig:
        d = {k: v for k, v in self.values["denoise"].items() if k != "n_real"}
        return DenoiserConfig(**d)
