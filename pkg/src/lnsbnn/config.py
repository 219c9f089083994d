"""Experiment configuration files.

Grammar, one statement per line (UTF-8)::

    # comment
    [train]            ; optional section header, prefixes the keys below it
    lr = 0.01
    lns.alpha = 1.0    ; dotted keys work anywhere

Values are numbers, ``true``/``false``, comma-separated lists or bare
strings. Every key is checked against a schema; unknown keys, malformed
values and constraint violations raise :class:`ConfigError` naming the key
and the line it came from. Relative data paths resolve against the directory
holding the config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .data import AugmentSpec
from .model import MODEL_SPECS, SCALE_MODES
from .noisy_loss import NoiseRates
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str | None, line: int | None, msg: str):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)
        self.key = key
        self.line = line


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _optional_float(text: str) -> float | None:
    return None if text.lower() in ("", "none") else float(text)


def _optional_int(text: str) -> int | None:
    return None if text.lower() in ("", "none") else int(text)


def _optional_str(text: str) -> str | None:
    return None if text.lower() in ("", "none") else text


def _positive(v) -> str | None:
    return None if v > 0 else "must be > 0"


def _non_negative(v) -> str | None:
    return None if v >= 0 else "must be >= 0"


def _unit(v) -> str | None:
    return None if 0 <= v <= 1 else "must be in [0, 1]"


def _choice(*options) -> Callable[[Any], str | None]:
    return lambda v: None if v in options else f"must be one of {', '.join(options)}"


def _increasing(v) -> str | None:
    return None if all(b > a for a, b in zip(v, v[1:])) else "must be strictly increasing"


def _rate(v) -> str | None:
    return None if 0 <= v < 1 else "must be in [0, 1)"


# key -> (parser, default, check)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any, Callable[[Any], str | None] | None]] = {
    "model.name": (str, "desk4", _choice(*MODEL_SPECS)),
    "model.width": (int, 16, _positive),
    "model.scale_mode": (str, "none", _choice(*SCALE_MODES)),
    "train.lr": (float, 0.1, _positive),
    "train.momentum": (float, 0.9, lambda v: None if 0 <= v < 1 else "must be in [0, 1)"),
    "train.weight_decay": (float, 0.0, _non_negative),
    "train.batch_size": (int, 128, _positive),
    "train.epochs": (int, 400, _non_negative),
    "train.milestones": (_ints, (), _increasing),
    "train.lr_decay": (float, 0.1, _positive),
    "train.seed": (int, 0, None),
    "train.warm_start_epochs": (int, 5, _non_negative),
    "train.warm_start_lr": (_optional_float, None, lambda v: None if v is None or v > 0 else "must be > 0"),
    "finetune.mode": (str, "lns", _choice("lns", "simple")),
    "lns.alpha": (float, 1.0, _non_negative),
    "lns.rho_pos": (float, 0.005, _rate),
    "lns.rho_neg": (float, 0.005, _rate),
    "lns.reduction": (str, "mean", _choice("mean", "sum")),
    "lns.frozen_labels": (_bool, False, None),
    "lns.flip_vs_pretrain": (_bool, False, None),
    "augment.pad": (int, 0, _non_negative),
    "augment.crop": (_optional_int, None, lambda v: None if v is None or v > 0 else "must be > 0"),
    "augment.hflip_prob": (float, 0.0, _unit),
    "data.train_images": (_optional_str, None, None),
    "data.train_labels": (_optional_str, None, None),
    "data.test_images": (_optional_str, None, None),
    "data.test_labels": (_optional_str, None, None),
    "data.mean": (_floats, (0.0,), None),
    "data.std": (_floats, (1.0,), lambda v: None if v and all(s > 0 for s in v) else "entries must be > 0"),
    "data.train_limit": (_optional_int, None, lambda v: None if v is None or v > 0 else "must be > 0"),
    "data.test_limit": (_optional_int, None, lambda v: None if v is None or v > 0 else "must be > 0"),
    "output.dir": (str, "runs/default", None),
}

DATA_KEYS = ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated settings for one CLI invocation."""

    values: dict[str, Any]
    lines: dict[str, int] = field(default_factory=dict)
    source: Path | None = None

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def rates(self) -> NoiseRates:
        return NoiseRates(self["lns.rho_pos"], self["lns.rho_neg"])

    @property
    def augment(self) -> AugmentSpec | None:
        spec = AugmentSpec(self["augment.pad"], self["augment.crop"], self["augment.hflip_prob"])
        return None if spec.is_identity else spec

    @property
    def out_dir(self) -> Path:
        return Path(self["output.dir"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr=v["train.lr"], momentum=v["train.momentum"], weight_decay=v["train.weight_decay"],
            batch_size=v["train.batch_size"], epochs=v["train.epochs"], milestones=v["train.milestones"],
            lr_decay=v["train.lr_decay"], seed=v["train.seed"], alpha=v["lns.alpha"], rates=self.rates,
            reduction=v["lns.reduction"], warm_start_epochs=v["train.warm_start_epochs"],
            warm_start_lr=v["train.warm_start_lr"], frozen_labels=v["lns.frozen_labels"],
            augment=self.augment, flip_vs_pretrain=v["lns.flip_vs_pretrain"],
        )

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with ``dotted_key=value`` overrides (pass keys with ``__`` for dots)."""
        values = dict(self.values)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(key, None, "unknown key")
            values[key] = v
        return replace(self, values=values)

    def echo(self) -> str:
        """Resolved config, one ``key = value`` per line, sorted by key."""
        out = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{key} = {'none' if v is None else v}")
        return "\n".join(out) + "\n"


def parse_config_text(text: str, base_dir: Path | None = None, check_paths: bool = True) -> ExperimentConfig:
    values = {k: default for k, (_, default, _) in SCHEMA.items()}
    lines: dict[str, int] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(None, lineno, "empty section header")
            continue
        if "=" not in line:
            raise ConfigError(None, lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        full = f"{section}.{key}" if section and "." not in key else key
        if full not in SCHEMA:
            raise ConfigError(full, lineno, "unknown key")
        if full in lines:
            raise ConfigError(full, lineno, f"duplicate key (first set on line {lines[full]})")
        parser, _, check = SCHEMA[full]
        try:
            parsed = parser(value)
        except ValueError as e:
            raise ConfigError(full, lineno, f"cannot parse {value!r}: {e}") from None
        if check is not None and (problem := check(parsed)) is not None:
            raise ConfigError(full, lineno, f"{problem}, got {value}")
        values[full] = parsed
        lines[full] = lineno

    rho_sum = values["lns.rho_pos"] + values["lns.rho_neg"]
    if rho_sum >= 1:
        key = "lns.rho_neg" if lines.get("lns.rho_neg", 0) >= lines.get("lns.rho_pos", 0) else "lns.rho_pos"
        raise ConfigError(key, lines.get(key), f"lns.rho_pos + lns.rho_neg must be < 1, got {rho_sum:g}")
    for key in DATA_KEYS:
        if values[key] is None:
            continue
        p = Path(values[key]).expanduser()
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if check_paths and not p.is_file():
            raise ConfigError(key, lines.get(key), f"file not found: {p}")
        values[key] = str(p)
    return ExperimentConfig(values, lines)


def parse_config(path, check_paths: bool = True) -> ExperimentConfig:
    """Read and validate a config file; an empty file yields all defaults."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(None, None, f"cannot read config {path}: {e}") from None
    except UnicodeDecodeError as e:
        raise ConfigError(None, None, f"config {path} is not UTF-8: {e}") from None
    cfg = parse_config_text(text, path.parent, check_paths)
    return replace(cfg, source=path)
