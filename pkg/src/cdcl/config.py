"""Flat ``key = value`` run configuration with dotted section keys."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

from .srnet import SRModelConfig
from .trainer.training import TrainConfig

SECTIONS = {"model": SRModelConfig, "train": TrainConfig}


class ConfigError(ValueError):
    pass


def _field_types(cls) -> Dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def schema() -> Dict[str, object]:
    """Every accepted dotted key mapped to its type."""
    out = {}
    for sec, cls in SECTIONS.items():
        for name, tp in _field_types(cls).items():
            out[f"{sec}.{name}"] = tp
    return out


def _convert(key: str, raw: str, tp):
    raw = raw.strip()
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported type {tp}")


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line.strip()!r}")
        key, value = (t.strip() for t in text.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


@dataclass
class RunConfig:
    model: SRModelConfig = field(default_factory=SRModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_pairs(cls, pairs: Dict[str, str]) -> "RunConfig":
        known = schema()
        unknown = sorted(k for k in pairs if k not in known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values: Dict[str, dict] = {sec: {} for sec in SECTIONS}
        for key, raw in pairs.items():
            sec, name = key.split(".", 1)
            values[sec][name] = _convert(key, raw, known[key])
        # one scale setting is enough; the other section inherits it
        scale = values["model"].get("scale", values["train"].get("scale"))
        if scale is not None:
            values["model"].setdefault("scale", scale)
            values["train"].setdefault("scale", scale)
        try:
            model = SRModelConfig(**values["model"])
            train = TrainConfig(**values["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if train.scale != model.scale:
            raise ConfigError(f"train.scale {train.scale} != model.scale {model.scale}")
        return cls(model, train)

    def items(self) -> List[Tuple[str, object]]:
        out = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                out.append((f"{sec}.{f.name}", getattr(obj, f.name)))
        return out

    def dump(self) -> str:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(repr(x) for x in v)
            return repr(v) if isinstance(v, float) else str(v)
        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.items())


def pairs_from_snapshot(snapshot: dict) -> Dict[str, str]:
    """Dotted pairs from a checkpoint's ``{"model": {...}, "train": {...}}`` config."""
    cfg = RunConfig(SRModelConfig.from_dict(snapshot.get("model", {})),
                    TrainConfig.from_dict(snapshot.get("train", {})))
    return parse_lines(cfg.dump().splitlines(), "<checkpoint>")


def load_run_config(path=None, overrides: Iterable[str] = (), base: Dict[str, str] = None) -> RunConfig:
    """``base`` pairs first, then file values, then ``key=value`` overrides."""
    pairs: Dict[str, str] = dict(base or {})
    if path is not None:
        with open(path) as fh:
            pairs.update(parse_lines(fh, str(path)))
    pairs.update(parse_lines(overrides, "--set"))
    return RunConfig.from_pairs(pairs)
