# config.py
import argparse
import os
from pathlib import Path

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ValidationError

from errors import ConfigError
from schemas import CorpusConfig, IspConfig, NetConfig, TrainConfig

load_dotenv()

RLCM_MODEL = os.getenv("RLCM_MODEL", "runs/model.ckpt")
RLCM_CORPUS = os.getenv("RLCM_CORPUS", "data/corpus")

# Config sections a command can take flags / file keys for
SECTIONS: dict[str, type[BaseModel]] = {
    "net":    NetConfig,
    "train":  TrainConfig,
    "isp":    IspConfig,
    "corpus": CorpusConfig,
}

KNOWN_KEYS = {name for cls in SECTIONS.values() for name in cls.model_fields}


def flag_name(field: str) -> str:
    return "--" + field.replace("_", "-")


def _dest(section: str, field: str) -> str:
    return f"{section}__{field}"


def load_config_file(path: str | Path | None) -> dict[str, str]:
    """KEY=VALUE file (dotenv syntax); keys are field names, any case."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    values = {key.lower(): value for key, value in dotenv_values(p).items()}
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys in {p}: {', '.join(unknown)}")
    return values


def add_section_flags(parser: argparse.ArgumentParser, *sections: str):
    """One string flag per pydantic field; pydantic does the parsing."""
    taken = set()
    for section in sections:
        group = parser.add_argument_group(section)
        for field, info in SECTIONS[section].model_fields.items():
            if field in taken:
                raise ValueError(f"flag {flag_name(field)} defined by two sections")
            taken.add(field)
            group.add_argument(
                flag_name(field),
                dest=_dest(section, field),
                default=None,
                metavar=field.upper(),
                help=f"{info.description or field} (default: {info.default})",
            )


def resolve(args: argparse.Namespace, *sections: str) -> dict[str, BaseModel]:
    """defaults < config file < flags, validated per section."""
    file_values = load_config_file(getattr(args, "config", None))
    resolved = {}
    for section in sections:
        cls = SECTIONS[section]
        data = {k: v for k, v in file_values.items() if k in cls.model_fields}
        for field in cls.model_fields:
            value = getattr(args, _dest(section, field), None)
            if value is not None:
                data[field] = value
        if section == "train" and data.get("jpeg_quality") is not None and "lmbda" not in data:
            resolved[section] = _validated(cls.degraded_defaults, data, section)
            continue
        resolved[section] = _validated(cls, data, section)
    return resolved


def _validated(factory, data: dict, section: str) -> BaseModel:
    try:
        return factory(**data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"invalid {section} configuration: {problems}") from exc


def echo_lines(resolved: dict[str, BaseModel]) -> list[str]:
    lines = []
    for section, cfg in resolved.items():
        values = " | ".join(f"{k}={v}" for k, v in cfg.model_dump().items())
        lines.append(f"{section}: {values}")
    return lines
