"""Flat ``key = value`` configuration files.

Values are parsed to int, float, bool or comma-separated lists where the text
allows it; everything else stays a string.  Lines starting with ``#`` are
comments.  Configs are hashed over their canonical JSON form so run manifests
can name exactly what produced them.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

_SECTION = "config"


def _coerce(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return [_coerce(part) for part in text.split(",") if part.strip()]
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text: str) -> dict[str, Any]:
    parser = configparser.ConfigParser(
        interpolation=None, delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",)
    )
    parser.optionxform = str  # keep key case
    parser.read_string(f"[{_SECTION}]\n{text}")
    return {key: _coerce(value) for key, value in parser.items(_SECTION)}


def load_config(path: str | Path) -> dict[str, Any]:
    """Load a config file; bare names resolve to the shipped ``configs/`` directory."""
    path = Path(path)
    if not path.exists() and path.parent == Path("."):
        path = packaged_config_path(path.name)
    cfg = parse_config(path.read_text())
    base = cfg.pop("include", None)
    if base:
        merged = load_config(base if Path(base).is_absolute() else path.parent / base)
        merged.update(cfg)
        cfg = merged
    return cfg


def packaged_config_path(name: str) -> Path:
    if not name.endswith(".cfg"):
        name += ".cfg"
    path = Path(str(resources.files("dacn") / "configs" / name))
    if not path.exists():
        raise FileNotFoundError(f"no config named {name!r}")
    return path


def dump_config(cfg: Mapping[str, Any]) -> str:
    lines = []
    for key, value in cfg.items():
        if isinstance(value, (list, tuple)):
            value = ", ".join(str(v) for v in value) + ("," if len(value) == 1 else "")
        elif value is None:
            value = "null"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: Mapping[str, Any]) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def subconfig(cfg: Mapping[str, Any], prefix: str) -> dict[str, Any]:
    """Keys under ``prefix.`` with the prefix stripped."""
    dot = prefix + "."
    return {k[len(dot):]: v for k, v in cfg.items() if k.startswith(dot)}
