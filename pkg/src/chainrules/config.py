import configparser
import hashlib
import json
import logging
import os

from typing import Any, Dict, Mapping, Optional

import xdg.BaseDirectory


_LOGGER = logging.getLogger(__name__)

CONFIG_FILE_NAME = "chainrules.cfg"
_SECTION = "chainrules"


class ConfigError(ValueError):
    pass


def folder() -> str:
    return os.path.join(
        xdg.BaseDirectory.xdg_config_home,
        "chainrules",
    )


def user_config_path() -> str:
    return os.path.join(folder(), CONFIG_FILE_NAME)


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def load_flat(path: str) -> Dict[str, str]:
    """Read a flat ``key = value`` file.  Keys are normalized so that
    ``window-size`` and ``window_size`` are the same setting."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    parser = configparser.ConfigParser(
        interpolation=None,
        comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",),
    )
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    return {normalize_key(k): v.strip() for k, v in parser[_SECTION].items()}


def effective(
    config_path: Optional[str],
    overrides: Mapping[str, Any],
    use_user_config: bool = True,
) -> Dict[str, str]:
    """Layer user config, then the given config file, then overrides."""
    values: Dict[str, str] = {}
    user = user_config_path()
    if use_user_config and os.path.isfile(user):
        _LOGGER.debug("Loading user configuration from %s", user)
        values.update(load_flat(user))
    if config_path is not None:
        values.update(load_flat(config_path))
    for k, v in overrides.items():
        if v is not None:
            values[normalize_key(k)] = str(v)
    return values


def get_int(values: Mapping[str, str], key: str, default: int) -> int:
    try:
        return int(values[key]) if key in values else default
    except ValueError as e:
        raise ConfigError(f"{key}: expected an integer, got {values[key]!r}") from e


def get_float(values: Mapping[str, str], key: str, default: float) -> float:
    try:
        return float(values[key]) if key in values else default
    except ValueError as e:
        raise ConfigError(f"{key}: expected a number, got {values[key]!r}") from e


def get_optional_int(
    values: Mapping[str, str],
    key: str,
    default: Optional[int],
) -> Optional[int]:
    if key not in values:
        return default
    if values[key].lower() in ("", "none", "inf"):
        return None
    return get_int(values, key, 0)


def get_bool(values: Mapping[str, str], key: str, default: bool) -> bool:
    if key not in values:
        return default
    v = values[key].lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {values[key]!r}")


def get_str(values: Mapping[str, str], key: str, default: str) -> str:
    return values.get(key, default)


def config_hash(mapping: Mapping[str, Any]) -> str:
    canonical = json.dumps(dict(mapping), sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
