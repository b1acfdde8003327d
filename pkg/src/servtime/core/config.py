import ast
from contextlib import suppress
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, cast

import tomli_w

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:
    import tomli as tomllib  # Python 3.10
from platformdirs import user_config_dir

from servtime.core.constants import COMMAND_DEFAULTS
from servtime.core.exceptions import ConfigError

CONFIG_DIR = Path(user_config_dir("servtime"))
CONFIG_FILE = CONFIG_DIR / "config.toml"

# sentinel value used for robust
# config.get(..., default=...) value check
_sentinel = object()


@lru_cache
def get_config() -> "Config":
    return Config()


def coerce_value(value: str) -> Any:
    # handle case-insensitive "true"/"false" for booleans
    if value.lower() == "true":
        return True
    if value.lower() == "false":
        return False
    # handle other literals (int, float, etc.)
    with suppress(ValueError, SyntaxError):
        return ast.literal_eval(value)
    return value


class Config:
    """User-level defaults, one section per command."""

    def __init__(self) -> None:
        self.config: dict[str, Any] = {}
        self._load_config()

    def get(self, key_path: str, default: Any | None = _sentinel) -> Any:
        keys = key_path.split(".")
        current = self.config

        try:
            for key in keys:
                current = current[key]

            if isinstance(current, dict):
                raise ConfigError(
                    f"key does not contain a value (it's a section): {key_path}"
                )
            return current

        except (KeyError, TypeError):
            if default is not _sentinel:
                return default

            if len(keys) > 1:
                raise ConfigError(f"key does not contain a section: {key_path}")
            raise ConfigError(f"key not found: {key_path}")

    def section(self, name: str) -> dict[str, Any]:
        value = self.config.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"'{name}' is not a section")
        return cast(dict[str, Any], value)

    def set(self, key_path: str, value: str) -> None:
        current = self.config
        keys = key_path.split(".")

        if keys[0] in COMMAND_DEFAULTS and (
            len(keys) != 2 or keys[1] not in COMMAND_DEFAULTS[keys[0]]
        ):
            raise ConfigError(f"unknown key for section '{keys[0]}': {key_path}")

        try:
            for key in keys[:-1]:
                if key not in current:
                    current[key] = {}
                elif not isinstance(current[key], dict):
                    raise ConfigError(
                        f"cannot set '{key_path}': '{key}' is not a section"
                    )
                current = current[key]

            current[keys[-1]] = coerce_value(value)
            self._save_config()

        except (KeyError, TypeError) as e:
            raise ConfigError(f"failed to set '{key_path}': {str(e)}")

    def list(self) -> list[str]:
        results: list[str] = []

        def _flatten_config(data: dict[str, Any], prefix: str = "") -> None:
            # recursively iterate through config
            for key, value in data.items():
                new_prefix = f"{prefix}.{key}" if prefix else key
                if isinstance(value, dict):
                    _flatten_config(cast(dict[str, Any], value), new_prefix)
                else:
                    if isinstance(value, bool):
                        value = str(value).lower()
                    results.append(f"{new_prefix}={value}")

        _flatten_config(self.config)
        return results

    def _load_config(self) -> None:
        if not CONFIG_FILE.exists():
            self._create_default_config()
            self._save_config()

        try:
            with open(CONFIG_FILE, "rb") as f:
                self.config = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"loading config failed: {e}")

    def _create_default_config(self) -> None:
        self.config = {
            "general": {
                "threads": 1,
            },
            "train_rpp": {"hidden": COMMAND_DEFAULTS["train_rpp"]["hidden"]},
            "train_adv": {"lambda2": COMMAND_DEFAULTS["train_adv"]["lambda2"]},
        }

    def _save_config(self) -> None:
        CONFIG_DIR.mkdir(parents=True, exist_ok=True)
        with open(CONFIG_FILE, "wb") as f:
            tomli_w.dump(self.config, f)


@dataclass
class RunConfig:
    """Resolved settings of one CLI invocation."""

    command: str
    values: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def resolve(
        cls,
        command: str,
        *,
        config_file: Path | None = None,
        overrides: dict[str, Any] | None = None,
        user: Config | None = None,
    ) -> "RunConfig":
        try:
            defaults = COMMAND_DEFAULTS[command]
        except KeyError:
            raise ConfigError(f"no settings known for command: {command}")

        values = dict(defaults)
        # built-in < user section < --config file < CLI flags
        layers: list[tuple[str, dict[str, Any]]] = []
        if user is not None:
            layers.append((f"user config [{command}]", user.section(command)))
        if config_file is not None:
            layers.append((str(config_file), _read_run_file(config_file)))
        layers.append(
            ("command line", {k: v for k, v in (overrides or {}).items() if v is not None})
        )

        for origin, layer in layers:
            unknown = sorted(set(layer) - set(defaults))
            if unknown:
                raise ConfigError(f"unknown keys in {origin}: {', '.join(unknown)}")
            for key, value in layer.items():
                values[key] = _check_type(key, value, defaults[key])
        return cls(command, values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def write_next_to(self, output: Path) -> Path:
        path = output.with_name(output.name + ".config.toml")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            tomli_w.dump({self.command: self.values}, f)
        return path


def _read_run_file(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid config file {path}: {e}")

    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config file must be flat key = value, found sections: {nested}")
    return data


def _check_type(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' expects true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, str) and isinstance(value, str):
        return value
    raise ConfigError(f"'{key}' expects {type(default).__name__}, got {value!r}")
