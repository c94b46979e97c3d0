"""
Configuration for pallex: optional TOML file plus environment overrides.

Lookup order for every value: environment variable, TOML file, built-in
default. The TOML path comes from --config or PALLEX_CONFIG.
"""

import logging
import os
from pathlib import Path

try:  # Python 3.11+ ships tomllib, tomli is fallback for older versions
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - tomli only if tomllib missing
    import tomli as tomllib  # type: ignore

DEFAULT_RUNTIME_DIR = "/run/pallex"

DEFAULTS = {
    "runtime": {"dir": DEFAULT_RUNTIME_DIR},
    "handoff": {"retry_interval_ms": 50, "timeout_ms": 30000},
    "power": {"p_base_mw": 300.0, "p_core_mw": 1700.0, "sample_rate_hz": 1000.0},
    "mqtt": {
        "enabled": False,
        "host": "localhost",
        "port": 1883,
        "user": "",
        "password": "",
        "topic": "pallex/stage/done",
        "error_topic": "pallex/stage/error",
        "ssl": False,
    },
}


# --------------------
# Helpers
# --------------------
def getenv(name, default=None, required=False):
    val = os.getenv(name, default)
    if required and not val:
        raise RuntimeError(f"Missing required environment variable: {name}")
    return val


def getenv_bool(name, default="false"):
    return os.getenv(name, default).strip().lower() in {"1", "true", "yes", "on"}


def getenv_int(name: str, default: int, minimum: int | None = None) -> int:
    raw = getenv(name, str(default))
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"{name} must be an integer, got {raw!r}") from exc
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def load_env_file(path: Path):
    """
    Reads KEY=VALUE lines and sets them unless the variable already exists.
    """
    if not path.exists():
        logging.info("env-file not found, skipping: %s", path)
        return
    logging.info("loading env vars from %s", path)
    with path.open() as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                logging.warning("ignore malformed line in env file: %s", line)
                continue
            key, value = line.split("=", 1)
            key = key.strip()
            if not key or key in os.environ:
                continue
            os.environ[key] = value.strip()


def _merged_defaults() -> dict:
    return {section: dict(values) for section, values in DEFAULTS.items()}


def load_config(path: Path | None = None) -> dict:
    """
    Loads the TOML configuration (if any), applies env overrides and
    coerces types. A path given explicitly must exist.
    """
    data = _merged_defaults()

    if path is None:
        env_path = getenv("PALLEX_CONFIG")
        path = Path(env_path) if env_path else None

    if path is not None:
        config_path = path.expanduser()
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")
        with config_path.open("rb") as fh:
            loaded = tomllib.load(fh)
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise ValueError(f"Unknown config sections: {', '.join(unknown)}")
        for section, values in loaded.items():
            if not isinstance(values, dict):
                raise ValueError(f"config section [{section}] must be a table")
            data[section].update(values)

    runtime_env = getenv("PALLEX_RUNTIME_DIR")
    if runtime_env:
        data["runtime"]["dir"] = runtime_env
    data["runtime"]["dir"] = Path(data["runtime"]["dir"]).expanduser()

    handoff = data["handoff"]
    handoff["retry_interval_ms"] = getenv_int(
        "PALLEX_RETRY_MS", int(handoff["retry_interval_ms"]), minimum=1
    )
    handoff["timeout_ms"] = getenv_int(
        "PALLEX_TIMEOUT_MS", int(handoff["timeout_ms"]), minimum=1
    )

    power = data["power"]
    for key in ("p_base_mw", "p_core_mw", "sample_rate_hz"):
        power[key] = float(power[key])
    if power["p_base_mw"] < 0 or power["p_core_mw"] < 0:
        raise ValueError("power.p_base_mw and power.p_core_mw must be >= 0")
    if power["sample_rate_hz"] <= 0:
        raise ValueError("power.sample_rate_hz must be > 0")

    mqtt = data["mqtt"]
    mqtt["port"] = int(mqtt["port"])
    mqtt["ssl"] = bool(mqtt["ssl"])
    mqtt["enabled"] = getenv_bool("PALLEX_MQTT_ENABLED", "true" if mqtt["enabled"] else "false")

    return data


def runtime_dir(config: dict) -> Path:
    return Path(config["runtime"]["dir"])
