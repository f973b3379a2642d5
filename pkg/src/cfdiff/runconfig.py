"""Flat key=value run configuration files with section headers.

The canonical serialization is one ``[section]`` header per block and
``key = value`` lines; parsing the serializer's output and re-serializing
reproduces it byte for byte. Commands validate parsed configs against an
explicit schema, so unknown sections or keys are rejected and missing keys
without defaults are reported by name.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


Config = dict[str, dict[str, str]]


def parse_config(text: str) -> Config:
    cfg: Config = {}
    section: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            if section in cfg:
                raise ConfigError(f"line {lineno}: duplicate section [{section}]")
            cfg[section] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in cfg[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section}]")
        cfg[section][key] = value
    return cfg


def serialize_config(cfg: Config) -> str:
    blocks = []
    for section, items in cfg.items():
        lines = [f"[{section}]"]
        lines += [f"{key} = {value}" for key, value in items.items()]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text())


def save_config(path: str | Path, cfg: Config):
    Path(path).write_text(serialize_config(cfg))


def validate_config(
    cfg: Config,
    schema: dict[str, set[str] | None],
    required: dict[str, set[str]] | None = None,
):
    """Reject unknown sections/keys; report missing required keys by name.

    A schema value of None admits arbitrary keys in that section.
    """
    for section, items in cfg.items():
        if section not in schema:
            raise ConfigError(f"unknown section [{section}]")
        allowed = schema[section]
        if allowed is None:
            continue
        for key in items:
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    for section, keys in (required or {}).items():
        for key in keys:
            if key not in cfg.get(section, {}):
                raise ConfigError(f"missing required key {key!r} in [{section}]")


class SectionView:
    """Typed accessors over one section with defaults."""

    def __init__(self, cfg: Config, section: str):
        self.items = cfg.get(section, {})
        self.section = section

    def _get(self, key: str, default):
        if key in self.items:
            return self.items[key]
        if default is _MISSING:
            raise ConfigError(f"missing required key {key!r} in [{self.section}]")
        return default

    def get_str(self, key: str, default="__missing__"):
        v = self._get(key, _MISSING if default == "__missing__" else default)
        return str(v)

    def get_int(self, key: str, default=None) -> int:
        v = self._get(key, _MISSING if default is None else default)
        try:
            return int(str(v))
        except ValueError:
            raise ConfigError(f"key {key!r} in [{self.section}]: not an integer: {v!r}") from None

    def get_float(self, key: str, default=None) -> float:
        v = self._get(key, _MISSING if default is None else default)
        try:
            return float(str(v))
        except ValueError:
            raise ConfigError(f"key {key!r} in [{self.section}]: not a number: {v!r}") from None

    def get_floats(self, key: str, default=None) -> list[float]:
        v = self._get(key, _MISSING if default is None else default)
        if isinstance(v, list):
            return v
        try:
            return [float(part) for part in str(v).split(",") if part.strip() != ""]
        except ValueError:
            raise ConfigError(f"key {key!r} in [{self.section}]: not a number list: {v!r}") from None


class _Missing:
    pass


_MISSING = _Missing()
