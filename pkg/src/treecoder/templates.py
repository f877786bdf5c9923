"""Plain-text prompt templates with ``$name`` placeholders."""

from __future__ import annotations

import re
import string
from importlib import resources
from pathlib import Path

from .errors import ConfigurationError

DEFAULT_DIR = Path(str(resources.files("treecoder") / "data" / "templates"))

# roles allowed to receive retrieved knowledge, and the templates they render
KNOWLEDGE_TEMPLATES = ("split_modules", "draft_function", "regenerate_function")


class TemplateSet:
    """Templates loaded from a directory; files missing there fall back to the shipped defaults."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        if self.directory is not None and not self.directory.is_dir():
            raise ConfigurationError(f"template directory not found: {self.directory}")
        self._cache: dict[str, str] = {}

    def names(self) -> list[str]:
        names = {p.name[:-4] for p in DEFAULT_DIR.glob("*.txt")}
        if self.directory is not None:
            names |= {p.name[:-4] for p in self.directory.glob("*.txt")}
        return sorted(names)

    def text(self, name: str) -> str:
        if name not in self._cache:
            for base in (self.directory, DEFAULT_DIR):
                if base is not None and (base / f"{name}.txt").is_file():
                    self._cache[name] = (base / f"{name}.txt").read_text(encoding="utf-8")
                    break
            else:
                raise ConfigurationError(f"no template named {name!r}")
        return self._cache[name]

    def placeholders(self, name: str) -> set[str]:
        pattern = string.Template.pattern
        found = set()
        for m in re.finditer(pattern, self.text(name)):
            key = m.group("named") or m.group("braced")
            if key:
                found.add(key)
        return found

    def render(self, name: str, **values: object) -> str:
        try:
            return string.Template(self.text(name)).substitute({k: str(v) for k, v in values.items()})
        except KeyError as exc:
            raise ConfigurationError(f"template {name!r} needs a value for {exc.args[0]!r}") from None
