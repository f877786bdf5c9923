"""Plain-text manifests for projects and benchmark fixtures.

Layout::

    id: license_plate
    environment_hint: imgproc-base
    description:
      Free text, any number of lines, up to the inputs list.
    inputs:
    - images/car.png image
    - table.csv data

Header lines are ``key: value``. The description block runs until a line that
reads exactly ``inputs:`` or until end of file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from textwrap import dedent

from .domain import InputFile, InputKind, ProjectRequirement
from .errors import ConfigurationError, ValidationError

PROJECT_KEYS = ("id", "environment_hint", "workdir")


@dataclass(frozen=True)
class Manifest:
    header: dict[str, str]
    description: str
    inputs: tuple[InputFile, ...]


def parse_manifest(text: str, source: str = "<manifest>", allowed: tuple[str, ...] | None = None) -> Manifest:
    lines = text.splitlines()
    header: dict[str, str] = {}
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line.strip() or line.lstrip().startswith("#"):
            i += 1
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or " " in key:
            raise ConfigurationError(f"{source}:{i + 1}: expected 'key: value', got {line!r}")
        if key in ("description", "inputs"):
            break
        if allowed is not None and key not in allowed:
            raise ConfigurationError(f"{source}:{i + 1}: unknown header field {key!r}")
        if key in header:
            raise ConfigurationError(f"{source}:{i + 1}: duplicate header field {key!r}")
        header[key] = value.strip()
        i += 1

    desc_lines: list[str] = []
    if i < len(lines) and lines[i].partition(":")[0].strip() == "description":
        inline = lines[i].partition(":")[2].strip()
        if inline:
            desc_lines.append(inline)
        i += 1
        while i < len(lines) and lines[i].rstrip() != "inputs:":
            desc_lines.append(lines[i])
            i += 1
    description = dedent("\n".join(desc_lines)).strip()

    inputs: list[InputFile] = []
    if i < len(lines) and lines[i].rstrip() == "inputs:":
        i += 1
        for n in range(i, len(lines)):
            item = lines[n].strip()
            if not item or item.startswith("#"):
                continue
            if not item.startswith("- "):
                raise ConfigurationError(f"{source}:{n + 1}: input entries look like '- path [kind]'")
            parts = item[2:].split()
            if len(parts) not in (1, 2):
                raise ConfigurationError(f"{source}:{n + 1}: input entries look like '- path [kind]'")
            try:
                inputs.append(InputFile(parts[0], InputKind(parts[1]) if len(parts) == 2 else InputKind.IMAGE))
            except ValueError as exc:
                raise ConfigurationError(f"{source}:{n + 1}: {exc}") from None
    if not description:
        raise ConfigurationError(f"{source}: description block is missing or empty")
    return Manifest(header, description, tuple(inputs))


def load_project(path: str | Path) -> ProjectRequirement:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError:
        raise ConfigurationError(f"manifest not found: {path}") from None
    m = parse_manifest(text, str(path), PROJECT_KEYS)
    if "id" not in m.header:
        raise ConfigurationError(f"{path}: header field 'id' is required")
    try:
        return ProjectRequirement(
            id=m.header["id"], description=m.description, input_files=m.inputs,
            workdir=m.header.get("workdir", "."), environment_hint=m.header.get("environment_hint") or None)
    except ValidationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
