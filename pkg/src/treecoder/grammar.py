"""Strict, regex-extractable output grammar for agent responses.

A structured response is one block::

    <<<BEGIN module_leader>>>
    FUNCTION_NAME: load_image
    FUNCTION_DESCRIPTION: Read the input image from disk.
    INPUTS: none
    OUTPUTS: image: numpy.ndarray
    ---
    FUNCTION_NAME: ...
    <<<END module_leader>>>

Code travels in triple-backtick fences tagged ``python``. Fences are cut out
of the text before blocks are located, so prose and code around a block never
confuse the block parser.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .domain import Param, is_identifier
from .errors import GrammarError

SEPARATOR = "---"
PYTHON_TAGS = ("python", "py", "python3")

_TAG_LINE = re.compile(r"^([A-Z][A-Z_]*):[ \t]*(.*?)\s*$")
_FENCE_OPEN = re.compile(r"^\s*```\s*([A-Za-z0-9_+.-]*)\s*$")
_FENCE_CLOSE = re.compile(r"^\s*```\s*$")


def begin(role: str) -> str:
    return f"<<<BEGIN {role}>>>"


def end(role: str) -> str:
    return f"<<<END {role}>>>"


@dataclass(frozen=True)
class BlockSchema:
    role: str
    header_tags: tuple[str, ...] = ()
    section_tags: tuple[str, ...] = ()
    min_sections: int = 1


SCHEMAS = {
    "team_leader": BlockSchema("team_leader", ("ENVIRONMENT",), ("MODULE_NAME", "MODULE_DESCRIPTION")),
    "module_leader": BlockSchema(
        "module_leader", (), ("FUNCTION_NAME", "FUNCTION_DESCRIPTION", "INPUTS", "OUTPUTS")),
    "function_coordinator": BlockSchema("function_coordinator", (), ("FUNCTION_NAME", "SIGNATURE", "DOCSTRING")),
    "coder": BlockSchema("coder", ("VERDICT",), (), min_sections=0),
    "artifact": BlockSchema("artifact", ("ADDRESS", "LEVEL", "VALIDATION", "ATTEMPTS"), (), min_sections=0),
}


@dataclass
class Block:
    role: str
    header: dict[str, str] = field(default_factory=dict)
    sections: list[dict[str, str]] = field(default_factory=list)


def split_fences(text: str) -> tuple[str, list[tuple[str, str]]]:
    """Separate fenced code from prose. Returns (prose, [(language, code), ...])."""
    prose: list[str] = []
    fences: list[tuple[str, str]] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        m = _FENCE_OPEN.match(lines[i])
        if not m:
            prose.append(lines[i])
            i += 1
            continue
        lang = m.group(1).lower()
        j = i + 1
        while j < len(lines) and not _FENCE_CLOSE.match(lines[j]):
            j += 1
        if j >= len(lines):
            raise GrammarError(f"unterminated code fence opened on line {i + 1}", block="fence")
        fences.append((lang, "\n".join(lines[i + 1 : j])))
        i = j + 1
    return "\n".join(prose), fences


def extract_python(text: str) -> list[str]:
    _, fences = split_fences(text)
    return [code for lang, code in fences if lang in PYTHON_TAGS]


def single_python_fence(text: str) -> str:
    blocks = extract_python(text)
    if not blocks:
        raise GrammarError("response contains no ```python code fence", block="fence")
    if len(blocks) > 1:
        raise GrammarError(f"response contains {len(blocks)} python fences, expected exactly one", block="fence")
    code = blocks[0].strip("\n")
    if not code.strip():
        raise GrammarError("python fence is empty", block="fence")
    return code + "\n"


def fence(code: str, lang: str = "python") -> str:
    return f"```{lang}\n{code.rstrip(chr(10))}\n```"


def _parse_section(lines: list[str], allowed: tuple[str, ...], where: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in lines:
        if not line.strip():
            continue
        m = _TAG_LINE.match(line.strip())
        if not m:
            raise GrammarError(f"{where}: line is not 'TAG: value': {line.strip()[:60]!r}", block=where)
        tag, value = m.group(1), m.group(2)
        if tag not in allowed:
            raise GrammarError(f"{where}: unexpected tag {tag}", block=where)
        if tag in out:
            raise GrammarError(f"{where}: duplicate tag {tag}", block=where)
        if not value:
            raise GrammarError(f"{where}: tag {tag} has an empty value", block=where)
        out[tag] = value
    for tag in allowed:
        if tag not in out:
            raise GrammarError(f"{where}: missing tag {tag}", block=where)
    return out


def parse_block(text: str, role: str) -> Block:
    schema = SCHEMAS[role]
    prose, _ = split_fences(text)
    lines = [ln.strip() for ln in prose.splitlines()]
    starts = [i for i, ln in enumerate(lines) if ln == begin(role)]
    if not starts:
        raise GrammarError(f"no {begin(role)} block found", block=role)
    if len(starts) > 1:
        raise GrammarError(f"found {len(starts)} {role} blocks, expected one", block=role)
    s = starts[0]
    ends = [i for i in range(s + 1, len(lines)) if lines[i] == end(role)]
    if not ends:
        raise GrammarError(f"{role} block is not closed by {end(role)}", block=role)
    body = lines[s + 1 : ends[0]]
    nested = [ln for ln in body if ln.startswith("<<<BEGIN ") or ln.startswith("<<<END ")]
    if nested:
        raise GrammarError(f"{role} block contains a stray sentinel {nested[0]!r}", block=role)

    chunks: list[list[str]] = [[]]
    for ln in body:
        if ln == SEPARATOR:
            chunks.append([])
        else:
            chunks[-1].append(ln)

    block = Block(role)
    if schema.header_tags:
        block.header = _parse_section(chunks[0], schema.header_tags, f"{role} header")
        chunks = chunks[1:]
        if not schema.section_tags and chunks:
            raise GrammarError(f"{role} block takes no sections after its header", block=role)
    if schema.section_tags:
        for n, chunk in enumerate(chunks, 1):
            if not any(c.strip() for c in chunk):
                raise GrammarError(f"{role} section {n} is empty", block=f"{role} section {n}")
            block.sections.append(_parse_section(chunk, schema.section_tags, f"{role} section {n}"))
    if len(block.sections) < schema.min_sections:
        raise GrammarError(
            f"{role} block has {len(block.sections)} section(s), needs at least {schema.min_sections}", block=role)
    return block


def _check_value(tag: str, value: str) -> str:
    if "\n" in value or value != value.strip() or not value:
        raise ValueError(f"{tag} value must be a non-empty single line without padding: {value!r}")
    return value


def serialize_block(block: Block) -> str:
    schema = SCHEMAS[block.role]
    chunks = []
    if schema.header_tags:
        chunks.append([f"{t}: {_check_value(t, block.header[t])}" for t in schema.header_tags])
    for sec in block.sections:
        chunks.append([f"{t}: {_check_value(t, sec[t])}" for t in schema.section_tags])
    lines = [begin(block.role)]
    for i, chunk in enumerate(chunks):
        if i:
            lines.append(SEPARATOR)
        lines.extend(chunk)
    lines.append(end(block.role))
    return "\n".join(lines) + "\n"


def format_params(params: tuple[Param, ...] | list[Param]) -> str:
    if not params:
        return "none"
    return "; ".join(f"{n}: {t}" for n, t in params)


def parse_params(text: str, where: str = "params") -> tuple[Param, ...]:
    text = text.strip()
    if text.lower() == "none":
        return ()
    out = []
    for part in text.split(";"):
        name, sep, typ = part.partition(":")
        name, typ = name.strip(), typ.strip()
        if not sep or not typ:
            raise GrammarError(f"{where}: parameter {part.strip()!r} must be 'name: type'", block=where)
        if not is_identifier(name):
            raise GrammarError(f"{where}: {name!r} is not a valid identifier", block=where)
        out.append((name, typ))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise GrammarError(f"{where}: duplicate parameter names", block=where)
    return tuple(out)
