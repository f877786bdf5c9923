"""Core data model: the decomposition tree, thoughts, code artifacts and run configuration."""

from __future__ import annotations

import ast
import enum
import keyword
import re
import threading
from dataclasses import dataclass, field
from pathlib import PurePosixPath
from typing import Any, Union

from .errors import AddressingError, ValidationError

Address = tuple[int, ...]
ROOT: Address = ()

_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def is_identifier(name: str) -> bool:
    return bool(_IDENT_RE.match(name)) and not keyword.iskeyword(name)


def format_address(address: Address) -> str:
    return "root" if not address else ".".join(str(i) for i in address)


def parse_address(text: str) -> Address:
    text = text.strip()
    if text in ("", "root", "/"):
        return ROOT
    try:
        parts = tuple(int(p) for p in text.split("."))
    except ValueError:
        raise AddressingError(f"malformed address {text!r}") from None
    if any(p < 0 for p in parts):
        raise AddressingError(f"malformed address {text!r}")
    return parts


def snake_case(name: str) -> str:
    """ImageInput -> image_input; already-snake names pass through."""
    s = re.sub(r"(?<=[a-z0-9])([A-Z])", r"_\1", name)
    s = re.sub(r"(?<=[A-Z])([A-Z][a-z])", r"_\1", s)
    return s.lower()


def check_relative_path(path: str) -> str:
    p = PurePosixPath(path)
    if not path or p.is_absolute() or ".." in p.parts or "\\" in path:
        raise ValidationError(f"path must be relative without traversal: {path!r}")
    return str(p)


class InputKind(str, enum.Enum):
    IMAGE = "image"
    DATA = "data"
    OTHER = "other"


@dataclass(frozen=True)
class InputFile:
    path: str
    kind: InputKind = InputKind.IMAGE

    def __post_init__(self):
        object.__setattr__(self, "path", check_relative_path(self.path))
        object.__setattr__(self, "kind", InputKind(self.kind))


@dataclass(frozen=True)
class ProjectRequirement:
    id: str
    description: str
    input_files: tuple[InputFile, ...] = ()
    workdir: str = "."
    environment_hint: str | None = None

    def __post_init__(self):
        if not self.description or not self.description.strip():
            raise ValidationError("project description must be non-empty")
        if not self.id:
            raise ValidationError("project id must be non-empty")
        object.__setattr__(self, "input_files", tuple(self.input_files))
        if self.workdir != ".":
            check_relative_path(self.workdir)

    @property
    def images(self) -> tuple[InputFile, ...]:
        return tuple(f for f in self.input_files if f.kind is InputKind.IMAGE)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "description": self.description,
            "input_files": [[f.path, f.kind.value] for f in self.input_files],
            "workdir": self.workdir,
            "environment_hint": self.environment_hint,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ProjectRequirement:
        return cls(
            id=d["id"],
            description=d["description"],
            input_files=tuple(InputFile(p, k) for p, k in d.get("input_files", [])),
            workdir=d.get("workdir", "."),
            environment_hint=d.get("environment_hint"),
        )


@dataclass(frozen=True)
class HyperThought:
    """Facts fixed when a module is created; descendants inherit them verbatim."""

    module_name: str
    runtime_environment: str
    work_directory: str
    language: str = "python"

    def __post_init__(self):
        if self.language != "python":
            raise ValidationError("only python is supported as target language")
        if not is_identifier(self.module_name):
            raise ValidationError(f"module name is not an identifier: {self.module_name!r}")
        if not self.runtime_environment or not self.work_directory:
            raise ValidationError("hyper thought fields must all be set")

    def to_dict(self) -> dict[str, str]:
        return {
            "module_name": self.module_name,
            "language": self.language,
            "runtime_environment": self.runtime_environment,
            "work_directory": self.work_directory,
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> HyperThought:
        return cls(d["module_name"], d["runtime_environment"], d["work_directory"], d.get("language", "python"))


@dataclass(frozen=True)
class ModuleThought:
    hyper: HyperThought
    description: str
    index: int
    parent: str

    @property
    def name(self) -> str:
        return self.hyper.module_name

    @property
    def snake_name(self) -> str:
        return snake_case(self.hyper.module_name)

    @property
    def entry_name(self) -> str:
        return f"run_{self.snake_name}"

    def to_dict(self) -> dict[str, Any]:
        return {"hyper": self.hyper.to_dict(), "description": self.description,
                "index": self.index, "parent": self.parent}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModuleThought:
        return cls(HyperThought.from_dict(d["hyper"]), d["description"], d["index"], d["parent"])


Param = tuple[str, str]


@dataclass(frozen=True)
class FunctionThought:
    name: str
    description: str
    inputs: tuple[Param, ...]
    outputs: tuple[Param, ...]
    parent: Address

    def __post_init__(self):
        if not is_identifier(self.name):
            raise ValidationError(f"function name is not an identifier: {self.name!r}")
        if self.inputs is None or self.outputs is None:
            raise ValidationError("inputs/outputs may be empty but not absent")
        object.__setattr__(self, "inputs", tuple(tuple(p) for p in self.inputs))
        object.__setattr__(self, "outputs", tuple(tuple(p) for p in self.outputs))
        object.__setattr__(self, "parent", tuple(self.parent))
        for pname, _ in self.inputs + self.outputs:
            if not is_identifier(pname):
                raise ValidationError(f"parameter name is not an identifier: {pname!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "description": self.description,
                "inputs": [list(p) for p in self.inputs], "outputs": [list(p) for p in self.outputs],
                "parent": list(self.parent)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FunctionThought:
        return cls(d["name"], d["description"], tuple(map(tuple, d["inputs"])),
                   tuple(map(tuple, d["outputs"])), tuple(d["parent"]))


def parse_signature(signature_text: str) -> ast.FunctionDef:
    """Check the signature rule: ``def name(p: T, ...) -> R:`` with every type stated."""
    text = signature_text.strip()
    if not text.startswith("def ") or not text.endswith(":"):
        raise ValidationError(f"signature must look like 'def name(...) -> T:': {signature_text!r}")
    try:
        tree = ast.parse(text + "\n    ...\n")
    except SyntaxError as exc:
        raise ValidationError(f"signature does not parse: {exc.msg}") from None
    if len(tree.body) != 1 or not isinstance(tree.body[0], ast.FunctionDef):
        raise ValidationError("signature must define exactly one function")
    fn = tree.body[0]
    args = fn.args
    if args.vararg or args.kwarg or args.kwonlyargs or args.posonlyargs:
        raise ValidationError("signature may only use plain positional parameters")
    for a in args.args:
        if a.annotation is None:
            raise ValidationError(f"parameter {a.arg!r} has no type annotation")
    if fn.returns is None:
        raise ValidationError("signature has no return annotation")
    return fn


@dataclass(frozen=True)
class FunctionSignature:
    thought: FunctionThought
    signature_text: str
    docstring: str

    def __post_init__(self):
        fn = parse_signature(self.signature_text)
        if fn.name != self.thought.name:
            raise ValidationError(f"signature names {fn.name!r}, expected {self.thought.name!r}")
        if len(fn.args.args) != len(self.thought.inputs):
            raise ValidationError(
                f"signature of {fn.name!r} has {len(fn.args.args)} parameters, "
                f"thought declares {len(self.thought.inputs)} inputs"
            )

    @property
    def name(self) -> str:
        return self.thought.name

    @property
    def parameter_names(self) -> list[str]:
        return [a.arg for a in parse_signature(self.signature_text).args.args]

    def to_dict(self) -> dict[str, Any]:
        return {"thought": self.thought.to_dict(), "signature_text": self.signature_text,
                "docstring": self.docstring}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FunctionSignature:
        return cls(FunctionThought.from_dict(d["thought"]), d["signature_text"], d["docstring"])


class Level(str, enum.Enum):
    FUNCTION = "function"
    MODULE = "module"
    PROJECT = "project"


class Validation(str, enum.Enum):
    UNTESTED = "untested"
    PASSED = "passed"
    FAILED = "failed"
    UNVALIDATED_EXHAUSTED = "unvalidated_exhausted"


@dataclass(frozen=True)
class CodeArtifact:
    level: Level
    source: str
    origin: Address
    validation: Validation = Validation.UNTESTED
    attempts: int = 1

    def __post_init__(self):
        object.__setattr__(self, "level", Level(self.level))
        object.__setattr__(self, "validation", Validation(self.validation))
        object.__setattr__(self, "origin", tuple(self.origin))
        if self.level is Level.PROJECT and self.validation is not Validation.UNTESTED:
            raise ValidationError("project artifacts are never validated")
        if self.attempts < 0:
            raise ValidationError("attempts must be non-negative")

    def with_status(self, validation: Validation) -> CodeArtifact:
        return CodeArtifact(self.level, self.source, self.origin, validation, self.attempts)

    def to_dict(self) -> dict[str, Any]:
        return {"level": self.level.value, "source": self.source, "origin": list(self.origin),
                "validation": self.validation.value, "attempts": self.attempts}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CodeArtifact:
        return cls(d["level"], d["source"], tuple(d["origin"]), d["validation"], d["attempts"])


class AssemblyMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    LLM = "llm"


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one pipeline run.

    ``deterministic`` defaults to True exactly when both backends are scripted;
    deterministic runs execute branches in tree order and stamp thoughts with a
    logical clock so that the run directory is byte-reproducible.
    """

    decision_model: Any
    implementer_model: Any
    max_function_retries: int = 3
    module_parallelism: int = 4
    sandbox_timeout: float = 60.0
    assembly_mode: AssemblyMode = AssemblyMode.DETERMINISTIC
    module_correction_budget: int = 2
    test_correction_budget: int = 1
    pair_programming: bool = True
    use_knowledge_base: bool = True
    knowledge_k: int = 2
    deterministic: bool | None = None

    def __post_init__(self):
        if self.max_function_retries < 0:
            raise ValidationError("max_function_retries must be >= 0")
        if self.sandbox_timeout <= 0:
            raise ValidationError("sandbox_timeout must be > 0")
        if self.module_parallelism < 1:
            raise ValidationError("module_parallelism must be >= 1")
        if self.module_correction_budget < 0 or self.test_correction_budget < 0:
            raise ValidationError("budgets must be >= 0")
        object.__setattr__(self, "assembly_mode", AssemblyMode(self.assembly_mode))
        if self.deterministic is None:
            scripted = all(getattr(b, "kind", None) == "scripted"
                           for b in (self.decision_model, self.implementer_model))
            object.__setattr__(self, "deterministic", scripted)

    @property
    def max_attempts(self) -> int:
        return 1 + self.max_function_retries


Node = Union[ProjectRequirement, ModuleThought, FunctionThought, FunctionSignature]


@dataclass
class DecompositionTree:
    """Registry of tree nodes; addresses are stable for the lifetime of a run."""

    root: ProjectRequirement
    modules: list[ModuleThought] = field(default_factory=list)
    functions: dict[int, list[FunctionThought]] = field(default_factory=dict)
    signatures: dict[int, list[FunctionSignature]] = field(default_factory=dict)
    _by_id: dict[int, Address] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self._by_id[id(self.root)] = ROOT

    def add_modules(self, modules: list[ModuleThought]) -> None:
        with self._lock:
            if self.modules:
                raise AddressingError("modules already registered")
            for i, m in enumerate(modules):
                if m.index != i:
                    raise ValidationError("module sibling indices must be contiguous from 0")
                if m.parent != self.root.id:
                    raise ValidationError(f"module {m.name} has parent {m.parent!r}, expected {self.root.id!r}")
            self.modules = list(modules)
            for i, m in enumerate(modules):
                self._by_id[id(m)] = (i,)

    def add_functions(self, module_index: int, functions: list[FunctionThought]) -> None:
        with self._lock:
            if not 0 <= module_index < len(self.modules):
                raise AddressingError(f"no module at index {module_index}")
            if module_index in self.functions:
                raise AddressingError(f"functions already registered for module {module_index}")
            for j, f in enumerate(functions):
                if f.parent != (module_index,):
                    raise ValidationError(f"function {f.name} parent {f.parent} != ({module_index},)")
            self.functions[module_index] = list(functions)
            for j, f in enumerate(functions):
                self._by_id[id(f)] = (module_index, j)

    def add_signatures(self, module_index: int, sigs: list[FunctionSignature]) -> None:
        with self._lock:
            funcs = self.functions.get(module_index)
            if funcs is None or len(funcs) != len(sigs):
                raise AddressingError(f"signatures do not match functions of module {module_index}")
            self.signatures[module_index] = list(sigs)
            for j, s in enumerate(sigs):
                self._by_id[id(s)] = (module_index, j)

    def address_of(self, node: Node) -> Address:
        try:
            return self._by_id[id(node)]
        except KeyError:
            raise AddressingError(f"node is not registered in this tree: {node!r:.80}") from None

    def contains(self, address: Address) -> bool:
        address = tuple(address)
        if address == ROOT:
            return True
        if len(address) == 1:
            return 0 <= address[0] < len(self.modules)
        if len(address) == 2:
            return 0 <= address[1] < len(self.functions.get(address[0], ()))
        return False

    def module_at(self, address: Address) -> ModuleThought:
        if not self.contains(address[:1]) or not address:
            raise AddressingError(f"no module at {format_address(address)}")
        return self.modules[address[0]]

    def leaf_addresses(self) -> list[Address]:
        return [(i, j) for i in range(len(self.modules)) for j in range(len(self.functions.get(i, ())))]


def tree_address(tree: DecompositionTree, node: Node) -> Address:
    return tree.address_of(node)
