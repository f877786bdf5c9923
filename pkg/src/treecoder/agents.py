"""The five agent roles and the operations they perform.

Decision makers (team leader, module leader, function coordinator) decompose
and assemble; implementers (coder, tester) only write code. Every operation
renders a template, asks its backend through the gateway, and parses the reply
with the strict output grammar. Malformed replies get exactly one reprompt.
"""

from __future__ import annotations

import ast
import logging
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, TypeVar

from . import grammar
from .domain import (
    ROOT,
    Address,
    AssemblyMode,
    CodeArtifact,
    FunctionSignature,
    FunctionThought,
    HyperThought,
    Level,
    ModuleThought,
    ProjectRequirement,
    Validation,
    is_identifier,
)
from .errors import (
    AssemblyError,
    DecompositionError,
    FunctionDraftError,
    GrammarError,
    RetryBudgetError,
    ValidationError,
)
from .llm import DECISION_MAKER, IMPLEMENTER, BackendRef, ChatMessage, Gateway, Limits
from .pool import Kind, ThoughtPool
from .templates import TemplateSet

logger = logging.getLogger(__name__)

T = TypeVar("T")

ROLE_CATEGORY = {
    "team_leader": DECISION_MAKER,
    "module_leader": DECISION_MAKER,
    "function_coordinator": DECISION_MAKER,
    "coder": IMPLEMENTER,
    "tester": IMPLEMENTER,
}

# which template each role renders; used by template-level property checks
ROLE_TEMPLATES = {
    "team_leader": ("split_modules", "assemble_project"),
    "module_leader": ("split_functions", "module_tests"),
    "function_coordinator": ("refine_functions", "assemble_module", "correct_module"),
    "coder": ("draft_function", "regenerate_function", "review_tests", "fix_tests"),
    "tester": ("draft_tests",),
}


@dataclass(frozen=True)
class AgentDefinition:
    role: str
    structural_text: str
    functional_text: str

    def __post_init__(self):
        if not self.structural_text.strip() or not self.functional_text.strip():
            raise ValidationError(f"{self.role}: structural and functional texts must be non-empty")
        marker = grammar.begin(self.role) if self.role in grammar.SCHEMAS else "```python"
        if marker not in self.functional_text:
            raise ValidationError(f"{self.role}: functional text does not show the output marker {marker!r}")

    @property
    def system_text(self) -> str:
        return self.structural_text.rstrip() + "\n\n" + self.functional_text.rstrip() + "\n"


class Agent:
    """One role bound to a backend. Tracks the reprompts it needed."""

    def __init__(self, role: str, gateway: Gateway, backend: BackendRef,
                 templates: TemplateSet | None = None, limits: Limits | None = None):
        if role not in ROLE_CATEGORY:
            raise ValueError(f"unknown agent role {role!r}")
        self.role = role
        self.gateway = gateway
        self.backend = backend
        self.templates = templates or TemplateSet()
        self.limits = limits
        self.definition = AgentDefinition(
            role, self.templates.text(f"{role}.structural"), self.templates.text(f"{role}.functional"))
        self.reprompts: list[dict[str, object]] = []

    @property
    def category(self) -> str:
        return ROLE_CATEGORY[self.role]

    def send(self, stage: str, messages: list[ChatMessage], address: Address) -> str:
        return self.gateway.complete(self.backend, messages, self.limits, role=self.role, stage=stage,
                                     address=address, category=self.category).text

    def ask(self, stage: str, prompt: str, parse: Callable[[str], T], *, address: Address = ROOT,
            reprompt: bool = True) -> T:
        messages = [ChatMessage("system", self.definition.system_text), ChatMessage("user", prompt)]
        text = self.send(stage, messages, address)
        try:
            return parse(text)
        except GrammarError as exc:
            if not reprompt:
                raise
            logger.info("%s/%s at %s: reprompting after %s", self.role, stage, address, exc)
            self.reprompts.append({"stage": stage, "address": list(address), "error": str(exc)})
            messages += [ChatMessage("assistant", text),
                         ChatMessage("user", self.templates.render("reprompt", error=str(exc)))]
            return parse(self.send(stage, messages, address))


# -- rendering helpers ----------------------------------------------------------------

def render_catalog(catalog: Mapping[str, str]) -> str:
    return "\n".join(f"- {name}: {desc}" for name, desc in catalog.items())


def render_inputs(requirement: ProjectRequirement) -> str:
    if not requirement.input_files:
        return "(none)"
    return "\n".join(f"- {f.path} ({f.kind.value})" for f in requirement.input_files)


def render_function_thoughts(functions: Sequence[FunctionThought]) -> str:
    parts = []
    for f in functions:
        parts.append(
            f"FUNCTION_NAME: {f.name}\nFUNCTION_DESCRIPTION: {f.description}\n"
            f"INPUTS: {grammar.format_params(f.inputs)}\nOUTPUTS: {grammar.format_params(f.outputs)}")
    return "\n\n".join(parts)


def knowledge_block(kb_hits: str) -> str:
    return kb_hits.rstrip("\n") + "\n\n" if kb_hits.strip() else ""


def import_line(module_file: str, name: str) -> str:
    return f"from {module_file} import {name}"


# -- code inspection ----------------------------------------------------------------

def _parse_python(code: str, what: str) -> ast.Module:
    try:
        return ast.parse(code)
    except SyntaxError as exc:
        raise GrammarError(f"{what} does not parse: {exc.msg} (line {exc.lineno})", block="fence") from None


def parse_single_function(text: str, name: str) -> str:
    code = grammar.single_python_fence(text)
    tree = _parse_python(code, "function code")
    defs = [n for n in tree.body if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef))]
    if len(defs) != 1:
        raise GrammarError(f"expected exactly one top-level function, found {len(defs)}", block="fence")
    if defs[0].name != name:
        raise GrammarError(f"function is named {defs[0].name!r}, expected {name!r}", block="fence")
    return code


def parse_script(text: str) -> str:
    code = grammar.single_python_fence(text)
    _parse_python(code, "script")
    return code


def split_imports(source: str) -> tuple[list[str], str]:
    """Split top-level import statements from the rest of ``source`` (string level)."""
    lines = source.splitlines()
    imports: list[str] = []
    body: list[str] = []
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("import ") or (line.startswith("from ") and " import " in line):
            stmt = [line]
            if "(" in line and ")" not in line:
                while i + 1 < len(lines) and ")" not in stmt[-1]:
                    i += 1
                    stmt.append(lines[i])
            while stmt[-1].rstrip().endswith("\\") and i + 1 < len(lines):
                i += 1
                stmt.append(lines[i])
            imports.append("\n".join(stmt).rstrip())
        else:
            body.append(line)
        i += 1
    return imports, "\n".join(body).strip("\n")


def function_body(source: str) -> str:
    return split_imports(source)[1]


def hoist_imports(sources: Sequence[str]) -> list[str]:
    seen: dict[str, None] = {}
    for src in sources:
        for imp in split_imports(src)[0]:
            seen.setdefault(imp, None)
    ordered = list(seen)
    return [i for i in ordered if i.startswith("from __future__")] + \
        [i for i in ordered if not i.startswith("from __future__")]


def _join(imports: list[str], parts: list[str]) -> str:
    chunks = (["\n".join(imports)] if imports else []) + [p for p in parts if p.strip()]
    return "\n\n\n".join(chunks) + "\n"


# -- module / project wiring ----------------------------------------------------------

@dataclass(frozen=True)
class ModuleInterface:
    entry_name: str
    params: tuple[str, ...]
    exports: tuple[str, ...]
    calls: tuple[tuple[str, tuple[str, ...], tuple[str, ...]], ...]


def module_interface(module: ModuleThought, sigs: Sequence[FunctionSignature]) -> ModuleInterface:
    produced: list[str] = []
    params: list[str] = []
    calls = []
    for sig in sigs:
        args = tuple(sig.parameter_names)
        for a in args:
            if a not in produced and a not in params:
                params.append(a)
        outs = tuple(n for n, _ in sig.thought.outputs)
        for o in outs:
            if o not in produced:
                produced.append(o)
        calls.append((sig.name, args, outs))
    return ModuleInterface(module.entry_name, tuple(params), tuple(produced), tuple(calls))


def render_entry(module: ModuleThought, iface: ModuleInterface) -> str:
    desc = " ".join(module.description.split())
    lines = [f"def {iface.entry_name}({', '.join(iface.params)}):",
             f"    # entry point for module {module.name}: {desc}"]
    for name, args, outs in iface.calls:
        call = f"{name}({', '.join(args)})"
        if not outs:
            lines.append(f"    {call}")
        else:
            lines.append(f"    {', '.join(outs)} = {call}")
    ret = ", ".join(f'"{e}": {e}' for e in iface.exports)
    lines.append(f"    return {{{ret}}}")
    return "\n".join(lines)


def _rename(text: str, old: str, new: str) -> str:
    return re.sub(rf"(?<![\w.]){re.escape(old)}\b", new, text)


# -- team leader --------------------------------------------------------------------

@dataclass(frozen=True)
class ModulePlan:
    modules: tuple[ModuleThought, ...]
    environment: str


def split_module_thoughts(leader: Agent, requirement: ProjectRequirement, kb_hits: str,
                          catalog: Mapping[str, str]) -> ModulePlan:
    prompt = leader.templates.render(
        "split_modules", requirement=requirement.description, input_files=render_inputs(requirement),
        catalog=render_catalog(catalog), knowledge=knowledge_block(kb_hits))

    def parse(text: str) -> grammar.Block:
        block = grammar.parse_block(text, "team_leader")
        for n, sec in enumerate(block.sections, 1):
            if not is_identifier(sec["MODULE_NAME"]):
                raise GrammarError(f"team_leader section {n}: MODULE_NAME {sec['MODULE_NAME']!r} is not an identifier",
                                   block=f"team_leader section {n}")
        return block

    try:
        block = leader.ask("split_modules", prompt, parse)
    except GrammarError as exc:
        raise DecompositionError(f"team leader plan is malformed: {exc}") from exc
    env = block.header["ENVIRONMENT"]
    if env not in catalog:
        raise DecompositionError(f"team leader chose runtime image {env!r}, which is not in the catalog")
    names = [s["MODULE_NAME"] for s in block.sections]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DecompositionError(f"duplicate module names in plan: {', '.join(dupes)}")
    modules = tuple(
        ModuleThought(HyperThought(s["MODULE_NAME"], env, requirement.workdir), s["MODULE_DESCRIPTION"], i,
                      requirement.id)
        for i, s in enumerate(block.sections))
    return ModulePlan(modules, env)


def plan_to_block(plan: ModulePlan) -> grammar.Block:
    return grammar.Block("team_leader", {"ENVIRONMENT": plan.environment},
                         [{"MODULE_NAME": m.name, "MODULE_DESCRIPTION": m.description} for m in plan.modules])


# -- module leader ------------------------------------------------------------------

def split_function_thoughts(leader: Agent, module: ModuleThought, root: ProjectRequirement) -> list[FunctionThought]:
    prompt = leader.templates.render(
        "split_functions", requirement=root.description, module_name=module.name,
        module_description=module.description, environment=module.hyper.runtime_environment,
        workdir=module.hyper.work_directory)
    address = (module.index,)

    def parse(text: str) -> list[FunctionThought]:
        block = grammar.parse_block(text, "module_leader")
        out = []
        for n, sec in enumerate(block.sections, 1):
            where = f"module_leader section {n}"
            if not is_identifier(sec["FUNCTION_NAME"]):
                raise GrammarError(f"{where}: FUNCTION_NAME {sec['FUNCTION_NAME']!r} is not an identifier", block=where)
            out.append(FunctionThought(
                sec["FUNCTION_NAME"], sec["FUNCTION_DESCRIPTION"],
                grammar.parse_params(sec["INPUTS"], f"{where} INPUTS"),
                grammar.parse_params(sec["OUTPUTS"], f"{where} OUTPUTS"), address))
        return out

    try:
        functions = leader.ask("split_functions", prompt, parse, address=address)
    except GrammarError as exc:
        raise DecompositionError(f"module {module.name}: function split is malformed: {exc}") from exc
    names = [f.name for f in functions]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DecompositionError(f"module {module.name}: duplicate function names {', '.join(dupes)}")
    return functions


def functions_to_block(functions: Sequence[FunctionThought]) -> grammar.Block:
    return grammar.Block("module_leader", {}, [
        {"FUNCTION_NAME": f.name, "FUNCTION_DESCRIPTION": f.description,
         "INPUTS": grammar.format_params(f.inputs), "OUTPUTS": grammar.format_params(f.outputs)}
        for f in functions])


# -- function coordinator -------------------------------------------------------------

def refine_function_thoughts(coordinator: Agent, functions: Sequence[FunctionThought], module: ModuleThought,
                             root: ProjectRequirement) -> list[FunctionSignature]:
    if not functions:
        raise DecompositionError(f"module {module.name}: nothing to refine")
    if any(f.parent != functions[0].parent for f in functions):
        raise DecompositionError("refine_function_thoughts needs functions of a single module")
    prompt = coordinator.templates.render(
        "refine_functions", requirement=root.description, module_name=module.name,
        module_description=module.description, functions=render_function_thoughts(functions))

    def parse(text: str) -> list[FunctionSignature]:
        block = grammar.parse_block(text, "function_coordinator")
        if len(block.sections) != len(functions):
            raise GrammarError(f"function_coordinator block has {len(block.sections)} signatures, "
                               f"expected {len(functions)}", block="function_coordinator")
        out = []
        for n, (sec, thought) in enumerate(zip(block.sections, functions), 1):
            where = f"function_coordinator section {n}"
            if sec["FUNCTION_NAME"] != thought.name:
                raise GrammarError(f"{where}: expected function {thought.name!r}, got {sec['FUNCTION_NAME']!r}",
                                   block=where)
            try:
                out.append(FunctionSignature(thought, sec["SIGNATURE"], sec["DOCSTRING"]))
            except ValidationError as exc:
                raise GrammarError(f"{where}: {exc}", block=where) from None
        return out

    try:
        return coordinator.ask("refine_functions", prompt, parse, address=(module.index,))
    except GrammarError as exc:
        raise DecompositionError(f"module {module.name}: signatures are malformed: {exc}") from exc


def signatures_to_block(sigs: Sequence[FunctionSignature]) -> grammar.Block:
    return grammar.Block("function_coordinator", {}, [
        {"FUNCTION_NAME": s.name, "SIGNATURE": s.signature_text, "DOCSTRING": s.docstring} for s in sigs])


# -- development group ----------------------------------------------------------------

def draft_function(coder: Agent, sig: FunctionSignature, root: ProjectRequirement, module: ModuleThought,
                   kb_hits: str = "", *, address: Address) -> CodeArtifact:
    prompt = coder.templates.render(
        "draft_function", requirement=root.description, module_name=module.name,
        module_description=module.description, signature=sig.signature_text, docstring=sig.docstring,
        knowledge=knowledge_block(kb_hits))
    try:
        code = coder.ask("draft_function", prompt, lambda t: parse_single_function(t, sig.name), address=address)
    except GrammarError as exc:
        raise FunctionDraftError(f"{sig.name}: {exc}") from exc
    return CodeArtifact(Level.FUNCTION, code, address, Validation.UNTESTED, attempts=1)


def draft_tests(tester: Agent, artifact: CodeArtifact, sig: FunctionSignature, root: ProjectRequirement,
                module: ModuleThought) -> str:
    if artifact.validation is not Validation.UNTESTED:
        raise FunctionDraftError(f"{sig.name}: tests are drafted against the untested first version only")
    prompt = tester.templates.render(
        "draft_tests", requirement=root.description, module_name=module.name,
        module_description=module.description, signature=sig.signature_text, docstring=sig.docstring,
        function_code=artifact.source.rstrip("\n"), import_line=import_line(sig.name, sig.name))
    try:
        return tester.ask("draft_tests", prompt, parse_script, address=artifact.origin)
    except GrammarError as exc:
        raise FunctionDraftError(f"{sig.name}: test draft malformed: {exc}") from exc


@dataclass(frozen=True)
class ReviewOutcome:
    source: str
    revised: bool
    note: str | None = None


def _parse_review(text: str) -> tuple[bool, str | None]:
    block = grammar.parse_block(text, "coder")
    verdict = block.header["VERDICT"].lower()
    if verdict == "no_changes":
        return False, None
    if verdict == "revised":
        return True, parse_script(text)
    raise GrammarError(f"coder header: unknown VERDICT {verdict!r}", block="coder header")


def _review(coder: Agent, stage: str, prompt: str, test_source: str, address: Address) -> ReviewOutcome:
    try:
        revised, code = coder.ask(stage, prompt, _parse_review, address=address, reprompt=False)
    except GrammarError as exc:
        return ReviewOutcome(test_source, False, f"review skipped, reply unusable: {exc}")
    return ReviewOutcome(code, True) if revised else ReviewOutcome(test_source, False)


def review_tests(coder: Agent, test_source: str, artifact: CodeArtifact, sig: FunctionSignature) -> ReviewOutcome:
    """Pair programming: the coder audits the tester's script, chiefly for missing imports."""
    prompt = coder.templates.render(
        "review_tests", function_code=artifact.source.rstrip("\n"), test_code=test_source.rstrip("\n"),
        import_line=import_line(sig.name, sig.name))
    return _review(coder, "review_tests", prompt, test_source, artifact.origin)


def fix_tests(coder: Agent, test_source: str, artifact: CodeArtifact, sig: FunctionSignature,
              error_report: str) -> ReviewOutcome:
    prompt = coder.templates.render(
        "fix_tests", function_code=artifact.source.rstrip("\n"), test_code=test_source.rstrip("\n"),
        error_report=error_report, import_line=import_line(sig.name, sig.name))
    return _review(coder, "fix_tests", prompt, test_source, artifact.origin)


def regenerate_function(coder: Agent, sig: FunctionSignature, previous: CodeArtifact, error_report: str, *,
                        pool: ThoughtPool, max_function_retries: int, root: ProjectRequirement,
                        module: ModuleThought, kb_hits: str = "") -> CodeArtifact:
    if previous.validation is not Validation.FAILED:
        raise RetryBudgetError(f"{sig.name}: only failed artifacts are regenerated")
    if previous.attempts > max_function_retries:
        raise RetryBudgetError(
            f"{sig.name}: {previous.attempts} attempts used, budget is {1 + max_function_retries}")
    rec = pool.latest(previous.origin, Kind.FUNCTION_CODE)
    previous_code = rec.payload["source"] if rec is not None else previous.source
    prompt = coder.templates.render(
        "regenerate_function", requirement=root.description, module_name=module.name,
        module_description=module.description, signature=sig.signature_text, docstring=sig.docstring,
        previous_code=previous_code.rstrip("\n"), error_report=error_report, knowledge=knowledge_block(kb_hits))
    try:
        code = coder.ask("regenerate_function", prompt, lambda t: parse_single_function(t, sig.name),
                         address=previous.origin)
    except GrammarError as exc:
        raise FunctionDraftError(f"{sig.name}: regeneration malformed: {exc}") from exc
    return CodeArtifact(Level.FUNCTION, code, previous.origin, Validation.UNTESTED, previous.attempts + 1)


# -- backward flow: assembly ----------------------------------------------------------

_ASSEMBLABLE = (Validation.PASSED, Validation.UNVALIDATED_EXHAUSTED)


def deterministic_module_source(artifacts: Sequence[CodeArtifact], module: ModuleThought,
                                sigs: Sequence[FunctionSignature]) -> str:
    imports = hoist_imports([a.source for a in artifacts])
    bodies = [function_body(a.source) for a in artifacts]
    return _join(imports, bodies + [render_entry(module, module_interface(module, sigs))])


def assemble_module(coordinator: Agent, artifacts: Sequence[CodeArtifact], module: ModuleThought,
                    sigs: Sequence[FunctionSignature], mode: AssemblyMode, root: ProjectRequirement
                    ) -> tuple[CodeArtifact, list[str]]:
    if not artifacts:
        raise AssemblyError(f"module {module.name}: no function artifacts to assemble")
    bad = [a.origin for a in artifacts if a.validation not in _ASSEMBLABLE]
    if bad:
        raise AssemblyError(f"module {module.name}: artifacts at {bad} were never validated")
    notes: list[str] = []
    address = (module.index,)
    source = None
    if AssemblyMode(mode) is AssemblyMode.LLM:
        bodies = [function_body(a.source) for a in artifacts]

        def parse(text: str) -> str:
            code = parse_script(text)
            missing = [s.name for s, b in zip(sigs, bodies) if b not in code]
            if missing:
                raise GrammarError(f"module script alters or drops functions: {', '.join(missing)}", block="fence")
            if f"def {module.entry_name}(" not in code:
                raise GrammarError(f"module script lacks entry function {module.entry_name}", block="fence")
            return code

        prompt = coordinator.templates.render(
            "assemble_module", requirement=root.description, module_name=module.name,
            module_description=module.description, entry_name=module.entry_name,
            function_codes="\n\n".join(grammar.fence(a.source) for a in artifacts))
        try:
            source = coordinator.ask("assemble_module", prompt, parse, address=address)
        except GrammarError as exc:
            notes.append(f"module {module.name}: llm assembly unusable ({exc}); fell back to deterministic")
    if source is None:
        source = deterministic_module_source(artifacts, module, sigs)
    return CodeArtifact(Level.MODULE, source, address, Validation.UNTESTED, attempts=1), notes


def draft_module_tests(leader: Agent, module_artifact: CodeArtifact, module: ModuleThought,
                       root: ProjectRequirement) -> str:
    prompt = leader.templates.render(
        "module_tests", requirement=root.description, module_name=module.name,
        module_description=module.description, module_code=module_artifact.source.rstrip("\n"),
        import_line=import_line(module.snake_name, module.entry_name), entry_name=module.entry_name)
    try:
        return leader.ask("draft_module_tests", prompt, parse_script, address=(module.index,))
    except GrammarError as exc:
        raise FunctionDraftError(f"module {module.name}: module test draft malformed: {exc}") from exc


def correct_module(coordinator: Agent, module_artifact: CodeArtifact, error_report: str, *, rounds_used: int,
                   budget: int, module: ModuleThought, root: ProjectRequirement) -> CodeArtifact:
    if rounds_used >= budget:
        raise RetryBudgetError(f"module {module.name}: correction budget of {budget} exhausted")

    def parse(text: str) -> str:
        code = parse_script(text)
        if f"def {module.entry_name}(" not in code:
            raise GrammarError(f"corrected module lacks entry function {module.entry_name}", block="fence")
        return code

    prompt = coordinator.templates.render(
        "correct_module", requirement=root.description, module_name=module.name,
        module_description=module.description, module_code=module_artifact.source.rstrip("\n"),
        error_report=error_report, entry_name=module.entry_name)
    try:
        code = coordinator.ask("correct_module", prompt, parse, address=(module.index,))
    except GrammarError as exc:
        raise AssemblyError(f"module {module.name}: correction malformed: {exc}") from exc
    return CodeArtifact(Level.MODULE, code, module_artifact.origin, Validation.UNTESTED,
                        module_artifact.attempts + 1)


def deterministic_project_source(module_artifacts: Sequence[CodeArtifact], modules: Sequence[ModuleThought],
                                 module_sigs: Sequence[Sequence[FunctionSignature]]) -> tuple[str, list[str]]:
    notes: list[str] = []
    owners: dict[str, list[int]] = {}
    for i, (m, sigs) in enumerate(zip(modules, module_sigs)):
        for name in [s.name for s in sigs] + [m.entry_name]:
            owners.setdefault(name, []).append(i)
    collisions = {n: idx for n, idx in owners.items() if len(idx) > 1}
    rests, ifaces = [], []
    for i, (art, m, sigs) in enumerate(zip(module_artifacts, modules, module_sigs)):
        rest = split_imports(art.source)[1]
        iface = module_interface(m, sigs)
        for name, idx in sorted(collisions.items()):
            if i in idx:
                rest = _rename(rest, name, f"{name}_{i}")
                if iface.entry_name == name:
                    iface = ModuleInterface(f"{name}_{i}", iface.params, iface.exports, iface.calls)
        rests.append(f"# --- module {i}: {m.name} ---\n{rest}")
        ifaces.append(iface)
    for name, idx in sorted(collisions.items()):
        notes.append(f"name collision: {name!r} defined in modules {idx}; renamed with module index suffix")

    produced: set[str] = set()
    main = ["def main():", "    env = {}"]
    for m, iface in zip(modules, ifaces):
        for p in iface.params:
            if p not in produced:
                notes.append(f"module {m.name}: input {p!r} is not produced by an earlier module")
        kwargs = ", ".join(f'{p}=env["{p}"]' for p in iface.params)
        main.append(f"    env.update({iface.entry_name}({kwargs}))")
        produced.update(iface.exports)
    main.append("    return env")
    guard = 'if __name__ == "__main__":\n    main()'
    imports = hoist_imports([a.source for a in module_artifacts])
    return _join(imports, rests + ["\n".join(main), guard]), notes


def assemble_project(leader: Agent, module_artifacts: Sequence[CodeArtifact], modules: Sequence[ModuleThought],
                     module_sigs: Sequence[Sequence[FunctionSignature]], mode: AssemblyMode,
                     root: ProjectRequirement) -> tuple[CodeArtifact, list[str]]:
    if not module_artifacts:
        raise AssemblyError("project assembly needs at least one module")
    notes: list[str] = []
    source = None
    if AssemblyMode(mode) is AssemblyMode.LLM:
        rests = [split_imports(a.source)[1] for a in module_artifacts]

        def parse(text: str) -> str:
            code = parse_script(text)
            missing = [m.name for m, r in zip(modules, rests) if r not in code]
            if missing:
                raise GrammarError(f"project script alters or drops modules: {', '.join(missing)}", block="fence")
            if "def main(" not in code:
                raise GrammarError("project script lacks main()", block="fence")
            return code

        plan = "\n".join(f"{i}. {m.name}: {m.description}" for i, m in enumerate(modules))
        prompt = leader.templates.render(
            "assemble_project", requirement=root.description, plan=plan,
            module_codes="\n\n".join(grammar.fence(a.source) for a in module_artifacts))
        try:
            source = leader.ask("assemble_project", prompt, parse, address=ROOT)
        except GrammarError as exc:
            notes.append(f"llm project assembly unusable ({exc}); fell back to deterministic")
    if source is None:
        source, wiring_notes = deterministic_project_source(module_artifacts, modules, module_sigs)
        notes.extend(wiring_notes)
    return CodeArtifact(Level.PROJECT, source, ROOT, Validation.UNTESTED, attempts=1), notes
