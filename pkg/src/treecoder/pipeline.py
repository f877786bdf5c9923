"""Orchestrator: forward decomposition, development-group loops, backward assembly.

Stages run with barriers in between (all modules decompose, then all functions
are implemented, and so on) so that the run state only ever moves forward.
Within a stage, module branches and leaf functions run on a thread pool; all
cross-branch traffic goes through the thought pool.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence, TypeVar

from . import agents, grammar
from .agents import Agent
from .domain import (
    ROOT,
    Address,
    CodeArtifact,
    DecompositionTree,
    FunctionSignature,
    Level,
    ModuleThought,
    ProjectRequirement,
    RunConfig,
    Validation,
    format_address,
)
from .errors import (
    AssemblyError,
    ConfigurationError,
    FunctionDraftError,
    PriceTableError,
    SandboxEnvironmentError,
    TreecoderError,
)
from .knowledge import KnowledgeIndex, format_hits, retrieve, seed_index
from .llm import Gateway, ledger_report
from .pool import Kind, LogicalClock, ThoughtPool
from .sandbox import Sandbox, SandboxSpec, failure_origin, load_catalog
from .templates import TemplateSet

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class Stage(str, enum.Enum):
    PLANNING = "planning"
    DECOMPOSING = "decomposing"
    IMPLEMENTING = "implementing"
    ASSEMBLING_MODULES = "assembling_modules"
    VALIDATING_MODULES = "validating_modules"
    ASSEMBLING_PROJECT = "assembling_project"
    DONE = "done"
    FAILED = "failed"


_ORDER = [s for s in Stage if s is not Stage.FAILED]


@dataclass
class RunState:
    requirement: ProjectRequirement
    tree: DecompositionTree
    pool: ThoughtPool
    stage: Stage | None = None
    history: list[str] = field(default_factory=list)
    artifacts: dict[Address, CodeArtifact] = field(default_factory=dict)
    error: str | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def advance(self, stage: Stage) -> None:
        if self.stage is Stage.FAILED or self.stage is Stage.DONE:
            raise RuntimeError(f"run already finished in stage {self.stage.value}")
        if stage is not Stage.FAILED:
            current = -1 if self.stage is None else _ORDER.index(self.stage)
            if _ORDER.index(stage) <= current:
                raise RuntimeError(f"stage {stage.value} would revisit or go backwards from {self.stage.value}")
        if stage is Stage.DONE and ROOT not in self.artifacts:
            raise RuntimeError("cannot finish without a project artifact")
        self.stage = stage
        self.history.append(stage.value)

    def set_artifact(self, artifact: CodeArtifact) -> None:
        with self._lock:
            self.artifacts[artifact.origin] = artifact


@dataclass
class RunResult:
    project: CodeArtifact | None
    report: dict[str, Any]
    state: RunState

    @property
    def ok(self) -> bool:
        return self.state.stage is Stage.DONE


class Pipeline:
    def __init__(self, config: RunConfig, run_dir: str | Path, *, gateway: Gateway | None = None,
                 sandbox: Sandbox | None = None, templates: TemplateSet | None = None,
                 catalog: Mapping[str, str] | None = None, sandbox_backend: str = "subprocess",
                 knowledge: Mapping[str, KnowledgeIndex] | None = None,
                 price_table: Mapping[str, Mapping[str, float]] | None = None,
                 input_root: str | Path | None = None):
        self.config = config
        self.run_dir = Path(run_dir)
        self.gateway = gateway or Gateway()
        self.sandbox = sandbox or Sandbox(max_concurrent=config.module_parallelism)
        self.templates = templates or TemplateSet()
        self.catalog = dict(catalog) if catalog is not None else load_catalog()
        self.sandbox_backend = sandbox_backend
        self.price_table = price_table
        self.input_root = Path(input_root) if input_root else Path.cwd()
        if knowledge is None and config.use_knowledge_base:
            knowledge = {"team_leader": seed_index("team_leader"), "coder": seed_index("coder")}
        self.knowledge = dict(knowledge or {}) if config.use_knowledge_base else {}
        self.workers = 1 if config.deterministic else config.module_parallelism
        self.state: RunState | None = None
        self.spec: SandboxSpec | None = None
        self.inputs: list[tuple[str, bytes]] = []
        self.notes: list[str] = []

    # -- helpers --------------------------------------------------------------------

    @property
    def pool(self) -> ThoughtPool:
        return self.state.pool

    def _agent(self, role: str) -> Agent:
        backend = self.config.decision_model if agents.ROLE_CATEGORY[role] == "decision_maker" \
            else self.config.implementer_model
        return Agent(role, self.gateway, backend, self.templates)

    def _flush(self, agent: Agent) -> None:
        for r in agent.reprompts:
            self._note(tuple(r["address"]), agent.role, str(r["stage"]),
                       f"{agent.role}/{r['stage']} needed a reprompt: {r['error']}")
        agent.reprompts.clear()

    def _note(self, address: Address, author: str, stage: str, text: str) -> None:
        self.pool.append(author=author, stage=stage, address=address, kind=Kind.NOTE, payload=text)
        self.notes.append(f"[{format_address(address)}] {text}")

    def _map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        items = list(items)
        if self.workers == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as ex:
            return list(ex.map(fn, items))

    def _root(self) -> ProjectRequirement:
        return ProjectRequirement.from_dict(self.pool.latest(ROOT, Kind.REQUIREMENT).payload)

    def _module(self, index: int) -> ModuleThought:
        return ModuleThought.from_dict(self.pool.latest((index,), Kind.MODULE_PLAN).payload)

    def _hyper(self, address: Address) -> dict[str, str]:
        return self.state.tree.modules[address[0]].hyper.to_dict()

    def _kb(self, role: str, query: str) -> str:
        index = self.knowledge.get(role)
        if index is None:
            return ""
        return format_hits(retrieve(index, query, self.config.knowledge_k))

    def _append_code(self, artifact: CodeArtifact, kind: Kind, author: str, stage: str) -> None:
        payload = artifact.to_dict()
        if artifact.origin:
            payload["hyper"] = self._hyper(artifact.origin)
        self.pool.append(author=author, stage=stage, address=artifact.origin, kind=kind, payload=payload)
        self.state.set_artifact(artifact)

    def _log_run(self, name: str, res) -> None:
        path = self.run_dir / "logs" / f"{name}.log"
        path.parent.mkdir(parents=True, exist_ok=True)
        produced = "\n".join(f"{p} {h}" for p, h in res.produced_files) or "(none)"
        path.write_text(f"{res.report()}\nproduced files:\n{produced}\n", encoding="utf-8")

    def _load_inputs(self, requirement: ProjectRequirement) -> list[tuple[str, bytes]]:
        out = []
        for f in requirement.input_files:
            src = self.input_root / f.path
            try:
                data = src.read_bytes()
            except OSError:
                raise ConfigurationError(f"input file not found: {src}") from None
            dst = self.run_dir / "inputs" / f.path
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(data)
            out.append((f.path, data))
        return out

    # -- stages ---------------------------------------------------------------------

    def run_project(self, requirement: ProjectRequirement, *, stop_after: Stage | None = None) -> RunResult:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        tree = DecompositionTree(requirement)
        clock = LogicalClock() if self.config.deterministic else None
        pool = ThoughtPool(tree, self.run_dir / "pool.jsonl", **({"clock": clock} if clock else {}))
        self.state = state = RunState(requirement, tree, pool)
        try:
            self.inputs = self._load_inputs(requirement)
            state.advance(Stage.PLANNING)
            pool.append(author="user", stage="planning", address=ROOT, kind=Kind.REQUIREMENT,
                        payload=requirement.to_dict())
            plan = self._plan()
            if stop_after is Stage.PLANNING:
                return self._finish(None)
            self.spec = SandboxSpec(plan.environment, self.run_dir / "outputs", self.config.sandbox_timeout,
                                    self.sandbox_backend, self.catalog)

            state.advance(Stage.DECOMPOSING)
            self._map(self._decompose, range(len(tree.modules)))
            self._write_decomposition()

            state.advance(Stage.IMPLEMENTING)
            leaves = tree.leaf_addresses()
            self._map(lambda a: self.implement_function(tree.signatures[a[0]][a[1]], a), leaves)

            state.advance(Stage.ASSEMBLING_MODULES)
            module_arts = self._map(self._assemble_module, range(len(tree.modules)))

            state.advance(Stage.VALIDATING_MODULES)
            module_arts = self._map(lambda i: self.validate_module(module_arts[i], tree.modules[i]),
                                    range(len(tree.modules)))

            state.advance(Stage.ASSEMBLING_PROJECT)
            project = self._assemble_project(module_arts)
            state.advance(Stage.DONE)
            return self._finish(project)
        except TreecoderError as exc:
            logger.error("run %s failed: %s", requirement.id, exc)
            state.error = f"{type(exc).__name__}: {exc}"
            state.advance(Stage.FAILED)
            return self._finish(None)

    def _plan(self) -> agents.ModulePlan:
        requirement = self._root()
        leader = self._agent("team_leader")
        try:
            plan = agents.split_module_thoughts(leader, requirement, self._kb("team_leader", requirement.description),
                                                self.catalog)
        finally:
            self._flush(leader)
        self.state.tree.add_modules(list(plan.modules))
        for m in plan.modules:
            self.pool.append(author="team_leader", stage="planning", address=(m.index,), kind=Kind.MODULE_PLAN,
                             payload=m.to_dict())
        (self.run_dir / "plan.txt").write_text(grammar.serialize_block(agents.plan_to_block(plan)), encoding="utf-8")
        return plan

    def _decompose(self, index: int) -> None:
        tree = self.state.tree
        module, root = self._module(index), self._root()
        leader = self._agent("module_leader")
        try:
            functions = agents.split_function_thoughts(leader, module, root)
        finally:
            self._flush(leader)
        tree.add_functions(index, functions)
        for j, f in enumerate(functions):
            self.pool.append(author="module_leader", stage="decomposing", address=(index, j),
                             kind=Kind.FUNCTION_THOUGHT, payload={**f.to_dict(), "hyper": self._hyper((index,))})
        coordinator = self._agent("function_coordinator")
        try:
            sigs = agents.refine_function_thoughts(coordinator, functions, module, root)
        finally:
            self._flush(coordinator)
        tree.add_signatures(index, sigs)
        for j, s in enumerate(sigs):
            self.pool.append(author="function_coordinator", stage="decomposing", address=(index, j),
                             kind=Kind.SIGNATURE, payload={**s.to_dict(), "hyper": self._hyper((index,))})

    def _write_decomposition(self) -> None:
        tree = self.state.tree
        funcs, sigs = [], []
        for i, m in enumerate(tree.modules):
            funcs.append(f"# module {i}: {m.name}\n"
                         + grammar.serialize_block(agents.functions_to_block(tree.functions[i])))
            sigs.append(f"# module {i}: {m.name}\n"
                        + grammar.serialize_block(agents.signatures_to_block(tree.signatures[i])))
        (self.run_dir / "functions.txt").write_text("\n".join(funcs), encoding="utf-8")
        (self.run_dir / "signatures.txt").write_text("\n".join(sigs), encoding="utf-8")

    def _sandbox_spec(self) -> SandboxSpec:
        if self.spec is None:
            image = next(iter(self.catalog))
            self.spec = SandboxSpec(image, self.run_dir / "outputs", self.config.sandbox_timeout,
                                    self.sandbox_backend, self.catalog)
        return self.spec

    def implement_function(self, sig: FunctionSignature, address: Address) -> CodeArtifact:
        """Draft, test, pair-review, then validate with up to ``max_function_retries`` regenerations."""
        cfg, spec = self.config, self._sandbox_spec()
        module, root = self._module(address[0]), self._root()
        coder, tester = self._agent("coder"), self._agent("tester")
        kb = self._kb("coder", f"{sig.signature_text} {sig.docstring} {sig.thought.description}")
        tag = format_address(address)
        try:
            art = agents.draft_function(coder, sig, root, module, kb, address=address)
            self._append_code(art, Kind.FUNCTION_CODE, "coder", "draft_function")
            tests = agents.draft_tests(tester, art, sig, root, module)
            self.pool.append(author="tester", stage="draft_tests", address=address, kind=Kind.TEST_CODE,
                             payload=tests)
            if cfg.pair_programming:
                review = agents.review_tests(coder, tests, art, sig)
                self._after_review(review, address, "review_tests")
                tests = review.source

            test_file, code_file = f"test_{sig.name}.py", f"{sig.name}.py"
            test_fixes, run, pending = 0, 0, True
            while True:
                if pending:
                    run += 1
                    vr = self.sandbox.run_validation(spec, art.source, tests, self.inputs, code_name=sig.name,
                                                     stage="function_validation", name=f"functions/{tag}/run-{run}")
                    self._log_run(f"functions/{tag}/run-{run}", vr.result)
                    if vr.passed:
                        art = art.with_status(Validation.PASSED)
                        self._append_code(art, Kind.FUNCTION_CODE, "sandbox", "validation")
                        break
                    report = vr.result.report()
                    self.pool.append(author="sandbox", stage="validation", address=address,
                                     kind=Kind.ERROR_REPORT, payload=report)
                    blame = failure_origin(vr.result, test_file, code_file)
                    if blame == "test" and cfg.pair_programming and test_fixes < cfg.test_correction_budget:
                        test_fixes += 1
                        fix = agents.fix_tests(coder, tests, art, sig, report)
                        self._after_review(fix, address, "fix_tests")
                        if fix.revised:
                            tests = fix.source
                            continue
                art = art.with_status(Validation.FAILED)
                if art.attempts >= cfg.max_attempts:
                    art = art.with_status(Validation.UNVALIDATED_EXHAUSTED)
                    self._append_code(art, Kind.FUNCTION_CODE, "sandbox", "validation")
                    self._note(address, "pipeline", "implementing",
                               f"{sig.name}: still failing after {art.attempts} attempt(s); kept unvalidated")
                    break
                self._append_code(art, Kind.FUNCTION_CODE, "sandbox", "validation")
                try:
                    art = agents.regenerate_function(
                        coder, sig, art, report, pool=self.pool, max_function_retries=cfg.max_function_retries,
                        root=root, module=module, kb_hits=kb)
                    pending = True
                except FunctionDraftError as exc:
                    art = CodeArtifact(Level.FUNCTION, art.source, address, Validation.UNTESTED, art.attempts + 1)
                    self._note(address, "coder", "regenerate_function", f"regeneration unusable, attempt spent: {exc}")
                    pending = False
                self._append_code(art, Kind.FUNCTION_CODE, "coder", "regenerate_function")
        finally:
            self._flush(coder)
            self._flush(tester)
        return art

    def _after_review(self, review: agents.ReviewOutcome, address: Address, stage: str) -> None:
        if review.note:
            self._note(address, "coder", stage, review.note)
        if review.revised:
            self.pool.append(author="coder", stage=stage, address=address, kind=Kind.TEST_CODE, payload=review.source)

    def _assemble_module(self, index: int) -> CodeArtifact:
        tree = self.state.tree
        module, root = self._module(index), self._root()
        arts = [self.state.artifacts[(index, j)] for j in range(len(tree.functions[index]))]
        coordinator = self._agent("function_coordinator")
        try:
            art, notes = agents.assemble_module(coordinator, arts, module, tree.signatures[index],
                                                self.config.assembly_mode, root)
        finally:
            self._flush(coordinator)
        for n in notes:
            self._note((index,), "function_coordinator", "assembling_modules", n)
        self._append_code(art, Kind.MODULE_CODE, "function_coordinator", "assembling_modules")
        return art

    def validate_module(self, artifact: CodeArtifact, module: ModuleThought) -> CodeArtifact:
        """Single-shot module validation with a bounded correction loop."""
        spec, root = self._sandbox_spec(), self._root()
        index = module.index
        leader, coordinator = self._agent("module_leader"), self._agent("function_coordinator")
        art = artifact
        try:
            try:
                tests = agents.draft_module_tests(leader, art, module, root)
            except FunctionDraftError as exc:
                self._note((index,), "module_leader", "validating_modules", f"no usable module test: {exc}")
                art = art.with_status(Validation.UNVALIDATED_EXHAUSTED)
                self._append_code(art, Kind.MODULE_CODE, "module_leader", "validating_modules")
                return art
            self.pool.append(author="module_leader", stage="validating_modules", address=(index,),
                             kind=Kind.TEST_CODE, payload=tests)
            rounds, run, pending = 0, 0, True
            while True:
                if pending:
                    run += 1
                    name = f"modules/{index}/run-{run}"
                    vr = self.sandbox.run_validation(spec, art.source, tests, self.inputs, code_name=module.snake_name,
                                                     stage="module_validation", name=name)
                    self._log_run(name, vr.result)
                    if vr.passed:
                        art = art.with_status(Validation.PASSED)
                        break
                    report = vr.result.report()
                    self.pool.append(author="sandbox", stage="validating_modules", address=(index,),
                                     kind=Kind.ERROR_REPORT, payload=report)
                if rounds >= self.config.module_correction_budget:
                    art = art.with_status(Validation.UNVALIDATED_EXHAUSTED)
                    self._note((index,), "module_leader", "validating_modules",
                               f"module {module.name} still failing after {rounds} correction(s); kept unvalidated")
                    break
                try:
                    art = agents.correct_module(coordinator, art.with_status(Validation.FAILED), report,
                                                rounds_used=rounds, budget=self.config.module_correction_budget,
                                                module=module, root=root)
                    self._append_code(art, Kind.MODULE_CODE, "function_coordinator", "correct_module")
                    pending = True
                except AssemblyError as exc:
                    self._note((index,), "function_coordinator", "correct_module", f"correction round spent: {exc}")
                    pending = False
                rounds += 1
            self._append_code(art, Kind.MODULE_CODE, "module_leader", "validating_modules")
            return art
        finally:
            self._flush(leader)
            self._flush(coordinator)

    def _assemble_project(self, module_arts: Sequence[CodeArtifact]) -> CodeArtifact:
        tree = self.state.tree
        leader = self._agent("team_leader")
        try:
            project, notes = agents.assemble_project(
                leader, module_arts, tree.modules, [tree.signatures[i] for i in range(len(tree.modules))],
                self.config.assembly_mode, self._root())
        finally:
            self._flush(leader)
        for n in notes:
            self._note(ROOT, "team_leader", "assembling_project", n)
        self._append_code(project, Kind.PROJECT_CODE, "team_leader", "assembling_project")
        out = self.run_dir / "project"
        out.mkdir(parents=True, exist_ok=True)
        (out / "main.py").write_text(project.source, encoding="utf-8")
        for m, art in zip(tree.modules, module_arts):
            (out / "modules").mkdir(exist_ok=True)
            (out / "modules" / f"{m.snake_name}.py").write_text(art.source, encoding="utf-8")
        return project

    # -- summary --------------------------------------------------------------------

    def _write_artifacts(self) -> None:
        arts = self.state.artifacts
        ordered = sorted(arts.items(), key=lambda kv: (-len(kv[0]), kv[0]))
        chunks = []
        for addr, art in ordered:
            block = grammar.Block("artifact", {"ADDRESS": format_address(addr), "LEVEL": art.level.value,
                                               "VALIDATION": art.validation.value, "ATTEMPTS": str(art.attempts)})
            chunks.append(grammar.serialize_block(block) + grammar.fence(art.source) + "\n")
        (self.run_dir / "artifacts.txt").write_text("\n".join(chunks), encoding="utf-8")
        code = self.run_dir / "code"
        for addr, art in ordered:
            if art.level is Level.FUNCTION:
                name = self.state.tree.functions[addr[0]][addr[1]].name
                path = code / "functions" / f"{format_address(addr)}_{name}.py"
            elif art.level is Level.MODULE:
                path = code / "modules" / f"{self.state.tree.modules[addr[0]].snake_name}.py"
            else:
                path = code / "project.py"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(art.source, encoding="utf-8")

    def summary(self) -> dict[str, Any]:
        state = self.state
        tree = state.tree
        arts = state.artifacts

        def status(addr):
            a = arts.get(addr)
            return {"validation": a.validation.value, "attempts": a.attempts} if a else {"validation": None}

        modules = []
        for i, m in enumerate(tree.modules):
            modules.append({
                "address": format_address((i,)), "name": m.name, **status((i,)),
                "functions": [{"address": format_address((i, j)), "name": f.name, **status((i, j))}
                              for j, f in enumerate(tree.functions.get(i, []))],
            })
        try:
            cost = ledger_report(self.gateway.ledger, self.price_table)
        except PriceTableError as exc:
            cost = {"error": str(exc)}
        calls: dict[str, int] = {}
        for t in self.gateway.transcript:
            calls[t["role"]] = calls.get(t["role"], 0) + 1
        return {
            "project_id": state.requirement.id,
            "stage": state.stage.value if state.stage else None,
            "stages": list(state.history),
            "error": state.error,
            "environment": self.spec.image if self.spec else None,
            "counts": {"modules": len(tree.modules), "functions": len(tree.leaf_addresses())},
            "modules": modules,
            "flagged": sorted(format_address(a) for a, art in arts.items()
                              if art.validation is Validation.UNVALIDATED_EXHAUSTED),
            "notes": list(self.notes),
            "sandbox_invocations": dict(sorted(self.sandbox.counters.items())),
            "llm_calls": dict(sorted(calls.items())),
            "cost": cost,
            "pool_records": len(state.pool),
        }

    def _finish(self, project: CodeArtifact | None) -> RunResult:
        if self.state.artifacts:
            self._write_artifacts()
        report = self.summary()
        (self.run_dir / "run.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logs = self.run_dir / "logs"
        logs.mkdir(exist_ok=True)
        (logs / "transcript.jsonl").write_text(
            "".join(json.dumps(t, sort_keys=True, ensure_ascii=False) + "\n" for t in self.gateway.transcript),
            encoding="utf-8")
        return RunResult(project, report, self.state)


def run_project(requirement: ProjectRequirement, config: RunConfig, run_dir: str | Path, **kwargs) -> RunResult:
    return Pipeline(config, run_dir, **kwargs).run_project(requirement)
