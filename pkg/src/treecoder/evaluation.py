"""Benchmark harness: fixtures, output comparison and accuracy reporting.

A fixture directory looks like::

    manifest.txt        id, difficulty, optional compare/threshold, description block
    inputs/             files staged into every sandbox run
    solution/main.py    sample solution
    expected/           expected output files, and/or
    test/compare.py     custom comparator run with generated/ and expected/ staged

The generated project and the sample solution each run in their own fresh
sandbox on the same inputs; their produced files are the outputs compared.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import logging
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .domain import CodeArtifact, InputFile, InputKind, ProjectRequirement, RunConfig
from .errors import ComparisonError, ConfigurationError, FixtureError, PriceTableError, TreecoderError
from .llm import UsageLedger, ledger_report
from .manifest import parse_manifest
from .sandbox import ExecutionResult, Sandbox, SandboxSpec

logger = logging.getLogger(__name__)

DIFFICULTIES = ("simple", "medium", "hard")
DEFAULT_THRESHOLD = 1.0
IMAGE_SUFFIXES = frozenset({".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm", ".pgm", ".pbm"})
FIXTURE_KEYS = ("id", "difficulty", "compare", "threshold", "environment_hint")


class CompareMode(str, enum.Enum):
    EXACT = "exact"
    IMAGE_TOLERANCE = "image_tolerance"


def _is_image(name: str) -> bool:
    return Path(name).suffix.lower() in IMAGE_SUFFIXES


def _read_tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@dataclass(frozen=True)
class ProjectFixture:
    id: str
    difficulty: str
    description: str
    input_files: tuple[tuple[str, bytes], ...]
    sample_solution: str
    expected: Mapping[str, bytes] | None = None
    compare_script: str | None = None
    compare_mode: CompareMode | None = None
    threshold: float = DEFAULT_THRESHOLD
    environment_hint: str | None = None
    directory: Path | None = None

    def __post_init__(self):
        if self.difficulty not in DIFFICULTIES:
            raise FixtureError(f"fixture {self.id!r}: unknown difficulty {self.difficulty!r}")
        if not self.sample_solution.strip():
            raise FixtureError(f"fixture {self.id!r}: sample_solution absent")
        if self.expected is None and self.compare_script is None:
            raise FixtureError(f"fixture {self.id!r}: test_module absent (need expected/ or test/compare.py)")

    @property
    def requirement(self) -> ProjectRequirement:
        files = tuple(InputFile(p, InputKind.IMAGE if _is_image(p) else InputKind.DATA)
                      for p, _ in self.input_files)
        return ProjectRequirement(self.id, self.description, files, environment_hint=self.environment_hint)


def load_fixture(directory: str | Path) -> ProjectFixture:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.is_file():
        raise FixtureError(f"{d}: manifest absent")
    try:
        m = parse_manifest(manifest.read_text(encoding="utf-8"), str(manifest), FIXTURE_KEYS)
    except ConfigurationError as exc:
        raise FixtureError(str(exc)) from None
    for key in ("id", "difficulty"):
        if key not in m.header:
            raise FixtureError(f"{manifest}: header field {key!r} is required")
    if not (d / "inputs").is_dir():
        raise FixtureError(f"{d}: inputs absent")
    solution = d / "solution" / "main.py"
    if not solution.is_file():
        raise FixtureError(f"{d}: sample_solution absent")
    expected = _read_tree(d / "expected") if (d / "expected").is_dir() else None
    compare = d / "test" / "compare.py"
    try:
        mode = CompareMode(m.header["compare"]) if "compare" in m.header else None
        threshold = float(m.header.get("threshold", DEFAULT_THRESHOLD))
    except ValueError as exc:
        raise FixtureError(f"{manifest}: {exc}") from None
    return ProjectFixture(
        id=m.header["id"], difficulty=m.header["difficulty"], description=m.description,
        input_files=tuple(_read_tree(d / "inputs").items()),
        sample_solution=solution.read_text(encoding="utf-8"), expected=expected,
        compare_script=compare.read_text(encoding="utf-8") if compare.is_file() else None,
        compare_mode=mode, threshold=threshold, environment_hint=m.header.get("environment_hint"), directory=d)


def discover_fixtures(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FixtureError(f"fixtures root not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.txt").is_file())


# -- comparison ------------------------------------------------------------------------

@dataclass(frozen=True)
class Comparison:
    equal: bool
    detail: str


def decode_image(name: str, data: bytes) -> np.ndarray:
    """Pixels as an (h, w, channels) array; palette and bilevel images are expanded first."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if img.mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
            elif img.mode == "1":
                img = img.convert("L")
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ComparisonError(f"cannot decode image {name!r}: {exc}") from None
    return arr[:, :, None] if arr.ndim == 2 else arr


def _compare_images(name: str, a: bytes, b: bytes, threshold: float) -> str | None:
    x, y = decode_image(name, a), decode_image(name, b)
    if x.shape != y.shape:
        return f"{name}: shape {x.shape} vs {y.shape}"
    diff = np.abs(x.astype(np.float64) - y.astype(np.float64)).reshape(-1, x.shape[2]).mean(axis=0)
    worst = float(diff.max()) if diff.size else 0.0
    if worst > threshold:
        return f"{name}: mean abs channel difference {worst:.3f} > {threshold}"
    return None


def compare_outputs(generated: Mapping[str, bytes], expected: Mapping[str, bytes],
                    mode: CompareMode | str = CompareMode.IMAGE_TOLERANCE,
                    threshold: float = DEFAULT_THRESHOLD) -> Comparison:
    mode = CompareMode(mode)
    extra = sorted(set(generated) - set(expected))
    missing = sorted(set(expected) - set(generated))
    if extra or missing:
        parts = []
        if extra:
            parts.append(f"unexpected files: {', '.join(extra)}")
        if missing:
            parts.append(f"missing files: {', '.join(missing)}")
        return Comparison(False, "; ".join(parts))
    problems = []
    for name in sorted(expected):
        a, b = generated[name], expected[name]
        if a == b:
            continue
        if mode is CompareMode.IMAGE_TOLERANCE and _is_image(name):
            why = _compare_images(name, a, b, threshold)
            if why:
                problems.append(why)
        else:
            problems.append(f"{name}: contents differ")
    if problems:
        return Comparison(False, "; ".join(problems))
    return Comparison(True, f"{len(expected)} file(s) match ({mode.value})")


def structural_match(generated: Mapping[str, bytes], expected: Mapping[str, bytes]) -> bool:
    """Looser probe used to flag outcomes for a human look: same names, same image sizes."""
    if set(generated) != set(expected):
        return False
    for name in expected:
        if _is_image(name):
            try:
                if decode_image(name, generated[name]).shape[:2] != decode_image(name, expected[name]).shape[:2]:
                    return False
            except ComparisonError:
                return False
    return True


# -- evaluation ------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalOutcome:
    project_id: str
    difficulty: str
    acc: int
    generated_output: dict[str, str] = field(default_factory=dict)
    expected_output: dict[str, str] = field(default_factory=dict)
    failure_reason: str | None = None
    flagged_for_manual_review: bool = False
    detail: str = ""
    fixture_error: str | None = None

    def __post_init__(self):
        if self.acc not in (0, 1):
            raise ValueError("acc must be 0 or 1")
        if self.acc == 1 and (self.failure_reason or self.fixture_error):
            raise ValueError("a passing outcome has no failure reason")

    def to_dict(self) -> dict[str, Any]:
        return {"project_id": self.project_id, "difficulty": self.difficulty, "acc": self.acc,
                "generated_output": self.generated_output, "expected_output": self.expected_output,
                "failure_reason": self.failure_reason, "flagged_for_manual_review": self.flagged_for_manual_review,
                "detail": self.detail, "fixture_error": self.fixture_error}


def _outputs(res: ExecutionResult) -> dict[str, bytes]:
    return {p: res.read(p) for p, _ in res.produced_files}


def _digests(files: Mapping[str, bytes]) -> dict[str, str]:
    return {k: hashlib.sha256(v).hexdigest() for k, v in sorted(files.items())}


def _tail(text: str, n: int = 5) -> str:
    return "\n".join(text.strip().splitlines()[-n:])


def evaluate_project(fixture: ProjectFixture, generated_project: CodeArtifact | str | None, sandbox: Sandbox,
                     spec: SandboxSpec, mode: CompareMode | str | None = None, *,
                     generation_error: str | None = None) -> EvalOutcome:
    mode = CompareMode(mode or fixture.compare_mode or CompareMode.IMAGE_TOLERANCE)
    fid, tier = fixture.id, fixture.difficulty

    sol = sandbox.run_script(spec, fixture.sample_solution, fixture.input_files,
                             stage="evaluation_solution", name=f"{fid}/solution")
    if sol.timed_out or sol.exit_code != 0:
        return EvalOutcome(fid, tier, 0, fixture_error=f"sample solution failed ({sol.report().splitlines()[0]})",
                           detail=_tail(sol.stderr))
    expected = _outputs(sol)
    if fixture.expected is not None:
        check = compare_outputs(expected, fixture.expected, mode, fixture.threshold)
        if not check.equal:
            return EvalOutcome(fid, tier, 0, expected_output=_digests(expected),
                               fixture_error=f"sample solution disagrees with expected/: {check.detail}")

    source = generated_project.source if isinstance(generated_project, CodeArtifact) else generated_project
    if not source:
        return EvalOutcome(fid, tier, 0, expected_output=_digests(expected), failure_reason="generation failed",
                           detail=generation_error or "no project produced")
    gen = sandbox.run_script(spec, source, fixture.input_files, stage="evaluation_generated",
                             name=f"{fid}/generated")
    if gen.timed_out:
        return EvalOutcome(fid, tier, 0, _digests(_outputs(gen)), _digests(expected), "timeout")
    if gen.exit_code != 0:
        return EvalOutcome(fid, tier, 0, _digests(_outputs(gen)), _digests(expected), "crash",
                           detail=f"exit code {gen.exit_code}\n{_tail(gen.stderr)}")
    generated = _outputs(gen)

    try:
        if fixture.compare_script is not None:
            staged = [(f"generated/{k}", v) for k, v in generated.items()] + \
                     [(f"expected/{k}", v) for k, v in expected.items()]
            res = sandbox.run_script(spec, fixture.compare_script, staged, stage="evaluation_compare",
                                     name=f"{fid}/compare", script_name="compare.py")
            verdict = Comparison(res.exit_code == 0 and not res.timed_out,
                                 _tail(res.stdout + res.stderr) or f"compare.py exit code {res.exit_code}")
        else:
            verdict = compare_outputs(generated, expected, mode, fixture.threshold)
    except ComparisonError as exc:
        return EvalOutcome(fid, tier, 0, _digests(generated), _digests(expected), "unreadable output",
                           detail=str(exc))
    if verdict.equal:
        return EvalOutcome(fid, tier, 1, _digests(generated), _digests(expected), detail=verdict.detail)
    return EvalOutcome(fid, tier, 0, _digests(generated), _digests(expected), "output mismatch",
                       flagged_for_manual_review=structural_match(generated, expected), detail=verdict.detail)


# -- generators ------------------------------------------------------------------------

@dataclass
class Generation:
    source: str | None
    error: str | None = None
    ledger: UsageLedger | None = None


class Generator(Protocol):
    def generate(self, fixture: ProjectFixture, workdir: Path) -> Generation: ...


class PipelineGenerator:
    """Runs the multi-agent pipeline once per fixture, in ``workdir/run``."""

    def __init__(self, config_for: Callable[[ProjectFixture], RunConfig], **pipeline_kwargs: Any):
        self.config_for = config_for
        self.pipeline_kwargs = pipeline_kwargs

    def generate(self, fixture: ProjectFixture, workdir: Path) -> Generation:
        from .pipeline import Pipeline

        try:
            config = self.config_for(fixture)
            pipeline = Pipeline(config, workdir / "run", input_root=fixture.directory / "inputs",
                                **self.pipeline_kwargs)
            result = pipeline.run_project(fixture.requirement)
        except TreecoderError as exc:
            return Generation(None, f"generator launch failed: {exc}")
        if result.project is None:
            return Generation(None, f"pipeline failed: {result.state.error}", pipeline.gateway.ledger)
        return Generation(result.project.source, None, pipeline.gateway.ledger)


class CommandGenerator:
    """External generator. The command gets ``{description}``, ``{fixture}`` and ``{output}``
    substituted and must leave ``main.py`` in the output directory."""

    def __init__(self, command: str | Sequence[str], timeout: float = 600.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout

    def generate(self, fixture: ProjectFixture, workdir: Path) -> Generation:
        out = workdir / "generated"
        out.mkdir(parents=True, exist_ok=True)
        desc = workdir / "description.txt"
        desc.write_text(fixture.description + "\n", encoding="utf-8")
        argv = [a.format(description=desc, fixture=fixture.directory, output=out) for a in self.command]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.SubprocessError) as exc:
            return Generation(None, f"generator launch failed: {exc}")
        main = out / "main.py"
        if proc.returncode != 0 or not main.is_file():
            return Generation(None, f"generator exited {proc.returncode} without main.py: {_tail(proc.stderr)}")
        return Generation(main.read_text(encoding="utf-8"))


# -- reporting -------------------------------------------------------------------------

def _accuracy(passed: int, total: int) -> float | None:
    return passed / total if total else None


def format_percent(acc: float | None) -> str:
    return "n/a" if acc is None else f"{100 * acc:.2f}%"


@dataclass
class BenchmarkReport:
    outcomes: list[EvalOutcome]
    cost: dict[str, Any] = field(default_factory=dict)
    method: str = "treecoder"

    @property
    def scored(self) -> list[EvalOutcome]:
        return [o for o in self.outcomes if o.fixture_error is None]

    @property
    def fixture_errors(self) -> list[EvalOutcome]:
        return [o for o in self.outcomes if o.fixture_error is not None]

    def tier(self, difficulty: str) -> tuple[int, int]:
        rows = [o for o in self.scored if o.difficulty == difficulty]
        return sum(o.acc for o in rows), len(rows)

    @property
    def tiers(self) -> dict[str, float | None]:
        return {d: _accuracy(*self.tier(d)) for d in DIFFICULTIES}

    @property
    def overall(self) -> float | None:
        scored = self.scored
        return _accuracy(sum(o.acc for o in scored), len(scored))

    def to_dict(self) -> dict[str, Any]:
        tiers = {}
        for d in DIFFICULTIES:
            passed, total = self.tier(d)
            tiers[d] = {"passed": passed, "total": total, "accuracy": _accuracy(passed, total)}
        return {
            "method": self.method,
            "tiers": tiers,
            "overall": {"passed": sum(o.acc for o in self.scored), "total": len(self.scored),
                        "accuracy": self.overall},
            "outcomes": [o.to_dict() for o in sorted(self.outcomes, key=lambda o: o.project_id)],
            "fixture_errors": [o.project_id for o in self.fixture_errors],
            "flagged_for_manual_review": [o.project_id for o in self.outcomes if o.flagged_for_manual_review],
            "cost": self.cost,
        }

    def render_table(self) -> str:
        cols = ["Simple", "Medium", "Hard", "Overall"]
        values = [format_percent(self.tiers[d]) for d in DIFFICULTIES] + [format_percent(self.overall)]
        width = max(len(self.method), len("Method"))
        lines = ["  ".join([f"{'Method':<{width}}"] + [f"{c:>8}" for c in cols]),
                 "  ".join([f"{self.method:<{width}}"] + [f"{v:>8}" for v in values])]
        for o in sorted(self.outcomes, key=lambda o: o.project_id):
            status = "PASS" if o.acc else ("FIXTURE-ERROR" if o.fixture_error else "FAIL")
            why = o.fixture_error or o.failure_reason or ""
            flag = " [manual review]" if o.flagged_for_manual_review else ""
            lines.append(f"  {o.project_id:<24} {o.difficulty:<7} {status}{flag} {why}".rstrip())
        if isinstance(self.cost, Mapping) and "total_cost" in self.cost:
            lines.append(f"total cost: {self.cost['total_cost']:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js, txt = out / "report.json", out / "report.txt"
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        txt.write_text(self.render_table(), encoding="utf-8")
        return js, txt


def run_benchmark(fixtures_root: str | Path, generator: Generator, sandbox: Sandbox, spec: SandboxSpec,
                  mode: CompareMode | str | None = None, *, out_dir: str | Path,
                  parallelism: int = 1, price_table: Mapping[str, Mapping[str, float]] | None = None,
                  method: str = "treecoder") -> BenchmarkReport:
    dirs = discover_fixtures(fixtures_root)
    if not dirs:
        raise FixtureError(f"no fixtures under {fixtures_root}")
    out = Path(out_dir)
    ledger = UsageLedger()

    def one(d: Path) -> EvalOutcome:
        try:
            fixture = load_fixture(d)
        except FixtureError as exc:
            return EvalOutcome(d.name, "unknown", 0, fixture_error=str(exc))
        gen = generator.generate(fixture, out / "runs" / fixture.id)
        if gen.ledger is not None:
            ledger.merge(gen.ledger)
        return evaluate_project(fixture, gen.source, sandbox, spec.with_workdir(out / "sandboxes"), mode,
                                generation_error=gen.error)

    if parallelism <= 1:
        outcomes = [one(d) for d in dirs]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as ex:
            outcomes = list(ex.map(one, dirs))
    try:
        cost = ledger_report(ledger, price_table)
    except PriceTableError as exc:
        cost = {"error": str(exc)}
    report = BenchmarkReport(sorted(outcomes, key=lambda o: o.project_id), cost, method)
    report.write(out)
    return report
