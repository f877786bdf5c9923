"""Shared builders for scripted pipeline scenarios."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from treecoder.domain import ProjectRequirement, RunConfig
from treecoder.llm import BackendRef, Gateway, Script
from treecoder.pipeline import Pipeline
from treecoder.sandbox import Sandbox

DATA = Path(str(resources.files("treecoder") / "data"))
DEMO = DATA / "demo" / "license_plate"
BENCH_FIXTURES = DATA / "bench" / "fixtures"
BENCH_SCRIPTS = DATA / "bench" / "scripts"


def fence(code: str) -> str:
    return f"```python\n{code.strip()}\n```\n"


PLAN = """<<<BEGIN team_leader>>>
ENVIRONMENT: imgproc-base
---
MODULE_NAME: Counter
MODULE_DESCRIPTION: Increment a number.
<<<END team_leader>>>
"""

SPLIT = """<<<BEGIN module_leader>>>
FUNCTION_NAME: increment
FUNCTION_DESCRIPTION: Add one to x.
INPUTS: x: int
OUTPUTS: y: int
<<<END module_leader>>>
"""

REFINE = """<<<BEGIN function_coordinator>>>
FUNCTION_NAME: increment
SIGNATURE: def increment(x: int) -> int:
DOCSTRING: Return x + 1.
<<<END function_coordinator>>>
"""

PASS_CODE = fence("def increment(x: int) -> int:\n    return x + 1")
FAIL_CODE = fence("def increment(x: int) -> int:\n    return x")

TEST = fence("from increment import increment\n\nassert increment(1) == 2\nprint('ok')")
# imports the function under test from a module that does not exist
TEST_BAD_IMPORT = fence("from solution import increment\n\nassert increment(1) == 2\nprint('ok')")
NO_CHANGES = "<<<BEGIN coder>>>\nVERDICT: no_changes\n<<<END coder>>>\n"
REVISED = "<<<BEGIN coder>>>\nVERDICT: revised\n<<<END coder>>>\n" + TEST

MODULE_TEST = fence("from counter import run_counter\n\nassert 'y' in run_counter(1)\nprint('ok')")


def counter_script(schedule: list[bool], *, test: str = TEST, reviews: list[str] | None = None,
                   module_tests: list[str] | None = None, corrections: list[str] | None = None,
                   fixes: list[str] | None = None, plan: str = PLAN) -> dict[str, list[str]]:
    """One module, one function; ``schedule`` says whether each coder generation passes."""
    codes = [PASS_CODE if ok else FAIL_CODE for ok in schedule]
    script = {
        "team_leader/split_modules": [plan],
        "module_leader/split_functions": [SPLIT],
        "function_coordinator/refine_functions": [REFINE],
        "coder/draft_function": codes[:1],
        "coder/regenerate_function": codes[1:],
        "tester/draft_tests": [test],
        "coder/review_tests": reviews if reviews is not None else [NO_CHANGES],
        "module_leader/draft_module_tests": module_tests or [MODULE_TEST],
        "function_coordinator/correct_module": corrections or [],
        "coder/fix_tests": fixes or [],
    }
    return script


def scripted_config(script: dict[str, list[str]] | Script, **overrides) -> RunConfig:
    s = script if isinstance(script, Script) else Script(script)
    decision = BackendRef("scripted", "scripted-decision", script=s)
    implementer = BackendRef("scripted", "scripted-implementer", script=s)
    return RunConfig(decision, implementer, **overrides)


COUNTER = ProjectRequirement("counter", "Increment a number.")


def run_counter(tmp_path: Path, script: dict[str, list[str]], requirement: ProjectRequirement = COUNTER,
                **overrides):
    config = scripted_config(script, **overrides)
    pipeline = Pipeline(config, tmp_path / "run", gateway=Gateway(), sandbox=Sandbox())
    return pipeline.run_project(requirement), pipeline


def demo_pipeline(run_dir: Path, **overrides) -> Pipeline:
    config = scripted_config(Script.from_yaml(DEMO / "script.yaml"), **overrides)
    return Pipeline(config, run_dir, input_root=DEMO)


def coder_generations(gateway: Gateway, address=(0, 0)) -> int:
    return sum(1 for t in gateway.transcript
               if t["role"] == "coder" and t["stage"] in ("draft_function", "regenerate_function")
               and tuple(t["address"]) == tuple(address))
