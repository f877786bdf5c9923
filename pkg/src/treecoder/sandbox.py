"""Isolated execution of generated code.

Two backends sit behind one interface: a subprocess backend (restricted
working directory, scrubbed environment) used by the test suite, and a
container backend that shells out to the ``docker`` CLI for live runs. Every
execution owns a private directory under the SandboxSpec host workdir, which is
mapped to ``/workspace`` inside the sandbox.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import shutil
import signal
import subprocess
import sys
import threading
import time
import uuid
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .domain import check_relative_path
from .errors import ConfigurationError, SandboxEnvironmentError, ValidationError

logger = logging.getLogger(__name__)

TIMEOUT_EXIT_CODE = 124
GRACE_SECONDS = 5.0
SANDBOX_PATH = "/workspace"
DEFAULT_CATALOG = Path(str(resources.files("treecoder") / "data" / "catalog.txt"))
_TMP = ".sandbox_tmp"


def load_catalog(path: str | Path | None = None) -> dict[str, str]:
    """Image name -> dependency description, in file order."""
    path = Path(path) if path else DEFAULT_CATALOG
    try:
        text = path.read_text(encoding="utf-8")
    except OSError:
        raise ConfigurationError(f"catalog file not found: {path}") from None
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, desc = line.partition(":")
        if not sep or not name.strip() or not desc.strip():
            raise ConfigurationError(f"{path}:{n}: expected '<image>: <description>'")
        out[name.strip()] = desc.strip()
    if not out:
        raise ConfigurationError(f"catalog {path} lists no images")
    return out


@dataclass(frozen=True)
class SandboxSpec:
    image: str
    workdir: Path
    timeout: float = 60.0
    backend: str = "subprocess"
    catalog: Mapping[str, str] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "workdir", Path(self.workdir))
        if self.timeout <= 0:
            raise ValidationError("sandbox timeout must be > 0")
        if self.backend not in ("subprocess", "container"):
            raise ValidationError(f"unknown sandbox backend {self.backend!r}")
        catalog = self.catalog if self.catalog is not None else load_catalog()
        if self.image not in catalog:
            raise ValidationError(f"image {self.image!r} is not in the catalog")

    def with_workdir(self, workdir: Path) -> SandboxSpec:
        return SandboxSpec(self.image, workdir, self.timeout, self.backend, self.catalog)


@dataclass(frozen=True)
class ExecutionResult:
    exit_code: int
    stdout: str
    stderr: str
    duration: float
    produced_files: tuple[tuple[str, str], ...]
    timed_out: bool
    workdir: Path

    def read(self, relpath: str) -> bytes:
        return (self.workdir / relpath).read_bytes()

    def report(self) -> str:
        """Failure text handed back to agents; deterministic (no timings)."""
        head = "timed out" if self.timed_out else f"exit code {self.exit_code}"
        parts = [f"[{head}]"]
        if self.stdout.strip():
            parts.append("stdout:\n" + self.stdout.rstrip())
        if self.stderr.strip():
            parts.append("stderr:\n" + self.stderr.rstrip())
        return "\n".join(parts)


@dataclass(frozen=True)
class ValidationResult:
    passed: bool
    result: ExecutionResult


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _snapshot(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root)
        if rel.parts and rel.parts[0] == _TMP:
            continue
        if p.is_file() and not p.is_symlink():
            out[rel.as_posix()] = _sha256(p)
    return out


class Sandbox:
    """Runs scripts and counts executions per stage label."""

    def __init__(self, max_concurrent: int = 4, python: str = sys.executable, docker: str = "docker"):
        self.python = python
        self.docker = docker
        self.counters: Counter[str] = Counter()
        self._semaphore = threading.BoundedSemaphore(max_concurrent)
        self._lock = threading.Lock()
        self._claimed: set[Path] = set()

    def _private_dir(self, spec: SandboxSpec, name: str) -> Path:
        base = spec.workdir / name
        with self._lock:
            cand, n = base, 1
            while cand in self._claimed or cand.exists():
                n += 1
                cand = base.with_name(f"{base.name}-{n}")
            self._claimed.add(cand)
        cand.mkdir(parents=True)
        return cand

    def run_script(self, spec: SandboxSpec, script: str, staged_files: Sequence[tuple[str, bytes]] = (), *,
                   stage: str = "run", name: str | None = None, script_name: str = "main.py") -> ExecutionResult:
        staged = [(check_relative_path(p), data) for p, data in staged_files]
        check_relative_path(script_name)
        if spec.backend == "container" and shutil.which(self.docker) is None:
            raise SandboxEnvironmentError(f"container runtime {self.docker!r} is not available")
        wd = self._private_dir(spec, name or stage)
        for rel, data in staged:
            target = wd / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        (wd / script_name).write_text(script, encoding="utf-8")
        before = _snapshot(wd)
        with self._lock:
            self.counters[stage] += 1
        with self._semaphore:
            if spec.backend == "subprocess":
                code, out, err, dur, timed_out = self._run_subprocess(wd, script_name, spec.timeout)
            else:
                code, out, err, dur, timed_out = self._run_container(wd, script_name, spec)
        shutil.rmtree(wd / _TMP, ignore_errors=True)
        after = _snapshot(wd)
        produced = tuple((p, h) for p, h in after.items() if before.get(p) != h)
        return ExecutionResult(code, _scrub(out, wd), _scrub(err, wd), dur, produced, timed_out, wd)

    def _run_subprocess(self, wd: Path, script_name: str, timeout: float):
        tmp = wd / _TMP
        tmp.mkdir()
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": str(wd),
            "TMPDIR": str(tmp),
            "LANG": "C.UTF-8",
            "MPLBACKEND": "Agg",
        }
        cmd = [self.python, "-B", "-E", "-s", script_name]
        return _communicate(cmd, wd, env, timeout)

    def _run_container(self, wd: Path, script_name: str, spec: SandboxSpec):
        cname = f"treecoder-{uuid.uuid4().hex[:12]}"
        cmd = [self.docker, "run", "--rm", "--name", cname, "--network", "none",
               "--read-only", "--tmpfs", "/tmp", "-e", "HOME=/tmp",
               "-v", f"{wd.resolve()}:{SANDBOX_PATH}", "-w", SANDBOX_PATH,
               "-e", "PYTHONDONTWRITEBYTECODE=1", "-e", "MPLBACKEND=Agg",
               spec.image, "python", script_name]
        result = _communicate(cmd, wd, dict(os.environ), spec.timeout,
                              on_timeout=lambda: subprocess.run([self.docker, "kill", cname],
                                                                capture_output=True, timeout=10))
        if result[0] == 125 and not result[4]:
            raise SandboxEnvironmentError(f"container runtime failed to start {spec.image!r}: {result[2].strip()}")
        return result

    def run_validation(self, spec: SandboxSpec, code_under_test: str, test_script: str,
                       inputs: Sequence[tuple[str, bytes]] = (), *, code_name: str = "solution",
                       stage: str = "validation", name: str | None = None) -> ValidationResult:
        if not code_under_test.strip() or not test_script.strip():
            raise ValueError("run_validation needs non-empty code and test sources")
        staged = list(inputs) + [(f"{code_name}.py", code_under_test.encode("utf-8"))]
        res = self.run_script(spec, test_script, staged, stage=stage, name=name,
                              script_name=f"test_{code_name}.py")
        return ValidationResult(res.exit_code == 0 and not res.timed_out, res)


def _communicate(cmd, cwd: Path, env: dict, timeout: float, on_timeout=None):
    start = time.monotonic()
    try:
        proc = subprocess.Popen(cmd, cwd=cwd, env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                stdin=subprocess.DEVNULL, start_new_session=True)
    except OSError as exc:
        raise SandboxEnvironmentError(f"cannot launch {cmd[0]!r}: {exc}") from None
    timed_out = False
    try:
        out, err = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        if on_timeout is not None:
            try:
                on_timeout()
            except (OSError, subprocess.SubprocessError):
                logger.warning("timeout hook failed for %s", cmd[0])
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, err = proc.communicate()
    duration = time.monotonic() - start
    code = TIMEOUT_EXIT_CODE if timed_out else proc.returncode
    return code, out.decode("utf-8", "replace"), err.decode("utf-8", "replace"), duration, timed_out


def _scrub(text: str, wd: Path) -> str:
    for p in {str(wd.resolve()), str(wd)}:
        text = text.replace(p, SANDBOX_PATH)
    return text


_FRAME = re.compile(r'^\s*File "([^"]+)", line \d+', re.MULTILINE)


def failure_origin(result: ExecutionResult, test_file: str, code_file: str) -> str:
    """Blame a failed validation on the ``"code"`` under test or on the ``"test"`` script itself.

    Assertion failures and timeouts count against the code; any other exception
    whose innermost frame of ours lies in the test script counts against the test.
    """
    if result.timed_out:
        return "code"
    lines = [ln for ln in result.stderr.strip().splitlines() if ln.strip()]
    if lines and lines[-1].startswith("AssertionError"):
        return "code"
    ours = [os.path.basename(f) for f in _FRAME.findall(result.stderr)
            if os.path.basename(f) in (test_file, code_file)]
    if ours and ours[-1] == test_file:
        return "test"
    return "code"
