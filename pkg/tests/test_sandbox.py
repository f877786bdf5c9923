import hashlib
import random
import time
from pathlib import Path

import pytest

from treecoder.errors import SandboxEnvironmentError, ValidationError
from treecoder.sandbox import TIMEOUT_EXIT_CODE, Sandbox, SandboxSpec, failure_origin, load_catalog


def _spec(tmp_path, **kw):
    return SandboxSpec("imgproc-base", tmp_path / "work", **kw)


def _hash_tree(root: Path) -> dict[str, str]:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_catalog_and_spec_validation(tmp_path):
    assert "imgproc-base" in load_catalog()
    with pytest.raises(ValidationError):
        SandboxSpec("no-such-image", tmp_path)
    with pytest.raises(ValidationError):
        SandboxSpec("imgproc-base", tmp_path, timeout=0)
    with pytest.raises(ValidationError):
        SandboxSpec("imgproc-base", tmp_path, backend="vm")


def test_run_script_reports_output_and_produced_files(tmp_path):
    sb = Sandbox()
    res = sb.run_script(_spec(tmp_path), "import sys\nopen('out.txt','w').write('hi')\nprint('done')\n"
                        "print('warn', file=sys.stderr)\n", [("in/data.txt", b"x")], stage="t")
    assert res.exit_code == 0 and not res.timed_out
    assert res.stdout == "done\n" and res.stderr == "warn\n"
    assert [p for p, _ in res.produced_files] == ["out.txt"]
    assert res.read("out.txt") == b"hi"
    assert sb.counters["t"] == 1


def test_each_execution_gets_a_private_directory(tmp_path):
    sb = Sandbox()
    a = sb.run_script(_spec(tmp_path), "open('f','w').write('a')\n", name="same")
    b = sb.run_script(_spec(tmp_path), "import os\nprint(sorted(os.listdir('.')))\n", name="same")
    assert a.workdir != b.workdir
    assert "'f'" not in b.stdout


def test_staged_paths_cannot_escape(tmp_path):
    with pytest.raises(ValidationError):
        Sandbox().run_script(_spec(tmp_path), "pass\n", [("../evil.txt", b"x")])


def test_paths_in_output_are_scrubbed(tmp_path):
    res = Sandbox().run_script(_spec(tmp_path), "import os\nprint(os.getcwd())\nraise ValueError('boom')\n")
    assert res.stdout.strip() == "/workspace"
    assert str(tmp_path) not in res.stderr
    assert "ValueError: boom" in res.stderr and res.exit_code == 1


def test_timeout_kills_process_group(tmp_path):
    script = "import subprocess, sys\nsubprocess.Popen([sys.executable, '-c', 'while True: pass'])\nwhile True: pass\n"
    start = time.monotonic()
    res = Sandbox().run_script(_spec(tmp_path, timeout=1), script)
    assert res.timed_out and res.exit_code == TIMEOUT_EXIT_CODE
    assert time.monotonic() - start < 6
    assert "timed out" in res.report()


_OPS = [
    "open('f{n}.txt', 'w').write('{n}')",
    "os.makedirs('d{n}/e', exist_ok=True); open('d{n}/e/x', 'wb').write(b'{n}')",
    "open(os.path.join(os.path.expanduser('~'), 'home{n}'), 'w').write('h')",
    "tempfile.NamedTemporaryFile(delete=False).write(b'{n}')",
    "os.remove('staged.txt') if os.path.exists('staged.txt') else None",
    "open('staged.txt', 'a').write('more')",
    "subprocess.run([sys.executable, '-c', 'open(\"child{n}\", \"w\").write(\"c\")'])",
    "print('x' * {n})",
    "raise SystemExit({n} % 3)",
    "1 / 0 if {n} % 5 == 0 else None",
]


def test_tripwire_untouched_by_random_scripts(tmp_path):
    tripwire = tmp_path / "tripwire"
    (tripwire / "sub").mkdir(parents=True)
    (tripwire / "a.txt").write_text("do not touch")
    (tripwire / "sub" / "b.bin").write_bytes(bytes(range(256)))
    before = _hash_tree(tripwire)
    rng = random.Random(1234)
    sb = Sandbox()
    spec = _spec(tmp_path)
    for n in range(50):
        body = "\n".join(rng.choice(_OPS).format(n=n) for _ in range(rng.randint(1, 5)))
        script = "import os, sys, subprocess, tempfile\n" + body + "\n"
        sb.run_script(spec, script, [("staged.txt", b"s")], stage="trip")
    assert _hash_tree(tripwire) == before
    assert sb.counters["trip"] == 50
    # nothing leaks beside the private directories either
    assert sorted(p.name for p in tmp_path.iterdir()) == ["tripwire", "work"]


def test_run_validation_stages_code_and_inputs(tmp_path):
    sb = Sandbox()
    code = "def double(x):\n    return 2 * x\n"
    test = "from double import double\nassert double(open('n.txt').read().strip() == '3' and 3 or 0) == 6\n"
    v = sb.run_validation(_spec(tmp_path), code, test, [("n.txt", b"3\n")], code_name="double", stage="v")
    assert v.passed, v.result.report()
    bad = sb.run_validation(_spec(tmp_path), "def double(x):\n    return x\n", test, [("n.txt", b"3\n")],
                            code_name="double", stage="v")
    assert not bad.passed and "AssertionError" in bad.result.stderr
    assert sb.counters["v"] == 2
    with pytest.raises(ValueError):
        sb.run_validation(_spec(tmp_path), "", test)


def test_failure_origin(tmp_path):
    sb = Sandbox()
    code = "def f(x):\n    return x.missing\n"

    def run(test):
        return sb.run_validation(_spec(tmp_path), code, test, code_name="f").result

    assert failure_origin(run("from f import f\nf(1)\n"), "test_f.py", "f.py") == "code"
    assert failure_origin(run("from f import f\nassert False\n"), "test_f.py", "f.py") == "code"
    assert failure_origin(run("from nope import f\n"), "test_f.py", "f.py") == "test"
    assert failure_origin(run("undefined_name\n"), "test_f.py", "f.py") == "test"


def test_container_backend_without_runtime_is_an_environment_error(tmp_path):
    sb = Sandbox(docker="definitely-not-a-docker-binary")
    with pytest.raises(SandboxEnvironmentError):
        sb.run_script(_spec(tmp_path, backend="container"), "print(1)\n")
