import io
import json
import shutil
import sys

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from helpers import BENCH_FIXTURES, BENCH_SCRIPTS, scripted_config

from treecoder.errors import ComparisonError, FixtureError
from treecoder.evaluation import (
    BenchmarkReport,
    CommandGenerator,
    CompareMode,
    EvalOutcome,
    PipelineGenerator,
    compare_outputs,
    decode_image,
    evaluate_project,
    format_percent,
    load_fixture,
    run_benchmark,
)
from treecoder.llm import Script
from treecoder.sandbox import Sandbox, SandboxSpec


def _png(pixels: np.ndarray, level: int) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG", compress_level=level)
    return buf.getvalue()


def _cv2_pixels(data: bytes) -> np.ndarray:
    return cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_UNCHANGED)


PIXELS = np.random.default_rng(7).integers(0, 256, (32, 48, 3), dtype=np.uint8)


def test_reencoded_identical_pixels_equal_only_under_tolerance():
    a, b = _png(PIXELS, 0), _png(PIXELS, 9)
    assert a != b
    # independent decoder agrees the pixels are the same
    assert np.array_equal(_cv2_pixels(a), _cv2_pixels(b))
    assert np.array_equal(decode_image("x.png", a), PIXELS)
    assert compare_outputs({"o.png": a}, {"o.png": b}, CompareMode.IMAGE_TOLERANCE).equal
    assert not compare_outputs({"o.png": a}, {"o.png": b}, CompareMode.EXACT).equal


def test_tolerance_threshold_uses_mean_absolute_difference():
    base = np.full((10, 10), 100, np.uint8)
    noisy = base.copy()
    noisy[0, :5] = 110  # mean abs diff 50 / 100 = 0.5
    assert abs(np.abs(_cv2_pixels(_png(base, 6)).astype(int) - _cv2_pixels(_png(noisy, 6))).mean() - 0.5) < 1e-12
    a, b = _png(base, 6), _png(noisy, 6)
    assert compare_outputs({"o.png": a}, {"o.png": b}, threshold=1.0).equal
    assert not compare_outputs({"o.png": a}, {"o.png": b}, threshold=0.4).equal
    shifted = _png(np.full((10, 10), 103, np.uint8), 6)
    assert not compare_outputs({"o.png": a}, {"o.png": shifted}).equal


def test_shape_mismatch_and_unreadable_images():
    a = _png(np.zeros((4, 4), np.uint8), 6)
    b = _png(np.zeros((4, 5), np.uint8), 6)
    assert "shape" in compare_outputs({"o.png": a}, {"o.png": b}).detail
    with pytest.raises(ComparisonError):
        compare_outputs({"o.png": b"not a png"}, {"o.png": a})


def test_extra_or_missing_file_is_unequal():
    a = _png(PIXELS, 6)
    assert not compare_outputs({"o.png": a, "extra.txt": b""}, {"o.png": a}).equal
    assert not compare_outputs({}, {"o.png": a}).equal
    assert "unexpected files: extra.txt" in compare_outputs({"o.png": a, "extra.txt": b""}, {"o.png": a}).detail


_files = st.dictionaries(st.sampled_from(["a.txt", "b.txt", "c.bin"]), st.binary(max_size=6), max_size=3)
_images = st.builds(lambda v, w, lvl: _png(np.full((3, w), v, np.uint8), lvl),
                    st.integers(0, 255), st.integers(1, 3), st.integers(0, 9))


@settings(max_examples=150, deadline=None)
@given(_files, _files, st.one_of(st.none(), _images), st.one_of(st.none(), _images),
       st.sampled_from(list(CompareMode)))
def test_comparator_is_symmetric(fa, fb, ia, ib, mode):
    if ia is not None:
        fa = {**fa, "img.png": ia}
    if ib is not None:
        fb = {**fb, "img.png": ib}
    assert compare_outputs(fa, fb, mode).equal == compare_outputs(fb, fa, mode).equal
    if set(fa) != set(fb):
        assert not compare_outputs(fa, fb, mode).equal
    assert compare_outputs(fa, dict(fa), mode).equal


def _outcomes(tier, passed, total):
    return [EvalOutcome(f"{tier}{i}", tier, int(i < passed), failure_reason=None if i < passed else "crash")
            for i in range(total)]


def test_report_arithmetic():
    report = BenchmarkReport(_outcomes("simple", 26, 30) + _outcomes("medium", 34, 50) + _outcomes("hard", 5, 10))
    assert [format_percent(report.tiers[t]) for t in ("simple", "medium", "hard")] == ["86.67%", "68.00%", "50.00%"]
    assert format_percent(report.overall) == "72.22%"
    three = BenchmarkReport([EvalOutcome("a", "simple", 1), EvalOutcome("b", "simple", 1),
                             EvalOutcome("c", "medium", 0, failure_reason="crash")])
    assert format_percent(three.overall) == "66.67%"
    assert format_percent(three.tiers["hard"]) == "n/a"
    assert "86.67%" in report.render_table().splitlines()[1]


def test_fixture_errors_are_excluded_from_accuracy():
    report = BenchmarkReport([EvalOutcome("a", "simple", 1),
                              EvalOutcome("b", "simple", 0, fixture_error="sample solution failed")])
    assert report.overall == 1.0 and report.to_dict()["fixture_errors"] == ["b"]


def test_outcome_invariants():
    with pytest.raises(ValueError):
        EvalOutcome("a", "simple", 2)
    with pytest.raises(ValueError):
        EvalOutcome("a", "simple", 1, failure_reason="crash")


def _copy_fixture(tmp_path, name="simple_invert"):
    dst = tmp_path / name
    shutil.copytree(BENCH_FIXTURES / name, dst)
    return dst


def test_load_fixture_errors(tmp_path):
    d = _copy_fixture(tmp_path)
    fx = load_fixture(d)
    assert fx.difficulty == "simple" and fx.expected and fx.requirement.input_files[0].path == "input.png"
    (d / "solution" / "main.py").unlink()
    with pytest.raises(FixtureError, match="sample_solution absent"):
        load_fixture(d)
    d = _copy_fixture(tmp_path / "b")
    shutil.rmtree(d / "expected")
    with pytest.raises(FixtureError, match="test_module absent"):
        load_fixture(d)
    d = _copy_fixture(tmp_path / "c")
    text = (d / "manifest.txt").read_text().replace("difficulty: simple", "difficulty: extreme")
    (d / "manifest.txt").write_text(text)
    with pytest.raises(FixtureError, match="unknown difficulty"):
        load_fixture(d)


def _spec(tmp_path):
    return SandboxSpec("imgproc-base", tmp_path / "sb", timeout=10)


def test_evaluate_pass_crash_noise_and_mismatch(tmp_path):
    fx = load_fixture(BENCH_FIXTURES / "simple_invert")
    sb = Sandbox()
    ok = evaluate_project(fx, fx.sample_solution, sb, _spec(tmp_path))
    assert ok.acc == 1 and ok.failure_reason is None
    crash = evaluate_project(fx, "raise SystemExit(3)\n", sb, _spec(tmp_path))
    assert (crash.acc, crash.failure_reason) == (0, "crash")
    noisy = fx.sample_solution + (
        "\nimport numpy as _np\nfrom PIL import Image as _I\n_a = _np.array(_I.open('output.png'))\n"
        "_a[0, 0] = 255 - _a[0, 0]\n_I.fromarray(_a).save('output.png')\n")
    near = evaluate_project(fx, noisy, sb, _spec(tmp_path))
    assert near.acc == 1
    assert evaluate_project(fx, noisy, sb, _spec(tmp_path), CompareMode.EXACT).acc == 0
    blank = ("from PIL import Image\nim = Image.open('input.png')\n"
             "Image.new(im.mode, im.size).save('output.png')\n")
    wrong = evaluate_project(fx, blank, sb, _spec(tmp_path))
    assert (wrong.acc, wrong.failure_reason, wrong.flagged_for_manual_review) == (0, "output mismatch", True)
    missing = evaluate_project(fx, None, sb, _spec(tmp_path), generation_error="pipeline failed")
    assert missing.failure_reason == "generation failed"
    assert sb.counters["evaluation_solution"] == 6 and sb.counters["evaluation_generated"] == 5


def test_evaluate_timeout_and_broken_solution(tmp_path):
    fx = load_fixture(BENCH_FIXTURES / "simple_invert")
    sb = Sandbox()
    slow = evaluate_project(fx, "while True:\n    pass\n", sb, SandboxSpec("imgproc-base", tmp_path / "sb", timeout=1))
    assert slow.failure_reason == "timeout"
    d = _copy_fixture(tmp_path / "fx")
    (d / "solution" / "main.py").write_text("raise SystemExit(1)\n")
    broken = evaluate_project(load_fixture(d), fx.sample_solution, sb, _spec(tmp_path))
    assert broken.fixture_error and broken.fixture_error.startswith("sample solution failed")


def test_custom_comparator_script(tmp_path):
    fx = load_fixture(BENCH_FIXTURES / "hard_edge_map")
    assert fx.compare_script is not None
    sb = Sandbox()
    assert evaluate_project(fx, fx.sample_solution, sb, _spec(tmp_path)).acc == 1
    assert sb.counters["evaluation_compare"] == 1


def _shipped_generator():
    return PipelineGenerator(lambda fx: scripted_config(Script.from_yaml(BENCH_SCRIPTS / f"{fx.id}.yaml")))


def test_shipped_benchmark_end_to_end(tmp_path):
    report = run_benchmark(BENCH_FIXTURES, _shipped_generator(), Sandbox(), _spec(tmp_path), out_dir=tmp_path / "out")
    assert {t: format_percent(v) for t, v in report.tiers.items()} == {
        "simple": "100.00%", "medium": "100.00%", "hard": "50.00%"}
    assert format_percent(report.overall) == "83.33%"
    data = json.loads((tmp_path / "out" / "report.json").read_text())
    assert data["flagged_for_manual_review"] == ["hard_equalize"]
    assert data["cost"]["total_cost"] == 0
    assert (tmp_path / "out" / "report.txt").read_text() == report.render_table()


def test_fixture_load_errors_become_fixture_errors(tmp_path):
    root = tmp_path / "fx"
    _copy_fixture(root)
    bad = _copy_fixture(root, "simple_grayscale")
    (bad / "solution" / "main.py").unlink()
    report = run_benchmark(root, _shipped_generator(), Sandbox(), _spec(tmp_path), out_dir=tmp_path / "out")
    assert [o.project_id for o in report.fixture_errors] == ["simple_grayscale"]
    assert report.overall == 1.0


def test_command_generator(tmp_path):
    fx_dir = _copy_fixture(tmp_path / "fx")
    script = tmp_path / "gen.py"
    script.write_text("import shutil, sys\nshutil.copy(sys.argv[1] + '/solution/main.py', sys.argv[2] + '/main.py')\n")
    gen = CommandGenerator([sys.executable, str(script), "{fixture}", "{output}"])
    report = run_benchmark(tmp_path / "fx", gen, Sandbox(), _spec(tmp_path), out_dir=tmp_path / "out")
    assert report.overall == 1.0
    failing = CommandGenerator([sys.executable, "-c", "raise SystemExit(2)"])
    out = failing.generate(load_fixture(fx_dir), tmp_path / "w")
    assert out.source is None and "exited 2" in out.error
