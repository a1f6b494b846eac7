import csv
import json
import math

import pytest

from mra import constant, eval_point, load_function, load_kernel, save_function
from mra.cli import build_parser, gaussian_box_self_energy, main

from conftest import HYDROGEN_REFERENCE

# closed forms for exp(-|x|^2) over R^3
GAUSSIAN_VALUES = {"trace": 5.5683279, "norm2": 1.403104, "self_energy": 24.739429}


def _run(argv, tmp_path, name="report.json"):
    path = tmp_path / name
    code = main(argv + ["--report", str(path)])
    report = json.loads(path.read_text()) if path.exists() else None
    return code, report


def _read_sample(path):
    lines = path.read_text().splitlines()
    assert lines[0] == "# mra-sample/1"
    return list(csv.DictReader(lines[1:]))


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("demo")
    fn = tmp / "g.mra"
    code, report = _run(["demo-gaussian", "--single-threaded", "--save-function", str(fn)], tmp)
    return code, report, fn


def test_parser_defaults():
    args = build_parser().parse_args(["demo-gaussian"])
    assert (args.k, args.eps, args.domain) == (6, 1e-4, 6.0)


def test_demo_defaults(demo):
    code, report, _ = demo
    assert code == 0 and report["pass"]
    assert report["format"] == "mra-report/1"
    for name, value in GAUSSIAN_VALUES.items():
        assert abs(report["checks"][name]["value"] - value) <= 1e-4 * value


def test_demo_tight_precision(tmp_path):
    code, report = _run(["demo-gaussian", "--k", "8", "--eps", "1e-6", "--op-eps", "1e-8"], tmp_path)
    assert code == 0
    for name, value in GAUSSIAN_VALUES.items():
        assert abs(report["checks"][name]["value"] - value) <= 1e-6 * value


def test_demo_small_box(tmp_path):
    code, report = _run(["demo-gaussian", "--domain", "1"], tmp_path)
    assert code == 0
    assert report["checks"]["trace"]["value"] < GAUSSIAN_VALUES["trace"]
    assert report["checks"]["trace"]["reference"] == pytest.approx(math.erf(1.0) ** 3 * math.pi**1.5, rel=1e-14)


def test_demo_fails_impossible_tolerance(tmp_path):
    code, report = _run(["demo-gaussian", "--k", "4", "--eps", "1e-2", "--tolerance", "1e-12"], tmp_path)
    assert code == 1 and report["pass"] is False


def test_self_energy_reference_full_box():
    assert gaussian_box_self_energy([-6.0] * 3, [6.0] * 3) == pytest.approx(math.sqrt(2.0) * math.pi**2.5, rel=1e-10)


def test_demo_reports_are_reproducible(tmp_path):
    argv = ["demo-gaussian", "--k", "5", "--eps", "1e-3", "--single-threaded"]
    _, a = _run(argv, tmp_path, "a.json")
    _, b = _run(argv, tmp_path, "b.json")
    a.pop("timing"), b.pop("timing")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_demo_parallel_mode(tmp_path):
    code, report = _run(["demo-gaussian", "--threads", "2"], tmp_path)
    assert code == 0 and report["config"]["threads"] == 2


@pytest.mark.parametrize("kind, extra, exact", [
    ("coulomb", [], lambda r: 1.0 / r),
    ("bsh", ["--mu", "1"], lambda r: math.exp(-r) / (4.0 * math.pi * r)),
])
def test_fit_kernel(tmp_path, kind, extra, exact):
    out = tmp_path / "k.json"
    code, report = _run(["fit-kernel", "--kind", kind, "--eps", "1e-6", "--r-lo", "1e-3", "--r-hi", "20", "--out", str(out)] + extra, tmp_path)
    assert code == 0 and report["max_rel_err"] <= 1e-6
    K = load_kernel(out)
    for r in (1e-3, 0.1, 7.0, 20.0):
        assert abs(K(r) - exact(r)) <= 1e-6 * exact(r)


def test_fit_kernel_bad_range(tmp_path):
    code, report = _run(["fit-kernel", "--r-lo", "2", "--r-hi", "1"], tmp_path)
    assert code == 2 and report is None


def test_fit_kernel_unreachable(tmp_path):
    code, report = _run(["fit-kernel", "--eps", "1e-13"], tmp_path)
    assert code == 1 and report["pass"] is False


def test_solve_harmonic(tmp_path):
    hist, psi = tmp_path / "h.json", tmp_path / "psi.mra"
    code, report = _run(
        ["solve", "--potential", "harmonic", "--shift", "5", "--eps", "1e-5", "--k", "8",
         "--history", str(hist), "--out", str(psi)], tmp_path,
    )
    assert code == 0
    assert abs(report["energy"] + 3.5) <= 1e-4
    history = json.loads(hist.read_text())
    assert history["format"] == "mra-history/1"
    assert len(history["history"]) == report["iterations"]
    f = load_function(psi)
    sample = tmp_path / "s.csv"
    assert main(["sample", str(psi), "--resolution", "5", "--out", str(sample)]) == 0
    rows = _read_sample(sample)
    for row in rows:
        p = [float(row[a]) for a in "xyz"]
        assert float(row["value"]) == eval_point(f, p)


def test_solve_hydrogen(tmp_path):
    code, report = _run(["solve", "--potential", "hydrogen", "--smoothing", "1e-3", "--domain", "20", "--eps", "1e-5"], tmp_path)
    assert code == 0
    assert abs(report["energy"] + 0.5) <= 5e-3
    assert abs(report["energy"] - HYDROGEN_REFERENCE) <= 1e-4


def test_solve_forced_non_convergence(tmp_path):
    hist = tmp_path / "h.json"
    code, report = _run(["solve", "--max-iter", "1", "--k", "6", "--eps", "1e-4", "--history", str(hist)], tmp_path)
    assert code == 1 and report["converged"] is False
    assert len(json.loads(hist.read_text())["history"]) == 1


def test_solve_usage_errors(tmp_path):
    assert main(["solve", "--E0", "0.5"]) == 2
    assert main(["solve", "--domain", "-1"]) == 2


def test_sample_constant(tmp_path):
    fn = tmp_path / "one.mra"
    save_function(constant(1.0, (-2.0, 2.0), dim=3, k=4), fn)
    out = tmp_path / "one.csv"
    assert main(["sample", str(fn), "--axes", "xy", "--resolution", "4", "--out", str(out)]) == 0
    rows = _read_sample(out)
    assert len(rows) == 16
    assert all(float(r["value"]) == 1.0 for r in rows)


def test_sample_gaussian_on_axis(demo, tmp_path, capsys):
    _, _, fn = demo
    assert main(["sample", str(fn), "--lo", "1", "--hi", "1", "--resolution", "1"]) == 0
    rows = _read_sample_text(capsys.readouterr().out)
    assert abs(float(rows[0]["value"]) - math.exp(-1.0)) <= 1e-4


def _read_sample_text(text):
    lines = text.splitlines()
    assert lines[0] == "# mra-sample/1"
    return list(csv.DictReader(lines[1:]))


@pytest.mark.parametrize("extra", [["--resolution", "0"], ["--lo", "-7"], ["--axes", "xx"], ["--at", "0", "0", "9"]])
def test_sample_usage_errors(demo, extra):
    _, _, fn = demo
    assert main(["sample", str(fn)] + extra) == 2


def test_sample_missing_file(tmp_path):
    assert main(["sample", str(tmp_path / "nope.mra")]) == 2
