import csv
import io
import json
import time
from pathlib import Path

import numpy as np
import pytest

import twist
from twist.cli import (
    BENCH_COLUMNS, EXIT_CONFIG, EXIT_DYNAMIC, EXIT_MISMATCH, EXIT_OK, EXIT_PARSE, EXIT_STATIC,
    EXIT_TYPE, bench_program, compile_source, load_expected, main, resolve_seed, run_corpus,
    verify_source,
)
from twist.corpus import load_golden, load_source, modmul_source
from twist.interpreter import run_pure

PROGRAMS = Path(twist.__file__).parent / "programs"


def prog(name: str) -> str:
    return str(PROGRAMS / f"{name}.tw")


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("argv, code", [
    (("check", prog("teleport_deferred")), EXIT_OK),
    (("check", prog("shor_code_drop")), EXIT_TYPE),
    (("analyze", prog("teleport_deferred")), EXIT_OK),
    (("analyze", prog("grover_bad_oracle")), EXIT_STATIC),
    (("run", prog("teleport_nocz")), EXIT_DYNAMIC),
    (("run", prog("grover_bad_oracle")), EXIT_STATIC),
    (("run", prog("grover_bad_oracle"), "--mode", "mixed"), EXIT_DYNAMIC),
    (("verify", prog("deutsch")), EXIT_OK),
    (("verify", prog("deutsch_bad_result_basis")), EXIT_DYNAMIC),
    (("verify", prog("teleport_measure")), EXIT_OK),
    (("verify", prog("teleport_measure"), "--mode", "pure"), EXIT_STATIC),
    (("verify", prog("and_oracle_not_uncomputed")), EXIT_TYPE),
])
def test_exit_codes(capsys, argv, code):
    assert run_cli(capsys, *argv)[0] == code


def test_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.tw"
    bad.write_text("fun main () : qubit<P> = let in")
    code, _, err = run_cli(capsys, "check", str(bad))
    assert code == EXIT_PARSE
    assert "bad.tw" in err


def test_missing_input_is_a_config_error(tmp_path, capsys):
    code, _, err = run_cli(capsys, "check", str(tmp_path / "absent.tw"))
    assert code == EXIT_CONFIG and "cannot read" in err


def test_check_json_lists_signatures(capsys):
    code, out, _ = run_cli(capsys, "check", prog("teleport_deferred"), "--json")
    data = json.loads(out)
    assert code == 0 and data["verdict"] == "pass"
    assert data["functions"]["teleport"] == "qubit<P> -> qubit<P>"


def test_analyze_text_names_failing_site(capsys):
    _, out, _ = run_cli(capsys, "analyze", prog("grover_bad_oracle"))
    assert "FAIL" in out and "line 25" in out
    assert out.rstrip().endswith("static analysis: FAIL")


def test_verify_json_report(capsys):
    code, out, _ = run_cli(capsys, "verify", prog("teleport_nocz"), "--json")
    rep = json.loads(out)
    assert code == EXIT_DYNAMIC
    assert (rep["typecheck"], rep["static"], rep["dynamic"], rep["mode"]) == ("pass", "pass", "fail", "pure")


def test_run_is_deterministic_for_a_seed(capsys):
    outs = {run_cli(capsys, "run", prog("random_bell"), "--seed", "7")[1] for _ in range(2)}
    assert len(outs) == 1


def test_seed_falls_back_to_environment(monkeypatch):
    monkeypatch.delenv("TWIST_SEED", raising=False)
    assert resolve_seed(None) == 0
    monkeypatch.setenv("TWIST_SEED", "42")
    assert resolve_seed(None) == 42
    assert resolve_seed(3) == 3


def test_bad_seed_environment_is_a_config_error(monkeypatch, capsys):
    monkeypatch.setenv("TWIST_SEED", "nope")
    assert run_cli(capsys, "run", prog("coin_flip"))[0] == EXIT_CONFIG


def test_environment_seed_matches_flag(monkeypatch, capsys):
    flag = run_cli(capsys, "run", prog("random_bell"), "--seed", "11")[1]
    monkeypatch.setenv("TWIST_SEED", "11")
    assert run_cli(capsys, "run", prog("random_bell"))[1] == flag


def test_enumerate_coin_flip(capsys):
    code, out, _ = run_cli(capsys, "run", prog("coin_flip"), "--mode", "enumerate")
    branches = json.loads(out)["branches"]
    assert code == 0
    assert sorted(b["value"] for b in branches) == [False, True]
    assert all(b["prob"] == pytest.approx(0.5) for b in branches)


def test_mixed_run_reports_density_and_agreement(capsys):
    code, out, _ = run_cli(capsys, "run", prog("random_bell"), "--mode", "mixed", "--agreement")
    data = json.loads(out)
    assert code == 0 and data["agreement"]["ok"]
    assert data["trace"] == pytest.approx(1.0)
    # dephased coin qubits stay in the domain; trace them out
    names, keep = data["qubits"], data["value"]["qubits"]
    rho = np.array([[complex(*z) for z in row] for row in data["rho"]])
    t = rho.reshape((2,) * (2 * len(names)))
    for ax in sorted((names.index(x) for x in names if x not in keep), reverse=True):
        t = np.trace(t, axis1=ax, axis2=ax + t.ndim // 2)
    assert np.allclose(t.reshape(4, 4), np.eye(4) / 4)


def test_out_flag_writes_file(tmp_path, capsys):
    out = tmp_path / "sigs.txt"
    assert run_cli(capsys, "check", prog("deutsch"), "--out", str(out))[0] == 0
    assert "main :" in out.read_text()


def test_bench_csv_columns_and_single_rep(capsys):
    code, out, _ = run_cli(capsys, "bench", "--modmul", "4", "--reps", "1")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0
    assert tuple(rows[0]) == BENCH_COLUMNS
    assert rows[0]["name"] == "ModMul(4)" and rows[0]["n"] == "5"
    assert rows[0]["sem_total"] == "" and rows[0]["error"] == ""
    assert float(rows[0]["mean_verify_s"]) <= float(rows[0]["mean_total_s"])


def test_bench_records_static_rejection(capsys):
    _, out, _ = run_cli(capsys, "bench", prog("grover_bad_oracle"), "--reps", "1")
    row = next(csv.DictReader(io.StringIO(out)))
    assert row["error"] == "static analysis failed" and row["mean_total_s"] == ""


def test_bench_rejects_zero_reps(capsys):
    assert run_cli(capsys, "bench", "--modmul", "4", "--reps", "0")[0] == EXIT_CONFIG


def test_bench_sem_with_repetitions():
    rec = bench_program(compile_source(modmul_source(4)), "m4", reps=3)
    assert rec.sem_total is not None and rec.sem_total >= 0
    assert rec.reps == 3 and 0 <= rec.overhead_pct <= 100


def test_corpus_command_matches_golden(capsys):
    code, out, _ = run_cli(capsys, "corpus")
    assert code == EXIT_OK
    assert "all 21 rows match" in out


def test_corpus_flags_only_the_mutated_row():
    src = load_source("teleport_deferred").replace("CZ (q1, q3)", "CNOT (q1, q3)")
    reports, diffs = run_corpus(load_golden(), overrides={"Teleport-Deferred": src})
    assert {d.name for d in diffs} == {"Teleport-Deferred"}
    assert [(d.column, d.expected, d.actual) for d in diffs] == [("dynamic", "pass", "fail")]


def test_corpus_mismatch_exit_code(tmp_path, capsys):
    golden = load_golden()
    golden["rows"][0]["dynamic"] = "fail"
    path = tmp_path / "golden.json"
    path.write_text(json.dumps(golden))
    code, out, _ = run_cli(capsys, "corpus", "--expected", str(path))
    assert code == EXIT_MISMATCH
    assert "Teleport-Deferred: dynamic expected fail, got pass" in out


@pytest.mark.parametrize("content", [None, "{not json", '{"rows": 3}'])
def test_bad_golden_file_is_a_config_error(tmp_path, capsys, content):
    path = tmp_path / "golden.json"
    if content is not None:
        path.write_text(content)
    assert run_cli(capsys, "corpus", "--expected", str(path))[0] == EXIT_CONFIG


def test_load_expected_accepts_bundled_default():
    assert len(load_expected(None)["rows"]) == 21


def test_verify_skips_later_stages_after_type_error():
    rep = verify_source(load_source("bell_ghz"), "Bell-GHZ")
    assert (rep.typecheck, rep.static, rep.dynamic) == ("fail", "skipped", "skipped")


def test_timer_overhead_is_negligible():
    """Each timed check costs two perf_counter calls; that must be under 1% of the time measured."""
    n = 20000
    t0 = time.perf_counter()
    for _ in range(n):
        time.perf_counter()
    per_call = (time.perf_counter() - t0) / n
    r = run_pure(compile_source(modmul_source(8)), seed=0)
    assert r.events
    assert 2 * per_call * len(r.events) < 0.01 * r.verify_seconds
