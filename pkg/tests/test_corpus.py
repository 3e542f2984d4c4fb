import pytest
from hypothesis import given, strategies as st

from twist.cli import compile_source
from twist.corpus import (
    MODMUL_SIZES, benchmarks, corpus_files, load_golden, load_source, modmul_source, multiplier,
    number_word, swap_schedule,
)
from twist.syntax import tokenize
from twist.typecheck import qubit_count


def _texts(src: str) -> list[tuple[str, str]]:
    return [(t.kind, t.text) for t in tokenize(src)]


def test_generator_reproduces_the_bundled_four_qubit_programs():
    assert _texts(modmul_source(4)) == _texts(load_source("modmul_4"))
    # the bundled broken variant spells aliases out, so compare after elaboration
    broken = compile_source(modmul_source(4, not_inverse=True)).program
    assert broken == compile_source(load_source("modmul_4_not_inverse")).program


@pytest.mark.parametrize("n, fwd, inv", [(3, 3, 5), (4, 7, 13), (8, 127, 253), (12, 2047, 4093)])
def test_multipliers_are_mutual_inverses(n, fwd, inv):
    m = (1 << n) - 1
    sched = swap_schedule(n)
    assert multiplier(n, sched) == fwd
    assert multiplier(n, list(reversed(sched))) == inv
    assert (fwd * inv) % m == 1


def test_broken_inverse_schedule_is_not_a_multiplication():
    sched = list(reversed(swap_schedule(4)))
    sched[1] = (1, 3)
    assert multiplier(4, sched) is None


@pytest.mark.parametrize("n, expected", [
    (3, [(1, 2), (1, 3)]),
    (4, [(2, 3), (1, 2), (1, 4)]),
    (5, [(3, 4), (2, 3), (1, 2), (1, 5)]),
])
def test_swap_schedule(n, expected):
    assert swap_schedule(n) == expected


@pytest.mark.parametrize("k, word", [(0, "zero"), (5, "five"), (13, "thirteen"), (20, "twenty"),
                                     (33, "thirty_three"), (49, "forty_nine")])
def test_number_word(k, word):
    assert number_word(k) == word


@given(st.integers(3, 16))
def test_generated_modmul_uses_one_control_plus_the_register(n):
    tp = compile_source(modmul_source(n))
    assert qubit_count(tp.decl("main").ret) == n + 1


def test_modmul_requires_three_register_qubits():
    with pytest.raises(ValueError):
        modmul_source(2)


def test_golden_table_shape():
    rows = load_golden()["rows"]
    assert len(rows) == 21
    assert len({r["name"] for r in rows}) == 21
    sizes = sorted(r["modmul"]["n"] for r in rows if "modmul" in r)
    assert sizes == sorted(2 * MODMUL_SIZES)
    for r in rows:
        # a static rejection alone does not make a program invalid
        assert r["valid"] == (r["types"] == "pass" and r["dynamic"] == "pass")


def test_every_golden_file_is_bundled():
    bundled = set(corpus_files())
    for b in benchmarks(load_golden()):
        if b.file is not None:
            assert b.file in bundled
        assert b.source().strip()
