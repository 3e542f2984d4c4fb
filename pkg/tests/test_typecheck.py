import pytest
from hypothesis import given, settings, strategies as st

from twist.cli import EXIT_PARSE, EXIT_TYPE, FrontEndError, compile_source
from twist.corpus import corpus_files, load_source
from twist.fuzz import generate
from twist.syntax import MIXED, PURE, QUBIT, Cast, Entangle, Quantum, Split, pretty_print, walk
from twist.typecheck import (
    ArityError, BranchTypeMismatch, LinearityError, ProgramError, PurityMismatch,
    PurityUnificationError, UnknownVariable, check_expr, common_purity, demands_pure, is_linear,
    qubit_count,
)

REJECTED = {
    "and_oracle_not_uncomputed.tw": "PurityMismatch",
    "bell_ghz.tw": "PurityMismatch",
    "shor_code_drop.tw": "LinearityError",
}


@pytest.mark.parametrize("name", corpus_files())
def test_corpus_typing_verdicts(name):
    if name in REJECTED:
        with pytest.raises(FrontEndError) as err:
            compile_source(load_source(name))
        assert err.value.err.code == REJECTED[name]
        assert err.value.exit_code == EXIT_TYPE
    else:
        compile_source(load_source(name))


@pytest.mark.parametrize("src, error", [
    ("fun main () : (qubit & qubit)<M> = let q = qinit () in CNOT (q, q)", LinearityError),
    ("fun main () : bool = let q = qinit () in let b = measure (q) in measure (q)", LinearityError),
    ("fun main () : bool = let (a : qubit<M>, b : qubit<M>) = CNOT (H (qinit ()), qinit ()) "
     "in measure (a)", LinearityError),
    ("fun main () : bool = if measure (H (qinit ())) then qinit () else T", BranchTypeMismatch),
    ("fun main () : qubit<P> = y", UnknownVariable),
    ("fun main () : qubit<P> = CNOT (qinit ())", ArityError),
    ("fun f (q : qubit<P>) : qubit<'a> = q\nfun main () : qubit<P> = f (qinit ())",
     PurityUnificationError),
    ("fun f (q : qubit<P>) : qubit<P> = q", ProgramError),
    ("fun main () : bool = T\nfun main () : bool = F", ProgramError),
])
def test_type_errors(src, error):
    with pytest.raises(FrontEndError) as err:
        compile_source(src)
    assert isinstance(err.value.err, error)
    assert err.value.err.render("x.tw").startswith("x.tw:")


def test_parse_errors_carry_their_own_exit_code():
    with pytest.raises(FrontEndError) as err:
        compile_source("fun main () : qubit<P> = (")
    assert err.value.exit_code == EXIT_PARSE


def test_entangle_of_mixed_components_needs_mixed_purity():
    src = ("fun main () : (qubit & qubit)<P> =\n"
           "  let (a : qubit<M>, b : qubit<M>) = CNOT (qinit (), qinit ()) in\n"
           "  entangle<P>((a, b))")
    with pytest.raises(FrontEndError) as err:
        compile_source(src)
    assert isinstance(err.value.err, PurityMismatch)


def test_inferred_conversions_match_the_explicit_program():
    inferred = compile_source(load_source("conversion_inferred")).program
    explicit = compile_source(load_source("conversion_explicit")).program
    assert inferred.decl("main") == explicit.decl("main")

    def ops(p):
        return sorted(type(e).__name__ + str(getattr(e, "purity", ""))
                      for d in p.decls for e in walk(d.body)
                      if isinstance(e, (Cast, Split, Entangle)))

    assert ops(inferred) == ops(explicit)


def test_implicit_cast_to_pure_is_inserted_and_left_to_the_analysis():
    tp = compile_source(
        "fun f (q : qubit<P>) : qubit<P> = q\n"
        "fun main () : qubit<P> =\n"
        "  let (a : qubit<M>, b : qubit<M>) = CNOT (H (qinit ()), qinit ()) in\n"
        "  let _ = measure (b) in f (a)")
    casts = [e for e in walk(tp.decl("main").body) if isinstance(e, Cast)]
    assert any(c.purity == PURE for c in casts)


def test_polymorphic_function_instantiates_per_call():
    tp = compile_source(load_source("purity_polymorphic"))
    assert tp.schemes["f"].vars == frozenset({"a"})
    assert "qubit<P>" in pretty_print(tp.program)


def test_unreachable_mixed_values_cannot_be_dropped():
    with pytest.raises(FrontEndError) as err:
        compile_source("fun main () : bool =\n"
                       "  let (a : qubit<M>, b : qubit<M>) = CNOT (H (qinit ()), qinit ()) in\n"
                       "  measure (a)")
    assert "cannot be discarded" in err.value.err.message


def test_type_helpers():
    q = Quantum(QUBIT, PURE)
    assert is_linear(q) and qubit_count(q) == 1
    assert common_purity(q) == PURE
    assert demands_pure(q)
    assert not demands_pure(Quantum(QUBIT, MIXED))


def test_check_expr_rejects_qubit_set_mismatch():
    tp = compile_source("fun main () : qubit<P> = qinit ()")
    with pytest.raises(LinearityError):
        check_expr(tp.decl("main").body, tp.schemes, {}, delta={"q0"})


@pytest.mark.parametrize("name", [n for n in corpus_files() if n not in REJECTED])
def test_elaboration_is_idempotent(name):
    tp = compile_source(load_source(name))
    again = compile_source(pretty_print(tp.program))
    assert again.program == tp.program


@settings(max_examples=60)
@given(st.integers(min_value=0, max_value=10**6))
def test_generated_programs_typecheck_and_elaborate_idempotently(seed):
    tp = compile_source(generate(seed))
    assert compile_source(pretty_print(tp.program)).program == tp.program
