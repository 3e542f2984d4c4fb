import pytest
from hypothesis import given, strategies as st

from twist.corpus import corpus_files, load_source
from twist.syntax import (
    BOOL, MIXED, PURE, QUBIT, UNIT, App, BoolLit, Gate, If, Let, ParseError, Prod, Quantum, UnknownAlias,
    desugar, format_type, parse_expr, parse_program, parse_type, pretty_print, tokenize,
)


def test_tokenize_skips_nested_comments_and_tracks_lines():
    toks = tokenize("fun (* a (* nested *) comment *)\n  main")
    assert [(t.kind, t.text) for t in toks] == [("kw", "fun"), ("ident", "main"), ("eof", "")]
    assert (toks[1].line, toks[1].col) == (2, 3)


def test_unterminated_comment_is_a_parse_error():
    with pytest.raises(ParseError, match="unterminated comment"):
        tokenize("fun (* open")


def test_unexpected_character_reports_position():
    with pytest.raises(ParseError) as err:
        tokenize("let x = $")
    assert err.value.span == (1, 9)


@pytest.mark.parametrize("src, expected", [
    ("qubit<P>", Quantum(QUBIT, PURE)),
    ("bool", BOOL),
    ("unit", UNIT),
])
def test_parse_simple_types(src, expected):
    assert parse_type(src) == expected


def test_parse_product_and_entangled_types():
    t = parse_type("(qubit & qubit)<M> * bool")
    assert isinstance(t, Prod)
    assert t.fst.purity == MIXED and t.snd == BOOL
    assert format_type(t) == "((qubit & qubit)<M> * bool)"


def test_quantum_type_without_purity_is_rejected():
    with pytest.raises(ParseError, match="purity"):
        parse_program("fun main () : qubit = qinit ()")


@pytest.mark.parametrize("lit, value", [("T", True), ("true", True), ("F", False), ("false", False)])
def test_boolean_literal_spellings(lit, value):
    assert parse_expr(lit) == BoolLit(value)


def test_gate_application_parses_as_gate_node():
    e = parse_expr("CNOT (H (qinit ()), qinit ())")
    assert isinstance(e, Gate) and e.name == "CNOT"


def test_function_application_and_if():
    e = parse_expr("if measure (q) then f (x) else g (x)")
    assert isinstance(e, If)
    assert isinstance(e.then, App)


def test_missing_expression_reports_end_of_input():
    with pytest.raises(ParseError, match="end of input"):
        parse_program("fun main () : qubit<P> = (")


def test_desugar_resolves_aliases():
    p = desugar(parse_program("type two = (qubit & qubit)<P>\nfun main () : two = bell ()"
                              "\nfun bell () : two = CNOT (H (qinit ()), qinit ())"))
    assert p.aliases == ()
    assert format_type(p.decl("main").ret) == "(qubit & qubit)<P>"


def test_unknown_alias():
    with pytest.raises(UnknownAlias):
        desugar(parse_program("fun main () : foo = qinit ()"))


def test_desugared_lets_are_binary():
    p = desugar(parse_program("fun main () : bool = let x = T in let y = F in x"))
    body = p.decl("main").body
    assert isinstance(body, Let) and isinstance(body.body, Let)


@pytest.mark.parametrize("name", corpus_files())
def test_pretty_print_round_trips(name):
    prog = desugar(parse_program(load_source(name)))
    printed = pretty_print(prog)
    again = desugar(parse_program(printed))
    assert again == prog
    assert pretty_print(again) == printed


idents = st.from_regex(r"[a-z][a-z0-9_]{0,6}", fullmatch=True).filter(
    lambda s: s not in {"fun", "type", "let", "in", "if", "then", "else", "measure", "qinit",
                        "entangle", "split", "cast", "true", "false", "qubit", "bool", "unit"})


@given(st.lists(idents, min_size=1, max_size=6, unique=True))
def test_let_chains_round_trip(names):
    body = " in ".join(f"let {x} = T" for x in names) + f" in {names[-1]}"
    prog = desugar(parse_program(f"fun main () : bool = {body}"))
    assert desugar(parse_program(pretty_print(prog))) == prog
