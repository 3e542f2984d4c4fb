from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twist.gates import GateSpec, apply_dense, apply_kernel, check_unitary, cphase_factor, gate_matrix
from twist.qstate import (
    CapacityError, DuplicateTarget, NotSeparable, PureState, UnknownQubit, alloc_qubit, apply_gate,
    equal_up_to_phase, factor_state, fidelity, lambda2, measure_qubit, outcome_probability,
    schmidt_coefficients, separability_test, short_side_r, tensor,
)
from twist.syntax import GATE_ARITY

R2 = 1 / np.sqrt(2)


def bell(names=("a", "b")):
    return PureState(names, [R2, 0, 0, R2])


def random_state(rng, names):
    v = rng.normal(size=1 << len(names)) + 1j * rng.normal(size=1 << len(names))
    return PureState(names, v / np.linalg.norm(v))


ALL_GATES = [GateSpec(n) for n in GATE_ARITY if n != "CPHASE"] + [
    GateSpec("CPHASE", Fraction(1, 4)), GateSpec("CPHASE", Fraction(3, 8))]


@pytest.mark.parametrize("g", ALL_GATES, ids=lambda g: f"{g.name}{g.phase or ''}")
def test_gates_are_unitary(g):
    assert check_unitary(g)


def test_cphase_quarter_turn_on_basis_states():
    # diag(1, 1, 1, e^{i pi/2})
    u = gate_matrix(GateSpec("CPHASE", Fraction(1, 4)))
    assert np.array_equal(np.diag(u), np.array([1, 1, 1, 1j]))
    assert np.count_nonzero(u - np.diag(np.diag(u))) == 0
    s = PureState.basis("11", ["x", "y"])
    apply_gate(s, GateSpec("CPHASE", Fraction(1, 4)), ["x", "y"])
    assert s.amps[3] == 1j


def test_cphase_factor_snaps_and_wraps():
    assert cphase_factor(Fraction(1, 2)) == -1
    assert cphase_factor(Fraction(5, 4)) == 1j
    assert abs(cphase_factor(Fraction(1, 8)) - np.exp(1j * np.pi / 4)) < 1e-15


def test_gate_spec_validation():
    with pytest.raises(ValueError):
        GateSpec("CPHASE")
    with pytest.raises(ValueError):
        GateSpec("H", Fraction(1, 2))
    with pytest.raises(ValueError):
        GateSpec("Y")


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_GATES), st.integers(3, 5))
def test_in_place_kernels_match_dense_matrices(seed, g, n):
    rng = np.random.default_rng(seed)
    axes = [int(a) for a in rng.permutation(n)[: g.arity]]
    s = random_state(rng, [f"q{i}" for i in range(n)])
    expected = apply_dense(s.tensor_view().copy(), gate_matrix(g), axes)
    t = s.tensor_view().copy()
    apply_kernel(t, g, axes)
    assert np.allclose(t, expected, atol=1e-12)


def test_alloc_appends_zero_qubit_with_fresh_names():
    s, a = alloc_qubit(PureState())
    assert np.array_equal(s.amps, [1, 0])
    s, b = alloc_qubit(s)
    assert a != b
    one = PureState.basis("1", ["beta"])
    s, _ = alloc_qubit(one)
    assert np.array_equal(s.amps, [0, 0, 1, 0])


def test_alloc_respects_capacity():
    s = PureState(max_qubits=1)
    alloc_qubit(s)
    with pytest.raises(CapacityError):
        alloc_qubit(s)


def test_hadamard_and_bell_preparation():
    s, a = alloc_qubit(PureState())
    apply_gate(s, GateSpec("H"), [a])
    assert np.allclose(s.amps, [R2, R2])
    s, b = alloc_qubit(s)
    apply_gate(s, GateSpec("CNOT"), [a, b])
    assert np.allclose(s.amps, [R2, 0, 0, R2])


def test_gate_errors():
    s = bell()
    with pytest.raises(DuplicateTarget):
        apply_gate(s, GateSpec("CNOT"), ["a", "a"])
    with pytest.raises(UnknownQubit):
        apply_gate(s, GateSpec("H"), ["z"])
    with pytest.raises(ValueError):
        apply_gate(s, GateSpec("CNOT"), ["a"])


def test_measure_deterministic_one():
    outcome, prob, post = measure_qubit(PureState.basis("1", ["a"]), "a", 0.99)
    assert outcome is True and prob == 1.0 and post.n == 0


@pytest.mark.parametrize("u, outcome, rest", [(0.2, True, [0, 1]), (0.8, False, [1, 0])])
def test_measure_half_of_bell(u, outcome, rest):
    s = bell()
    assert outcome_probability(s, "a") == pytest.approx(0.5)
    got, prob, post = measure_qubit(s, "a", u)
    assert got is outcome and prob == pytest.approx(0.5)
    assert post.names == ["b"] and np.allclose(post.amps, rest)


def test_forced_outcome_with_zero_probability_is_an_error():
    with pytest.raises(Exception):
        measure_qubit(PureState.basis("0", ["a"]), "a", 0.0, force=True)


def test_schmidt_of_bell_and_plus_plus():
    c = schmidt_coefficients(bell(), ["a"]).coefficients
    assert np.allclose(c, [R2, R2])
    plus2 = PureState(["a", "b"], [0.5, 0.5, 0.5, 0.5])
    c = schmidt_coefficients(plus2, ["a"]).coefficients
    assert np.allclose(c, [1, 0], atol=1e-12)


def test_separability_basic_cases():
    assert not separability_test(bell(), ["a"])
    assert separability_test(tensor(PureState(["a"], [R2, R2]), PureState(["b"], [0, 1])), ["a"])
    assert separability_test(bell(), [])


def test_factor_state_recovers_factors():
    a = PureState(["alpha"], [R2, R2])
    b = PureState(["beta"], [0, 1])
    fa, fb = factor_state(tensor(a, b), ["alpha"])
    assert fidelity(fa, a) >= 1 - 1e-9 and fidelity(fb, b) >= 1 - 1e-9
    with pytest.raises(NotSeparable):
        factor_state(bell(), ["a"])


def test_equal_up_to_phase():
    rng = np.random.default_rng(3)
    s = random_state(rng, ["x", "y"])
    t = PureState(["x", "y"], np.exp(0.7j) * s.amps)
    assert equal_up_to_phase(s, t) and equal_up_to_phase(s, s)
    assert not equal_up_to_phase(PureState.basis("0", ["x"]), PureState.basis("1", ["x"]))


def test_reorder_round_trip():
    rng = np.random.default_rng(5)
    s = random_state(rng, ["a", "b", "c"])
    orig = s.amps.copy()
    s.reorder(["c", "a", "b"]).reorder(["a", "b", "c"])
    assert np.array_equal(s.amps, orig)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_schmidt_coefficients_are_normalized(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    names = [f"q{i}" for i in range(n)]
    s = random_state(rng, names)
    cut = [x for x in names if rng.random() < 0.5]
    c = schmidt_coefficients(s, cut).coefficients
    assert abs(np.sum(c ** 2) - 1) <= 1e-9


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_product_states_pass_across_their_cut(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    k = int(rng.integers(1, n))
    names = [f"q{i}" for i in rng.permutation(n)]
    s = tensor(random_state(rng, names[:k]), random_state(rng, names[k:]))
    s.reorder(sorted(names))
    c = schmidt_coefficients(s, names[:k]).coefficients
    assert lambda2(c) <= 1e-9
    assert separability_test(s, names[:k])


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_short_side_r_matches_full_svd(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    cols = 2 ** int(rng.integers(3, 11))
    rank = int(rng.integers(1, k + 1))
    m = (rng.normal(size=(k, rank)) + 1j * rng.normal(size=(k, rank))) @ (
        rng.normal(size=(rank, cols)) + 1j * rng.normal(size=(rank, cols)))
    if rng.random() < 0.3:
        m[int(rng.integers(k))] *= 1e-9
    m /= np.linalg.norm(m)
    if rng.random() < 0.5:
        m = np.asfortranarray(m)
    want = np.linalg.svd(m, compute_uv=False)
    got = np.linalg.svd(short_side_r(m), compute_uv=False)
    assert np.allclose(got, want, atol=1e-13, rtol=0)
