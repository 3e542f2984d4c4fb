"""Partial density matrices over named qubits.

A ``PartialDensity`` stores a 2^n x 2^n matrix whose row and column bits follow
``names`` (first name is the most significant bit). Gate kernels run in place on
the ket and bra axes of a (2,)*2n view, so a 13-qubit matrix never needs a second
full-size buffer.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .gates import GateSpec, apply_kernel
from .qstate import DEFAULT_TOL, PureState, UnknownQubit

DEFAULT_MAX_QUBITS = 13


class DensityError(Exception):
    pass


class ZeroTrace(DensityError):
    pass


class IncompatibleDomains(DensityError):
    pass


class PartialDensity:
    def __init__(self, names: Sequence[str], mat: np.ndarray):
        self.names = list(names)
        if len(set(self.names)) != len(self.names):
            raise IncompatibleDomains("qubit names must be distinct")
        d = 1 << len(self.names)
        mat = np.asarray(mat, dtype=complex)
        if mat.shape != (d, d):
            raise ValueError(f"matrix shape {mat.shape} does not match {len(self.names)} qubits")
        self.mat = mat

    @property
    def n(self) -> int:
        return len(self.names)

    def copy(self) -> "PartialDensity":
        return PartialDensity(self.names, self.mat.copy())

    def trace(self) -> float:
        return float(np.trace(self.mat).real)

    def axis(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownQubit(name) from None

    def tensor_view(self) -> np.ndarray:
        return self.mat.reshape((2,) * (2 * self.n))

    def __repr__(self) -> str:
        return f"PartialDensity({self.names}, trace={self.trace():.6g})"

    def reorder(self, names: Sequence[str]) -> "PartialDensity":
        names = list(names)
        if sorted(names) != sorted(self.names):
            raise IncompatibleDomains(f"{names} is not a permutation of {self.names}")
        if names == self.names:
            return self
        perm = [self.names.index(x) for x in names]
        full = perm + [p + self.n for p in perm]
        d = 1 << self.n
        self.mat = np.ascontiguousarray(np.transpose(self.tensor_view(), full)).reshape(d, d)
        self.names = names
        return self

    def rename(self, mapping: dict[str, str]) -> "PartialDensity":
        new = [mapping.get(x, x) for x in self.names]
        if len(set(new)) != len(new):
            raise IncompatibleDomains("renaming merges two qubits")
        self.names = new
        return self

    def is_hermitian(self, tol: float = DEFAULT_TOL) -> bool:
        return bool(np.allclose(self.mat, self.mat.conj().T, atol=tol))

    def min_eigenvalue(self) -> float:
        if self.n == 0:
            return float(self.mat[0, 0].real)
        return float(np.linalg.eigvalsh((self.mat + self.mat.conj().T) / 2)[0])

    def dump(self) -> str:
        rows = [" ".join(self.names)]
        for row in self.mat:
            rows.append(" ".join(f"{z.real:.6g}{z.imag:+.6g}j" for z in row))
        return "\n".join(rows)


def empty() -> PartialDensity:
    return PartialDensity([], np.ones((1, 1), dtype=complex))


def from_pure(s: PureState) -> PartialDensity:
    return PartialDensity(s.names, np.outer(s.amps, s.amps.conj()))


def alloc_qubit(rho: PartialDensity, name: str,
                max_qubits: int = DEFAULT_MAX_QUBITS) -> PartialDensity:
    """Append |0><0|_name as the new least significant qubit."""
    if name in rho.names:
        raise IncompatibleDomains(f"qubit {name} already allocated")
    if rho.n + 1 > max_qubits:
        raise DensityError(f"mixed-state simulation capped at {max_qubits} qubits")
    d = 1 << rho.n
    new = np.zeros((2 * d, 2 * d), dtype=complex)
    new[0::2, 0::2] = rho.mat
    rho.mat = new
    rho.names.append(name)
    return rho


def conjugate(rho: PartialDensity, g: GateSpec, targets: Sequence[str]) -> PartialDensity:
    """U rho U^dagger, applied in place."""
    if len(set(targets)) != len(targets):
        raise DensityError("repeated gate target")
    axes = [rho.axis(t) for t in targets]
    t = rho.tensor_view()
    apply_kernel(t, g, axes)
    apply_kernel(t, g, [a + rho.n for a in axes], conj=True)
    return rho


def project(rho: PartialDensity, name: str, outcome: bool,
            in_place: bool = False) -> PartialDensity:
    """Unnormalized P rho P with P the projector onto |outcome>_name."""
    out = rho if in_place else rho.copy()
    ax = out.axis(name)
    t = out.tensor_view()
    other = 0 if outcome else 1
    n = out.n
    t[tuple(other if i == ax else slice(None) for i in range(2 * n))] = 0
    t[tuple(other if i == ax + n else slice(None) for i in range(2 * n))] = 0
    return out


def dephase(rho: PartialDensity, name: str) -> PartialDensity:
    """Zero the coherences of one qubit in place; equals project(T) + project(F)."""
    ax = rho.axis(name)
    t = rho.tensor_view()
    n = rho.n
    for a, b in ((0, 1), (1, 0)):
        t[tuple(a if i == ax else b if i == ax + n else slice(None) for i in range(2 * n))] = 0
    return rho


def partial_trace(rho: PartialDensity, A: Iterable[str]) -> PartialDensity:
    """Trace out the qubits in A."""
    A = set(A)
    for a in A:
        rho.axis(a)
    if not A:
        return rho.copy()
    keep = [x for x in rho.names if x not in A]
    gone = [x for x in rho.names if x in A]
    perm = [rho.names.index(x) for x in keep + gone]
    full = perm + [p + rho.n for p in perm]
    dk, dg = 1 << len(keep), 1 << len(gone)
    t = np.transpose(rho.tensor_view(), full).reshape(dk, dg, dk, dg)
    return PartialDensity(keep, np.einsum("iaja->ij", t))


def add(a: PartialDensity, b: PartialDensity) -> PartialDensity:
    """Sum of two matrices over the same domain; b is reordered to a's names."""
    b = b.reorder(a.names)
    a.mat += b.mat
    return a


def tensor(a: PartialDensity, b: PartialDensity) -> PartialDensity:
    if set(a.names) & set(b.names):
        raise IncompatibleDomains("tensor factors share qubit names")
    return PartialDensity(a.names + b.names, np.kron(a.mat, b.mat))


def purity_rank_test(rho: PartialDensity, tol: float = DEFAULT_TOL) -> bool:
    tr = rho.trace()
    if tr <= tol:
        raise ZeroTrace("purity test on a zero-trace matrix")
    tr2 = float(np.vdot(rho.mat, rho.mat).real)  # tr(rho^2) for Hermitian rho
    return abs(tr2 - tr * tr) <= tol


def pure_substate_test(rho: PartialDensity, A: Iterable[str], tol: float = DEFAULT_TOL) -> bool:
    """True iff rho = rho_A (x) rho_B with rho_A a pure state.

    Reconstructs the product from the two marginals and compares it with rho block by
    block, so the full Kronecker product is never materialized.
    """
    A = list(A)
    tr = rho.trace()
    if tr <= tol:
        raise ZeroTrace("pure substate test on a zero-trace matrix")
    comp = [x for x in rho.names if x not in set(A)]
    rho_a = partial_trace(rho, comp)
    if not purity_rank_test(PartialDensity(rho_a.names, rho_a.mat / tr), tol):
        return False
    if not comp:
        return True
    rho_b = partial_trace(rho, A)
    a_names = rho_a.names
    perm = [rho.names.index(x) for x in a_names + comp]
    full = perm + [p + rho.n for p in perm]
    da, db = 1 << len(a_names), 1 << len(comp)
    t = np.transpose(rho.tensor_view(), full).reshape(da, db, da, db)
    scaled_a = rho_a.mat / tr
    for i in range(da):
        block = t[i]  # (db, da, db)
        expect = scaled_a[i][None, :, None] * rho_b.mat[:, None, :]
        if np.max(np.abs(block - expect)) > tol:
            return False
    return True


def match_sizes(r1: PartialDensity, r2: PartialDensity) -> tuple[PartialDensity, PartialDensity]:
    """Pad each side with |0><0| for qubits only the other side allocated."""
    missing1 = [x for x in r2.names if x not in set(r1.names)]
    missing2 = [x for x in r1.names if x not in set(r2.names)]
    cap = max(r1.n, r2.n) + max(len(missing1), len(missing2))
    for x in missing1:
        alloc_qubit(r1, x, max_qubits=cap)
    for x in missing2:
        alloc_qubit(r2, x, max_qubits=cap)
    return r1, r2


def max_abs_diff(a: PartialDensity, b: PartialDensity) -> float:
    if sorted(a.names) != sorted(b.names):
        raise IncompatibleDomains(f"{a.names} vs {b.names}")
    bb = b.copy().reorder(a.names)
    if a.n == 0:
        return float(abs(a.mat[0, 0] - bb.mat[0, 0]))
    return float(np.max(np.abs(a.mat - bb.mat)))
