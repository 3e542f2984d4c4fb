"""Named-qubit pure-state simulator with Schmidt-based separability tests.

Amplitudes are stored as a flat complex vector whose index bits follow the order of
``names``: the first name is the most significant bit. Operations mutate the state
in place and return it, so callers treat a state as consumed by each operation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import blas

from .gates import GateSpec, apply_kernel

DEFAULT_MAX_QUBITS = 24
DEFAULT_TOL = 1e-9


class QStateError(Exception):
    pass


class UnknownQubit(QStateError):
    pass


class DuplicateTarget(QStateError):
    pass


class CapacityError(QStateError):
    pass


class NotSeparable(QStateError):
    def __init__(self, coefficients: np.ndarray):
        super().__init__(f"state is entangled across the cut (lambda={coefficients[:4]})")
        self.coefficients = coefficients


class DomainMismatch(QStateError):
    pass


class PureState:
    def __init__(self, names: Sequence[str] = (), amps: Optional[np.ndarray] = None,
                 max_qubits: int = DEFAULT_MAX_QUBITS, prefix: str = "q"):
        self.names: list[str] = list(names)
        if len(set(self.names)) != len(self.names):
            raise DuplicateTarget("qubit names must be distinct")
        if amps is None:
            if self.names:
                raise ValueError("amplitudes required for a nonempty domain")
            amps = np.ones(1, dtype=complex)
        amps = np.asarray(amps, dtype=complex).reshape(-1)
        if amps.size != 1 << len(self.names):
            raise ValueError(f"{amps.size} amplitudes for {len(self.names)} qubits")
        self.amps = amps
        self.max_qubits = max_qubits
        self.prefix = prefix
        self._counter = 0

    # -- basics
    @property
    def n(self) -> int:
        return len(self.names)

    def copy(self) -> "PureState":
        s = PureState(self.names, self.amps.copy(), self.max_qubits, self.prefix)
        s._counter = self._counter
        return s

    def axis(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownQubit(name) from None

    def tensor_view(self) -> np.ndarray:
        return self.amps.reshape((2,) * self.n)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amps))

    def fresh_name(self) -> str:
        while True:
            name = f"{self.prefix}{self._counter}"
            self._counter += 1
            if name not in self.names:
                return name

    def __repr__(self) -> str:
        return f"PureState({self.names}, {np.round(self.amps, 6)})"

    def dump(self) -> str:
        lines = [" ".join(self.names)]
        for i, a in enumerate(self.amps):
            if abs(a) > 1e-12:
                bits = format(i, f"0{self.n}b") if self.n else ""
                lines.append(f"|{bits}> {a.real:.12g} {a.imag:.12g}")
        return "\n".join(lines)

    @classmethod
    def basis(cls, bits: str, names: Optional[Sequence[str]] = None) -> "PureState":
        names = list(names) if names is not None else [f"b{i}" for i in range(len(bits))]
        amps = np.zeros(1 << len(bits), dtype=complex)
        amps[int(bits, 2) if bits else 0] = 1
        return cls(names, amps)

    def reorder(self, names: Sequence[str]) -> "PureState":
        """Permute axes so that the internal order becomes ``names``."""
        names = list(names)
        if sorted(names) != sorted(self.names):
            raise DomainMismatch(f"{names} is not a permutation of {self.names}")
        if names == self.names:
            return self
        perm = [self.names.index(x) for x in names]
        self.amps = np.ascontiguousarray(np.transpose(self.tensor_view(), perm)).reshape(-1)
        self.names = names
        return self

    def rename(self, mapping: dict[str, str]) -> "PureState":
        new = [mapping.get(x, x) for x in self.names]
        if len(set(new)) != len(new):
            raise DuplicateTarget("renaming merges two qubits")
        self.names = new
        return self


def tensor(a: PureState, b: PureState) -> PureState:
    if set(a.names) & set(b.names):
        raise DuplicateTarget("tensor factors share qubit names")
    out = PureState(a.names + b.names, np.kron(a.amps, b.amps), max(a.max_qubits, b.max_qubits),
                    a.prefix)
    out._counter = max(a._counter, b._counter)
    return out


def alloc_qubit(s: PureState, name: Optional[str] = None) -> tuple[PureState, str]:
    if s.n + 1 > s.max_qubits:
        raise CapacityError(f"allocating beyond {s.max_qubits} qubits")
    name = name or s.fresh_name()
    if name in s.names:
        raise DuplicateTarget(name)
    new = np.zeros(2 * s.amps.size, dtype=complex)
    new[0::2] = s.amps
    s.amps = new
    s.names.append(name)
    return s, name


def apply_gate(s: PureState, g: GateSpec, targets: Sequence[str]) -> PureState:
    if len(targets) != g.arity:
        raise ValueError(f"{g.name} expects {g.arity} targets, got {len(targets)}")
    if len(set(targets)) != len(targets):
        raise DuplicateTarget(f"{g.name} applied to repeated qubit")
    axes = [s.axis(t) for t in targets]
    apply_kernel(s.tensor_view(), g, axes)
    return s


def _project_out(s: PureState, ax: int, bit: int) -> np.ndarray:
    t = s.tensor_view()
    idx = tuple(bit if i == ax else slice(None) for i in range(s.n))
    return t[idx].reshape(-1)


def outcome_probability(s: PureState, name: str) -> float:
    """Probability that measuring ``name`` yields |1>."""
    branch = _project_out(s, s.axis(name), 1)
    return float(np.vdot(branch, branch).real)


def measure_qubit(s: PureState, name: str, u: float,
                  force: Optional[bool] = None) -> tuple[bool, float, PureState]:
    """Measure ``name``; T (|1>) is chosen when u < P(1). ``force`` fixes the outcome."""
    ax = s.axis(name)
    p1 = min(max(outcome_probability(s, name), 0.0), 1.0)
    outcome = (u < p1) if force is None else force
    prob = p1 if outcome else 1.0 - p1
    branch = _project_out(s, ax, int(outcome))
    if prob <= 0.0:
        raise QStateError(f"measurement outcome {outcome} has probability zero")
    s.amps = np.ascontiguousarray(branch) / np.sqrt(prob)
    del s.names[ax]
    return outcome, prob, s


@dataclass
class SchmidtResult:
    coefficients: np.ndarray
    left: np.ndarray
    right: np.ndarray


def _cut_matrix(s: PureState, A: Iterable[str]) -> tuple[np.ndarray, list[str], list[str]]:
    A = list(A)
    for a in A:
        s.axis(a)
    Aset = set(A)
    a_names = [x for x in s.names if x in Aset]
    b_names = [x for x in s.names if x not in Aset]
    perm = [s.names.index(x) for x in a_names + b_names]
    t = np.transpose(s.tensor_view(), perm) if perm != list(range(s.n)) else s.tensor_view()
    return t.reshape(1 << len(a_names), 1 << len(b_names)), a_names, b_names


def schmidt_coefficients(s: PureState, A: Iterable[str], vectors: bool = False) -> SchmidtResult:
    m, a_names, b_names = _cut_matrix(s, A)
    if not a_names or not b_names:
        norm = np.linalg.norm(m)
        coeffs = np.array([norm])
        if not vectors:
            return SchmidtResult(coeffs, np.empty(0), np.empty(0))
        left = m[:, 0] / norm if not b_names else np.ones(1, dtype=complex)
        right = m[0, :] / norm if not a_names else np.ones(1, dtype=complex)
        if not a_names and not b_names:
            left = right = np.ones(1, dtype=complex)
        return SchmidtResult(coeffs, left, right)
    if vectors:
        u, sv, vh = np.linalg.svd(m, full_matrices=False)
        return SchmidtResult(sv, u[:, 0], vh[0, :])
    rows, cols = m.shape
    if min(rows, cols) <= SHORT_SIDE and max(rows, cols) >= 16 * min(rows, cols):
        m = short_side_r(m if rows < cols else m.T)
    sv = np.linalg.svd(m, compute_uv=False)
    return SchmidtResult(sv, np.empty(0), np.empty(0))


SHORT_SIDE = 4


def _norm(v: np.ndarray) -> float:
    """2-norm; amplitudes are bounded by 1, so the unscaled sum of squares cannot overflow."""
    if v.flags.c_contiguous:
        x = v.view(float)
        return float(np.sqrt(x @ x))
    return float(blas.dznrm2(v))


def short_side_r(m: np.ndarray) -> np.ndarray:
    """R factor of the rows of a short, wide matrix, so that svd(R) = svd(m).

    Modified Gram-Schmidt using in-place BLAS level-1 kernels, so each step is one
    sweep with no temporaries beyond one copy per row. Rows that join the basis get a second
    orthogonalization pass; the last row's residual is only measured, so one pass
    already fixes R to rounding level. A residual at rounding level marks a dependent
    row, which is kept out of the basis so later rows are not projected onto noise.
    """
    k = m.shape[0]
    r = np.zeros((k, k), dtype=complex)
    basis: list[tuple[int, np.ndarray, float]] = []  # orthogonal, unnormalized
    for j in range(k):
        row = np.asarray(m[j], dtype=complex)
        last = j == k - 1
        v = row
        if basis:
            v = np.array(row)
            for _ in range(1 if last else 2):
                for i, u, nu in basis:
                    c = blas.zdotc(u, v) / nu
                    r[i, j] += c
                    v = blas.zaxpy(u, v, a=-c / nu)
        nrm = _norm(v)
        r[j, j] = nrm
        if not last:
            start = _norm(row) if basis else nrm
            if nrm > 8 * np.finfo(float).eps * max(start, 1e-300):
                basis.append((j, v, nrm))
    return r


def lambda2(coeffs: np.ndarray) -> float:
    return float(coeffs[1]) if len(coeffs) > 1 else 0.0


def separability_test(s: PureState, A: Iterable[str], tol: float = DEFAULT_TOL) -> bool:
    c = schmidt_coefficients(s, A).coefficients
    return bool(c[0] >= 1 - tol and lambda2(c) <= tol)


def factor_state(s: PureState, A: Iterable[str],
                 tol: float = DEFAULT_TOL) -> tuple[PureState, PureState]:
    A = list(A)
    r = schmidt_coefficients(s, A, vectors=True)
    c = r.coefficients
    if not (c[0] >= 1 - tol and lambda2(c) <= tol):
        raise NotSeparable(c)
    Aset = set(A)
    a_names = [x for x in s.names if x in Aset]
    b_names = [x for x in s.names if x not in Aset]
    return PureState(a_names, r.left), PureState(b_names, r.right)


def equal_up_to_phase(a: PureState, b: PureState, tol: float = DEFAULT_TOL) -> bool:
    if sorted(a.names) != sorted(b.names):
        raise DomainMismatch(f"{a.names} vs {b.names}")
    bb = b.copy().reorder(a.names)
    return bool(abs(np.vdot(a.amps, bb.amps)) >= 1 - tol)


def fidelity(a: PureState, b: PureState) -> float:
    if sorted(a.names) != sorted(b.names):
        raise DomainMismatch(f"{a.names} vs {b.names}")
    bb = b.copy().reorder(a.names)
    return float(abs(np.vdot(a.amps, bb.amps)) ** 2)
