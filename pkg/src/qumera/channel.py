"""Transfer channel of a homogeneous binary MERA layer on 3-site windows.

A layer, read from coarse to fine, expands every coarse site through the
isometry and then entangles neighbouring outputs with the disentangler.
Conventions (fixed here, everything else in the package relies on them):

    isometry      w[a, b, c]      a, b fine outputs (left, right), c coarse;
                                  as an (m*m, m) matrix: w'w = 1.
    disentangler  u[p, q, r, s]   p, q outputs (left, right), r, s inputs;
                                  as an (m*m, m*m) matrix: unitary.

A window of three consecutive fine sites is influenced by exactly three
coarse sites: three isometries above, two disentanglers below.  There are
two inequivalent alignments of the window relative to the 2:1 coarse
graining, mirror images of each other:

    coarse          c1      c2      c3              c1      c2      c3
                   /  \    /  \    /  \            /  \    /  \    /  \
    isometries    7    \  /    \  /    8          7    \  /    \  /    8
    disentangler       [uA]    [uB]                   [uA]    [uB]
    fine (kept)     x1   x2  x3   (23)             (23)  x1  x2   x3
                     "left"                            "right"

Leg 7/8 are the edge isometry outputs, traced immediately; leg 23 is the
traced disentangler output.  The channel is the equal-weight average of the
two alignments.  Applied to a 3-site density matrix it yields the 3-site
reduced state one layer further down; its adjoint lifts 3-site operators one
layer up.  The map is completely positive and trace preserving whenever the
tensors satisfy their isometry constraints, and its fixed point is the
thermodynamic-limit reduced state of the infinite network.

Integer labels used in the contraction networks below:

    1,2,3   coarse ket        4,5,6   coarse bra
    9..12   pre-disentangler fine ket (r1, s1, r2, s2); 13..16 bra
    17..19  output fine ket (x1, x2, x3);               20..22 bra
    7, 8    traced edge isometry outputs;               23 traced u output
"""

import re
import weakref
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse.linalg as spla

from . import tensnet as tn
from .tensnet import contract_many, random_isometry, read_tensor, write_tensor

__all__ = [
    "ChannelError",
    "FixedPointError",
    "MaterializeError",
    "SpectrumError",
    "MeraAnsatz",
    "FixedPointResult",
    "EnergyResult",
    "SuperOperatorMatrix",
    "random_ansatz",
    "channel_apply",
    "adjoint_apply",
    "descend",
    "ascend",
    "energy_environments",
    "fixed_point",
    "materialize",
    "choi_matrix",
    "spectrum",
    "energy",
    "check_density",
    "check_operator",
    "save_ansatz",
    "load_ansatz",
]

ISOMETRY_TOL = 1e-10
MATERIALIZE_CAP = 4096


class ChannelError(ValueError):
    """Input violates a channel-side invariant."""


class FixedPointError(RuntimeError):
    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"fixed point not converged after {iterations} iterations "
            f"(residual {residual:.3e})"
        )


class MaterializeError(ValueError):
    pass


class SpectrumError(RuntimeError):
    def __init__(self, message, residuals=None):
        self.residuals = residuals
        super().__init__(message)


# --- contraction wirings -----------------------------------------------------

_RHO = (1, 2, 3, 4, 5, 6)
_H = (20, 21, 22, 17, 18, 19)
_W = {
    "w1": (7, 9, 1), "w1c": (7, 13, 4),
    "w2": (10, 11, 2), "w2c": (14, 15, 5),
    "w3": (12, 8, 3), "w3c": (16, 8, 6),
}
_U_LEFT = {
    "ua": (17, 18, 9, 10), "uac": (20, 21, 13, 14),
    "ub": (19, 23, 11, 12), "ubc": (22, 23, 15, 16),
}
_U_RIGHT = {
    "ua": (23, 17, 9, 10), "uac": (23, 20, 13, 14),
    "ub": (18, 19, 11, 12), "ubc": (21, 22, 15, 16),
}
_OUT_FINE = (17, 18, 19, 20, 21, 22)
_OUT_COARSE = (4, 5, 6, 1, 2, 3)

_U_COPIES = ("uac", "ubc")
_W_COPIES = ("w1c", "w2c", "w3c")


@dataclass(frozen=True, eq=False)
class MeraAnsatz:
    """One homogeneous layer: bond dimension m, disentangler and isometry.

    `b` is the number of physical spins blocked into one effective site
    (m = 2**b); it is only needed to convert energies per coarse window into
    energies per spin and may be None for synthetic ansatze.
    """

    m: int
    disentangler: np.ndarray
    isometry: np.ndarray
    b: int | None = None

    def validate(self, tol=ISOMETRY_TOL):
        m = self.m
        if self.disentangler.shape != (m, m, m, m):
            raise ChannelError(f"disentangler shape {self.disentangler.shape}, "
                               f"expected {(m,) * 4}")
        if self.isometry.shape != (m, m, m):
            raise ChannelError(f"isometry shape {self.isometry.shape}, "
                               f"expected {(m,) * 3}")
        if self.b is not None and m != 2 ** self.b:
            raise ChannelError(f"m={m} incompatible with blocking b={self.b}")
        u = self.disentangler.reshape(m * m, m * m)
        w = self.isometry.reshape(m * m, m)
        eye = np.eye(m * m)
        if np.linalg.norm(u.conj().T @ u - eye) > tol or \
           np.linalg.norm(u @ u.conj().T - eye) > tol:
            raise ChannelError("disentangler is not unitary within tolerance")
        if np.linalg.norm(w.conj().T @ w - np.eye(m)) > tol:
            raise ChannelError("isometry constraint violated within tolerance")
        return self


def random_ansatz(m, seed, b=None):
    """Haar-random disentangler and isometry at bond dimension m."""
    rng = tn.rng_from_seed(seed)
    u = random_isometry(m * m, m * m, rng).reshape(m, m, m, m)
    w = random_isometry(m * m, m, rng).reshape(m, m, m)
    return MeraAnsatz(m=m, disentangler=u, isometry=w, b=b)


def _operands(ansatz, side, rho6=None, h6=None, skip=None):
    u = ansatz.disentangler
    w = ansatz.isometry
    wiring = dict(_W)
    wiring.update(_U_LEFT if side == "left" else _U_RIGHT)
    values = {
        "w1": w, "w2": w, "w3": w,
        "w1c": w.conj(), "w2c": w.conj(), "w3c": w.conj(),
        "ua": u, "ub": u, "uac": u.conj(), "ubc": u.conj(),
    }
    tensors, subs = [], []
    if rho6 is not None:
        tensors.append(rho6)
        subs.append(_RHO)
    if h6 is not None:
        tensors.append(h6)
        subs.append(_H)
    for name in ("w1", "w1c", "w2", "w2c", "w3", "w3c", "ua", "uac", "ub", "ubc"):
        if name == skip:
            continue
        tensors.append(values[name])
        subs.append(wiring[name])
    return tensors, subs, wiring


# Per-ansatz Stinespring forms V with channel(rho) = avg Tr_env[V rho V'].
# Each alignment is conjugation by an isometry from the coarse window into
# (kept window x traced legs); caching V turns every application into two
# matrix products.  That costs m^12 flops against the factored network's
# m^10, so it only pays at small m where Python overhead dominates.
_COMPILE_MAX_M = 3
_COMPILED = weakref.WeakKeyDictionary()

# V legs: kept fine triple, traced legs (edge, edge, disentangler), coarse.
_V_OUT_LEFT = (17, 18, 19, 7, 23, 8, 1, 2, 3)
_V_OUT_RIGHT = (17, 18, 19, 23, 7, 8, 1, 2, 3)


def _stinespring(ansatz, side):
    u = ansatz.disentangler
    w = ansatz.isometry
    wiring = dict(_W)
    wiring.update(_U_LEFT if side == "left" else _U_RIGHT)
    tensors = [u, u, w, w, w]
    subs = [wiring["ua"], wiring["ub"], wiring["w1"], wiring["w2"], wiring["w3"]]
    out = _V_OUT_LEFT if side == "left" else _V_OUT_RIGHT
    d = ansatz.m ** 3
    return contract_many(tensors, subs, output=out).reshape(d, d, d)


def _compiled(ansatz):
    forms = _COMPILED.get(ansatz)
    if forms is None:
        forms = tuple(_stinespring(ansatz, side) for side in ("left", "right"))
        _COMPILED[ansatz] = forms
    return forms


def channel_apply(rho, ansatz):
    """Linear action of the transfer channel on an m^3 x m^3 matrix.

    No invariant checks: this is the hot path shared by the fixed-point
    solver and materialize, and it must accept arbitrary (non-Hermitian)
    inputs since the channel is defined on all of operator space.
    """
    m = ansatz.m
    d = m ** 3
    rho = np.asarray(rho, dtype=complex).reshape(d, d)
    if m <= _COMPILE_MAX_M:
        out = None
        for v in _compiled(ansatz):
            half = np.tensordot(v, rho, axes=([2], [0]))          # kept, env, bra
            term = np.tensordot(half, v.conj(), axes=([1, 2], [1, 2]))
            out = term if out is None else out + term
        return 0.5 * out
    rho6 = rho.reshape((m,) * 6)
    out = None
    for side in ("left", "right"):
        tensors, subs, _ = _operands(ansatz, side, rho6=rho6)
        term = contract_many(tensors, subs, output=_OUT_FINE)
        out = term if out is None else out + term
    return 0.5 * out.reshape(d, d)


def adjoint_apply(op, ansatz):
    """Adjoint of `channel_apply`: lifts a 3-site operator one layer up."""
    m = ansatz.m
    d = m ** 3
    op = np.asarray(op, dtype=complex).reshape(d, d)
    if m <= _COMPILE_MAX_M:
        out = None
        for v in _compiled(ansatz):
            half = np.tensordot(op, v, axes=([1], [0]))           # bra, env, coarse
            term = np.tensordot(v.conj(), half, axes=([0, 1], [0, 1]))
            out = term if out is None else out + term
        return 0.5 * out
    h6 = op.reshape((m,) * 6)
    out = None
    for side in ("left", "right"):
        tensors, subs, _ = _operands(ansatz, side, h6=h6)
        term = contract_many(tensors, subs, output=_OUT_COARSE)
        out = term if out is None else out + term
    return 0.5 * out.reshape(d, d)


def check_density(rho, m, hermit_tol=1e-10, trace_tol=1e-10, psd_floor=-1e-9):
    d = m ** 3
    rho = np.asarray(rho)
    if rho.shape != (d, d):
        raise ChannelError(f"density matrix shape {rho.shape}, expected {(d, d)}")
    if np.linalg.norm(rho - rho.conj().T) > hermit_tol:
        raise ChannelError("density matrix is not Hermitian within tolerance")
    if abs(np.trace(rho) - 1.0) > trace_tol:
        raise ChannelError(f"density matrix trace {np.trace(rho):.12f} != 1")
    lo = float(np.linalg.eigvalsh(rho).min())
    if lo < psd_floor:
        raise ChannelError(f"density matrix minimum eigenvalue {lo:.3e} below floor")
    return rho


def check_operator(op, m, hermitian=True, tol=1e-10):
    d = m ** 3
    op = np.asarray(op)
    if op.shape != (d, d):
        raise ChannelError(f"operator shape {op.shape}, expected {(d, d)}")
    if hermitian and np.linalg.norm(op - op.conj().T) > tol:
        raise ChannelError("operator flagged Hermitian is not")
    return op


def descend(rho, ansatz, check=True):
    """One coarse-graining step down: 3-site state at the next finer layer."""
    if check:
        ansatz.validate()
        check_density(rho, ansatz.m)
    return channel_apply(rho, ansatz)


def ascend(op, ansatz, check=True, hermitian=True):
    """One step up for 3-site operators; dual to `descend` under the trace
    pairing tr[descend(rho) op] == tr[rho ascend(op)]."""
    if check:
        ansatz.validate()
        check_operator(op, ansatz.m, hermitian=hermitian)
    return adjoint_apply(op, ansatz)


def energy_environments(rho, h, ansatz, target):
    """Derivative of E = tr[channel(rho) h] w.r.t. the conjugated tensor.

    Returns dE/d(conj T) where T is the disentangler or the isometry and all
    homogeneous copies (two or three per alignment, both alignments) vary
    together; rho is held fixed.  The result has the leg layout of T itself.
    For real E the gradient with respect to the independent real and
    imaginary parts is 2 * this.
    """
    m = ansatz.m
    rho6 = np.asarray(rho, dtype=complex).reshape((m,) * 6)
    h6 = np.asarray(h, dtype=complex).reshape((m,) * 6)
    copies = {"disentangler": _U_COPIES, "isometry": _W_COPIES}.get(target)
    if copies is None:
        raise ChannelError(f"unknown gradient target {target!r}")
    env = None
    for side in ("left", "right"):
        for name in copies:
            tensors, subs, wiring = _operands(ansatz, side, rho6=rho6, h6=h6,
                                              skip=name)
            term = contract_many(tensors, subs, output=wiring[name])
            env = term if env is None else env + term
    return 0.5 * env


# --- fixed point -------------------------------------------------------------

@dataclass
class FixedPointResult:
    rho: np.ndarray
    iterations: int
    residual: float
    method: str
    degenerate_leading: bool = False


def _hermitize_normalize(mat):
    mat = 0.5 * (mat + mat.conj().T)
    tr = np.trace(mat).real
    if abs(tr) > 1e-12:
        mat = mat / tr
    else:
        mat = mat / max(np.linalg.norm(mat), 1e-300)
    return mat


def _vector_operator(ansatz):
    d = ansatz.m ** 3
    def matvec(v):
        return channel_apply(v.reshape(d, d), ansatz).reshape(-1)
    return spla.LinearOperator((d * d, d * d), matvec=matvec, dtype=complex)


def _krylov_step(ansatz, rho, n_ritz=3):
    d = ansatz.m ** 3
    op = _vector_operator(ansatz)
    k = min(n_ritz, d * d - 2)
    vals, vecs = spla.eigs(op, k=k, which="LM", v0=rho.reshape(-1), maxiter=5000)
    order = np.argsort(-np.abs(vals))
    vals = vals[order]
    vecs = vecs[:, order]
    degenerate = int(np.sum(np.abs(np.abs(vals) - 1.0) < 1e-8)) >= 2
    lead = vecs[:, 0].reshape(d, d)
    tr = np.trace(lead)
    if abs(tr) > 1e-12:
        lead = lead * (abs(tr) / tr)
    return _hermitize_normalize(lead), degenerate


def fixed_point(ansatz, guess=None, tol=1e-9, max_iter=5000,
                stall_ratio=0.99, stall_window=50):
    """Solve channel(rho) = rho by warm-started power iteration.

    Each step Hermitizes and renormalizes the trace.  If the residual decay
    stalls (successive ratio > stall_ratio for stall_window steps) the solve
    switches to an Arnoldi eigensolve on the vectorized channel, seeded with
    the current iterate; a second Ritz value on the unit circle sets the
    `degenerate_leading` flag on the result.  Non-convergence raises
    FixedPointError carrying the final residual.
    """
    if tol <= 0:
        raise ChannelError("tol must be positive")
    d = ansatz.m ** 3
    if guess is None:
        rho = np.eye(d, dtype=complex) / d
    else:
        rho = _hermitize_normalize(np.asarray(guess, dtype=complex))
    method = "power"
    degenerate = False
    stall = 0
    prev_res = None
    iterations = 0
    res = np.inf
    for _ in range(max_iter):
        if stall_window == 0 or stall >= stall_window:
            rho, degenerate = _krylov_step(ansatz, rho)
            method = "power+krylov"
            stall = 0
            prev_res = None
            stall_window = max(stall_window, 1)
        nxt = channel_apply(rho, ansatz)
        res = float(np.linalg.norm(nxt - rho))
        if res <= tol:
            return FixedPointResult(rho, iterations, res, method, degenerate)
        if prev_res is not None and res > stall_ratio * prev_res:
            stall += 1
        else:
            stall = 0
        prev_res = res
        rho = _hermitize_normalize(nxt)
        iterations += 1
    nxt = channel_apply(rho, ansatz)
    res = float(np.linalg.norm(nxt - rho))
    if res <= tol:
        return FixedPointResult(rho, iterations, res, method, degenerate)
    raise FixedPointError(res, iterations)


# --- matrix form, spectrum, energy -------------------------------------------

@dataclass
class SuperOperatorMatrix:
    """Dense matrix of the channel on vectorized (row-major) operators."""

    dim: int
    matrix: np.ndarray


def materialize(ansatz, cap=MATERIALIZE_CAP):
    """Channel as a dense m^6 x m^6 matrix, built column by column.

    Column (i*d + j) is the vectorized image of the elementary matrix E_ij.
    Refuses dimensions above `cap`; use spectrum(..., method='arnoldi') then.
    """
    d = ansatz.m ** 3
    n = d * d
    if n > cap:
        raise MaterializeError(
            f"m^6 = {n} exceeds cap {cap}; use the iterative spectrum path "
            f"(spectrum(..., method='arnoldi')) instead")
    mat = np.empty((n, n), dtype=complex)
    basis = np.zeros((d, d), dtype=complex)
    for i in range(d):
        for j in range(d):
            basis[i, j] = 1.0
            mat[:, i * d + j] = channel_apply(basis, ansatz).reshape(-1)
            basis[i, j] = 0.0
    return SuperOperatorMatrix(dim=n, matrix=mat)


def choi_matrix(ansatz, cap=MATERIALIZE_CAP):
    """Choi matrix of the channel; PSD iff the channel is completely positive."""
    d = ansatz.m ** 3
    mat = materialize(ansatz, cap=cap).matrix
    return np.ascontiguousarray(
        mat.reshape(d, d, d, d).transpose(2, 0, 3, 1).reshape(d * d, d * d))


def _sort_eigs(vals):
    order = np.lexsort((-vals.imag, -vals.real, -np.abs(vals)))
    return vals[order]


def spectrum(ansatz, k, method="auto", cap=MATERIALIZE_CAP, arnoldi_tol=1e-12):
    """k largest-modulus eigenvalues of the channel, modulus-descending.

    Dense diagonalization of the materialized matrix when m^6 fits under
    `cap` (m <= 4 at the default), Arnoldi iteration on the vectorized
    channel action otherwise.
    """
    n = ansatz.m ** 6
    k = int(k)
    if not 1 <= k <= n:
        raise ChannelError(f"k={k} out of range for channel dimension {n}")
    if method == "auto":
        method = "dense" if n <= cap else "arnoldi"
    if method == "dense" or k >= n - 2:
        vals = np.linalg.eigvals(materialize(ansatz, cap=max(cap, n)).matrix)
        return _sort_eigs(vals)[:k]
    if method != "arnoldi":
        raise ChannelError(f"unknown spectrum method {method!r}")
    op = _vector_operator(ansatz)
    d = ansatz.m ** 3
    v0 = np.eye(d, dtype=complex).reshape(-1) / d
    try:
        vals = spla.eigs(op, k=k, which="LM", v0=v0, maxiter=10000,
                         tol=arnoldi_tol, return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        got = np.asarray(exc.eigenvalues)
        raise SpectrumError(
            f"Arnoldi converged only {got.size}/{k} eigenvalues "
            f"(moduli {np.abs(got).tolist()})", residuals=got) from exc
    return _sort_eigs(np.asarray(vals))[:k]


class EnergyResult(float):
    """Energy of one 3-window; `.per_spin` divides by the blocking factor."""

    def __new__(cls, block, per_spin):
        obj = super().__new__(cls, block)
        obj.per_spin = per_spin
        return obj


def energy(ansatz, rho_star, h, imag_tol=1e-10):
    """tr[rho h] with a guard on the imaginary part; per-spin value included.

    A sizable imaginary part signals broken Hermiticity upstream and raises.
    """
    val = complex(np.trace(np.asarray(rho_star) @ np.asarray(h)))
    if abs(val.imag) > imag_tol:
        raise ChannelError(f"energy has imaginary part {val.imag:.3e}")
    per_spin = val.real / ansatz.b if ansatz.b else None
    return EnergyResult(val.real, per_spin)


# --- checkpoints -------------------------------------------------------------

_HEADER_RE = re.compile(
    r"^qumera-ansatz v1 m=(\d+) b=(\d+|-) seed=(-?\d+) iterations=(\d+)$")


def save_ansatz(path, ansatz, seed=0, iterations=0):
    b = "-" if ansatz.b is None else str(ansatz.b)
    with open(path, "wb") as f:
        f.write(f"qumera-ansatz v1 m={ansatz.m} b={b} seed={seed} "
                f"iterations={iterations}\n".encode("ascii"))
        write_tensor(f, ansatz.disentangler)
        write_tensor(f, ansatz.isometry)


def load_ansatz(path):
    """Read a checkpoint; returns (ansatz, metadata dict)."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").rstrip("\n")
        match = _HEADER_RE.match(header)
        if not match:
            raise ChannelError(f"bad ansatz header: {header!r}")
        m = int(match.group(1))
        b = None if match.group(2) == "-" else int(match.group(2))
        meta = {"m": m, "b": b, "seed": int(match.group(3)),
                "iterations": int(match.group(4))}
        u = read_tensor(f)
        w = read_tensor(f)
    ansatz = MeraAnsatz(m=m, disentangler=u, isometry=w, b=b)
    ansatz.validate()
    return ansatz, meta


def with_tensor(ansatz, target, tensor):
    """Copy of the ansatz with one tensor replaced."""
    if target == "disentangler":
        return replace(ansatz, disentangler=tensor)
    if target == "isometry":
        return replace(ansatz, isometry=tensor)
    raise ChannelError(f"unknown tensor target {target!r}")
