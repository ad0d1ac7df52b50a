"""Critical spin-chain models on blocked sites, plus exact reference data.

The Hamiltonian family is

    H = -J/2 sum_j [ (1+gamma) sx_j sx_{j+1} + (1-gamma) sy_j sy_{j+1}
                     + delta sz_j sz_{j+1} + 2 b_field sz_j ]

with Pauli matrices of eigenvalues +-1 in the (up, down) basis.  Two critical
presets are exposed:

  * `ising` -- gamma=1, delta=0, |b_field|=1, J=+1: transverse-field Ising at
    its critical point.  Exponents nu_x=0.25, nu_y=2.25, nu_z=2 and the exact
    per-spin energy -4/pi (free-fermion integral).
  * `xxz:<delta>` -- gamma=0, b_field=0, |delta|<=1.  The preset fixes J=-1,
    i.e. the antiferromagnetic sign of the exchange: with the overall -J/2
    prefactor above, a sublattice rotation maps J=+1 at anisotropy delta onto
    J=-1 at -delta, and it is the antiferromagnetic branch whose transverse
    exponent is nu_x = 1 - arccos(delta)/pi (checked against ED correlators).
    Its reference energy comes from Lanczos diagonalization of periodic
    chains extrapolated in 1/L^2, with the extrapolation spread reported
    rather than hidden.

Blocked 3-site Hamiltonian blocks follow the splitting convention: bonds
internal to the central block count once, the two bonds crossing into the
central block count half, fields on the central block count once, everything
not touching the central block counts zero.  Summing translates then
reproduces H exactly, and the energy per spin is tr[rho h] / blocking.
"""

from dataclasses import dataclass
from functools import reduce

import numpy as np
import scipy.integrate
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "ModelError",
    "PAULI",
    "SpinModelParams",
    "ModelPreset",
    "ExactReference",
    "ReferenceEnergy",
    "EDResult",
    "ising_critical",
    "xxz",
    "parse_preset",
    "bond_matrix",
    "field_matrix",
    "build_local_h",
    "exact_exponents",
    "xy_energy_integral",
    "reference_energy",
    "ed_oracle",
]

ID2 = np.eye(2, dtype=complex)
PAULI = {
    "x": np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    "y": np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    "z": np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
}

ED_MAX_SITES = 16


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class SpinModelParams:
    J: float
    gamma: float = 0.0
    delta: float = 0.0
    b_field: float = 0.0

    def __post_init__(self):
        if self.J == 0:
            raise ModelError("coupling J must be nonzero")


@dataclass(frozen=True)
class ModelPreset:
    tag: str  # 'ising_critical' or 'xxz'
    params: SpinModelParams

    def __post_init__(self):
        p = self.params
        if self.tag == "ising_critical":
            if not (p.gamma == 1.0 and p.delta == 0.0 and abs(p.b_field) == 1.0):
                raise ModelError("ising preset needs gamma=1, delta=0, |b_field|=1")
        elif self.tag == "xxz":
            if not (p.gamma == 0.0 and p.b_field == 0.0 and abs(p.delta) <= 1.0):
                raise ModelError(
                    f"xxz preset needs gamma=0, b_field=0, |delta|<=1 "
                    f"(critical range); got delta={p.delta}")
        else:
            raise ModelError(f"unknown preset tag {self.tag!r}")

    @property
    def label(self):
        if self.tag == "ising_critical":
            return "ising"
        return f"xxz:{self.params.delta:g}"


def ising_critical(J=1.0, b_field=1.0):
    return ModelPreset("ising_critical",
                       SpinModelParams(J=J, gamma=1.0, delta=0.0, b_field=b_field))


def xxz(delta):
    # J=-1: antiferromagnetic branch, see module docstring
    return ModelPreset("xxz", SpinModelParams(J=-1.0, gamma=0.0,
                                              delta=float(delta), b_field=0.0))


def parse_preset(text):
    """CLI preset names: 'ising' or 'xxz:<delta>'."""
    text = text.strip()
    if text == "ising":
        return ising_critical()
    if text.startswith("xxz:"):
        try:
            delta = float(text[4:])
        except ValueError as exc:
            raise ModelError(f"bad xxz anisotropy in {text!r}") from exc
        return xxz(delta)
    raise ModelError(f"unknown model preset {text!r} (want 'ising' or 'xxz:<delta>')")


# --- Hamiltonian blocks -------------------------------------------------------

def bond_matrix(params):
    """Two-spin exchange: -J/2 [(1+g) XX + (1-g) YY + delta ZZ]."""
    xx = np.kron(PAULI["x"], PAULI["x"])
    yy = np.kron(PAULI["y"], PAULI["y"])
    zz = np.kron(PAULI["z"], PAULI["z"])
    return (-params.J / 2.0) * ((1 + params.gamma) * xx
                                + (1 - params.gamma) * yy
                                + params.delta * zz)


def field_matrix(params):
    """Single-spin field term: -J/2 * 2 b_field * Z."""
    return (-params.J * params.b_field) * PAULI["z"]


def _embed(op, first_site, n_op_sites, n_sites):
    left = np.eye(2 ** first_site, dtype=complex)
    right = np.eye(2 ** (n_sites - first_site - n_op_sites), dtype=complex)
    return np.kron(np.kron(left, op), right)


def build_local_h(params, blocking):
    """Hermitian block on three effective sites whose translate-sum is H.

    blocking is the number of spins per effective site (1 or 2).  Weights:
    central-internal bonds 1, boundary bonds adjacent to the central block
    1/2, central fields 1, everything else 0.
    """
    if blocking not in (1, 2):
        raise ModelError(f"unsupported blocking {blocking} (supported: 1, 2)")
    n = 3 * blocking
    dim = 2 ** n
    central = range(blocking, 2 * blocking)
    h = np.zeros((dim, dim), dtype=complex)
    bond = bond_matrix(params)
    for i in range(n - 1):
        touches = (i in central) + ((i + 1) in central)
        if touches == 2:
            weight = 1.0
        elif touches == 1:
            weight = 0.5
        else:
            continue
        h += weight * _embed(bond, i, 2, n)
    if params.b_field != 0.0:
        fld = field_matrix(params)
        for i in central:
            h += _embed(fld, i, 1, n)
    return h


# --- exact exponents ----------------------------------------------------------

@dataclass(frozen=True)
class ExactReference:
    exponents: tuple  # ((label, nu), ...)
    energy_per_spin: float | None
    uncertainty: float | None
    provenance: str


def exact_exponents(preset):
    """Closed-form correlation-decay exponents at the critical point."""
    if preset.tag == "ising_critical":
        exps = (("x", 0.25), ("y", 2.25), ("z", 2.0))
        return ExactReference(exps, None, None, "ising closed form")
    delta = preset.params.delta
    if not -1.0 <= delta <= 1.0:
        raise ModelError(f"xxz not critical at delta={delta}")
    nu_xy = 1.0 - np.arccos(delta) / np.pi
    if nu_xy <= 0.0:
        raise ModelError(f"transverse exponent vanishes at delta={delta}")
    exps = (("x", nu_xy), ("y", nu_xy), ("z", 1.0 / nu_xy))
    return ExactReference(exps, None, None, "xxz Luttinger closed form")


# --- reference energies -------------------------------------------------------

@dataclass(frozen=True)
class ReferenceEnergy:
    value: float
    uncertainty: float
    provenance: str


def xy_energy_integral(params, tol=1e-12):
    """Per-spin ground energy of the delta=0 family from the free-fermion
    dispersion, e = -(|J|/2pi) * int_0^2pi sqrt((cos k - b)^2 + g^2 sin^2 k) dk,
    by adaptive quadrature."""
    if params.delta != 0.0:
        raise ModelError("free-fermion integral requires delta=0")
    g, b = params.gamma, params.b_field

    def dispersion(k):
        return np.sqrt((np.cos(k) - b) ** 2 + (g * np.sin(k)) ** 2)

    val, err = scipy.integrate.quad(dispersion, 0.0, 2.0 * np.pi,
                                    epsabs=tol, epsrel=tol, limit=400)
    scale = abs(params.J) / (2.0 * np.pi)
    return ReferenceEnergy(-scale * val, scale * max(err, 1e-15),
                           "free-fermion quadrature")


_REF_CACHE = {}


def reference_energy(preset, ed_sizes=(8, 10, 12, 14, 16)):
    """Exact (or extrapolated) thermodynamic-limit energy per spin."""
    key = (preset.tag, preset.params, tuple(ed_sizes))
    hit = _REF_CACHE.get(key)
    if hit is not None:
        return hit
    if preset.tag == "ising_critical":
        ref = xy_energy_integral(preset.params)
    else:
        ref = _ed_extrapolation(preset.params, ed_sizes)
    _REF_CACHE[key] = ref
    return ref


def _ed_extrapolation(params, sizes):
    sizes = sorted(set(int(s) for s in sizes))
    if len(sizes) < 3:
        raise ModelError("need at least three chain lengths to extrapolate")
    es = []
    for L in sizes:
        res = ed_oracle(params, L)
        es.append(res.energy / L)
    x = 1.0 / np.asarray(sizes, dtype=float) ** 2
    e = np.asarray(es)
    fit2 = np.polynomial.polynomial.polyfit(x, e, 2)
    fit1 = np.polynomial.polynomial.polyfit(x, e, 1)
    value = float(fit2[0])
    resid = float(np.abs(np.polynomial.polynomial.polyval(x, fit2) - e).max())
    spread = abs(value - float(fit1[0]))
    return ReferenceEnergy(value, max(spread, resid, 1e-12),
                           f"Lanczos ED, L={sizes}, 1/L^2 extrapolation")


# --- exact diagonalization oracle ----------------------------------------------

@dataclass
class EDResult:
    L: int
    energy: float
    state: np.ndarray
    correlators: dict


_SPARSE_PAULI = {k: sp.csr_matrix(v) for k, v in PAULI.items()}
_SPARSE_ID = sp.identity(2, format="csr", dtype=complex)


def _sparse_site(op, site, L):
    mats = [_SPARSE_ID] * L
    mats[site] = op
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), mats)


def _sparse_hamiltonian(params, L):
    dim = 2 ** L
    h = sp.csr_matrix((dim, dim), dtype=complex)
    bond = sp.csr_matrix(bond_matrix(params))
    for j in range(L):
        k = (j + 1) % L
        if k == j:
            continue
        if k == j + 1:
            mats = [_SPARSE_ID] * (L - 1)
            mats[j] = bond
            h = h + reduce(lambda a, b: sp.kron(a, b, format="csr"), mats)
        else:  # wrap bond: sum the four Pauli pieces placed on sites j, k
            p = params
            for lab, coef in (("x", 1 + p.gamma), ("y", 1 - p.gamma),
                              ("z", p.delta)):
                if coef == 0.0:
                    continue
                term = _sparse_site(_SPARSE_PAULI[lab], j, L) @ \
                       _sparse_site(_SPARSE_PAULI[lab], k, L)
                h = h + (-p.J / 2.0) * coef * term
    if params.b_field != 0.0:
        fld = sp.csr_matrix(field_matrix(params))
        for j in range(L):
            h = h + _sparse_site(fld, j, L)
    return h


def ed_oracle(params, L, correlators=()):
    """Lanczos ground state of the periodic L-site chain (L <= 16).

    `correlators` lists (alpha, ell) pairs; the result maps each to the
    connected correlator <s^a_0 s^a_ell> - <s^a_0><s^a_ell>.
    """
    L = int(L)
    if L > ED_MAX_SITES:
        raise ModelError(f"L={L} beyond ED limit {ED_MAX_SITES}")
    if L < 2:
        raise ModelError("need at least two sites")
    ham = _sparse_hamiltonian(params, L)
    herm = abs((ham - ham.getH())).max()
    if herm > 1e-12:
        raise ModelError(f"hamiltonian assembly broke hermiticity ({herm:.2e})")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(0xED)))
    v0 = rng.standard_normal(2 ** L)
    if L <= 3:
        vals, vecs = np.linalg.eigh(ham.toarray())
        e0, psi = float(vals[0]), vecs[:, 0]
    else:
        vals, vecs = spla.eigsh(ham.real.astype(float), k=1, which="SA",
                                v0=v0, tol=1e-12, maxiter=20000)
        e0, psi = float(vals[0]), vecs[:, 0].astype(complex)
    corr = {}
    for alpha, ell in correlators:
        op_a = _sparse_site(_SPARSE_PAULI[alpha], 0, L)
        op_b = _sparse_site(_SPARSE_PAULI[alpha], ell % L, L)
        pair = complex(np.vdot(psi, (op_a @ (op_b @ psi)))) if ell % L else \
            complex(np.vdot(psi, ((op_a @ op_a) @ psi)))
        va = complex(np.vdot(psi, op_a @ psi))
        vb = complex(np.vdot(psi, op_b @ psi))
        corr[(alpha, ell)] = (pair - va * vb).real
    return EDResult(L=L, energy=e0, state=psi, correlators=corr)
