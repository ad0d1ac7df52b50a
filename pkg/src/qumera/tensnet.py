"""Dense tensor algebra: contraction, permutation, isometric retraction, IO.

Tensors are numpy arrays of complex128 in C (row-major) order.  All public
operations return fresh C-contiguous arrays with finite entries; violations
raise TensorError.  Contraction is pairwise reshape-permute-matmul (tensordot);
multi-tensor networks are evaluated by `contract_many` with a greedy pairwise
plan that is cached per network signature.

The RNG used everywhere in this package is numpy's Philox counter-based
generator, keyed by an explicit 64-bit seed, so runs are reproducible across
platforms.
"""

from dataclasses import dataclass
from math import prod
from struct import pack, unpack

import numpy as np

__all__ = [
    "TensorError",
    "ContractionSpec",
    "contract",
    "contract_many",
    "permute",
    "retract_isometry",
    "random_isometry",
    "rng_from_seed",
    "save_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]

CDTYPE = np.complex128

MAGIC = b"QMT1"


class TensorError(ValueError):
    """Invalid tensor operation (shape mismatch, bad spec, non-finite data)."""


def _as_tensor(a):
    a = np.asarray(a, dtype=CDTYPE)
    return np.ascontiguousarray(a)


def _check_finite(a, what):
    if not np.all(np.isfinite(a.view(np.float64))):
        raise TensorError(f"{what} produced non-finite entries")
    return a


def rng_from_seed(seed):
    """Philox generator for an integer seed; generators pass through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


@dataclass(frozen=True)
class ContractionSpec:
    """Pairwise contraction: `pairs` lists (axis of a, axis of b) to saturate.

    `out_order` optionally permutes the surviving axes of the result, which
    tensordot lays out as (free axes of a, then free axes of b), each in
    original order.
    """

    pairs: tuple
    out_order: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(i), int(j)) for i, j in self.pairs))
        if self.out_order is not None:
            object.__setattr__(self, "out_order", tuple(int(i) for i in self.out_order))

    def validate(self, shape_a, shape_b):
        ax_a = [i for i, _ in self.pairs]
        ax_b = [j for _, j in self.pairs]
        for i, j in self.pairs:
            if not (0 <= i < len(shape_a)) or not (0 <= j < len(shape_b)):
                raise TensorError(f"contraction pair ({i}, {j}) out of range for "
                                  f"shapes {shape_a} x {shape_b}")
            if shape_a[i] != shape_b[j]:
                raise TensorError(f"dimension mismatch on pair ({i}, {j}): "
                                  f"{shape_a[i]} != {shape_b[j]}")
        if len(set(ax_a)) != len(ax_a) or len(set(ax_b)) != len(ax_b):
            raise TensorError(f"an axis is paired twice in {self.pairs}")
        n_out = len(shape_a) + len(shape_b) - 2 * len(self.pairs)
        if self.out_order is not None and sorted(self.out_order) != list(range(n_out)):
            raise TensorError(f"out_order {self.out_order} is not a permutation "
                              f"of {n_out} surviving axes")


def contract(a, b, spec, check=True):
    """Contract tensors a and b over the index pairs in `spec`.

    The result carries the surviving indices of a (original order) followed by
    those of b, then permuted by spec.out_order if given.
    """
    a = np.asarray(a, dtype=CDTYPE)
    b = np.asarray(b, dtype=CDTYPE)
    spec.validate(a.shape, b.shape)
    if spec.pairs:
        ax_a, ax_b = zip(*spec.pairs)
    else:
        ax_a, ax_b = (), ()
    out = np.tensordot(a, b, axes=(ax_a, ax_b))
    if spec.out_order is not None:
        out = np.transpose(out, spec.out_order)
    if out.ndim == 0:
        val = complex(out)
        if check and not (np.isfinite(val.real) and np.isfinite(val.imag)):
            raise TensorError("contract produced non-finite entries")
        return val
    out = np.ascontiguousarray(out)
    if check:
        _check_finite(out, "contract")
    return out


def permute(a, order):
    """Reorder tensor indices; `order` must be a permutation of axis positions."""
    a = np.asarray(a, dtype=CDTYPE)
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(a.ndim)):
        raise TensorError(f"{order} is not a permutation of {a.ndim} axes")
    return _check_finite(np.ascontiguousarray(np.transpose(a, order)), "permute")


# ---------------------------------------------------------------------------
# Network evaluation: ncon-style integer labels.  Every label must appear
# either on exactly two operands (contracted) or on one operand and in the
# output (free).  Plans are greedy (smallest intermediate first) and cached.

_PLAN_CACHE = {}


def _validate_network(subscripts, output, shapes):
    counts = {}
    dims = {}
    for subs, shape in zip(subscripts, shapes):
        if len(subs) != len(shape):
            raise TensorError(f"subscript {subs} does not match rank of shape {shape}")
        for lab, d in zip(subs, shape):
            counts[lab] = counts.get(lab, 0) + 1
            if dims.setdefault(lab, d) != d:
                raise TensorError(f"label {lab} carries conflicting dimensions "
                                  f"{dims[lab]} and {d}")
        if len(set(subs)) != len(subs):
            raise TensorError(f"repeated label within one operand: {subs}")
    out_set = set(output)
    if len(out_set) != len(output):
        raise TensorError(f"repeated label in output {output}")
    for lab, n in counts.items():
        want = 1 if lab in out_set else 2
        if n != want:
            raise TensorError(f"label {lab} appears {n} times "
                              f"({'output' if lab in out_set else 'internal'} labels "
                              f"must appear {want})")
    for lab in output:
        if lab not in counts:
            raise TensorError(f"output label {lab} missing from operands")


def _make_plan(subscripts, output, shapes):
    subs = [list(s) for s in subscripts]
    shps = [list(s) for s in shapes]
    alive = list(range(len(subs)))
    steps = []
    while len(alive) > 1:
        best = None
        for ii in range(len(alive)):
            for jj in range(ii + 1, len(alive)):
                i, j = alive[ii], alive[jj]
                shared = set(subs[i]) & set(subs[j])
                size = 1
                for k in (i, j):
                    for lab, d in zip(subs[k], shps[k]):
                        if lab not in shared:
                            size *= d
                # prefer pairs that actually share an edge
                rank = (0 if shared else 1, size, ii, jj)
                if best is None or rank < best[0]:
                    best = (rank, i, j, shared)
        _, i, j, shared = best
        pairs = tuple((subs[i].index(lab), subs[j].index(lab)) for lab in sorted(shared))
        new_subs = [lab for lab in subs[i] if lab not in shared] + \
                   [lab for lab in subs[j] if lab not in shared]
        new_shape = [shps[i][subs[i].index(lab)] for lab in new_subs if lab in subs[i]] + \
                    [shps[j][subs[j].index(lab)] for lab in new_subs if lab not in subs[i]]
        steps.append((i, j, pairs, tuple(new_subs)))
        subs.append(new_subs)
        shps.append(new_shape)
        alive.remove(i)
        alive.remove(j)
        alive.append(len(subs) - 1)
    final = alive[0]
    perm = tuple(subs[final].index(lab) for lab in output)
    return steps, final, perm


def contract_many(tensors, subscripts, output=()):
    """Contract a network of tensors given ncon-style integer labels.

    Args:
      tensors: sequence of arrays.
      subscripts: per-tensor tuple of labels, one per index.
      output: labels of the surviving indices, in the requested order
        (empty for a scalar result).
    """
    tensors = [np.asarray(t, dtype=CDTYPE) for t in tensors]
    shapes = tuple(t.shape for t in tensors)
    key = (tuple(tuple(s) for s in subscripts), tuple(output), shapes)
    plan = _PLAN_CACHE.get(key)
    if plan is None:
        _validate_network(subscripts, tuple(output), shapes)
        plan = _make_plan(subscripts, tuple(output), shapes)
        _PLAN_CACHE[key] = plan
    steps, final, perm = plan
    work = list(tensors)
    for i, j, pairs, _ in steps:
        if isinstance(work[i], complex) or isinstance(work[j], complex):
            work.append(work[i] * work[j])  # scalar component folded in
            continue
        spec = ContractionSpec(pairs)
        work.append(contract(work[i], work[j], spec, check=False))
    out = work[final]
    if isinstance(out, complex) or out.ndim == 0:
        val = complex(out)
        if not (np.isfinite(val.real) and np.isfinite(val.imag)):
            raise TensorError("contract_many produced non-finite entries")
        return val
    if perm != tuple(range(out.ndim)):
        out = np.transpose(out, perm)
    return _check_finite(np.ascontiguousarray(out), "contract_many")


# ---------------------------------------------------------------------------
# Isometry machinery.

def retract_isometry(a, row_legs, tol=1e-12):
    """Project onto the nearest isometry (polar factor) over a leg bipartition.

    The tensor is viewed as a matrix M with rows indexed by `row_legs` and
    columns by the remaining legs; M = W P with W the Frobenius-nearest
    isometry (W†W = 1 on the column space).  W is returned in the shape of a.
    Requires rows >= cols and full column rank.
    """
    a = np.asarray(a, dtype=CDTYPE)
    row_legs = tuple(int(i) for i in row_legs)
    if len(set(row_legs)) != len(row_legs) or not row_legs:
        raise TensorError(f"invalid row legs {row_legs}")
    if any(i < 0 or i >= a.ndim for i in row_legs):
        raise TensorError(f"row legs {row_legs} out of range for rank-{a.ndim} tensor")
    col_legs = tuple(i for i in range(a.ndim) if i not in row_legs)
    perm = row_legs + col_legs
    rows = prod(a.shape[i] for i in row_legs)
    cols = prod((a.shape[i] for i in col_legs), start=1)
    if rows < cols:
        raise TensorError(f"cannot retract: rows {rows} < cols {cols}")
    mat = np.transpose(a, perm).reshape(rows, cols)
    u, s, vh = np.linalg.svd(mat, full_matrices=False)
    floor = tol * max(s[0], 1.0) if s.size else tol
    bad = s[s <= floor]
    if bad.size:
        raise TensorError(f"rank-deficient matrix: singular values {bad.tolist()} "
                          f"below tolerance {floor:.3e}")
    w = u @ vh
    shape_perm = tuple(a.shape[i] for i in perm)
    inv = np.argsort(perm)
    out = np.transpose(w.reshape(shape_perm), inv)
    return _check_finite(np.ascontiguousarray(out), "retract_isometry")


def random_isometry(rows, cols, seed):
    """Haar-like random isometry: polar factor of a complex Ginibre matrix.

    Deterministic for a fixed integer seed (or caller-owned generator).
    """
    rows, cols = int(rows), int(cols)
    if rows < cols:
        raise TensorError(f"random_isometry needs rows >= cols, got {rows} < {cols}")
    rng = rng_from_seed(seed)
    g = rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))
    u, _, vh = np.linalg.svd(g, full_matrices=False)
    return np.ascontiguousarray(u @ vh)


# ---------------------------------------------------------------------------
# Binary tensor format: b"QMT1", u32 index count, u32 dims (little endian),
# then row-major interleaved re/im float64 pairs.

def write_tensor(f, a):
    a = _as_tensor(a)
    f.write(MAGIC)
    f.write(pack("<I", a.ndim))
    f.write(pack(f"<{a.ndim}I", *a.shape))
    f.write(a.astype("<c16").tobytes())


def read_tensor(f):
    head = f.read(4)
    if head != MAGIC:
        raise TensorError(f"bad magic {head!r}, expected {MAGIC!r}")
    (ndim,) = unpack("<I", _read_exact(f, 4))
    shape = unpack(f"<{ndim}I", _read_exact(f, 4 * ndim)) if ndim else ()
    count = prod(shape)
    raw = _read_exact(f, 16 * count)
    data = np.frombuffer(raw, dtype="<c16").astype(CDTYPE)
    return _check_finite(data.reshape(shape), "read_tensor")


def _read_exact(f, n):
    raw = f.read(n)
    if len(raw) != n:
        raise TensorError(f"truncated tensor file: wanted {n} bytes, got {len(raw)}")
    return raw


def save_tensor(path, a):
    with open(path, "wb") as f:
        write_tensor(f, a)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)
