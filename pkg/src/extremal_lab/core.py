"""Operator surrogates, vectors, Krylov bases, and the Gram operator.

Vectors live in C^N with the inner product conjugate-linear in the second
argument: <x, y> = sum_i x_i * conj(y_i).  Operators come in three kinds
(dense, weighted shift, diagonal) and are normalized so the operator norm
equals 1/K.  The Krylov basis of y truncates at the smallest degree J with
K**-J below the tail tolerance, which the norm decay ||T^j y|| <= ||y|| K**-j
justifies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

from mpmath import mp, mpf, mpc

from .errors import (
    DimensionMismatch,
    NonInjective,
    ZeroOperator,
    ZeroVector,
)
from .precision import PrecisionCtx

DENSE = "dense"
WEIGHTED_SHIFT = "weighted_shift"
DIAGONAL = "diagonal"


# ---------------------------------------------------------------------------
# vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HVector:
    """Immutable vector of mpc coordinates."""

    coords: Tuple[mpc, ...]

    @property
    def dim(self) -> int:
        return len(self.coords)

    def norm(self):
        return mp.sqrt(mp.fsum(c.real * c.real + c.imag * c.imag for c in self.coords))

    def inner(self, other: "HVector"):
        """<self, other>, conjugate-linear in ``other``."""
        if self.dim != other.dim:
            raise DimensionMismatch(f"{self.dim} vs {other.dim}")
        return mp.fdot(zip(self.coords, other.coords), conjugate=True)

    def add(self, other: "HVector") -> "HVector":
        if self.dim != other.dim:
            raise DimensionMismatch(f"{self.dim} vs {other.dim}")
        return HVector(tuple(a + b for a, b in zip(self.coords, other.coords)))

    def sub(self, other: "HVector") -> "HVector":
        if self.dim != other.dim:
            raise DimensionMismatch(f"{self.dim} vs {other.dim}")
        return HVector(tuple(a - b for a, b in zip(self.coords, other.coords)))

    def scale(self, s) -> "HVector":
        s = mpc(s)
        return HVector(tuple(s * c for c in self.coords))

    def axpy(self, s, other: "HVector") -> "HVector":
        """self + s * other."""
        if self.dim != other.dim:
            raise DimensionMismatch(f"{self.dim} vs {other.dim}")
        s = mpc(s)
        return HVector(tuple(a + s * b for a, b in zip(self.coords, other.coords)))

    def is_zero(self) -> bool:
        return all(c == 0 for c in self.coords)

    def normalized(self) -> "HVector":
        n = self.norm()
        if n == 0:
            raise ZeroVector("cannot normalize the zero vector")
        return self.scale(1 / n)


def basis_vector(dim: int, index: int) -> HVector:
    if not 0 <= index < dim:
        raise DimensionMismatch(f"basis index {index} out of range for dim {dim}")
    return HVector(tuple(mpc(1) if i == index else mpc(0) for i in range(dim)))


def zero_vector(dim: int) -> HVector:
    return HVector(tuple(mpc(0) for _ in range(dim)))


def from_floats(values) -> HVector:
    return HVector(tuple(mpc(v) for v in values))


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatorSpec:
    """One of three operator kinds, stored with its normalization factor.

    data layout by kind:
      dense          tuple of row tuples, N x N
      weighted_shift tuple of N-1 weights, e_i -> w_i e_{i+1}
      diagonal       tuple of N diagonal entries
    """

    kind: str
    dim: int
    data: tuple
    norm_scale: mpf = mpf(1)

    def __post_init__(self):
        if self.kind not in (DENSE, WEIGHTED_SHIFT, DIAGONAL):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        expected = {
            DENSE: self.dim,
            WEIGHTED_SHIFT: self.dim - 1,
            DIAGONAL: self.dim,
        }[self.kind]
        if len(self.data) != expected:
            raise DimensionMismatch(
                f"{self.kind} operator of dim {self.dim} needs {expected} data entries"
            )


def dense_operator(rows) -> OperatorSpec:
    data = tuple(tuple(mpc(v) for v in row) for row in rows)
    return OperatorSpec(DENSE, len(data), data)


def shift_operator(weights) -> OperatorSpec:
    data = tuple(mpc(w) for w in weights)
    return OperatorSpec(WEIGHTED_SHIFT, len(data) + 1, data)


def diagonal_operator(entries) -> OperatorSpec:
    data = tuple(mpc(v) for v in entries)
    return OperatorSpec(DIAGONAL, len(data), data)


def apply(T: OperatorSpec, v: HVector, adjoint: bool = False) -> HVector:
    """Matrix-vector product T v, or T* v with the adjoint flag."""
    if v.dim != T.dim:
        raise DimensionMismatch(f"operator dim {T.dim}, vector dim {v.dim}")
    c = v.coords
    if T.kind == DIAGONAL:
        diag = T.data
        if adjoint:
            return HVector(tuple(mp.conj(d) * x for d, x in zip(diag, c)))
        return HVector(tuple(d * x for d, x in zip(diag, c)))
    if T.kind == WEIGHTED_SHIFT:
        w = T.data
        out = [mpc(0)] * T.dim
        if adjoint:
            for i in range(T.dim - 1):
                out[i] = mp.conj(w[i]) * c[i + 1]
        else:
            for i in range(T.dim - 1):
                out[i + 1] = w[i] * c[i]
        return HVector(tuple(out))
    rows = T.data
    if adjoint:
        out = []
        for j in range(T.dim):
            out.append(mp.fsum(mp.conj(rows[i][j]) * c[i] for i in range(T.dim)))
        return HVector(tuple(out))
    return HVector(tuple(mp.fdot(zip(row, c)) for row in rows))


def _dense_matrix(T: OperatorSpec):
    m = mp.matrix(T.dim, T.dim)
    if T.kind == DENSE:
        for i, row in enumerate(T.data):
            for j, vv in enumerate(row):
                m[i, j] = vv
    elif T.kind == WEIGHTED_SHIFT:
        for i, w in enumerate(T.data):
            m[i + 1, i] = w
    else:
        for i, d in enumerate(T.data):
            m[i, i] = d
    return m


def singular_extremes(T: OperatorSpec):
    """(largest, smallest) singular value.

    For shifts and diagonals these are max/min weight moduli; the truncated
    shift matrix itself is singular, so the weight minimum stands in for the
    injectivity of the untruncated operator.
    """
    if T.kind in (WEIGHTED_SHIFT, DIAGONAL):
        mods = [abs(w) for w in T.data]
        return max(mods), min(mods)
    S = mp.svd_c(_dense_matrix(T), compute_uv=False)
    vals = [S[i] for i in range(S.rows)]
    return max(vals), min(vals)


def operator_norm(T: OperatorSpec):
    return singular_extremes(T)[0]


def scale_operator(T: OperatorSpec, s) -> OperatorSpec:
    s = mpf(s) if mpc(s).imag == 0 else mpc(s)
    if T.kind == DENSE:
        data = tuple(tuple(s * v for v in row) for row in T.data)
    else:
        data = tuple(s * v for v in T.data)
    return OperatorSpec(T.kind, T.dim, data, norm_scale=T.norm_scale * s)


def normalize_operator(raw: OperatorSpec, ctx: PrecisionCtx) -> OperatorSpec:
    """Rescale so the operator norm equals 1/K, recording the factor applied.

    Raises ZeroOperator for the zero operator and NonInjective when the
    injectivity surrogate fails (zero singular value, or a zero weight /
    diagonal entry).
    """
    with ctx.workprec():
        big, small = singular_extremes(raw)
        if big == 0:
            raise ZeroOperator("cannot normalize the zero operator")
        if small == 0:
            raise NonInjective("smallest singular value is zero")
        factor = 1 / (ctx.kval * big)
        return scale_operator(raw, factor)


# ---------------------------------------------------------------------------
# Krylov basis and the Gram operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KrylovBasis:
    """Powers T^0 y .. T^J y with a bound on everything beyond degree J."""

    y: HVector
    degree: int
    vectors: Tuple[HVector, ...]
    tail_bound: mpf


def truncation_degree(ctx: PrecisionCtx, dim: int) -> int:
    """Smallest J with K**-J <= tau, capped at dim - 1."""
    with ctx.workprec():
        K, tau = ctx.kval, ctx.tau
        J = max(int(mp.ceil(mp.log(1 / tau) / mp.log(K))), 0)
        while K ** mpf(-J) > tau:
            J += 1
        while J > 0 and K ** mpf(-(J - 1)) <= tau:
            J -= 1
    return min(J, dim - 1)


def krylov_basis(T: OperatorSpec, y: HVector, ctx: PrecisionCtx) -> KrylovBasis:
    if y.is_zero():
        raise ZeroVector("Krylov basis needs a nonzero seed vector")
    with ctx.workprec():
        J = truncation_degree(ctx, T.dim)
        vecs = [y]
        for _ in range(J):
            vecs.append(apply(T, vecs[-1]))
        tail = apply(T, vecs[-1]).norm()
        return KrylovBasis(y=y, degree=J, vectors=tuple(vecs), tail_bound=tail)


def extend_powers(T: OperatorSpec, basis: KrylovBasis, up_to: int):
    """Vectors T^0 y .. T^up_to y, reusing the stored basis."""
    vecs = list(basis.vectors)
    while len(vecs) <= up_to:
        vecs.append(apply(T, vecs[-1]))
    return vecs


def gram_apply(basis: KrylovBasis, x: HVector) -> HVector:
    """The positive action x -> sum_j <x, T^j y> T^j y."""
    if x.dim != basis.y.dim:
        raise DimensionMismatch(f"{x.dim} vs {basis.y.dim}")
    acc = zero_vector(x.dim)
    for v in basis.vectors:
        acc = acc.axpy(x.inner(v), v)
    return acc


def autocorrelation(T: OperatorSpec, y: HVector, j_max: int):
    """c_j = <T^j y, y> for j = 0..j_max."""
    if y.is_zero():
        raise ZeroVector("autocorrelation needs a nonzero vector")
    out = []
    cur = y
    for _ in range(j_max + 1):
        out.append(cur.inner(y))
        cur = apply(T, cur)
    return out


# ---------------------------------------------------------------------------
# coefficient sequences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoeffSeq:
    """Finite coefficient sequence with its cached Euclidean norm."""

    values: Tuple[mpc, ...]
    two_norm: mpf

    @classmethod
    def make(cls, values) -> "CoeffSeq":
        vals = tuple(mpc(v) for v in values)
        n = mp.sqrt(mp.fsum(v.real * v.real + v.imag * v.imag for v in vals))
        return cls(values=vals, two_norm=n)

    def __len__(self):
        return len(self.values)

    def coeff_inner(self, other: "CoeffSeq"):
        """<r, s> = sum_j r_j conj(s_j) over the shorter length."""
        n = min(len(self), len(other))
        return mp.fdot(zip(self.values[:n], other.values[:n]), conjugate=True)


def seq_zeros(n: int) -> CoeffSeq:
    return CoeffSeq.make([mpc(0)] * n)
