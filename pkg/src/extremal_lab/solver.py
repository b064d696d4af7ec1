"""Closed-form extremal solves and their independent cross-checks.

The minimal-norm coefficient sequence moving y within a prescribed distance
of x0 comes out of a resolvent solve: with G the Gram operator of the Krylov
basis of y, the residual vector is z = (I+G)^{-1} x0, the moved point is
G z = x0 - z, and the coefficients are a_j = <z, T^j y>.  The solve itself
runs through the low-rank identity

    (I + B B^H)^{-1} x0 = x0 - B (I + B^H B)^{-1} B^H x0

so only a (J+1) x (J+1) Hermitian system is ever factored.

``calibrate_scale`` finds the scale C with ||(I + C G')^{-1} x0|| equal to a
target residual (monotone in C, so bracket + bisection + Newton), and
``oracle_minimize`` re-derives the coefficients by projected gradient descent
in double precision, sharing no code path with the resolvent route.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from mpmath import mp, mpf, mpc

from .core import (
    CoeffSeq,
    HVector,
    KrylovBasis,
    OperatorSpec,
    apply,
    gram_apply,
    krylov_basis,
    zero_vector,
)
from .errors import Infeasible, SolveFailure, Unattainable, ZeroVector
from .precision import PrecisionCtx


# ---------------------------------------------------------------------------
# low-rank resolvent engine
# ---------------------------------------------------------------------------

class GramFactor:
    """Cholesky factorization of I + B^H B for one Krylov basis."""

    def __init__(self, basis: KrylovBasis):
        self.basis = basis
        k = len(basis.vectors)
        M = mp.matrix(k, k)
        for i in range(k):
            for j in range(i, k):
                # M[i,j] = <v_j, v_i> so that M = B^H B in column convention
                val = basis.vectors[j].inner(basis.vectors[i])
                M[i, j] = val
                if i != j:
                    M[j, i] = mp.conj(val)
            M[i, i] = M[i, i] + 1
        self._chol = mp.cholesky(M)
        self._k = k

    def _solve_small(self, rhs):
        # forward/back substitution with the lower factor
        L = self._chol
        k = self._k
        y = [mpc(0)] * k
        for i in range(k):
            s = rhs[i] - mp.fsum(L[i, j] * y[j] for j in range(i))
            y[i] = s / L[i, i]
        x = [mpc(0)] * k
        for i in reversed(range(k)):
            s = y[i] - mp.fsum(mp.conj(L[j, i]) * x[j] for j in range(i + 1, k))
            x[i] = s / mp.conj(L[i, i])
        return x

    def resolvent(self, q: HVector) -> HVector:
        """(I + B B^H)^{-1} q."""
        rhs = [q.inner(v) for v in self.basis.vectors]
        u = self._solve_small(rhs)
        out = q
        for ui, v in zip(u, self.basis.vectors):
            out = out.axpy(-ui, v)
        return out


@dataclass(frozen=True)
class ExtremalState:
    """Fully solved extremal problem at one (y, x0) pair.

    y_prime is the unit-scale datum and y = sqrt(C) * y_prime; a, b, kappa
    are the coefficient sequences of z = (I+G)^{-1} x0, (I+G)^{-2} x0 and
    (I+G)^{-1} y against the Krylov vectors of y.  eps = ||z|| and
    eps_theta = sum |a_j|^2.  The phase of y is gauged so a_0 is real and
    non-negative.
    """

    operator: OperatorSpec
    x0: HVector
    y_prime: HVector
    C: mpf
    y: HVector
    basis: KrylovBasis
    z: HVector
    z2: HVector
    zy: HVector
    a: CoeffSeq
    b: CoeffSeq
    kappa: CoeffSeq
    eps: mpf
    eps_theta: mpf
    ctx: PrecisionCtx

    @property
    def moved_point(self) -> HVector:
        """ell(T) y = x0 - z."""
        return self.x0.sub(self.z)

    @property
    def band_value(self):
        """<z, x0>, the quantity kept inside the distance band."""
        return self.z.inner(self.x0).real

    def coeffs_unit_scale(self) -> CoeffSeq:
        """Coefficients against y_prime, i.e. sqrt(C) * a."""
        s = mp.sqrt(self.C)
        return CoeffSeq.make([s * v for v in self.a.values])

    @property
    def unit_scale_norm(self):
        """||ell'||_2 in the unit-scale representation, sqrt(C * eps_theta)."""
        return mp.sqrt(self.C * self.eps_theta)


def _unit_norm_check(x0: HVector, ctx: PrecisionCtx):
    if abs(x0.norm() - 1) > mpf(2) ** (-ctx.mantissa_bits // 4):
        raise ValueError("x0 must be a unit vector")


def solve_extremal(
    T: OperatorSpec,
    y: HVector,
    x0: HVector,
    ctx: PrecisionCtx,
    y_prime: Optional[HVector] = None,
    C: Optional[mpf] = None,
) -> ExtremalState:
    """Resolvent solve at a fixed y; y_prime/C record the calibration that
    produced y (both default to y itself with C = 1)."""
    with ctx.workprec():
        _unit_norm_check(x0, ctx)
        if y.is_zero():
            raise ZeroVector("extremal solve needs a nonzero y")
        basis = krylov_basis(T, y, ctx)
        fac = GramFactor(basis)

        z = fac.resolvent(x0)
        # one refinement pass, then verify the residual
        resid = x0.sub(z).sub(gram_apply(basis, z))
        if resid.norm() > ctx.sqrt_eps:
            z = z.add(fac.resolvent(resid))
            resid = x0.sub(z).sub(gram_apply(basis, z))
        if resid.norm() > ctx.sqrt_eps:
            raise SolveFailure(
                f"resolvent residual {resid.norm()} exceeds {ctx.sqrt_eps}; raise mantissa_bits"
            )
        z2 = fac.resolvent(z)
        zy = fac.resolvent(y)

        yp = y_prime if y_prime is not None else y
        Cv = mpf(C) if C is not None else mpf(1)

        a_vals = [z.inner(v) for v in basis.vectors]
        # phase gauge: rotate y so a_0 is real and non-negative
        a0 = a_vals[0]
        if a0 != 0:
            phase = a0 / abs(a0)
            if phase != 1:
                y = y.scale(phase)
                yp = yp.scale(phase)
                basis = KrylovBasis(
                    y=y,
                    degree=basis.degree,
                    vectors=tuple(v.scale(phase) for v in basis.vectors),
                    tail_bound=basis.tail_bound,
                )
                zy = zy.scale(phase)
                cp = mp.conj(phase)
                a_vals = [cp * v for v in a_vals]
        a = CoeffSeq.make(a_vals)
        b = CoeffSeq.make([z2.inner(v) for v in basis.vectors])
        kappa = CoeffSeq.make([zy.inner(v) for v in basis.vectors])

        eps = z.norm()
        eps_theta = mp.fsum(v.real * v.real + v.imag * v.imag for v in a.values)
        return ExtremalState(
            operator=T, x0=x0, y_prime=yp, C=Cv, y=y, basis=basis,
            z=z, z2=z2, zy=zy, a=a, b=b, kappa=kappa,
            eps=eps, eps_theta=eps_theta, ctx=ctx,
        )


# ---------------------------------------------------------------------------
# scale calibration
# ---------------------------------------------------------------------------

class ScaleFamily:
    """Residual norm ||(I + C G')^{-1} x0|| as a function of the scale C.

    Diagonalizing B'^H B' turns the residual into an explicit rational
    function of C, strictly decreasing from ||x0|| to the norm of the part of
    x0 orthogonal to the Krylov span.
    """

    def __init__(self, T: OperatorSpec, y_prime: HVector, x0: HVector, ctx: PrecisionCtx):
        self.T = T
        self.y_prime = y_prime
        self.x0 = x0
        self.ctx = ctx
        basis = krylov_basis(T, y_prime, ctx)
        self.basis = basis
        k = len(basis.vectors)
        M = mp.matrix(k, k)
        for i in range(k):
            for j in range(i, k):
                val = basis.vectors[j].inner(basis.vectors[i])
                M[i, j] = val
                if i != j:
                    M[j, i] = mp.conj(val)
        E, Q = mp.eighe(M)
        p = mp.matrix([x0.inner(v) for v in basis.vectors])  # B^H x0
        w = Q.H * p
        lam_max = max(E[i] for i in range(k))
        lams, weights = [], []
        for i in range(k):
            lam = E[i]
            if lam <= lam_max * mpf(2) ** (-2 * ctx.mantissa_bits) or lam <= 0:
                continue
            wi = w[i]
            lams.append(lam)
            weights.append((wi.real * wi.real + wi.imag * wi.imag) / lam)
        self.lams = lams
        self.weights = weights
        span_mass = mp.fsum(weights)
        self.rho_sq = max(x0.norm() ** 2 - span_mass, mpf(0))
        self.infimum = mp.sqrt(self.rho_sq)

    def residual_sq(self, C):
        return self.rho_sq + mp.fsum(
            w / (1 + C * lam) ** 2 for w, lam in zip(self.weights, self.lams)
        )

    def residual(self, C):
        return mp.sqrt(self.residual_sq(C))

    def residual_sq_deriv(self, C):
        return mp.fsum(
            -2 * w * lam / (1 + C * lam) ** 3 for w, lam in zip(self.weights, self.lams)
        )

    def solve_scale(self, eps_target):
        """C with residual(C) = eps_target, by geometric bracket, bisection,
        then Newton polish."""
        target = mpf(eps_target)
        if target >= self.residual(0):
            return mpf(0)
        if target <= self.infimum * (1 + mpf(2) ** (-self.ctx.mantissa_bits // 2)):
            raise Unattainable(self.infimum, target)
        hi = mpf(1)
        for _ in range(100000):
            if self.residual(hi) <= target:
                break
            hi *= 16
        else:  # pragma: no cover - unreachable given the infimum check
            raise SolveFailure("bracket growth did not converge")
        lo = mpf(0)
        for _ in range(200):
            mid = (lo + hi) / 2
            if self.residual(mid) > target:
                lo = mid
            else:
                hi = mid
        C = (lo + hi) / 2
        t2 = target * target
        for _ in range(8):
            f = self.residual_sq(C) - t2
            df = self.residual_sq_deriv(C)
            if df == 0:
                break
            step = f / df
            Cn = C - step
            if Cn <= 0:
                break
            C = Cn
        return C

    def state_at(self, C) -> ExtremalState:
        if C == 0:
            return _zero_scale_state(self.T, self.y_prime, self.x0, self.basis, self.ctx)
        y = self.y_prime.scale(mp.sqrt(C))
        return solve_extremal(self.T, y, self.x0, self.ctx, y_prime=self.y_prime, C=C)


def _zero_scale_state(T, y_prime, x0, basis0, ctx) -> ExtremalState:
    """Degenerate C = 0 state: nothing moves, z = x0, all coefficients zero."""
    n = len(basis0.vectors)
    dim = x0.dim
    zero_basis = KrylovBasis(
        y=zero_vector(dim),
        degree=basis0.degree,
        vectors=tuple(zero_vector(dim) for _ in range(n)),
        tail_bound=mpf(0),
    )
    zeros = CoeffSeq.make([mpc(0)] * n)
    return ExtremalState(
        operator=T, x0=x0, y_prime=y_prime, C=mpf(0), y=zero_vector(dim),
        basis=zero_basis, z=x0, z2=x0, zy=zero_vector(dim),
        a=zeros, b=zeros, kappa=zeros, eps=x0.norm(), eps_theta=mpf(0), ctx=ctx,
    )


def calibrate_scale(
    T: OperatorSpec,
    y_prime: HVector,
    x0: HVector,
    eps_target,
    ctx: PrecisionCtx,
) -> ExtremalState:
    """State whose residual norm equals eps_target, reached by scaling y_prime.

    Raises Unattainable (with the infimum attached) when x0 sits too far from
    the Krylov span for the target to be reachable at any scale.
    """
    with ctx.workprec():
        _unit_norm_check(x0, ctx)
        if y_prime.is_zero():
            raise ZeroVector("calibration needs a nonzero y_prime")
        target = mpf(eps_target)
        if not target > 0:
            raise ValueError("eps_target must be positive")
        fam = ScaleFamily(T, y_prime, x0, ctx)
        C = fam.solve_scale(target) if target < 1 else mpf(0)
        return fam.state_at(C)


# ---------------------------------------------------------------------------
# independent oracle (double precision, projected gradient)
# ---------------------------------------------------------------------------

def _projection_factory(B: np.ndarray, x0: np.ndarray, eps: float):
    """Projector onto {a : ||B a - x0|| <= eps}, via the SVD of B and a
    scalar secular equation in the Lagrange multiplier."""
    U, S, Vh = np.linalg.svd(B, full_matrices=False)
    keep = S > S[0] * 1e-300 if S.size and S[0] > 0 else np.zeros_like(S, dtype=bool)
    U, S, Vh = U[:, keep], S[keep], Vh[keep, :]
    xr = U.conj().T @ x0
    rho_sq = float(np.linalg.norm(x0) ** 2 - np.linalg.norm(xr) ** 2)
    rho_sq = max(rho_sq, 0.0)
    budget = eps * eps - rho_sq
    if budget < -1e-14:
        raise Infeasible(f"distance {eps} below attainable {np.sqrt(rho_sq)}")
    budget = max(budget, 0.0)

    def project(a: np.ndarray) -> np.ndarray:
        t = Vh @ a
        free = a - Vh.conj().T @ t  # component outside the row space stays put
        d = S * t - xr
        if float(np.sum(np.abs(d) ** 2)) <= budget:
            return a
        dd = np.abs(S * t - xr) ** 2

        def phi(lam):
            return float(np.sum(dd / (1 + lam * S**2) ** 2)) - budget

        lo, hi = 0.0, 1.0
        while phi(hi) > 0:
            hi *= 4
            if hi > 1e300:
                break
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if phi(mid) > 0:
                lo = mid
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
        tnew = (t + lam * S * xr) / (1 + lam * S**2)
        return free + Vh.conj().T @ tnew

    return project, rho_sq


def oracle_minimize(
    T: OperatorSpec,
    y: HVector,
    x0: HVector,
    eps_target,
    ctx: PrecisionCtx,
    restarts: int = 8,
    seed: int = 0,
    max_iter: int = 20000,
    stat_tol: float = 1e-10,
) -> CoeffSeq:
    """Brute-force minimal-norm coefficients by projected gradient descent.

    Exists solely to cross-check the resolvent route; runs in double
    precision with multi-start, iterated to a stationarity gap below
    stat_tol.  Raises Infeasible when eps_target is below the attainable
    infimum.
    """
    with ctx.workprec():
        basis = krylov_basis(T, y, ctx)
        eps = float(mpf(eps_target))
        cols = [
            np.array([complex(c) for c in v.coords], dtype=complex)
            for v in basis.vectors
        ]
        B = np.stack(cols, axis=1)
        x0f = np.array([complex(c) for c in x0.coords], dtype=complex)
    if eps >= float(np.linalg.norm(x0f)):
        return CoeffSeq.make([mpc(0)] * len(basis.vectors))
    project, _ = _projection_factory(B, x0f, eps)

    rng = np.random.default_rng(seed)
    best = None
    for trial in range(restarts):
        if trial == 0:
            a = np.zeros(B.shape[1], dtype=complex)
        else:
            a = rng.standard_normal(B.shape[1]) + 1j * rng.standard_normal(B.shape[1])
        a = project(a)
        for _ in range(max_iter):
            a_next = project(a * 0.5)  # gradient step with eta = 1/(2L), L = 2
            gap = float(np.linalg.norm(a_next - a))
            a = a_next
            if gap <= stat_tol * max(1.0, float(np.linalg.norm(a))):
                break
        val = float(np.linalg.norm(a))
        if best is None or val < best[0]:
            best = (val, a)
    return CoeffSeq.make([mpc(v) for v in best[1]])


def oracle_residual(T: OperatorSpec, y: HVector, x0: HVector, coeffs: CoeffSeq, ctx: PrecisionCtx):
    """Distance ||x0 - sum_j c_j T^j y|| for externally produced coefficients."""
    with ctx.workprec():
        basis = krylov_basis(T, y, ctx)
        acc = x0
        for c, v in zip(coeffs.values, basis.vectors):
            acc = acc.axpy(-c, v)
        return acc.norm()


# ---------------------------------------------------------------------------
# identity checks
# ---------------------------------------------------------------------------

def stationarity_check(state: ExtremalState, r: CoeffSeq) -> Tuple[mpc, Optional[mpc]]:
    """Pairing <r(T) y, z> evaluated by fresh operator powers, and the
    proportionality constant pairing / <r, a> when the latter is nonzero.

    Minimality forces the pairing to vanish whenever r is coefficient-
    orthogonal to the solution, and makes the constant independent of r.
    """
    with state.ctx.workprec():
        T = state.operator
        w = zero_vector(state.y.dim)
        cur = state.y
        for rj in r.values:
            w = w.axpy(rj, cur)
            cur = apply(T, cur)
        pairing = w.inner(state.z)
        denom = r.coeff_inner(state.a)
        scale = r.two_norm * state.a.two_norm
        if scale == 0 or abs(denom) <= scale * state.ctx.sqrt_eps:
            return pairing, None
        return pairing, pairing / denom


def almost_invariance_profile(state: ExtremalState, j_max: int):
    """p_j = |<T^j ell(T)y, z>| for j = 0..j_max, plus the truncation slack
    tol_trunc = tau ||y|| / eps_theta that the bound p_j <= eps_theta is
    checked against."""
    with state.ctx.workprec():
        T = state.operator
        ly = state.moved_point
        out = []
        cur = ly
        for _ in range(j_max + 1):
            out.append(abs(cur.inner(state.z)))
            cur = apply(T, cur)
        if state.eps_theta > 0:
            tol = state.basis.tail_bound / state.eps_theta
        else:
            tol = mpf(0)
        return out, tol


# ---------------------------------------------------------------------------
# epsilon scan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScanPoint:
    eps: mpf
    C: mpf
    eps_theta: mpf
    a0_unit: mpc
    two_norm_unit: mpf
    coeffs_unit: CoeffSeq
    state: ExtremalState


@dataclass(frozen=True)
class ScanCurve:
    points: Tuple[ScanPoint, ...]
    lipschitz_witness: mpf


def epsilon_scan(T: OperatorSpec, y_prime: HVector, x0: HVector, eps_grid, ctx: PrecisionCtx) -> ScanCurve:
    """Solve at every eps in the grid and report the largest adjacent
    coefficient jump per unit eps, the empirical continuity constant."""
    with ctx.workprec():
        fam = ScaleFamily(T, y_prime, x0, ctx)
        pts = []
        for eps in eps_grid:
            target = mpf(eps)
            C = fam.solve_scale(target) if target < 1 else mpf(0)
            st = fam.state_at(C)
            cu = st.coeffs_unit_scale()
            pts.append(ScanPoint(
                eps=st.eps, C=st.C, eps_theta=st.eps_theta,
                a0_unit=cu.values[0] if len(cu) else mpc(0),
                two_norm_unit=cu.two_norm, coeffs_unit=cu, state=st,
            ))
        lip = mpf(0)
        for p, q in zip(pts, pts[1:]):
            de = abs(p.eps - q.eps)
            if de == 0:
                continue
            dl = CoeffSeq.make(
                [u - v for u, v in zip(p.coeffs_unit.values, q.coeffs_unit.values)]
            ).two_norm
            lip = max(lip, dl / de)
        return ScanCurve(points=tuple(pts), lipschitz_witness=lip)
