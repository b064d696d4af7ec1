"""The main construction: first-order step calculus, constrained step
selection, the near-collinear fallback, dominance renormalization, the case
dichotomy, the startup scan, restriction vectors, and the full iteration
loop.

A step replaces y by y + sum_j r_j T^j y.  To first order the induced
changes of <z, x0>, eps_theta and a_0 = <z, y> are coefficient correlation
sums between the sequences a, b, kappa of the current state; the step is the
minimal-norm r meeting a prescribed eps_theta decrease subject to the band
budget and orthogonality against installed restriction vectors, followed by
a backtracking line search on the actual recomputed quantities.

``pairing_change`` is the bare symmetrized correlation sum (equal to the
circle-integral form, checked against quadrature in the tests); the step
engine uses the exact differentials of the truncated dynamics, which extend
the correlation sums by Krylov powers up to twice the basis degree so the
finite-difference validation sees a clean second-order remainder.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from mpmath import mp, mpf, mpc

from .core import (
    CoeffSeq,
    HVector,
    OperatorSpec,
    apply,
    autocorrelation,
    basis_vector,
    extend_powers,
    gram_apply,
    krylov_basis,
    zero_vector,
)
from .errors import (
    Degenerate,
    LineSearchFail,
    NotDegenerate,
    ScanExhausted,
    SolveFailure,
    Unattainable,
    ZeroVector,
)
from .precision import PrecisionCtx
from .solver import ExtremalState, GramFactor, calibrate_scale, solve_extremal


# ---------------------------------------------------------------------------
# change functionals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChangeFunctionals:
    """Coefficient sequences driving the first-order change integrals.

    f is the solution sequence a, g the squared-resolvent sequence b, and
    kappa the resolvent-of-y sequence with its constant term shifted by -1.
    """

    f_coeffs: CoeffSeq
    g_coeffs: CoeffSeq
    kappa_coeffs: CoeffSeq

    @classmethod
    def from_state(cls, state: ExtremalState) -> "ChangeFunctionals":
        kv = list(state.kappa.values)
        kv[0] = kv[0] - 1
        return cls(
            f_coeffs=state.a,
            g_coeffs=state.b,
            kappa_coeffs=CoeffSeq.make(kv),
        )


def pairing_change_complex(s1: CoeffSeq, s2: CoeffSeq, r: CoeffSeq) -> mpc:
    """-(sum_j sum_m r_j s1_m conj(s2_{m+j}) + conj(r_j) s1_{m+j} conj(s2_m)),
    indices beyond the sequence lengths treated as zero."""
    v1, v2, rv = s1.values, s2.values, r.values
    total = mpc(0)
    for j, rj in enumerate(rv):
        if rj == 0:
            continue
        t1 = mp.fsum(
            v1[m] * mp.conj(v2[m + j]) for m in range(len(v1)) if m + j < len(v2)
        )
        t2 = mp.fsum(
            v1[m + j] * mp.conj(v2[m]) for m in range(len(v2)) if m + j < len(v1)
        )
        total += rj * t1 + mp.conj(rj) * t2
    return -total


def pairing_change(s1: CoeffSeq, s2: CoeffSeq, r: CoeffSeq):
    """Real part of the correlation sum; the phase gauge makes the exact
    value real for the combinations the construction uses."""
    return pairing_change_complex(s1, s2, r).real


# ---------------------------------------------------------------------------
# exact differentials of the truncated dynamics
# ---------------------------------------------------------------------------

class StepCalculus:
    """Rows and predictions for the first-order effect of y -> y + r(T) y.

    All functionals are expressed through two complex coefficient vectors
    (cplus, cminus) per target: F(r) = -(sum_j r_j cplus_j
    + conj(r_j) cminus_j).  The sequences extend to twice the basis degree,
    which makes F the exact differential of the truncated resolvent solve.
    """

    def __init__(self, state: ExtremalState):
        self.state = state
        basis = state.basis
        J = basis.degree
        self.J = J
        self.vext = extend_powers(state.operator, basis, 2 * J)
        self.a_trunc = list(state.a.values)
        self.a_ext = [state.z.inner(v) for v in self.vext]
        self._pairs = {}

    def _seqs_for(self, key, p_vec: HVector):
        if key not in self._pairs:
            p_trunc = [p_vec.inner(v) for v in self.state.basis.vectors]
            p_ext = [p_vec.inner(v) for v in self.vext]
            self._pairs[key] = (p_trunc, p_ext)
        return self._pairs[key]

    def correlation_pair(self, p_trunc, p_ext):
        """cplus_j, cminus_j for j = 0..J against the solution sequence."""
        J = self.J
        cplus, cminus = [], []
        for j in range(J + 1):
            cplus.append(mp.fsum(
                self.a_trunc[m] * mp.conj(p_ext[m + j]) for m in range(J + 1)
            ))
            cminus.append(mp.fsum(
                self.a_ext[m + j] * mp.conj(p_trunc[m]) for m in range(J + 1)
            ))
        return cplus, cminus

    def pair_for_target(self, name: str):
        state = self.state
        vec = {"z": state.z, "z2": state.z2, "zy": state.zy}[name]
        if name not in self._pairs:
            self._pairs[name] = self.correlation_pair(*self._seqs_for("#" + name, vec))
        return self._pairs[name]

    def pair_for_vector(self, key, p_vec: HVector):
        ck = ("vec", key)
        if ck not in self._pairs:
            self._pairs[ck] = self.correlation_pair(*self._seqs_for(ck, p_vec))
        return self._pairs[ck]

    @staticmethod
    def evaluate(pair, r: CoeffSeq) -> mpc:
        cplus, cminus = pair
        return -mp.fsum(
            rj * cp + mp.conj(rj) * cm
            for rj, cp, cm in zip(r.values, cplus, cminus)
        )

    # -- real rows over x = (Re r, Im r) -----------------------------------

    @staticmethod
    def re_row(pair):
        cplus, cminus = pair
        row = [-(cp + cm).real for cp, cm in zip(cplus, cminus)]
        row += [(cp - cm).imag for cp, cm in zip(cplus, cminus)]
        return row

    @staticmethod
    def im_row(pair):
        cplus, cminus = pair
        row = [-(cp + cm).imag for cp, cm in zip(cplus, cminus)]
        row += [-(cp - cm).real for cp, cm in zip(cplus, cminus)]
        return row

    def band_row(self):
        return self.re_row(self.pair_for_target("z"))

    def eps_theta_row(self):
        rb = self.band_row()
        rz = self.re_row(self.pair_for_target("z2"))
        return [u - 2 * v for u, v in zip(rb, rz)]

    def predict(self, r: CoeffSeq):
        """(d<z,x0>, d eps_theta, d<z,y>) to first order; the last is complex."""
        d_band = self.evaluate(self.pair_for_target("z"), r).real
        d_znorm2 = 2 * self.evaluate(self.pair_for_target("z2"), r).real
        d_eps_theta = d_band - d_znorm2
        d_a0 = self.evaluate(self.pair_for_target("zy"), r)
        d_a0 += mp.fsum(
            mp.conj(rj) * aj for rj, aj in zip(r.values, self.a_trunc)
        )
        return d_band, d_eps_theta, d_a0


def predict_changes(state: ExtremalState, r: CoeffSeq):
    with state.ctx.workprec():
        return StepCalculus(state).predict(r)


def _resolve_raw(T: OperatorSpec, y: HVector, x0: HVector, ctx: PrecisionCtx):
    basis = krylov_basis(T, y, ctx)
    z = GramFactor(basis).resolvent(x0)
    return z, basis


def first_order_oracle(state: ExtremalState, r: CoeffSeq, h):
    """Centered finite differences of (<z,x0>, eps_theta, <z,y>) under
    y -> y +/- h r(T) y, for validating the first-order calculus."""
    ctx = state.ctx
    with ctx.workprec():
        h = mpf(h)
        T = state.operator
        dy = zero_vector(state.y.dim)
        for rj, v in zip(r.values, state.basis.vectors):
            dy = dy.axpy(rj, v)
        if state.y.add(dy.scale(h)).is_zero() or state.y.sub(dy.scale(h)).is_zero():
            raise ValueError("step too large: perturbed y vanishes")

        def observables(y_h):
            z, basis = _resolve_raw(T, y_h, state.x0, ctx)
            band = z.inner(state.x0).real
            et = mp.fsum(abs(z.inner(v)) ** 2 for v in basis.vectors)
            return band, et, z.inner(y_h)

        bp, ep, pp = observables(state.y.add(dy.scale(h)))
        bm, em, pm = observables(state.y.sub(dy.scale(h)))
        return (bp - bm) / (2 * h), (ep - em) / (2 * h), (pp - pm) / (2 * h)


# ---------------------------------------------------------------------------
# independence measure
# ---------------------------------------------------------------------------

def independence_measure(vectors: Sequence[HVector]):
    """Smallest singular value of the column matrix; approximates the
    max-norm independence quantity within a factor between 1 and sqrt(m)."""
    if not vectors:
        raise ZeroVector("independence measure needs at least one vector")
    for v in vectors:
        if v.is_zero():
            return mpf(0)
    n, m = vectors[0].dim, len(vectors)
    A = mp.matrix(n, m)
    for j, v in enumerate(vectors):
        for i, c in enumerate(v.coords):
            A[i, j] = c
    S = mp.svd_c(A, compute_uv=False)
    return min(S[i] for i in range(S.rows))


# ---------------------------------------------------------------------------
# restrictions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RestrictionSet:
    """Vectors against which step changes of z are constrained orthogonal."""

    w_list: Tuple[HVector, ...] = ()
    delta1: Optional[mpf] = None
    delta2: Optional[mpf] = None
    j1: Optional[int] = None
    j2: Optional[int] = None
    p_restrict: Optional[int] = None

    def install(self, w: HVector, delta1, delta2, j1, j2, p) -> "RestrictionSet":
        return RestrictionSet(
            w_list=self.w_list + (w,),
            delta1=delta1, delta2=delta2, j1=j1, j2=j2, p_restrict=p,
        )

    def __len__(self):
        return len(self.w_list)


def build_restriction(state: ExtremalState, delta2, j1: int, j2: int, p, ctx: PrecisionCtx) -> HVector:
    """w = y' + delta2**p (T*^j1 y' + T*^j2 y')."""
    with ctx.workprec():
        T = state.operator
        yp = state.y_prime
        scale = mpf(delta2) ** p

        def adj_power(j):
            cur = yp
            for _ in range(j):
                cur = apply(T, cur, adjoint=True)
            return cur

        w = yp
        if scale != 0:
            w = w.axpy(scale, adj_power(j1))
            w = w.axpy(scale, adj_power(j2))
        return w


def autocorrelation_witnesses(state: ExtremalState, n0: int, span: int, ctx: PrecisionCtx):
    """(delta1, j1, delta2, j2): the strongest normalized autocorrelations of
    y' in the windows [1, n0] and (n0, n0 + span]."""
    with ctx.workprec():
        yp = state.y_prime
        c = autocorrelation(state.operator, yp, n0 + span)
        nsq = yp.norm() ** 2
        best1 = max(range(1, n0 + 1), key=lambda j: abs(c[j]))
        best2 = max(range(n0 + 1, n0 + span + 1), key=lambda j: abs(c[j]))
        return abs(c[best1]) / nsq, best1, abs(c[best2]) / nsq, best2


# ---------------------------------------------------------------------------
# minimal-norm constrained solve
# ---------------------------------------------------------------------------

def _min_norm_solve(rows: List[list], targets: List, drop_tol):
    """Minimal Euclidean-norm x with rows_i . x = targets_i.

    Row Gram-Schmidt; dependent rows with inconsistent targets raise
    Degenerate, consistent duplicates are dropped.
    """
    basis_rows, basis_targets = [], []
    for row, tgt in zip(rows, targets):
        v = [mpf(e) for e in row]
        t = mpf(tgt)
        scale = mp.sqrt(mp.fsum(e * e for e in v)) + drop_tol
        for q, qt in zip(basis_rows, basis_targets):
            proj = mp.fsum(a * b for a, b in zip(v, q))
            v = [a - proj * b for a, b in zip(v, q)]
            t = t - proj * qt
        nv = mp.sqrt(mp.fsum(e * e for e in v))
        if nv <= drop_tol * scale:
            if abs(t) > drop_tol * (1 + abs(mpf(tgt))):
                raise Degenerate(nv, drop_tol * scale)
            continue
        basis_rows.append([e / nv for e in v])
        basis_targets.append(t / nv)
    n = len(rows[0])
    x = [mpf(0)] * n
    for q, qt in zip(basis_rows, basis_targets):
        for i in range(n):
            x[i] += qt * q[i]
    return x


def _coeffs_from_real(x, J: int) -> CoeffSeq:
    return CoeffSeq.make([mpc(x[j], x[J + 1 + j]) for j in range(J + 1)])


# ---------------------------------------------------------------------------
# step selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MCStep:
    """One accepted step: perturbation coefficients, target decrease rate,
    predicted vs recomputed first-order changes, and the applied scale."""

    r: CoeffSeq
    beta: mpf
    predicted: tuple
    actual: tuple
    scale: mpf
    path: str
    independence: Optional[mpf] = None
    band_budget: Optional[mpf] = None
    restriction_residual: Optional[mpf] = None


def _direction_triple(state: ExtremalState):
    """Normalized directions of G z, G z2 and the resolvent of y."""
    gz = state.x0.sub(state.z)          # G z = x0 - z
    gz2 = state.z.sub(state.z2)         # G z2 = z - z2
    out = []
    for v in (gz, gz2, state.zy):
        n = v.norm()
        out.append(v if n == 0 else v.scale(1 / n))
    return out


def select_step(
    state: ExtremalState,
    restrictions: RestrictionSet,
    beta,
    ctx: PrecisionCtx,
    functionals: Optional[ChangeFunctionals] = None,
    s_min_coeff=1e-3,
    require_independence: bool = True,
    max_halvings: int = 20,
) -> Tuple[MCStep, ExtremalState]:
    """Minimal-norm step with a first-order eps_theta decrease of
    2*beta*eps_theta, band budget 10*beta*eps_theta, orthogonality against
    every installed restriction vector, and a backtracking line search on the
    recomputed state.

    Raises Degenerate when the direction triple falls under the independence
    threshold (callers switch to the fallback path) and LineSearchFail when
    no scale achieves the decrease.
    """
    with ctx.workprec():
        beta = mpf(beta)
        et = state.eps_theta
        if et <= 0:
            raise ValueError("eps_theta must be positive to take a step")

        calc = StepCalculus(state)
        J = calc.J

        independence = None
        if require_independence:
            independence = independence_measure(_direction_triple(state))
            s_min = mpf(s_min_coeff) * et
            if independence < s_min:
                raise Degenerate(independence, s_min)

        if beta == 0:
            zero_r = CoeffSeq.make([mpc(0)] * (J + 1))
            step = MCStep(
                r=zero_r, beta=beta, predicted=(mpf(0), mpf(0), mpf(0)),
                actual=(mpf(0), mpf(0), mpf(0)), scale=mpf(1),
                path="main" if require_independence else "fallback",
                independence=independence,
            )
            return step, state

        drop_tol = ctx.sqrt_eps
        w_pairs = []
        fac = GramFactor(state.basis)
        for w in restrictions.w_list:
            pw = fac.resolvent(w)
            w_pairs.append((w, calc.pair_for_vector(id(w), pw)))

        def assemble(extra_band_row: bool):
            rows = [calc.eps_theta_row()]
            tgts = [-2 * beta * et]
            if extra_band_row:
                rows.append(calc.band_row())
                tgts.append(mpf(0))
            for _, pair in w_pairs:
                rows.append(calc.re_row(pair))
                tgts.append(mpf(0))
                rows.append(calc.im_row(pair))
                tgts.append(mpf(0))
            return rows, tgts

        rows, tgts = assemble(extra_band_row=False)
        x = _min_norm_solve(rows, tgts, drop_tol)
        r = _coeffs_from_real(x, J)
        d_band, d_et, d_a0 = calc.predict(r)
        budget = 10 * beta * et
        if abs(d_band) > budget:
            rows, tgts = assemble(extra_band_row=True)
            x = _min_norm_solve(rows, tgts, drop_tol)
            r = _coeffs_from_real(x, J)
            d_band, d_et, d_a0 = calc.predict(r)

        dy = zero_vector(state.y.dim)
        for rj, v in zip(r.values, state.basis.vectors):
            dy = dy.axpy(rj, v)

        p_lower = ctx.exponent("p_lower")
        scale = mpf(1)
        for _ in range(max_halvings + 1):
            cand_y = state.y.add(dy.scale(scale))
            if not cand_y.is_zero():
                try:
                    cand = _restate(state, cand_y, ctx)
                    cand, rres = _restriction_correction(cand, state, restrictions, ctx)
                    decrease = et - cand.eps_theta
                    band_move = abs(cand.band_value - state.band_value)
                    ratio = abs(cand.a.values[0]) ** 2 / cand.eps_theta if cand.eps_theta > 0 else mpf(0)
                    dominance_ok = ratio < 1 - (cand.eps_theta ** p_lower) / 2
                    if decrease >= scale * beta * et and band_move <= budget and dominance_ok:
                        step = MCStep(
                            r=r, beta=beta,
                            predicted=(scale * d_band, scale * d_et, scale * d_a0.real),
                            actual=(
                                cand.band_value - state.band_value,
                                cand.eps_theta - state.eps_theta,
                                cand.a.values[0].real - state.a.values[0].real,
                            ),
                            scale=scale,
                            path="main" if require_independence else "fallback",
                            independence=independence,
                            band_budget=budget,
                            restriction_residual=rres,
                        )
                        return step, cand
                except SolveFailure:
                    pass
            scale /= 2
        raise LineSearchFail(f"no scale in [2^-{max_halvings}, 1] achieved the decrease")


def _restate(state: ExtremalState, new_y: HVector, ctx: PrecisionCtx) -> ExtremalState:
    """Re-solve at a moved y, carrying the calibration bookkeeping along."""
    C = state.C if state.C > 0 else mpf(1)
    return solve_extremal(
        state.operator, new_y, state.x0, ctx,
        y_prime=new_y.scale(1 / mp.sqrt(C)), C=C,
    )


def _restriction_correction(
    cand: ExtremalState,
    prev: ExtremalState,
    restrictions: RestrictionSet,
    ctx: PrecisionCtx,
    tol=mpf("1e-10"),
    max_rounds: int = 6,
):
    """Newton rounds pushing the actual <ch z, w> residuals below tolerance.

    The step constraints hold to first order only; when restrictions are
    installed the residual is re-linearized at the candidate and a minimal
    correction applied until |<ch z, w>| <= tol * ||ch z|| * ||w||.
    """
    if not restrictions.w_list:
        return cand, None

    def worst(c):
        dz = c.z.sub(prev.z)
        dn = dz.norm()
        if dn == 0:
            return mpf(0)
        return max(abs(dz.inner(w)) / (dn * w.norm()) for w in restrictions.w_list)

    res = worst(cand)
    rounds = 0
    while res > tol and rounds < max_rounds:
        calc = StepCalculus(cand)
        fac = GramFactor(cand.basis)
        rows, tgts = [], []
        dz = cand.z.sub(prev.z)
        for w in restrictions.w_list:
            pw = fac.resolvent(w)
            pair = calc.pair_for_vector(id(w), pw)
            val = dz.inner(w)
            rows.append(calc.re_row(pair))
            tgts.append(-val.real)
            rows.append(calc.im_row(pair))
            tgts.append(-val.imag)
        x = _min_norm_solve(rows, tgts, ctx.sqrt_eps)
        dr = _coeffs_from_real(x, calc.J)
        dy = zero_vector(cand.y.dim)
        for rj, v in zip(dr.values, cand.basis.vectors):
            dy = dy.axpy(rj, v)
        cand = _restate(cand, cand.y.add(dy), ctx)
        res = worst(cand)
        rounds += 1
    return cand, res


# ---------------------------------------------------------------------------
# fallback solve for near-collinear direction triples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FallbackReport:
    A: mpc
    B: mpc
    residual: mpf
    rel_residual: mpf
    strict_threshold: mpf
    within_strict: bool
    B_window: tuple
    B_in_window: bool
    A_term_norm: mpf


def fallback_ab_solve(state: ExtremalState, ctx: PrecisionCtx) -> FallbackReport:
    """Least-squares fit A * Gz + B * Gz2 ~= resolvent(y).

    A small relative residual confirms the near-collinearity that made the
    main step path degenerate; a residual above eps_theta raises
    NotDegenerate since the independent triple should have admitted a direct
    step.  The B coefficient is checked against the magnitude window
    (eps_theta^{-1/2} / 100, 10 eps_theta^{-1/2}).
    """
    with ctx.workprec():
        gz = state.x0.sub(state.z)
        gz2 = state.z.sub(state.z2)
        target = state.zy
        g11 = gz.inner(gz)
        g12 = gz2.inner(gz)
        g22 = gz2.inner(gz2)
        r1 = target.inner(gz)
        r2 = target.inner(gz2)
        det = g11 * g22 - g12 * mp.conj(g12)
        if det == 0:
            A, B = mpc(0), mpc(0)
        else:
            A = (r1 * g22 - r2 * g12) / det
            B = (g11 * r2 - mp.conj(g12) * r1) / det
        resid_vec = target.sub(gz.scale(A)).sub(gz2.scale(B))
        resid = resid_vec.norm()
        tnorm = target.norm()
        rel = resid / tnorm if tnorm > 0 else mpf(0)
        et = state.eps_theta
        strict = et ** ctx.exponent("p_fallback")
        if rel > et:
            raise NotDegenerate(rel, et)
        scale = et ** mpf("-0.5")
        window = (scale / 100, 10 * scale)
        a_term = gram_apply(state.basis, state.x0.sub(state.z)).scale(A).norm()
        return FallbackReport(
            A=A, B=B, residual=resid, rel_residual=rel,
            strict_threshold=strict, within_strict=rel <= strict,
            B_window=window, B_in_window=window[0] < abs(B) < window[1],
            A_term_norm=a_term,
        )


# ---------------------------------------------------------------------------
# dominance renormalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DominanceReport:
    d: mpc
    gamma_estimate: mpf
    h_curve: tuple          # ((|d|, h(|d|)), ...)
    dominant: bool
    bound_value: mpf


def h_cancellation_curve(state: ExtremalState, grid, ctx: PrecisionCtx):
    """h(t) = min ||t y' - sum_{j>=1} c_j T^j y'|| over |c_j| <= 1, by
    projected gradient in double precision on each grid point."""
    with ctx.workprec():
        yb = np.array([complex(c) for c in state.y_prime.coords])
        cols = []
        cur = state.y_prime
        for _ in range(state.basis.degree):
            cur = apply(state.operator, cur)
            cols.append(np.array([complex(c) for c in cur.coords]))
    if not cols:
        return tuple((float(t), float(t) * float(np.linalg.norm(yb))) for t in grid)
    B = np.stack(cols, axis=1)
    BtB = B.conj().T @ B
    lip = 2 * max(float(np.linalg.norm(BtB, 2)), 1e-300)
    out = []
    for t in grid:
        tf = float(t)
        target = tf * yb
        c = np.zeros(B.shape[1], dtype=complex)
        for _ in range(5000):
            grad = 2 * (B.conj().T @ (B @ c - target))
            c_next = c - grad / lip
            mags = np.abs(c_next)
            over = mags > 1
            if np.any(over):
                c_next[over] = c_next[over] / mags[over]
            if float(np.linalg.norm(c_next - c)) <= 1e-14 * max(1.0, float(np.linalg.norm(c))):
                c = c_next
                break
            c = c_next
        out.append((tf, float(np.linalg.norm(target - B @ c))))
    return tuple(out)


def dominance_renormalize(
    state: ExtremalState,
    ctx: PrecisionCtx,
    eps_theta_max=1e-2,
    h_grid=None,
) -> Tuple[ExtremalState, DominanceReport]:
    """Restart the solve from y1' = ell(T) y at the same distance, which
    concentrates the new solution on its constant coefficient, and estimate
    the deficiency curve h alongside.
    """
    with ctx.workprec():
        if state.eps_theta > mpf(eps_theta_max):
            raise ValueError(
                f"eps_theta {state.eps_theta} above renormalization threshold {eps_theta_max}"
            )
        y1p = state.moved_point
        if y1p.is_zero():
            raise SolveFailure("moved point vanished; nothing to renormalize")
        new_state = calibrate_scale(state.operator, y1p, state.x0, state.eps, ctx)
        a_unit = new_state.coeffs_unit_scale()
        d = 1 - a_unit.values[0]
        a = new_state.a.values
        head = abs(a[0]) ** 2
        tail = mp.fsum(abs(v) ** 2 for v in a[1:])
        dominant = head >= 100 * tail
        if h_grid is None:
            h_grid = [mpf(i) / 30 for i in range(16)]
        curve = h_cancellation_curve(new_state, h_grid, ctx)
        et = state.eps_theta
        if et > 0:
            logk = mp.log(1 / et) / mp.log(ctx.kval)
            bound = 2 * mp.sqrt(max(logk, mpf(0)) * et)
        else:
            bound = mpf(0)
        gamma = _invert_h(curve, bound)
        report = DominanceReport(
            d=d, gamma_estimate=gamma, h_curve=curve,
            dominant=dominant, bound_value=bound,
        )
        return new_state, report


def _invert_h(curve, bound):
    """Smallest grid |d| with h(|d|) >= bound, linearly interpolated;
    clamps to the last grid point when the bound is out of range."""
    bound_f = float(bound)
    prev_t, prev_h = curve[0]
    for t, hval in curve[1:]:
        if hval >= bound_f:
            if hval == prev_h:
                return mpf(t)
            frac = (bound_f - prev_h) / (hval - prev_h)
            return mpf(prev_t + frac * (t - prev_t))
        prev_t, prev_h = t, hval
    return mpf(curve[-1][0])


# ---------------------------------------------------------------------------
# case dichotomy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseOne:
    witness: int
    pairing: mpf
    threshold: mpf
    tail_lower_bound_ok: bool
    tail_mass: mpf


@dataclass(frozen=True)
class CaseTwo:
    state: ExtremalState
    delta: mpf
    contraction: mpf
    drift: mpf
    drift_bound: mpf


def case_dichotomy(state: ExtremalState, ctx: PrecisionCtx):
    """Either a Krylov power pairs strongly with the residual (CaseOne, with
    the witness index), or a small dilation re-solve contracts eps_theta by
    a fixed factor (CaseTwo, carrying the new state)."""
    with ctx.workprec():
        et = state.eps_theta
        threshold = et ** ctx.exponent("p_caseI")
        sqrtC = mp.sqrt(state.C) if state.C > 0 else mpf(1)
        best_j, best = None, mpf(0)
        for j in range(1, state.basis.degree + 1):
            val = abs(state.a.values[j]) / sqrtC
            if val > best:
                best, best_j = val, j
        if best_j is not None and best >= threshold:
            tail = mp.fsum(abs(v) ** 2 for v in state.a.values[1:])
            return CaseOne(
                witness=best_j, pairing=best, threshold=threshold,
                tail_lower_bound_ok=tail >= et ** ctx.exponent("p_lower"),
                tail_mass=tail,
            )
        delta = et / 10
        yp = state.y_prime
        target = state.x0.sub(yp.scale(1 + delta)).norm()
        new_state = calibrate_scale(state.operator, yp, state.x0, target, ctx)
        drift = new_state.moved_point.sub(yp.scale(1 + delta)).norm()
        return CaseTwo(
            state=new_state, delta=delta,
            contraction=new_state.eps_theta / et if et > 0 else mpf(0),
            drift=drift, drift_bound=et ** 2,
        )


# ---------------------------------------------------------------------------
# startup scan
# ---------------------------------------------------------------------------

def startup_scan(
    T: OperatorSpec,
    y0_prime: HVector,
    x0: HVector,
    eps_theta_0,
    ctx: PrecisionCtx,
    band_coeff=1e-5,
    grid_points: int = 8,
):
    """Scan eps downward from 0.5 across a band of width band_coeff * et0,
    returning the first point whose solved eps_theta drops below half the
    band width.  Raises ScanExhausted with the coefficient-norm growth
    profile when no point qualifies."""
    with ctx.workprec():
        et0 = mpf(eps_theta_0)
        width = mpf(band_coeff) * et0
        threshold = width / 2
        growth = []
        for i in range(grid_points):
            eps = mpf("0.5") - width * i / grid_points
            try:
                st = calibrate_scale(T, y0_prime, x0, eps, ctx)
            except Unattainable:
                growth.append((eps, mp.inf))
                continue
            if st.eps_theta <= threshold:
                return eps, st
            growth.append((eps, st.unit_scale_norm))
        raise ScanExhausted(growth, threshold)


# ---------------------------------------------------------------------------
# full iteration loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MCConfig:
    """Run configuration; vectors default to the first two coordinate
    directions and x0 to the standard two-component combination."""

    u0: Optional[HVector] = None
    u1: Optional[HVector] = None
    x0_form: str = "main"            # "main" or "summary"
    eps_start: float = 0.6
    beta_hi: float = 0.05
    beta_lo: float = 0.01
    beta_switch: float = 1e-6
    max_iters: int = 200
    target_factor: float = 10.0
    prep_eps_theta_max: float = 1e-2
    max_case_apps: int = 100
    scan_band_coeff: float = 1e-5
    scan_grid: int = 8
    s_min_coeff: float = 1e-3
    restriction_milestones: tuple = ()
    restriction_exponents: tuple = (2, 3)
    restriction_n0: Optional[int] = None
    seed: int = 0


@dataclass
class MCRecord:
    n: int
    eps_theta: mpf
    eps: mpf
    a0_sq_over_eps_theta: mpf
    band_value: mpf
    path: str
    scale: Optional[mpf]
    beta: Optional[mpf]
    predicted_eps_theta_change: Optional[mpf]
    actual_eps_theta_change: Optional[mpf]
    band_slack: Optional[mpf]
    dominance_slack: Optional[mpf]
    independence: Optional[mpf]
    restriction_count: int
    candidate: HVector


@dataclass
class MCTrace:
    records: List[MCRecord]
    terminal_status: str
    final_state: Optional[ExtremalState]
    eps_theta_start: Optional[mpf]
    scan_outcome: str
    prep_outcome: str
    restrictions: RestrictionSet
    config: MCConfig


def choose_u1(T: OperatorSpec, u0: HVector, ctx: PrecisionCtx):
    """Unit vector orthogonal to u0 with the smallest adjoint image norm
    among the orthonormalized coordinate directions; the norm is reported,
    not guaranteed below any threshold."""
    with ctx.workprec():
        best, best_norm = None, None
        for i in range(T.dim):
            cand = basis_vector(T.dim, i)
            cand = cand.axpy(-cand.inner(u0), u0)
            n = cand.norm()
            if n < mpf("0.5"):
                continue
            cand = cand.scale(1 / n)
            an = apply(T, cand, adjoint=True).norm()
            if best_norm is None or an < best_norm:
                best, best_norm = cand, an
        if best is None:
            raise ZeroVector("no coordinate direction is independent of u0")
        return best, best_norm


def _record(n, state: ExtremalState, path, restrictions, step: Optional[MCStep] = None) -> MCRecord:
    a0sq = abs(state.a.values[0]) ** 2
    et = state.eps_theta
    ratio = a0sq / et if et > 0 else mpf(0)
    p_lower = state.ctx.exponent("p_lower")
    return MCRecord(
        n=n, eps_theta=et, eps=state.eps,
        a0_sq_over_eps_theta=ratio, band_value=state.band_value,
        path=path,
        scale=step.scale if step else None,
        beta=step.beta if step else None,
        predicted_eps_theta_change=step.predicted[1] if step else None,
        actual_eps_theta_change=step.actual[1] if step else None,
        band_slack=(step.band_budget - abs(step.actual[0])) if step and step.band_budget is not None else None,
        dominance_slack=(1 - (et ** p_lower) / 2 - ratio) if et > 0 else None,
        independence=step.independence if step else None,
        restriction_count=len(restrictions),
        candidate=state.moved_point,
    )


def run_mc(T: OperatorSpec, config: MCConfig, ctx: PrecisionCtx) -> MCTrace:
    """Startup scan, dominance preparation when eps_theta is small enough,
    then the constrained step loop with restriction installations, ending at
    the target eps_theta decrease factor or the iteration cap."""
    with ctx.workprec():
        u0 = config.u0 if config.u0 is not None else basis_vector(T.dim, 0)
        if config.u1 is not None:
            u1 = config.u1
        else:
            u1, _ = choose_u1(T, u0, ctx)
        s3 = mp.sqrt(3) / 2
        if config.x0_form == "summary":
            x0 = u0.scale(mpf(1) / 2).add(u1.scale(s3))
        else:
            x0 = u0.scale(s3).add(u1.scale(mpf(1) / 2))
        x0 = x0.scale(1 / x0.norm())
        y0p = u0.scale(s3)

        records: List[MCRecord] = []
        restrictions = RestrictionSet()

        # startup scan, recorded for the run but not required to succeed
        scan_outcome = "skipped"
        scan_state = None
        try:
            probe = calibrate_scale(T, y0p, x0, mpf("0.5"), ctx)
            try:
                eps_star, scan_state = startup_scan(
                    T, y0p, x0, probe.eps_theta, ctx,
                    band_coeff=config.scan_band_coeff, grid_points=config.scan_grid,
                )
                scan_outcome = f"hit at eps={mp.nstr(eps_star, 12)}"
            except ScanExhausted as exc:
                scan_outcome = f"exhausted below threshold {mp.nstr(exc.threshold, 6)}"
        except Unattainable:
            scan_outcome = "start distance unattainable"

        try:
            state = calibrate_scale(T, y0p, x0, mpf(config.eps_start), ctx)
        except Unattainable:
            if scan_state is None:
                raise
            state = scan_state

        # dominance preparation and case loop, valid only at small eps_theta
        prep_outcome = "skipped: eps_theta above threshold"
        if state.eps_theta <= mpf(config.prep_eps_theta_max):
            state, _rep = dominance_renormalize(
                state, ctx, eps_theta_max=config.prep_eps_theta_max
            )
            records.append(_record(len(records), state, "renormalize", restrictions))
            apps = 0
            while apps < config.max_case_apps:
                outcome = case_dichotomy(state, ctx)
                if isinstance(outcome, CaseOne):
                    prep_outcome = f"case-one witness j={outcome.witness} after {apps} contractions"
                    break
                state = outcome.state
                apps += 1
                records.append(_record(len(records), state, "case-two", restrictions))
            else:
                prep_outcome = f"case-two cap reached after {apps} contractions"

        et_start = state.eps_theta
        records.append(_record(len(records), state, "start", restrictions))
        target = et_start / mpf(config.target_factor)
        lo, hi = mpf(ctx.band[0]), mpf(ctx.band[1])
        milestones = sorted((mpf(m) for m in config.restriction_milestones), reverse=True)
        next_ms = 0
        status = "max-iters"

        for n in range(1, config.max_iters + 1):
            if state.eps_theta <= target:
                status = "target-reached"
                break
            if not (lo < state.band_value < hi):
                status = "band-exit"
                break
            while next_ms < len(milestones) and state.eps_theta < milestones[next_ms]:
                n0 = config.restriction_n0 or state.basis.degree
                d1, j1, d2, j2 = autocorrelation_witnesses(state, n0, state.basis.degree, ctx)
                exps = config.restriction_exponents
                p = exps[min(next_ms, len(exps) - 1)]
                w = build_restriction(state, d2, j1, j2, p, ctx)
                restrictions = restrictions.install(w, d1, d2, j1, j2, p)
                next_ms += 1
            beta = config.beta_hi if state.eps_theta >= mpf(config.beta_switch) else config.beta_lo
            try:
                step, state = select_step(
                    state, restrictions, beta, ctx, s_min_coeff=config.s_min_coeff,
                )
            except Degenerate:
                try:
                    fallback_ab_solve(state, ctx)
                except NotDegenerate:
                    status = "degenerate-unresolved"
                    break
                try:
                    step, state = select_step(
                        state, restrictions, beta, ctx,
                        s_min_coeff=config.s_min_coeff, require_independence=False,
                    )
                except (Degenerate, LineSearchFail):
                    status = "degenerate-unresolved"
                    break
            except LineSearchFail:
                status = "line-search-fail"
                break
            records.append(_record(len(records), state, step.path, restrictions, step))
        else:
            if state.eps_theta <= target:
                status = "target-reached"

        return MCTrace(
            records=records, terminal_status=status, final_state=state,
            eps_theta_start=et_start, scan_outcome=scan_outcome,
            prep_outcome=prep_outcome, restrictions=restrictions, config=config,
        )
