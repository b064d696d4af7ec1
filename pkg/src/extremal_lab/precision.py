"""Precision context and deterministic number handling.

All numerics in the lab run under an explicit ``PrecisionCtx``: mantissa
width, the operator norm scale K, the Krylov tail tolerance, the distance
band, and the named exponents that replace the construction's extreme
constants at desk scale.  Every public operation evaluates inside
``ctx.workprec()`` so results are reproducible bit for bit given identical
inputs and seeds.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Mapping

from mpmath import mp, mpf, mpc

from .errors import ZeroVector

DEFAULT_EXPONENTS: Mapping[str, float] = {
    "p_caseI": 4,
    "p_lower": 15,
    "p_fallback": 100,
    "p_restrict": 100,
}


@dataclass(frozen=True)
class PrecisionCtx:
    """Numerical regime for one experiment.

    mantissa_bits: binary precision for all mpmath arithmetic (>= 64).
    K:             norm scale; operators are normalized to op-norm 1/K.
                   Desk default 1e4 (the construction's own constant is far
                   larger than any fixed float format can exercise).
    tail_tol:      Krylov truncation tolerance tau; the basis degree is the
                   smallest J with K**-J <= tau.
    band:          (eps_lo, eps_hi) admissible distance band.
    exponents:     named exponent parameters used by the step logic.
    """

    mantissa_bits: int = 256
    K: float = 1e4
    tail_tol: float = 1e-12
    band: tuple = (0.3, 0.7)
    exponents: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_EXPONENTS))

    def __post_init__(self):
        if self.mantissa_bits < 64:
            raise ValueError("mantissa_bits must be >= 64")
        if not self.K > 1:
            raise ValueError("K must exceed 1")
        if not self.tail_tol > 0:
            raise ValueError("tail_tol must be positive")
        lo, hi = self.band
        if not (0 < lo < hi < 1):
            raise ValueError("band must satisfy 0 < eps_lo < eps_hi < 1")
        merged = dict(DEFAULT_EXPONENTS)
        merged.update(self.exponents)
        object.__setattr__(self, "exponents", merged)

    def workprec(self):
        """Context manager pinning mpmath to this context's precision."""
        return mp.workprec(self.mantissa_bits)

    def with_tail_tol(self, tau) -> "PrecisionCtx":
        return replace(self, tail_tol=tau)

    # -- characteristic tolerances -------------------------------------------------

    @property
    def sqrt_eps(self):
        """2**(-mantissa_bits/2), the default verification tolerance."""
        return mpf(2) ** (-self.mantissa_bits // 2)

    @property
    def quarter_eps(self):
        """2**(-mantissa_bits/4), the rank-decision threshold."""
        return mpf(2) ** (-self.mantissa_bits // 4)

    @property
    def kval(self):
        return mpf(self.K)

    @property
    def tau(self):
        return mpf(self.tail_tol)

    def exponent(self, name: str):
        return mpf(self.exponents[name])

    # -- decimal serialization -----------------------------------------------------

    @property
    def decimal_digits(self) -> int:
        # enough digits that decimal -> binary re-parsing is the identity
        return int(self.mantissa_bits * 0.30103) + 10

    def real_str(self, x) -> str:
        return mp.nstr(mpf(x), self.decimal_digits, strip_zeros=True)

    def complex_str(self, z) -> str:
        z = mpc(z)
        return f"{self.real_str(z.real)};{self.real_str(z.imag)}"

    def parse_real(self, s: str):
        with self.workprec():
            return mpf(s)

    def parse_complex(self, s: str):
        with self.workprec():
            re, im = s.split(";")
            return mpc(mpf(re), mpf(im))


def seeded_rng(seed: int) -> random.Random:
    """Deterministic RNG stream; all randomness in the lab flows from here."""
    return random.Random(seed)


def random_coords(dim: int, rng: random.Random, real: bool = False):
    """Gaussian coordinates built from exact doubles, so they are identical
    at every working precision."""
    out = []
    for _ in range(dim):
        re = rng.gauss(0.0, 1.0)
        im = 0.0 if real else rng.gauss(0.0, 1.0)
        out.append(mpc(mpf(re), mpf(im)))
    return tuple(out)


def norm_of(coords) -> mpf:
    return mp.sqrt(mp.fsum((c.real * c.real + c.imag * c.imag) for c in coords))


def unit_coords(coords):
    n = norm_of(coords)
    if n == 0:
        raise ZeroVector("cannot normalize the zero vector")
    return tuple(c / n for c in coords)
