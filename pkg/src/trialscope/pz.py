"""Transform reported p-values into censored z-scores.

Reported p-values become absolute z-statistics of a two-sided normal test
(one-sided variant available).  Very small p-values are almost never
reported precisely, so the right tail of the z-distribution is censored:
"p<0.001" and "p<0.0001" map to dedicated censor kinds, anything censored
at some other level is carried as an interval with an imputable value.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erfc

from .registry import ReportedP

__all__ = [
    "Sidedness",
    "ZKind",
    "ZScore",
    "Z_D1",
    "Z_D2",
    "Z_SIG",
    "inv_norm_cdf",
    "norm_cdf",
    "norm_sf",
    "transform",
    "transform_many",
    "impute_other_censors",
]

# Censor bounds for "p<0.001" / "p<0.0001" under the two-sided transform,
# fixed to 4 decimals.
Z_D1 = 3.2905
Z_D2 = 3.8906

# Exact p-values below this are indistinguishable from a reported zero.
_P_UNDERFLOW = 1e-15


class Sidedness(enum.Enum):
    TWO_SIDED = "two-sided"
    ONE_SIDED = "one-sided"


class ZKind(enum.Enum):
    PRECISE = "precise"
    ABOVE_D1 = "above_d1"  # z > 3.29  (p reported as < 0.001)
    ABOVE_D2 = "above_d2"  # z > 3.89  (p reported as < 0.0001 or exactly 0)
    OTHER_CENSOR = "other_censor"


@dataclass(frozen=True)
class ZScore:
    """A z-statistic that is either precise or known only as an inequality.

    For OTHER_CENSOR, ``bound`` is the censor level on the z scale,
    ``direction`` is "above" or "below", and ``imputed_z`` is filled in by
    :func:`impute_other_censors` (None until then).
    """

    kind: ZKind
    z: float | None = None
    direction: str | None = None
    bound: float | None = None
    imputed_z: float | None = None

    def __post_init__(self) -> None:
        if self.kind is ZKind.PRECISE:
            # two-sided transforms yield z >= 0; one-sided values go
            # negative for p above one half, so only finiteness is enforced
            if self.z is None or not math.isfinite(self.z):
                raise ValueError(f"precise z must be finite, got {self.z}")
        elif self.kind is ZKind.OTHER_CENSOR:
            if self.direction not in ("above", "below"):
                raise ValueError(f"bad censor direction: {self.direction!r}")
            if self.bound is None:
                raise ValueError("other_censor requires a bound")
            if self.imputed_z is not None:
                lo_ok = self.direction == "above" and self.imputed_z > self.bound
                hi_ok = self.direction == "below" and self.imputed_z < self.bound
                if not (lo_ok or hi_ok):
                    raise ValueError(
                        f"imputed z {self.imputed_z} not strictly "
                        f"{self.direction} bound {self.bound}"
                    )

    @classmethod
    def precise(cls, z: float) -> "ZScore":
        return cls(ZKind.PRECISE, z=float(z))

    @classmethod
    def above_d1(cls, bound: float = Z_D1) -> "ZScore":
        return cls(ZKind.ABOVE_D1, direction="above", bound=bound)

    @classmethod
    def above_d2(cls, bound: float = Z_D2) -> "ZScore":
        return cls(ZKind.ABOVE_D2, direction="above", bound=bound)

    @classmethod
    def other_censor(cls, direction: str, bound: float) -> "ZScore":
        return cls(ZKind.OTHER_CENSOR, direction=direction, bound=float(bound))

    @property
    def is_precise(self) -> bool:
        return self.kind is ZKind.PRECISE

    def effective_z(self) -> float:
        """Value used in share computations: precise z, the censor bound for
        D1/D2 (all mass sits above it), or the imputed value."""
        if self.kind is ZKind.PRECISE:
            return self.z  # type: ignore[return-value]
        if self.kind in (ZKind.ABOVE_D1, ZKind.ABOVE_D2):
            return self.bound  # type: ignore[return-value]
        if self.imputed_z is None:
            raise ValueError("other_censor score has no imputed value yet")
        return self.imputed_z


# Acklam's rational approximation to the standard normal quantile,
# refined below with one Halley step against an erfc-based CDF.
_ACKLAM_A = (
    -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
    1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00,
)
_ACKLAM_B = (
    -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
    6.680131188771972e01, -1.328068155288572e01,
)
_ACKLAM_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
    -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00,
)
_ACKLAM_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
    3.754408661907416e00,
)
_ACKLAM_SPLIT = 0.02425

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_cdf(z):
    """Standard normal CDF via the complementary error function."""
    z = np.asarray(z, dtype=float)
    out = 0.5 * erfc(-z / _SQRT2)
    return out if out.ndim else float(out)


def norm_sf(z):
    """Upper-tail probability 1 - CDF(z), accurate in the far tail where
    the literal subtraction would cancel."""
    z = np.asarray(z, dtype=float)
    out = 0.5 * erfc(z / _SQRT2)
    return out if out.ndim else float(out)


_norm_sf = norm_sf


def _acklam(q: np.ndarray) -> np.ndarray:
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    x = np.empty_like(q)

    lo = q < _ACKLAM_SPLIT
    hi = q > 1.0 - _ACKLAM_SPLIT
    mid = ~(lo | hi)

    if np.any(lo):
        r = np.sqrt(-2.0 * np.log(q[lo]))
        x[lo] = (((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) / (
            (((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1.0
        )
    if np.any(hi):
        r = np.sqrt(-2.0 * np.log(1.0 - q[hi]))
        x[hi] = -(((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) / (
            (((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1.0
        )
    if np.any(mid):
        u = q[mid] - 0.5
        r = u * u
        x[mid] = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * u / (
            ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        )
    return x


def inv_norm_cdf(q):
    """Inverse standard normal CDF, absolute error below 1e-10 on (0, 1).

    Acklam's approximation gives ~1e-9 accuracy; one Halley refinement step
    against the erfc-based CDF brings it to machine-level precision.
    """
    q_arr = np.asarray(q, dtype=float)
    scalar = q_arr.ndim == 0
    q_arr = np.atleast_1d(q_arr)
    if np.any(~np.isfinite(q_arr)) or np.any(q_arr <= 0.0) or np.any(q_arr >= 1.0):
        raise ValueError("quantile argument must lie strictly inside (0, 1)")

    x = _acklam(q_arr)

    # Halley: x <- x - f/f' * (1 - f*f''/(2 f'^2))^-1 with f = Phi(x) - q.
    # Work on the tail side of the split to keep f well conditioned.
    upper = q_arr > 0.5
    err = np.where(upper, _norm_sf(x) - (1.0 - q_arr), norm_cdf(x) - q_arr)
    err = np.where(upper, -err, err)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    u = err / pdf
    x = x - u / (1.0 + 0.5 * x * u)

    return float(x[0]) if scalar else x


def transform(p: ReportedP, side: Sidedness = Sidedness.TWO_SIDED) -> ZScore:
    """Map one reported p-value to its (possibly censored) z-score.

    Exact p-values map through the normal quantile; the censor thresholds
    0.001 and 0.0001 map to the dedicated D1/D2 kinds regardless of
    sidedness; any other inequality becomes an OTHER_CENSOR whose bound is
    expressed on the active z scale.
    """
    halve = side is Sidedness.TWO_SIDED

    def to_z(pv: float) -> float:
        # one-sided arguments can reach 1.0 exactly; step inside the open
        # domain by one representable unit
        q = pv / 2.0 if halve else min(pv, 1.0 - 2.5e-16)
        return float(-inv_norm_cdf(q))

    if p.kind == "exact":
        if p.value <= _P_UNDERFLOW:
            return ZScore.above_d2(bound=to_z(0.0001))
        return ZScore.precise(to_z(p.value))
    if p.kind == "lt":
        if p.value == 0.001:
            return ZScore.above_d1(bound=to_z(0.001))
        if p.value == 0.0001:
            return ZScore.above_d2(bound=to_z(0.0001))
        return ZScore.other_censor("above", to_z(p.value))
    if p.kind == "gt":
        return ZScore.other_censor("below", to_z(p.value))
    raise ValueError(f"unknown reported-p kind: {p.kind!r}")


def transform_many(
    ps: Iterable[ReportedP], side: Sidedness = Sidedness.TWO_SIDED
) -> list[ZScore]:
    return [transform(p, side) for p in ps]


# z-value of p = 0.05 two-sided; shares use ">= Z_SIG" so a p reported as
# exactly 0.05 counts as significant
Z_SIG = float(-inv_norm_cdf(0.025))


def impute_other_censors(scores: Sequence[ZScore]) -> list[ZScore]:
    """Fill every OTHER_CENSOR with the mean of the precise z values on its
    censored side of the bound, computed within this collection.

    Returns a new list; raises if some bound has no precise value on the
    required side.
    """
    precise = np.array([s.z for s in scores if s.kind is ZKind.PRECISE], dtype=float)
    out: list[ZScore] = []
    missing: list[tuple[str, float]] = []
    for s in scores:
        if s.kind is not ZKind.OTHER_CENSOR or s.imputed_z is not None:
            out.append(s)
            continue
        if s.direction == "above":
            pool = precise[precise > s.bound]
        else:
            pool = precise[precise < s.bound]
        if pool.size == 0:
            missing.append((s.direction, s.bound))
            out.append(s)
            continue
        out.append(replace(s, imputed_z=float(pool.mean())))
    if missing:
        desc = ", ".join(f"z {d} {b:g}" for d, b in sorted(set(missing)))
        raise ValueError(f"no precise z-scores available to impute censors: {desc}")
    return out
