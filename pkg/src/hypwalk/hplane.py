"""Geometry of the upper half-plane and its orientation-preserving isometries.

Isometries are stored as a unit-Frobenius-norm 2x2 matrix together with a
natural-log scale, so products of many thousands of matrices never overflow.
The represented SL(2, R) matrix is ``exp(logscale) * m`` up to sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

__all__ = [
    "DELTA_H2",
    "HPoint",
    "I",
    "ScaledIsometry",
    "BoundaryImageError",
    "CancellationError",
    "ClassificationError",
    "identity",
    "from_matrix",
    "diagonal",
    "rotation",
    "translation_along",
    "compose",
    "compose_all",
    "inverse",
    "power",
    "apply",
    "distance",
    "displacement",
    "gromov_product",
    "classify",
    "trace",
    "translation_length",
    "fixed_points",
    "attracting_fixed_point",
    "independent",
    "isclose",
    "boundary_angle",
]

#: Safe (non-sharp) four-point hyperbolicity constant used for the plane.
DELTA_H2 = math.log(3.0)

#: Relative band around |trace| = 2 inside which classification refuses to guess.
CLASSIFY_BAND = 1e-8
#: |trace| this close to 2 (relative) with a non-identity matrix counts as parabolic.
EXACT_PARABOLIC = 1e-13

_LOG2 = math.log(2.0)


class BoundaryImageError(ValueError):
    """The image of a point lies on the boundary at infinity (numerically)."""


class CancellationError(ArithmeticError):
    """A matrix product collapsed to (numerical) zero."""


class ClassificationError(ValueError):
    """|trace| is too close to 2 to classify reliably."""

    def __init__(self, trace_value: float):
        super().__init__(f"near-parabolic: classification unreliable (trace={trace_value!r})")
        self.trace = trace_value


@dataclass(frozen=True, slots=True)
class HPoint:
    re: float
    im: float

    def __post_init__(self):
        if not (math.isfinite(self.re) and math.isfinite(self.im)):
            raise ValueError(f"non-finite point ({self.re}, {self.im})")
        if not self.im > 0:
            raise ValueError(f"point not in the upper half-plane: im={self.im}")

    @classmethod
    def from_complex(cls, z: complex) -> "HPoint":
        return cls(float(z.real), float(z.imag))

    def __complex__(self) -> complex:
        return complex(self.re, self.im)


I = HPoint(0.0, 1.0)


@dataclass(frozen=True, slots=True)
class ScaledIsometry:
    """``exp(logscale) * [[a, b], [c, d]]`` with ``a^2 + b^2 + c^2 + d^2 == 1``."""

    m: tuple[float, float, float, float]
    logscale: float

    @property
    def matrix(self) -> tuple[float, float, float, float]:
        """The represented SL(2, R) matrix (may overflow for huge logscale)."""
        k = math.exp(self.logscale)
        a, b, c, d = self.m
        return (k * a, k * b, k * c, k * d)

    def __matmul__(self, other: "ScaledIsometry") -> "ScaledIsometry":
        return compose(self, other)


def _normalized(a: float, b: float, c: float, d: float, logscale: float) -> ScaledIsometry:
    nrm = math.sqrt(a * a + b * b + c * c + d * d)
    if not (nrm > 1e-300) or not math.isfinite(nrm):
        raise CancellationError(f"product matrix numerically zero (norm={nrm!r})")
    return ScaledIsometry((a / nrm, b / nrm, c / nrm, d / nrm), logscale + math.log(nrm))


def from_matrix(mat) -> ScaledIsometry:
    """Build from any 2x2 real matrix with positive determinant (projective class)."""
    (a, b), (c, d) = mat
    a, b, c, d = float(a), float(b), float(c), float(d)
    nrm = math.sqrt(a * a + b * b + c * c + d * d)
    if nrm == 0.0:
        raise ValueError("zero matrix")
    a, b, c, d = a / nrm, b / nrm, c / nrm, d / nrm
    det = a * d - b * c
    if not det > 0:
        raise ValueError(f"determinant must be positive, got {det * nrm * nrm!r}")
    # represented = m / sqrt(det) and ||m||_F = 1
    return ScaledIsometry((a, b, c, d), -0.5 * math.log(det))


def identity() -> ScaledIsometry:
    r = 1.0 / math.sqrt(2.0)
    return ScaledIsometry((r, 0.0, 0.0, r), 0.5 * _LOG2)


def diagonal(lam: float) -> ScaledIsometry:
    """diag(lam, 1/lam), lam > 0: translation by 2*log(lam) along the imaginary axis."""
    return translation_along(2.0 * math.log(lam))


def translation_along(length: float) -> ScaledIsometry:
    """Translation of the given signed length along the imaginary axis (towards infinity)."""
    h = 0.5 * length
    # diag(e^h, e^-h) normalised without overflow
    if abs(h) < 300:
        return from_matrix(((math.exp(h), 0.0), (0.0, math.exp(-h))))
    big = h > 0
    ratio = math.exp(-2.0 * abs(h))
    nrm = math.sqrt(1.0 + ratio * ratio)
    m = (1.0 / nrm, 0.0, 0.0, ratio / nrm) if big else (ratio / nrm, 0.0, 0.0, 1.0 / nrm)
    return ScaledIsometry(m, abs(h) + math.log(nrm))


def rotation(angle: float, center: HPoint = I) -> ScaledIsometry:
    """Rotation by ``angle`` (radians, counter-clockwise) about ``center``."""
    c, s = math.cos(angle / 2.0), math.sin(angle / 2.0)
    rot = from_matrix(((c, s), (-s, c)))
    if center == I:
        return rot
    h = _moving_i_to(center)
    return compose(compose(h, rot), inverse(h))


def _moving_i_to(z: HPoint) -> ScaledIsometry:
    r = math.sqrt(z.im)
    return from_matrix(((r, z.re / r), (0.0, 1.0 / r)))


def compose(g: ScaledIsometry, h: ScaledIsometry) -> ScaledIsometry:
    a1, b1, c1, d1 = g.m
    a2, b2, c2, d2 = h.m
    return _normalized(
        a1 * a2 + b1 * c2,
        a1 * b2 + b1 * d2,
        c1 * a2 + d1 * c2,
        c1 * b2 + d1 * d2,
        g.logscale + h.logscale,
    )


def compose_all(items: Iterable[ScaledIsometry]) -> ScaledIsometry:
    out = identity()
    for g in items:
        out = compose(out, g)
    return out


def inverse(g: ScaledIsometry) -> ScaledIsometry:
    a, b, c, d = g.m
    # adjugate has the same Frobenius norm and determinant
    return ScaledIsometry((d, -b, -c, a), g.logscale)


def power(g: ScaledIsometry, n: int) -> ScaledIsometry:
    if n < 0:
        return power(inverse(g), -n)
    out, base = identity(), g
    while n:
        if n & 1:
            out = compose(out, base)
        base = compose(base, base)
        n >>= 1
    return out


def isclose(g: ScaledIsometry, h: ScaledIsometry, tol: float = 1e-10) -> bool:
    """Projective equality: compare up to the sign of the matrix."""
    if abs(g.logscale - h.logscale) > tol:
        return False
    plus = max(abs(x - y) for x, y in zip(g.m, h.m))
    minus = max(abs(x + y) for x, y in zip(g.m, h.m))
    return min(plus, minus) <= tol


def apply(g: ScaledIsometry, z: HPoint) -> HPoint:
    a, b, c, d = g.m
    zc = complex(z)
    den = c * zc + d
    den2 = den.real * den.real + den.imag * den.imag
    if den2 == 0.0:
        raise BoundaryImageError("boundary image")
    num = (a * zc + b) * den.conjugate()
    # Im part from the determinant exp(-2s) rather than from m, which is near rank one
    im = math.exp(-2.0 * g.logscale) * z.im / den2
    re = num.real / den2
    if not (im > 0) or not math.isfinite(im) or not math.isfinite(re):
        raise BoundaryImageError("boundary image")
    return HPoint(re, im)


def distance(z: HPoint, w: HPoint) -> float:
    dx, dy = z.re - w.re, z.im - w.im
    return 2.0 * math.asinh(math.hypot(dx, dy) / (2.0 * math.sqrt(z.im * w.im)))


def _displacement_at_i(g: ScaledIsometry) -> float:
    s = g.logscale
    if s < 10.0:
        return distance(I, apply(g, I))
    # cosh d = exp(2s) / 2 since ||m||_F = 1
    return 2.0 * s - _LOG2 + math.log1p(math.sqrt(max(0.0, 1.0 - 4.0 * math.exp(-4.0 * s))))


def displacement(g: ScaledIsometry, z: HPoint = I) -> float:
    """d(z, g z), overflow-free."""
    if z == I:
        return _displacement_at_i(g)
    h = _moving_i_to(z)
    return _displacement_at_i(compose(compose(inverse(h), g), h))


def gromov_product(x: HPoint, y: HPoint, o: HPoint) -> float:
    return 0.5 * (distance(o, x) + distance(o, y) - distance(x, y))


def trace(g: ScaledIsometry) -> float:
    a, _, _, d = g.m
    return math.exp(g.logscale) * (a + d)


def _is_identity(g: ScaledIsometry, tol: float = 1e-12) -> bool:
    return isclose(g, identity(), tol)


def classify(g: ScaledIsometry) -> str:
    """Return ``"elliptic"``, ``"parabolic"`` or ``"loxodromic"``."""
    if _is_identity(g):
        return "elliptic"
    a, _, _, d = g.m
    tm = abs(a + d)
    if tm == 0.0:
        return "elliptic"
    log_t = g.logscale + math.log(tm)
    if log_t > 2.0:
        return "loxodromic"
    t = math.exp(log_t)
    rel = (t - 2.0) / 2.0
    if abs(rel) <= EXACT_PARABOLIC:
        return "parabolic"
    if abs(rel) <= CLASSIFY_BAND:
        raise ClassificationError(math.copysign(t, a + d))
    return "loxodromic" if rel > 0 else "elliptic"


def translation_length(g: ScaledIsometry) -> float:
    a, _, _, d = g.m
    tm = abs(a + d)
    if tm == 0.0:
        return 0.0
    log_half = g.logscale + math.log(tm) - _LOG2
    if log_half <= 0.0:
        return 0.0
    if log_half > 20.0:
        return 2.0 * (log_half + math.log1p(math.sqrt(max(0.0, 1.0 - math.exp(-2.0 * log_half)))))
    return 2.0 * math.acosh(math.exp(log_half))


def fixed_points(g: ScaledIsometry) -> tuple[float, ...]:
    """Boundary fixed points as extended reals (``math.inf`` for infinity), sorted."""
    if _is_identity(g):
        raise ValueError("identity fixes every boundary point")
    kind = classify(g)
    if kind == "elliptic":
        return ()
    a, b, c, d = g.m
    det = math.exp(-2.0 * g.logscale)
    disc = 0.0 if kind == "parabolic" else max(0.0, (a + d) ** 2 - 4.0 * det)
    # c x^2 + (d - a) x - b = 0
    B = d - a
    sq = math.sqrt(disc)
    q = -0.5 * (B + math.copysign(sq, B) if B != 0 else sq)
    roots = []
    if kind == "parabolic":
        roots.append(math.inf if abs(c) < 1e-14 else (a - d) / (2.0 * c))
    else:
        roots.append(math.inf if abs(c) < 1e-14 * max(1.0, abs(q)) else q / c)
        roots.append(math.inf if q == 0.0 else -b / q)
    return tuple(sorted(roots))


def attracting_fixed_point(g: ScaledIsometry) -> float:
    """Attracting fixed point of a loxodromic isometry."""
    if classify(g) != "loxodromic":
        raise ValueError("attracting fixed point requires a loxodromic isometry")
    a, _, c, d = g.m
    for x in fixed_points(g):
        if math.isinf(x):
            if abs(a) > abs(d):
                return x
        elif abs(c * x + d) * math.exp(g.logscale) > 1.0:
            return x
    raise ArithmeticError("no attracting fixed point found")


def boundary_angle(x: float) -> float:
    """Position of an extended-real boundary point on the unit circle (Cayley chart)."""
    return math.pi if math.isinf(x) else 2.0 * math.atan(x)


def _chordal(x: float, y: float) -> float:
    return 2.0 * abs(math.sin(0.5 * (boundary_angle(x) - boundary_angle(y))))


def independent(g: ScaledIsometry, h: ScaledIsometry, tol: float = 1e-9) -> bool:
    """True iff the fixed-point pairs of two loxodromics are disjoint."""
    if classify(g) != "loxodromic" or classify(h) != "loxodromic":
        raise ValueError("independence is defined for loxodromic isometries only")
    fg, fh = fixed_points(g), fixed_points(h)
    return min(_chordal(x, y) for x in fg for y in fh) > tol
