"""Free-group words, finitely supported measures, representations, rescaling factor.

Words are tuples of non-zero ints: generator ``k`` (1-based) is ``k`` and its
inverse is ``-k``. In text form generators are ``a, b, c, ...`` and inverses
the matching capitals, so ``"abA"`` is a*b*a^-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy import optimize

from . import hplane as hp
from .hplane import HPoint, ScaledIsometry

Word = tuple[int, ...]

IDENTITY: Word = ()
ALPHABET = "abcdefghijklmnopqrstuvwxyz"
DEFAULT_SUPPORT_CAP = 1_000_000


class ConvolutionBlowUp(RuntimeError):
    def __init__(self, cap: int):
        super().__init__(f"convolution blow-up: support exceeds cap of {cap} atoms")
        self.cap = cap


class DominationError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, best: float):
        super().__init__(f"{msg} (best value found: {best!r})")
        self.best = best


# ----------------------------------------------------------------------------
# words


def reduce(letters: Iterable[int], rank: int | None = None) -> Word:
    out: list[int] = []
    for x in letters:
        x = int(x)
        if x == 0 or (rank is not None and abs(x) > rank):
            raise IndexError(f"letter {x} out of range for rank {rank}")
        if out and out[-1] == -x:
            out.pop()
        else:
            out.append(x)
    return tuple(out)


def inverse(w: Word) -> Word:
    return tuple(-x for x in reversed(w))


def _cancel_length(u: Word, v: Word) -> int:
    k, n = 0, min(len(u), len(v))
    while k < n and u[-1 - k] == -v[k]:
        k += 1
    return k


def multiply(u: Word, v: Word) -> Word:
    """Reduced product of two reduced words."""
    k = _cancel_length(u, v)
    return u[: len(u) - k] + v[k:]


def word_power(w: Word, n: int) -> Word:
    if n < 0:
        w, n = inverse(w), -n
    out: Word = ()
    for _ in range(n):
        out = multiply(out, w)
    return out


def word_from_str(s: str) -> Word:
    letters = []
    for ch in s.strip():
        if ch in " .*":
            continue
        k = ALPHABET.find(ch.lower())
        if k < 0:
            raise ValueError(f"invalid letter {ch!r} in word {s!r}")
        letters.append(k + 1 if ch.islower() else -(k + 1))
    return reduce(letters)


def word_to_str(w: Word) -> str:
    return "".join(ALPHABET[x - 1] if x > 0 else ALPHABET[-x - 1].upper() for x in w)


def words_up_to(rank: int, max_len: int) -> list[Word]:
    """All reduced words of length <= max_len, in shortlex order."""
    out: list[Word] = [()]
    layer: list[Word] = [()]
    letters = [x for k in range(1, rank + 1) for x in (k, -k)]
    for _ in range(max_len):
        layer = [w + (x,) for w in layer for x in letters if not (w and w[-1] == -x)]
        out.extend(layer)
    return out


def is_cyclically_reduced(w: Word) -> bool:
    return len(w) < 2 or w[0] != -w[-1]


# ----------------------------------------------------------------------------
# measures


@dataclass(frozen=True)
class FiniteMeasure:
    """Finitely supported probability measure on reduced words."""

    atoms: Mapping[Word, float]
    rank: int

    def __post_init__(self):
        total = 0.0
        for w, p in self.atoms.items():
            if reduce(w, self.rank) != tuple(w):
                raise ValueError(f"atom {word_to_str(w)!r} is not freely reduced")
            if not p > 0:
                raise ValueError(f"non-positive mass {p!r} at {word_to_str(w)!r}")
            total += p
        if not self.atoms:
            raise ValueError("empty measure")
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"total mass {total!r} != 1")

    @classmethod
    def from_weights(cls, weights: Mapping[Word, float], rank: int) -> "FiniteMeasure":
        """Normalise non-negative weights; zero weights are dropped."""
        kept = {tuple(w): float(p) for w, p in weights.items() if p > 0}
        tot = math.fsum(kept.values())
        return cls({w: p / tot for w, p in kept.items()}, rank)

    @property
    def support(self) -> list[Word]:
        return sorted(self.atoms, key=lambda w: (len(w), w))

    def __getitem__(self, w: Word) -> float:
        return self.atoms.get(tuple(w), 0.0)

    def __len__(self) -> int:
        return len(self.atoms)

    def arrays(self) -> tuple[list[Word], np.ndarray]:
        """Support in canonical order and the matching masses."""
        sup = self.support
        return sup, np.array([self.atoms[w] for w in sup])

    def first_moment(self) -> float:
        return math.fsum(len(w) * p for w, p in self.atoms.items())

    def entropy(self) -> float:
        return -math.fsum(p * math.log(p) for p in self.atoms.values())

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        return all(abs(p - self[inverse(w)]) <= tol for w, p in self.atoms.items())


def point_mass(w: Word, rank: int) -> FiniteMeasure:
    return FiniteMeasure({tuple(w): 1.0}, rank)


def uniform(words: Iterable[Word], rank: int) -> FiniteMeasure:
    ws = sorted({tuple(w) for w in words})
    return FiniteMeasure({w: 1.0 / len(ws) for w in ws}, rank)


def uniform_generators(rank: int) -> FiniteMeasure:
    """Simple random walk: uniform on the 2*rank generators and their inverses."""
    return uniform([(x,) for k in range(1, rank + 1) for x in (k, -k)], rank)


def convolve(mu: FiniteMeasure, nu: FiniteMeasure, cap: int = DEFAULT_SUPPORT_CAP) -> FiniteMeasure:
    if mu.rank != nu.rank:
        raise ValueError("rank mismatch")
    out: dict[Word, float] = {}
    nu_items = list(nu.atoms.items())
    for u, p in mu.atoms.items():
        for v, q in nu_items:
            w = multiply(u, v)
            out[w] = out.get(w, 0.0) + p * q
        if len(out) > cap:
            raise ConvolutionBlowUp(cap)
    tot = math.fsum(out.values())
    return FiniteMeasure({w: m / tot for w, m in out.items()}, mu.rank)


def power(mu: FiniteMeasure, n: int, cap: int = DEFAULT_SUPPORT_CAP) -> FiniteMeasure:
    """n-fold convolution by repeated squaring."""
    if n < 1:
        raise ValueError("n must be >= 1")
    result: FiniteMeasure | None = None
    base = mu
    while True:
        if n & 1:
            result = base if result is None else convolve(result, base, cap)
        n >>= 1
        if not n:
            return result
        base = convolve(base, base, cap)


def sample(mu: FiniteMeasure, rng: np.random.Generator) -> Word:
    sup, p = mu.arrays()
    return sup[int(rng.choice(len(sup), p=p))]


def decompose(mu: FiniteMeasure, S: "GeneratorSet", alpha: float, N: int,
              cap: int = DEFAULT_SUPPORT_CAP) -> FiniteMeasure:
    """Return nu with (1 - alpha) nu + alpha mu_S^2 = mu^(2N)."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    if not S.symmetric:
        raise ValueError("S must be symmetric")
    big = power(mu, 2 * N, cap)
    mu_s2 = convolve(uniform(S.elements, mu.rank), uniform(S.elements, mu.rank), cap)
    rest: dict[Word, float] = dict(big.atoms)
    for w, q in mu_s2.atoms.items():
        deficit = alpha * q - big[w]
        if deficit > 1e-15:
            raise DominationError(
                f"mu^{2 * N} does not dominate alpha*mu_S^2 at {word_to_str(w) or 'e'!r}: deficit {deficit:.3e}"
            )
        rest[w] = rest.get(w, 0.0) - alpha * q
    atoms = {w: m / (1.0 - alpha) for w, m in rest.items() if m > 1e-15}
    tot = math.fsum(atoms.values())
    return FiniteMeasure({w: m / tot for w, m in atoms.items()}, mu.rank)


@dataclass(frozen=True)
class GeneratorSet:
    elements: tuple[Word, ...]

    def __init__(self, elements: Iterable[Word]):
        object.__setattr__(self, "elements", tuple(sorted({tuple(w) for w in elements}, key=lambda w: (len(w), w))))

    @classmethod
    def from_strings(cls, words: Iterable[str]) -> "GeneratorSet":
        return cls(word_from_str(s) for s in words)

    @property
    def symmetric(self) -> bool:
        es = set(self.elements)
        return all(inverse(w) in es for w in es)

    @property
    def contains_identity(self) -> bool:
        return () in self.elements

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)


def standard_generating_set(rank: int) -> GeneratorSet:
    """{e, a, A, b, B, ...}: symmetric, contains the identity."""
    return GeneratorSet([()] + [(x,) for k in range(1, rank + 1) for x in (k, -k)])


# ----------------------------------------------------------------------------
# representations


@dataclass(frozen=True)
class Representation:
    rank: int
    images: tuple[ScaledIsometry, ...]
    family: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != self.rank:
            raise ValueError(f"need {self.rank} generator images, got {len(self.images)}")

    def image(self, letter: int) -> ScaledIsometry:
        g = self.images[abs(letter) - 1]
        return g if letter > 0 else hp.inverse(g)

    def conjugate(self, g: ScaledIsometry) -> "Representation":
        """The representation w -> g rho(w) g^-1."""
        gi = hp.inverse(g)
        return Representation(self.rank, tuple(hp.compose(hp.compose(g, x), gi) for x in self.images),
                              "custom", {})


def rep_eval(rho: Representation, w: Word) -> ScaledIsometry:
    """rho(w); the word is reduced first, since cancelling pairs would destroy precision."""
    out = hp.identity()
    for x in reduce(w, rho.rank):
        if abs(x) > rho.rank:
            raise IndexError(f"letter {x} out of range for rank {rho.rank}")
        out = hp.compose(out, rho.image(x))
    return out


def fricke_third_trace(x: float, y: float) -> float:
    """Larger root z of x^2 + y^2 + z^2 = x y z."""
    disc = (x * y) ** 2 - 4.0 * (x * x + y * y)
    if disc < 0:
        raise ValueError(f"fricke discriminant negative for (x, y) = ({x}, {y})")
    return 0.5 * (x * y + math.sqrt(disc))


def make_family(tag: str, params: Mapping[str, float] | None = None, **kw) -> Representation:
    """Build a representation from a named family.

    ``schottky``: t > 0, theta in (0, pi). Generator a translates by t along the
    imaginary axis; b is a conjugated by the rotation of angle theta about i.

    ``fricke``: x, y > 2. Rank-2 punctured-torus representation with
    tr A = x, tr B = y, tr AB = z (larger root), commutator trace -2.

    ``octagon``: rank 4 side pairings of the regular octagon with interior
    angles pi/4 (genus-2 surface group, opposite sides paired).

    ``custom``: ``matrices`` = list of [a, b, c, d].
    """
    p = dict(params or {}, **kw)
    if tag == "schottky":
        t, theta = float(p["t"]), float(p["theta"])
        if not t > 0:
            raise ValueError(f"schottky: t must be > 0, got {t}")
        if not 0 < theta < math.pi:
            raise ValueError(f"schottky: theta must lie in (0, pi), got {theta}")
        a = hp.translation_along(t)
        r = hp.rotation(theta)
        b = hp.compose(hp.compose(r, a), hp.inverse(r))
        return Representation(2, (a, b), "schottky", {"t": t, "theta": theta})
    if tag == "fricke":
        x, y = float(p["x"]), float(p["y"])
        if not (x > 2 and y > 2):
            raise ValueError(f"fricke: need x, y > 2, got ({x}, {y})")
        z = fricke_third_trace(x, y)
        lam = 0.5 * (x + math.sqrt(x * x - 4.0))
        A = ((lam, 0.0), (0.0, 1.0 / lam))
        # B = [[p, q], [r, s]]: p + s = y, lam p + s / lam = z, p s - q r = 1
        pp = (z - y / lam) / (lam - 1.0 / lam)
        ss = y - pp
        qr = pp * ss - 1.0
        q = math.sqrt(abs(qr))
        rr = q if qr >= 0 else -q
        if qr == 0.0:
            raise ValueError("fricke: reducible representation")
        B = ((pp, q), (rr, ss))
        return Representation(2, (hp.from_matrix(A), hp.from_matrix(B)), "fricke", {"x": x, "y": y})
    if tag == "octagon":
        # opposite sides of the regular octagon with angles pi/4 are paired by
        # translations of length 2 r, cosh r = cot(pi/8)
        length = 2.0 * math.acosh(1.0 / math.tan(math.pi / 8.0))
        a = hp.translation_along(length)
        gens = []
        for k in range(4):
            r = hp.rotation(k * math.pi / 4.0)
            gens.append(hp.compose(hp.compose(r, a), hp.inverse(r)))
        return Representation(4, tuple(gens), "octagon", {})
    if tag == "custom":
        mats = p["matrices"]
        imgs = tuple(hp.from_matrix(((m[0], m[1]), (m[2], m[3]))) for m in mats)
        return Representation(len(imgs), imgs, "custom", {"matrices": [list(map(float, m)) for m in mats]})
    raise ValueError(f"unknown family {tag!r}")


# ----------------------------------------------------------------------------
# rescaling factor


@dataclass(frozen=True)
class RescalingResult:
    value: float
    minimizer: HPoint
    iterations: int
    residual: float


def _log_cosh_displacement(g: ScaledIsometry, x: float, y: float) -> float:
    """log cosh d(z, g z) for z = x + iy, stable for large logscale."""
    a, b, c, d = g.m
    z = complex(x, y)
    q = c * z * z + (d - a) * z - b
    # cosh d = 1 + e^{2s} |q|^2 / (2 y^2)
    lq2 = 2.0 * g.logscale + math.log(max(abs(q) ** 2, 1e-320)) - math.log(2.0 * y * y)
    return lq2 + math.log1p(math.exp(-lq2)) if lq2 > 0 else math.log1p(math.exp(lq2))


def rescaling_factor(rho: Representation, F: GeneratorSet, tol: float = 1e-8,
                     max_iter: int = 2000, start: HPoint = hp.I) -> RescalingResult:
    """min over z of max over gamma in F of d(z, rho(gamma) z).

    Solved on log cosh of the displacements (smooth even at fixed points) as an
    epigraph problem with SLSQP, then polished by compass search in local
    hyperbolic coordinates; the residual is the disagreement between the two.
    """
    if not len(F):
        raise ValueError("F must be nonempty")
    if not F.symmetric:
        raise ValueError("F must be symmetric")
    if not tol > 0:
        raise ValueError("tol must be > 0")
    imgs = [rep_eval(rho, w) for w in F.elements]
    imgs = [g for g in imgs if not hp.isclose(g, hp.identity(), 1e-14)]
    if not imgs:
        return RescalingResult(0.0, start, 0, 0.0)

    def phi(x: float, u: float) -> float:
        y = math.exp(u)
        return max(_log_cosh_displacement(g, x, y) for g in imgs)

    x0 = np.array([start.re, math.log(start.im), phi(start.re, math.log(start.im)) + 1.0])
    cons = [{"type": "ineq", "fun": (lambda v, g=g: v[2] - _log_cosh_displacement(g, v[0], math.exp(v[1])))}
            for g in imgs]
    res = optimize.minimize(lambda v: v[2], x0, jac=lambda v: np.array([0.0, 0.0, 1.0]),
                            constraints=cons, method="SLSQP",
                            options={"maxiter": max_iter, "ftol": 1e-15})
    x, u = (float(res.x[0]), float(res.x[1])) if np.all(np.isfinite(res.x)) else (start.re, math.log(start.im))
    f_slsqp = phi(x, u)
    iterations = int(res.nit)

    # compass polish; steps are hyperbolic (dx is scaled by y)
    f = f_slsqp
    step = 1e-3
    dirs = [(math.cos(k * math.pi / 4), math.sin(k * math.pi / 4)) for k in range(8)]
    polish = 0
    while step > 1e-13 and polish < max_iter:
        polish += 1
        y = math.exp(u)
        best = (f, x, u)
        for cx, cu in dirs:
            xn, un = x + step * cx * y, u + step * cu
            fn = phi(xn, un)
            if fn < best[0]:
                best = (fn, xn, un)
        if best[0] < f:
            f, x, u = best
            step *= 2.0
        else:
            step *= 0.5
    iterations += polish
    if polish >= max_iter:
        z = HPoint(x, math.exp(u))
        raise ConvergenceError("rescaling_factor did not converge",
                               max(hp.displacement(g, z) for g in imgs))
    z = HPoint(x, math.exp(u))
    value = max(hp.displacement(g, z) for g in imgs)
    # convert the log-cosh disagreement to a distance scale
    gap = f_slsqp - f
    residual = gap / max(math.tanh(value), 1e-12) if value > 0 else math.sqrt(max(2 * gap, 0.0))
    return RescalingResult(value, z, iterations, residual)


# ----------------------------------------------------------------------------
# serialisation


def measure_to_dict(mu: FiniteMeasure) -> dict:
    return {"rank": mu.rank, "atoms": {word_to_str(w): float(p) for w, p in sorted(mu.atoms.items())}}


def measure_from_dict(d: Mapping) -> FiniteMeasure:
    rank = int(d["rank"])
    return FiniteMeasure.from_weights({word_from_str(k): float(v) for k, v in d["atoms"].items()}, rank)


def representation_to_dict(rho: Representation) -> dict:
    out = {"rank": rho.rank, "family": rho.family, "params": dict(rho.params)}
    if rho.family == "custom" and "matrices" not in out["params"]:
        out["params"]["matrices"] = [list(g.matrix) for g in rho.images]
    return out


def representation_from_dict(d: Mapping) -> Representation:
    rho = make_family(d["family"], dict(d.get("params", {})))
    if "rank" in d and int(d["rank"]) != rho.rank:
        raise ValueError(f"rank {d['rank']} does not match family {d['family']!r}")
    return rho
