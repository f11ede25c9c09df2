"""Schottky sets: certification by the finite criterion, brute-force checks, search.

A finite symmetric set S is (eta, C, D)-Schottky when, for all points x, y,
at most an eta-fraction of a in S have (x, a y)_o > C (likewise for a^-1 y),
and every a in S moves o by at least D. The finite criterion: with
c1 = max_{g != h} (g o, h o)_o and c2 = min_g d(o, g o), the inequality
c1 + 2 delta < c2 / 2 makes S an (2/#S, c1 + 3 delta, c2)-Schottky set.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .actions import MetricAction
from .groups import FiniteMeasure, GeneratorSet, Word, inverse, multiply, word_power, word_to_str, words_up_to

COMPARE_TOL = 1e-9


class ElementaryMeasureError(ValueError):
    pass


class SearchExhausted(RuntimeError):
    def __init__(self, msg: str, best_margin: float):
        super().__init__(f"{msg} (best margin {best_margin:.6g})")
        self.best_margin = best_margin


@dataclass(frozen=True)
class SchottkyCertificate:
    S: GeneratorSet
    eta: float
    C: float
    D: float
    c1: float
    c2: float
    delta: float

    @property
    def margin(self) -> float:
        return self.c2 / 2 - self.c1 - 2 * self.delta

    def to_dict(self) -> dict:
        return {"S": [word_to_str(w) for w in self.S], "size": len(self.S), "eta": self.eta, "C": self.C,
                "D": self.D, "c1": self.c1, "c2": self.c2, "delta": self.delta, "margin": self.margin}


@dataclass(frozen=True)
class SchottkyFailure:
    S: GeneratorSet
    c1: float
    c2: float
    delta: float

    @property
    def margin(self) -> float:
        return self.c2 / 2 - self.c1 - 2 * self.delta

    def to_dict(self) -> dict:
        return {"S": [word_to_str(w) for w in self.S], "c1": self.c1, "c2": self.c2, "delta": self.delta,
                "margin": self.margin, "certified": False}


@dataclass(frozen=True)
class SchottkyViolation:
    condition: int                      # 1, 2 or 3
    witnesses: tuple[Word, ...]         # (x, y) for conditions 1-2, (a,) for condition 3
    measured: float                     # proportion of good a, or the displacement
    threshold: float

    def to_dict(self) -> dict:
        return {"condition": self.condition, "witnesses": [word_to_str(w) or "e" for w in self.witnesses],
                "measured": self.measured, "threshold": self.threshold}


def _constants(S: Sequence[Word], action: MetricAction) -> tuple[float, float]:
    words = list(S)
    c1 = -math.inf
    for g, h in itertools.combinations(words, 2):
        c1 = max(c1, action.gromov_product(g, h))
    c2 = min(action.displacement(g) for g in words)
    return c1, c2


def certify(S: GeneratorSet, action: MetricAction, delta: float) -> SchottkyCertificate | SchottkyFailure:
    if not S.symmetric:
        raise ValueError("S must be symmetric")
    if S.contains_identity:
        raise ValueError("S must not contain the identity")
    if len(S) < 2:
        raise ValueError("S needs at least two elements")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    c1, c2 = _constants(S, action)
    if c1 + 2 * delta < c2 / 2:
        return SchottkyCertificate(S, 2.0 / len(S), c1 + 3 * delta, c2, c1, c2, float(delta))
    return SchottkyFailure(S, c1, c2, float(delta))


def probe_words(rank: int, max_len: int, extra: int = 0, extra_len: int = 12,
                rng: np.random.Generator | None = None) -> list[Word]:
    """All reduced words up to ``max_len`` plus ``extra`` random reduced words of length ``extra_len``."""
    out = words_up_to(rank, max_len)
    if extra:
        rng = rng if rng is not None else np.random.default_rng(0)
        letters = [x for k in range(1, rank + 1) for x in (k, -k)]
        for _ in range(extra):
            w = [letters[rng.integers(len(letters))]]
            while len(w) < extra_len:
                choices = [x for x in letters if x != -w[-1]]
                w.append(choices[rng.integers(len(choices))])
            out.append(tuple(w))
    return out


def brute_check(cert: SchottkyCertificate, action: MetricAction, probe_words: Sequence[Word],
                pair_samples: int | None, rng: np.random.Generator | None = None) -> list[SchottkyViolation]:
    """Test the Schottky definition on orbit points of ``probe_words``.

    ``pair_samples=None`` checks every ordered pair of probes; otherwise that
    many pairs are drawn. Condition (3) is checked exactly.
    """
    S = list(cert.S)
    probes = [tuple(w) for w in probe_words]
    allowed = cert.eta * len(S)
    if pair_samples is None:
        pairs = itertools.product(range(len(probes)), repeat=2)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        pairs = rng.integers(0, len(probes), size=(pair_samples, 2)).tolist()
    dx = {}

    def d0(w):
        if w not in dx:
            dx[w] = action.displacement(w)
        return dx[w]

    out = []
    for i, j in pairs:
        x, y = probes[i], probes[j]
        for cond, images in ((1, S), (2, [inverse(a) for a in S])):
            bad = 0
            for a in images:
                ay = multiply(a, y)
                gp = 0.5 * (d0(x) + d0(ay) - action.orbit_distance(x, ay))
                bad += gp > cert.C + COMPARE_TOL
            if bad > allowed + 1e-12:
                out.append(SchottkyViolation(cond, (x, y), 1.0 - bad / len(S), 1.0 - cert.eta))
    # smallest displacement first
    for da, a in sorted((d0(a), a) for a in S):
        if da < cert.D - COMPARE_TOL:
            out.append(SchottkyViolation(3, (a,), da, cert.D))
    return out


# ----------------------------------------------------------------------------
# search


def _products(mu: FiniteMeasure, depth: int, cap: int = 20_000) -> list[set[Word]]:
    atoms = mu.support
    level = {()}
    out = [level]
    for _ in range(depth):
        level = {multiply(w, a) for w in level for a in atoms}
        if len(level) > cap:
            level = set(sorted(level, key=lambda w: (len(w), w))[:cap])
        out.append(level)
    return out


def _independent_pair(mu: FiniteMeasure, action: MetricAction, depth: int) -> tuple[Word, Word, int]:
    """Independent loxodromics u, v such that u, v, u^-1, v^-1 are products of k atoms each."""
    prods = _products(mu, depth)
    for k in range(1, depth + 1):
        cands = sorted((w for w in prods[k] if w and inverse(w) in prods[k] and action.is_loxodromic(w)),
                       key=lambda w: (len(w), tuple(abs(x) for x in w), tuple(x < 0 for x in w)))
        for u, v in itertools.combinations(cands, 2):
            if action.independent(u, v):
                return u, v, k
    raise ElementaryMeasureError("measure appears elementary for this action")


def schottky_set(x: Word, y: Word, level: int) -> GeneratorSet:
    """Level 0: {x, X, y, Y}. Level L: w c w^-1 over reduced block words w of length L and
    blocks c from the generator pair not ending w (2 * 4 * 3^(L-1) elements)."""
    blocks = {1: x, -1: inverse(x), 2: y, -2: inverse(y)}
    if level == 0:
        return GeneratorSet(list(blocks.values()))
    out = []
    for bw in words_up_to(2, level):
        if len(bw) != level:
            continue
        w = ()
        for b in bw:
            w = multiply(w, blocks[b])
        other = (2, -2) if abs(bw[-1]) == 1 else (1, -1)
        for c in other:
            out.append(multiply(multiply(w, blocks[c]), inverse(w)))
    return GeneratorSet(out)


def level_for(eta_target: float) -> int:
    need = 2.0 / eta_target
    if need <= 4:
        return 0
    L = 1
    while 8 * 3 ** (L - 1) < need:
        L += 1
    return L


@dataclass(frozen=True)
class SearchResult:
    S: GeneratorSet
    N: int
    cert: SchottkyCertificate
    u: Word
    v: Word
    power: int
    level: int

    def to_dict(self) -> dict:
        return {"N": self.N, "u": word_to_str(self.u), "v": word_to_str(self.v), "power": self.power,
                "level": self.level, "certificate": self.cert.to_dict()}


def search(mu: FiniteMeasure, action: MetricAction, delta: float, eta_target: float, D_target: float,
           max_power: int = 12, depth: int = 3) -> SearchResult:
    """Schottky set in the support of a convolution power of mu.

    Blocks x = u^m, y = v^m for independent loxodromics u, v that (with their
    inverses) are products of k atoms; the set of ``schottky_set`` at the level
    fixed by ``eta_target`` is certified for m = 1, 2, ... Each element is a
    product of 2L+1 blocks, hence lies in the support of mu^N, N = (2L+1) k m.
    """
    if not 0 < eta_target < 1:
        raise ValueError("eta_target must lie in (0, 1)")
    u, v, k = _independent_pair(mu, action, depth)
    L = level_for(eta_target)
    best = -math.inf
    for m in range(1, max_power + 1):
        S = schottky_set(word_power(u, m), word_power(v, m), L)
        if len(S) < 2.0 / eta_target:
            raise AssertionError("schottky_set smaller than requested")
        res = certify(S, action, delta)
        best = max(best, res.margin)
        if isinstance(res, SchottkyCertificate) and res.D >= D_target:
            return SearchResult(S, (2 * L + 1) * k * m, res, u, v, m, L)
    raise SearchExhausted(f"no certificate with D >= {D_target} up to power {max_power}", best)


@dataclass
class FamilyCertification:
    params: list[float]
    results: list[SchottkyCertificate | SchottkyFailure]
    uniform: bool
    eta: float | None
    C: float | None
    D: float | None

    def to_dict(self) -> dict:
        return {"params": self.params, "uniform": self.uniform, "eta": self.eta, "C": self.C, "D": self.D,
                "points": [dict(r.to_dict(), certified=isinstance(r, SchottkyCertificate)) for r in self.results]}


def certify_family(family: Callable[[float], MetricAction], S: GeneratorSet, delta: float | None,
                   grid: Sequence[float]) -> FamilyCertification:
    """Certify S along the grid; ``delta=None`` uses each action's declared constant.

    The uniform flag holds when every point certifies and the worst constants
    (max c1, min c2, max delta) still satisfy the criterion, so a single
    (eta, max C, min D) triple is valid at every grid point.
    """
    if not len(grid):
        raise ValueError("grid must be nonempty")
    results = []
    for p in grid:
        act = family(p)
        results.append(certify(S, act, act.delta if delta is None else delta))
    ok = all(isinstance(r, SchottkyCertificate) for r in results)
    c1 = max(r.c1 for r in results)
    c2 = min(r.c2 for r in results)
    dl = max(r.delta for r in results)
    uniform = ok and c1 + 2 * dl < c2 / 2
    if uniform:
        return FamilyCertification([float(p) for p in grid], results, True, 2.0 / len(S),
                                   max(r.C for r in results), c2)
    return FamilyCertification([float(p) for p in grid], results, False, None, None, None)
