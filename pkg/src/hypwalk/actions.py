"""Isometric actions of free groups, seen through their orbit of a basepoint.

Two realizations are provided: the hyperbolic plane through a representation,
and the Cayley tree of a free group with positive edge lengths (an R-tree).
``RescaledAction`` divides every distance by a constant factor.
"""

from __future__ import annotations

import abc
import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import hplane as hp
from .groups import (
    GeneratorSet,
    Representation,
    Word,
    inverse,
    multiply,
    reduce,
    rep_eval,
    rescaling_factor,
    word_to_str,
)
from .hplane import HPoint

DEFAULT_CONVERGENCE_THRESHOLD = 0.1
DEFAULT_CAUCHY_WINDOW = 0.05


class MetricAction(abc.ABC):
    """Orbit map w -> rho(w) o of a free group of rank ``rank``."""

    rank: int
    delta: float

    @abc.abstractmethod
    def orbit_distance(self, u: Word, v: Word) -> float:
        """d(rho(u) o, rho(v) o)."""

    def displacement(self, w: Word) -> float:
        return self.orbit_distance((), w)

    def gromov_product(self, x: Word, y: Word, base: Word = ()) -> float:
        return 0.5 * (self.orbit_distance(base, x) + self.orbit_distance(base, y) - self.orbit_distance(x, y))

    @abc.abstractmethod
    def is_loxodromic(self, w: Word) -> bool:
        ...

    @abc.abstractmethod
    def independent(self, u: Word, v: Word) -> bool:
        """Both loxodromic with disjoint fixed-point pairs at infinity."""


class HyperbolicAction(MetricAction):
    def __init__(self, rho: Representation, basepoint: HPoint = hp.I, delta: float = hp.DELTA_H2):
        self.rho = rho
        self.rank = rho.rank
        self.basepoint = basepoint
        self.delta = delta
        self._eval = lru_cache(maxsize=200_000)(self._eval_uncached)

    def __repr__(self):
        return f"HyperbolicAction({self.rho.family}, {dict(self.rho.params)}, o={self.basepoint})"

    def _eval_uncached(self, w: Word) -> hp.ScaledIsometry:
        if len(w) <= 1:
            return rep_eval(self.rho, w)
        half = len(w) // 2
        return hp.compose(self._eval(w[:half]), self._eval(w[half:]))

    def element(self, w: Word) -> hp.ScaledIsometry:
        return self._eval(tuple(w))

    def orbit_distance(self, u: Word, v: Word) -> float:
        # reduce u^-1 v as a word first: composing the matrices would cancel catastrophically
        return self.displacement(multiply(inverse(tuple(u)), tuple(v)))

    def displacement(self, w: Word) -> float:
        return hp.displacement(self._eval(tuple(w)), self.basepoint)

    def is_loxodromic(self, w: Word) -> bool:
        if not w:
            return False
        try:
            return hp.classify(self._eval(tuple(w))) == "loxodromic"
        except hp.ClassificationError:
            return False

    def independent(self, u: Word, v: Word) -> bool:
        if not (self.is_loxodromic(u) and self.is_loxodromic(v)):
            return False
        return hp.independent(self._eval(tuple(u)), self._eval(tuple(v)))


class WeightedTreeAction(MetricAction):
    """Left action of the free group on its Cayley tree with edge lengths per generator."""

    def __init__(self, weights: Sequence[float]):
        w = tuple(float(x) for x in weights)
        if not w or any(not x > 0 for x in w):
            raise ValueError(f"tree weights must be positive, got {w}")
        self.weights = w
        self.rank = len(w)
        self.delta = 0.0

    def __repr__(self):
        return f"WeightedTreeAction({list(self.weights)})"

    def length(self, w: Word) -> float:
        return math.fsum(self.weights[abs(x) - 1] for x in w)

    def orbit_distance(self, u: Word, v: Word) -> float:
        return self.length(multiply(inverse(tuple(u)), tuple(v)))

    def displacement(self, w: Word) -> float:
        return self.length(reduce(w))

    def is_loxodromic(self, w: Word) -> bool:
        # every non-trivial element of a free group acts loxodromically on its Cayley tree
        return bool(reduce(w))

    def independent(self, u: Word, v: Word) -> bool:
        u, v = reduce(u), reduce(v)
        if not (u and v):
            return False
        # distinct axes <=> the elements do not commute (end stabilizers are cyclic)
        return multiply(u, v) != multiply(v, u)

    def translation_length(self, w: Word) -> float:
        w = reduce(w)
        while len(w) >= 2 and w[0] == -w[-1]:
            w = w[1:-1]
        return self.length(w)


class RescaledAction(MetricAction):
    def __init__(self, base: MetricAction, factor: float):
        if not factor > 0:
            raise ValueError(f"rescaling factor must be positive, got {factor}")
        self.base = base
        self.factor = float(factor)
        self.rank = base.rank
        self.delta = base.delta / self.factor

    def __repr__(self):
        return f"RescaledAction({self.base!r}, {self.factor!r})"

    def orbit_distance(self, u: Word, v: Word) -> float:
        return self.base.orbit_distance(u, v) / self.factor

    def displacement(self, w: Word) -> float:
        return self.base.displacement(w) / self.factor

    def is_loxodromic(self, w: Word) -> bool:
        return self.base.is_loxodromic(w)

    def independent(self, u: Word, v: Word) -> bool:
        return self.base.independent(u, v)


def tree_distance(T: WeightedTreeAction, u: Word, v: Word) -> float:
    return T.orbit_distance(u, v)


def tree_gromov_product(T: WeightedTreeAction, u: Word, v: Word, o: Word = ()) -> float:
    """Weighted length of the longest common prefix of o^-1 u and o^-1 v."""
    x = multiply(inverse(tuple(o)), tuple(u))
    y = multiply(inverse(tuple(o)), tuple(v))
    k = 0
    while k < min(len(x), len(y)) and x[k] == y[k]:
        k += 1
    return T.length(x[:k])


def distance_matrix(action: MetricAction, words: Sequence[Word]) -> np.ndarray:
    n = len(words)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = action.orbit_distance(words[i], words[j])
    return D


def four_point_delta(action: MetricAction, sample_words: Sequence[Word],
                     quadruple_count: int | None = None,
                     rng: np.random.Generator | None = None) -> float:
    """Largest observed min((x,y)_w, (y,z)_w) - (x,z)_w.

    ``quadruple_count=None`` runs over every quadruple of ``sample_words``;
    otherwise that many quadruples are drawn uniformly. The raw maximum is
    returned (not clamped at zero).
    """
    words = [tuple(w) for w in sample_words]
    if len(words) < 4:
        raise ValueError("need at least 4 sample words")
    D = distance_matrix(action, words)
    n = len(words)
    if quadruple_count is None:
        best = -math.inf
        for w in range(n):
            G = 0.5 * (D[w][:, None] + D[w][None, :] - D)
            # min over (x,y),(y,z) minus (x,z), for all x, y, z at once
            m = np.minimum(G[:, :, None], G[None, :, :]) - G[:, None, :]
            best = max(best, float(m.max()))
        return best
    rng = rng if rng is not None else np.random.default_rng(0)
    q = rng.integers(0, n, size=(quadruple_count, 4))
    w, x, y, z = q.T

    def gp(a, b):
        return 0.5 * (D[w, a] + D[w, b] - D[a, b])

    return float(np.max(np.minimum(gp(x, y), gp(y, z)) - gp(x, z)))


# ----------------------------------------------------------------------------
# converging families


@dataclass
class ConvergenceReport:
    test_words: list[Word]
    params: list[float]
    distances: np.ndarray           # (params, words): unrescaled orbit distances
    rescaled: np.ndarray            # (params, words): distances in the family's own metric
    limit_distances: np.ndarray     # (words,)
    deviations: np.ndarray          # (params,): max_w |rescaled - limit|
    threshold: float = DEFAULT_CONVERGENCE_THRESHOLD

    @property
    def deviation(self) -> float:
        return float(self.deviations[-1])

    @property
    def converged(self) -> bool:
        return self.deviation < self.threshold

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.deviations) <= 1e-12))

    @property
    def flagged(self) -> bool:
        return not self.converged or not self.monotone

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["param", "word", "distance", "rescaled_distance", "limit_distance"])
        for i, p in enumerate(self.params):
            for j, w in enumerate(self.test_words):
                wr.writerow([repr(float(p)), word_to_str(w) or "e", repr(float(self.distances[i, j])),
                             repr(float(self.rescaled[i, j])), repr(float(self.limit_distances[j]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "test_words": [word_to_str(w) for w in self.test_words],
            "params": [float(p) for p in self.params],
            "deviations": [float(x) for x in self.deviations],
            "deviation": self.deviation,
            "threshold": self.threshold,
            "converged": self.converged,
            "monotone": self.monotone,
            "flagged": self.flagged,
        }


def _unscaled(action: MetricAction, w: Word) -> float:
    if isinstance(action, RescaledAction):
        return action.base.displacement(w)
    return action.displacement(w)


def convergence_report(family: Callable[[float], MetricAction], limit: MetricAction,
                       test_words: Sequence[Word], params: Sequence[float],
                       threshold: float = DEFAULT_CONVERGENCE_THRESHOLD) -> ConvergenceReport:
    if not len(params) or not len(test_words):
        raise ValueError("need a nonempty parameter grid and word list")
    words = [tuple(w) for w in test_words]
    lim = np.array([limit.displacement(w) for w in words])
    dist = np.zeros((len(params), len(words)))
    resc = np.zeros_like(dist)
    for i, p in enumerate(params):
        act = family(p)
        for j, w in enumerate(words):
            resc[i, j] = act.displacement(w)
            dist[i, j] = _unscaled(act, w)
    dev = np.max(np.abs(resc - lim[None, :]), axis=1)
    return ConvergenceReport(words, [float(p) for p in params], dist, resc, lim, dev, threshold)


class CauchyError(RuntimeError):
    pass


def limit_tree(family: Callable[[float], Representation], F: GeneratorSet, params: Sequence[float],
               window: float = DEFAULT_CAUCHY_WINDOW) -> WeightedTreeAction:
    """Tree whose edge lengths are the rescaled generator displacements at the end of the grid.

    The last three grid points must agree to within ``window`` (relative).
    """
    if len(params) < 3:
        raise ValueError("limit_tree needs at least 3 grid points")
    rows = []
    for p in params[-3:]:
        rho = family(p)
        res = rescaling_factor(rho, F)
        if not res.value > 0:
            raise CauchyError(f"rescaling factor vanishes at parameter {p}")
        act = HyperbolicAction(rho, res.minimizer)
        rows.append([act.displacement((k,)) / res.value for k in range(1, rho.rank + 1)])
    W = np.array(rows)
    variation = np.max(np.abs(W - W[-1]) / W[-1])
    if variation >= window:
        raise CauchyError(f"family not visibly convergent on this grid (variation {variation:.3g})")
    return WeightedTreeAction(W[-1])


def rescaled_family(family: Callable[[float], Representation], F: GeneratorSet,
                    multiplier: float = 1.0) -> Callable[[float], RescaledAction]:
    """param -> plane action at the minimax basepoint, distances divided by multiplier * R."""

    def build(p: float) -> RescaledAction:
        rho = family(p)
        res = rescaling_factor(rho, F)
        return RescaledAction(HyperbolicAction(rho, res.minimizer), multiplier * res.value)

    return build
