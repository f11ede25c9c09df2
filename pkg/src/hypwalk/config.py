"""Experiment configuration: one TOML document per experiment.

Example::

    experiment = "drift-sweep"
    seed = 7

    [family]
    tag = "schottky"
    vary = "t"
    grid = [2, 4, 8]
    params = { theta = 1.5707963267948966 }

    [measure]
    uniform = true          # or: atoms = { a = 0.5, A = 0.5 }

    [walk]
    steps = 2000
    trials = 200
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli

from .actions import WeightedTreeAction
from .groups import (
    FiniteMeasure,
    GeneratorSet,
    Representation,
    Word,
    make_family,
    measure_from_dict,
    standard_generating_set,
    uniform_generators,
    word_from_str,
)

EXPERIMENTS = ("drift-sweep", "semicontinuity", "dimension-drop", "schottky-certify", "tail")


class ConfigError(ValueError):
    pass


def _get(d: Mapping, key: str, kind, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"missing key {key!r}")
        return default
    v = d[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kind):
        raise ConfigError(f"key {key!r}: expected {getattr(kind, '__name__', kind)}, got {v!r}")
    return v


@dataclass(frozen=True)
class FamilySpec:
    tag: str
    vary: str | None
    grid: tuple[float, ...]
    params: Mapping[str, Any]

    def representation(self, p: float) -> Representation:
        kw = dict(self.params)
        if self.vary:
            kw[self.vary] = p
        try:
            return make_family(self.tag, kw)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"family {self.tag!r} at {self.vary}={p}: {exc}") from exc

    @property
    def rank(self) -> int:
        return self.representation(self.grid[0]).rank


@dataclass(frozen=True)
class WalkSpec:
    steps: int = 2000
    trials: int = 200


@dataclass(frozen=True)
class SchottkySpec:
    delta: float | None = None          # None: the action's own constant
    eta_target: float = 0.5
    D_target: float = 0.0
    max_power: int = 12
    pair_samples: int = 10_000
    probe_len: int = 3
    probe_extra: int = 200
    base_param: float | None = None     # where the search runs; default first grid point
    rescaled: bool = True               # certify_family on rescaled actions
    A: float | None = None              # checked against eta * A >= C when given


@dataclass(frozen=True)
class LemmaSpec:
    """Quantities of the quantitative large-deviation bound (validated, never fitted)."""
    eta: float
    N: int
    A: float
    alpha: float
    r: float | None = None
    C: float | None = None
    Q_mean: float | None = None
    Q: str | None = None                 # "jumps": E(Q) = mean d(o, Z_{NA} o)

    def r_bound(self, EQ: float) -> float:
        return (1 - 40 * self.eta) * EQ / (self.N * self.A) - 2 * self.eta


@dataclass(frozen=True)
class TailSpec:
    a_values: tuple[float, ...] = ()
    a_fractions: tuple[float, ...] = (0.5,)    # multiples of the estimated drift, used if a_values empty
    n_grid: tuple[int, ...] = (50, 100, 150, 200, 250, 300, 350, 400)
    trials: int = 2000
    tilt: float | str = "auto"
    g: str = "aaaa"
    horizon: int = 1000
    epsilon: float = 0.1
    lemma: LemmaSpec | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int
    family: FamilySpec | None
    tree_weights: tuple[float, ...] | None
    measure: Mapping[str, Any]
    walk: WalkSpec
    filling_set: tuple[str, ...]
    rescale_multiplier: float
    limit: str
    test_words: tuple[str, ...]
    tail_from: float | None
    entropy_n_max: int
    schottky: SchottkySpec
    tail: TailSpec
    sha256: str
    raw: Mapping[str, Any] = field(repr=False, default_factory=dict)

    @property
    def rank(self) -> int:
        if self.tree_weights is not None:
            return len(self.tree_weights)
        return self.family.rank

    def build_measure(self) -> FiniteMeasure:
        m = self.measure
        try:
            if m.get("uniform", False):
                return uniform_generators(self.rank)
            atoms = m["atoms"]
            total = math.fsum(float(v) for v in atoms.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"atom masses sum to {total:.12g}, not 1")
            return measure_from_dict({"rank": self.rank, "atoms": atoms})
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"measure: {exc}") from exc

    def tree(self) -> WeightedTreeAction:
        return WeightedTreeAction(self.tree_weights)

    def F(self) -> GeneratorSet:
        if not self.filling_set:
            return standard_generating_set(self.rank)
        return GeneratorSet(word_from_str("" if s == "e" else s) for s in self.filling_set)

    def words(self) -> list[Word]:
        return [word_from_str(s) for s in self.test_words]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace
        return replace(self, seed=int(seed))


def _floats(v, key) -> tuple[float, ...]:
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ConfigError(f"{key!r} must be a list of numbers")
    return tuple(float(x) for x in v)


def parse(doc: Mapping[str, Any], sha256: str = "") -> ExperimentConfig:
    exp = _get(doc, "experiment", str, required=True)
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; choose from {', '.join(EXPERIMENTS)}")
    seed = _get(doc, "seed", int, 0)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")

    fam = None
    if "family" in doc:
        f = doc["family"]
        grid = _floats(_get(f, "grid", list, [0.0]), "family.grid")
        if not grid:
            raise ConfigError("family.grid must be nonempty")
        fam = FamilySpec(_get(f, "tag", str, required=True), _get(f, "vary", str, None), grid,
                         dict(_get(f, "params", dict, {})))
        fam.representation(grid[0])
    weights = _floats(doc["tree"]["weights"], "tree.weights") if "tree" in doc else None
    if weights is not None and any(not w > 0 for w in weights):
        raise ConfigError("tree.weights must be positive")
    if fam is None and weights is None:
        raise ConfigError("need a [family] or a [tree] table")

    w = doc.get("walk", {})
    walk = WalkSpec(_get(w, "steps", int, 2000), _get(w, "trials", int, 200))
    if walk.steps < 1 or walk.trials < 1:
        raise ConfigError("walk.steps and walk.trials must be >= 1")

    s = doc.get("schottky", {})
    sch = SchottkySpec(
        delta=_get(s, "delta", float, None), eta_target=_get(s, "eta_target", float, 0.5),
        D_target=_get(s, "D_target", float, 0.0), max_power=_get(s, "max_power", int, 12),
        pair_samples=_get(s, "pair_samples", int, 10_000), probe_len=_get(s, "probe_len", int, 3),
        probe_extra=_get(s, "probe_extra", int, 200), base_param=_get(s, "base_param", float, None),
        rescaled=_get(s, "rescaled", bool, True), A=_get(s, "A", float, None))
    if not 0 < sch.eta_target < 1:
        raise ConfigError("schottky.eta_target must lie in (0, 1)")
    if sch.delta is not None and sch.delta < 0:
        raise ConfigError("schottky.delta must be >= 0")

    t = doc.get("tail", {})
    lemma = None
    if "lemma" in t:
        lm = t["lemma"]
        lemma = LemmaSpec(eta=_get(lm, "eta", float, required=True), N=_get(lm, "N", int, required=True),
                          A=_get(lm, "A", float, required=True), alpha=_get(lm, "alpha", float, required=True),
                          r=_get(lm, "r", float, None), C=_get(lm, "C", float, None),
                          Q_mean=_get(lm, "Q_mean", float, None), Q=_get(lm, "Q", str, None))
        if not (lemma.eta > 0 and lemma.N > 0 and lemma.A > 0 and 0 < lemma.alpha < 1):
            raise ConfigError("tail.lemma needs eta > 0, N > 0, A > 0, alpha in (0, 1)")
        if lemma.r is not None and lemma.Q_mean is None and lemma.Q != "jumps":
            raise ConfigError("tail.lemma.r needs Q_mean or Q = \"jumps\"")
        if lemma.Q not in (None, "jumps"):
            raise ConfigError("tail.lemma.Q must be \"jumps\"")
        if lemma.C is not None and lemma.eta * lemma.A < lemma.C:
            raise ConfigError(f"eta * A = {lemma.eta * lemma.A:.6g} < C = {lemma.C:.6g}")
        if lemma.r is not None and lemma.Q_mean is not None:
            check_r(lemma, lemma.Q_mean)
    tilt = t.get("tilt", "auto")
    if not (tilt == "auto" or isinstance(tilt, (int, float))):
        raise ConfigError("tail.tilt must be \"auto\" or a number")
    tail = TailSpec(
        a_values=_floats(t.get("a_values", []), "tail.a_values"),
        a_fractions=_floats(t.get("a_fractions", [0.5]), "tail.a_fractions"),
        n_grid=tuple(int(x) for x in _floats(t.get("n_grid", [50, 100, 150, 200, 250, 300, 350, 400]),
                                             "tail.n_grid")),
        trials=_get(t, "trials", int, 2000), tilt=tilt, g=_get(t, "g", str, "aaaa"),
        horizon=_get(t, "horizon", int, 1000), epsilon=_get(t, "epsilon", float, 0.1), lemma=lemma)
    if not 0 < tail.epsilon < 1:
        raise ConfigError("tail.epsilon must lie in (0, 1)")
    if any(a < 0 for a in tail.a_values):
        raise ConfigError("tail.a_values must be >= 0")

    r = doc.get("rescaling", {})
    limit = _get(doc.get("semicontinuity", {}), "limit", str, "tree")
    if limit not in ("tree", "last"):
        raise ConfigError("semicontinuity.limit must be \"tree\" or \"last\"")
    sc = doc.get("semicontinuity", {})
    cfg = ExperimentConfig(
        experiment=exp, seed=seed, family=fam, tree_weights=weights,
        measure=dict(doc.get("measure", {"uniform": True})), walk=walk,
        filling_set=tuple(_get(r, "F", list, [])), rescale_multiplier=_get(r, "multiplier", float, 1.0),
        limit=limit, test_words=tuple(_get(sc, "test_words", list, ["a", "b", "ab", "aB", "abAB"])),
        tail_from=_get(sc, "tail_from", float, None),
        entropy_n_max=_get(doc.get("entropy", {}), "n_max", int, 10),
        schottky=sch, tail=tail, sha256=sha256, raw=doc)
    if exp != "tail" and fam is None:
        raise ConfigError(f"{exp} needs a [family] table")
    if not cfg.rescale_multiplier > 0:
        raise ConfigError("rescaling.multiplier must be positive")
    cfg.build_measure()
    return cfg


def check_r(lemma: LemmaSpec, EQ: float) -> float:
    bound = lemma.r_bound(EQ)
    if lemma.r is not None and not (0 <= lemma.r < bound):
        raise ConfigError(f"r = {lemma.r:.6g} violates r < (1 - 40 eta) E(Q) / (N A) - 2 eta = {bound:.6g}")
    return bound


def load(path: str | Path) -> ExperimentConfig:
    data = Path(path).read_bytes()
    try:
        doc = tomli.loads(data.decode("utf-8"))
    except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse(doc, hashlib.sha256(data).hexdigest())
