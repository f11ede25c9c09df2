"""Random-walk engine and estimators (drift, entropy, dimension, tails).

Trials run vectorized over numpy arrays. Each trial keeps its reduced word as
a stack, together with the orbit data of every prefix (cumulative length on a
tree, the scaled prefix product in the plane). A backtracking step therefore
pops back to a previously computed prefix instead of multiplying by an inverse,
which would cancel catastrophically once matrix entries are of size e^t.

Trial ``i`` of a run with seed ``s`` draws its randomness from
``np.random.default_rng([s, i])``, so results do not depend on batching.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import hplane as hp
from .actions import HyperbolicAction, MetricAction, RescaledAction, WeightedTreeAction
from .groups import FiniteMeasure, Representation, Word, convolve, measure_to_dict, word_to_str

Z95 = 1.959963984540054
_MEMORY_BUDGET = 192 * 2**20
_LOG2 = math.log(2.0)


class EntropyCapError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# per-prefix geometry


class _TreeGeometry:
    def __init__(self, action: WeightedTreeAction, scale: float, trials: int, cap: int):
        self.w = np.array((0.0,) + action.weights) / scale
        self.cum = np.zeros((trials, cap + 1))

    def push(self, rows, h, letters):
        self.cum[rows, h + 1] = self.cum[rows, h] + self.w[np.abs(letters)]

    def distance(self, rows, h):
        return self.cum[rows, h]

    def word_data(self, w: Word):
        return sum(self.w[abs(x)] for x in w)

    def extended_distance(self, rows, h, data):
        return self.cum[rows, h] + data


def _disp_at_i(m: np.ndarray, s: np.ndarray) -> np.ndarray:
    a, b, c, d = m[..., 0], m[..., 1], m[..., 2], m[..., 3]
    den2 = c * c + d * d
    # far from i the denominators underflow; that branch is discarded below
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        im = np.exp(-2.0 * s) / den2
        re = (a * c + b * d) / den2
        near = 2.0 * np.arcsinh(np.hypot(re, im - 1.0) / (2.0 * np.sqrt(im)))
        far = 2.0 * s - _LOG2 + np.log1p(np.sqrt(np.clip(1.0 - 4.0 * np.exp(-4.0 * s), 0.0, None)))
    return np.where(s < 10.0, near, far)


def _compose(m1, s1, m2, s2):
    a1, b1, c1, d1 = m1[..., 0], m1[..., 1], m1[..., 2], m1[..., 3]
    a2, b2, c2, d2 = m2[..., 0], m2[..., 1], m2[..., 2], m2[..., 3]
    p = np.stack([a1 * a2 + b1 * c2, a1 * b2 + b1 * d2, c1 * a2 + d1 * c2, c1 * b2 + d1 * d2], axis=-1)
    nrm = np.sqrt(np.sum(p * p, axis=-1))
    if np.any(~(nrm > 1e-300)):
        raise hp.CancellationError("product matrix numerically zero")
    return p / nrm[..., None], s1 + s2 + np.log(nrm)


class _PlaneGeometry:
    def __init__(self, action: HyperbolicAction, scale: float, trials: int, cap: int):
        r = math.sqrt(action.basepoint.im)
        h = hp.from_matrix(((r, action.basepoint.re / r), (0.0, 1.0 / r)))
        hi = hp.inverse(h)
        self._conj = lambda g: hp.compose(hp.compose(hi, g), h)
        rank = action.rank
        self.gm = np.zeros((2 * rank + 1, 4))
        self.gs = np.zeros(2 * rank + 1)
        for x in range(-rank, rank + 1):
            if x == 0:
                continue
            g = self._conj(action.rho.image(x))
            self.gm[x + rank], self.gs[x + rank] = g.m, g.logscale
        self.rank = rank
        self.action = action
        self.scale = scale
        ident = hp.identity()
        self.m = np.empty((trials, cap + 1, 4))
        self.s = np.empty((trials, cap + 1))
        self.m[:, 0] = ident.m
        self.s[:, 0] = ident.logscale

    def push(self, rows, h, letters):
        k = letters + self.rank
        m, s = _compose(self.m[rows, h], self.s[rows, h], self.gm[k], self.gs[k])
        self.m[rows, h + 1] = m
        self.s[rows, h + 1] = s

    def distance(self, rows, h):
        return _disp_at_i(self.m[rows, h], self.s[rows, h]) / self.scale

    def word_data(self, w: Word):
        g = self._conj(self.action.element(w))
        return np.array(g.m), g.logscale

    def extended_distance(self, rows, h, data):
        gm, gs = data
        m, s = _compose(self.m[rows, h], self.s[rows, h], gm[None, :], gs)
        return _disp_at_i(m, s) / self.scale

    def top(self, rows, h):
        return self.m[rows, h], self.s[rows, h]


class _GenericGeometry:
    """Fallback: evaluates the action on the stored reduced word."""

    def __init__(self, action: MetricAction, walker: "_Walker"):
        self.action = action
        self.walker = walker

    def push(self, rows, h, letters):
        pass

    def _word(self, r, h):
        return tuple(int(x) for x in self.walker.letters[r, 1:h + 1])

    def distance(self, rows, h):
        return np.array([self.action.displacement(self._word(r, hh)) for r, hh in zip(rows, h)])

    def word_data(self, w: Word):
        return w

    def extended_distance(self, rows, h, data):
        return np.array([self.action.displacement(self._word(r, hh) + tuple(data)) for r, hh in zip(rows, h)])


def _unwrap(action: MetricAction) -> tuple[MetricAction, float]:
    scale = 1.0
    while isinstance(action, RescaledAction):
        scale *= action.factor
        action = action.base
    return action, scale


class _Walker:
    def __init__(self, action: MetricAction, atoms: Sequence[Word], trials: int, steps: int, start: Word = ()):
        self.maxlen = max(1, max(len(a) for a in atoms))
        cap = len(start) + steps * self.maxlen
        self.trials = trials
        self.rows = np.arange(trials)
        self.letters = np.zeros((trials, cap + 1), dtype=np.int16)
        self.h = np.zeros(trials, dtype=np.int64)
        base, scale = _unwrap(action)
        if isinstance(base, WeightedTreeAction):
            self.geo = _TreeGeometry(base, scale, trials, cap)
        elif isinstance(base, HyperbolicAction):
            self.geo = _PlaneGeometry(base, scale, trials, cap)
        else:
            self.geo = _GenericGeometry(action, self)
        self.A = np.zeros((len(atoms), self.maxlen), dtype=np.int16)
        self.alen = np.array([len(a) for a in atoms])
        for i, a in enumerate(atoms):
            self.A[i, :len(a)] = a
        self.atoms = [tuple(a) for a in atoms]
        self._suffix = None
        for x in start:
            self._push(self.rows, np.full(trials, x, dtype=np.int16))

    @staticmethod
    def bytes_per_trial(action: MetricAction, atoms, steps: int, start: Word = ()) -> int:
        cap = len(start) + steps * max(1, max(len(a) for a in atoms)) + 1
        base, _ = _unwrap(action)
        per = 2 + (8 if isinstance(base, WeightedTreeAction) else 40 if isinstance(base, HyperbolicAction) else 0)
        return cap * per + 16 * steps

    def _push(self, rows, letters):
        hh = self.h[rows]
        self.letters[rows, hh + 1] = letters
        self.geo.push(rows, hh, letters)
        self.h[rows] = hh + 1

    def _cancellation(self, lets, ln):
        k = np.zeros(self.trials, dtype=np.int64)
        alive = np.ones(self.trials, dtype=bool)
        for j in range(self.maxlen):
            pos = self.h - j
            top = self.letters[self.rows, np.maximum(pos, 0)]
            alive = alive & (j < ln) & (pos >= 1) & (top == -lets[:, j])
            k += alive
        return k

    def step(self, idx: np.ndarray):
        lets = self.A[idx]
        ln = self.alen[idx]
        k = self._cancellation(lets, ln)
        self.h -= k
        for j in range(self.maxlen):
            rows = np.nonzero((j >= k) & (j < ln))[0]
            if rows.size:
                self._push(rows, lets[rows, j])

    def distance(self) -> np.ndarray:
        # the empty word is the basepoint itself; skip the rounding noise of the matrix formula
        return np.where(self.h == 0, 0.0, self.geo.distance(self.rows, self.h))

    def candidate_distances(self) -> np.ndarray:
        """(trials, atoms): distance after multiplying by each atom."""
        if self._suffix is None:
            self._suffix = [[self.geo.word_data(a[k:]) for k in range(len(a) + 1)] for a in self.atoms]
        out = np.empty((self.trials, len(self.atoms)))
        for i, a in enumerate(self.atoms):
            lets = np.broadcast_to(self.A[i], (self.trials, self.maxlen))
            k = self._cancellation(lets, np.full(self.trials, len(a)))
            hb = self.h - k
            for kk in np.unique(k):
                rows = np.nonzero(k == kk)[0]
                out[rows, i] = self.geo.extended_distance(rows, hb[rows], self._suffix[i][kk])
        return out


def _trial_uniforms(seed: int, first: int, count: int, steps: int) -> np.ndarray:
    u = np.empty((count, steps))
    for i in range(count):
        u[i] = np.random.default_rng([int(seed), first + i]).random(steps)
    return u


def simulate(measure: FiniteMeasure, action: MetricAction, steps: int, trials: int, seed: int,
             record: Sequence[int] | None = None, start: Word = (), tilt: float = 0.0,
             keep_top: bool = False) -> dict:
    """Run ``trials`` independent walks Z_n (started at ``start``) for ``steps`` steps.

    Returns ``dist`` with shape (trials, len(record)) holding d(o, start Z_n o)
    at the recorded times. With ``tilt != 0`` steps are drawn from the
    exponentially tilted kernel q(g) ~ mu(g) exp(-tilt * increment) and
    ``logw`` holds the accumulated log likelihood ratios.
    """
    if steps < 1 or trials < 1:
        raise ValueError("steps and trials must be >= 1")
    if measure.rank != action.rank:
        raise ValueError(f"measure rank {measure.rank} != action rank {action.rank}")
    record = [steps] if record is None else sorted({int(n) for n in record})
    if record[0] < 0 or record[-1] > steps:
        raise ValueError("record times must lie in [0, steps]")
    atoms, p = measure.arrays()
    logp = np.log(p)
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    chunk = max(1, min(trials, _MEMORY_BUDGET // _Walker.bytes_per_trial(action, atoms, steps, start)))
    dist = np.empty((trials, len(record)))
    logw = np.zeros((trials, len(record)))
    tops = []
    rec_pos = {n: i for i, n in enumerate(record)}
    for first in range(0, trials, chunk):
        cnt = min(chunk, trials - first)
        u = _trial_uniforms(seed, first, cnt, steps)
        wk = _Walker(action, atoms, cnt, steps, start)
        lw = np.zeros(cnt)
        sl = slice(first, first + cnt)
        if 0 in rec_pos:
            dist[sl, rec_pos[0]] = wk.distance()
        for n in range(1, steps + 1):
            if tilt:
                cur = wk.distance()
                inc = wk.candidate_distances() - cur[:, None]
                logits = logp[None, :] - tilt * inc
                logz = logsumexp(logits, axis=1)
                q = np.exp(logits - logz[:, None])
                c = np.cumsum(q, axis=1)
                idx = np.minimum((c < u[:, n - 1, None]).sum(axis=1), len(atoms) - 1)
                lw += logz + tilt * inc[np.arange(cnt), idx]
            else:
                idx = np.minimum(np.searchsorted(cdf, u[:, n - 1], side="right"), len(atoms) - 1)
            wk.step(idx)
            if n in rec_pos:
                dist[sl, rec_pos[n]] = wk.distance()
                logw[sl, rec_pos[n]] = lw
        if keep_top:
            if not isinstance(wk.geo, _PlaneGeometry):
                raise TypeError("keep_top requires a hyperbolic-plane action")
            tops.append(wk.geo.top(wk.rows, wk.h))
    out = {"record": record, "dist": dist}
    if tilt:
        out["logw"] = logw
    if keep_top:
        out["top_m"] = np.concatenate([t[0] for t in tops])
        out["top_s"] = np.concatenate([t[1] for t in tops])
    return out


# ----------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class WalkConfig:
    measure: FiniteMeasure
    action: MetricAction
    steps: int
    trials: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.trials < 1:
            raise ValueError("steps and trials must be >= 1")

    def describe(self) -> dict:
        return {"steps": self.steps, "trials": self.trials, "seed": self.seed,
                "action": repr(self.action), "measure": measure_to_dict(self.measure)}


@dataclass(frozen=True)
class DriftEstimate:
    mean: float
    ci_low: float
    ci_high: float
    std: float
    steps: int
    trials: int
    seed: int

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_high - self.ci_low)

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_ci(x: np.ndarray) -> tuple[float, float, float]:
    mean = math.fsum(x.tolist()) / len(x)
    std = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    hw = Z95 * std / math.sqrt(len(x))
    return mean, std, hw


def sample_walk(cfg: WalkConfig) -> np.ndarray:
    """(trials, steps) array of d(o, Z_n o) for n = 1..steps."""
    res = simulate(cfg.measure, cfg.action, cfg.steps, cfg.trials, cfg.seed, record=range(1, cfg.steps + 1))
    return res["dist"]


def distances_to_csv(dist: np.ndarray, record: Sequence[int] | None = None) -> str:
    """Raw per-trial distances: one row per (trial, n)."""
    dist = np.asarray(dist)
    record = list(range(1, dist.shape[1] + 1)) if record is None else list(record)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(("trial", "n", "distance"))
    for i, row in enumerate(dist):
        for n, d in zip(record, row):
            wr.writerow((i, n, repr(float(d))))
    return buf.getvalue()


def estimate_record(cfg: WalkConfig, estimate) -> str:
    """JSON record of an estimate together with the walk configuration that produced it."""
    doc = {"config": cfg.describe(), "estimate": estimate.to_dict()}
    return json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n"


def estimate_drift(cfg: WalkConfig) -> DriftEstimate:
    d = simulate(cfg.measure, cfg.action, cfg.steps, cfg.trials, cfg.seed)["dist"][:, 0] / cfg.steps
    mean, std, hw = _mean_ci(d)
    mean = max(mean, 0.0)
    return DriftEstimate(mean, mean - hw, mean + hw, std, cfg.steps, cfg.trials, cfg.seed)


def drift_profile(cfg: WalkConfig, times: Sequence[int]) -> list[DriftEstimate]:
    """Drift estimates d(o, Z_n o)/n at several n from a single batch of walks."""
    times = sorted({int(t) for t in times})
    res = simulate(cfg.measure, cfg.action, max(times), cfg.trials, cfg.seed, record=times)
    out = []
    for j, n in enumerate(res["record"]):
        mean, std, hw = _mean_ci(res["dist"][:, j] / n)
        out.append(DriftEstimate(mean, mean - hw, mean + hw, std, n, cfg.trials, cfg.seed))
    return out


@dataclass(frozen=True)
class EntropyEstimate:
    entropies: tuple[float, ...]    # H(Z_n), n = 1..n_max
    n_max: int

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(h / (n + 1) for n, h in enumerate(self.entropies))

    @property
    def extrapolated(self) -> float:
        """H(Z_n_max) / n_max, an upper bound for the asymptotic entropy."""
        return self.values[-1]

    @property
    def increment_bound(self) -> float:
        """H(Z_n_max) - H(Z_{n_max - 1}); the increments decrease to h, so this is a tighter upper bound."""
        if self.n_max == 1:
            return self.entropies[0]
        return max(self.entropies[-1] - self.entropies[-2], 0.0)

    def to_dict(self) -> dict:
        return {"entropies": list(self.entropies), "values": list(self.values),
                "extrapolated": self.extrapolated,
                "increment_bound": self.increment_bound, "n_max": self.n_max, "kind": "upper_bound"}


def estimate_entropy(mu: FiniteMeasure, n_max: int = 10, cap: int = 1_000_000) -> EntropyEstimate:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    hs = [mu.entropy()]
    cur = mu
    for n in range(2, n_max + 1):
        try:
            cur = convolve(cur, mu, cap)
        except RuntimeError as exc:
            raise EntropyCapError(f"{exc}; try n_max < {n}") from exc
        hs.append(cur.entropy())
    return EntropyEstimate(tuple(max(h, 0.0) for h in hs), n_max)


def estimate_dimension(h: EntropyEstimate, ell: DriftEstimate) -> float:
    """h / ell, the dimension of the hitting measure."""
    if not ell.mean > 0:
        raise ValueError("drift must be positive")
    dim = h.extrapolated / ell.mean
    err = dim * ell.half_width / ell.mean
    if dim > 1.0 + err:
        warnings.warn(f"dimension {dim:.4f} exceeds 1 beyond its error {err:.2g}: entropy upper bound "
                      "too loose or drift underestimated", RuntimeWarning, stacklevel=2)
    return dim


@dataclass(frozen=True)
class TailEstimate:
    a: float
    n_grid: tuple[int, ...]
    log_probs: tuple[float, ...]
    censored: tuple[bool, ...]
    kappa_hat: float | None
    r_squared: float | None
    tilt: float
    trials: int
    seed: int
    pilot_drift: float
    warning: str | None = None

    @property
    def probs(self) -> tuple[float, ...]:
        return tuple(math.exp(x) for x in self.log_probs)

    def to_dict(self) -> dict:
        return asdict(self)


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    slope, icpt = np.polyfit(x, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - (slope * x + icpt)) ** 2))
    r2 = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return float(slope), r2


def _auto_tilt(mu, action, a, steps, seed, trials=128, iters=18) -> float:
    """Tilt under which the walk's mean rate d(o, Z_n o)/n is about ``a``."""

    def rate(theta):
        return float(np.mean(simulate(mu, action, steps, trials, seed, tilt=theta)["dist"][:, 0])) / steps

    lo, hi = 0.0, 0.25
    while rate(hi) > a:
        lo, hi = hi, hi * 2.0
        if hi > 64.0:
            return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if rate(mid) > a:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def estimate_tail(mu: FiniteMeasure, action: MetricAction, a: float, n_grid: Sequence[int],
                  trials: int = 2000, seed: int = 0, tilt: float | str = "auto") -> TailEstimate:
    """Estimate P(d(o, Z_n o) <= a n) on a grid of n and fit log P ~ -kappa n.

    Probabilities are importance-sampled under an exponentially tilted step
    kernel (``tilt="auto"`` picks the tilt whose typical rate is ``a``);
    ``tilt=0`` gives plain frequencies. Cells with no hit are replaced by the
    1/trials bound and flagged as censored.
    """
    if a < 0:
        raise ValueError("a must be >= 0")
    grid = sorted({int(n) for n in n_grid})
    if not grid or grid[0] < 1:
        raise ValueError("n_grid must contain positive integers")
    nmax = grid[-1]
    pilot = simulate(mu, action, nmax, min(trials, 200), seed + 1)["dist"][:, 0]
    pilot_drift = float(np.mean(pilot)) / nmax
    message = None
    if a >= pilot_drift:
        message = f"rate not below drift; decay not expected (a={a:.4g}, drift~{pilot_drift:.4g})"
        warnings.warn(message, RuntimeWarning, stacklevel=2)
        theta = 0.0
    elif tilt == "auto":
        theta = _auto_tilt(mu, action, a, nmax, seed + 2)
    else:
        theta = float(tilt)
    res = simulate(mu, action, nmax, trials, seed, record=grid, tilt=theta)
    hit = res["dist"] <= a * np.array(grid)[None, :] + 1e-9
    if theta:
        lw = np.where(hit, res["logw"], -np.inf)
        with np.errstate(divide="ignore"):
            logp = logsumexp(lw, axis=0) - math.log(trials)
    else:
        with np.errstate(divide="ignore"):
            logp = np.log(hit.mean(axis=0))
    censored = ~np.isfinite(logp)
    logp = np.where(censored, -math.log(trials), logp)
    kappa = r2 = None
    if np.count_nonzero(~censored) >= 3:
        slope, r2 = _linear_fit(np.array(grid, dtype=float), logp)
        kappa = -slope + 0.0
    return TailEstimate(float(a), tuple(grid), tuple(float(x) for x in logp), tuple(bool(c) for c in censored),
                        kappa, r2, float(theta), trials, seed, pilot_drift, message)


@dataclass(frozen=True)
class DistanceIncreaseEstimate:
    g: Word
    horizon: int
    epsilon: float
    E_hat: float
    trials: int
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g"] = word_to_str(self.g)
        return d


def check_distance_increase(mu: FiniteMeasure, action: MetricAction, g: Word, horizon: int,
                            epsilon: float, trials: int = 200, seed: int = 0) -> DistanceIncreaseEstimate:
    """(1 - epsilon)-quantile of max_n (d(o, g o) - d(o, g Z_n o))^+ over n <= horizon."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    res = simulate(mu, action, horizon, trials, seed, record=range(0, horizon + 1), start=tuple(g))
    dg = action.displacement(tuple(g))
    worst = np.max(np.maximum(dg - res["dist"], 0.0), axis=1)
    e_hat = float(np.quantile(worst, 1.0 - epsilon, method="higher"))
    return DistanceIncreaseEstimate(tuple(g), horizon, float(epsilon), max(e_hat, 0.0), trials, seed)


def hitting_sample(mu: FiniteMeasure, rho: Representation, n: int, trials: int = 200, seed: int = 0) -> np.ndarray:
    """Boundary points (extended reals) where the ray from i through Z_n i ends."""
    res = simulate(mu, HyperbolicAction(rho), n, trials, seed, keep_top=True)
    m = res["top_m"]
    a, b, c, d = m[:, 0], m[:, 1], m[:, 2], m[:, 3]
    # Cayley transform of Z_n i to the disc, then radial projection
    zeta = ((b + c) + 1j * (a - d)) / ((b - c) + 1j * (a + d))
    half = 0.5 * np.angle(zeta)
    s = np.sin(half)
    with np.errstate(divide="ignore"):
        x = np.where(np.abs(s) < 1e-300, np.inf, -np.cos(half) / np.where(s == 0, 1.0, s))
    return x
