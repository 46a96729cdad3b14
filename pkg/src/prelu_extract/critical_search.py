"""Critical-point discovery, steering in recovered hidden space, and witness filtering."""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .oracle import FeedbackMode, OracleBase
from .prefix import PrefixModel

logger = logging.getLogger(__name__)

_U = np.finfo(np.float64).eps


class ExpansivenessError(RuntimeError):
    """The recovered prefix cannot steer the input to arbitrary hidden directions."""


class InsufficientWitnesses(RuntimeError):
    def __init__(self, message: str, clusters=None):
        super().__init__(message)
        self.clusters = clusters or []


class StartingPointFailure(RuntimeError):
    pass


class EntrapmentError(RuntimeError):
    """The feedback kept needed critical points or labels out of reach within the search budget."""


@dataclass
class ProbeConfig:
    """Numerical knobs for searching and probing.

    eps: finite-difference stride, relative to the scale of the hidden point.
    depth: maximum number of interval halvings in the segment search.
    linearity_tol: relative tolerance of the affine-piece test.
    noise_floor: floor, relative to the strongest response, below which a second difference counts as zero.
    slope_step: relative offset used to measure one-sided slopes at interval ends.
    value_scale: magnitude of the terms that cancel into a function value; values are
        trusted down to rounding of this size even when they are themselves small.
    """

    eps: float = 1e-5
    depth: int = 60
    linearity_tol: float = 1e-8
    noise_floor: float = 1e-7
    slope_step: float = 1e-4
    dedup_tol: float = 1e-9
    value_scale: float = 1.0

    def __post_init__(self):
        for name in ("eps", "depth", "linearity_tol", "noise_floor", "slope_step", "dedup_tol", "value_scale"):
            if not getattr(self, name) > 0:
                raise ValueError("%s must be strictly positive" % name)


@dataclass
class CriticalWitness:
    x: np.ndarray
    t: float
    endpoints: Tuple[np.ndarray, np.ndarray]
    layer: Optional[int] = None
    z: Optional[np.ndarray] = None
    residual: float = np.nan
    pair: Optional[Tuple[int, int]] = None


ScalarFn = Callable[[np.ndarray], np.ndarray]


_SPLIT_SHIFTS = (0.0, 0.0137, -0.0221, 0.0313)


def _single_kink(g, a, b, ga, gb, ka, kb, tol):
    """Locate the kink of [a, b] if the interval holds exactly one, else None.

    The end pieces meet at t; the function must follow the left piece just left of
    t and the right piece just right of it, both at a wide and at a tight offset.
    """
    t = (gb - ga + ka * a - kb * b) / (ka - kb)
    if not a < t < b:
        return None
    r = r0 = 0.01 * min(t - a, b - t)
    for rnd in range(3):
        if not r > 0:
            break
        gl, gr = g(np.array([t - r, t + r]))
        if np.isnan(gl) or np.isnan(gr):
            return None if rnd == 0 else t
        if rnd == 0 and (abs(gl - (ga + ka * (t - r - a))) > tol or abs(gr - (gb + kb * (t + r - b))) > tol):
            return None
        t_new = t + (gr - gl - (ka + kb) * r) / (ka - kb)
        if not a < t_new < b:
            return None if rnd == 0 else t
        shift = abs(t_new - t)
        t = t_new
        r = min(r, max(1e3 * shift, 1e3 * _U * max(abs(t), b - a)))
    # a close pair of kinks can pass the wide straddle; re-check at the smallest
    # offset where leaving the wrong piece still shows above tol
    rho = min(r0, 16.0 * tol / abs(ka - kb))
    gl, gr = g(np.array([t - rho, t + rho]))
    if np.isnan(gl) or np.isnan(gr):
        return None
    if abs(gl - (ga + ka * (t - rho - a))) > tol or abs(gr - (gb + kb * (t + rho - b))) > tol:
        return None
    return t


def find_critical_on_segment(fn: ScalarFn, x1: np.ndarray, x2: np.ndarray,
                             cfg: Optional[ProbeConfig] = None) -> List[CriticalWitness]:
    """All kinks of ``fn`` restricted to the segment [x1, x2].

    Intervals are halved until each is either certified affine (the affine piece at
    its left end predicts the right end value and vice versa) or holds a single kink,
    recognised by the two end pieces meeting at a point where ``fn`` agrees with both.
    Each kink is then re-located from points straddling it. NaN values (unavailable
    labels) drop the interval concerned.
    """
    cfg = cfg or ProbeConfig()
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    d = x2 - x1

    def g(ts):
        return fn(x1[None, :] + np.asarray(ts)[:, None] * d[None, :])

    eta = cfg.slope_step
    v = g(np.array([0.0, eta, 1.0 - eta, 1.0]))
    if np.any(np.isnan(v)):
        return []
    # values near zero can still carry rounding noise of the function's overall magnitude
    noise = 1e5 * _U * max(abs(v[0]), abs(v[3]), abs(v[3] - v[0]), cfg.value_scale)
    stack = [(0.0, 1.0, v[0], v[3], (v[1] - v[0]) / eta, (v[3] - v[2]) / eta, 0)]
    ts: List[float] = []
    while stack:
        a, b, ga, gb, ka, kb, depth = stack.pop()
        w = b - a
        # relative to the variation over the interval, plus the rounding floor of the values
        tol = (cfg.linearity_tol * max(abs(ka) * w, abs(kb) * w, abs(gb - ga), 1e-300)
               + noise)
        if abs(gb - (ga + ka * w)) <= tol and abs(ga - (gb - kb * w)) <= tol:
            continue
        if ka != kb:
            t = _single_kink(g, a, b, ga, gb, ka, kb, tol)
            if t is not None:
                ts.append(t)
                continue
        if depth >= cfg.depth or w <= 1e3 * _U * b:
            continue
        h = eta * w
        # a kink inside the slope window turns an end slope into a secant; move the split
        for shift in _SPLIT_SHIFTS:
            m = a + (0.5 + shift) * w
            gl, gm, gr = g(np.array([m - h, m, m + h]))
            if np.isnan(gl) or np.isnan(gm) or np.isnan(gr) or abs(gl + gr - 2.0 * gm) <= tol:
                break
        if np.isnan(gl) or np.isnan(gm) or np.isnan(gr):
            continue
        stack.append((m, b, gm, gb, (gr - gm) / h, kb, depth + 1))
        stack.append((a, m, ga, gm, ka, (gm - gl) / h, depth + 1))
    ts.sort()
    out: List[CriticalWitness] = []
    seg_len = float(np.linalg.norm(d))
    for t in ts:
        if out and (t - out[-1].t) * seg_len < cfg.dedup_tol:
            continue
        out.append(CriticalWitness(x=x1 + t * d, t=t, endpoints=(x1, x2)))
    return out


def second_directional_derivative(fn: ScalarFn, x: np.ndarray, h: np.ndarray, eps: float,
                                  f0: Optional[float] = None) -> float:
    """(f(x + eps h) + f(x - eps h) - 2 f(x)) / eps."""
    if not eps > 0:
        raise ValueError("stride must be positive")
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if f0 is None:
        vals = fn(np.stack([x + eps * h, x - eps * h, x]))
        f0 = vals[2]
    else:
        vals = fn(np.stack([x + eps * h, x - eps * h]))
    return float((vals[0] + vals[1] - 2.0 * f0) / eps)


def steering_matrix(prefix: PrefixModel, x: np.ndarray) -> np.ndarray:
    """Matrix P with J P = I, J the local Jacobian of the hidden coordinates at ``x``."""
    jac = prefix.jacobian(x)
    dh, d0 = jac.shape
    if dh > d0:
        raise ExpansivenessError("hidden width %d exceeds input dimension %d; cannot steer" % (dh, d0))
    if prefix.n_decided == 0 and prefix.pending is None:
        return np.eye(d0)
    u, s, vt = np.linalg.svd(jac, full_matrices=False)
    if s[-1] <= 1e-10 * s[0]:
        raise ExpansivenessError("local Jacobian of the recovered prefix has rank below %d" % dh)
    return vt.T @ np.diag(1.0 / s) @ u.T


def steer_hidden(prefix: PrefixModel, x: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Input direction(s) moving the hidden coordinates by ``H`` (vector or columns)."""
    H = np.asarray(H, dtype=np.float64)
    P = steering_matrix(prefix, x)
    dx = P @ H
    jac = prefix.jacobian(x)
    res = np.linalg.norm(jac @ dx - H)
    if res > 1e-8 * max(np.linalg.norm(H), 1e-300):
        raise ExpansivenessError("steering residual %.3g too large" % res)
    return dx


def filter_prior_layers(prefix: PrefixModel, x: np.ndarray, tol: float) -> bool:
    """True iff every recovered preactivation at ``x`` is at least ``tol`` away from zero."""
    return prefix.margin(x) >= tol


# ---------------------------------------------------------------- clustering

def canonical(v: np.ndarray, tiny: float = 1e-9) -> np.ndarray:
    """Unit norm over observed entries, first entry above ``tiny`` made positive."""
    v = np.asarray(v, dtype=np.float64)
    obs = ~np.isnan(v)
    n = np.linalg.norm(v[obs])
    if n == 0:
        return v.copy()
    out = v / n
    big = np.nonzero(obs & (np.abs(np.nan_to_num(out)) > tiny))[0]
    if big.size and out[big[0]] < 0:
        out = -out
    return out


def pairwise_angles(V: np.ndarray, min_overlap: int) -> np.ndarray:
    """Angle between every pair of rows over their commonly observed coordinates.

    The angle ignores sign and scale. Pairs with too little overlap get +inf.
    """
    M = ~np.isnan(V)
    A = np.where(M, V, 0.0)
    Mf = M.astype(np.float64)
    dots = A @ A.T
    sq = A * A
    n_ij = sq @ Mf.T
    denom = np.sqrt(n_ij * n_ij.T)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.abs(dots) / denom
    cos = np.clip(np.nan_to_num(cos, nan=0.0), 0.0, 1.0)
    ang = np.arccos(cos)
    # arccos loses resolution near 1; use the sine form there
    small = cos > 0.999
    if np.any(small):
        ang[small] = np.sqrt(np.maximum(0.0, 1.0 - cos[small] ** 2))
    overlap = Mf @ Mf.T
    ang[overlap < min_overlap] = np.inf
    ang[~(denom > 0)] = np.inf
    return ang


@dataclass
class Cluster:
    representative: np.ndarray
    members: List[int] = field(default_factory=list)


def align_merge(vectors: Sequence[np.ndarray], spread_tol: float = 1e-4) -> Tuple[np.ndarray, List[int]]:
    """Rescale partial vectors onto a common factor and take the componentwise median.

    Returns the merged vector and the indices that were consistent with it.
    """
    vs = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vs:
        raise ValueError("nothing to merge")
    order = sorted(range(len(vs)), key=lambda i: (-int(np.sum(~np.isnan(vs[i]))), i))
    ref = order[0]
    aligned = {ref: canonical(vs[ref])}
    pending = order[1:]
    progress = True
    while pending and progress:
        progress = False
        acc = np.nanmedian(np.stack(list(aligned.values())), axis=0) if len(aligned) > 1 else aligned[ref]
        rest = []
        for i in pending:
            v = vs[i]
            both = ~np.isnan(v) & ~np.isnan(acc)
            scale_ref = np.nanmax(np.abs(acc))
            good = both & (np.abs(np.nan_to_num(acc)) > 1e-6 * scale_ref) & (np.abs(np.nan_to_num(v)) > 0)
            if not np.any(good):
                rest.append(i)
                continue
            ratios = acc[good] / v[good]
            lam = np.median(ratios)
            if np.max(np.abs(ratios - lam)) > spread_tol * abs(lam):
                continue
            aligned[i] = v * lam
            progress = True
        pending = rest
    keys = sorted(aligned)
    if len(keys) > 1:
        with warnings.catch_warnings():
            # coordinates no member observed stay NaN
            warnings.simplefilter("ignore", RuntimeWarning)
            merged = np.nanmedian(np.stack([aligned[k] for k in keys]), axis=0)
    else:
        merged = aligned[keys[0]]
    return canonical(merged), keys


def filter_by_frequency(candidates: Sequence[np.ndarray], n_keep: int, match_tol: float = 1e-4,
                        min_members: int = 2, min_overlap: Optional[int] = None) -> List[Cluster]:
    """Group candidate vectors by direction and keep the ``n_keep`` most populated groups.

    Vectors may contain NaN for unobserved coordinates; two vectors match when they
    agree in direction (within ``match_tol`` radians) on their shared coordinates.
    Raises InsufficientWitnesses when fewer than ``n_keep`` groups reach ``min_members``.
    """
    if len(candidates) == 0:
        raise InsufficientWitnesses("no candidates", [])
    V = np.stack([np.asarray(c, dtype=np.float64) for c in candidates])
    dim = V.shape[1]
    if min_overlap is None:
        min_overlap = min(3, dim)
    ang = pairwise_angles(V, min_overlap)
    n = V.shape[0]
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    ii, jj = np.nonzero(np.triu(ang <= match_tol, 1))
    for i, j in zip(ii, jj):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    ranked = sorted(groups.values(), key=lambda g: (-len(g), g[0]))
    clusters = []
    for g in ranked:
        if len(g) < min_members:
            break
        rep, used = align_merge([V[i] for i in g])
        clusters.append(Cluster(rep, [g[k] for k in used]))
    clusters.sort(key=lambda c: (-len(c.members), c.members[0]))
    if len(clusters) < n_keep:
        raise InsufficientWitnesses("found %d recurring directions, need %d" % (len(clusters), n_keep), clusters)
    return clusters[:n_keep]


# ---------------------------------------------------------------- segment sampling

def random_segment(rng: np.random.Generator, n_inputs: int, radius: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    return radius * rng.standard_normal(n_inputs), radius * rng.standard_normal(n_inputs)


def good_starting_points(oracle: OracleBase, x1: np.ndarray, x2: np.ndarray, max_steps: int = 40):
    """Walk both ends toward their midpoint until their top-m label sets share two labels.

    Each round halves the remaining distance of both points to the fixed midpoint.
    Returns the two points and the sorted shared labels.
    """
    if oracle.mode is not FeedbackMode.TOPM:
        raise ValueError("starting-point walk is only needed for top-m feedback")
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    mid = 0.5 * (x1 + x2)
    for _ in range(max_steps):
        labels, _scores = oracle.query_batch(np.stack([x1, x2]))
        shared = sorted(set(labels[0].tolist()) & set(labels[1].tolist()))
        if len(shared) >= 2:
            return x1, x2, shared
        x1 = x1 + 0.5 * (mid - x1)
        x2 = x2 + 0.5 * (mid - x2)
    raise StartingPointFailure("top-m label sets never shared two labels in %d steps" % max_steps)
