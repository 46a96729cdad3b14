"""Precision refinement of a recovered hyperplane from fresh, exactly located critical points.

Candidate roots of the current estimate are found on the attacker side along random
segments, each is confirmed by a short kink search through the oracle, and the
hyperplane is re-fit as the null vector of the stacked [features, 1] rows.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .critical_search import ProbeConfig, ScalarFn, find_critical_on_segment
from .prefix import PrefixModel
from .weight_recovery import select_rows

logger = logging.getLogger(__name__)

ViewAt = Callable[[np.ndarray], Optional[ScalarFn]]


@dataclass
class NeuronRefinement:
    pre_residual: float
    post_residual: float
    witnesses: int
    queries: int
    failed: bool
    rounds: int


@dataclass
class RefinementReport:
    entries: List[NeuronRefinement] = field(default_factory=list)

    @property
    def failures(self) -> int:
        return sum(e.failed for e in self.entries)

    @property
    def queries(self) -> int:
        return sum(e.queries for e in self.entries)


def _row_features(prefix: PrefixModel, X: np.ndarray) -> np.ndarray:
    return np.hstack([prefix.features(prefix.hidden(X)), np.ones((X.shape[0], 1))])


def residuals(aug: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Distance-like misfit of rows F (with trailing 1) to the hyperplane ``aug``."""
    w = np.nan_to_num(aug)
    return np.abs(F @ w) / (np.linalg.norm(w[:-1]) * np.linalg.norm(F, axis=1))


def predicted_roots(prefix: PrefixModel, aug: np.ndarray, rng: np.random.Generator, n_segments: int,
                    radius: float, grid: int = 256, iters: int = 64):
    """Attacker-side roots of the estimated preactivation along random input segments."""
    d0 = prefix.n_inputs
    x1 = radius * rng.standard_normal((n_segments, d0))
    x2 = radius * rng.standard_normal((n_segments, d0))
    ts = np.linspace(0.0, 1.0, grid)
    w = np.nan_to_num(aug)

    def p(X):
        return _row_features(prefix, X) @ w

    vals = p((x1[:, None, :] + ts[None, :, None] * (x2 - x1)[:, None, :]).reshape(-1, d0)).reshape(n_segments, grid)
    seg, k = np.nonzero(np.sign(vals[:, :-1]) * np.sign(vals[:, 1:]) < 0)
    lo, hi = ts[k].copy(), ts[k + 1].copy()
    plo = vals[seg, k]
    a, b = x1[seg], x2[seg]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pm = p(a + mid[:, None] * (b - a))
        left = np.sign(pm) == np.sign(plo)
        lo = np.where(left, mid, lo)
        plo = np.where(left, pm, plo)
        hi = np.where(left, hi, mid)
    t = 0.5 * (lo + hi)
    return a, b, t


def _null_vector(F: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Smallest right singular vector over observed columns, scaled to agree with ``prior``."""
    seen = np.any(F != 0, axis=0)
    sub = F[:, seen]
    _, s, vt = np.linalg.svd(sub, full_matrices=False)
    v = vt[-1]
    ref = np.nan_to_num(prior)[seen]
    lam = float(v @ ref) / float(v @ v)
    out = np.array(prior, dtype=np.float64)
    out[seen] = lam * v
    return out


def fit_hyperplane(F: np.ndarray, prior: np.ndarray, trim: float = 10.0) -> np.ndarray:
    """Null-vector fit, then one refit without rows whose misfit exceeds ``trim`` times the median."""
    v = _null_vector(F, prior)
    r = residuals(v, F)
    keep = r <= trim * np.median(r) + 1e-300
    if np.sum(keep) >= np.sum(np.any(F != 0, axis=0)) and not np.all(keep):
        v = _null_vector(F[keep], prior)
    return v


def refine_neuron(view_at: ViewAt, prefix: PrefixModel, aug: np.ndarray, rng: np.random.Generator,
                  rounds: int = 3, cfg: Optional[ProbeConfig] = None, radius: float = 1.0,
                  overdetermination: float = 2.0, stop: float = 1e-12,
                  count=None) -> Tuple[np.ndarray, NeuronRefinement]:
    """Re-fit the hyperplane ``aug`` (weights over ``prefix`` features, then bias).

    ``view_at(x)`` returns the scalar query function to use near input x, or None when
    the feedback there is unusable. NaN entries of ``aug`` (never observed) are guessed
    as zero for root prediction and kept if the fresh witnesses do not determine them.
    The best iterate is kept, so the stored residual never increases. ``count`` reads the
    oracle's query counter for the report.
    """
    cfg = cfg or ProbeConfig()
    aug = np.asarray(aug, dtype=np.float64)
    width = aug.shape[0]
    need = int(np.ceil(overdetermination * width))
    best = aug.copy()
    best_res = np.inf
    first_res = np.nan
    used = 0
    q0 = count() if count else 0
    failed = False
    done = 0
    half = 1e-6
    for rnd in range(rounds):
        done = rnd + 1
        a, b, t = predicted_roots(prefix, best, rng, max(4 * need, 64), radius)
        if t.shape[0] == 0:
            failed = True
            break
        roots = a + t[:, None] * (b - a)
        pick = select_rows(_row_features(prefix, roots), min(need, t.shape[0]))
        found = []
        for i in pick:
            fn = view_at(roots[i])
            if fn is None:
                continue
            L = max(float(np.linalg.norm(b[i] - a[i])), 1e-300)
            for widen in (1.0, 1e2, 1e4):
                h = half * widen / L
                lo, hi = max(t[i] - h, 0.0), min(t[i] + h, 1.0)
                xa, xb = a[i] + lo * (b[i] - a[i]), a[i] + hi * (b[i] - a[i])
                ws = find_critical_on_segment(fn, xa, xb, cfg)
                if ws:
                    k = int(np.argmin([abs(lo + w.t * (hi - lo) - t[i]) for w in ws]))
                    found.append(ws[k].x)
                    break
        used += len(found)
        if found:
            F = _row_features(prefix, np.array(found))
        if not found or len(found) < max(4, width // 2):
            failed = True
            continue
        failed = False
        old = float(np.median(residuals(best, F)))
        if np.isnan(first_res):
            first_res = old
        cand = fit_hyperplane(F, best)
        new = float(np.median(residuals(cand, F)))
        if new < min(old, best_res):
            best, best_res = cand, new
        else:
            best_res = min(best_res, old)
        half = max(1e-6, 1e3 * best_res)
        if best_res < stop:
            break
    entry = NeuronRefinement(pre_residual=first_res, post_residual=best_res, witnesses=used,
                             queries=(count() - q0) if count else 0, failed=failed, rounds=done)
    return best, entry
