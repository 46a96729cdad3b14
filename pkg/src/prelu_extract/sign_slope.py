"""Deciding the sign of each recovered neuron's unknown factor and its PReLU slope."""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .critical_search import (CriticalWitness, InsufficientWitnesses, ProbeConfig, ScalarFn, filter_by_frequency,
                              filter_prior_layers, steering_matrix)
from .prefix import PrefixModel
from .weight_recovery import ProbeRejected, probe_directions, resolve_projection_signs, solve_neuron

logger = logging.getLogger(__name__)


class IndeterminateSlope(ArithmeticError):
    """Both branch magnitudes agree (slope numerically 1) or vanish; the rule cannot decide."""


class RegionEscape(RuntimeError):
    pass


@dataclass
class AdjacentAffinePair:
    """Local gradients of the output with respect to a layer's preactivations on both sides of one neuron."""

    w_plus: np.ndarray
    w_minus: np.ndarray
    index: int
    radius: float = np.nan
    queries: int = 0

    def mismatch(self) -> float:
        """Largest relative disagreement on the coordinates other than ``index``."""
        keep = np.arange(self.w_plus.shape[0]) != self.index
        if not np.any(keep):
            return 0.0
        a, b = self.w_plus[keep], self.w_minus[keep]
        return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300))


def _side_gradient(fn: ScalarFn, x: np.ndarray, steer: np.ndarray, H: np.ndarray) -> np.ndarray:
    vals = fn(x[None, :] + H @ steer.T)
    if np.any(np.isnan(vals)):
        raise RegionEscape("feedback unavailable")
    D = H[1:] - H[0]
    return np.linalg.solve(D, vals[1:] - vals[0])


def recover_adjacent_affines(fn: ScalarFn, prefix: PrefixModel, x: np.ndarray, index: int,
                             rng: Optional[np.random.Generator] = None, max_halvings: int = 12,
                             escape_tol: float = 1e-6) -> AdjacentAffinePair:
    """Fit the output's local affine map on each side of neuron ``index`` at witness ``x``.

    ``prefix`` must carry the layer under study as its pending layer, so the hidden
    coordinates are that layer's preactivations Y. Each side uses d + 1 points
    Y + H with H_index of the side's sign; 2(d + 1) queries per attempt. The radius starts
    at 1e-4 |Y| (at least 1e-6) and is halved when the two fits disagree away from
    ``index`` or a point would leave the witness's region of the prefix.
    """
    rng = rng if rng is not None else np.random.default_rng()
    x = np.asarray(x, dtype=np.float64)
    y = prefix.hidden(x)[0]
    d = y.shape[0]
    steer = steering_matrix(prefix, x)
    radius = max(1e-4 * float(np.linalg.norm(y)), 1e-6)
    others = np.arange(d) != index
    spent = 0
    for _ in range(max_halvings):
        H = rng.uniform(-1.0, 1.0, size=(2, d + 1, d)) * radius
        H[0, :, index] = np.abs(H[0, :, index]) + 0.1 * radius
        H[1, :, index] = -np.abs(H[1, :, index]) - 0.1 * radius
        # the prefix itself must not change state away from the target neuron
        pts = x[None, :] + H.reshape(-1, d) @ steer.T
        pre = prefix.preactivations(pts)
        base = prefix.preactivations(x[None, :])
        flips = [np.any(np.sign(p) != np.sign(b0), axis=1) for p, b0 in zip(pre[:-1], base[:-1])]
        flips.append(np.any(np.sign(pre[-1][:, others]) != np.sign(base[-1][:, others]), axis=1))
        if np.any(np.any(np.stack(flips), axis=0)):
            radius *= 0.5
            continue
        try:
            wp = _side_gradient(fn, x, steer, H[0])
            wm = _side_gradient(fn, x, steer, H[1])
        except (RegionEscape, np.linalg.LinAlgError):
            spent += 2 * (d + 1)
            radius *= 0.5
            continue
        spent += 2 * (d + 1)
        pair = AdjacentAffinePair(wp, wm, index, radius, spent)
        if pair.mismatch() <= escape_tol:
            return pair
        radius *= 0.5
    raise RegionEscape("could not stay inside the two regions adjacent to the witness")


def _decide(big_side_first: float, other: float, tol: float):
    p, m = abs(big_side_first), abs(other)
    top = max(p, m)
    if not top > 0 or min(p, m) == 0:
        raise IndeterminateSlope("a branch magnitude vanished")
    if abs(p - m) <= tol * top:
        raise IndeterminateSlope("branch magnitudes agree within %.1g" % tol)
    return (1 if p > m else -1), min(p, m) / top


def decide_sign_slope_independent(pair: AdjacentAffinePair, tol: float = 1e-9):
    """Sign +1 iff the positive-side coefficient is larger in magnitude; slope = smaller / larger."""
    return _decide(pair.w_plus[pair.index], pair.w_minus[pair.index], tol)


def decide_sign_slope_joint(vector: np.ndarray, j: int, tol: float = 1e-9):
    """Rule on the twin pair (w_j, w_{j+d}) of an extended vector.

    Returns (sign, slope, compressed weight); the compressed weight is the larger member
    of the pair as it stands, before any sign flip of the neuron it comes from.
    """
    vector = np.asarray(vector, dtype=np.float64)
    d = vector.shape[0] // 2
    wj, wt = vector[j], vector[j + d]
    if np.isnan(wj) or np.isnan(wt):
        raise IndeterminateSlope("pair member missing")
    sign, slope = _decide(wj, wt, tol)
    return sign, slope, float(wj if sign > 0 else wt)


# ---------------------------------------------------------------- extended vectors

@dataclass
class ExtendedWeightVector:
    """A next-layer neuron over the split coordinates [max(z, 0), min(z, 0)] plus its bias."""

    values: np.ndarray  # 2d entries, NaN where never observed
    bias: float
    filled: np.ndarray = None  # entries inferred from another neuron's slope ratio
    members: List[int] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not np.any(np.isnan(self.values))

    @property
    def augmented(self) -> np.ndarray:
        return np.append(self.values, self.bias)


def partial_extended(prefix: PrefixModel, x: np.ndarray, weights: np.ndarray, bias: float) -> np.ndarray:
    """Place a probe result (coefficients on the hidden coordinates) into split slots."""
    z = prefix.hidden(x)[0]
    d = z.shape[0]
    out = np.full(2 * d + 1, np.nan)
    out[prefix.slots(z)] = weights
    out[-1] = bias
    return out


def slope_ratios(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Per hidden coordinate j, w_{j+d} / w_j from the neuron where both are largest; NaN if none."""
    V = np.asarray(vectors, dtype=np.float64)
    d = (V.shape[1] - 1) // 2
    out = np.full(d, np.nan)
    for j in range(d):
        a, b = V[:, j], V[:, j + d]
        ok = ~np.isnan(a) & ~np.isnan(b) & (a != 0)
        if np.any(ok):
            k = np.nonzero(ok)[0][np.argmax(np.minimum(np.abs(a[ok]), np.abs(b[ok])))]
            out[j] = b[k] / a[k]
    return out


def fill_by_ratio(vectors: Sequence[np.ndarray]):
    """Complete missing twin entries using the coordinate's slope ratio seen on another neuron.

    The ratio w_{j+d} / w_j depends only on hidden neuron j, not on the consuming neuron.
    Returns the filled vectors and a mask of filled entries.
    """
    V = np.array(vectors, dtype=np.float64)
    d = (V.shape[1] - 1) // 2
    ratios = slope_ratios(V)
    mask = np.zeros_like(V, dtype=bool)
    for j in range(d):
        if np.isnan(ratios[j]):
            continue
        lo = np.isnan(V[:, j + d]) & ~np.isnan(V[:, j])
        hi = np.isnan(V[:, j]) & ~np.isnan(V[:, j + d])
        V[lo, j + d] = V[lo, j] * ratios[j]
        V[hi, j] = V[hi, j + d] / ratios[j]
        mask[lo, j + d] = True
        mask[hi, j] = True
    return V, mask


def recover_extended_vectors(views: Union[ScalarFn, Callable[[CriticalWitness], ScalarFn]], prefix: PrefixModel,
                             witnesses: Sequence[CriticalWitness], n_neurons: int,
                             cfg: Optional[ProbeConfig] = None, rng: Optional[np.random.Generator] = None,
                             margin_tol: float = 1e-8, per_witness: bool = False, layer: int = 0):
    """Next-layer neurons over the split hidden space of ``prefix`` (which has a pending layer).

    Each witness is probed in the hidden space; its coefficients land in the split slots
    selected by the hidden signs at the witness. Partial vectors are grouped by direction
    on their common coordinates, merged, and completed through slope ratios. Returns the
    vectors and the number of witnesses that produced a probe.
    """
    if not prefix.split:
        raise ValueError("extended vectors need a pending (split) layer")
    rng = rng if rng is not None else np.random.default_rng()
    partials = []
    for w in witnesses:
        if not filter_prior_layers(prefix, w.x, margin_tol):
            continue
        fn = views(w) if per_witness else views
        try:
            probes = probe_directions(fn, prefix, w.x, cfg, rng)
            neuron = solve_neuron(probes, resolve_projection_signs(probes), layer)
        except ProbeRejected as err:
            logger.debug("probe rejected: %s", err)
            continue
        partials.append(partial_extended(prefix, w.x, neuron.weights, neuron.bias))
    if not partials:
        raise InsufficientWitnesses("no witness survived probing", [])
    clusters = filter_by_frequency(partials, n_neurons)
    merged = [c.representative for c in clusters]
    filled, mask = fill_by_ratio(merged)
    out = []
    for c, v, m in zip(clusters, filled, mask):
        out.append(ExtendedWeightVector(values=v[:-1], bias=float(v[-1]), filled=m[:-1], members=c.members))
    return out, len(partials)
