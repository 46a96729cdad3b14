"""Differential recovery of hidden-neuron hyperplanes and least-squares recovery of the output layer."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import qr

from .critical_search import (EntrapmentError, ExpansivenessError, ProbeConfig, ScalarFn, canonical,
                              steering_matrix)
from .oracle import FeedbackMode, OracleBase
from .prefix import PrefixModel
from .scores_adapter import difference_rows

logger = logging.getLogger(__name__)

_U = np.finfo(np.float64).eps


class ProbeRejected(RuntimeError):
    """The probe set does not describe a single clean kink (affine point, nearby second kink, lost labels)."""


@dataclass
class DerivativeProbeSet:
    x: np.ndarray
    z: np.ndarray
    directions: np.ndarray  # orthonormal rows, pivot first
    deltas: np.ndarray
    pair_deltas: np.ndarray  # entry 0 unused
    eps: float
    f0: float
    floor: float
    queries: int
    noise: float = 0.0  # rounding noise of one second difference


@dataclass
class RecoveredNeuron:
    """A hidden neuron known up to a factor: unit weight row, bias, and what was decided about it."""

    layer: int
    weights: np.ndarray
    bias: float
    sign: Optional[int] = None
    slope: Optional[float] = None
    witnesses: List[np.ndarray] = field(default_factory=list)
    residual: float = np.nan
    refined: bool = False
    refinement_failed: bool = False

    @property
    def augmented(self) -> np.ndarray:
        return np.append(self.weights, self.bias)


def expansiveness_guard(dims: Sequence[int], workflow: int = 2) -> None:
    """Refuse architectures the attack cannot steer through, before any query is spent.

    Every hidden layer i >= 2 needs d_{i-1} <= min(d_0..d_{i-2}). Workflow 1 also samples
    in each hidden layer's own preactivation space, so it needs d_i <= min(d_0..d_{i-1})
    for every hidden layer including the last one.
    """
    dims = [int(d) for d in dims]
    n = len(dims) - 2
    last = n if workflow == 1 else n - 1
    for i in range(1, last + 1):
        if dims[i] > min(dims[:i]):
            err = ExpansivenessError("layer %d has width %d but an earlier layer has only %d neurons"
                                     % (i, dims[i], min(dims[:i])))
            err.layer = i
            raise err


def random_orthonormal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * np.sign(np.diag(r))).T


def _safe_stride(prefix: PrefixModel, x: np.ndarray, steer: np.ndarray, eps: float, max_halvings: int) -> float:
    """Halve ``eps`` until no recovered preactivation can change sign within 2 eps of ``x``."""
    limits = []
    for y, jac in prefix.preactivation_jacobians(x):
        reach = np.linalg.norm(jac @ steer, axis=1)
        limits.append((np.abs(y), reach))
    for _ in range(max_halvings):
        if all(np.all(2.0 * eps * reach < y) for y, reach in limits):
            return eps
        eps *= 0.5
    raise ProbeRejected("witness too close to a recovered hyperplane for any usable stride")


def probe_directions(fn: ScalarFn, prefix: PrefixModel, x: np.ndarray, cfg: Optional[ProbeConfig] = None,
                     rng: Optional[np.random.Generator] = None, max_halvings: int = 30,
                     directions: Optional[np.ndarray] = None) -> DerivativeProbeSet:
    """Second differences of ``fn`` at ``x`` along an orthonormal basis of the hidden space.

    Spends exactly 4d - 1 queries (d the hidden width): f(Z), f(Z +- eps H_j) for every j,
    then f(Z +- eps (H_1 + H_j)) with H_1 the direction of largest response. ``directions``
    (orthonormal rows) replaces the random basis.
    """
    cfg = cfg or ProbeConfig()
    rng = rng if rng is not None else np.random.default_rng()
    x = np.asarray(x, dtype=np.float64)
    z = prefix.hidden(x)[0]
    d = z.shape[0]
    P = steering_matrix(prefix, x)
    H = random_orthonormal(rng, d) if directions is None else np.asarray(directions, dtype=np.float64)
    steer = P @ H.T  # column j moves the hidden point by H_j
    eps = cfg.eps * max(1.0, float(np.linalg.norm(z)))
    eps = _safe_stride(prefix, x, steer, eps, max_halvings)
    if not eps > 1e-12 * max(1.0, float(np.linalg.norm(z))):
        raise ProbeRejected("stride collapsed")

    step = eps * steer.T
    first = fn(np.vstack([x[None, :], x + step, x - step]))
    if np.any(np.isnan(first)):
        raise ProbeRejected("feedback unavailable near the witness")
    f0 = float(first[0])
    deltas = (first[1:d + 1] + first[d + 1:] - 2.0 * f0) / eps
    pivot = int(np.argmax(np.abs(deltas)))
    order = [pivot] + [j for j in range(d) if j != pivot]
    H, step, deltas = H[order], step[order], deltas[order]

    pair_deltas = np.full(d, np.nan)
    if d > 1:
        pstep = step[0][None, :] + step[1:]
        second = fn(np.vstack([x + pstep, x - pstep]))
        if np.any(np.isnan(second)):
            raise ProbeRejected("feedback unavailable near the witness")
        pair_deltas[1:] = (second[:d - 1] + second[d - 1:] - 2.0 * f0) / eps
    noise = 64.0 * _U * max(abs(f0), cfg.value_scale) / eps
    floor = max(cfg.noise_floor * abs(deltas[0]), noise)
    return DerivativeProbeSet(x=x, z=z, directions=H, deltas=deltas, pair_deltas=pair_deltas, eps=eps, f0=f0,
                              floor=floor, queries=4 * d - 1, noise=noise)


def resolve_projection_signs(probes: DerivativeProbeSet) -> np.ndarray:
    """Sign of each projection A.H_j relative to A.H_1 (taken as positive)."""
    dl = probes.deltas
    d1 = dl[0]
    if not abs(d1) > 1e3 * probes.noise:
        raise ProbeRejected("no second-difference response above the noise floor")
    signs = np.ones(dl.shape[0], dtype=np.int64)
    for j in range(1, dl.shape[0]):
        if abs(dl[j]) <= probes.floor:
            continue
        both = abs(probes.pair_deltas[j])
        if abs(both - abs(d1 + dl[j])) >= abs(both - abs(d1 - dl[j])):
            signs[j] = -1
    return signs


def consistency_residual(probes: DerivativeProbeSet, signs: np.ndarray) -> float:
    """How far the pair responses are from the single-kink prediction, relative to the pivot.

    Deviations within a few times the rounding noise do not count.
    """
    dl = probes.deltas
    pred = np.abs(dl[0] + signs[1:] * dl[1:])
    if pred.size == 0:
        return 0.0
    dev = np.abs(np.abs(probes.pair_deltas[1:]) - pred) - 4.0 * probes.noise
    return float(max(np.max(dev), 0.0) / abs(dl[0]))


def solve_neuron(probes: DerivativeProbeSet, signs: np.ndarray, layer: int = 0,
                 tol: float = 1e-6) -> RecoveredNeuron:
    """Weight row with A.H_j = sign_j |delta_j| and bias -A.Z, normalized to unit norm."""
    res = consistency_residual(probes, signs)
    if res > tol:
        raise ProbeRejected("pair responses inconsistent with one kink (residual %.3g)" % res)
    alpha = signs * np.abs(probes.deltas)
    alpha[np.abs(probes.deltas) <= probes.floor] = 0.0
    a = probes.directions.T @ alpha
    b = -float(a @ probes.z)
    aug = canonical(np.append(a, b) / np.linalg.norm(a))
    return RecoveredNeuron(layer=layer, weights=aug[:-1] / np.linalg.norm(aug[:-1]),
                           bias=float(aug[-1] / np.linalg.norm(aug[:-1])), witnesses=[probes.x], residual=res)


def probe_witness(fn: ScalarFn, prefix: PrefixModel, x: np.ndarray, cfg: Optional[ProbeConfig] = None,
                  rng: Optional[np.random.Generator] = None, layer: int = 0, retries: int = 1):
    """Probe, resolve and solve at one witness; one fresh direction set on rejection, else None."""
    for _ in range(retries + 1):
        try:
            probes = probe_directions(fn, prefix, x, cfg, rng)
            return solve_neuron(probes, resolve_projection_signs(probes), layer)
        except ProbeRejected as err:
            logger.debug("probe rejected: %s", err)
    return None


# ---------------------------------------------------------------- output layer

@dataclass
class LastLayerFit:
    weights: np.ndarray
    biases: np.ndarray
    residual: float
    n_samples: int
    inputs: Optional[np.ndarray] = None
    equations: Optional[tuple] = None


def push_coordinate(prefix: PrefixModel, x: np.ndarray, j: int, target: float, iters: int = 8) -> np.ndarray:
    """Move ``x`` so hidden coordinate j reaches ``target`` (Newton steps on a piecewise-linear map)."""
    x = np.asarray(x, dtype=np.float64).copy()
    for _ in range(iters):
        h = prefix.hidden(x)[0][j]
        if abs(h - target) <= 1e-9 * max(1.0, abs(target)):
            break
        g = prefix.jacobian(x)[j]
        nrm = float(g @ g)
        if nrm == 0:
            break
        x = x + (target - h) * g / nrm
    return x


def design_candidates(prefix: PrefixModel, rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    """Attacker-side candidate inputs whose hidden features take both signs in every coordinate."""
    radii = radius * np.array([0.5, 1.0, 2.0, 4.0])
    X = rng.standard_normal((n, prefix.n_inputs)) * radii[rng.integers(0, 4, size=n)][:, None]
    if not prefix.split:
        return X
    Z = prefix.hidden(X)
    extra = []
    for j in range(Z.shape[1]):
        for sgn in (1.0, -1.0):
            have = np.sum(sgn * Z[:, j] > 0)
            need = max(0, 4 - int(have))
            for k in range(need):
                x0 = X[rng.integers(0, n)]
                scale = max(float(np.median(np.abs(Z[:, j]))), 1e-3)
                extra.append(push_coordinate(prefix, x0, j, sgn * scale * (1 + k)))
    if extra:
        X = np.vstack([X, np.array(extra)])
    return X


def select_rows(F: np.ndarray, k: int) -> np.ndarray:
    """Indices of ``k`` rows of F that are as well conditioned as possible (pivoted QR)."""
    _, _, piv = qr(F.T, mode="economic", pivoting=True)
    return np.sort(piv[:k])


def _assemble(F: np.ndarray, rows: np.ndarray, a: np.ndarray, b: np.ndarray, v: np.ndarray, blocks: List[int]):
    """Linear system for stacked output rows; ``blocks`` lists the outputs that are unknown."""
    width = F.shape[1]
    pos = {o: k for k, o in enumerate(blocks)}
    M = np.zeros((rows.shape[0], width * len(blocks)))
    for e in range(rows.shape[0]):
        fr = F[rows[e]]
        if a[e] in pos:
            k = pos[a[e]]
            M[e, k * width:(k + 1) * width] += fr
        if b[e] >= 0 and b[e] in pos:
            k = pos[b[e]]
            M[e, k * width:(k + 1) * width] -= fr
    return M, v


def _fit(M: np.ndarray, v: np.ndarray):
    sol, _, rank, _ = np.linalg.lstsq(M, v, rcond=None)
    return sol, rank


def recover_last_layer(oracle: OracleBase, prefix: PrefixModel, rng: np.random.Generator, pivot: int = 0,
                       radius: float = 1.0, n_holdout: int = 10, max_rounds: int = 8,
                       reuse: Optional[LastLayerFit] = None) -> LastLayerFit:
    """Least-squares output layer over the prefix features.

    For RAW and SIGMOID feedback every query fixes every unknown row. Score feedback only
    fixes differences of rows; the pivot row is pinned to zero, giving the fused network.
    Under top-m feedback rounds of fresh samples are added until every row is determined,
    else EntrapmentError. ``reuse`` refits the inputs and answers of an earlier fit at no
    query cost.
    """
    mode = oracle.mode
    n_out = 1 if mode is FeedbackMode.SIGMOID else oracle.n_outputs
    width = prefix.feature_dim + 1
    blocks = list(range(n_out)) if mode in (FeedbackMode.RAW, FeedbackMode.SIGMOID) else \
        [j for j in range(n_out) if j != pivot]
    n_unknown = width * len(blocks)

    def feats(Xs):
        return np.hstack([prefix.features(prefix.hidden(Xs)), np.ones((Xs.shape[0], 1))])

    if reuse is None:
        cand = design_candidates(prefix, rng, max(40 * width, 2000), radius)
        Fc = feats(cand)
        first = select_rows(Fc, width)
        rest = np.setdiff1d(np.arange(cand.shape[0]), first)
        take = rng.choice(rest, size=min(rest.size, n_holdout + (0 if mode is FeedbackMode.RAW else width)),
                          replace=False)
        X = cand[np.concatenate([first, take])]
        data = difference_rows(oracle, X, pivot)
        for _ in range(max_rounds):
            M, v = _assemble(feats(X), *data, blocks)
            if M.shape[0] >= n_unknown + n_holdout and _fit(M, v)[1] == n_unknown:
                break
            more = design_candidates(prefix, rng, max(10 * width, 500), radius)
            Xn = more[select_rows(feats(more), min(width, more.shape[0]))]
            dn = difference_rows(oracle, Xn, pivot)
            data = (np.concatenate([data[0], dn[0] + X.shape[0]]), *(np.concatenate([p, q])
                                                                     for p, q in zip(data[1:], dn[1:])))
            X = np.vstack([X, Xn])
        else:
            M, v = _assemble(feats(X), *data, blocks)
            if _fit(M, v)[1] < n_unknown:
                raise EntrapmentError("output layer not determined: the feedback never exposed some labels")
    else:
        X, data = reuse.inputs, reuse.equations
    F = feats(X)
    M, v = _assemble(F, *data, blocks)
    sol, rank = _fit(M, v)
    if rank < n_unknown:
        raise EntrapmentError("output layer rank %d < %d unknowns" % (rank, n_unknown))
    fitted = M @ sol
    residual = float(np.max(np.abs(fitted - v)) / max(1.0, float(np.max(np.abs(v)))))
    W = np.zeros((n_out, width))
    for k, o in enumerate(blocks):
        W[o] = sol[k * width:(k + 1) * width]
    return LastLayerFit(weights=W[:, :-1], biases=W[:, -1], residual=residual, n_samples=X.shape[0],
                        inputs=X, equations=data)
