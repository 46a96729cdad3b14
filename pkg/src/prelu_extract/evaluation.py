"""Quality certification of an extracted network: alignment, empirical equivalence, error bounds."""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .network import PReluNetwork, permute_layer, scale_neuron
from .oracle import FeedbackMode, OracleBase

Box = Tuple[float, float]


@dataclass
class Alignment:
    network: PReluNetwork
    permutations: List[np.ndarray]
    scales: List[np.ndarray]
    ambiguous: List[Tuple[int, int]] = field(default_factory=list)
    negative: List[Tuple[int, int]] = field(default_factory=list)


@dataclass
class EquivalenceReport:
    domain: Box
    n_samples: int
    seed: int
    r_max: float
    bound: float
    max_param_error: float
    max_slope_error: List[float]
    queries: int = 0
    phase_counts: Dict[str, int] = field(default_factory=dict)
    workflow: Optional[int] = None
    ambiguous: int = 0

    @property
    def epsilon(self) -> float:
        """ε at ξ = 0 is the empirical maximum deviation."""
        return self.r_max

    def to_dict(self) -> dict:
        out = asdict(self)
        out["epsilon"] = self.epsilon
        out["domain"] = list(self.domain)
        return out


def _augmented(net: PReluNetwork, k: int) -> np.ndarray:
    return np.hstack([net.weights[k - 1], net.biases[k - 1][:, None]])


def _match(cos: np.ndarray) -> np.ndarray:
    d = cos.shape[0]
    if d <= 256:
        _, cols = linear_sum_assignment(-cos)
        return cols
    cols = np.full(d, -1)
    taken = np.zeros(d, dtype=bool)
    for i, j in zip(*np.unravel_index(np.argsort(-cos, axis=None), cos.shape)):
        if cols[i] < 0 and not taken[j]:
            cols[i] = j
            taken[j] = True
    return cols


def align(true: PReluNetwork, recovered: PReluNetwork, ambiguity: float = 1e-6) -> Alignment:
    """Permute and rescale the hidden neurons of ``recovered`` onto ``true``.

    Layers are handled in order; neuron j of the true layer is paired with the recovered
    neuron of largest |cosine| between augmented rows [weights, bias], then rescaled by
    a positive factor so the rows coincide in scale. Pairs whose cosine is negative
    cannot be reconciled by an equivalence and are listed in ``negative``.
    """
    if tuple(true.dims) != tuple(recovered.dims):
        raise ValueError("architectures differ: %s vs %s" % (true.dims, recovered.dims))
    net = recovered
    perms, scales, ambiguous, negative = [], [], [], []
    for k in range(1, true.depth + 1):
        t = _augmented(true, k)
        r = _augmented(net, k)
        tn = t / np.linalg.norm(t, axis=1, keepdims=True)
        rn = r / np.linalg.norm(r, axis=1, keepdims=True)
        signed = tn @ rn.T
        cos = np.abs(signed)
        perm = _match(cos)
        for j in range(cos.shape[0]):
            row = np.sort(cos[j])[::-1]
            if row.shape[0] > 1 and row[0] - row[1] <= ambiguity:
                ambiguous.append((k, j))
            if signed[j, perm[j]] < 0:
                negative.append((k, j))
        net = permute_layer(net, k, perm)
        r = _augmented(net, k)
        c = np.abs(np.sum(t * r, axis=1) / np.sum(r * r, axis=1))
        for j, cj in enumerate(c):
            net = scale_neuron(net, k, j, float(cj))
        perms.append(perm)
        scales.append(c)
    return Alignment(net, perms, scales, ambiguous, negative)


def max_parameter_error(true: PReluNetwork, aligned: PReluNetwork) -> float:
    errs = [np.max(np.abs(a - b)) for a, b in zip(true.weights, aligned.weights)]
    errs += [np.max(np.abs(a - b)) for a, b in zip(true.biases, aligned.biases)]
    errs += [np.max(np.abs(a - b)) for a, b in zip(true.slopes, aligned.slopes)]
    return float(max(errs))


def slope_errors(true: PReluNetwork, aligned: PReluNetwork) -> List[float]:
    return [float(np.max(np.abs(a - b))) for a, b in zip(true.slopes, aligned.slopes)]


def sample_domain(d0: int, n: int, seed: int = 0, box: Box = (-1.0, 1.0)) -> np.ndarray:
    """The first n rows are the same for every larger n under one seed."""
    if n < 1:
        raise ValueError("need at least one sample")
    return np.random.default_rng(seed).uniform(box[0], box[1], size=(n, d0))


def _outputs(model, X: np.ndarray) -> np.ndarray:
    if isinstance(model, OracleBase):
        if model.mode is not FeedbackMode.RAW:
            raise ValueError("compare score-feedback victims through their fused network")
        return model.query_batch(X)
    return model.predict(X)


def empirical_equivalence(reference, recovered: PReluNetwork, box: Box = (-1.0, 1.0), n: int = 10_000,
                          seed: int = 0) -> float:
    """max |f(X) - f^(X)| over n uniform samples of the box (ε at ξ = 0)."""
    X = sample_domain(recovered.n_inputs, n, seed, box)
    return float(np.max(np.abs(_outputs(reference, X) - recovered.predict(X))))


def _interval_layer(W, b, lo, hi):
    c, r = (lo + hi) / 2.0, (hi - lo) / 2.0
    mid = W @ c + b
    rad = np.abs(W) @ r
    return mid - rad, mid + rad


def propagate_bounds(true: PReluNetwork, aligned: PReluNetwork, box: Box = (-1.0, 1.0)) -> float:
    """Sound bound on max |f(x) - f^(x)| over the box from the parameter differences.

    True activations are bounded by interval arithmetic; the error e of each layer's
    output is pushed through |A h + b - A^ h^ - b^| <= |A - A^| |h| + |A^| e + |b - b^|
    and |prelu_s(a) - prelu_s^(a^)| <= max(1, s) |a - a^| + |s - s^| |a^|.
    """
    d0 = true.n_inputs
    lo = np.full(d0, float(box[0]))
    hi = np.full(d0, float(box[1]))
    err = np.zeros(d0)
    n = len(true.weights)
    for k in range(n):
        W, b = true.weights[k], true.biases[k]
        Wh, bh = aligned.weights[k], aligned.biases[k]
        mag = np.maximum(np.abs(lo), np.abs(hi))
        plo, phi = _interval_layer(W, b, lo, hi)
        perr = np.abs(W - Wh) @ mag + np.abs(Wh) @ err + np.abs(b - bh)
        if k == n - 1:
            return float(np.max(perr))
        s, sh = true.slopes[k], aligned.slopes[k]
        pmag = np.maximum(np.abs(plo), np.abs(phi)) + perr
        err = np.maximum(1.0, s) * perr + np.abs(s - sh) * pmag
        lo = np.where(plo >= 0, plo, s * plo)
        hi = np.where(phi >= 0, phi, s * phi)
    raise AssertionError("unreachable")


def evaluate(true: PReluNetwork, recovered: PReluNetwork, box: Box = (-1.0, 1.0), n: int = 10_000, seed: int = 0,
             result=None) -> EquivalenceReport:
    """Full report; ``true`` must already be fused when the copy came from score feedback."""
    al = align(true, recovered)
    report = EquivalenceReport(domain=(float(box[0]), float(box[1])), n_samples=n, seed=seed,
                               r_max=empirical_equivalence(true, recovered, box, n, seed),
                               bound=propagate_bounds(true, al.network, box),
                               max_param_error=max_parameter_error(true, al.network),
                               max_slope_error=slope_errors(true, al.network), ambiguous=len(al.ambiguous))
    if result is not None:
        report.queries = result.queries
        report.phase_counts = dict(result.phase_counts)
        report.workflow = result.workflow
    return report
