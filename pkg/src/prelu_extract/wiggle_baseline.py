"""Baseline (sketch) neuron-wiggle sign recovery, and the joint rule run in the same setting.

Both methods assume every layer before the target is known exactly and the target
layer's rows are known up to an unknown sign; the victim supplies those truths.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .critical_search import ProbeConfig, steer_hidden
from .network import PReluNetwork
from .oracle import OracleBase
from .prefix import PrefixModel
from .refinement import predicted_roots
from .scores_adapter import ScalarView
from .sign_slope import IndeterminateSlope, decide_sign_slope_joint, recover_extended_vectors
from .critical_search import CriticalWitness
from .weight_recovery import recover_last_layer


@dataclass
class TruePrefixContext:
    """Layers before ``layer`` exact; the rows of ``layer`` flipped by hidden signs ``flips``."""

    net: PReluNetwork
    layer: int
    flips: np.ndarray

    @classmethod
    def random(cls, net: PReluNetwork, layer: int, rng: np.random.Generator) -> "TruePrefixContext":
        return cls(net, layer, rng.choice([-1, 1], size=net.dims[layer]))

    @property
    def prefix(self) -> PrefixModel:
        """Exact layers strictly before the target layer."""
        n = self.net
        return PrefixModel(n.n_inputs, [(n.weights[k], n.biases[k], n.slopes[k]) for k in range(self.layer - 1)])

    def rows(self) -> np.ndarray:
        """Target-layer augmented rows as an attacker would hold them: unit weights, unknown sign."""
        k = self.layer - 1
        aug = np.hstack([self.net.weights[k], self.net.biases[k][:, None]])
        aug = aug / np.linalg.norm(self.net.weights[k], axis=1, keepdims=True)
        return self.flips[:, None] * aug

    def witnesses(self, j: int, count: int, rng: np.random.Generator, radius: float = 1.0) -> np.ndarray:
        """Critical points of target neuron ``j`` located on the attacker side from the known rows."""
        prefix = self.prefix
        row = self.rows()[j]
        out: List[np.ndarray] = []
        while len(out) < count:
            a, b, t = predicted_roots(prefix, row, rng, max(count, 16), radius)
            pts = a + t[:, None] * (b - a)
            ok = np.ones(pts.shape[0], dtype=bool)
            for pre in prefix.preactivations(pts):
                ok &= np.min(np.abs(pre), axis=1) > 1e-8
            out.extend(pts[ok])
        return np.array(out[:count])


@dataclass
class WiggleTally:
    plus: int
    minus: int
    sign: int
    correct: Optional[bool] = None

    @property
    def votes(self) -> int:
        return self.plus + self.minus


def wiggle_sign(oracle: OracleBase, ctx: TruePrefixContext, j: int, count: int = 200,
                rng: Optional[np.random.Generator] = None, step: float = 1e-3) -> WiggleTally:
    """Majority vote over ``count`` witnesses of neuron ``j`` of the target layer.

    At each witness the hidden input of the target layer moves by ``step`` along the
    neuron's row (the unit perturbation maximising its response; every other neuron
    moves too). The side whose output change is larger in magnitude is voted the
    active side. 3 queries per witness.
    """
    rng = rng if rng is not None else np.random.default_rng()
    fn = ScalarView(oracle)
    prefix = ctx.prefix
    row = ctx.rows()[j, :-1]
    u = row / np.linalg.norm(row)
    X = ctx.witnesses(j, count, rng)
    plus = 0
    for x in X:
        dx = steer_hidden(prefix, x, step * u) if prefix.n_decided else step * u
        f0, fp, fm = fn(np.stack([x, x + dx, x - dx]))
        plus += abs(fp - f0) > abs(fm - f0)
    minus = count - plus
    sign = 1 if plus > minus else -1
    return WiggleTally(plus, minus, sign, bool(sign == ctx.flips[j]))


@dataclass
class SignComparison:
    layer: int
    wiggle: List[WiggleTally]
    joint: np.ndarray
    truth: np.ndarray
    queries: dict = field(default_factory=dict)

    @property
    def wiggle_errors(self) -> int:
        return sum(not t.correct for t in self.wiggle)

    @property
    def joint_errors(self) -> int:
        return int(np.sum(self.joint != self.truth))


def _joint_from_rows(V: np.ndarray, strength_rows: np.ndarray) -> np.ndarray:
    d = V.shape[1] // 2
    signs = np.zeros(d, dtype=np.int64)
    for j in range(d):
        strength = np.nan_to_num(np.minimum(np.abs(V[:, j]), np.abs(V[:, j + d])), nan=-1.0)
        for k in np.argsort(-strength, kind="stable")[:3]:
            try:
                signs[j] = decide_sign_slope_joint(V[k], j)[0]
                break
            except IndeterminateSlope:
                continue
    return signs


def joint_signs(oracle: OracleBase, ctx: TruePrefixContext, rng: np.random.Generator,
                per_neuron: int = 10, cfg: Optional[ProbeConfig] = None) -> np.ndarray:
    """Signs of the target layer from the next layer's weights over the split target layer.

    When the next layer is the output, one split regression suffices; otherwise its
    neurons are probed at witnesses located from the true next-layer rows.
    """
    net = ctx.net
    base = ctx.prefix
    rows = ctx.rows()
    pending = base.with_pending(rows[:, :-1], rows[:, -1])
    if ctx.layer == net.depth:
        fit = recover_last_layer(oracle, pending, rng)
        return _joint_from_rows(fit.weights, None)
    after = TruePrefixContext(net, ctx.layer + 1, np.ones(net.dims[ctx.layer + 1], dtype=np.int64))
    wits = []
    for k in range(net.dims[ctx.layer + 1]):
        for x in after.witnesses(k, per_neuron, rng):
            wits.append(CriticalWitness(x=x, t=np.nan, endpoints=(x, x)))
    vecs, _ = recover_extended_vectors(ScalarView(oracle), pending, wits, net.dims[ctx.layer + 1], cfg, rng)
    return _joint_from_rows(np.array([v.values for v in vecs]), None)


def compare_signs(oracle: OracleBase, net: PReluNetwork, layer: int, seed: int = 0, witnesses: int = 200,
                  per_neuron: int = 10) -> SignComparison:
    """Run both methods on the same flipped rows of ``layer``."""
    rng = np.random.default_rng(seed)
    ctx = TruePrefixContext.random(net, layer, rng)
    with oracle.phase("wiggle/layer%d" % layer):
        tallies = [wiggle_sign(oracle, ctx, j, witnesses, rng) for j in range(net.dims[layer])]
    with oracle.phase("joint/layer%d" % layer):
        joint = joint_signs(oracle, ctx, rng, per_neuron)
    return SignComparison(layer, tallies, joint, ctx.flips.copy(), oracle.phase_counts)
