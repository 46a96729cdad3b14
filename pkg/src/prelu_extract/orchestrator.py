"""End-to-end extraction: layer-by-layer scheduling of the two workflows, budgets and failures."""

import contextlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .critical_search import (CriticalWitness, EntrapmentError, ExpansivenessError, InsufficientWitnesses,
                              ProbeConfig, StartingPointFailure, filter_by_frequency, filter_prior_layers,
                              find_critical_on_segment, good_starting_points, random_segment)
from .network import PReluNetwork
from .oracle import BudgetExhausted, FeedbackMode, OracleBase
from .prefix import PrefixModel
from .refinement import RefinementReport, refine_neuron
from .scores_adapter import LabelUnavailable, ScalarView
from .sign_slope import (IndeterminateSlope, RegionEscape, decide_sign_slope_independent, decide_sign_slope_joint,
                         fill_by_ratio, partial_extended, recover_adjacent_affines)
from .weight_recovery import (LastLayerFit, RecoveredNeuron, expansiveness_guard, probe_witness,
                              recover_last_layer)

logger = logging.getLogger(__name__)


class ExtractionError(RuntimeError):
    """A phase of the attack failed; ``kind`` names the failure, ``partial`` keeps what was recovered."""

    def __init__(self, kind: str, phase: str, message: str, partial=None):
        super().__init__("%s in %s: %s" % (kind, phase, message))
        self.kind = kind
        self.phase = phase
        self.partial = partial


@dataclass
class AttackConfig:
    """Knobs of one extraction run.

    budget: witnesses collected per layer, as a multiple of d log2 d (soft cap; more are
    gathered in extension rounds while neurons are still missing).
    phase_limits: optional query caps keyed by phase-name prefix (e.g. "layer1").
    """

    workflow: int = 2
    budget: float = 3.0
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    refine_rounds: int = 3
    radius: float = 1.0
    seed: int = 0
    pivot: int = 0
    max_queries: Optional[int] = None
    phase_limits: Dict[str, int] = field(default_factory=dict)
    extension_rounds: int = 4
    margin_tol: float = 1e-8
    sign_retries: int = 3

    def __post_init__(self):
        if self.workflow not in (1, 2):
            raise ValueError("workflow must be 1 or 2")
        if not self.budget > 0 or not self.radius > 0:
            raise ValueError("budget and radius must be positive")
        if self.refine_rounds < 0 or self.extension_rounds < 0:
            raise ValueError("round counts must be non-negative")
        if self.max_queries is not None and self.max_queries <= 0:
            raise ValueError("max_queries must be positive")
        if any(v <= 0 for v in self.phase_limits.values()):
            raise ValueError("phase limits must be positive")


@dataclass
class ExtractionResult:
    network: PReluNetwork
    workflow: int
    mode: str
    queries: int
    phase_counts: Dict[str, int]
    neurons: List[List[RecoveredNeuron]]
    refinement: RefinementReport
    last_layer_residual: float
    elapsed: float
    diagnostics: List[str] = field(default_factory=list)


def witness_budget(width: int, budget: float) -> int:
    return int(math.ceil(budget * width * max(1.0, math.log2(width))))


class _Views:
    """Scalar query functions appropriate to the feedback mode.

    Pairs are stored on witnesses: (coordinate, -1) for raw and sigmoid feedback,
    (label, label) for score feedback.
    """

    def __init__(self, oracle: OracleBase, rng: np.random.Generator, pivot: int):
        self.oracle = oracle
        self.rng = rng
        self.pivot = pivot
        self.mode = oracle.mode
        self._cache: Dict[Tuple[int, int], ScalarView] = {}

    def for_pair(self, pair: Tuple[int, int]):
        """NaN-marking query function for ``pair``; callers treat NaN as unusable feedback."""
        if pair not in self._cache:
            if self.mode in (FeedbackMode.RAW, FeedbackMode.SIGMOID):
                self._cache[pair] = ScalarView(self.oracle, coord=pair[0])
            else:
                self._cache[pair] = ScalarView(self.oracle, pair)
        return self._cache[pair].partial

    def for_witness(self, w: CriticalWitness):
        return self.for_pair(w.pair)

    def _random_pair(self, labels: Sequence[int]) -> Tuple[int, int]:
        i, j = self.rng.choice(len(labels), size=2, replace=False)
        return int(labels[i]), int(labels[j])

    def segment(self, x1: np.ndarray, x2: np.ndarray):
        if self.mode is FeedbackMode.RAW:
            pair = (int(self.rng.integers(self.oracle.n_outputs)), -1)
        elif self.mode is FeedbackMode.SIGMOID:
            pair = (0, -1)
        elif self.mode is FeedbackMode.SOFTMAX:
            pair = self._random_pair(range(self.oracle.n_outputs))
        else:
            try:
                x1, x2, shared = good_starting_points(self.oracle, x1, x2)
            except StartingPointFailure:
                return None
            pair = self._random_pair(shared)
        return self.for_pair(pair), x1, x2, pair

    def at(self, x: np.ndarray):
        """View usable near ``x``; top-m feedback spends one query to learn which labels show."""
        if self.mode is FeedbackMode.RAW:
            return self.for_pair((0, -1))
        if self.mode is FeedbackMode.SIGMOID:
            return self.for_pair((0, -1))
        if self.mode is FeedbackMode.SOFTMAX:
            other = 1 if self.pivot == 0 else 0
            return self.for_pair((other, self.pivot))
        labels, scores = self.oracle.query(x)
        ok = labels[scores > 0]
        if ok.shape[0] < 2:
            return None
        return self.for_pair((int(ok[0]), int(ok[1])))


class _Run:
    def __init__(self, oracle: OracleBase, dims: Sequence[int], config: AttackConfig):
        self.oracle = oracle
        self.dims = [int(d) for d in dims]
        self.cfg = config
        self.rng = np.random.default_rng(config.seed)
        self.views = _Views(oracle, self.rng, config.pivot)
        self.refinement = RefinementReport()
        self.neurons: List[List[RecoveredNeuron]] = []
        self.diagnostics: List[str] = []
        self.prefix = PrefixModel(self.dims[0])
        self.current = "setup"

    @contextlib.contextmanager
    def phase(self, name: str):
        limit = None
        for key, cap in self.cfg.phase_limits.items():
            if name.startswith(key):
                limit = cap if limit is None else min(limit, cap)
        saved = self.oracle._limit
        self.current = name
        if limit is not None:
            local = self.oracle.query_count + limit
            self.oracle.reset_budget(local if saved is None else min(saved, local))
        try:
            with self.oracle.phase(name):
                yield
        except BudgetExhausted as err:
            raise ExtractionError("budget", name, str(err), self.prefix) from err
        finally:
            self.oracle.reset_budget(saved)

    # -------------------------------------------------------------- witnesses

    def collect(self, prefix: PrefixModel, target: int) -> List[CriticalWitness]:
        out: List[CriticalWitness] = []
        max_segments = 50 * target + 100
        for _ in range(max_segments):
            if len(out) >= target:
                break
            x1, x2 = random_segment(self.rng, self.dims[0], self.cfg.radius)
            got = self.views.segment(x1, x2)
            if got is None:
                continue
            fn, a, b, pair = got
            for w in find_critical_on_segment(fn, a, b, self.cfg.probe):
                if filter_prior_layers(prefix, w.x, self.cfg.margin_tol):
                    w.pair = pair
                    out.append(w)
        return out

    def _probe(self, prefix: PrefixModel, witnesses, layer: int):
        vecs, keep = [], []
        for w in witnesses:
            neuron = probe_witness(self.views.for_witness(w), prefix, w.x, self.cfg.probe, self.rng, layer)
            if neuron is None:
                continue
            if prefix.split:
                vecs.append(partial_extended(prefix, w.x, neuron.weights, neuron.bias))
            else:
                vecs.append(neuron.augmented)
            keep.append(w)
        return vecs, keep

    def hyperplanes(self, prefix: PrefixModel, width: int, layer: int, tag: str):
        """Witness search, probing and clustering until ``width`` recurring hyperplanes exist."""
        target = witness_budget(width, self.cfg.budget)
        vecs: list = []
        wits: list = []
        for rnd in range(self.cfg.extension_rounds + 1):
            with self.phase("%s/search" % tag):
                found = self.collect(prefix, target)
            with self.phase("%s/probe" % tag):
                v, w = self._probe(prefix, found, layer)
            vecs += v
            wits += w
            if len(vecs) < 2:
                continue
            try:
                clusters = filter_by_frequency(vecs, width)
                if rnd:
                    self.diagnostics.append("%s: %d extension round(s) of witness search" % (tag, rnd))
                return clusters, wits
            except InsufficientWitnesses as err:
                logger.info("%s: %s after %d witnesses", tag, err, len(vecs))
        raise ExtractionError("entrapment", tag, "only %d of %d neurons seen recurring after %d witnesses"
                              % (len(filter_by_frequency_safe(vecs)), width, len(vecs)), self.prefix)

    def refine(self, prefix: PrefixModel, aug: np.ndarray, tag: str) -> np.ndarray:
        if self.cfg.refine_rounds == 0:
            return aug
        with self.phase("%s/refine" % tag):
            new, entry = refine_neuron(self.views.at, prefix, aug, self.rng, self.cfg.refine_rounds,
                                       self.cfg.probe, self.cfg.radius, count=lambda: self.oracle.query_count)
        self.refinement.entries.append(entry)
        if entry.failed:
            self.diagnostics.append("%s: refinement failed for one neuron (kept residual %.3g)"
                                    % (tag, entry.post_residual))
        return new

    # -------------------------------------------------------------- workflow 1

    def independent_signs(self, prefix: PrefixModel, rows: np.ndarray, biases: np.ndarray, members, wits, tag):
        pending = prefix.with_pending(rows, biases)
        signs = np.zeros(rows.shape[0], dtype=np.int64)
        slopes = np.zeros(rows.shape[0])
        with self.phase("%s/sign" % tag):
            for j, idx in enumerate(members):
                last = None
                for i in idx[:self.cfg.sign_retries]:
                    w = wits[i]
                    try:
                        pair = recover_adjacent_affines(self.views.for_witness(w), pending, w.x, j, self.rng)
                        signs[j], slopes[j] = decide_sign_slope_independent(pair)
                        break
                    except (IndeterminateSlope, RegionEscape, ExpansivenessError) as err:
                        last = err
                else:
                    raise ExtractionError("sign", tag, "neuron %d undecided: %s" % (j, last), self.prefix)
        return signs, slopes

    def workflow1(self):
        n = len(self.dims) - 2
        prefix = self.prefix
        for i in range(1, n + 1):
            tag = "layer%d" % i
            clusters, wits = self.hyperplanes(prefix, self.dims[i], i, tag)
            reps = np.array([c.representative for c in clusters])
            norms = np.linalg.norm(reps[:, :-1], axis=1)
            rows, biases = reps[:, :-1] / norms[:, None], reps[:, -1] / norms
            signs, slopes = self.independent_signs(prefix, rows, biases, [c.members for c in clusters], wits, tag)
            self.neurons.append([RecoveredNeuron(i, rows[j], float(biases[j]), int(signs[j]), float(slopes[j]),
                                                 [wits[k].x for k in clusters[j].members])
                                 for j in range(rows.shape[0])])
            prefix = prefix.decided(signs[:, None] * rows, signs * biases, slopes)
            self.prefix = prefix
        with self.phase("layer%d/solve" % (n + 1)):
            fit = recover_last_layer(self.oracle, prefix, self.rng, self.cfg.pivot, self.cfg.radius)
        return prefix.to_network(fit.weights, fit.biases), fit

    # -------------------------------------------------------------- workflow 2

    def _joint_decisions(self, V: np.ndarray, tag: str):
        """Sign and slope of each hidden coordinate from split-space rows V (K x 2d)."""
        d = V.shape[1] // 2
        signs = np.zeros(d, dtype=np.int64)
        slopes = np.zeros(d)
        for j in range(d):
            strength = np.nan_to_num(np.minimum(np.abs(V[:, j]), np.abs(V[:, j + d])), nan=-1.0)
            last = None
            for k in np.argsort(-strength, kind="stable")[:self.cfg.sign_retries]:
                try:
                    signs[j], slopes[j], _ = decide_sign_slope_joint(V[k], j)
                    break
                except IndeterminateSlope as err:
                    last = err
            else:
                raise ExtractionError("sign", tag, "hidden neuron %d undecided: %s" % (j, last), self.prefix)
        return signs, slopes

    @staticmethod
    def _compress(V: np.ndarray, signs: np.ndarray) -> np.ndarray:
        d = V.shape[1] // 2
        idx = np.where(signs > 0, np.arange(d), np.arange(d) + d)
        return V[:, idx] * signs[None, :]

    def workflow2(self):
        n = len(self.dims) - 2
        tag = "layer1"
        clusters, _ = self.hyperplanes(self.prefix, self.dims[1], 1, tag)
        rows = []
        for c in clusters:
            aug = self.refine(self.prefix, c.representative, tag)
            rows.append(aug / np.linalg.norm(aug[:-1]))
        rows = np.array(rows)
        base = self.prefix
        pending = (rows[:, :-1], rows[:, -1])
        for i in range(1, n):
            tag = "layer%d" % (i + 1)
            prefix = base.with_pending(*pending)
            self.prefix = prefix
            clusters, _ = self.hyperplanes(prefix, self.dims[i + 1], i + 1, tag)
            filled, _ = fill_by_ratio([c.representative for c in clusters])
            refined = []
            for v in filled:
                refined.append(self.refine(prefix, v, tag))
            V, _ = fill_by_ratio(refined)
            missing = np.isnan(V[:, :-1]).any(axis=0)
            if np.any(missing):
                self.diagnostics.append("%s: twin entries never observed for hidden neurons %s"
                                        % (tag, np.nonzero(missing[:V.shape[1] // 2] | missing[V.shape[1] // 2:])[0]))
            signs, slopes = self._joint_decisions(V[:, :-1], tag)
            a, b = pending
            self._record(i, a, b, signs, slopes)
            base = base.decided(signs[:, None] * a, signs * b, slopes)
            comp = self._compress(V[:, :-1], signs)
            nrm = np.linalg.norm(comp, axis=1)
            pending = (comp / nrm[:, None], V[:, -1] / nrm)
        prefix = base.with_pending(*pending)
        self.prefix = prefix
        tag = "layer%d" % (n + 1)
        with self.phase("%s/solve" % tag):
            split_fit = recover_last_layer(self.oracle, prefix, self.rng, self.cfg.pivot, self.cfg.radius)
        W = split_fit.weights
        signs, slopes = self._joint_decisions(W, tag)
        a, b = pending
        self._record(n, a, b, signs, slopes)
        decided = base.decided(signs[:, None] * a, signs * b, slopes)
        self.prefix = decided
        fit = recover_last_layer(self.oracle, decided, self.rng, self.cfg.pivot, self.cfg.radius, reuse=split_fit)
        return decided.to_network(fit.weights, fit.biases), fit

    def _record(self, layer, a, b, signs, slopes):
        self.neurons.append([RecoveredNeuron(layer, a[j], float(b[j]), int(signs[j]), float(slopes[j]))
                             for j in range(a.shape[0])])


def filter_by_frequency_safe(vecs) -> list:
    try:
        return filter_by_frequency(vecs, len(vecs) + 1) if vecs else []
    except InsufficientWitnesses as err:
        return err.clusters


def extract(oracle: OracleBase, dims: Sequence[int], config: Optional[AttackConfig] = None) -> ExtractionResult:
    """Recover a network equivalent to the one behind ``oracle`` (fused at the pivot for score feedback).

    Raises ExpansivenessError before any query when the architecture is out of reach, and
    ExtractionError (kind "entrapment", "sign", "budget", ...) when a phase fails.
    """
    config = config or AttackConfig()
    dims = [int(d) for d in dims]
    if dims[0] != oracle.n_inputs or dims[-1] != oracle.n_outputs:
        raise ValueError("architecture %s does not match the oracle's %d inputs / %d outputs"
                         % ("-".join(map(str, dims)), oracle.n_inputs, oracle.n_outputs))
    if len(dims) < 3:
        raise ValueError("at least one hidden layer is required")
    expansiveness_guard(dims, config.workflow)
    run = _Run(oracle, dims, config)
    start_count = oracle.query_count
    start_phases = oracle.phase_counts
    saved = oracle._limit
    if config.max_queries is not None:
        oracle.reset_budget(start_count + config.max_queries)
    t0 = time.perf_counter()
    try:
        net, fit = run.workflow1() if config.workflow == 1 else run.workflow2()
    except (EntrapmentError, LabelUnavailable) as err:
        raise ExtractionError("entrapment", run.current, str(err), run.prefix) from err
    except BudgetExhausted as err:
        raise ExtractionError("budget", run.current, str(err), run.prefix) from err
    finally:
        oracle.reset_budget(saved)
    phases = {k: v - start_phases.get(k, 0) for k, v in oracle.phase_counts.items()
              if v - start_phases.get(k, 0) > 0}
    return ExtractionResult(network=net, workflow=config.workflow, mode=oracle.mode.value,
                            queries=oracle.query_count - start_count, phase_counts=phases, neurons=run.neurons,
                            refinement=run.refinement, last_layer_residual=fit.residual,
                            elapsed=time.perf_counter() - t0, diagnostics=run.diagnostics)


class PReluExtractor(BaseEstimator):
    """Estimator wrapper: ``fit(oracle)`` runs the extraction, ``predict(X)`` evaluates the copy."""

    def __init__(self, dims=None, workflow: int = 2, budget: float = 3.0, refine_rounds: int = 3,
                 radius: float = 1.0, seed: int = 0, pivot: int = 0, max_queries: Optional[int] = None):
        self.dims = dims
        self.workflow = workflow
        self.budget = budget
        self.refine_rounds = refine_rounds
        self.radius = radius
        self.seed = seed
        self.pivot = pivot
        self.max_queries = max_queries

    def fit(self, oracle: OracleBase, y=None):
        if self.dims is None:
            raise ValueError("dims (the victim architecture) must be given")
        cfg = AttackConfig(workflow=self.workflow, budget=self.budget, refine_rounds=self.refine_rounds,
                           radius=self.radius, seed=self.seed, pivot=self.pivot, max_queries=self.max_queries)
        self.result_ = extract(oracle, self.dims, cfg)
        self.network_ = self.result_.network
        self.n_features_in_ = self.network_.n_inputs
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError("X has %d features, expected %d" % (X.shape[1], self.n_features_in_))
        return self.network_.predict(X)
