"""Turn sigmoid, softmax and top-m score feedback into raw-output equivalents."""

from typing import Optional, Tuple

import numpy as np

from .oracle import FeedbackMode, OracleBase


class LabelUnavailable(LookupError):
    """A label needed for a log-ratio is missing from the feedback (or its score underflowed)."""


def sigmoid_to_raw(q):
    """Invert the logistic function: ln(q / (1 - q))."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(~(q > 0)) or np.any(~(q < 1)):
        raise ValueError("sigmoid scores must lie strictly inside (0, 1)")
    out = np.log(q) - np.log1p(-q)
    return out if out.ndim else float(out)


def log_ratio(feedback, i1: int, i2: int) -> float:
    """ln(q_i1 / q_i2) from a full score vector or a (labels, scores) top-m pair."""
    if isinstance(feedback, tuple):
        labels, scores = (np.asarray(a) for a in feedback)
        hit1 = np.nonzero(labels == i1)[0]
        hit2 = np.nonzero(labels == i2)[0]
        if hit1.size == 0 or hit2.size == 0:
            raise LabelUnavailable("label %d or %d not among the returned labels" % (i1, i2))
        q1, q2 = scores[hit1[0]], scores[hit2[0]]
    else:
        q = np.asarray(feedback, dtype=np.float64)
        q1, q2 = q[i1], q[i2]
    if not (q1 > 0 and q2 > 0):
        raise LabelUnavailable("score underflow for label %d or %d" % (i1, i2))
    if i1 == i2:
        return 0.0
    return float(np.log(q1) - np.log(q2))


def _pair_values(labels: np.ndarray, scores: np.ndarray, i1: int, i2: int) -> np.ndarray:
    """Row-wise ln(q_i1/q_i2) for top-m batches; NaN where unavailable."""
    n = labels.shape[0]
    out = np.full(n, np.nan)
    m1 = labels == i1
    m2 = labels == i2
    ok = m1.any(axis=1) & m2.any(axis=1)
    if i1 == i2:
        out[ok] = 0.0
        return out
    q1 = np.where(m1, scores, 0.0).sum(axis=1)
    q2 = np.where(m2, scores, 0.0).sum(axis=1)
    ok &= (q1 > 0) & (q2 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.log(q1) - np.log(q2)
    out[ok] = vals[ok]
    return out


class ScalarView:
    """Scalar, raw-output-equivalent query function over an oracle.

    RAW: one output coordinate. SIGMOID: the inverted logit. SOFTMAX / TOPM: the
    log-ratio of two labels, i.e. one output coordinate of the fused network with
    pivot ``pair[1]``.
    """

    def __init__(self, oracle: OracleBase, pair: Optional[Tuple[int, int]] = None, coord: int = 0):
        self.oracle = oracle
        self.mode = oracle.mode
        self.coord = coord
        if self.mode in (FeedbackMode.SOFTMAX, FeedbackMode.TOPM):
            if pair is None:
                raise ValueError("score feedback needs a label pair")
            self.pair = (int(pair[0]), int(pair[1]))
        else:
            self.pair = None

    @property
    def n_inputs(self) -> int:
        return self.oracle.n_inputs

    def partial(self, X: np.ndarray) -> np.ndarray:
        """Values for a batch; NaN marks rows whose labels were unavailable."""
        X = np.atleast_2d(X)
        fb = self.oracle.query_batch(X)
        if self.mode is FeedbackMode.RAW:
            return fb[:, self.coord].copy()
        if self.mode is FeedbackMode.SIGMOID:
            q = fb
            out = np.full(q.shape, np.nan)
            ok = (q > 0) & (q < 1)
            out[ok] = np.log(q[ok]) - np.log1p(-q[ok])
            return out
        if self.mode is FeedbackMode.SOFTMAX:
            i1, i2 = self.pair
            out = np.full(fb.shape[0], np.nan)
            ok = (fb[:, i1] > 0) & (fb[:, i2] > 0)
            out[ok] = np.log(fb[ok, i1]) - np.log(fb[ok, i2])
            return out
        labels, scores = fb
        return _pair_values(labels, scores, *self.pair)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        out = self.partial(X)
        if np.any(np.isnan(out)):
            raise LabelUnavailable("label pair %s unavailable for some queries" % (self.pair,))
        return out


def adapted_oracle(oracle: OracleBase, pivot: int = 0, label: Optional[int] = None, coord: int = 0) -> ScalarView:
    """Scalar view equal to output ``label`` of the victim fused at ``pivot`` (score modes)."""
    if oracle.mode in (FeedbackMode.SOFTMAX, FeedbackMode.TOPM):
        if label is None:
            label = 1 if pivot == 0 else 0
        return ScalarView(oracle, (label, pivot))
    return ScalarView(oracle, coord=coord)


def difference_rows(oracle: OracleBase, X: np.ndarray, pivot: int = 0):
    """Query ``X`` and express the feedback as linear facts about raw outputs.

    Returns ``(rows, a, b, v)`` arrays meaning y_a(X[rows]) - y_b(X[rows]) = v. For RAW
    and SIGMOID feedback ``b`` is -1, meaning the plain value y_a = v.
    """
    X = np.atleast_2d(X)
    fb = oracle.query_batch(X)
    n = X.shape[0]
    mode = oracle.mode
    if mode is FeedbackMode.RAW:
        d = fb.shape[1]
        rows = np.repeat(np.arange(n), d)
        a = np.tile(np.arange(d), n)
        return rows, a, np.full(rows.shape, -1), fb.ravel()
    if mode is FeedbackMode.SIGMOID:
        ok = (fb > 0) & (fb < 1)
        rows = np.nonzero(ok)[0]
        v = np.log(fb[ok]) - np.log1p(-fb[ok])
        return rows, np.zeros_like(rows), np.full(rows.shape, -1), v
    if mode is FeedbackMode.SOFTMAX:
        d = fb.shape[1]
        others = [j for j in range(d) if j != pivot]
        rows, a, b, v = [], [], [], []
        for j in others:
            ok = (fb[:, j] > 0) & (fb[:, pivot] > 0)
            idx = np.nonzero(ok)[0]
            rows.append(idx)
            a.append(np.full(idx.shape, j))
            b.append(np.full(idx.shape, pivot))
            v.append(np.log(fb[idx, j]) - np.log(fb[idx, pivot]))
        return np.concatenate(rows), np.concatenate(a), np.concatenate(b), np.concatenate(v)
    labels, scores = fb
    rows, a, b, v = [], [], [], []
    for r in range(n):
        ok = scores[r] > 0
        lab = labels[r][ok]
        sc = scores[r][ok]
        for k in range(1, lab.shape[0]):
            rows.append(r)
            a.append(lab[k])
            b.append(lab[0])
            v.append(np.log(sc[k]) - np.log(sc[0]))
    return (np.array(rows, dtype=np.int64), np.array(a, dtype=np.int64),
            np.array(b, dtype=np.int64), np.array(v, dtype=np.float64))
