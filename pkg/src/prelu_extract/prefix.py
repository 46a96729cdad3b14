"""Attacker-side model of the layers recovered so far."""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .network import PReluNetwork


class PrefixModel:
    """Recovered layers 1..k plus an optional pending layer known only up to per-neuron factors.

    The hidden space seen by the next recovery step is the pending layer's
    preactivation when a pending layer is present, otherwise the output of the
    last decided layer (the raw input when nothing has been recovered yet).
    With a pending layer the next layer is linear in the split features
    ``[max(z, 0), min(z, 0)]`` of the hidden vector.
    """

    def __init__(self, n_inputs: int, layers: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]] = (),
                 pending: Optional[Tuple[np.ndarray, np.ndarray]] = None):
        self.n_inputs = int(n_inputs)
        self.layers = [(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64),
                        np.asarray(s, dtype=np.float64)) for a, b, s in layers]
        self.pending = None
        if pending is not None:
            self.pending = (np.asarray(pending[0], dtype=np.float64), np.asarray(pending[1], dtype=np.float64))

    @property
    def split(self) -> bool:
        return self.pending is not None

    @property
    def n_decided(self) -> int:
        return len(self.layers)

    @property
    def hidden_dim(self) -> int:
        if self.pending is not None:
            return self.pending[0].shape[0]
        if self.layers:
            return self.layers[-1][0].shape[0]
        return self.n_inputs

    @property
    def feature_dim(self) -> int:
        return 2 * self.hidden_dim if self.split else self.hidden_dim

    def with_pending(self, a: np.ndarray, b: np.ndarray) -> "PrefixModel":
        return PrefixModel(self.n_inputs, self.layers, (a, b))

    def decided(self, a: np.ndarray, b: np.ndarray, s: np.ndarray) -> "PrefixModel":
        return PrefixModel(self.n_inputs, self.layers + [(a, b, s)])

    def _run(self, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        pre = []
        h = X
        for a, b, s in self.layers:
            y = h @ a.T + b
            pre.append(y)
            h = np.where(y >= 0, y, s * y)
        if self.pending is not None:
            y = h @ self.pending[0].T + self.pending[1]
            pre.append(y)
            h = y
        return h, pre

    def hidden(self, X: np.ndarray) -> np.ndarray:
        """Hidden coordinates for a batch of inputs, shape (N, hidden_dim)."""
        return self._run(X)[0]

    def preactivations(self, X: np.ndarray) -> List[np.ndarray]:
        """Preactivations of every recovered layer, pending layer included."""
        return self._run(X)[1]

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Local Jacobian of the hidden coordinates with respect to the input at ``x``."""
        x = np.asarray(x, dtype=np.float64)
        jac = np.eye(self.n_inputs)
        h = x
        for a, b, s in self.layers:
            y = a @ h + b
            tau = np.where(y >= 0, 1.0, s)
            jac = (tau[:, None] * a) @ jac
            h = np.where(y >= 0, y, s * y)
        if self.pending is not None:
            jac = self.pending[0] @ jac
        return jac

    def preactivation_jacobians(self, x: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Per recovered layer (pending included): preactivation values and their input Jacobian."""
        x = np.asarray(x, dtype=np.float64)
        jac = np.eye(self.n_inputs)
        h = x
        out = []
        for a, b, s in self.layers:
            y = a @ h + b
            pj = a @ jac
            out.append((y, pj))
            tau = np.where(y >= 0, 1.0, s)
            jac = tau[:, None] * pj
            h = np.where(y >= 0, y, s * y)
        if self.pending is not None:
            out.append((self.pending[0] @ h + self.pending[1], self.pending[0] @ jac))
        return out

    def features(self, Z: np.ndarray) -> np.ndarray:
        """Coordinates in which the next layer's preactivation is linear."""
        Z = np.atleast_2d(Z)
        if not self.split:
            return Z
        return np.hstack([np.maximum(Z, 0.0), np.minimum(Z, 0.0)])

    def slots(self, z: np.ndarray) -> np.ndarray:
        """Feature index carrying each hidden coordinate at hidden point ``z``."""
        z = np.asarray(z)
        d = z.shape[-1]
        if not self.split:
            return np.arange(d)
        return np.where(z >= 0, np.arange(d), np.arange(d) + d)

    def margin(self, x: np.ndarray) -> float:
        """Smallest absolute preactivation over all recovered layers at ``x``."""
        pre = self.preactivations(x)
        if not pre:
            return np.inf
        return float(min(np.min(np.abs(p)) for p in pre))

    def pattern(self, X: np.ndarray) -> np.ndarray:
        """Concatenated sign pattern of all recovered preactivations."""
        pre = self.preactivations(X)
        if not pre:
            return np.zeros((np.atleast_2d(X).shape[0], 0), dtype=np.int8)
        return np.hstack([np.where(p >= 0, 1, -1).astype(np.int8) for p in pre])

    def to_network(self, last_a: np.ndarray, last_b: np.ndarray) -> PReluNetwork:
        if self.pending is not None:
            raise ValueError("pending layer must be decided before building a network")
        ws = [a for a, _, _ in self.layers] + [last_a]
        bs = [b for _, b, _ in self.layers] + [last_b]
        ss = [s for _, _, s in self.layers]
        return PReluNetwork(ws, bs, ss)
