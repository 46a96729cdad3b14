"""Black-box query access to a victim network with exact query accounting."""

import contextlib
import enum
import logging
import socket
import socketserver
import threading
from typing import Dict, Optional, TextIO, Tuple, Union

import numpy as np
from scipy.special import expit

from .network import PReluNetwork

logger = logging.getLogger(__name__)


class FeedbackMode(enum.Enum):
    RAW = "raw"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    TOPM = "topm"


class BudgetExhausted(RuntimeError):
    def __init__(self, limit: int, phase: str):
        super().__init__("query budget of %d exhausted during phase %r" % (limit, phase))
        self.limit = limit
        self.phase = phase


class WireError(ValueError):
    pass


def format_number(v: float) -> str:
    return "%.17g" % v


def softmax(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    e = np.exp(y - np.max(y, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def top_m(scores: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Top-m labels and scores of each row, ties broken by ascending label."""
    scores = np.atleast_2d(scores)
    labels = np.argsort(-scores, axis=1, kind="stable")[:, :m]
    vals = np.take_along_axis(scores, labels, axis=1)
    return labels, vals


class OracleBase:
    """Counting, budget and phase bookkeeping shared by local and remote oracles."""

    def __init__(self, n_inputs: int, n_outputs: int, mode: FeedbackMode = FeedbackMode.RAW,
                 m: Optional[int] = None, limit: Optional[int] = None):
        mode = FeedbackMode(mode)
        if mode is FeedbackMode.SIGMOID and n_outputs != 1:
            raise ValueError("sigmoid feedback requires a single output")
        if mode is FeedbackMode.TOPM:
            if m is None or not 2 <= m <= n_outputs:
                raise ValueError("top-m feedback requires 2 <= m <= %d" % n_outputs)
        elif m is not None:
            raise ValueError("m is only meaningful for top-m feedback")
        if mode in (FeedbackMode.SOFTMAX,) and n_outputs < 2:
            raise ValueError("softmax feedback requires at least two outputs")
        self.n_inputs = int(n_inputs)
        self.n_outputs = int(n_outputs)
        self.mode = mode
        self.m = m
        self._limit = limit
        self._count = 0
        self._by_phase: Dict[str, int] = {}
        self._phase = "unattributed"
        self._lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._count

    @property
    def phase_counts(self) -> Dict[str, int]:
        return dict(self._by_phase)

    @property
    def current_phase(self) -> str:
        return self._phase

    def reset_budget(self, limit: Optional[int]) -> None:
        """Install a new total query limit (None removes it)."""
        self._limit = limit

    @contextlib.contextmanager
    def phase(self, name: str):
        prev = self._phase
        self._phase = name
        try:
            yield self
        finally:
            self._phase = prev

    def _charge(self, n: int) -> None:
        with self._lock:
            if self._limit is not None and self._count + n > self._limit:
                raise BudgetExhausted(self._limit, self._phase)
            self._count += n
            self._by_phase[self._phase] = self._by_phase.get(self._phase, 0) + n

    def _validate(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ValueError("queries must have %d coordinates" % self.n_inputs)
        if not np.all(np.isfinite(X)):
            raise ValueError("query contains non-finite values")
        return X

    def query(self, x: np.ndarray):
        """One query; the return type depends on the feedback mode."""
        out = self.query_batch(np.asarray(x, dtype=np.float64)[None, :])
        if self.mode is FeedbackMode.TOPM:
            return out[0][0], out[1][0]
        return out[0]

    def query_batch(self, X: np.ndarray):
        """Each row counts as one query.

        RAW and SOFTMAX return an (N, d_out) array, SIGMOID an (N,) array,
        TOPM a pair of (N, m) arrays of labels and scores.
        """
        X = self._validate(X)
        self._charge(X.shape[0])
        return self._answer(X)

    def _answer(self, X: np.ndarray):
        raise NotImplementedError


class Oracle(OracleBase):
    """In-process oracle backed by a network the attack never reads directly."""

    def __init__(self, net: PReluNetwork, mode: Union[FeedbackMode, str] = FeedbackMode.RAW,
                 m: Optional[int] = None, limit: Optional[int] = None):
        super().__init__(net.n_inputs, net.n_outputs, FeedbackMode(mode), m, limit)
        self._net = net

    def _answer(self, X: np.ndarray):
        y = self._net.predict(X)
        if self.mode is FeedbackMode.RAW:
            return y
        if self.mode is FeedbackMode.SIGMOID:
            return expit(y[:, 0])
        q = softmax(y)
        if self.mode is FeedbackMode.SOFTMAX:
            return q
        return top_m(q, self.m)


# ---------------------------------------------------------------- wire protocol

def format_response(oracle: OracleBase, feedback) -> str:
    mode = oracle.mode
    if mode is FeedbackMode.RAW:
        return "R " + " ".join(format_number(v) for v in np.ravel(feedback))
    if mode is FeedbackMode.SIGMOID:
        return "S " + format_number(float(feedback))
    if mode is FeedbackMode.SOFTMAX:
        return "P " + " ".join(format_number(v) for v in np.ravel(feedback))
    labels, scores = feedback
    return "T " + " ".join("%d %s" % (int(l), format_number(q)) for l, q in zip(labels, scores))


def handle_request(oracle: OracleBase, line: str) -> str:
    """Answer one protocol line; malformed input yields an ``E`` line and costs no query."""
    parts = line.strip().split()
    if not parts or parts[0] != "Q":
        return "E expected a line starting with Q"
    try:
        x = np.array([float(t) for t in parts[1:]], dtype=np.float64)
    except ValueError:
        return "E could not parse input vector"
    if x.shape[0] != oracle.n_inputs:
        return "E expected %d coordinates, got %d" % (oracle.n_inputs, x.shape[0])
    if not np.all(np.isfinite(x)):
        return "E non-finite input"
    try:
        fb = oracle.query(x)
    except BudgetExhausted as exc:
        return "E " + str(exc)
    return format_response(oracle, fb)


def serve_stream(oracle: OracleBase, infile: TextIO, outfile: TextIO) -> int:
    """Serve newline-delimited requests until EOF; returns the number of lines handled."""
    n = 0
    for line in infile:
        if not line.strip():
            continue
        outfile.write(handle_request(oracle, line) + "\n")
        outfile.flush()
        n += 1
    return n


def serve_tcp(oracle: OracleBase, host: str = "127.0.0.1", port: int = 0,
              ready: Optional[threading.Event] = None, max_connections: Optional[int] = None):
    """Blocking TCP server handling one connection at a time."""

    class _Handler(socketserver.StreamRequestHandler):
        def handle(self):
            for raw in self.rfile:
                line = raw.decode("ascii", errors="replace")
                if not line.strip():
                    continue
                self.wfile.write((handle_request(oracle, line) + "\n").encode("ascii"))
                self.wfile.flush()

    server = socketserver.TCPServer((host, port), _Handler)
    if ready is not None:
        ready.port = server.server_address[1]
        ready.set()
    try:
        if max_connections is None:
            server.serve_forever()
        else:
            for _ in range(max_connections):
                server.handle_request()
    finally:
        server.server_close()
    return server


def parse_response(mode: FeedbackMode, line: str):
    parts = line.strip().split()
    if not parts:
        raise WireError("empty response")
    tag, rest = parts[0], parts[1:]
    if tag == "E":
        raise WireError(" ".join(rest))
    expected = {FeedbackMode.RAW: "R", FeedbackMode.SIGMOID: "S",
                FeedbackMode.SOFTMAX: "P", FeedbackMode.TOPM: "T"}[mode]
    if tag != expected:
        raise WireError("expected %s response, got %s" % (expected, tag))
    if mode is FeedbackMode.TOPM:
        labels = np.array([int(t) for t in rest[0::2]], dtype=np.int64)
        scores = np.array([float(t) for t in rest[1::2]])
        return labels, scores
    vals = np.array([float(t) for t in rest])
    if mode is FeedbackMode.SIGMOID:
        return float(vals[0])
    return vals


class RemoteOracle(OracleBase):
    """Oracle speaking the line protocol over TCP."""

    def __init__(self, host: str, port: int, n_inputs: int, n_outputs: int,
                 mode: Union[FeedbackMode, str] = FeedbackMode.RAW, m: Optional[int] = None,
                 limit: Optional[int] = None, timeout: float = 30.0):
        super().__init__(n_inputs, n_outputs, FeedbackMode(mode), m, limit)
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self._sock.makefile("rw", encoding="ascii", newline="\n")

    def close(self) -> None:
        self._file.close()
        self._sock.close()

    def _answer(self, X: np.ndarray):
        out = []
        for x in X:
            self._file.write("Q " + " ".join(format_number(v) for v in x) + "\n")
            self._file.flush()
            out.append(parse_response(self.mode, self._file.readline()))
        if self.mode is FeedbackMode.TOPM:
            return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])
        if self.mode is FeedbackMode.SIGMOID:
            return np.array(out)
        return np.stack(out)
