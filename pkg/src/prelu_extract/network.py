"""PReLU fully-connected networks: evaluation, equivalence transforms, surgery and file I/O."""

import io
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_HEADER = "prelu-net v1"

# branch codes for split layers
BRANCH_PRELU = 0
BRANCH_MAX = 1
BRANCH_MIN = -1


class NetworkShapeError(ValueError):
    """Raised when parameter shapes disagree with the declared architecture."""

    def __init__(self, message: str, layer: Optional[int] = None):
        super().__init__(message if layer is None else "layer %d: %s" % (layer, message))
        self.layer = layer


def prelu(x, s):
    """Elementwise PReLU: x where x >= 0, s * x otherwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, x, s * x)
    return out if out.ndim else float(out)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ActivationState:
    """Sign pattern of every hidden preactivation (+1, -1 or 0)."""

    signs: Tuple[np.ndarray, ...]

    def multipliers(self, net: "PReluNetwork") -> List[np.ndarray]:
        return [np.where(sg < 0, s, 1.0) for sg, s in zip(self.signs, net.slopes)]


class PReluNetwork:
    """Immutable PReLU multilayer perceptron.

    ``weights[k]`` has shape ``(dims[k+1], dims[k])``. Hidden layers carry a slope
    vector; the last layer is affine. ``branches`` is only set on networks produced
    by :func:`split_layer` and marks neurons that compute ``max(y, 0)`` (+1) or
    ``min(y, 0)`` (-1) instead of the PReLU.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 slopes: Sequence[np.ndarray], branches: Optional[Sequence[np.ndarray]] = None):
        if len(weights) < 1:
            raise NetworkShapeError("a network needs at least one affine layer")
        if len(biases) != len(weights):
            raise NetworkShapeError("expected %d bias vectors, got %d" % (len(weights), len(biases)))
        if len(slopes) != len(weights) - 1:
            raise NetworkShapeError("expected %d slope vectors, got %d" % (len(weights) - 1, len(slopes)))
        ws = [_frozen(w) for w in weights]
        bs = [_frozen(b) for b in biases]
        ss = [_frozen(s) for s in slopes]
        dims = [ws[0].shape[1] if ws[0].ndim == 2 else -1]
        for k, (w, b) in enumerate(zip(ws, bs), start=1):
            if w.ndim != 2:
                raise NetworkShapeError("weight matrix must be 2-D", k)
            if w.shape[1] != dims[-1]:
                raise NetworkShapeError("weight matrix has %d columns, expected %d" % (w.shape[1], dims[-1]), k)
            if b.shape != (w.shape[0],):
                raise NetworkShapeError("bias has shape %s, expected (%d,)" % (b.shape, w.shape[0]), k)
            if k <= len(ss) and ss[k - 1].shape != (w.shape[0],):
                raise NetworkShapeError("slopes have shape %s, expected (%d,)" % (ss[k - 1].shape, w.shape[0]), k)
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NetworkShapeError("non-finite parameter", k)
            if k <= len(ss) and not np.all(np.isfinite(ss[k - 1])):
                raise NetworkShapeError("non-finite slope", k)
            dims.append(w.shape[0])
        if branches is not None:
            br = []
            for k, (b_, s) in enumerate(zip(branches, ss), start=1):
                b_ = np.array(b_, dtype=np.int8, copy=True)
                if b_.shape != s.shape:
                    raise NetworkShapeError("branch codes do not match layer width", k)
                b_.setflags(write=False)
                br.append(b_)
            branches = tuple(br)
        self._weights = tuple(ws)
        self._biases = tuple(bs)
        self._slopes = tuple(ss)
        self._branches = branches
        self._dims = tuple(int(d) for d in dims)

    @property
    def weights(self) -> Tuple[np.ndarray, ...]:
        return self._weights

    @property
    def biases(self) -> Tuple[np.ndarray, ...]:
        return self._biases

    @property
    def slopes(self) -> Tuple[np.ndarray, ...]:
        return self._slopes

    @property
    def branches(self) -> Optional[Tuple[np.ndarray, ...]]:
        return self._branches

    @property
    def dims(self) -> Tuple[int, ...]:
        return self._dims

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self._weights) - 1

    @property
    def n_inputs(self) -> int:
        return self._dims[0]

    @property
    def n_outputs(self) -> int:
        return self._dims[-1]

    def parameter_count(self) -> int:
        return parameter_count(self._dims)

    def slopes_in_unit_interval(self) -> bool:
        return all(np.all((s > 0) & (s < 1)) for s in self._slopes)

    def _activate(self, k: int, y: np.ndarray) -> np.ndarray:
        s = self._slopes[k]
        z = np.where(y >= 0, y, s * y)
        if self._branches is not None:
            br = self._branches[k]
            if np.any(br != BRANCH_PRELU):
                z = np.where(br == BRANCH_MAX, np.maximum(y, 0.0),
                             np.where(br == BRANCH_MIN, np.minimum(y, 0.0), z))
        return z

    def preactivations(self, X: np.ndarray) -> List[np.ndarray]:
        """Preactivations of every layer (hidden and output) for a batch of inputs."""
        X = np.asarray(X, dtype=np.float64)
        out = []
        h = X
        for k, (w, b) in enumerate(zip(self._weights, self._biases)):
            y = h @ w.T + b
            out.append(y)
            if k < self.depth:
                h = self._activate(k, y)
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Outputs for a batch ``X`` of shape (N, d0); returns shape (N, d_out)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise NetworkShapeError("input batch must have shape (N, %d), got %s" % (self.n_inputs, X.shape), 0)
        h = X
        for k, (w, b) in enumerate(zip(self._weights, self._biases)):
            h = h @ w.T + b
            if k < self.depth:
                h = self._activate(k, h)
        return h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]

    def equals(self, other: "PReluNetwork") -> bool:
        """Bitwise parameter equality."""
        if self.dims != other.dims:
            return False
        pairs = list(zip(self.weights, other.weights)) + list(zip(self.biases, other.biases)) \
            + list(zip(self.slopes, other.slopes))
        return all(a.tobytes() == b.tobytes() for a, b in pairs)

    def __repr__(self) -> str:
        return "PReluNetwork(%s)" % "-".join(str(d) for d in self.dims)


def parameter_count(dims: Sequence[int]) -> int:
    dims = list(dims)
    total = sum(dims[k] * (dims[k - 1] + 1) for k in range(1, len(dims)))
    return total + sum(dims[1:-1])


def forward(net: PReluNetwork, x: np.ndarray) -> Tuple[np.ndarray, ActivationState]:
    """Evaluate one input; returns the output vector and the activation state."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.n_inputs,):
        raise NetworkShapeError("input has shape %s, expected (%d,)" % (x.shape, net.n_inputs), 0)
    if not np.all(np.isfinite(x)):
        raise ValueError("input must be finite")
    ys = net.preactivations(x[None, :])
    signs = tuple(np.sign(y[0]).astype(np.int8) for y in ys[:-1])
    return ys[-1][0], ActivationState(signs)


def local_affine_view(net: PReluNetwork, x: np.ndarray, layer: int) -> Tuple[np.ndarray, float]:
    """Coefficients G and offset U with f(x') = G . z_layer(x') + U inside the region of ``x``.

    ``z_layer`` is the post-activation output of hidden layer ``layer`` (1-based). Only
    defined for single-output networks.
    """
    if net.n_outputs != 1:
        raise ValueError("local affine view needs a single-output network")
    ys = net.preactivations(np.asarray(x, dtype=np.float64)[None, :])
    g = net.weights[-1][0].copy()
    for k in range(net.depth - 1, layer - 1, -1):
        tau = np.where(ys[k][0] >= 0, 1.0, net.slopes[k])
        g = (g * tau) @ net.weights[k]
    z = net._activate(layer - 1, ys[layer - 1][0])
    u = float(net.predict(np.asarray(x, dtype=np.float64)[None, :])[0, 0] - g @ z)
    return g, u


def _check_hidden_layer(net: PReluNetwork, k: int) -> None:
    if not 1 <= k <= net.depth:
        raise ValueError("hidden layer index must be in 1..%d, got %d" % (net.depth, k))


def scale_neuron(net: PReluNetwork, k: int, i: int, c: float) -> PReluNetwork:
    """Scale incoming weights and bias of neuron ``i`` of layer ``k`` by ``c`` and its outgoing weights by 1/c."""
    if not c > 0:
        raise ValueError("scale factor must be positive, got %r" % (c,))
    _check_hidden_layer(net, k)
    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    ws[k - 1][i, :] *= c
    bs[k - 1][i] *= c
    ws[k][:, i] /= c
    return PReluNetwork(ws, bs, net.slopes, net.branches)


def permute_layer(net: PReluNetwork, k: int, perm: Sequence[int]) -> PReluNetwork:
    """Reorder the neurons of hidden layer ``k``: new neuron ``j`` is old neuron ``perm[j]``."""
    _check_hidden_layer(net, k)
    perm = np.asarray(perm, dtype=np.int64)
    d = net.dims[k]
    if perm.shape != (d,) or not np.array_equal(np.sort(perm), np.arange(d)):
        raise ValueError("permutation must be a bijection on 0..%d" % (d - 1))
    ws = list(net.weights)
    bs = list(net.biases)
    ss = list(net.slopes)
    ws[k - 1] = ws[k - 1][perm, :]
    bs[k - 1] = bs[k - 1][perm]
    ss[k - 1] = ss[k - 1][perm]
    ws[k] = ws[k][:, perm]
    br = None
    if net.branches is not None:
        br = list(net.branches)
        br[k - 1] = br[k - 1][perm]
    return PReluNetwork(ws, bs, ss, br)


def split_layer(net: PReluNetwork, i: int) -> PReluNetwork:
    """Double hidden layer ``i`` into max/min twins so the slopes become outgoing weights."""
    _check_hidden_layer(net, i)
    if net.branches is not None and np.any(net.branches[i - 1] != BRANCH_PRELU):
        raise ValueError("layer %d is already split" % i)
    ws = list(net.weights)
    bs = list(net.biases)
    ss = list(net.slopes)
    s = ss[i - 1]
    d = net.dims[i]
    ws[i - 1] = np.vstack([ws[i - 1], ws[i - 1]])
    bs[i - 1] = np.concatenate([bs[i - 1], bs[i - 1]])
    ss[i - 1] = np.concatenate([s, s])
    ws[i] = np.hstack([ws[i], ws[i] * s[None, :]])
    if net.branches is None:
        br = [np.zeros(w.shape[0], dtype=np.int8) for w in net.weights[:-1]]
    else:
        br = [b.copy() for b in net.branches]
    br[i - 1] = np.concatenate([np.full(d, BRANCH_MAX, dtype=np.int8), np.full(d, BRANCH_MIN, dtype=np.int8)])
    return PReluNetwork(ws, bs, ss, br)


def fuse_outputs(net: PReluNetwork, pivot: int = 0) -> PReluNetwork:
    """Subtract output row ``pivot`` from every output row (0-based pivot)."""
    if net.n_outputs < 2:
        raise ValueError("output fusion needs at least two outputs; use sigmoid inversion instead")
    if not 0 <= pivot < net.n_outputs:
        raise ValueError("pivot must be in 0..%d" % (net.n_outputs - 1))
    ws = list(net.weights)
    bs = list(net.biases)
    ws[-1] = ws[-1] - ws[-1][pivot][None, :]
    bs[-1] = bs[-1] - bs[-1][pivot]
    return PReluNetwork(ws, bs, net.slopes, net.branches)


def random_network(dims: Sequence[int], slope_range: Tuple[float, float] = (0.05, 0.95),
                   seed: Optional[int] = None) -> PReluNetwork:
    """Random victim: weights and biases uniform in [-1, 1] / sqrt(fan_in), slopes uniform in the range."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError("degenerate architecture %s" % (dims,))
    lo, hi = slope_range
    if not 0 < lo < hi < 1:
        raise ValueError("slope range must satisfy 0 < lo < hi < 1")
    rng = np.random.default_rng(seed)
    ws, bs, ss = [], [], []
    for k in range(1, len(dims)):
        scale = 1.0 / np.sqrt(dims[k - 1])
        ws.append(rng.uniform(-1.0, 1.0, size=(dims[k], dims[k - 1])) * scale)
        bs.append(rng.uniform(-1.0, 1.0, size=dims[k]) * scale)
    for k in range(1, len(dims) - 1):
        s = rng.uniform(lo, hi, size=dims[k])
        ss.append(np.clip(s, np.nextafter(lo, 1.0), np.nextafter(hi, 0.0)))
    return PReluNetwork(ws, bs, ss)


def parse_dims(text: str) -> List[int]:
    """Parse an architecture string such as ``32-16-1``."""
    try:
        dims = [int(t) for t in text.strip().split("-")]
    except ValueError:
        raise ValueError("architecture must look like 32-16-1, got %r" % text)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError("degenerate architecture %r" % text)
    return dims


def _parse_number(tok: str) -> float:
    low = tok.lower()
    if "x" in low:
        v = float.fromhex(tok)
    else:
        v = float(tok)
    if not np.isfinite(v):
        raise ValueError("non-finite number %r in model file" % tok)
    return v


def dumps(net: PReluNetwork, decimal: bool = False) -> str:
    """Serialize to the text model format (hex floats unless ``decimal``)."""
    if net.branches is not None:
        raise ValueError("split networks have no file representation")
    fmt = (lambda v: "%.17g" % v) if decimal else (lambda v: float(v).hex())
    buf = io.StringIO()
    buf.write(FORMAT_HEADER + "\n")
    buf.write("dims " + " ".join(str(d) for d in net.dims) + "\n")
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        buf.write(" ".join(fmt(v) for v in w.ravel()) + "\n")
        buf.write(" ".join(fmt(v) for v in b) + "\n")
        if k < net.depth:
            buf.write(" ".join(fmt(v) for v in net.slopes[k]) + "\n")
    return buf.getvalue()


def loads(text: str) -> PReluNetwork:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise ValueError("missing %r header" % FORMAT_HEADER)
    if len(lines) < 2 or not lines[1].startswith("dims"):
        raise ValueError("missing dims line")
    dims = [int(t) for t in lines[1].split()[1:]]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError("degenerate dims in model file")
    tokens = " ".join(lines[2:]).split()
    vals = [_parse_number(t) for t in tokens]
    need = parameter_count(dims)
    if len(vals) != need:
        raise ValueError("model file has %d numbers, expected %d" % (len(vals), need))
    pos = 0
    ws, bs, ss = [], [], []
    for k in range(1, len(dims)):
        n = dims[k] * dims[k - 1]
        ws.append(np.array(vals[pos:pos + n]).reshape(dims[k], dims[k - 1]))
        pos += n
        bs.append(np.array(vals[pos:pos + dims[k]]))
        pos += dims[k]
        if k < len(dims) - 1:
            ss.append(np.array(vals[pos:pos + dims[k]]))
            pos += dims[k]
    net = PReluNetwork(ws, bs, ss)
    if not net.slopes_in_unit_interval():
        logger.warning("imported model has slopes outside (0, 1)")
    return net


def save(net: PReluNetwork, path: str, decimal: bool = False) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(net, decimal=decimal))


def load(path: str) -> PReluNetwork:
    with open(path) as fh:
        return loads(fh.read())
