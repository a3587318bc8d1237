"""GCN encoder, K x K candidate edge embeddings, selector and predictor MLPs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import ndgrad as nd
from .errors import ConfigError, ShapeError
from .ndgrad import Tensor

# Independent RNG streams so that e.g. the predictor init does not depend on K.
ENCODER_STREAM = 0
SELECTOR_STREAM = 1
PREDICTOR_STREAM = 2


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class EncoderParams:
    """Weights W1..WK of a K-layer GCN; layer k maps dim_{k-1} -> dim_k."""

    weights: list[Tensor]

    @classmethod
    def init(cls, in_dim: int, hidden: int, K: int, seed: int) -> "EncoderParams":
        if K < 1:
            raise ConfigError("encoder needs at least one layer")
        dims = [in_dim] + [hidden] * K
        ws = []
        for k in range(K):
            rng = np.random.default_rng([seed, ENCODER_STREAM, k])
            ws.append(Tensor(glorot(rng, dims[k], dims[k + 1]), requires_grad=True, name=f"encoder.W{k + 1}"))
        return cls(ws)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def hidden(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        return list(self.weights)

    def named(self) -> dict[str, np.ndarray]:
        return {f"encoder.W{k + 1}": w.value for k, w in enumerate(self.weights)}

    @classmethod
    def from_named(cls, arrays: dict) -> "EncoderParams":
        K = sum(1 for name in arrays if name.startswith("encoder.W"))
        return cls([Tensor(arrays[f"encoder.W{k + 1}"], requires_grad=True, name=f"encoder.W{k + 1}") for k in range(K)])

    def copy(self) -> "EncoderParams":
        return EncoderParams.from_named({k: v.copy() for k, v in self.named().items()})


@dataclass
class MLPParams:
    """Dense layers with ReLU between them and a linear output layer."""

    weights: list[Tensor]
    biases: list[Tensor]
    prefix: str = "mlp"

    @classmethod
    def init(cls, dims, seed: int, stream: int, prefix: str):
        ws, bs = [], []
        for i in range(len(dims) - 1):
            rng = np.random.default_rng([seed, stream, i])
            ws.append(Tensor(glorot(rng, dims[i], dims[i + 1]), requires_grad=True, name=f"{prefix}.W{i + 1}"))
            bs.append(Tensor(np.zeros(dims[i + 1]), requires_grad=True, name=f"{prefix}.b{i + 1}"))
        return cls(ws, bs, prefix)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.prefix}.W{i + 1}"] = w.value
            out[f"{self.prefix}.b{i + 1}"] = b.value
        return out

    @classmethod
    def from_named(cls, arrays: dict, prefix: str):
        n = sum(1 for name in arrays if name.startswith(f"{prefix}.W"))
        ws = [Tensor(arrays[f"{prefix}.W{i + 1}"], requires_grad=True, name=f"{prefix}.W{i + 1}") for i in range(n)]
        bs = [Tensor(arrays[f"{prefix}.b{i + 1}"], requires_grad=True, name=f"{prefix}.b{i + 1}") for i in range(n)]
        return cls(ws, bs, prefix)

    def copy(self):
        return type(self).from_named({k: v.copy() for k, v in self.named().items()}, self.prefix)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.prefix}: input width {x.shape[-1]} != expected {self.in_dim}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = nd.add(nd.matmul(h, w), b)
            if i < last:
                h = nd.relu(h)
        return h


class SelectorParams(MLPParams):
    """Two-layer score network: d -> D -> 1."""

    @classmethod
    def init(cls, in_dim: int, hidden: int, seed: int, stream: int = SELECTOR_STREAM, prefix: str = "selector"):
        return super().init([in_dim, hidden, 1], seed, stream, prefix)

    @classmethod
    def from_named(cls, arrays: dict, prefix: str = "selector"):
        return super().from_named(arrays, prefix)


class PredictorParams(MLPParams):
    """Three-layer link predictor: in -> h -> h -> 1."""

    @classmethod
    def init(cls, in_dim: int, hidden: int, seed: int, stream: int = PREDICTOR_STREAM, prefix: str = "predictor"):
        return super().init([in_dim, hidden, hidden, 1], seed, stream, prefix)

    @classmethod
    def from_named(cls, arrays: dict, prefix: str = "predictor"):
        return super().from_named(arrays, prefix)


def encode(params: EncoderParams, features, norm_adj: sp.spmatrix) -> list[Tensor]:
    """Return [H1, ..., HK]; H_k = relu(A H_{k-1} W_k), last layer linear."""
    n = norm_adj.shape[0]
    if norm_adj.shape != (n, n):
        raise ShapeError(f"adjacency must be square, got {norm_adj.shape}")
    if features.shape[0] != n:
        raise ShapeError(f"{features.shape[0]} feature rows for {n} nodes")
    if features.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(f"feature width {features.shape[1]} != W1 input width {params.weights[0].shape[0]}")
    layers = []
    h = None
    for k, w in enumerate(params.weights):
        if k == 0:
            if sp.issparse(features):
                xw = nd.spmm(features, w)
            else:
                xw = nd.matmul(nd.as_tensor(features), w)
        else:
            if h.shape[1] != w.shape[0]:
                raise ShapeError(f"layer {k + 1} expects width {w.shape[0]}, got {h.shape[1]}")
            xw = nd.matmul(h, w)
        h = nd.spmm(norm_adj, xw)
        if k < params.K - 1:
            h = nd.relu(h)
        layers.append(h)
    return layers


def candidate_embeddings(layers: list[Tensor], edges) -> Tensor:
    """Elementwise products z^{i,j} = h_u^i * h_v^j in row-major (i, j) order.

    ``edges`` of shape (B, 2) gives a (B, K*K, d) tensor; a single pair gives (K*K, d).
    """
    widths = {h.shape[1] for h in layers}
    if len(widths) != 1:
        raise ConfigError(f"candidate grid needs equal layer widths, got {sorted(widths)}")
    e = np.asarray(edges, dtype=np.int64)
    single = e.ndim == 1
    e = e.reshape(-1, 2)
    K = len(layers)
    d = widths.pop()
    hu = [nd.gather(h, e[:, 0]) for h in layers]
    hv = [nd.gather(h, e[:, 1]) for h in layers]
    z = [nd.mul(hu[i], hv[j]) for i in range(K) for j in range(K)]
    out = nd.reshape(nd.concat(z, axis=-1) if len(z) > 1 else z[0], (len(e), K * K, d))
    return nd.reshape(out, (K * K, d)) if single else out


def score_candidates(selector: SelectorParams, candidates: Tensor) -> Tensor:
    """alpha^{i,j} = g(z^{i,j}); keeps the leading shape of ``candidates``."""
    candidates = nd.as_tensor(candidates)
    lead = candidates.shape[:-1]
    d = candidates.shape[-1]
    if d != selector.in_dim:
        raise ShapeError(f"candidate width {d} != selector input width {selector.in_dim}")
    flat = nd.reshape(candidates, (-1, d))
    return nd.reshape(selector.forward(flat), lead)


def predict(predictor: PredictorParams, z: Tensor) -> Tensor:
    """Scalar logit per edge embedding row."""
    z = nd.as_tensor(z)
    single = z.value.ndim == 1
    if single:
        z = nd.reshape(z, (1, -1))
    if z.shape[-1] != predictor.in_dim:
        raise ShapeError(f"edge embedding width {z.shape[-1]} != predictor input width {predictor.in_dim}")
    out = nd.reshape(predictor.forward(z), (z.shape[0],))
    return nd.reshape(out, ()) if single else out
