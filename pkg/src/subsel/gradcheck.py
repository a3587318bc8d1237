"""Central-difference checks of every primitive and of the composed losses."""

from __future__ import annotations

from importlib import resources

import numpy as np
import scipy.sparse as sp

from . import ndgrad as nd
from .apply import Node2LinkModel, edge_logits
from .encoder import EncoderParams, PredictorParams, encode
from .graph import Graph, load_graph, normalized_adjacency
from .ndgrad import Tensor, grad_check
from .trainer import GraphInputs, SearchModel, TrainConfig, _split_logits, link_loss, sampled_softmax_loss


def fixture_graph() -> Graph:
    """The bundled 6-node, 7-edge graph with 4-dimensional features."""
    data = resources.files("subsel") / "data"
    with resources.as_file(data / "six_node.edges") as edges, resources.as_file(data / "six_node.features") as feats:
        return load_graph(edges, feats)


def _param(rng, *shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:
        # keep entries away from kinks / domain edges so central differences are clean
        x = np.sign(x) * (np.abs(x) + low)
    return Tensor(x, requires_grad=True)


def primitive_checks(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    m = _param(rng, 4, 2)
    row = _param(rng, 4)
    pos = Tensor(np.abs(rng.standard_normal((3, 4))) + 0.5, requires_grad=True)
    kinked = _param(rng, 3, 4, low=0.1)
    adj = sp.csr_matrix(np.array([[0.5, 0.5, 0.0], [0.5, 0.25, 0.25], [0.0, 0.4, 0.6]]))
    w = Tensor(rng.standard_normal((3, 4)))  # fixed weights make every output coordinate matter

    def wsum(t):
        return nd.sum(nd.mul(t, w)) if t.shape == w.shape else nd.sum(nd.mul(t, Tensor(np.cos(np.arange(t.size)).reshape(t.shape))))

    cases = {
        "add": (lambda: wsum(nd.add(a, row)), [a, row]),
        "sub": (lambda: wsum(nd.sub(a, b)), [a, b]),
        "mul": (lambda: wsum(nd.mul(a, b)), [a, b]),
        "scale": (lambda: wsum(nd.scale(a, -2.5)), [a]),
        "matmul": (lambda: wsum(nd.matmul(a, m)), [a, m]),
        "spmm": (lambda: wsum(nd.spmm(adj, a)), [a]),
        "relu": (lambda: wsum(nd.relu(kinked)), [kinked]),
        "sigmoid": (lambda: wsum(nd.sigmoid(a)), [a]),
        "log": (lambda: wsum(nd.log(pos)), [pos]),
        "exp": (lambda: wsum(nd.exp(a)), [a]),
        "concat": (lambda: wsum(nd.concat([a, b], axis=-1)), [a, b]),
        "gather": (lambda: wsum(nd.gather(a, [2, 0, 2, 1])), [a]),
        "reshape": (lambda: wsum(nd.reshape(a, (2, 6))), [a]),
        "sum": (lambda: wsum(nd.sum(a, axis=0)), [a]),
        "mean": (lambda: wsum(nd.mean(a, axis=-1)), [a]),
        "softmax": (lambda: wsum(nd.softmax(a, 0.5)), [a]),
    }
    return {name: grad_check(f, params) for name, (f, params) in cases.items()}


def _generic_biases(params, rng) -> None:
    # Zero-initialised biases put all-zero ReLU rows exactly on the kink, where
    # central differences see half a slope; move them to a generic point.
    for p in params:
        if ".b" in (p.name or ""):
            p.value[...] = 0.1 * rng.standard_normal(p.shape)


def composed_checks(seed: int = 0) -> dict[str, float]:
    """The search-phase link loss (K=2) and the apply-phase concat loss on the fixture."""
    rng = np.random.default_rng([seed, 7])
    graph = fixture_graph()
    inputs = GraphInputs(graph.features, normalized_adjacency(graph))
    cfg = TrainConfig(K=2, D=4, hidden_dim=3, search_predictor_width=3, seed=seed)
    model = SearchModel.init(graph.feature_dim, cfg)
    _generic_biases(model.weights() + model.theta(), rng)
    pos = np.array([[0, 1], [2, 3], [1, 4]])
    neg = np.array([[0, 3], [2, 5], [1, 3]])

    def search_loss():
        return link_loss(model.encoder, model.selector, model.predictor, inputs, pos, neg, tau=0.5)

    encoder = EncoderParams.init(graph.feature_dim, 3, 2, seed)
    n2l = Node2LinkModel(encoder, PredictorParams.init(6, 3, seed))
    _generic_biases(n2l.parameters(), rng)
    edges = np.concatenate([pos, neg])
    hop_i = np.array([1, 2, 2, 1, 2, 2])
    hop_j = np.array([2, 1, 2, 2, 1, 2])

    def apply_loss():
        layers = encode(n2l.encoder, inputs.features, inputs.adj)
        return sampled_softmax_loss(*_split_logits(edge_logits(n2l, layers, edges, hop_i, hop_j), len(pos)))

    return {
        "search_loss": grad_check(search_loss, model.weights() + model.theta()),
        "apply_loss": grad_check(apply_loss, n2l.parameters()),
    }


def run_gradcheck(seed: int = 0) -> dict[str, float]:
    return {**primitive_checks(seed), **composed_checks(seed)}
