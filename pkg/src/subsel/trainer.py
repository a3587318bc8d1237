"""Search phase: link loss, one-step unrolled hypergradient, alternating bi-level loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import ndgrad as nd
from .encoder import (
    EncoderParams,
    PredictorParams,
    SelectorParams,
    candidate_embeddings,
    encode,
    predict,
    score_candidates,
)
from .errors import ConfigError, ContractError, DivergenceError, NumericError
from .graph import EdgeSplit, Graph, normalized_adjacency, sample_negative_edges
from .metrics import auc
from .ndgrad import ADAPTIVE, PLAIN, OptimizerState, Tape, Tensor, optimizer_step
from .selector import CandidateWeights, mix, soften

log = logging.getLogger(__name__)

# Stream ids for per-epoch permutations, far above the negative-sampling streams.
SHUFFLE_TAG = 2**31 - 1
VALID_ORDER_TAG = 2**31 - 2

AuditHook = Callable[[str, np.ndarray], None]


@dataclass
class TrainConfig:
    K: int = 3
    D: int = 256
    tau: float = 0.5
    tau_anneal: bool = False
    lower_lr: float = 0.01
    upper_lr: float = 0.01
    epsilon_scale: float = 0.01
    batch_size: int = 1024
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    optimizer_mode: str = ADAPTIVE
    negatives_per_positive: int = 1
    hidden_dim: int = 32
    search_predictor_width: int = 32

    def validate(self) -> "TrainConfig":
        for name in ("K", "D", "batch_size", "max_epochs", "patience", "negatives_per_positive",
                     "hidden_dim", "search_predictor_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("tau", "epsilon_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lower_lr", "upper_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")
        if self.optimizer_mode not in (PLAIN, ADAPTIVE):
            raise ConfigError(f"optimizer_mode must be {PLAIN!r} or {ADAPTIVE!r}")
        return self

    def tau_at(self, epoch: int) -> float:
        """Constant tau, or a linear 1.0 -> 0.1 schedule over the epoch budget."""
        if not self.tau_anneal:
            return self.tau
        frac = epoch / max(1, self.max_epochs - 1)
        return 1.0 + (0.1 - 1.0) * frac

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class GraphInputs:
    """Encoder inputs for one message-passing graph."""

    features: object  # ndarray or scipy CSR
    adj: sp.csr_matrix

    @classmethod
    def from_graph(cls, graph: Graph) -> "GraphInputs":
        x = graph.features
        if x.size and np.count_nonzero(x) / x.size < 0.1:
            x = sp.csr_matrix(x)
        return cls(x, normalized_adjacency(graph))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class SearchModel:
    encoder: EncoderParams
    selector: SelectorParams
    predictor: PredictorParams

    @classmethod
    def init(cls, feature_dim: int, cfg: TrainConfig) -> "SearchModel":
        return cls(
            EncoderParams.init(feature_dim, cfg.hidden_dim, cfg.K, cfg.seed),
            SelectorParams.init(cfg.hidden_dim, cfg.D, cfg.seed),
            PredictorParams.init(cfg.hidden_dim, cfg.search_predictor_width, cfg.seed),
        )

    def weights(self) -> list[Tensor]:
        """The lower-level parameters w (encoder + predictor)."""
        return self.encoder.parameters() + self.predictor.parameters()

    def theta(self) -> list[Tensor]:
        return self.selector.parameters()

    def named(self) -> dict[str, np.ndarray]:
        return {**self.encoder.named(), **self.selector.named(), **self.predictor.named()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named().items()}

    def load(self, arrays: dict) -> None:
        for t in self.weights() + self.theta():
            t.value[...] = arrays[t.name]

    @classmethod
    def from_named(cls, arrays: dict) -> "SearchModel":
        return cls(
            EncoderParams.from_named(arrays),
            SelectorParams.from_named(arrays),
            PredictorParams.from_named(arrays),
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_auc: float


@dataclass
class SearchResult:
    selector: SelectorParams
    encoder: EncoderParams
    predictor: PredictorParams
    history: list[EpochRecord]
    best_epoch: int
    config: TrainConfig
    hypergradient_calls: int = 0
    final_params: dict = field(default_factory=dict, repr=False)
    epoch_seconds: list = field(default_factory=list, repr=False)

    @property
    def model(self) -> SearchModel:
        return SearchModel(self.encoder, self.selector, self.predictor)


@dataclass
class LinkBatch:
    pos: np.ndarray
    neg: np.ndarray


def mixed_logits(model: SearchModel, layers: list[Tensor], edges: np.ndarray, tau: float) -> Tensor:
    """Predictor logits on the softmax-mixed K x K candidate embedding of each edge."""
    cand = candidate_embeddings(layers, edges)
    alpha = score_candidates(model.selector, cand)
    probs = soften(CandidateWeights(alpha, tau))
    return predict(model.predictor, mix(probs, cand))


def sampled_softmax_loss(pos_logits: Tensor, neg_logits: Tensor) -> Tensor:
    """mean_b [ logsumexp(y_b, negatives_b) - y_b ] with a stop-gradient max shift.

    ``neg_logits`` has ``n * B`` entries, the negatives of positive ``b`` at
    rows ``b*n .. b*n+n-1``.
    """
    B = pos_logits.shape[0]
    if B == 0:
        raise ContractError("link loss needs a non-empty batch")
    if neg_logits.shape[0] % B:
        raise ContractError(f"{neg_logits.shape[0]} negatives for {B} positives")
    n = neg_logits.shape[0] // B
    grid = nd.concat([nd.reshape(pos_logits, (B, 1)), nd.reshape(neg_logits, (B, n))], axis=-1)
    shift = grid.value.max(axis=-1, keepdims=True)
    lse = nd.add(nd.log(nd.sum(nd.exp(nd.sub(grid, shift)), axis=-1)), shift.reshape(-1))
    return nd.mean(nd.sub(lse, pos_logits))


def _split_logits(logits: Tensor, n_pos: int) -> tuple[Tensor, Tensor]:
    col = nd.reshape(logits, (-1, 1))
    total = logits.shape[0]
    pos = nd.reshape(nd.gather(col, np.arange(n_pos)), (n_pos,))
    neg = nd.reshape(nd.gather(col, np.arange(n_pos, total)), (total - n_pos,))
    return pos, neg


def link_loss(encoder, selector, predictor, inputs: GraphInputs, pos_edges, neg_edges, tau: float = 0.5) -> Tensor:
    """Sampled-softmax link loss on mixed edge embeddings; one encoder pass."""
    pos_edges = np.asarray(pos_edges, dtype=np.int64).reshape(-1, 2)
    neg_edges = np.asarray(neg_edges, dtype=np.int64).reshape(-1, 2)
    if len(pos_edges) == 0:
        raise ContractError("link loss needs a non-empty batch")
    model = SearchModel(encoder, selector, predictor)
    layers = encode(encoder, inputs.features, inputs.adj)
    logits = mixed_logits(model, layers, np.concatenate([pos_edges, neg_edges]), tau)
    return sampled_softmax_loss(*_split_logits(logits, len(pos_edges)))


def _loss_fn(model: SearchModel, inputs: GraphInputs, batch: LinkBatch, tau: float):
    return lambda: link_loss(model.encoder, model.selector, model.predictor, inputs, batch.pos, batch.neg, tau)


def gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    nd.backward(tape, loss)
    return loss.item(), [p.grad.copy() for p in params]


def lower_step(model: SearchModel, inputs: GraphInputs, batch: LinkBatch, lr: float, tau: float = 0.5,
               state: OptimizerState | None = None) -> float:
    """One descent step on w = (encoder, predictor) with the selector frozen.

    Updates the model in place and returns the pre-step training loss. Without
    ``state`` this is exactly w <- w - lr * grad_w L_train.
    """
    w = model.weights()
    for t in model.theta():
        t.zero_grad()
    loss, grads = gradients(_loss_fn(model, inputs, batch, tau), w)
    if not math.isfinite(loss):
        raise NumericError("non-finite training loss")
    optimizer_step(state or OptimizerState(lr, PLAIN), w, grads)
    return loss


def unrolled_hypergradient(w: Sequence[Tensor], theta: Sequence[Tensor], train_loss: Callable[[], Tensor],
                           valid_loss: Callable[[], Tensor], lr: float, epsilon_scale: float) -> list[np.ndarray]:
    """Finite-difference approximation of d/dtheta L_valid(w - lr * grad_w L_train(w, theta), theta).

    Returns grad_theta L_valid(w', theta)
      - lr * [grad_theta L_train(w+, theta) - grad_theta L_train(w-, theta)] / (2 eps)
    with w' = w - lr * grad_w L_train, w+- = w +- eps * grad_w' L_valid(w', theta)
    and eps = epsilon_scale / ||grad_w' L_valid||. ``w`` is restored before returning.
    """
    w, theta = list(w), list(theta)
    w0 = [p.value.copy() for p in w]
    everything = w + theta
    try:
        _, g_train = gradients(train_loss, everything)
        for p, g in zip(w, g_train[:len(w)]):
            p.value -= lr * g
        _, g_valid = gradients(valid_loss, everything)
        g_w, d_theta = g_valid[:len(w)], g_valid[len(w):]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in g_w))
        if norm == 0.0:
            return d_theta
        eps = epsilon_scale / norm
        for p, p0, g in zip(w, w0, g_w):
            p.value[...] = p0 + eps * g
        _, g_plus = gradients(train_loss, everything)
        for p, p0, g in zip(w, w0, g_w):
            p.value[...] = p0 - eps * g
        _, g_minus = gradients(train_loss, everything)
        g_plus, g_minus = g_plus[len(w):], g_minus[len(w):]
        return [dt - lr * (gp - gm) / (2.0 * eps) for dt, gp, gm in zip(d_theta, g_plus, g_minus)]
    finally:
        for p, p0 in zip(w, w0):
            p.value[...] = p0


def hypergradient(model: SearchModel, inputs: GraphInputs, train_batch: LinkBatch, valid_batch: LinkBatch,
                  lr: float, epsilon_scale: float, tau: float = 0.5) -> list[np.ndarray]:
    """Selector gradient through one unrolled plain step of the encoder/predictor."""
    return unrolled_hypergradient(
        model.weights(), model.theta(),
        _loss_fn(model, inputs, train_batch, tau),
        _loss_fn(model, inputs, valid_batch, tau),
        lr, epsilon_scale,
    )


def evaluate_mixed(model: SearchModel, inputs: GraphInputs, pos: np.ndarray, neg: np.ndarray, tau: float):
    """(loss, auc) of the mixed model on fixed positives and negatives."""
    with nd.no_grad():
        layers = encode(model.encoder, inputs.features, inputs.adj)
        logits = mixed_logits(model, layers, np.concatenate([pos, neg]), tau)
    y = logits.value
    yp, yn = y[:len(pos)], y[len(pos):]
    m = min(len(yp), len(yn))
    pair = np.stack([yp[:m], yn[:m]], axis=1)
    shift = pair.max(axis=1)
    loss = float(np.mean(np.log(np.exp(pair - shift[:, None]).sum(axis=1)) + shift - yp[:m]))
    return loss, auc(yp, yn)


def _batches(n: int, size: int):
    for b, start in enumerate(range(0, n, size)):
        yield b, slice(start, min(start + size, n))


def _epoch_negatives(split, anchors, n_neg, seed, epoch, stream):
    return sample_negative_edges(split, np.repeat(anchors, n_neg, axis=0), seed, epoch, stream)


def _run(split: EdgeSplit, cfg: TrainConfig, bilevel: bool, audit: AuditHook | None) -> SearchResult:
    cfg.validate()
    if len(split.train_pos) == 0 or len(split.valid_pos) == 0 or len(split.valid_neg) == 0:
        raise ContractError("search needs non-empty train and validation edges")
    inputs = GraphInputs.from_graph(split.message_graph)
    model = SearchModel.init(inputs.feature_dim, cfg)
    n_neg = cfg.negatives_per_positive
    if bilevel:
        lower_state = OptimizerState(cfg.lower_lr, cfg.optimizer_mode)
        upper_state = OptimizerState(cfg.upper_lr, cfg.optimizer_mode)
    else:
        joint_state = OptimizerState(cfg.lower_lr, cfg.optimizer_mode)
    audit = audit or (lambda kind, edges: None)

    history: list[EpochRecord] = []
    seconds: list[float] = []
    best_auc, best_epoch, best_params, since_best = -1.0, -1, None, 0
    n_hyper = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        tau = cfg.tau_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch, SHUFFLE_TAG]).permutation(len(split.train_pos))
        train = split.train_pos[order]
        train_neg = _epoch_negatives(split, train, n_neg, cfg.seed, epoch, 0)
        valid_order = np.random.default_rng([cfg.seed, epoch, VALID_ORDER_TAG]).permutation(len(split.valid_pos))
        vsize = min(cfg.batch_size, len(split.valid_pos))
        losses = []
        for b, sl in _batches(len(train), cfg.batch_size):
            batch = LinkBatch(train[sl], train_neg[sl.start * n_neg:sl.stop * n_neg])
            audit("train_pos", batch.pos)
            audit("train_neg", batch.neg)
            try:
                if bilevel:
                    vidx = np.take(valid_order, np.arange(b * vsize, (b + 1) * vsize), mode="wrap")
                    vpos = split.valid_pos[vidx]
                    vbatch = LinkBatch(vpos, _epoch_negatives(split, vpos, n_neg, cfg.seed, epoch, 1 + b))
                    audit("valid_pos", vbatch.pos)
                    audit("valid_neg", vbatch.neg)
                    g_theta = hypergradient(model, inputs, batch, vbatch, cfg.lower_lr, cfg.epsilon_scale, tau)
                    n_hyper += 1
                    optimizer_step(upper_state, model.theta(), g_theta)
                    losses.append(lower_step(model, inputs, batch, cfg.lower_lr, tau, lower_state))
                else:
                    params = model.weights() + model.theta()
                    loss, grads = gradients(_loss_fn(model, inputs, batch, tau), params)
                    if not math.isfinite(loss):
                        raise NumericError("non-finite training loss")
                    optimizer_step(joint_state, params, grads)
                    losses.append(loss)
            except NumericError as exc:
                raise DivergenceError(epoch, b, str(exc)) from exc

        audit("valid_pos", split.valid_pos)
        audit("valid_neg", split.valid_neg)
        try:
            valid_loss, valid_auc = evaluate_mixed(model, inputs, split.valid_pos, split.valid_neg, tau)
        except NumericError as exc:
            raise DivergenceError(epoch, len(losses), str(exc)) from exc
        history.append(EpochRecord(epoch, float(np.mean(losses)), valid_loss, valid_auc))
        seconds.append(time.perf_counter() - t0)
        log.info("epoch %d train_loss=%.4f valid_loss=%.4f valid_auc=%.4f", epoch, history[-1].train_loss,
                 valid_loss, valid_auc)
        if valid_auc > best_auc:
            best_auc, best_epoch, best_params, since_best = valid_auc, epoch, model.snapshot(), 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    final = model.snapshot()
    model.load(best_params)
    return SearchResult(model.selector, model.encoder, model.predictor, history, best_epoch, cfg,
                        hypergradient_calls=n_hyper, final_params=final, epoch_seconds=seconds)


def search(graph: Graph, split: EdgeSplit, config: TrainConfig, audit: AuditHook | None = None) -> SearchResult:
    """Alternate upper (selector, via hypergradient) and lower (encoder+predictor) steps per minibatch.

    Messages pass over ``split.message_graph`` only. Returns the parameters of
    the epoch with the best validation AUC.
    """
    if split.graph is not graph and split.graph.fingerprint() != graph.fingerprint():
        raise ContractError("split was not built from this graph")
    return _run(split, config, bilevel=True, audit=audit)


def joint_train(graph: Graph, split: EdgeSplit, config: TrainConfig, audit: AuditHook | None = None) -> SearchResult:
    """Single-level ablation: selector and weights descend the training loss together."""
    if split.graph is not graph and split.graph.fingerprint() != graph.fingerprint():
        raise ContractError("split was not built from this graph")
    return _run(split, config, bilevel=False, audit=audit)


def search_layers(result: SearchResult, split: EdgeSplit) -> list[Tensor]:
    """Frozen per-layer embeddings of the searched encoder on the message graph."""
    inputs = GraphInputs.from_graph(split.message_graph)
    with nd.no_grad():
        return [Tensor(h.value) for h in encode(result.encoder, inputs.features, inputs.adj)]
