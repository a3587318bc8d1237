"""Apply phase: retrain encoder + predictor on concat[h_u^i, h_v^j] under a fixed hop assignment."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ndgrad as nd
from .encoder import EncoderParams, PredictorParams, encode, predict
from .errors import ConfigError, CoverageError, DivergenceError, NumericError
from .graph import EdgeSplit, sample_negative_edges
from .metrics import MetricsReport, auc, evaluate_scores
from .ndgrad import OptimizerState, Tensor, optimizer_step
from .selector import SelectionTable, build_selection_table
from .trainer import (
    SHUFFLE_TAG,
    AuditHook,
    GraphInputs,
    SearchResult,
    TrainConfig,
    _split_logits,
    gradients,
    sampled_softmax_loss,
    search_layers,
)

log = logging.getLogger(__name__)

PRETRAINED = "pretrained"
SCRATCH = "scratch"

# Seed offset separating apply-phase negative streams from the search phase.
APPLY_NEG_STREAM = 1 << 20


@dataclass
class ApplyConfig:
    finetune_epochs: int = 100
    finetune_lr: float = 0.01
    init_mode: str = PRETRAINED
    predictor_width: int = 32
    seed: int = 0

    def validate(self) -> "ApplyConfig":
        if self.finetune_epochs < 1 or self.predictor_width < 1:
            raise ConfigError("finetune_epochs and predictor_width must be positive")
        if self.finetune_lr < 0:
            raise ConfigError("finetune_lr must be non-negative")
        if self.init_mode not in (PRETRAINED, SCRATCH):
            raise ConfigError(f"init_mode must be {PRETRAINED!r} or {SCRATCH!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class ConstantAssignment:
    """Every edge uses layer k at both endpoints."""

    def __init__(self, k: int):
        if k < 1:
            raise ConfigError(f"hop k must be >= 1, got {k}")
        self.k = k

    def __call__(self, edges: np.ndarray):
        ones = np.full(len(edges), self.k, dtype=np.int64)
        return ones, ones.copy()


def _mix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


class RandomAssignment:
    """Uniform (i, j) per undirected edge, a pure function of (seed, u, v)."""

    def __init__(self, K: int, seed: int):
        self.K = K
        self.seed = seed

    def __call__(self, edges: np.ndarray):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
        with np.errstate(over="ignore"):
            h = _mix64(np.uint64(self.seed) ^ _mix64(lo.astype(np.uint64) * np.uint64(0x100000001B3)
                                                      + hi.astype(np.uint64)))
        cell = (h % np.uint64(self.K * self.K)).astype(np.int64)
        i, j = cell // self.K + 1, cell % self.K + 1
        flip = e[:, 0] > e[:, 1]
        return np.where(flip, j, i), np.where(flip, i, j)


class TableAssignment:
    """Look up each edge in a SelectionTable; a miss raises CoverageError."""

    def __init__(self, table: SelectionTable):
        self.table = table

    def __call__(self, edges: np.ndarray):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        i = np.zeros(len(e), np.int64)
        j = np.zeros(len(e), np.int64)
        for r, (u, v) in enumerate(e):
            if (u, v) not in self.table:
                raise CoverageError((int(u), int(v)))
            i[r], j[r] = self.table.lookup(u, v)
        return i, j


@dataclass
class Node2LinkModel:
    encoder: EncoderParams
    predictor: PredictorParams

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.predictor.parameters()

    def named(self) -> dict:
        return {**self.encoder.named(), **self.predictor.named()}

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.named().items()}

    def load(self, arrays: dict) -> None:
        for t in self.parameters():
            t.value[...] = arrays[t.name]

    @classmethod
    def from_named(cls, arrays: dict) -> "Node2LinkModel":
        return cls(EncoderParams.from_named(arrays), PredictorParams.from_named(arrays))


def edge_logits(model: Node2LinkModel, layers: list[Tensor], edges: np.ndarray, i: np.ndarray, j: np.ndarray) -> Tensor:
    """Logits of predictor(concat[h_u^(i), h_v^(j)]) with 1-based per-edge layers."""
    K = len(layers)
    if len(edges) and (i.min() < 1 or j.min() < 1 or i.max() > K or j.max() > K):
        raise ConfigError(f"hop assignment outside 1..{K}")
    n = layers[0].shape[0]
    stacked = nd.concat(layers, axis=0) if K > 1 else layers[0]
    hu = nd.gather(stacked, (i - 1) * n + edges[:, 0])
    hv = nd.gather(stacked, (j - 1) * n + edges[:, 1])
    return predict(model.predictor, nd.concat([hu, hv], axis=-1))


def score(model: Node2LinkModel, inputs: GraphInputs, edges: np.ndarray, assignment) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    i, j = assignment(edges)
    with nd.no_grad():
        layers = encode(model.encoder, inputs.features, inputs.adj)
        return edge_logits(model, layers, edges, i, j).value


@dataclass
class ApplyResult:
    model: Node2LinkModel
    reports: dict
    history: list
    best_epoch: int


def train_node2link(split: EdgeSplit, encoder: EncoderParams, assignment, train_cfg: TrainConfig,
                    apply_cfg: ApplyConfig, audit: AuditHook | None = None) -> ApplyResult:
    """Fit encoder + a fresh predictor under ``assignment``; early-stop on validation AUC.

    Test edges are scored once, after the best epoch is restored.
    """
    train_cfg.validate()
    apply_cfg.validate()
    inputs = GraphInputs.from_graph(split.message_graph)
    predictor = PredictorParams.init(2 * encoder.hidden, apply_cfg.predictor_width, apply_cfg.seed)
    model = Node2LinkModel(encoder, predictor)
    state = OptimizerState(apply_cfg.finetune_lr, train_cfg.optimizer_mode)
    audit = audit or (lambda kind, edges: None)
    n_neg = train_cfg.negatives_per_positive
    seed = apply_cfg.seed

    # Validation assignments are fixed; computing them once keeps table lookups off the hot path.
    valid_edges = np.concatenate([split.valid_pos, split.valid_neg])
    vi, vj = assignment(valid_edges)
    n_valid = len(split.valid_pos)

    history = []
    best_auc, best_epoch, best, since_best = -1.0, -1, None, 0
    for epoch in range(apply_cfg.finetune_epochs):
        order = np.random.default_rng([seed, epoch, SHUFFLE_TAG]).permutation(len(split.train_pos))
        train = split.train_pos[order]
        neg = sample_negative_edges(split, np.repeat(train, n_neg, axis=0), seed, epoch, APPLY_NEG_STREAM)
        # A sampled negative is its anchor with the tail redrawn, so it keeps the anchor's hop pair.
        ti, tj = assignment(train)
        ni, nj = np.repeat(ti, n_neg), np.repeat(tj, n_neg)
        losses = []
        for b, start in enumerate(range(0, len(train), train_cfg.batch_size)):
            stop = min(start + train_cfg.batch_size, len(train))
            pe, ne = train[start:stop], neg[start * n_neg:stop * n_neg]
            audit("train_pos", pe)
            audit("train_neg", ne)
            edges = np.concatenate([pe, ne])
            ii = np.concatenate([ti[start:stop], ni[start * n_neg:stop * n_neg]])
            jj = np.concatenate([tj[start:stop], nj[start * n_neg:stop * n_neg]])

            def loss_fn():
                layers = encode(model.encoder, inputs.features, inputs.adj)
                return sampled_softmax_loss(*_split_logits(edge_logits(model, layers, edges, ii, jj), len(pe)))

            try:
                loss, grads = gradients(loss_fn, model.parameters())
                if not math.isfinite(loss):
                    raise NumericError("non-finite training loss")
                optimizer_step(state, model.parameters(), grads)
            except NumericError as exc:
                raise DivergenceError(epoch, b, str(exc)) from exc
            losses.append(loss)

        audit("valid_pos", split.valid_pos)
        audit("valid_neg", split.valid_neg)
        with nd.no_grad():
            layers = encode(model.encoder, inputs.features, inputs.adj)
            y = edge_logits(model, layers, valid_edges, vi, vj).value
        valid_auc = auc(y[:n_valid], y[n_valid:])
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_auc": valid_auc})
        log.info("apply epoch %d train_loss=%.4f valid_auc=%.4f", epoch, history[-1]["train_loss"], valid_auc)
        if valid_auc > best_auc:
            best_auc, best_epoch, best, since_best = valid_auc, epoch, model.snapshot(), 0
        else:
            since_best += 1
            if since_best >= train_cfg.patience:
                break

    model.load(best)
    reports = evaluate_model(model, split, assignment, audit)
    return ApplyResult(model, reports, history, best_epoch)


def evaluate_model(model: Node2LinkModel, split: EdgeSplit, assignment, audit: AuditHook | None = None) -> dict:
    """Validation and test MetricsReports for a trained node2link model."""
    inputs = GraphInputs.from_graph(split.message_graph)
    reports = {}
    for name, pos, neg in (("valid", split.valid_pos, split.valid_neg), ("test", split.test_pos, split.test_neg)):
        if audit:
            audit(f"{name}_pos", pos)
            audit(f"{name}_neg", neg)
        y = score(model, inputs, np.concatenate([pos, neg]), assignment)
        reports[name] = evaluate_scores(y[:len(pos)], y[len(pos):], name)
    return reports


def required_edges(split: EdgeSplit) -> np.ndarray:
    """Every labelled edge the apply phase will look up."""
    return np.concatenate([split.train_pos, split.valid_pos, split.test_pos, split.valid_neg, split.test_neg])


def selection_table_for(result: SearchResult, split: EdgeSplit) -> SelectionTable:
    return build_selection_table(search_layers(result, split), result.selector, required_edges(split))


def apply_node2link(search: SearchResult, table: SelectionTable, split: EdgeSplit, apply_cfg: ApplyConfig,
                    train_cfg: TrainConfig | None = None, audit: AuditHook | None = None) -> ApplyResult:
    """Retrain encoder + fresh predictor on the hardened table."""
    train_cfg = train_cfg or search.config
    apply_cfg.validate()
    if table.K != search.encoder.K:
        raise ConfigError(f"table K={table.K} does not match encoder K={search.encoder.K}")
    for u, v in required_edges(split):
        if (u, v) not in table:
            raise CoverageError((int(u), int(v)))
    if apply_cfg.init_mode == PRETRAINED:
        encoder = search.encoder.copy()
    else:
        encoder = EncoderParams.init(split.graph.feature_dim, train_cfg.hidden_dim, table.K, apply_cfg.seed)
    return train_node2link(split, encoder, TableAssignment(table), train_cfg, apply_cfg, audit)


def baseline_fixed_k(split: EdgeSplit, k: int, train_cfg: TrainConfig, apply_cfg: ApplyConfig,
                     audit: AuditHook | None = None) -> ApplyResult:
    """Scratch encoder of depth max(K, k), both endpoints read from layer k.

    Sharing the depth-K encoder with the personalized runs makes a constant
    (k, k) table and this baseline the same model under matching seeds.
    """
    depth = max(train_cfg.K, k)
    encoder = EncoderParams.init(split.graph.feature_dim, train_cfg.hidden_dim, depth, apply_cfg.seed)
    return train_node2link(split, encoder, ConstantAssignment(k), train_cfg, apply_cfg, audit)


def random_table(split: EdgeSplit, K: int, seed: int) -> SelectionTable:
    edges = required_edges(split)
    i, j = RandomAssignment(K, seed)(edges)
    table = SelectionTable(K)
    for (u, v), ii, jj in zip(edges, i, j):
        table.set(u, v, ii, jj, 0.0)
    return table


def baseline_random(split: EdgeSplit, train_cfg: TrainConfig, apply_cfg: ApplyConfig,
                    audit: AuditHook | None = None) -> tuple[ApplyResult, SelectionTable]:
    """Uniformly random (i, j) per edge, scratch encoder of depth K."""
    K = train_cfg.K
    table = random_table(split, K, apply_cfg.seed)
    encoder = EncoderParams.init(split.graph.feature_dim, train_cfg.hidden_dim, K, apply_cfg.seed)
    assignment = TableAssignment(table)
    return train_node2link(split, encoder, assignment, train_cfg, apply_cfg, audit), table


def report_to_dict(reports: dict) -> dict:
    return {name: r.to_dict() if isinstance(r, MetricsReport) else r for name, r in reports.items()}
