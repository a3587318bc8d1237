"""Temperature relaxation over the K x K hop grid, hardening, and selection tables."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .encoder import SelectorParams, candidate_embeddings, score_candidates
from .errors import EmptyInputError, NumericError, ParseError, ShapeError
from .ndgrad import Tensor


@dataclass
class CandidateWeights:
    alpha: object  # Tensor or array, last axis of length K*K
    tau: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        n = np.shape(self.alpha.value if isinstance(self.alpha, Tensor) else self.alpha)[-1]
        k = int(round(np.sqrt(n)))
        if k * k != n:
            raise ShapeError(f"score vector length {n} is not a perfect square")

    @property
    def K(self) -> int:
        a = self.alpha.value if isinstance(self.alpha, Tensor) else np.asarray(self.alpha)
        return int(round(np.sqrt(a.shape[-1])))


def soften(weights: CandidateWeights) -> Tensor:
    alpha = nd.as_tensor(weights.alpha)
    if not np.all(np.isfinite(alpha.value)):
        raise NumericError("candidate scores contain non-finite values")
    return nd.softmax(alpha, weights.tau)


def mix(probabilities, candidates) -> Tensor:
    """Convex combination sum_k p_k z_k over the candidate axis."""
    p = nd.as_tensor(probabilities)
    c = nd.as_tensor(candidates)
    if p.shape != c.shape[:-1]:
        raise ShapeError(f"probabilities {p.shape} do not match candidates {c.shape}")
    weighted = nd.mul(nd.reshape(p, p.shape + (1,)), c)
    return nd.sum(weighted, axis=-2)


def harden(weights) -> tuple[int, int]:
    """1-based (i, j) of the largest score; ties go to the smallest row-major index."""
    alpha = weights.alpha if isinstance(weights, CandidateWeights) else weights
    a = np.asarray(alpha.value if isinstance(alpha, Tensor) else alpha, dtype=np.float64).reshape(-1)
    K = int(round(np.sqrt(a.size)))
    if K * K != a.size:
        raise ShapeError(f"score vector length {a.size} is not a perfect square")
    idx = int(np.argmax(a))
    return idx // K + 1, idx % K + 1


def harden_batch(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise :func:`harden` returning (i, j, alpha_max) arrays."""
    alpha = np.asarray(alpha, dtype=np.float64)
    K = int(round(np.sqrt(alpha.shape[-1])))
    idx = np.argmax(alpha, axis=-1)
    amax = alpha[np.arange(len(alpha)), idx]
    return idx // K + 1, idx % K + 1, amax


class SelectionTable:
    """Hardened (i, j) per canonical edge (u < v)."""

    def __init__(self, K: int, entries: dict | None = None):
        self.K = int(K)
        self.entries: dict[tuple[int, int], tuple[int, int, float]] = {}
        for (u, v), val in (entries or {}).items():
            self.set(u, v, *val)

    @staticmethod
    def _key(u, v) -> tuple[int, int]:
        u, v = int(u), int(v)
        return (u, v) if u <= v else (v, u)

    def set(self, u, v, i, j, alpha_max) -> None:
        if not (1 <= i <= self.K and 1 <= j <= self.K):
            raise ValueError(f"hop pair ({i}, {j}) outside 1..{self.K}")
        # An entry for (u, v) with u > v is stored transposed so lookups stay consistent.
        if int(u) > int(v):
            i, j = j, i
        self.entries[self._key(u, v)] = (int(i), int(j), float(alpha_max))

    def lookup(self, u, v) -> tuple[int, int]:
        i, j, _ = self.entries[self._key(u, v)]
        return (i, j) if int(u) <= int(v) else (j, i)

    def __contains__(self, edge) -> bool:
        return self._key(*edge) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, SelectionTable) and self.K == other.K and self.entries == other.entries

    def items(self):
        return sorted(self.entries.items())

    def to_text(self) -> str:
        lines = [f"# K={self.K}"]
        for (u, v), (i, j, a) in self.items():
            lines.append(f"{u}\t{v}\t{i}\t{j}\t{a:.9g}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_text(), encoding="utf-8")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "SelectionTable":
        path = Path(path)
        table = None
        with open(path, encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    body = line.lstrip("#").strip()
                    if body.startswith("K="):
                        table = cls(int(body[2:]))
                    continue
                if table is None:
                    raise ParseError(path, line_no, "missing '# K=<k>' header")
                parts = line.split("\t")
                if len(parts) != 5:
                    raise ParseError(path, line_no, "expected u, v, i, j, alpha_max")
                u, v, i, j = (int(x) for x in parts[:4])
                table.entries[cls._key(u, v)] = (i, j, float(parts[4]))
        if table is None:
            raise ParseError(path, 1, "empty selection table file")
        return table


def score_edges(layers: list[Tensor], selector: SelectorParams, edges) -> np.ndarray:
    """Candidate scores (B, K*K) for each edge, computed without recording."""
    with nd.no_grad():
        cand = candidate_embeddings(layers, np.asarray(edges).reshape(-1, 2))
        return score_candidates(selector, cand).value


def build_selection_table(encoder_out: list[Tensor], selector: SelectorParams, edges, chunk: int = 4096) -> SelectionTable:
    """Harden the selector's scores for every edge in ``edges``."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    layers = [nd.Tensor(h.value) for h in encoder_out]
    K = len(layers)
    table = SelectionTable(K)
    for start in range(0, len(edges), chunk):
        part = edges[start:start + chunk]
        i, j, amax = harden_batch(score_edges(layers, selector, part))
        for (u, v), ii, jj, a in zip(part, i, j, amax):
            table.set(u, v, ii, jj, a)
    return table


def distribution(table: SelectionTable) -> np.ndarray:
    """K x K counts of hardened (i, j) assignments."""
    if len(table) == 0:
        raise EmptyInputError("selection table is empty")
    counts = np.zeros((table.K, table.K), dtype=np.int64)
    for _, (i, j, _) in table.entries.items():
        counts[i - 1, j - 1] += 1
    return counts


def render_distribution(counts: np.ndarray) -> str:
    """Tab-separated K x K matrix; header labels columns by j, rows are labelled by i."""
    K = counts.shape[0]
    rows = ["(i,j)\t" + "\t".join(f"j={j + 1}" for j in range(K))]
    for i in range(K):
        rows.append(f"i={i + 1}\t" + "\t".join(str(int(c)) for c in counts[i]))
    return "\n".join(rows) + "\n"
