"""Pilot run on a 40-node two-block graph; writes the fixture the tests compare against.

Outputs ``two_block.edges``, ``two_block.features`` and ``two_block_pilot.json``
(search and apply metrics for seeds 0-2 under ``PILOT_TRAIN`` / ``PILOT_APPLY``).
"""

import argparse
import json
from pathlib import Path

import numpy as np

from subsel.apply import ApplyConfig, apply_node2link, selection_table_for
from subsel.graph import load_graph, split_edges
from subsel.trainer import TrainConfig, search

PILOT_TRAIN = dict(K=2, D=8, hidden_dim=16, search_predictor_width=16, batch_size=32, max_epochs=15, patience=15)
PILOT_APPLY = dict(finetune_epochs=30, predictor_width=16)
FRACTIONS = (0.7, 0.15, 0.15)
SEEDS = (0, 1, 2)


def make_graph(n=40, seed=0, p_in=0.35, p_out=0.02, dim=8, noise=0.5):
    rng = np.random.default_rng(seed)
    block = np.arange(n) >= n // 2
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)
             if rng.random() < (p_in if block[u] == block[v] else p_out)]
    x = rng.standard_normal((n, dim)) * noise
    x[:, 0] += np.where(block, 1.0, -1.0)
    return n, pairs, x


def run(edges_path: Path, features_path: Path, seed: int) -> dict:
    g = load_graph(edges_path, features_path)
    s = split_edges(g, *FRACTIONS, seed=seed)
    train = TrainConfig(seed=seed, **PILOT_TRAIN)
    result = search(g, s, train)
    applied = apply_node2link(result, selection_table_for(result, s), s, ApplyConfig(seed=seed, **PILOT_APPLY), train)
    return {
        "seed": seed,
        "search_best_epoch": result.best_epoch,
        "search_valid_auc": result.history[result.best_epoch].valid_auc,
        "apply_valid_auc": applied.reports["valid"].auc,
        "apply_test_auc": applied.reports["test"].auc,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path, nargs="?", default=Path(__file__).parents[1] / "tests" / "fixtures")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    n, pairs, x = make_graph()
    edges_path, features_path = args.out / "two_block.edges", args.out / "two_block.features"
    edges_path.write_text(f"# nodes={n}\n" + "".join(f"{u} {v}\n" for u, v in pairs))
    features_path.write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in x))

    runs = [run(edges_path, features_path, seed) for seed in SEEDS]
    record = {"train": PILOT_TRAIN, "apply": PILOT_APPLY, "fractions": FRACTIONS, "runs": runs}
    (args.out / "two_block_pilot.json").write_text(json.dumps(record, indent=2) + "\n")
    for r in runs:
        print(r)


if __name__ == "__main__":
    main()
