#!/usr/bin/env python3
"""Write a ready-to-run workspace for the CLI from the synthetic corpus.

Produces records.jsonl, labels.json, graph.json, embeddings.bin and a
config.yaml wired together, so `kgdiag train --config <dir>/config.yaml`
works immediately.
"""

import argparse
import sys
from pathlib import Path

import yaml

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from kgdiag.synthetic import generate_corpus, write_corpus_workspace


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--corpus-seed", type=int, default=0)
    parser.add_argument("--seeds", type=int, nargs="+", default=[42])
    parser.add_argument("--max-epochs", type=int, default=50)
    parser.add_argument("--encoder-hidden", type=int, default=64)
    args = parser.parse_args()

    corpus = generate_corpus(seed=args.corpus_seed)
    paths = write_corpus_workspace(
        corpus, args.out_dir, encoder_hidden=args.encoder_hidden
    )
    config = {
        "output_dir": "run",
        "dataset": {"records": "records.jsonl", "labels": "labels.json"},
        "graph": {"path": "graph.json", "embeddings": "embeddings.bin"},
        "encoder": {
            "kind": "multi_filter_cnn",
            "embedding_dim": 50,
            "kernel_sizes": [3, 5],
            "channels_per_kernel": 50,
            "dropout": 0.2,
        },
        "model": {
            "hidden_size": 64,
            "num_heads": 4,
            "hgt_layers": 1,
            "label_dim": 64,
            "pooling": "sum",
            "dropout": 0.2,
        },
        "train": {
            "learning_rate": 0.001,
            "batch_size": 32,
            "max_epochs": args.max_epochs,
            "patience": 10,
            "monitor_k": 1,
            "seeds": args.seeds,
            "deterministic": True,
        },
        "eval": {"k": 1},
    }
    config_path = args.out_dir / "config.yaml"
    config_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    for name, path in paths.items():
        print(f"{name}: {path}")
    print(f"config: {config_path}")
    print(f"next: kgdiag train --config {config_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
