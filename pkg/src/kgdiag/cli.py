"""Single executable with subcommands: build-kg, eval-kg, train, evaluate, stats.

Exit codes: 0 success, 2 configuration error, 3 stage failure. All relative
paths in the config resolve against ``--workdir`` (default: the config file's
directory). Commands refuse to overwrite their outputs unless ``--overwrite``
is passed, and each run writes its fully resolved config next to its outputs
so it can be reproduced from a single artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cache import FileCache
from .config import RunConfig, dump_config, load_config
from .data import (
    LabeledDataset,
    group_labels,
    load_label_descriptions,
    load_records_jsonl,
    split_dataset,
)
from .embeddings import (
    HashingTextEncoder,
    init_node_embeddings,
    load_embeddings,
    save_embeddings,
)
from .encoders import MultiFilterCnn, Vocabulary, load_stopwords
from .errors import ConfigError, KgdiagError, NotFoundError
from .extraction import (
    SYMPTOM,
    TREATMENT,
    DictionaryBackend,
    ExtractionResult,
    HttpCompletionClient,
    LlmOneShotCotBackend,
    MatchCounts,
    aggregate_extraction_scores,
    canonical_entity,
    load_prompt_template,
)
from .graph import (
    EdgeKind,
    build_graph,
    graph_stats,
    hierarchy_from_label_coding,
    load_graph,
    save_graph,
)
from .kb import DocumentFetcher, select_sections
from .metrics import EvalReport
from .model import DkecModel, GraphTensors, load_checkpoint, save_checkpoint
from .normalize import (
    ConceptNormalizer,
    FixtureProvider,
    HttpConceptProvider,
    dedupe_by_cui,
)
from .training import (
    build_vocabulary,
    encode_split,
    evaluate_model,
    evaluate_seeds,
    set_reproducible,
    train,
)

logger = logging.getLogger("kgdiag")


def _guard_outputs(paths, overwrite: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not overwrite:
        raise ConfigError(
            "refusing to overwrite existing outputs (pass --overwrite): "
            + ", ".join(existing)
        )


def _load_term_list(path: str) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    return [ln.strip() for ln in lines if ln.strip()]


def _make_backend(config: RunConfig):
    ext = config.extraction
    if ext.backend == "dictionary":
        symptoms = _load_term_list(ext.symptom_terms) if ext.symptom_terms else []
        treatments = _load_term_list(ext.treatment_terms) if ext.treatment_terms else []
        return DictionaryBackend(symptoms, treatments)
    client = HttpCompletionClient(
        endpoint=ext.endpoint,
        model=ext.model,
        api_key_env=ext.api_key_env,
        max_tokens=ext.max_tokens,
    )
    template = load_prompt_template(ext.template)
    return LlmOneShotCotBackend(client, template, audit_path=ext.audit_log)


def _make_normalizer(config: RunConfig) -> ConceptNormalizer | None:
    norm = config.normalization
    if norm.provider == "none":
        return None
    if norm.provider == "fixture":
        provider = FixtureProvider(norm.fixture_dir)
    else:
        provider = HttpConceptProvider(norm.endpoint, api_key_env=norm.api_key_env)
    cache = FileCache(norm.cache_dir) if norm.cache_dir else None
    return ConceptNormalizer(provider, cache)


def _make_node_encoder(config: RunConfig):
    if config.graph.node_encoder == "hashing":
        return HashingTextEncoder(hidden_size=config.graph.node_encoder_hidden)
    from .embeddings import TransformersTextEncoder

    return TransformersTextEncoder(config.graph.node_encoder_model)


def _hierarchy_for_labels(config: RunConfig, labels: list[str]) -> dict[str, str]:
    scheme = config.graph.hierarchy_scheme
    if scheme == "none":
        return {}
    if config.graph.hierarchy_codes:
        codes = json.loads(Path(config.graph.hierarchy_codes).read_text("utf-8"))
        if len(codes) != len(labels):
            raise ConfigError("hierarchy_codes length must match the label vocabulary")
    else:
        codes = labels
    sidecar = None
    if config.graph.hierarchy_sidecar:
        sidecar = json.loads(Path(config.graph.hierarchy_sidecar).read_text("utf-8"))
    ancestors = hierarchy_from_label_coding(scheme, codes, sidecar)
    return {label: ancestors[code] for label, code in zip(labels, codes)}


def cmd_build_kg(config: RunConfig, overwrite: bool) -> int:
    out_dir = Path(config.output_dir)
    if not config.kb.profiles:
        raise ConfigError("build-kg needs at least one KB profile")
    extract_dir = out_dir / "extractions"
    per_kb_graphs = {
        p.kb_id: out_dir / f"graph_{p.kb_id}.json" for p in config.kb.profiles
    }
    outputs = [config.graph.path, config.graph.embeddings, out_dir / "build_report.json"]
    outputs += list(per_kb_graphs.values())
    outputs += [extract_dir / f"{p.kb_id}.jsonl" for p in config.kb.profiles]
    _guard_outputs(outputs, overwrite)
    out_dir.mkdir(parents=True, exist_ok=True)
    extract_dir.mkdir(parents=True, exist_ok=True)

    labels = load_label_descriptions(config.dataset.labels)
    hierarchy = _hierarchy_for_labels(config, labels)
    fetcher = DocumentFetcher(
        FileCache(config.kb.cache_dir),
        rate_per_sec=config.kb.rate_per_sec,
        retries=config.kb.retries,
    )
    backend = _make_backend(config)
    normalizer = _make_normalizer(config)

    report: dict = {"per_kb": {}, "knowledge_unavailable": {}, "normalization_dropped": {}}
    all_triplets: list = []
    kb_graphs = {}
    for profile_cfg in config.kb.profiles:
        profile = profile_cfg.to_profile()
        triplets: list = []
        unavailable: list[str] = []
        dropped = 0
        label_counts: dict[str, dict[str, int]] = {}
        rows: list[dict] = []
        for label in labels:
            try:
                doc = fetcher.fetch_document(profile, label)
                text = select_sections(doc, profile)
                if not text.strip():
                    unavailable.append(label)
                    continue
                result = backend.extract(label, text, kb_id=profile.kb_id)
            except NotFoundError:
                unavailable.append(label)
                continue
            except KgdiagError as exc:
                logger.error("%s/%s: %s", profile.kb_id, label, exc)
                unavailable.append(label)
                continue
            row = {
                "disease": label,
                "symptoms": result.symptoms,
                "treatments": result.treatments,
            }
            if normalizer is not None:
                for role, edge_kind, key in (
                    (SYMPTOM, EdgeKind.HAS_INDICATES, "symptoms_norm"),
                    (TREATMENT, EdgeKind.SUGGESTS_ADMINISTERS, "treatments_norm"),
                ):
                    concepts = []
                    for entity in result.entities(role):
                        concept = normalizer.normalize_entity(entity, role)
                        if concept is None:
                            dropped += 1
                        else:
                            concepts.append(concept)
                    concepts = dedupe_by_cui(concepts)
                    row[key] = [
                        {
                            "surface": c.surface,
                            "concept_name": c.concept_name,
                            "cui": c.cui,
                            "semantic_type": c.semantic_type,
                        }
                        for c in concepts
                    ]
                    triplets.extend((label, edge_kind, c) for c in concepts)
            else:
                triplets.extend(
                    (label, EdgeKind.HAS_INDICATES, s) for s in result.symptoms
                )
                triplets.extend(
                    (label, EdgeKind.SUGGESTS_ADMINISTERS, t) for t in result.treatments
                )
            label_counts[label] = {
                "symptoms": len(result.symptoms),
                "treatments": len(result.treatments),
            }
            rows.append(row)
        hierarchy_kb = {k: v for k, v in hierarchy.items()}
        graph = build_graph(labels, triplets, hierarchy_kb)
        save_graph(graph, per_kb_graphs[profile.kb_id])
        kb_graphs[profile.kb_id] = graph
        with open(extract_dir / f"{profile.kb_id}.jsonl", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        report["per_kb"][profile.kb_id] = label_counts
        report["knowledge_unavailable"][profile.kb_id] = unavailable
        report["normalization_dropped"][profile.kb_id] = dropped
        all_triplets.extend(triplets)

    combined = build_graph(labels, all_triplets, hierarchy)
    save_graph(combined, config.graph.path)
    encoder = _make_node_encoder(config)
    save_embeddings(init_node_embeddings(combined, encoder), config.graph.embeddings)

    if len(kb_graphs) >= 2:
        ids = [p.kb_id for p in config.kb.profiles]
        stats = graph_stats(kb_graphs[ids[0]], kb_graphs[ids[1]])
        report["overlap_pair"] = [ids[0], ids[1]]
        (out_dir / "kg_stats.json").write_text(
            json.dumps(stats.to_jsonable(), indent=2, sort_keys=True) + "\n", "utf-8"
        )
    (out_dir / "build_report.json").write_text(
        json.dumps(report, ensure_ascii=False, indent=2, sort_keys=True) + "\n", "utf-8"
    )
    dump_config(config, out_dir / "resolved_config.yaml")
    total_unavailable = sum(len(v) for v in report["knowledge_unavailable"].values())
    print(
        f"build-kg: {combined.num_labels} labels, {len(combined.nodes)} nodes, "
        f"{len(combined.undirected_edges())} edge pairs, "
        f"{total_unavailable} knowledge-unavailable entries"
    )
    return 0


def _load_extraction_rows(path: Path) -> dict[str, dict]:
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                rows[row["disease"]] = row
    return rows


def _normalized_keys(
    normalizer: ConceptNormalizer, entities: list[str], role: str
) -> list[str]:
    """Match keys after normalization: CUI when mapped, canonical text otherwise."""
    keys = []
    for entity in entities:
        concept = normalizer.normalize_entity(entity, role)
        keys.append(concept.cui if concept else "raw:" + canonical_entity(entity))
    return keys


def cmd_eval_kg(config: RunConfig, pred_dir: str, gold_dir: str, overwrite: bool) -> int:
    out_dir = Path(config.output_dir)
    out_path = out_dir / "kg_eval.json"
    _guard_outputs([out_path], overwrite)
    out_dir.mkdir(parents=True, exist_ok=True)
    normalizer = _make_normalizer(config)
    table: dict[str, dict] = {}
    for gold_file in sorted(Path(gold_dir).glob("*.jsonl")):
        kb_id = gold_file.stem
        pred_file = Path(pred_dir) / "extractions" / f"{kb_id}.jsonl"
        if not pred_file.exists():
            logger.warning("no predictions for KB %s; skipping", kb_id)
            continue
        predictions = _load_extraction_rows(pred_file)
        raw_pairs: list[tuple[ExtractionResult, ExtractionResult]] = []
        norm_counts = {SYMPTOM: MatchCounts(), TREATMENT: MatchCounts()}
        for line in gold_file.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            gold_row = json.loads(line)
            disease = gold_row["disease"]
            if disease not in predictions:
                logger.warning("%s: no prediction for %r; skipping", kb_id, disease)
                continue
            pred_row = predictions[disease]
            pred = ExtractionResult(
                disease, kb_id, pred_row["symptoms"], pred_row["treatments"]
            )
            gold = ExtractionResult(
                disease, kb_id, gold_row["symptoms"], gold_row["treatments"]
            )
            raw_pairs.append((pred, gold))
            if normalizer is not None:
                for role in (SYMPTOM, TREATMENT):
                    pred_keys = set(
                        _normalized_keys(normalizer, pred.entities(role), role)
                    )
                    gold_keys = set(
                        _normalized_keys(normalizer, gold.entities(role), role)
                    )
                    norm_counts[role] = norm_counts[role] + MatchCounts(
                        tp=len(pred_keys & gold_keys),
                        fp=len(pred_keys - gold_keys),
                        fn=len(gold_keys - pred_keys),
                    )
        raw_scores = aggregate_extraction_scores(raw_pairs)
        table[kb_id] = {
            role: {
                "wo_norm": 100.0 * raw_scores[role].f1(),
                "w_norm": (100.0 * norm_counts[role].f1()) if normalizer else None,
                "pairs": len(raw_pairs),
            }
            for role in (SYMPTOM, TREATMENT)
        }
    if not table:
        raise KgdiagError(f"no overlapping gold/prediction files under {gold_dir}")
    out_path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", "utf-8")
    print(f"{'KB':<14}{'role':<12}{'wo NORM':>9}{'w NORM':>9}")
    for kb_id, roles in table.items():
        for role, scores in roles.items():
            w_norm = "-" if scores["w_norm"] is None else f"{scores['w_norm']:.2f}"
            print(f"{kb_id:<14}{role:<12}{scores['wo_norm']:>9.2f}{w_norm:>9}")
    return 0


def _load_dataset(config: RunConfig) -> LabeledDataset:
    records = load_records_jsonl(config.dataset.records)
    labels = load_label_descriptions(config.dataset.labels)
    if config.dataset.split_files:
        splits = {}
        for tag in ("train", "val", "test"):
            path = config.dataset.split_files.get(tag)
            splits[tag] = (
                json.loads(Path(path).read_text("utf-8")) if path else []
            )
        return LabeledDataset(records, labels, splits)
    return split_dataset(
        records,
        labels,
        config.dataset.train_ratio,
        config.dataset.val_fraction,
        config.dataset.split_seed,
    )


def _stopwords(config: RunConfig) -> frozenset[str]:
    if config.dataset.stopwords:
        return load_stopwords(config.dataset.stopwords)
    return frozenset()


def _build_model(config: RunConfig, gt: GraphTensors, vocab_size: int) -> DkecModel:
    if config.encoder.kind == "chunked_pretrained":
        raise ConfigError(
            "train/evaluate commands drive the CNN encoders; chunked pretrained "
            "features are produced through the library API"
        )
    encoder = MultiFilterCnn(
        vocab_size=vocab_size,
        embedding_dim=config.encoder.embedding_dim,
        kernel_sizes=config.encoder.kernel_sizes,
        channels_per_kernel=config.encoder.channels_per_kernel,
        dropout=config.encoder.dropout,
    )
    return DkecModel(gt, config.model, doc_encoder=encoder)


def cmd_train(config: RunConfig, overwrite: bool) -> int:
    out_dir = Path(config.output_dir)
    seeds = config.train.seeds
    outputs = [out_dir / "vocab.json", out_dir / "splits.json", out_dir / "groups.json"]
    outputs += [out_dir / f"checkpoint_seed{s}.pt" for s in seeds]
    outputs += [out_dir / f"train_log_seed{s}.csv" for s in seeds]
    _guard_outputs(outputs, overwrite)
    out_dir.mkdir(parents=True, exist_ok=True)

    graph = load_graph(config.graph.path)
    table = load_embeddings(config.graph.embeddings)
    dataset = _load_dataset(config)
    if dataset.num_labels != graph.num_labels:
        raise ConfigError(
            f"dataset has {dataset.num_labels} labels but the graph indexes {graph.num_labels}"
        )
    stopwords = _stopwords(config)
    vocab = build_vocabulary(dataset, "train", stopwords)
    vocab.save(out_dir / "vocab.json")
    (out_dir / "splits.json").write_text(
        json.dumps(dataset.splits, indent=2, sort_keys=True) + "\n", "utf-8"
    )
    groups = group_labels(dataset.label_matrix("train").sum(axis=0))
    (out_dir / "groups.json").write_text(
        json.dumps(
            {**groups.as_mapping(), "zero": sorted(groups.zero)}, indent=2, sort_keys=True
        )
        + "\n",
        "utf-8",
    )
    max_tokens = config.encoder.max_tokens
    train_data = encode_split(dataset, vocab, "train", stopwords, max_tokens)
    val_data = encode_split(dataset, vocab, "val", stopwords, max_tokens)
    if not val_data.token_ids:
        logger.warning("validation split is empty; monitoring on the training split")
        val_data = train_data

    gt = GraphTensors(graph, table)
    for seed in seeds:
        set_reproducible(seed, single_thread=config.train.deterministic)
        model = _build_model(config, gt, len(vocab))
        result = train(model, train_data, val_data, config.train, seed=seed)
        model.load_state_dict(result.best_state)
        save_checkpoint(
            model,
            out_dir / f"checkpoint_seed{seed}.pt",
            seed=seed,
            epoch=result.best_epoch,
            extra={"monitor": result.best_monitor},
        )
        result.write_log(out_dir / f"train_log_seed{seed}.csv")
        print(
            f"seed {seed}: best epoch {result.best_epoch} "
            f"monitor {result.best_monitor:.4f} "
            f"({'early stop' if result.stopped_early else 'max epochs'})"
        )
    dump_config(config, out_dir / "resolved_config.yaml")
    return 0


def cmd_evaluate(config: RunConfig, overwrite: bool) -> int:
    out_dir = Path(config.output_dir)
    report_json = out_dir / "eval_report.json"
    report_txt = out_dir / "eval_report.txt"
    _guard_outputs([report_json, report_txt], overwrite)
    out_dir.mkdir(parents=True, exist_ok=True)

    checkpoints = {
        seed: out_dir / f"checkpoint_seed{seed}.pt" for seed in config.train.seeds
    }
    if not any(path.exists() for path in checkpoints.values()):
        raise KgdiagError(
            f"no checkpoints found under {out_dir} for seeds {list(config.train.seeds)}; "
            "run the train command first"
        )
    graph = load_graph(config.graph.path)
    table = load_embeddings(config.graph.embeddings)
    dataset = _load_dataset(config)
    splits_path = out_dir / "splits.json"
    if splits_path.exists():
        dataset.splits = {
            k: list(v) for k, v in json.loads(splits_path.read_text("utf-8")).items()
        }
    stopwords = _stopwords(config)
    vocab_path = out_dir / "vocab.json"
    vocab = (
        Vocabulary.load(vocab_path)
        if vocab_path.exists()
        else build_vocabulary(dataset, "train", stopwords)
    )
    groups = group_labels(dataset.label_matrix("train").sum(axis=0))
    test_data = encode_split(dataset, vocab, "test", stopwords, config.encoder.max_tokens)
    gt = GraphTensors(graph, table)

    metrics_by_seed = {}
    for seed, path in checkpoints.items():
        if not path.exists():
            metrics_by_seed[seed] = None
            continue
        manifest, state = load_checkpoint(path)
        model = _build_model(config, gt, len(vocab))
        model.load_state_dict(state)
        metrics_by_seed[seed] = evaluate_model(
            model, test_data, groups, config.eval.k, config.eval.threshold
        )
    report = evaluate_seeds(metrics_by_seed, config.eval.k)
    report.save(report_json)
    table_text = report.render_table()
    report_txt.write_text(table_text + "\n", "utf-8")
    print(table_text)
    return 0


def cmd_stats(graph_path: str, other_path: str | None) -> int:
    graph = load_graph(graph_path)
    other = load_graph(other_path) if other_path else None
    stats = graph_stats(graph, other)
    print(json.dumps(stats.to_jsonable(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgdiag",
        description="Knowledge-graph-enhanced multi-label diagnosis prediction pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"kgdiag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument(
        "--workdir", default=None, help="root for relative config paths"
    )
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument(
        "--dry-run", action="store_true", help="validate the config and exit"
    )

    sub.add_parser("build-kg", parents=[common], help="fetch, extract, normalize, build graphs")
    eval_kg = sub.add_parser(
        "eval-kg", parents=[common], help="score extractions against gold annotations"
    )
    eval_kg.add_argument("--gold", required=True, help="directory of <kb_id>.jsonl gold files")
    eval_kg.add_argument(
        "--pred-dir", default=None, help="build-kg output dir (default: config output_dir)"
    )
    sub.add_parser("train", parents=[common], help="train one model per configured seed")
    sub.add_parser("evaluate", parents=[common], help="evaluate checkpoints into a report")
    stats = sub.add_parser("stats", help="graph statistics and two-graph overlap")
    stats.add_argument("--graph", required=True)
    stats.add_argument("--other", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "stats":
            return cmd_stats(args.graph, args.other)
        config = load_config(args.config, args.workdir)
        if args.dry_run:
            print(f"config OK: outputs -> {config.output_dir}")
            return 0
        if args.command == "build-kg":
            return cmd_build_kg(config, args.overwrite)
        if args.command == "eval-kg":
            pred_dir = args.pred_dir or config.output_dir
            return cmd_eval_kg(config, pred_dir, args.gold, args.overwrite)
        if args.command == "train":
            return cmd_train(config, args.overwrite)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.overwrite)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except KgdiagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
