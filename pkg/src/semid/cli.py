"""Command line front end.

Every subcommand reads hyperparameters from a JSON config (defaults
apply when none is given), tweakable with repeated ``--set key=value``
flags, and writes its artifacts into ``--out``. Exit codes: 0 success,
1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .cf import BprMF, nearest_cf_pairs
from .config import (
    PRESETS,
    PipelineConfig,
    apply_overrides,
    load_config,
    preset_config,
)
from .diagnostics import (
    cf_ranking_results,
    code_histogram,
    code_overlap_similarity,
    export_code_embedding_pca,
    grouped_frequency_summary,
    quantized_embedding_ranking,
)
from .embeddings import EmbeddingTable
from .exceptions import DataError, NumericError, ParameterError, SemidError
from .interactions import load_and_split, save_interactions
from .metrics import ndcg_at_k, recall_at_k
from .pipeline import (
    StageError,
    run_pipeline,
    save_tokenizer_log,
    write_csv,
)
from .recommender import GenerativeRecommender
from .synthetic import generate
from .tokenizer import SemanticIdTokenizer
from .vocab import IdentifierSet


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise ParameterError(message)


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="config override, e.g. --set tokenizer.alpha=0.1 (repeatable)",
    )

    parser = _Parser(prog="semid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic catalog and log")

    p = sub.add_parser("split", parents=[common], help="filter interactions and report the split")
    p.add_argument("--interactions", required=True)

    p = sub.add_parser("train-cf", parents=[common], help="train collaborative item embeddings")
    p.add_argument("--interactions", required=True)

    p = sub.add_parser("train-tokenizer", parents=[common], help="train the identifier tokenizer")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--cf-embeddings", help="CF table, required when tokenizer.alpha > 0")

    p = sub.add_parser("tokenize", parents=[common], help="assign identifiers to a catalog")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--embeddings", required=True)

    p = sub.add_parser("train-rec", parents=[common], help="train the generative recommender")
    p.add_argument("--interactions", required=True)
    p.add_argument("--identifiers", required=True)

    p = sub.add_parser("recommend", parents=[common], help="top-k items after each user's history")
    p.add_argument("--recommender", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--k", type=int, default=10)

    p = sub.add_parser("evaluate", parents=[common], help="held-out ranking metrics")
    p.add_argument("--recommender", required=True)
    p.add_argument("--interactions", required=True)

    p = sub.add_parser("diagnose", parents=[common], help="code usage and alignment reports")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument(
        "--interactions", help="adds CF-dependent diagnostics (trains the CF model)"
    )

    p = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    p.add_argument("--preset", choices=sorted(PRESETS), help="ablation preset")

    return parser


def _resolve_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "preset", None):
        config = preset_config(args.preset, config)
    if args.overrides:
        config = apply_overrides(config, args.overrides)
    if args.seed is not None:
        config = apply_overrides(config, [f"seed={args.seed}"])
    return config.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _events_of(dataset) -> list[tuple[int, int, int]]:
    return [
        (user, item, step)
        for user in dataset.users()
        for step, item in enumerate(dataset.sequences[user])
    ]


def _cmd_gen_data(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    made = generate(config.data.synthetic, config.seed)
    save_interactions(made.events, out / "interactions.tsv")
    made.semantic.save(out / "semantic_embeddings.tsv")
    write_csv(
        out / "topics.csv",
        ["item_id", "semantic_topic", "behavior_topic"],
        [
            (i, int(made.semantic_topic[i]), int(made.behavior_topic[i]))
            for i in range(len(made.semantic_topic))
        ],
    )
    print(f"wrote {out / 'interactions.tsv'}")
    print(f"wrote {out / 'semantic_embeddings.tsv'}")
    print(f"wrote {out / 'topics.csv'}")


def _cmd_split(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    dataset = load_and_split(args.interactions, min_count=config.data.min_count)
    save_interactions(_events_of(dataset), out / "filtered_interactions.tsv")
    write_csv(
        out / "split_summary.csv",
        ["user_id", "n_train", "validation_item", "test_item"],
        [
            (u, len(dataset.train_items(u)), dataset.validation_target(u), dataset.test_target(u))
            for u in dataset.users()
        ],
    )
    print(f"{len(dataset.users())} users, {len(dataset.items())} items after filtering")
    print(f"wrote {out / 'filtered_interactions.tsv'}")
    print(f"wrote {out / 'split_summary.csv'}")


def _fit_cf(config: PipelineConfig, dataset) -> BprMF:
    return BprMF(
        n_factors=config.cf.n_factors,
        epochs=config.cf.epochs,
        learning_rate=config.cf.learning_rate,
        reg=config.cf.reg,
        batch_size=config.cf.batch_size,
        seed=config.seed,
    ).fit(dataset)


def _cmd_train_cf(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    dataset = load_and_split(args.interactions, min_count=config.data.min_count)
    cf = _fit_cf(config, dataset)
    cf.item_embedding_table().save(out / "cf_embeddings.tsv")
    write_csv(
        out / "cf_log.csv",
        ["epoch", "loss"],
        list(enumerate(cf.loss_history_)),
    )
    print(f"wrote {out / 'cf_embeddings.tsv'}")
    print(f"wrote {out / 'cf_log.csv'}")


def _cmd_train_tokenizer(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    semantic = EmbeddingTable.load(args.embeddings)
    cf_table = EmbeddingTable.load(args.cf_embeddings) if args.cf_embeddings else None
    if cf_table is not None:
        # the CF table only covers items with enough interactions; train on those
        covered = sorted(set(semantic.ids) & set(cf_table.ids))
        if not covered:
            raise DataError("semantic and CF tables share no item ids")
        semantic = semantic.subset(covered)
    t = config.tokenizer
    tokenizer = SemanticIdTokenizer(
        levels=t.levels,
        codebook_size=t.codebook_size,
        code_dim=t.code_dim,
        hidden=tuple(t.hidden),
        mu=t.mu,
        alpha=t.alpha,
        cf_norm=t.cf_norm,
        beta=t.beta,
        n_clusters=t.n_clusters,
        contrastive_mode=t.contrastive_mode,
        diversity_levels=t.diversity_levels,
        epochs=t.epochs,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        weight_decay=t.weight_decay,
        kmeans_refresh=t.kmeans_refresh,
        dead_code_restart=t.dead_code_restart,
        seed=config.seed,
    ).fit(semantic, cf_table)
    tokenizer.save(out / "tokenizer.json")
    save_tokenizer_log(tokenizer.log_, t.levels, out / "tokenizer_log.csv")
    print(f"wrote {out / 'tokenizer.json'}")
    print(f"wrote {out / 'tokenizer_log.csv'}")


def _cmd_tokenize(args) -> None:
    _resolve_config(args)
    out = _out_dir(args)
    tokenizer = SemanticIdTokenizer.load(args.tokenizer)
    semantic = EmbeddingTable.load(args.embeddings)
    identifiers = tokenizer.assign_identifiers(semantic)
    identifiers.save(out / "identifiers.tsv")
    print(f"{len(identifiers)} identifiers, collision rate {tokenizer.collision_rate_:.4f}")
    print(f"wrote {out / 'identifiers.tsv'}")


def _cmd_train_rec(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    dataset = load_and_split(args.interactions, min_count=config.data.min_count)
    identifiers = IdentifierSet.load(args.identifiers)
    r = config.recommender
    rec = GenerativeRecommender(
        d_model=r.d_model,
        n_layers=r.n_layers,
        n_heads=r.n_heads,
        ffn_dim=r.ffn_dim,
        epochs=r.epochs,
        batch_size=r.batch_size,
        learning_rate=r.learning_rate,
        weight_decay=r.weight_decay,
        tau=r.tau,
        mode=r.mode,
        history_cap=r.history_cap,
        beam_width=r.beam_width,
        validation_users=r.validation_users,
        validation_every=r.validation_every,
        seed=config.seed,
    ).fit(dataset, identifiers)
    rec.save(out / "recommender.json")
    has_recall = any("validation_recall@10" in e for e in rec.log_)
    header = ["epoch", "loss"] + (["validation_recall@10"] if has_recall else [])
    rows = []
    for entry in rec.log_:
        row = [entry["epoch"], entry["loss"]]
        if has_recall:
            row.append(entry.get("validation_recall@10", ""))
        rows.append(row)
    write_csv(out / "rec_log.csv", header, rows)
    print(f"wrote {out / 'recommender.json'}")
    print(f"wrote {out / 'rec_log.csv'}")


def _cmd_recommend(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    rec = GenerativeRecommender.load(args.recommender)
    dataset = load_and_split(args.interactions, min_count=config.data.min_count)
    rows = []
    for user in dataset.users():
        for position, (item, score) in enumerate(rec.recommend(dataset.sequences[user], k=args.k), start=1):
            rows.append((user, position, item, score))
    write_csv(out / "recommendations.csv", ["user_id", "rank", "item_id", "score"], rows)
    print(f"wrote {out / 'recommendations.csv'}")


def _cmd_evaluate(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    rec = GenerativeRecommender.load(args.recommender)
    dataset = load_and_split(args.interactions, min_count=config.data.min_count)
    k_values = tuple(config.evaluation.k_values)
    results = rec.evaluate(dataset, stage=config.evaluation.stage, k=max(k_values))
    metrics = {}
    for k in k_values:
        metrics[f"recall@{k}"] = recall_at_k(results, k)
        metrics[f"ndcg@{k}"] = ndcg_at_k(results, k)
    write_csv(out / "metrics.csv", ["metric", "value"], list(metrics.items()))
    for name, value in metrics.items():
        print(f"{name} = {value:.4f}")
    print(f"wrote {out / 'metrics.csv'}")


def _cmd_diagnose(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    tokenizer = SemanticIdTokenizer.load(args.tokenizer)
    semantic = EmbeddingTable.load(args.embeddings)
    identifiers = tokenizer.assign_identifiers(semantic)
    summary: dict[str, float] = {"collision_rate": identifiers.collision_rate()}
    for level in range(1, tokenizer.levels + 1):
        hist = code_histogram(identifiers, level)
        summary[f"entropy_l{level}"] = hist.entropy
        summary[f"utilization_l{level}"] = float(hist.utilization)
        write_csv(
            out / f"code_frequency_level{level}.csv",
            ["group_index", "mean_frequency"],
            grouped_frequency_summary(hist),
        )
        export_code_embedding_pca(
            tokenizer.codebooks_, level, identifiers, out / f"pca_level{level}.csv"
        )
    if args.interactions:
        dataset = load_and_split(args.interactions, min_count=config.data.min_count)
        cf = _fit_cf(config, dataset)
        pairs = nearest_cf_pairs(cf.item_embedding_table())
        summary["code_overlap_nearest_cf"] = code_overlap_similarity(identifiers, pairs)
        stage = config.evaluation.stage
        k_values = tuple(config.evaluation.k_values)
        quantized = tokenizer.quantized_embeddings(semantic)
        for name, value in quantized_embedding_ranking(
            quantized, cf, dataset, stage=stage, k_values=k_values
        ).items():
            summary[f"quantized_{name}"] = value
        cf_results = cf_ranking_results(cf, dataset, stage)
        for k in k_values:
            summary[f"cf_recall@{k}"] = recall_at_k(cf_results, k)
            summary[f"cf_ndcg@{k}"] = ndcg_at_k(cf_results, k)
    write_csv(out / "diagnostics_summary.csv", ["metric", "value"], list(summary.items()))
    print(f"wrote {out / 'diagnostics_summary.csv'}")


def _cmd_pipeline(args) -> None:
    config = _resolve_config(args)
    out = _out_dir(args)
    result = run_pipeline(config, out)
    for name, value in result.metrics.items():
        print(f"{name} = {value:.4f}")
    print(f"artifacts in {result.out_dir}")


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "split": _cmd_split,
    "train-cf": _cmd_train_cf,
    "train-tokenizer": _cmd_train_tokenizer,
    "tokenize": _cmd_tokenize,
    "train-rec": _cmd_train_rec,
    "recommend": _cmd_recommend,
    "evaluate": _cmd_evaluate,
    "diagnose": _cmd_diagnose,
    "pipeline": _cmd_pipeline,
}


def exit_code_for(exc: SemidError) -> int:
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause) if isinstance(exc.cause, SemidError) else 1
    if isinstance(exc, NumericError):
        return 3
    if isinstance(exc, DataError):
        return 2
    return 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _COMMANDS[args.command](args)
    except SemidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
