"""End-to-end run: data, CF embeddings, tokenizer, recommender, reports.

Stages execute in a fixed order and every stage leaves its artifacts in
the output directory before the next one starts, so a failed run is
inspectable up to the stage named in the error. Reruns with the same
config and seed write byte-identical files.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .cf import BprMF, nearest_cf_pairs
from .config import PipelineConfig, config_to_dict, save_config
from .diagnostics import (
    cf_ranking_results,
    code_histogram,
    code_overlap_similarity,
    export_code_embedding_pca,
    grouped_frequency_summary,
    quantized_embedding_ranking,
)
from .embeddings import EmbeddingTable
from .exceptions import DataError, ParameterError, SemidError
from .interactions import InteractionDataset, build_dataset, load_and_split, save_interactions
from .metrics import ndcg_at_k, rank_in_list, recall_at_k
from .recommender import GenerativeRecommender
from .synthetic import generate
from .tokenizer import SemanticIdTokenizer
from .trie import IdentifierTrie
from .vocab import IdentifierSet

STAGES = (
    "load-data",
    "train-cf",
    "train-tokenizer",
    "assign-identifiers",
    "build-trie",
    "train-recommender",
    "evaluate",
    "diagnose",
)


class StageError(SemidError):
    """A pipeline stage failed; carries the stage name and original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    out_dir: Path
    metrics: dict[str, float]
    diagnostics: dict[str, float]


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _load_data(config: PipelineConfig, out: Path):
    data = config.data
    if data.interactions is not None:
        dataset = load_and_split(data.interactions, min_count=data.min_count)
        semantic = EmbeddingTable.load(data.embeddings)
    else:
        made = generate(data.synthetic, config.seed)
        dataset = build_dataset(made.events, min_count=data.min_count)
        semantic = made.semantic
        save_interactions(made.events, out / "interactions.tsv")
        semantic.save(out / "semantic_embeddings.tsv")
        write_csv(
            out / "topics.csv",
            ["item_id", "semantic_topic", "behavior_topic"],
            [
                (int(i), int(made.semantic_topic[i]), int(made.behavior_topic[i]))
                for i in range(len(made.semantic_topic))
            ],
        )
    missing = [i for i in dataset.items() if i not in semantic]
    if missing:
        raise DataError(
            f"{len(missing)} interacted items lack semantic embeddings (first: {missing[0]})"
        )
    # the working catalog is the filtered interaction set; embeddings of
    # items nobody consumed are dropped so CF, tokenizer, and trie agree
    return dataset, semantic.subset(dataset.items())


def _train_cf(config: PipelineConfig, dataset: InteractionDataset, out: Path) -> BprMF:
    cf = BprMF(
        n_factors=config.cf.n_factors,
        epochs=config.cf.epochs,
        learning_rate=config.cf.learning_rate,
        reg=config.cf.reg,
        batch_size=config.cf.batch_size,
        seed=config.seed,
    ).fit(dataset)
    cf.item_embedding_table().save(out / "cf_embeddings.tsv")
    write_csv(
        out / "cf_log.csv",
        ["epoch", "loss"],
        list(enumerate(cf.loss_history_)),
    )
    return cf


def _train_tokenizer(
    config: PipelineConfig, semantic: EmbeddingTable, cf_table: EmbeddingTable, out: Path
) -> SemanticIdTokenizer:
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
    return tokenizer


def save_tokenizer_log(log: list[dict], levels: int, path) -> None:
    header = ["epoch", "L_sem", "L_cf", "L_div", "total"]
    header += [f"utilization_l{level + 1}" for level in range(levels)]
    rows = []
    for entry in log:
        row = [entry["epoch"]]
        row += [entry[k] for k in ("semantic", "cf", "diversity", "total")]
        row += [entry[f"utilization_{level}"] for level in range(levels)]
        rows.append(row)
    write_csv(path, header, rows)


def _train_recommender(
    config: PipelineConfig, dataset: InteractionDataset, identifiers: IdentifierSet, out: Path
) -> GenerativeRecommender:
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
    has_recall = any("validation_recall@10" in entry for entry in rec.log_)
    header = ["epoch", "loss"] + (["validation_recall@10"] if has_recall else [])
    rows = []
    for entry in rec.log_:
        row = [entry["epoch"], entry["loss"]]
        if has_recall:
            row.append(entry.get("validation_recall@10", ""))
        rows.append(row)
    write_csv(out / "rec_log.csv", header, rows)
    return rec


def _evaluate(
    config: PipelineConfig,
    dataset: InteractionDataset,
    rec: GenerativeRecommender,
    out: Path,
) -> dict[str, float]:
    stage = config.evaluation.stage
    k_values = tuple(config.evaluation.k_values)
    k_max = max(k_values)
    rec_rows = []
    results = []
    for user in dataset.users():
        if stage == "validation":
            history = dataset.validation_history(user)
            target = dataset.validation_target(user)
        else:
            history = dataset.test_history(user)
            target = dataset.test_target(user)
        ranked = rec.recommend(history, k=k_max)
        for position, (item, score) in enumerate(ranked, start=1):
            rec_rows.append((user, position, item, score))
        results.append(rank_in_list(user, [item for item, _ in ranked], target))
    write_csv(out / "recommendations.csv", ["user_id", "rank", "item_id", "score"], rec_rows)
    metrics: dict[str, float] = {}
    for k in k_values:
        metrics[f"recall@{k}"] = recall_at_k(results, k)
        metrics[f"ndcg@{k}"] = ndcg_at_k(results, k)
    write_csv(out / "metrics.csv", ["metric", "value"], list(metrics.items()))
    return metrics


def _diagnose(
    config: PipelineConfig,
    dataset: InteractionDataset,
    semantic: EmbeddingTable,
    cf: BprMF,
    tokenizer: SemanticIdTokenizer,
    identifiers: IdentifierSet,
    out: Path,
) -> dict[str, float]:
    summary: dict[str, float] = {"collision_rate": identifiers.collision_rate()}
    for level in range(1, config.tokenizer.levels + 1):
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
    return summary


def run_pipeline(config: PipelineConfig, out_dir) -> PipelineResult:
    """Run every stage into ``out_dir`` and return the headline numbers."""
    config.validate()
    if config.tokenizer.alpha > 0 and config.cf.n_factors != config.tokenizer.code_dim:
        raise ParameterError(
            f"alpha > 0 aligns quantized embeddings with the CF table, so "
            f"cf.n_factors ({config.cf.n_factors}) must equal "
            f"tokenizer.code_dim ({config.tokenizer.code_dim})"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "resolved_config.json")

    def run(stage: str, fn):
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc

    dataset, semantic = run("load-data", lambda: _load_data(config, out))
    cf = run("train-cf", lambda: _train_cf(config, dataset, out))
    tokenizer = run(
        "train-tokenizer",
        lambda: _train_tokenizer(config, semantic, cf.item_embedding_table(), out),
    )

    def assign():
        identifiers = tokenizer.assign_identifiers(semantic)
        identifiers.save(out / "identifiers.tsv")
        return identifiers

    identifiers = run("assign-identifiers", assign)
    # the trie is rebuilt from the identifier set inside the recommender;
    # this stage exists to fail fast on malformed identifiers
    run("build-trie", lambda: IdentifierTrie.from_identifiers(identifiers))
    rec = run(
        "train-recommender", lambda: _train_recommender(config, dataset, identifiers, out)
    )
    metrics = run("evaluate", lambda: _evaluate(config, dataset, rec, out))
    diagnostics = run(
        "diagnose",
        lambda: _diagnose(config, dataset, semantic, cf, tokenizer, identifiers, out),
    )
    return PipelineResult(out_dir=out, metrics=metrics, diagnostics=diagnostics)
