"""Command-line surface: gen, train, eval, bench.

One JSON config file with per-command sections plus flag overrides (flags
win). Every run is reproducible: identical inputs and seed produce
byte-identical stores, checkpoints and CSVs. Failures exit non-zero with a
single machine-parsable line ``error: <category>: <detail>`` on stderr.
"""

import json
import os
import sys

import click
import numpy as np

from . import evaluate, models, synthdata, training
from .errors import ConfigError, ShopmatchError
from .features import QueryStore, pca_fit, pca_transform
from .kernels import active_engine, available_engines


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _section(config, name, allowed):
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown fields in config section {name!r}: {unknown}")
    return dict(section)


def _fail(exc):
    category = exc.category if isinstance(exc, ShopmatchError) else "io"
    click.echo(f"error: {category}: {exc}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Query-to-catalogue matching experiments on synthetic data."""


# ---------------------------------------------------------------------------
# shared assembly


_GEN_FIELDS = [f.name for f in synthdata.GenConfig.__dataclass_fields__.values()]
_ENCODER_FIELDS = ["hidden_widths", "dropout_rate", "head_hidden"]
_TRAIN_FIELDS = [
    "algorithm", "learning_rate", "momentum", "beta1", "beta2", "eps", "epochs",
    "batch_queries", "articles_per_query", "loss_reduction", "probe_queries",
    "probe_articles", "validate",
]


def encoder_config(dataset, section):
    return models.EncoderConfig(
        input_dim=dataset.config.query_dim,
        hidden_widths=tuple(section.get("hidden_widths", (256, 256))),
        output_dim=dataset.config.feature_dim,
        dropout_rate=section.get("dropout_rate", 0.25),
        head_hidden=section.get("head_hidden", models.HEAD_HIDDEN_DEFAULT),
    )


def static_query_features(dataset, train_idx):
    """Frozen query featurizer for the static variants: a PCA projection
    fitted on the training queries only."""
    model = pca_fit(dataset.queries.features[train_idx], dataset.config.feature_dim)
    return pca_transform(model, dataset.queries.features)


def article_feature_set(dataset, spec):
    if spec.article_features == "generic":
        return dataset.articles_generic
    return dataset.articles


def assemble_train_data(dataset, spec, enc_cfg):
    train_idx, val_idx, _ = synthdata.split_queries(dataset.config)
    static_qf = None
    if spec.query_features == "static":
        static_qf = static_query_features(dataset, train_idx)
    return training.TrainData(
        encoder_config=enc_cfg,
        queries=dataset.queries.features,
        positives=dataset.positives_as_rows(),
        article_features=article_feature_set(dataset, spec).features,
        train_idx=train_idx,
        val_idx=val_idx,
        article_inputs=dataset.article_inputs.features,
        attribute_values={k: v.values for k, v in dataset.articles.attributes.items()},
        attribute_cards={k: v.cardinality for k, v in dataset.articles.attributes.items()},
        static_query_features=static_qf,
    )


def _split_rows(dataset, split):
    train_idx, val_idx, test_idx = synthdata.split_queries(dataset.config)
    try:
        return {"train": train_idx, "val": val_idx, "test": test_idx,
                "all": np.arange(len(dataset.queries))}[split]
    except KeyError:
        raise ConfigError(f"unknown split {split!r}; use train/val/test/all")


def _query_subset(dataset, rows):
    return QueryStore(ids=dataset.queries.ids[rows],
                      features=dataset.queries.features[rows])


def _load_matching_checkpoint(path, expect_name=None, flag="--checkpoint"):
    if path is None:
        raise ConfigError(f"this variant needs {flag}")
    params = models.load_checkpoint(path)
    if expect_name is not None and params.spec.name != expect_name:
        raise ConfigError(
            f"checkpoint holds variant {params.spec.name!r}, requested {expect_name!r}"
        )
    return params


# ---------------------------------------------------------------------------
# gen


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON config file ('gen' section).")
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def gen(config_path, seed, out_dir):
    """Generate a synthetic dataset directory (stores, annotations, manifest)."""
    try:
        section = _section(_load_config(config_path), "gen", _GEN_FIELDS)
        if seed is not None:
            section["seed"] = seed
        if "category_proportions" in section:
            section["category_proportions"] = tuple(section["category_proportions"])
        cfg = synthdata.GenConfig(**section)
        dataset = synthdata.generate_dataset(cfg)
        synthdata.write_dataset(dataset, out_dir)
        stats = dataset.oracle_stats
        click.echo(
            f"dataset: {cfg.m_articles} articles, {cfg.n_queries} queries, "
            f"seed {cfg.seed}"
        )
        click.echo(
            "oracle floor: median rank "
            f"{int(stats['oracle_median_rank'])}, average "
            f"{stats['oracle_average_rank']:.1f}, top-1 {stats['oracle_top1']:.3f}"
        )
    except (ShopmatchError, OSError, TypeError) as exc:
        _fail(exc)


# ---------------------------------------------------------------------------
# train


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--variant", "variant_name", required=True,
              type=click.Choice(models.VARIANTS))
@click.option("--seed", type=int, default=0)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def train(config_path, data_dir, variant_name, seed, epochs, lr, out_dir):
    """Train one variant; writes <variant>.m2sh and <variant>_train_report.csv."""
    try:
        config = _load_config(config_path)
        spec = models.variant(variant_name)
        if not spec.trainable:
            raise ConfigError(f"variant {variant_name!r} has no trainable loss")
        dataset = synthdata.load_dataset(data_dir)
        enc_cfg = encoder_config(dataset, _section(config, "encoder", _ENCODER_FIELDS))
        section = _section(config, "train", _TRAIN_FIELDS)
        if epochs is not None:
            section["epochs"] = epochs
        if lr is not None:
            section["learning_rate"] = lr
        opt = training.OptimizerConfig(seed=seed, **section)
        data = assemble_train_data(dataset, spec, enc_cfg)
        params, report = training.train(spec, data, opt)
        os.makedirs(out_dir, exist_ok=True)
        checkpoint = os.path.join(out_dir, f"{variant_name}.m2sh")
        models.save_checkpoint(params, checkpoint)
        report.write_csv(os.path.join(out_dir, f"{variant_name}_train_report.csv"))
        click.echo(f"checkpoint: {checkpoint} (best epoch {report.best_epoch})")
    except (ShopmatchError, OSError, TypeError) as exc:
        _fail(exc)


# ---------------------------------------------------------------------------
# eval


def _two_stage_report(dataset, lin_params, non_params, queries, annotations,
                      shortlist, chunk):
    store = dataset.articles
    m = len(store)
    report = []
    for row in range(len(queries)):
        qid = int(queries.ids[row])
        order = evaluate.two_stage_rank(lin_params, non_params,
                                        queries.features[row], store, shortlist,
                                        chunk=chunk)
        position = {int(a): i + 1 for i, a in enumerate(order)}
        for aid in annotations.get(qid, ()):
            # a positive outside the shortlist cannot be retrieved: rank m
            report.append(evaluate.RankEntry(qid, int(aid), position.get(int(aid), m)))
    return report


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--variant", "variant_name", required=True,
              type=click.Choice(models.VARIANTS))
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None)
@click.option("--split", default="test", show_default=True)
@click.option("--two-stage", is_flag=True, default=False,
              help="Shortlist with a linear checkpoint, rerank with --checkpoint.")
@click.option("--shortlist", type=int, default=None,
              help="Shortlist size S for --two-stage (default: the whole store).")
@click.option("--linear-checkpoint", type=click.Path(), default=None,
              help="First-stage checkpoint for --two-stage.")
@click.option("--exclude-articles", type=click.Path(), default=None,
              help="File of article ids (one per line) to drop from retrieval.")
@click.option("--chunk", type=int, default=512, show_default=True)
@click.option("--seed", type=int, default=0, help="Accepted for uniformity; "
              "evaluation is deterministic.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def eval_cmd(config_path, data_dir, variant_name, checkpoint_path, split,
             two_stage, shortlist, linear_checkpoint, exclude_articles, chunk,
             seed, out_dir):
    """Rank the split's queries against the catalogue; writes metrics.csv and
    ranks.tsv."""
    try:
        _load_config(config_path)
        spec = models.variant(variant_name)
        dataset = synthdata.load_dataset(data_dir)
        rows = _split_rows(dataset, split)
        queries = _query_subset(dataset, rows)
        m = len(dataset.articles)

        exclude_ids = None
        if exclude_articles is not None:
            with open(exclude_articles, encoding="utf-8") as fh:
                exclude_ids = [int(line) for line in fh if line.strip()]

        if two_stage:
            if spec.matching != "nonlinear":
                raise ConfigError("--two-stage reranks with a non-linear variant")
            non_params = _load_matching_checkpoint(checkpoint_path, variant_name)
            lin_params = _load_matching_checkpoint(linear_checkpoint,
                                                   flag="--linear-checkpoint")
            s = shortlist if shortlist is not None else m
            report = _two_stage_report(dataset, lin_params, non_params, queries,
                                       dataset.annotations, s, chunk)
            label = f"{variant_name}+two-stage"
        else:
            if spec.trainable:
                params = _load_matching_checkpoint(checkpoint_path, variant_name)
            else:
                params = models.build_model(
                    spec, encoder_config(dataset, {}), seed=0
                )
            train_idx, _, _ = synthdata.split_queries(dataset.config)
            static_qf = None
            if spec.query_features == "static":
                static_qf = static_query_features(dataset, train_idx)[rows]
            report = evaluate.rank_all(
                spec, params, queries, dataset.annotations,
                article_feature_set(dataset, spec),
                static_qf=static_qf,
                article_inputs=dataset.article_inputs.features,
                chunk=chunk, exclude_ids=exclude_ids,
            )
            label = variant_name
        metrics = evaluate.compute_metrics(report, m)
        os.makedirs(out_dir, exist_ok=True)
        evaluate.write_metrics_csv(os.path.join(out_dir, "metrics.csv"),
                                   [(label, metrics)])
        evaluate.write_ranks_tsv(os.path.join(out_dir, "ranks.tsv"), report)
        click.echo(
            f"{label}: median rank {metrics.median_rank}, "
            f"top-20 {metrics.top_k[20]:.3f}, top-1% {metrics.top_1pct:.3f} "
            f"({len(report)} pairs, m={m})"
        )
    except (ShopmatchError, OSError, TypeError) as exc:
        _fail(exc)


# ---------------------------------------------------------------------------
# bench


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--variant", "variant_name", required=True,
              type=click.Choice(models.VARIANTS))
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None)
@click.option("--queries-list", default="100,200,400,800", show_default=True)
@click.option("--chunk", type=int, default=50, show_default=True)
@click.option("--reps", type=int, default=10, show_default=True)
@click.option("--compare-engines", is_flag=True, default=False,
              help="Benchmark every available scoring engine.")
@click.option("--seed", type=int, default=0, help="Accepted for uniformity; "
              "the query sweep is deterministic.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def bench(config_path, data_dir, variant_name, checkpoint_path, queries_list,
          chunk, reps, compare_engines, seed, out_dir):
    """Time scoring sweeps; writes timing.csv."""
    try:
        _load_config(config_path)
        spec = models.variant(variant_name)
        dataset = synthdata.load_dataset(data_dir)
        if spec.trainable:
            params = _load_matching_checkpoint(checkpoint_path, variant_name)
        else:
            params = models.build_model(spec, encoder_config(dataset, {}), seed=0)
        n_list = [int(x) for x in queries_list.split(",") if x.strip()]
        train_idx, _, _ = synthdata.split_queries(dataset.config)
        static_qf = None
        if spec.query_features == "static":
            static_qf = static_query_features(dataset, train_idx)
        engines = available_engines() if compare_engines else (active_engine(),)
        reports = []
        saved = os.environ.get("SHOPMATCH_ENGINE")
        for engine in engines:
            os.environ["SHOPMATCH_ENGINE"] = engine
            try:
                reports.extend(evaluate.timing_benchmark(
                    spec, params, dataset.queries.features,
                    article_feature_set(dataset, spec), n_list, chunk=chunk,
                    repetitions=reps, static_qf=static_qf,
                    article_inputs=dataset.article_inputs.features,
                    engine_label=engine,
                ))
            finally:
                if saved is None:
                    os.environ.pop("SHOPMATCH_ENGINE", None)
                else:
                    os.environ["SHOPMATCH_ENGINE"] = saved
        os.makedirs(out_dir, exist_ok=True)
        evaluate.write_timing_csv(os.path.join(out_dir, "timing.csv"), reports)
        for r in reports:
            click.echo(
                f"n={r.n_queries:6d} m={r.n_articles} chunk={r.chunk} "
                f"engine={r.engine or active_engine()}: {r.wall_time:.4f}s "
                f"({r.per_query_ms:.3f} ms/query)"
            )
    except (ShopmatchError, OSError, TypeError) as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
