"""Retrieval evaluation: full-catalogue ranking, the top-k/average/median
metric table, the prefilter-then-rerank pipeline, and the timing benchmark.

Ranking contract: the rank of a positive article is
``1 + #{j : s_j > s_pos} + #{j : s_j = s_pos and id_j < id_pos}`` - score ties
break deterministically by ascending article id. Scoring walks articles in
chunks; chunking never changes a score bitwise (see kernels).
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import models, nn
from .errors import ConfigError, DataError, ParameterError
from .kernels import PreparedScorer, linear_cross_scores


@dataclass(frozen=True)
class RankEntry:
    query_id: int
    article_id: int
    rank: int


@dataclass(frozen=True)
class Metrics:
    top_k: dict          # k -> fraction of pairs with rank <= k
    top_1pct: float
    average_rank: float
    median_rank: int

    def as_row(self):
        return (
            [f"{self.top_k[k]:.6f}" for k in (1, 5, 10, 20, 50)]
            + [f"{self.top_1pct:.6f}", f"{self.average_rank:.6f}", str(self.median_rank)]
        )


@dataclass(frozen=True)
class TimingReport:
    n_queries: int
    n_articles: int
    chunk: int
    engine: str
    wall_time: float      # seconds, mean over repetitions
    per_query_ms: float


def query_features(spec, params, raw_queries, static_qf=None):
    """Query-side features for scoring: encoder output or the static set."""
    if spec.query_features == "learned":
        return models.encode_queries(params, raw_queries, mode=nn.INFER)
    if static_qf is None:
        raise ConfigError(f"variant {spec.name!r} needs precomputed static query features")
    return np.ascontiguousarray(static_qf, dtype=np.float32)


def article_features(spec, params, static_features, article_inputs=None):
    """Article-side features: the frozen set, or the trained right leg's output."""
    if spec.article_features == "learned":
        if article_inputs is None:
            raise ConfigError("siamese evaluation needs raw article input vectors")
        return params.right_leg.forward(
            np.ascontiguousarray(article_inputs, dtype=np.float32), mode=nn.INFER
        )
    return np.ascontiguousarray(static_features, dtype=np.float32)


def make_scorer(spec, params, qf, af):
    """Returns scores(query_rows, article_rows, chunk) -> float32 matrix.

    Non-linear variants score through the matching-head kernel; linear and
    static variants rank by the raw dot product (the trained sigmoid/bias is
    a strictly monotone reparameterization, so orderings are identical).
    """
    if spec.matching == "nonlinear":
        prepared = PreparedScorer(models.export_head_arrays(params), qf, af)

        def scores(query_rows=None, article_rows=None, chunk=512):
            return prepared.scores(query_rows=query_rows, article_rows=article_rows,
                                   chunk=chunk)

    else:

        def scores(query_rows=None, article_rows=None, chunk=512):
            q = qf if query_rows is None else qf[np.asarray(query_rows)]
            a = af if article_rows is None else af[np.asarray(article_rows)]
            return linear_cross_scores(q, a, chunk=chunk)

    return scores


def _ranks_for_row(score_row, ids, positive_cols):
    out = []
    for col in positive_cols:
        s = score_row[col]
        rank = 1 + int((score_row > s).sum())
        rank += int(((score_row == s) & (ids < ids[col])).sum())
        out.append(rank)
    return out


def rank_all(spec, params, queries, annotations, store, static_qf=None,
             article_inputs=None, chunk=512, exclude_ids=None, query_block=256):
    """Rank every annotated positive of every query against the store.

    ``queries`` is a QueryStore, ``annotations`` maps query id to its positive
    article ids. ``exclude_ids`` drops articles (e.g. training articles) from
    the retrieval set; a positive that is missing from the retrieval set
    raises DataError.
    """
    keep = np.arange(len(store))
    if exclude_ids is not None and len(exclude_ids):
        drop = np.isin(store.ids, np.asarray(exclude_ids, dtype=np.uint64))
        keep = keep[~drop]
        if keep.size == 0:
            raise DataError("exclusion removed every article from the retrieval set")
    ids = store.ids[keep]
    af = article_features(
        spec, params, store.features[keep],
        None if article_inputs is None else article_inputs[keep],
    )
    qf = query_features(spec, params, queries.features, static_qf)
    scorer = make_scorer(spec, params, qf, af)

    col_of = {int(a): i for i, a in enumerate(ids)}
    report = []
    n = len(queries)
    for q0 in range(0, n, query_block):
        block = np.arange(q0, min(n, q0 + query_block))
        scores = scorer(query_rows=block, chunk=chunk)
        for row, qrow in enumerate(block):
            qid = int(queries.ids[qrow])
            positives = annotations.get(qid, ())
            if not len(positives):
                continue
            cols = []
            for aid in positives:
                col = col_of.get(int(aid))
                if col is None:
                    raise DataError(f"positive article {aid} for query {qid} "
                                    "is absent from the retrieval set")
                cols.append(col)
            for aid, rank in zip(positives,
                                 _ranks_for_row(scores[row], ids, cols)):
                report.append(RankEntry(qid, int(aid), rank))
    return report


def compute_metrics(report, m):
    """Table metrics over a RankReport: top-k for k in {1,5,10,20,50}, the
    top-1% cut at ceil(m/100), the average rank, and the median rank (lower
    middle element for even counts)."""
    if not report:
        raise ParameterError("cannot compute metrics over an empty rank report")
    ranks = np.array([entry.rank for entry in report], dtype=np.int64)
    n = len(ranks)
    top_k = {k: float((ranks <= k).sum() / n) for k in (1, 5, 10, 20, 50)}
    cut = -(-m // 100)  # ceil(m/100)
    top_1pct = float((ranks <= cut).sum() / n)
    average = float(ranks.sum() / n)
    median = int(np.sort(ranks)[(n - 1) // 2])
    return Metrics(top_k=top_k, top_1pct=top_1pct, average_rank=average,
                   median_rank=median)


def _order_desc_score_asc_id(scores, ids):
    # lexsort's last key dominates; negate scores for descending
    return np.lexsort((ids, -scores.astype(np.float64)))


def two_stage_rank(linear_params, nonlinear_params, query_vec, store,
                   shortlist_size, article_inputs=None, chunk=512):
    """Shortlist by the fast linear model, rerank by the non-linear one.

    Returns ``shortlist_size`` article ids in rerank order. With the
    shortlist equal to the whole store this reproduces rank_all's ordering
    under the non-linear model exactly.
    """
    m = len(store)
    if shortlist_size < 1:
        raise ParameterError(f"shortlist size must be >= 1, got {shortlist_size}")
    if shortlist_size > m:
        raise ParameterError(f"shortlist size {shortlist_size} exceeds catalogue {m}")

    lin_spec, non_spec = linear_params.spec, nonlinear_params.spec
    if lin_spec.matching != "linear":
        raise ConfigError("first stage needs a linear-matching variant")
    if non_spec.matching != "nonlinear":
        raise ConfigError("second stage needs a non-linear-matching variant")

    query_vec = np.asarray(query_vec, dtype=np.float32)
    af_lin = article_features(lin_spec, linear_params, store.features, article_inputs)
    qf_lin = query_features(lin_spec, linear_params, query_vec[None, :])
    stage1 = linear_cross_scores(qf_lin, af_lin, chunk=chunk)[0]
    shortlist = _order_desc_score_asc_id(stage1, store.ids)[:shortlist_size]

    if shortlist_size == 1:
        return store.ids[shortlist]

    af_non = article_features(non_spec, nonlinear_params, store.features, article_inputs)
    qf_non = query_features(non_spec, nonlinear_params, query_vec[None, :])
    scorer = make_scorer(non_spec, nonlinear_params, qf_non, af_non)
    stage2 = scorer(query_rows=[0], article_rows=shortlist, chunk=chunk)[0]
    order = _order_desc_score_asc_id(stage2, store.ids[shortlist])
    return store.ids[shortlist[order]]


def timing_benchmark(spec, params, query_pool, store, n_queries_list, chunk=50,
                     repetitions=10, static_qf=None, article_inputs=None,
                     engine_label=""):
    """Wall time of scoring n queries against the store, scoring ``chunk``
    articles at a time, averaged over ``repetitions`` runs after a warm-up."""
    af = article_features(spec, params, store.features, article_inputs)
    pool = np.ascontiguousarray(query_pool, dtype=np.float32)
    pool_static = None
    if static_qf is not None:
        pool_static = np.ascontiguousarray(static_qf, dtype=np.float32)

    def run(n):
        if n == 0:
            return 0.0
        rows = np.arange(n) % len(pool)
        raw = pool[rows]
        sqf = None if pool_static is None else pool_static[rows]
        t0 = time.perf_counter()
        qf = query_features(spec, params, raw, sqf)
        scorer = make_scorer(spec, params, qf, af)
        scorer(chunk=chunk)
        return time.perf_counter() - t0

    run(min(n for n in n_queries_list if n > 0) if any(n_queries_list) else 1)  # warm-up
    reports = []
    for n in n_queries_list:
        wall = float(np.mean([run(n) for _ in range(repetitions)]))
        reports.append(TimingReport(
            n_queries=n, n_articles=len(store), chunk=chunk,
            engine=engine_label, wall_time=wall,
            per_query_ms=(wall / n * 1000.0) if n else 0.0,
        ))
    return reports


# ---------------------------------------------------------------------------
# flat-file output


def write_metrics_csv(path, rows):
    """rows: iterable of (variant_name, Metrics)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "top1", "top5", "top10", "top20", "top50",
                         "top1pct", "avg", "median"])
        for name, metrics in rows:
            writer.writerow([name] + metrics.as_row())


def write_ranks_tsv(path, report):
    with open(path, "w") as fh:
        for entry in report:
            fh.write(f"{entry.query_id}\t{entry.article_id}\t{entry.rank}\n")


def write_timing_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_queries", "m", "chunk", "engine", "wall_time_s",
                         "per_query_ms"])
        for r in reports:
            writer.writerow([r.n_queries, r.n_articles, r.chunk, r.engine,
                             f"{r.wall_time:.6f}", f"{r.per_query_ms:.6f}"])
