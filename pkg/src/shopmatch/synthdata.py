"""Synthetic catalogue and query generator with ground-truth latents.

Articles live in a latent space organized by category clusters (plus a color
offset). Three views of every article are emitted:

* primary features  - a clean linear projection of the latent (the frozen
  embedding the strong variants match against);
* generic features  - a second projection with heavier noise (the weaker
  off-the-shelf embedding analogue used by the static/generic variants);
* raw input vector  - a fixed non-linear image of the latent in query space
  (the "title image" consumed by the trainable article leg).

A query is the same non-linear map applied to the sum of its positives'
latents, plus Gaussian noise; a configurable fraction of queries carries 2-3
positives. The map is a fixed random two-layer tanh network, so a plain dot
product in feature space cannot fully invert it - trainable encoders can.

Because the generator knows the latents and the map, it can rank articles for
any query by exact distance in query space. That brute-force ranking is the
dataset's difficulty floor; its statistics are stored in the manifest and
acceptance thresholds are expressed relative to them.

On-disk layout (all referenced from ``manifest.txt``, ``key=value`` lines):
feature stores per the binary store format, annotations as UTF-8
``query_id<TAB>article_id`` lines.
"""

import os
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .features import ArticleStore, AttributeSet, QueryStore, store_load, store_save
from .rng import stream

PAPER_CATEGORY_PROPORTIONS = (0.35, 0.20, 0.14, 0.14, 0.12, 0.03, 0.02)

QUERY_ID_BASE = 1_000_001
ARTICLE_ID_BASE = 1

MANIFEST_NAME = "manifest.txt"
_MANIFEST_FORMAT = "shopmatch-dataset-v1"


@dataclass(frozen=True)
class GenConfig:
    m_articles: int = 500
    n_queries: int = 4000
    latent_dim: int = 8
    feature_dim: int = 32
    query_dim: int = 64
    noise_sigma: float = 1.5
    multi_label_fraction: float = 0.217
    n_categories: int = 7
    n_colors: int = 8
    seed: int = 0
    category_proportions: tuple = PAPER_CATEGORY_PROPORTIONS
    feature_noise: float = 0.05
    generic_feature_noise: float = 1.25
    cluster_spread: float = 2.0
    color_spread: float = 0.6
    within_spread: float = 0.5
    train_fraction: float = 0.8
    val_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "category_proportions",
                           tuple(float(p) for p in self.category_proportions))
        problems = []
        for name in ("m_articles", "n_queries", "latent_dim", "feature_dim",
                     "query_dim", "n_categories", "n_colors"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("noise_sigma", "feature_noise", "generic_feature_noise",
                     "cluster_spread", "color_spread", "within_spread"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0.0 <= self.multi_label_fraction <= 1.0:
            problems.append("multi_label_fraction must be in [0, 1]")
        if len(self.category_proportions) != self.n_categories:
            problems.append("category_proportions must have n_categories entries")
        elif abs(sum(self.category_proportions) - 1.0) > 1e-6:
            problems.append("category_proportions must sum to 1")
        if not 0.0 < self.train_fraction < 1.0 or self.val_fraction < 0.0 \
                or self.train_fraction + self.val_fraction >= 1.0:
            problems.append("train/val fractions must leave room for a test split")
        if self.seed < 0:
            problems.append("seed must be a non-negative integer")
        if problems:
            raise ParameterError("invalid generator config: " + "; ".join(problems))


@dataclass
class TanhMap:
    """Fixed random two-layer tanh map from latent space to query space."""

    w1: np.ndarray
    c1: np.ndarray
    w2: np.ndarray
    c2: np.ndarray

    @classmethod
    def init(cls, rng, in_dim, out_dim, gain=1.6):
        hidden = 2 * out_dim
        return cls(
            w1=rng.normal(0.0, gain / np.sqrt(in_dim), (in_dim, hidden)),
            c1=rng.normal(0.0, 0.3, hidden),
            w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, out_dim)),
            c2=rng.normal(0.0, 0.1, out_dim),
        )

    def __call__(self, z):
        z = np.atleast_2d(z)
        return np.tanh(z @ self.w1 + self.c1) @ self.w2 + self.c2


@dataclass
class GroundTruth:
    latents: np.ndarray        # (M, latent_dim) float64
    categories: np.ndarray     # (M,) uint16 in 1..C
    colors: np.ndarray         # (M,) uint16 in 1..K
    query_map: TanhMap         # latent -> query space (shared by queries)
    article_map: TanhMap       # latent -> query space (title images)
    article_images: np.ndarray  # (M, query_dim) float64: query_map over latents


@dataclass
class QueryRecord:
    query_id: int
    vector: np.ndarray         # (query_dim,) float32
    positive_ids: list         # >= 1 article ids


@dataclass
class Dataset:
    config: GenConfig
    articles: ArticleStore
    articles_generic: ArticleStore
    article_inputs: QueryStore   # ids = article ids, vectors = raw title inputs
    queries: QueryStore
    annotations: dict            # query id -> list of article ids
    truth: GroundTruth = None
    oracle_stats: dict = field(default_factory=dict)

    def positives_as_rows(self):
        """Annotations translated to article row indices, in query order."""
        col_of = {int(a): i for i, a in enumerate(self.articles.ids)}
        out = []
        for qid in self.queries.ids:
            out.append(np.array([col_of[int(a)] for a in self.annotations[int(qid)]],
                                dtype=np.int64))
        return out


def generate_catalog(cfg):
    """Draw the article catalogue; returns (ArticleStore, GroundTruth)."""
    cat_rng = stream(cfg.seed, "gen/categories")
    categories = (
        cat_rng.choice(cfg.n_categories, size=cfg.m_articles,
                       p=np.asarray(cfg.category_proportions)) + 1
    ).astype(np.uint16)
    colors = (stream(cfg.seed, "gen/colors")
              .integers(1, cfg.n_colors + 1, cfg.m_articles)).astype(np.uint16)

    means_rng = stream(cfg.seed, "gen/cluster-means")
    cat_means = means_rng.normal(0.0, cfg.cluster_spread,
                                 (cfg.n_categories, cfg.latent_dim))
    color_offsets = means_rng.normal(0.0, cfg.color_spread,
                                     (cfg.n_colors, cfg.latent_dim))
    latents = (
        cat_means[categories - 1]
        + color_offsets[colors - 1]
        + stream(cfg.seed, "gen/latents").normal(0.0, cfg.within_spread,
                                                 (cfg.m_articles, cfg.latent_dim))
    )

    proj = stream(cfg.seed, "gen/projection").normal(
        0.0, 1.0 / np.sqrt(cfg.latent_dim), (cfg.latent_dim, cfg.feature_dim)
    )
    noise = stream(cfg.seed, "gen/feature-noise").normal(
        0.0, 1.0, (cfg.m_articles, cfg.feature_dim)
    )
    # noise levels are relative to the (standardized) signal, so dot products
    # stay at a trainable scale regardless of the latent geometry
    signal = latents @ proj
    signal /= signal.std(axis=0)
    features = (signal + cfg.feature_noise * noise).astype(np.float32)

    query_map = TanhMap.init(stream(cfg.seed, "gen/query-map"),
                             cfg.latent_dim, cfg.query_dim)
    article_map = TanhMap.init(stream(cfg.seed, "gen/article-map"),
                               cfg.latent_dim, cfg.query_dim)

    ids = np.arange(ARTICLE_ID_BASE, ARTICLE_ID_BASE + cfg.m_articles, dtype=np.uint64)
    store = ArticleStore(
        ids=ids,
        features=features,
        attributes={
            "category": AttributeSet("category", cfg.n_categories, categories),
            "color": AttributeSet("color", cfg.n_colors, colors),
        },
    )
    truth = GroundTruth(
        latents=latents, categories=categories, colors=colors,
        query_map=query_map, article_map=article_map,
        article_images=query_map(latents),
    )
    return store, truth


def generate_generic_features(cfg, catalog, truth):
    """The heavier-noise second feature set over the same articles."""
    proj = stream(cfg.seed, "gen/projection-generic").normal(
        0.0, 1.0 / np.sqrt(cfg.latent_dim), (cfg.latent_dim, cfg.feature_dim)
    )
    noise = stream(cfg.seed, "gen/feature-noise-generic").normal(
        0.0, 1.0, (cfg.m_articles, cfg.feature_dim)
    )
    signal = truth.latents @ proj
    signal /= signal.std(axis=0)
    return ArticleStore(
        ids=catalog.ids.copy(),
        features=(signal + cfg.generic_feature_noise * noise).astype(np.float32),
        attributes={k: AttributeSet(v.name, v.cardinality, v.values.copy())
                    for k, v in catalog.attributes.items()},
    )


def generate_article_inputs(cfg, catalog, truth):
    """Raw title-image vectors for the trainable article leg."""
    noise = stream(cfg.seed, "gen/input-noise").normal(
        0.0, 0.05, (cfg.m_articles, cfg.query_dim)
    )
    return QueryStore(
        ids=catalog.ids.copy(),
        features=(truth.article_map(truth.latents) + noise).astype(np.float32),
    )


def generate_queries(cfg, catalog, truth):
    """Annotated query records: vector = map(sum of positive latents) + noise."""
    pos_rng = stream(cfg.seed, "gen/query-positives")
    noise_rng = stream(cfg.seed, "gen/query-noise")
    records = []
    for i in range(cfg.n_queries):
        n_pos = 1
        if pos_rng.random() < cfg.multi_label_fraction:
            n_pos = int(pos_rng.integers(2, 4))
        n_pos = min(n_pos, cfg.m_articles)
        rows = pos_rng.choice(cfg.m_articles, size=n_pos, replace=False)
        vec = truth.query_map(truth.latents[rows].sum(axis=0))[0]
        vec = vec + noise_rng.normal(0.0, cfg.noise_sigma, cfg.query_dim)
        records.append(QueryRecord(
            query_id=QUERY_ID_BASE + i,
            vector=vec.astype(np.float32),
            positive_ids=[int(catalog.ids[r]) for r in sorted(rows)],
        ))
    return records


def oracle_rank(record, catalog, truth):
    """Exact-latent brute force: rank each positive by the distance between
    the query vector and the noiseless query-space image of every article."""
    diff = truth.article_images - np.asarray(record.vector, dtype=np.float64)
    dist = np.sqrt((diff * diff).sum(axis=1))
    out = []
    for aid in record.positive_ids:
        rows = np.nonzero(catalog.ids == np.uint64(aid))[0]
        if not len(rows):
            raise DataError(f"positive article {aid} not in catalogue")
        row = rows[0]
        rank = 1 + int((dist < dist[row]).sum())
        rank += int(((dist == dist[row]) & (catalog.ids < catalog.ids[row])).sum())
        out.append((record.query_id, aid, rank))
    return out


def oracle_floor(records, catalog, truth):
    """Difficulty-floor statistics of the dataset (stored in the manifest)."""
    ranks = []
    for record in records:
        ranks.extend(rank for _, _, rank in oracle_rank(record, catalog, truth))
    ranks = np.sort(np.array(ranks, dtype=np.int64))
    n = len(ranks)
    return {
        "oracle_median_rank": int(ranks[(n - 1) // 2]),
        "oracle_average_rank": float(ranks.mean()),
        "oracle_top1": float((ranks <= 1).sum() / n),
        "oracle_top20": float((ranks <= 20).sum() / n),
    }


def generate_dataset(cfg):
    """The full bundle: catalogue views, queries, annotations, oracle floor."""
    catalog, truth = generate_catalog(cfg)
    records = generate_queries(cfg, catalog, truth)
    queries = QueryStore(
        ids=np.array([r.query_id for r in records], dtype=np.uint64),
        features=np.stack([r.vector for r in records]),
    )
    return Dataset(
        config=cfg,
        articles=catalog,
        articles_generic=generate_generic_features(cfg, catalog, truth),
        article_inputs=generate_article_inputs(cfg, catalog, truth),
        queries=queries,
        annotations={r.query_id: list(r.positive_ids) for r in records},
        truth=truth,
        oracle_stats=oracle_floor(records, catalog, truth),
    )


def split_queries(cfg):
    """Deterministic train/val/test query row split derived from the seed."""
    perm = stream(cfg.seed, "gen/split").permutation(cfg.n_queries)
    n_train = int(round(cfg.train_fraction * cfg.n_queries))
    n_val = int(round(cfg.val_fraction * cfg.n_queries))
    return (np.sort(perm[:n_train]),
            np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


# ---------------------------------------------------------------------------
# disk layout


def write_annotations(path, annotations):
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(annotations):
            for aid in annotations[qid]:
                fh.write(f"{qid}\t{aid}\n")


def read_annotations(path):
    annotations = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"annotations line {lineno} is not 'query<TAB>article'")
            qid, aid = (int(p) for p in parts)
            annotations.setdefault(qid, []).append(aid)
    return annotations


_MANIFEST_FILES = {
    "articles": "articles.fstr",
    "articles_generic": "articles_generic.fstr",
    "article_inputs": "article_inputs.qstr",
    "queries": "queries.qstr",
    "annotations": "annotations.tsv",
}


def write_dataset(dataset, out_dir):
    """Write stores, annotations and manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    store_save(dataset.articles, os.path.join(out_dir, _MANIFEST_FILES["articles"]))
    store_save(dataset.articles_generic,
               os.path.join(out_dir, _MANIFEST_FILES["articles_generic"]))
    store_save(dataset.article_inputs,
               os.path.join(out_dir, _MANIFEST_FILES["article_inputs"]))
    store_save(dataset.queries, os.path.join(out_dir, _MANIFEST_FILES["queries"]))
    write_annotations(os.path.join(out_dir, _MANIFEST_FILES["annotations"]),
                      dataset.annotations)
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    cfg = dataset.config
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(f"format={_MANIFEST_FORMAT}\n")
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            if f.name == "category_proportions":
                value = ",".join(repr(p) for p in value)
            fh.write(f"{f.name}={value}\n")
        for key, name in _MANIFEST_FILES.items():
            fh.write(f"file_{key}={name}\n")
        for key, value in dataset.oracle_stats.items():
            fh.write(f"{key}={value}\n")
    return manifest


def _parse_manifest(path):
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"manifest line {lineno} is not key=value")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    if entries.get("format") != _MANIFEST_FORMAT:
        raise FormatError(f"unknown manifest format {entries.get('format')!r}")
    return entries


def load_dataset(data_dir):
    """Load a dataset directory written by write_dataset (truth is not
    persisted; the oracle statistics live in the manifest)."""
    entries = _parse_manifest(os.path.join(data_dir, MANIFEST_NAME))
    kwargs = {}
    for f in fields(GenConfig):
        raw = entries.get(f.name)
        if raw is None:
            raise FormatError(f"manifest is missing config key {f.name!r}")
        if f.name == "category_proportions":
            kwargs[f.name] = tuple(float(p) for p in raw.split(","))
        elif f.name in ("noise_sigma", "multi_label_fraction", "feature_noise",
                        "generic_feature_noise", "cluster_spread", "color_spread",
                        "within_spread", "train_fraction", "val_fraction"):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    cfg = GenConfig(**kwargs)
    loaded = {}
    for key in _MANIFEST_FILES:
        name = entries.get(f"file_{key}")
        if name is None:
            raise FormatError(f"manifest is missing file_{key}")
        loaded[key] = os.path.join(data_dir, name)
    oracle_stats = {k: float(v) for k, v in entries.items()
                    if k.startswith("oracle_")}
    return Dataset(
        config=cfg,
        articles=store_load(loaded["articles"]),
        articles_generic=store_load(loaded["articles_generic"]),
        article_inputs=store_load(loaded["article_inputs"]),
        queries=store_load(loaded["queries"]),
        annotations=read_annotations(loaded["annotations"]),
        truth=None,
        oracle_stats=oracle_stats,
    )
