import numpy as np
import pytest

from shopmatch import synthdata as sd
from shopmatch.errors import ParameterError
from shopmatch.features import ArticleStore, QueryStore

SMALL = sd.GenConfig(m_articles=120, n_queries=200, seed=5)


class TestGenConfig:
    def test_paper_proportions_sum_to_one(self):
        assert abs(sum(sd.PAPER_CATEGORY_PROPORTIONS) - 1.0) < 1e-12
        assert len(sd.PAPER_CATEGORY_PROPORTIONS) == 7

    def test_bad_multi_label_fraction(self):
        with pytest.raises(ParameterError, match="multi_label_fraction"):
            sd.GenConfig(multi_label_fraction=1.5)

    def test_bad_counts(self):
        with pytest.raises(ParameterError):
            sd.GenConfig(m_articles=0)

    def test_proportions_must_match_categories(self):
        with pytest.raises(ParameterError, match="proportions"):
            sd.GenConfig(n_categories=3)


class TestGenerateCatalog:
    def test_deterministic(self):
        a, _ = sd.generate_catalog(SMALL)
        b, _ = sd.generate_catalog(SMALL)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_array_equal(a.attributes["category"].values,
                                      b.attributes["category"].values)

    def test_cluster_means_distinct(self):
        _, truth = sd.generate_catalog(SMALL)
        means = np.stack([truth.latents[truth.categories == c].mean(axis=0)
                          for c in range(1, 8) if np.any(truth.categories == c)])
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        off_diag = dist[~np.eye(len(means), dtype=bool)]
        assert off_diag.min() > 0

    def test_category_marginals_at_scale(self):
        cfg = sd.GenConfig(m_articles=10000, n_queries=1, seed=6)
        store, _ = sd.generate_catalog(cfg)
        counts = np.bincount(store.attributes["category"].values, minlength=8)[1:]
        for got, want in zip(counts / 10000, cfg.category_proportions):
            assert abs(got - want) < 0.03

    def test_no_duplicate_feature_rows(self):
        store, _ = sd.generate_catalog(SMALL)
        assert len(np.unique(store.features, axis=0)) == len(store)

    def test_generic_features_differ_from_primary(self):
        store, truth = sd.generate_catalog(SMALL)
        generic = sd.generate_generic_features(SMALL, store, truth)
        assert generic.features.shape == store.features.shape
        assert not np.allclose(generic.features, store.features)
        np.testing.assert_array_equal(generic.ids, store.ids)


class TestGenerateQueries:
    def test_noiseless_single_positive_ranks_first(self):
        cfg = sd.GenConfig(m_articles=100, n_queries=60, noise_sigma=0.0,
                           multi_label_fraction=0.0, seed=7)
        catalog, truth = sd.generate_catalog(cfg)
        records = sd.generate_queries(cfg, catalog, truth)
        for record in records[:20]:
            for _, _, rank in sd.oracle_rank(record, catalog, truth):
                assert rank == 1

    def test_zero_multi_fraction_gives_single_positives(self):
        cfg = sd.GenConfig(m_articles=50, n_queries=100,
                           multi_label_fraction=0.0, seed=8)
        catalog, truth = sd.generate_catalog(cfg)
        records = sd.generate_queries(cfg, catalog, truth)
        assert all(len(r.positive_ids) == 1 for r in records)

    def test_multi_label_fraction_at_paper_analogue(self):
        cfg = sd.GenConfig(m_articles=100, n_queries=4000, seed=9)
        catalog, truth = sd.generate_catalog(cfg)
        records = sd.generate_queries(cfg, catalog, truth)
        multi = sum(1 for r in records if len(r.positive_ids) > 1)
        assert abs(multi / 4000 - 0.217) < 0.03
        assert all(2 <= len(r.positive_ids) <= 3 for r in records
                   if len(r.positive_ids) > 1)

    def test_huge_noise_approaches_uniform_median(self):
        cfg = sd.GenConfig(m_articles=200, n_queries=400, noise_sigma=1000.0,
                           multi_label_fraction=0.0, seed=10)
        catalog, truth = sd.generate_catalog(cfg)
        records = sd.generate_queries(cfg, catalog, truth)
        stats = sd.oracle_floor(records, catalog, truth)
        # uniform-random limit: median ~ (M+1)/2
        assert 0.35 * 200 < stats["oracle_median_rank"] < 0.65 * 200


class TestDatasetRoundTrip:
    def test_write_load(self, tmp_path):
        ds = sd.generate_dataset(SMALL)
        sd.write_dataset(ds, tmp_path)
        back = sd.load_dataset(tmp_path)
        assert back.config == ds.config
        np.testing.assert_array_equal(back.articles.features, ds.articles.features)
        np.testing.assert_array_equal(back.queries.features, ds.queries.features)
        assert back.annotations == ds.annotations
        assert back.oracle_stats["oracle_median_rank"] == \
            ds.oracle_stats["oracle_median_rank"]
        assert isinstance(back.articles, ArticleStore)
        assert isinstance(back.article_inputs, QueryStore)

    def test_byte_identical_regeneration(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        sd.write_dataset(sd.generate_dataset(SMALL), d1)
        sd.write_dataset(sd.generate_dataset(SMALL), d2)
        for name in ["manifest.txt", "articles.fstr", "articles_generic.fstr",
                     "article_inputs.qstr", "queries.qstr", "annotations.tsv"]:
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name

    def test_positives_as_rows(self):
        ds = sd.generate_dataset(SMALL)
        rows = ds.positives_as_rows()
        assert len(rows) == len(ds.queries)
        qid = int(ds.queries.ids[3])
        np.testing.assert_array_equal(
            ds.articles.ids[rows[3]],
            np.array(ds.annotations[qid], dtype=np.uint64),
        )


class TestSplit:
    def test_partition(self):
        train, val, test = sd.split_queries(SMALL)
        joined = np.concatenate([train, val, test])
        assert len(joined) == SMALL.n_queries
        assert len(np.unique(joined)) == SMALL.n_queries
        assert len(train) == round(0.8 * SMALL.n_queries)

    def test_deterministic(self):
        a = sd.split_queries(SMALL)
        b = sd.split_queries(SMALL)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestOracle:
    def test_floor_recorded_in_manifest(self, tmp_path):
        ds = sd.generate_dataset(SMALL)
        sd.write_dataset(ds, tmp_path)
        text = (tmp_path / "manifest.txt").read_text()
        assert "oracle_median_rank=" in text
        assert f"m_articles={SMALL.m_articles}" in text

    def test_oracle_beats_noise(self):
        # default noise: the floor is far better than random
        ds = sd.generate_dataset(SMALL)
        assert ds.oracle_stats["oracle_median_rank"] < 0.2 * SMALL.m_articles
