import json

import pytest
from click.testing import CliRunner

from shopmatch import cli, models

SMALL_GEN = {
    "gen": {"m_articles": 120, "n_queries": 240, "seed": 11},
    "encoder": {"hidden_widths": [32, 32], "dropout_rate": 0.0, "head_hidden": 24},
    "train": {"learning_rate": 0.003, "epochs": 2, "articles_per_query": 25,
              "batch_queries": 16, "probe_queries": 16, "probe_articles": 120},
}


def _run(*args):
    return CliRunner().invoke(cli.main, list(args), catch_exceptions=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(SMALL_GEN))
    data_dir = root / "data"
    res = _run("gen", "--config", str(cfg_path), "--out", str(data_dir))
    assert res.exit_code == 0, res.output
    runs = root / "runs"
    res = _run("train", "--config", str(cfg_path), "--data", str(data_dir),
               "--variant", "linear", "--seed", "3", "--out", str(runs))
    assert res.exit_code == 0, res.output
    res = _run("train", "--config", str(cfg_path), "--data", str(data_dir),
               "--variant", "studio2shop", "--seed", "3", "--out", str(runs))
    assert res.exit_code == 0, res.output
    return cfg_path, data_dir, runs


class TestGen:
    def test_outputs_and_summary(self, workspace, tmp_path):
        cfg_path, data_dir, _ = workspace
        for name in ["manifest.txt", "articles.fstr", "articles_generic.fstr",
                     "article_inputs.qstr", "queries.qstr", "annotations.tsv"]:
            assert (data_dir / name).exists(), name
        res = _run("gen", "--config", str(cfg_path), "--out", str(tmp_path / "d"))
        assert "oracle floor: median rank" in res.output

    def test_byte_identical_across_runs(self, workspace, tmp_path):
        cfg_path, data_dir, _ = workspace
        other = tmp_path / "again"
        res = _run("gen", "--config", str(cfg_path), "--out", str(other))
        assert res.exit_code == 0
        for name in ["manifest.txt", "articles.fstr", "queries.qstr",
                     "annotations.tsv"]:
            assert (other / name).read_bytes() == (data_dir / name).read_bytes()

    def test_invalid_fraction_rejected(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"gen": {"multi_label_fraction": 1.5}}))
        res = CliRunner().invoke(cli.main, ["gen", "--config", str(cfg),
                                            "--out", str(tmp_path / "x")])
        assert res.exit_code == 1
        assert "error: parameter:" in res.output
        assert "multi_label_fraction" in res.output

    def test_unknown_config_field_listed(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"gen": {"m_articlez": 10}}))
        res = CliRunner().invoke(cli.main, ["gen", "--config", str(cfg),
                                            "--out", str(tmp_path / "x")])
        assert res.exit_code == 1
        assert "error: config:" in res.output and "m_articlez" in res.output


class TestTrain:
    def test_checkpoint_round_trip(self, workspace, tmp_path):
        _, _, runs = workspace
        ckpt = runs / "linear.m2sh"
        assert ckpt.exists() and (runs / "linear_train_report.csv").exists()
        params = models.load_checkpoint(ckpt)
        assert params.spec.name == "linear"
        models.save_checkpoint(params, tmp_path / "copy.m2sh")
        assert (tmp_path / "copy.m2sh").read_bytes() == ckpt.read_bytes()

    def test_report_columns(self, workspace):
        _, _, runs = workspace
        lines = (runs / "linear_train_report.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_median_rank"
        assert len(lines) == 1 + SMALL_GEN["train"]["epochs"]

    def test_static_linear_refused(self, workspace, tmp_path):
        cfg_path, data_dir, _ = workspace
        res = CliRunner().invoke(cli.main, [
            "train", "--config", str(cfg_path), "--data", str(data_dir),
            "--variant", "static-linear", "--out", str(tmp_path)])
        assert res.exit_code == 1
        assert "error: config:" in res.output
        assert "no trainable loss" in res.output

    def test_same_seed_byte_identical_checkpoint(self, workspace, tmp_path):
        cfg_path, data_dir, runs = workspace
        again = tmp_path / "again"
        res = _run("train", "--config", str(cfg_path), "--data", str(data_dir),
                   "--variant", "linear", "--seed", "3", "--out", str(again))
        assert res.exit_code == 0
        assert (again / "linear.m2sh").read_bytes() == \
            (runs / "linear.m2sh").read_bytes()
        assert (again / "linear_train_report.csv").read_bytes() == \
            (runs / "linear_train_report.csv").read_bytes()


class TestEval:
    def test_metrics_and_ranks_written(self, workspace, tmp_path):
        cfg_path, data_dir, runs = workspace
        out = tmp_path / "eval"
        res = _run("eval", "--data", str(data_dir), "--variant", "linear",
                   "--checkpoint", str(runs / "linear.m2sh"), "--out", str(out))
        assert res.exit_code == 0, res.output
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "variant,top1,top5,top10,top20,top50,top1pct,avg,median"
        assert lines[1].startswith("linear,")
        first = (out / "ranks.tsv").read_text().splitlines()[0].split("\t")
        assert len(first) == 3

    def test_static_variant_needs_no_checkpoint(self, workspace, tmp_path):
        _, data_dir, _ = workspace
        out = tmp_path / "eval"
        res = _run("eval", "--data", str(data_dir), "--variant", "static-linear",
                   "--out", str(out))
        assert res.exit_code == 0, res.output

    def test_untrained_nonlinear_needs_checkpoint(self, workspace, tmp_path):
        _, data_dir, _ = workspace
        res = CliRunner().invoke(cli.main, [
            "eval", "--data", str(data_dir), "--variant", "studio2shop",
            "--out", str(tmp_path)])
        assert res.exit_code == 1 and "error: config:" in res.output

    def test_checkpoint_variant_mismatch(self, workspace, tmp_path):
        _, data_dir, runs = workspace
        res = CliRunner().invoke(cli.main, [
            "eval", "--data", str(data_dir), "--variant", "studio2shop",
            "--checkpoint", str(runs / "linear.m2sh"), "--out", str(tmp_path)])
        assert res.exit_code == 1
        assert "error: config:" in res.output

    def test_deterministic_outputs(self, workspace, tmp_path):
        _, data_dir, runs = workspace
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            res = _run("eval", "--data", str(data_dir), "--variant", "studio2shop",
                       "--checkpoint", str(runs / "studio2shop.m2sh"),
                       "--out", str(out))
            assert res.exit_code == 0, res.output
            outs.append(out)
        assert (outs[0] / "metrics.csv").read_bytes() == \
            (outs[1] / "metrics.csv").read_bytes()
        assert (outs[0] / "ranks.tsv").read_bytes() == \
            (outs[1] / "ranks.tsv").read_bytes()

    def test_two_stage_full_shortlist_equals_plain(self, workspace, tmp_path):
        _, data_dir, runs = workspace
        plain = tmp_path / "plain"
        res = _run("eval", "--data", str(data_dir), "--variant", "studio2shop",
                   "--checkpoint", str(runs / "studio2shop.m2sh"),
                   "--out", str(plain))
        assert res.exit_code == 0, res.output
        staged = tmp_path / "staged"
        res = _run("eval", "--data", str(data_dir), "--variant", "studio2shop",
                   "--checkpoint", str(runs / "studio2shop.m2sh"),
                   "--two-stage", "--linear-checkpoint", str(runs / "linear.m2sh"),
                   "--out", str(staged))
        assert res.exit_code == 0, res.output
        plain_rows = (plain / "metrics.csv").read_text().splitlines()[1]
        staged_rows = (staged / "metrics.csv").read_text().splitlines()[1]
        assert plain_rows.split(",")[1:] == staged_rows.split(",")[1:]
        assert (plain / "ranks.tsv").read_bytes() == (staged / "ranks.tsv").read_bytes()


class TestBench:
    def test_sweep_rows_and_monotone_time(self, workspace, tmp_path):
        _, data_dir, runs = workspace
        out = tmp_path / "bench"
        res = _run("bench", "--data", str(data_dir), "--variant", "linear",
                   "--checkpoint", str(runs / "linear.m2sh"),
                   "--queries-list", "20,80", "--reps", "3", "--out", str(out))
        assert res.exit_code == 0, res.output
        lines = (out / "timing.csv").read_text().splitlines()
        assert lines[0] == "n_queries,m,chunk,engine,wall_time_s,per_query_ms"
        rows = [line.split(",") for line in lines[1:]]
        assert [r[0] for r in rows] == ["20", "80"]
        assert float(rows[1][4]) > float(rows[0][4]) * 0.5  # work grows with n

    def test_compare_engines_rows(self, workspace, tmp_path):
        from shopmatch.kernels import available_engines
        _, data_dir, runs = workspace
        out = tmp_path / "bench2"
        res = _run("bench", "--data", str(data_dir), "--variant", "studio2shop",
                   "--checkpoint", str(runs / "studio2shop.m2sh"),
                   "--queries-list", "16", "--reps", "2", "--compare-engines",
                   "--out", str(out))
        assert res.exit_code == 0, res.output
        lines = (out / "timing.csv").read_text().splitlines()[1:]
        engines = [line.split(",")[3] for line in lines]
        assert engines == list(available_engines())
