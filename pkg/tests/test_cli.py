"""End-to-end tests of the command-line surface on a seconds-scale run"""

import io
import json

import numpy as np
import pytest
from loguru import logger

from tweet_geodensity.cli import configure_logging, main
from tweet_geodensity.config import Config, RunConfig
from tweet_geodensity.corpus import read_corpus
from tweet_geodensity.evaluation import read_table
from tweet_geodensity.mixture import Gmm2D
from tweet_geodensity.text import tokenize

SMALL = dict(
    seed=1, train_size=300, dev_size=60, test_size=60, min_count=1, embed_dim=8, windows=(2, 3),
    filters=4, hidden=8, mixtures=2, dropout=0.0, batch_size=50, learning_rate=1e-2, epochs=2,
    patience=2, enet_steps=50, bootstrap_resamples=200, sweep_points=4, hist_bins=5, workers=1,
)


def run(*argv) -> int:
    return main([str(a) for a in argv])


def build_workspace(root, kinds=("cmdn", "cnn-l2", "mean")):
    root.mkdir(parents=True, exist_ok=True)
    config = RunConfig(**SMALL).write(root / "run.env")
    assert run("gen-data", "--config", config, "--out", root / "data") == 0
    for kind in kinds:
        assert run("train", "--config", config, "--data", root / "data", "--model", kind,
                   "--out", root / kind) == 0
    return root


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return build_workspace(tmp_path_factory.mktemp("cli"))


class TestGenData:

    def test_writes_splits_and_spec(self, workspace):
        data = workspace / "data"
        assert {p.name for p in data.iterdir()} == {"train.jsonl", "dev.jsonl", "test.jsonl",
                                                    "generator_spec.json", "config.env"}
        assert len((data / "train.jsonl").read_text().splitlines()) == 300
        assert len((data / "test.jsonl").read_text().splitlines()) == 60

    def test_seeded_output_is_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--set", "train_size=50", "--set", "dev_size=5", "--set", "test_size=5",
                       "--seed", 3, "--out", tmp_path / name) == 0
        for split in ("train", "dev", "test"):
            assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == \
                (tmp_path / "b" / f"{split}.jsonl").read_bytes()

    def test_missing_spec_is_usage_error(self, tmp_path):
        assert run("gen-data", "--spec", tmp_path / "none.json", "--out", tmp_path / "d") == 1

    def test_custom_spec(self, tmp_path, tiny_spec):
        spec = tiny_spec.save(tmp_path / "tiny.json")
        assert run("gen-data", "--spec", spec, "--set", "train_size=20", "--set", "dev_size=2",
                   "--set", "test_size=2", "--out", tmp_path / "d") == 0
        tokens = {t for r in read_corpus(tmp_path / "d" / "train.jsonl") for t in tokenize(r.text)}
        known = set(tiny_spec.fillers)
        for place in tiny_spec.places:
            known |= {place.word, *place.disambiguators}
        assert tokens <= known

    def test_non_empty_out_dir_rejected(self, tmp_path):
        (tmp_path / "full").mkdir()
        (tmp_path / "full" / "keep.txt").write_text("x")
        assert run("gen-data", "--out", tmp_path / "full") == 1

    def test_default_run_directory(self, tmp_path, monkeypatch):
        monkeypatch.setattr(Config, 'RUNS_DIR', tmp_path / "runs")
        args = ("gen-data", "--set", "train_size=5", "--set", "dev_size=2", "--set", "test_size=2")
        assert run(*args) == 0
        assert run(*args) == 0
        names = sorted(p.name for p in (tmp_path / "runs").iterdir())
        assert len(names) == 2
        assert names[0].startswith("gen-data-") and names[0].endswith("-1")
        assert names[1].endswith("-2")


class TestTrain:

    def test_outputs(self, workspace):
        files = {p.name for p in (workspace / "cmdn").iterdir()}
        assert {"model.npz", "vocab.tsv", "config.env", "history.csv"} <= files
        history = read_table(workspace / "cmdn" / "history.csv")
        assert history.columns.tolist() == ['epoch', 'train_loss', 'dev_loss', 'dev_median_km', 'dev_mean_km']

    def test_mean_checkpoint_holds_one_point(self, workspace):
        with np.load(workspace / "mean" / "model.npz") as data:
            assert [name for name in data.files if name != '__meta__'] == ['point']

    def test_loss_kinds_differ_only_in_model(self, workspace, tmp_path):
        config = RunConfig(**SMALL).write(tmp_path / "run.env")
        assert run("train", "--config", config, "--data", workspace / "data", "--model", "cnn-l1",
                   "--out", tmp_path / "l1") == 0
        l1 = RunConfig.from_file(tmp_path / "l1" / "config.env").to_dict()
        l2 = RunConfig.from_file(workspace / "cnn-l2" / "config.env").to_dict()
        differing = {k for k in l1 if l1[k] != l2[k]} - {'out_dir', 'data_dir'}
        assert differing == {'model'}

    def test_unknown_model_is_usage_error(self, workspace, tmp_path):
        assert run("train", "--data", workspace / "data", "--model", "transformer",
                   "--out", tmp_path / "x") == 1

    def test_missing_data_is_usage_error(self, tmp_path):
        assert run("train", "--data", tmp_path / "nothing", "--out", tmp_path / "x") == 1


class TestEval:

    def eval(self, workspace, out, *extra, model="cmdn"):
        return run("eval", "--checkpoint", workspace / model / "model.npz",
                   "--corpus", workspace / "data" / "test.jsonl", "--out", out, *extra)

    def test_summary(self, workspace, tmp_path):
        assert self.eval(workspace, tmp_path / "e") == 0
        data = json.loads((tmp_path / "e" / "summary.json").read_text())
        assert {'mean_km', 'median_km', 'mean_ci', 'median_ci', 'by_tag'} <= set(data['summary'])
        assert data['meta']['seed'] == 1
        assert data['model'] == 'cmdn'
        records = read_table(tmp_path / "e" / "records.csv")
        assert len(records) == 60
        assert records['likelihood'].notna().all()

    def test_csv_header_names_run(self, workspace, tmp_path):
        assert self.eval(workspace, tmp_path / "e") == 0
        first = (tmp_path / "e" / "records.csv").read_text().splitlines()[0]
        assert first.startswith("# config_hash=") and first.endswith("seed=1")

    def test_sweep_rows_match_bounds(self, workspace, tmp_path):
        assert self.eval(workspace, tmp_path / "e", "--sweep") == 0
        sweep = read_table(tmp_path / "e" / "sweep.csv")
        assert len(sweep) == 4
        assert sweep['retained'].is_monotonic_decreasing

    def test_explicit_sweep_bounds(self, workspace, tmp_path):
        assert self.eval(workspace, tmp_path / "e", "--sweep", "--set", "sweep_bounds=0,1e9") == 0
        sweep = read_table(tmp_path / "e" / "sweep.csv")
        assert sweep['retained'].tolist() == [60, 0]

    def test_twice_gives_identical_bytes(self, workspace, tmp_path):
        for name in ("a", "b"):
            assert self.eval(workspace, tmp_path / name, "--sweep", "--hist") == 0
        for file in ("records.csv", "summary.json", "sweep.csv", "hist.csv"):
            assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()

    def test_sweep_on_regression_is_data_error(self, workspace, tmp_path):
        assert self.eval(workspace, tmp_path / "e", "--sweep", model="cnn-l2") == 2

    def test_histogram_comparison(self, workspace, tmp_path):
        assert self.eval(workspace, tmp_path / "e", "--hist", "--compare",
                         workspace / "cnn-l2" / "model.npz", workspace / "mean" / "model.npz") == 0
        hist = read_table(tmp_path / "e" / "hist.csv")
        assert hist.columns.tolist() == ['bin_low', 'bin_high', 'cmdn', 'cnn-l2', 'mean']
        assert (hist[['cmdn', 'cnn-l2', 'mean']].sum() == 60).all()

    def test_densities(self, workspace, tmp_path):
        assert self.eval(workspace, tmp_path / "e", "--densities") == 0
        lines = (tmp_path / "e" / "densities.jsonl").read_text().splitlines()
        assert len(lines) == 61
        assert Gmm2D.from_dict(json.loads(lines[1])).k == 2

    def test_missing_corpus_is_usage_error(self, workspace, tmp_path):
        assert run("eval", "--checkpoint", workspace / "cmdn" / "model.npz",
                   "--corpus", tmp_path / "none.jsonl", "--out", tmp_path / "e") == 1

    def test_default_corpus_is_test_split(self, workspace, tmp_path):
        assert run("eval", "--checkpoint", workspace / "mean" / "model.npz", "--out", tmp_path / "e") == 0
        assert len(read_table(tmp_path / "e" / "records.csv")) == 60

    def test_tampered_vocabulary_rejected(self, workspace, tmp_path):
        import shutil
        copy = tmp_path / "copy"
        shutil.copytree(workspace / "cmdn", copy)
        with open(copy / "vocab.tsv", "a", encoding="utf-8") as f:
            f.write("extra\t999\n")
        assert run("eval", "--checkpoint", copy / "model.npz",
                   "--corpus", workspace / "data" / "test.jsonl", "--out", tmp_path / "e") == 2


class TestPredict:

    def predict(self, workspace, capsys, *extra, model="cmdn"):
        code = run("predict", "--checkpoint", workspace / model / "model.npz", *extra)
        return code, [json.loads(line) for line in capsys.readouterr().out.splitlines()]

    def test_empty_line_uses_all_pad_encoding(self, workspace, capsys):
        code, rows = self.predict(workspace, capsys, "--text", "")
        assert code == 0
        assert rows[0]['text'] == ""
        assert rows[0]['likelihood'] > 0

    def test_emit_density(self, workspace, capsys):
        code, rows = self.predict(workspace, capsys, "--text", "place03 w010", "--emit-density")
        assert code == 0
        gmm = Gmm2D.from_dict(rows[0]['density'])
        assert gmm.k == 2
        assert any(np.allclose(mu, [rows[0]['lat'], rows[0]['lon']]) for mu in gmm.mu)

    def test_regression_with_emit_density_is_data_error(self, workspace, capsys):
        code, _ = self.predict(workspace, capsys, "--text", "w001", "--emit-density", model="cnn-l2")
        assert code == 2

    def test_regression_rows_have_no_likelihood(self, workspace, capsys):
        code, rows = self.predict(workspace, capsys, "--text", "w001 w002", model="cnn-l2")
        assert code == 0
        assert set(rows[0]) == {'text', 'lat', 'lon'}

    def test_reads_stdin(self, workspace, capsys, monkeypatch):
        monkeypatch.setattr('sys.stdin', io.StringIO("place01 w003\n\nw004\n"))
        code, rows = self.predict(workspace, capsys, model="mean")
        assert code == 0
        assert [r['text'] for r in rows] == ["place01 w003", "", "w004"]
        assert len({(r['lat'], r['lon']) for r in rows}) == 1


class TestGradCheck:

    def test_passes(self, capsys):
        assert run("grad-check", "--kinds", "cnn-l2", "cnn-l1", "cmdn") == 0
        out = capsys.readouterr().out
        assert "cmdn\tmax_rel_error=" in out
        assert "  conv2.weight\t" in out

    def test_threshold_breach_exits_numeric(self, capsys):
        assert run("grad-check", "--kinds", "mlp-l2", "--threshold", 0) == 3
        assert "FAIL" in capsys.readouterr().out

    def test_baseline_kind_is_usage_error(self):
        assert run("grad-check", "--kinds", "enet") == 1


def test_missing_command_is_usage_error():
    assert run() == 1


class TestDebugMode:

    def test_errors_carry_tracebacks_only_in_debug_mode(self, tmp_path, capsys, monkeypatch):
        assert run("gen-data", "--spec", tmp_path / "none.json", "--out", tmp_path / "a") == 1
        assert "Traceback" not in capsys.readouterr().err

        monkeypatch.setattr(Config, 'DEBUG_MODE', True)
        assert run("gen-data", "--spec", tmp_path / "none.json", "--out", tmp_path / "b") == 1
        assert "Traceback" in capsys.readouterr().err

    def test_debug_mode_lowers_the_default_level(self, capsys, monkeypatch):
        monkeypatch.setattr(Config, 'DEBUG_MODE', True)
        configure_logging()
        logger.debug("encoder detail")
        assert "encoder detail" in capsys.readouterr().err

        monkeypatch.setattr(Config, 'DEBUG_MODE', False)
        monkeypatch.setattr(Config, 'LOG_LEVEL', 'INFO')
        configure_logging()
        logger.debug("hidden detail")
        assert "hidden detail" not in capsys.readouterr().err


def test_full_pipeline_is_reproducible(tmp_path):
    roots = [build_workspace(tmp_path / name, kinds=("cmdn",)) for name in ("one", "two")]
    for root in roots:
        assert run("eval", "--checkpoint", root / "cmdn" / "model.npz",
                   "--corpus", root / "data" / "test.jsonl", "--out", root / "eval", "--sweep") == 0
    for relative in ("data/train.jsonl", "cmdn/history.csv", "eval/records.csv", "eval/sweep.csv"):
        assert (roots[0] / relative).read_bytes() == (roots[1] / relative).read_bytes()
