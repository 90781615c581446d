import csv
import filecmp
import json

import numpy as np
import pytest

from nucleonet.cli import main
from nucleonet.data import CLASS_TITLES, load_feature_file

TINY = {
    "rounds": 1,
    "cae_epochs": 1,
    "cycle_epochs": 1,
    "filter_divisor": 20,
    "feature_dim": 16,
    "split_fraction": 0.5,
    "batch_size": 16,
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["gen-synth", "--seed", "7", "--count", "40", "--out", str(root / "data")]) == 0
    feats = root / "feats.nfv"
    assert main(["extract-features", "--manifest", str(root / "data/manifest.csv"), "--dim", "16",
                 "--out", str(feats)]) == 0
    return root


def write_config(path, **extra):
    path.write_text(json.dumps({**TINY, **extra}))
    return str(path)


def same_tree(a, b):
    left = sorted(p.relative_to(a) for p in a.rglob("*"))
    assert left == sorted(p.relative_to(b) for p in b.rglob("*"))
    for rel in left:
        if (a / rel).is_file():
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel


class TestUsage:
    def test_no_arguments(self, capsys):
        assert main([]) == 1

    def test_unknown_flag(self):
        assert main(["train", "--bogus"]) == 1

    def test_unknown_variant(self):
        assert main(["train", "--variant", "vgg", "--out", "x"]) == 1

    def test_missing_key_named(self, tmp_path, capsys):
        assert main(["train", "--variant", "wfm", "--out", str(tmp_path)]) == 1
        assert "missing config key 'manifest'" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"momentm": 0.9}))
        assert main(["train", "--config", str(cfg), "--variant", "w", "--out", str(tmp_path)]) == 1
        assert "momentm" in capsys.readouterr().err

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("NUCLEONET_THREADS", "many")
        assert main(["gradcheck", "--model", "w"]) == 1

    def test_data_error_exit_2(self, tmp_path):
        assert main(["train", "--variant", "w", "--out", str(tmp_path / "o"),
                     "--manifest", str(tmp_path / "missing.csv")]) == 2

    def test_corrupt_checkpoint_exit_2(self, tmp_path, dataset):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"junk")
        assert main(["predict", "--checkpoint", str(bad), "--manifest", str(dataset / "data/manifest.csv"),
                     "--out", str(tmp_path / "p.csv")]) == 2


class TestGenSynth:
    def test_rerun_identical_tree(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-synth", "--seed", "7", "--count", "15", "--out", str(tmp_path / name)]) == 0
        same_tree(tmp_path / "a", tmp_path / "b")

    def test_features_match_manifest(self, dataset):
        f = load_feature_file(dataset / "feats.nfv")
        assert f.shape == (40, 16)


class TestGradcheck:
    def test_single_model(self, capsys):
        assert main(["gradcheck", "--model", "wfm"]) == 0
        out = capsys.readouterr().out
        assert "model.wfm" in out and "max relative error" in out


class TestPipeline:
    def test_resolved_config_defaults(self, tmp_path, dataset):
        cfg = write_config(tmp_path / "c.json", cycle_epochs=1)
        out = tmp_path / "run"
        assert main(["train", "--variant", "default", "--config", cfg, "--manifest",
                     str(dataset / "data/manifest.csv"), "--out", str(out)]) == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["momentum"] == 0.975 and resolved["variant"] == "default"
        assert resolved["lr"]["wfm"] == 1e-4 and resolved["m"] == 0.6
        assert (out / "default/round0/model.ckpt").is_file()
        assert (out / "default/round0/cae_log.tsv").is_file()
        assert (out / "report.csv").is_file() and (out / "eval_default.json").is_file()

        # re-running from the emitted resolved config reproduces every artifact
        again = tmp_path / "again"
        assert main(["train", "--config", str(out / "resolved_config.json"), "--out", str(again)]) == 0
        for rel in ("default/round0/model.ckpt", "report.csv", "eval_default.json"):
            assert (out / rel).read_bytes() == (again / rel).read_bytes()

    def test_combo_train_eval_predict_report(self, tmp_path, dataset):
        cfg = write_config(tmp_path / "c.json", manifest=str(dataset / "data/manifest.csv"),
                           features=str(dataset / "feats.nfv"))
        run = tmp_path / "run"
        assert main(["train", "--variant", "combo", "--config", cfg, "--out", str(run)]) == 0
        header = next(csv.reader(open(run / "report.csv")))
        assert header == ["class", "wf", "wfm", "combo"]
        combo = json.loads((run / "eval_combo.json").read_text())[0]["per_class"]
        wf = json.loads((run / "eval_wf.json").read_text())[0]["per_class"]
        wfm = json.loads((run / "eval_wfm.json").read_text())[0]["per_class"]
        titles = list(CLASS_TITLES)
        assert [combo[t] for t in titles[:10]] == [wf[t] for t in titles[:10]]
        assert [combo[t] for t in titles[10:]] == [wfm[t] for t in titles[10:]]

        ev = tmp_path / "ev"
        assert main(["eval", "--variant", "wfm", "--config", cfg, "--run", str(run), "--out", str(ev)]) == 0
        a = json.loads((ev / "eval_wfm.json").read_text())
        b = json.loads((run / "eval_wfm.json").read_text())
        assert a == b

        pred = tmp_path / "pred.csv"
        assert main(["predict", "--checkpoint", str(run / "wfm/round0/model.ckpt"), "--manifest",
                     str(dataset / "data/manifest.csv"), "--features", str(dataset / "feats.nfv"),
                     "--out", str(pred)]) == 0
        rows = list(csv.reader(open(pred)))
        assert len(rows) == 41 and len(rows[0]) == 17
        shapes = np.array([[float(v) for v in r[11:]] for r in rows[1:]])
        np.testing.assert_allclose(shapes.sum(axis=1), 1.0, atol=1e-4)

        rep = tmp_path / "rep"
        assert main(["report", str(run / "eval_wf.json"), str(run / "eval_wfm.json"), "--out", str(rep)]) == 0
        assert next(csv.reader(open(rep / "report.csv"))) == ["class", "wf", "wfm"]

    def test_pretrain_cae_command(self, tmp_path, dataset):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "cae"
        assert main(["pretrain-cae", "--variant", "w", "--config", cfg, "--manifest",
                     str(dataset / "data/manifest.csv"), "--out", str(out)]) == 0
        assert (out / "cae.ckpt").is_file()
        assert len((out / "cae_log.tsv").read_text().splitlines()) == 2

    def test_outputs_stay_in_out_dir(self, tmp_path, dataset):
        cfg = write_config(tmp_path / "c.json")
        before = set(dataset.rglob("*"))
        out = tmp_path / "only_here"
        assert main(["train", "--variant", "w", "--config", cfg, "--manifest",
                     str(dataset / "data/manifest.csv"), "--out", str(out)]) == 0
        assert set(dataset.rglob("*")) == before
        assert set(p.name for p in tmp_path.iterdir()) == {"c.json", "only_here"}
