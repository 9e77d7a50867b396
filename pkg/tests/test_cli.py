"""Configuration loading and the command-line workflow."""
import json
from dataclasses import replace

import pytest

from conftest import small_config
from radhop.cli import main
from radhop.config import ConfigError, PipelineConfig, config_from_dict, load_config


def _write(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    cfg.save(path)
    return path


class TestConfig:
    def test_defaults_are_reference_values(self):
        cfg = PipelineConfig()
        assert cfg.stage1.threshold == 0.3
        assert cfg.radiomics.k == 800 and cfg.radiomics.lnt_n_out == 20
        assert cfg.radiomics.lnt_subset == 200 and cfg.radiomics.window == 24
        s2 = cfg.stage2
        assert (s2.gamma, s2.lr, s2.batch_size, s2.epochs) == (0.95, 1e-4, 4096, 20)
        assert cfg.preprocess.target_spacing_mm == (3.0, 0.25, 0.25)
        assert (cfg.preprocess.lo_percentile, cfg.preprocess.hi_percentile) == (0.05, 99.5)

    def test_round_trip(self, tmp_path):
        cfg = small_config(seed=4)
        assert load_config(_write(tmp_path, cfg)) == cfg

    def test_precedence(self, tmp_path):
        path = _write(tmp_path, replace(PipelineConfig(), seed=3))
        assert load_config(path).seed == 3
        cfg = load_config(path, seed=9, loss="mse", gamma=0.5, threads=2, overlays=True)
        assert (cfg.seed, cfg.stage2.loss, cfg.stage2.gamma, cfg.threads, cfg.eval.overlays) == \
            (9, "mse", 0.5, 2, True)

    @pytest.mark.parametrize("data", [
        {"bogus": 1},
        {"stage2": {"gamma": -1.0}},
        {"stage2": {"loss": "l1"}},
        {"preprocess": {"lo_percentile": 99.9}},
        {"radiomics": []},
    ])
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")

    def test_bad_threads(self):
        with pytest.raises(ConfigError):
            load_config(threads=0)


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text(json.dumps({"stage2": {"gamma": -2}}))
        assert main(["gradcheck", "--config", str(tmp_path / "bad.json")]) == 2
        assert "gamma" in capsys.readouterr().err

    def test_missing_models(self, tmp_path):
        path = _write(tmp_path, small_config())
        assert main(["infer", "--config", str(path)]) == 2

    def test_feature_budget(self, tmp_path):
        cfg = small_config()
        cfg = replace(cfg, radiomics=replace(cfg.radiomics, min_features=10_000))
        path = _write(tmp_path, cfg)
        assert main(["gen-phantoms", "--config", str(path), "--n", "3"]) == 0
        assert main(["fit-stage1", "--config", str(path)]) == 3

    def test_no_rois(self, tmp_path):
        cfg = small_config()
        cfg = replace(cfg, stage1=replace(cfg.stage1, threshold=1.0))
        path = _write(tmp_path, cfg)
        assert main(["gen-phantoms", "--config", str(path)]) == 0
        assert main(["fit-stage1", "--config", str(path)]) == 0
        assert main(["fit-stage2", "--config", str(path)]) == 4

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--trials", "2"]) == 0
        assert "PASS" in capsys.readouterr().out


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _run(workdir, threads):
    workdir.mkdir()
    path = _write(workdir, small_config())
    common = ["--config", str(path), "--threads", str(threads)]
    for cmd in (["gen-phantoms"], ["fit-stage1"], ["fit-stage2"], ["infer"], ["evaluate", "--overlays"]):
        assert main(cmd + common) == 0, cmd
    return _tree(workdir)


def test_end_to_end_is_deterministic(tmp_path, capsys):
    a = _run(tmp_path / "a", 1)
    b = _run(tmp_path / "b", 3)
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], name
    for needed in ("models/radiomics.json", "models/classifier.json", "models/radhopnet_wrmse.json",
                   "models/radhopnet_wrmse_train_log.csv", "reports/rois.json", "reports/report.json",
                   "data/test.json"):
        assert needed in a
    assert any(k.startswith("reports/overlays/") for k in a)
    report = json.loads(a["reports/report.json"])
    assert set(report) == {"stage1", "stage2"}
    out = capsys.readouterr().out
    assert "stage2" in out and "AUROC" in out
