import json
import math

import numpy as np
import pytest

from tlguard.attack import dssim
from tlguard.cli import main
from tlguard.config import ConfigError, ExperimentConfig, from_dict, load_config, tomllib
from tlguard.data import save_png
from tlguard.experiment import (CSV_COLUMNS, Artifacts, MetricsReport, StageError, adaptive_eval, draw_candidates,
                                draw_pairs, run_experiment, stage)
from tlguard.report import csv_text, emit_report, load_report

TINY_TOML = """\
seed = 3
[task]
num_classes = 4
per_class = 30
student_classes = [1, 2, 3]
teacher_epochs = 2
student_epochs = 2
[differentiator]
iterations = 2
epochs = 1
epochs_per_iteration = 1
[attack]
iterations = 5
targeted_pairs = 6
nontargeted_sources = 4
candidate_count = 2
[ensemble]
size = 2
[sweep]
axis = "differentiator_count"
values = [1, 2]
[report]
timing = "off"
timing_queries = 3
"""


def tiny(**over):
    d = tomllib.loads(TINY_TOML)
    for dotted, v in over.items():
        section, key = dotted.split("__")
        d.setdefault(section, {})[key] = v
    return from_dict(d)


@pytest.fixture(scope="module")
def art():
    return Artifacts().ensure(tiny())


@pytest.fixture(scope="module")
def report(art):
    return run_experiment(tiny(), art)


class TestConfig:
    def test_defaults_validate(self):
        cfg = ExperimentConfig()
        assert cfg.ensemble.size == 5 and cfg.attack.budget == 0.05

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            from_dict({"task": {"bogus": 1}})

    def test_ensemble_larger_than_candidates(self):
        with pytest.raises(ConfigError):
            tiny(ensemble__size=3)

    def test_bad_sweep_axis(self):
        with pytest.raises(ConfigError):
            tiny(sweep__axis="moon_phase")

    def test_seed_override(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text(TINY_TOML)
        assert load_config(p, seed=11).seed == 11


class TestCorpusHygiene:
    def test_pairs_differ_in_label(self):
        labels = np.repeat([1, 2, 3], 5)
        src, tgt = draw_pairs(labels, 40, seed=0)
        assert (labels[src] != labels[tgt]).all()
        np.testing.assert_array_equal(src, draw_pairs(labels, 40, seed=0)[0])

    def test_candidates_cover_distinct_other_classes(self):
        labels = np.repeat([1, 2, 3, 4], 5)
        src, cands = draw_candidates(labels, 10, 3, seed=1)
        for s, row in zip(src, cands):
            assert labels[s] not in labels[row] and len(set(labels[row])) == len(row)

    def test_records(self, report, art):
        test = art.subset.test
        for r in report.records:
            assert r["source_label"] != r["target_label"]
            assert 0 <= r["source_id"] < len(test) and 0 <= r["target_id"] < len(test)
            if r["budget_satisfied"]:
                assert r["achieved_dssim"] <= r["budget"] + 1e-6

    def test_recorded_dssim_matches_images(self, art):
        from tlguard.experiment import targeted_corpus

        c = targeted_corpus(art.student.network, art.subset.test, tiny())
        np.testing.assert_allclose(c.dssim, dssim(c.images, art.subset.test.images[c.source_ids]), atol=1e-6)


class TestReport:
    def test_rows_and_closure(self, report):
        assert [r["axis_value"] for r in report.rows] == [1, 2]
        for r in report.rows:
            for k in ("targeted", "nontargeted"):
                total = r[f"reject_rate_{k}"] + r[f"residual_{k}"] + r[f"harmless_{k}"]
                assert total == pytest.approx(1.0)
            assert 0 <= r["tpr"] <= r["accuracy"] <= 1

    def test_more_differentiators_reject_more(self, report):
        a, b = report.rows
        assert b["tpr"] <= a["tpr"]
        assert b["reject_rate_targeted"] >= a["reject_rate_targeted"]

    def test_json_round_trip(self, report, tmp_path):
        emit_report(report, tmp_path, formats=("csv", "json"))
        back = load_report(tmp_path / "report.json")
        assert csv_text(back) == csv_text(report)
        assert back.records == json.loads(json.dumps(report.records))

    def test_csv_columns(self, report):
        lines = csv_text(report).splitlines()
        assert lines[0].split(",") == list(CSV_COLUMNS) and len(lines) == 3

    def test_empty_sweep_gives_header_only(self):
        assert csv_text(MetricsReport("threshold")).splitlines() == [",".join(CSV_COLUMNS)]

    def test_svg(self, report, tmp_path):
        paths = emit_report(report, tmp_path, formats=("svg",))
        assert paths[0].read_text().lstrip().startswith("<?xml")

    def test_timing_sanity(self, art):
        rep = run_experiment(tiny(report__timing="wall", sweep__values=[2]), art)
        row = rep.rows[0]
        assert 0 < row["phase1_ms"] <= row["total_ms"]


def test_fixed_seed_reproduces_csv(art, report):
    again = run_experiment(tiny(), Artifacts().ensure(tiny()))
    assert csv_text(again) == csv_text(report)


def test_adaptive_modes(art):
    rep = adaptive_eval(tiny(), art, modes=["unknown", "known"])
    assert [r["axis_value"] for r in rep.rows] == ["unknown", "known"]
    assert all(math.isnan(r["residual_nontargeted"]) for r in rep.rows)


def test_stage_errors_name_the_stage():
    with pytest.raises(StageError) as e:
        with stage("attack"):
            raise RuntimeError("boom")
    assert e.value.stage == "attack" and "boom" in str(e.value)


class TestCli:
    @pytest.fixture
    def cfg_path(self, tmp_path):
        p = tmp_path / "tiny.toml"
        p.write_text(TINY_TOML)
        return p

    def test_pipeline(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "run"
        for cmd in ("train-teacher", "make-student", "build-registry", "attack", "defend-eval"):
            assert main([cmd, "--config", str(cfg_path), "--out", str(out)]) == 0, cmd
        for name in ("teacher.tlga", "student.tlga", "registry.tlga", "attacks.json", "report.csv",
                     "report.json", "report.svg"):
            assert (out / name).exists(), name
        first = (out / "report.csv").read_bytes()
        (out / "report.csv").unlink()
        assert main(["report", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "report.csv").read_bytes() == first

    def test_config_error_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.toml"
        p.write_text("[task]\nnum_classes = 99\n")
        assert main(["train-teacher", "--config", str(p), "--out", str(tmp_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_corrupt_artifact_exit_code(self, cfg_path, tmp_path, capsys):
        (tmp_path / "teacher.tlga").write_bytes(b"garbage")
        assert main(["make-student", "--config", str(cfg_path), "--out", str(tmp_path)]) == 3
        assert "not a model archive" in capsys.readouterr().err

    def test_import_of_unknown_class(self, cfg_path, tmp_path, capsys):
        imp = tmp_path / "imp" / "nonexistent-class"
        imp.mkdir(parents=True)
        save_png(np.zeros((1, 24, 24)), imp / "0.png")
        assert main(["attack", "--config", str(cfg_path), "--out", str(tmp_path / "run"),
                     "--import", str(tmp_path / "imp")]) == 2
