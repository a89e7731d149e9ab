import csv
import json

import numpy as np
import pytest

from mindmeld import cli
from mindmeld import pipeline as pl

TINY = dict(
    m_train=4, n_test=2, calibration_tasks=3, holdout_tasks=(3,), epochs=2, infer_steps=5,
    condition_demonstrators=1, dagger_iters=1, policy_epochs=20, eval_starts=3, demo_rollouts=1,
)


def tiny(**kw):
    return pl.ExperimentConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    bundle = pl.run_all(tiny(), out)
    return pl.RunDir(out), bundle


# ---------------------------------------------------------------- config


def test_config_text_roundtrip():
    cfg = tiny(seed=9, holdout_tasks=(5, 7), lr=0.002)
    assert pl.ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_config_comments_and_overrides():
    cfg = pl.ExperimentConfig.from_text("# demo\nseed = 4  # trailing\n\nm_train=6\n", epochs=3)
    assert (cfg.seed, cfg.m_train, cfg.epochs) == (4, 6, 3)


def test_config_errors():
    with pytest.raises(ValueError, match="unknown config key"):
        pl.ExperimentConfig.from_text("nope = 1")
    with pytest.raises(ValueError, match="expected key"):
        pl.ExperimentConfig.from_text("seed 4")
    with pytest.raises(ValueError, match="overlap"):
        pl.ExperimentConfig(calibration_tasks=12, holdout_tasks=(11, 12))
    with pytest.raises(ValueError):
        pl.ExperimentConfig(holdout_mode="sideways")


def test_identity_population():
    styles = pl.make_styles(tiny(styles="identity"))
    assert all(s.timing == 0 and s.magnitude == 1.0 for s in styles)
    assert len(styles) == 6


# ---------------------------------------------------------------- stages


def test_run_directory_layout(tiny_run):
    run, bundle = tiny_run
    for rel in ("config.txt", "manifest.json", "styles.json", "tasks/task_00.json", "tasks/task_03.csv",
                "labels/p000_t00.csv", "labels/p005_t03.csv", "model/checkpoint.json", "model/loss_trace.csv"):
        assert run.path(rel).exists(), rel
    for name in ("improvement_calibration", "improvement_holdout", "improvement_test", "style_report",
                 "correlation", "embedding_scatter", "conditions", "embeddings_train"):
        assert (run.reports / f"{name}.csv").exists(), name
    m = run.manifest()
    assert set(m["stages"]) == {"gen", "train", "infer", "conditions", "report"}
    assert m["seed"] == 0 and "package_version" in m


def test_table_headers(tiny_run):
    run, _ = tiny_run
    first = lambda name: (run.reports / name).read_text().splitlines()[0]  # noqa: E731
    assert first("embeddings_train.csv") == "demonstrator_id,w0,w1,timing,magnitude"
    assert first("style_report.csv") == "demonstrator_id,task_id,amplitude_D,timing,amplitude_norm,timing_norm"
    assert first("correlation.csv") == "construct,test,coefficient,p_value"
    assert first("improvement_calibration.csv") == "demonstrator_id,raw_error,corrected_error,improvement"


def test_improvement_rows_consistent(tiny_run):
    run, _ = tiny_run
    rep = pl.ImprovementReport.read(run.reports / "improvement_calibration.csv")
    assert [r.demonstrator_id for r in rep.rows] == [0, 1, 2, 3]
    for r in rep.rows:
        assert r.raw_error > 0
        assert r.improvement <= 1
        assert r.improvement == pytest.approx(1 - r.corrected_error / r.raw_error)


def test_conditions_share_cells(tiny_run):
    run, _ = tiny_run
    with open(run.reports / "conditions.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["condition"] for r in rows] == ["BC", "DAGGER", "MM_DAGGER"]
    assert len({r["demonstrator_id"] for r in rows}) == 1
    assert all(0.0 <= float(r["final_success"]) <= 1.0 for r in rows)


def test_report_summary_and_exit_code(tiny_run, capsys):
    run, bundle = tiny_run
    summary = json.loads((run.reports / "summary.json").read_text())
    assert summary["checks"] == bundle.checks
    assert summary["reference"]["calibration"] == 0.61
    # exit code mirrors the threshold checks
    assert cli.main(["report", str(run.root)]) == (0 if bundle.passed else 1)
    assert "content hash" in capsys.readouterr().out


def test_same_config_same_hash(tiny_run, tmp_path):
    run, bundle = tiny_run
    again = pl.run_all(tiny(), tmp_path / "again")
    assert again.content_hash == bundle.content_hash
    assert (tmp_path / "again" / "reports" / "summary.json").read_bytes() == (run.reports / "summary.json").read_bytes()


def test_different_seed_different_hash(tiny_run, tmp_path):
    _, bundle = tiny_run
    other = pl.run_all(tiny(seed=1), tmp_path / "other", conditions=False)
    assert other.content_hash != bundle.content_hash


def test_missing_stage_named(tmp_path):
    run = pl.generate(tiny(), tmp_path / "r")
    with pytest.raises(pl.StageError, match="'train' stage"):
        pl.run_test_phase(run)
    with pytest.raises(pl.StageError, match="'gen' stage"):
        pl.run_calibration_phase(pl.RunDir(tmp_path / "empty"))


def test_empty_test_phase(tmp_path):
    bundle = pl.run_all(tiny(n_test=0), tmp_path / "r", conditions=False)
    assert bundle.summary["test_phase"] == "absent"
    assert bundle.summary["conditions"] == "absent"
    assert "test_improvement" not in bundle.checks
    rep = pl.ImprovementReport.read(tmp_path / "r" / "reports" / "improvement_test.csv")
    assert rep.rows == []


def test_joint_holdout_mode(tmp_path):
    run = pl.generate(tiny(holdout_mode="joint", joint_epochs=1), tmp_path / "r")
    pl.run_calibration_phase(run)
    emb, rep = pl.run_test_phase(run)
    assert sorted(emb) == [4, 5]
    assert len(rep.rows) == 2
    assert run.manifest()["stages"]["infer"]["mode"] == "joint"


# ---------------------------------------------------------------- CLI


def test_cli_stages(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("\n".join(f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in TINY.items()))
    out = tmp_path / "run"
    assert cli.main(["gen", "--config", str(cfg), "--out", str(out), "--holdout-mode", "frozen", "--set", "seed=2"]) == 0
    assert pl.RunDir(out).config().seed == 2
    assert cli.main(["train", str(out)]) == 0
    assert cli.main(["infer", str(out)]) == 0
    assert "calibration improvement" in capsys.readouterr().out


def test_cli_stage_error_exit_code(tmp_path, capsys):
    assert cli.main(["train", str(tmp_path / "nothing")]) == 2
    assert "gen" in capsys.readouterr().err


def test_cli_dtw(tmp_path, capsys):
    o = np.sin(np.linspace(0, 6, 40)) + 1.0
    (tmp_path / "o.csv").write_text("o\n" + "\n".join(repr(float(v)) for v in o))
    (tmp_path / "a.csv").write_text("\n".join(f"{t},{float(1.5 * v)!r}" for t, v in enumerate(o)))
    assert cli.main(["dtw", str(tmp_path / "a.csv"), str(tmp_path / "o.csv")]) == 0
    text = capsys.readouterr().out
    amp = float(text.split("amplitude_D ")[1].split()[0])
    assert amp > 0


def test_cli_grad_check(capsys):
    assert cli.main(["grad-check", "--entries", "20"]) == 0
    assert capsys.readouterr().out.count("PASS") == 4
