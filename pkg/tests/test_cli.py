import numpy as np
import pytest

from ponwatch import __version__
from ponwatch.cli import run
from ponwatch.config import ConfigError, RunConfig, format_config, load_config, parse_config_text
from ponwatch.dataset import load_dataset
from ponwatch.otdr_sim import trace_from_csv

TINY = ["--set", "hidden=4,4,4", "--set", "branch_max_epochs=1", "--set", "generic_max_epochs=1"]


# -- config ------------------------------------------------------------------------


def test_parse_config_text():
    vals = parse_config_text("# desk run\nseed = 3\nbranch_lengths_m = 3, 5,10\n\nthreshold=0.25  # looser\n")
    assert vals == {"seed": 3, "branch_lengths_m": (3.0, 5.0, 10.0), "threshold": 0.25}


@pytest.mark.parametrize("text, key", [("sede = 3", "sede"), ("seed = three", "seed"), ("per_class = 1.5", "per_class")])
def test_config_errors_name_key(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config_text(text)


def test_config_line_without_equals():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("seed = 1\nseed 2\n")


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 11\nper_class = 50\n")
    cfg = load_config(p, {"per_class": "60", "pnr_min": None})
    assert (cfg.seed, cfg.per_class, cfg.pnr_min) == (11, 60, 5.0)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_format_config_round_trip():
    cfg = RunConfig(seed=9, fault_branches=(2, 4))
    assert load_config(None, parse_config_text(format_config(cfg))) == cfg


def test_config_digest_tracks_values():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig(seed=8).digest() != RunConfig().digest()


def test_config_builds_components():
    cfg = RunConfig()
    assert len(cfg.topology().branches) == 8 and cfg.topology().split_ratio == 128
    assert cfg.sim_config().trace_len == 5200
    assert cfg.robustness_recipe().break_fraction == 1.0
    assert cfg.robustness_recipe().feeder_loss_range_db == (2.0, 16.0)
    assert cfg.train_config("branch").max_epochs == 24
    assert cfg.train_config("generic_b").task_weights == (1.0, 30.0)


# -- commands ----------------------------------------------------------------------


def test_gen_dataset_network_count(tmp_path, capsys):
    out = tmp_path / "net.ds"
    assert run(["gen-dataset", "--kind", "network", "--per-class", "1000", "--seed", "7", "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert len(ds) == 9000 and ds.seed == 7
    assert "9000 records" in capsys.readouterr().out


def test_gen_dataset_robustness_and_csv(tmp_path):
    out, csv = tmp_path / "rob.ds", tmp_path / "rob.csv"
    assert run(["gen-dataset", "--kind", "robustness", "--per-class", "3", "--out", str(out), "--csv", str(csv)]) == 0
    ds = load_dataset(out)
    assert len(ds) == 27 and ds.pnr_db.min() >= 5 and ds.pnr_db.max() <= 15
    assert csv.is_file()


def test_simulate_writes_traceable_csv(tmp_path):
    out = tmp_path / "t.csv"
    assert run(["simulate", "--fault", "3:5", "--pnr", "20", "--out", str(out)]) == 0
    text = out.read_text()
    assert f"# ponwatch {__version__}" in text and "# config_digest " in text
    tr = trace_from_csv(out)
    assert len(tr) == 5200 and tr.normalized
    assert -0.1 < tr.samples.min() < 0.1 and 0.9 < tr.samples.max() < 1.1


@pytest.fixture(scope="module")
def tiny_net(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    assert run(["gen-dataset", "--kind", "network", "--per-class", "10", "--out", str(d / "net.ds")]) == 0
    return d


def test_train_twice_identical_and_eval(tiny_net):
    d = tiny_net
    for name in ("a", "b"):
        assert run(["train", "--model", "branch", "--dataset", str(d / "net.ds"), "--seed", "7",
                    "--out", str(d / f"{name}.ckpt"), *TINY]) == 0
    assert (d / "a.ckpt").read_bytes() == (d / "b.ckpt").read_bytes()
    assert (d / "a.ckpt.history.csv").read_bytes() == (d / "b.ckpt.history.csv").read_bytes()
    assert "config_digest" in (d / "a.ckpt").read_text()

    assert run(["eval", "--model", "branch", "--checkpoint", str(d / "a.ckpt"), "--dataset", str(d / "net.ds"),
                "--out", str(d / "m"), *TINY]) == 0
    rows = [r for r in (d / "m" / "branch_confusion.csv").read_text().splitlines() if not r.startswith("#")]
    assert len(rows) == 1 + 9
    assert rows[1].startswith("Normal,") and rows[9].startswith("Faulty branch 8,")
    metrics = (d / "m" / "branch_metrics.txt").read_text()
    assert "accuracy = " in metrics and "# config_digest" in metrics


def test_eval_rejects_wrong_model_kind(tiny_net):
    d = tiny_net
    ckpt = d / "a.ckpt"
    if not ckpt.exists():
        run(["train", "--model", "branch", "--dataset", str(d / "net.ds"), "--out", str(ckpt), *TINY])
    assert run(["eval", "--model", "generic_a", "--checkpoint", str(ckpt), "--dataset", str(d / "net.ds")]) == 2
    assert run(["monitor", "--checkpoint", str(ckpt)]) == 2


def test_train_rejects_wrong_dataset_kind(tiny_net, capsys):
    assert run(["train", "--model", "generic_a", "--dataset", str(tiny_net / "net.ds")]) == 2
    assert "window dataset" in capsys.readouterr().err


def test_generic_pipeline_and_monitor_exit_codes(tmp_path):
    ds = tmp_path / "w.ds"
    assert run(["gen-dataset", "--kind", "window", "--count", "70", "--out", str(ds)]) == 0
    ck = tmp_path / "a.ckpt"
    assert run(["train", "--model", "generic_a", "--dataset", str(ds), "--out", str(ck), *TINY]) == 0
    assert run(["eval", "--checkpoint", str(ck), "--dataset", str(ds), "--out", str(tmp_path / "m")]) == 0
    for f in ("generic_a_confusion.csv", "generic_a_metrics.txt", "generic_a_position_hist.csv",
              "generic_a_level_hist.csv"):
        assert (tmp_path / "m" / f).is_file()
    code = run(["monitor", "--checkpoint", str(ck), "--fault", "3:break", "--out", str(tmp_path / "r.csv")])
    assert code in (0, 1)
    assert (tmp_path / "r.csv").read_text().count("\n") >= 9


def test_report_empty_dir_lists_expected(tmp_path, capsys):
    assert run(["report", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    for name in ("branch_metrics.txt", "robustness_metrics.txt", "generic_a_metrics.txt", "generic_b_metrics.txt"):
        assert name in err


def test_report_perfect_fixture(tmp_path, capsys):
    (tmp_path / "branch_metrics.txt").write_text("# ponwatch 0.1.0\nrecords = 90.0\naccuracy = 1.0\n")
    assert run(["report", str(tmp_path)]) == 0
    summary = (tmp_path / "summary.txt").read_text()
    assert "branch.accuracy" in summary and " 1\n" in summary
    assert "missing: generic_a_metrics.txt" in summary


@pytest.mark.parametrize("argv", [
    ["train", "--model", "branch", "--dataset", "/nonexistent.ds"],
    ["gen-dataset", "--kind", "network", "--set", "sede=3"],
    ["gen-dataset", "--kind", "network", "--set", "seed"],
    ["gen-dataset", "--kind", "network", "--config", "/nonexistent.cfg"],
    ["simulate", "--fault", "3"],
    ["simulate", "--bogus-flag"],
    ["launch"],
])
def test_errors_exit_nonzero(argv, capsys):
    assert run(argv) == 2
    assert capsys.readouterr().err


def test_unknown_key_is_named(capsys):
    run(["gen-dataset", "--kind", "network", "--set", "sede=3"])
    assert "sede" in capsys.readouterr().err


def test_threads_env_respected(monkeypatch, tmp_path):
    monkeypatch.setenv("PONWATCH_THREADS", "1")
    assert run(["simulate", "--out", str(tmp_path / "t.csv")]) == 0
    assert np.isfinite(trace_from_csv(tmp_path / "t.csv").samples).all()
