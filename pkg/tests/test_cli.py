import csv
import json

import pytest

from crshift.cli import atomic_output, main
from crshift.events import serialize_event_log
from crshift.variation import NVI_COLUMNS
from tests.conftest import small_sim


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    small_sim().save(d / "sim.json")
    enc = {"dimension_bits": 16}
    models = [{"name": k, "spec": {"kind": k, "encoder": enc, "long_window_days": 10, "short_window_days": 4}}
              for k in ("baseline", "hcrfm", "tdwm", "mltstm")]
    (d / "bt.json").write_text(json.dumps({"test_days": [30, 39], "models": models,
                                           "nvi": {"long_days": 10}, "min_test_events_per_cell": 20}))
    assert main(["simulate", "--config", str(d / "sim.json"), "--out", str(d / "log.tsv")]) == 0
    return d


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_outputs(workdir, small_log):
    assert (workdir / "log.tsv").read_text() == serialize_event_log(small_log)
    man = json.loads((workdir / "log.tsv.manifest.json").read_text())
    assert man["seed"] == 5 and len(man["config_sha256"]) == 64 and "numpy" in man["versions"]
    assert (workdir / "log.tsv.meta.json").exists()


def test_preset_and_seed_override(tmp_path):
    assert main(["simulate", "--preset", "table1", "--config", "x.json", "--out", str(tmp_path / "a.tsv")]) == 1


def test_backtest_and_plot_data(workdir):
    before = (workdir / "log.tsv").read_bytes()
    rc = main(["backtest", "--log", str(workdir / "log.tsv"), "--config", str(workdir / "bt.json"),
               "--out", str(workdir / "report.csv"), "--plot-data", str(workdir / "pd.csv"), "--jobs", "1"])
    assert rc == 0
    assert (workdir / "log.tsv").read_bytes() == before
    r = rows(workdir / "report.csv")
    assert r[0][:4] == ["advertiser", "period_start", "period_days", "model"]
    assert {x[0] for x in r[1:]} == {"global", "a", "b"}
    assert rows(workdir / "pd.csv")[0] == ["advertiser", "period_start", "extremeness", "model", "llhn_uplift"]
    assert not list(workdir.glob(".*.tmp"))


def test_nvi_export(workdir):
    assert main(["nvi", "--log", str(workdir / "log.tsv"), "--advertiser", "a", "--out", str(workdir / "n.csv")]) == 0
    r = rows(workdir / "n.csv")
    assert tuple(r[0]) == NVI_COLUMNS and {x[0] for x in r[1:]} == {"a"}
    assert main(["nvi", "--log", str(workdir / "log.tsv"), "--advertiser", "zz", "--out", str(workdir / "z.csv")]) == 2


def test_condition_study_and_report(workdir):
    out = workdir / "rep"
    assert main(["report", "--log", str(workdir / "log.tsv"), "--config", str(workdir / "bt.json"),
                 "--out", str(out), "--jobs", "1"]) == 0
    for name in ("condition_study.csv", "condition_table.csv", "nvi.csv", "condition_study.png", "nvi.png",
                 "uplift_vs_extremeness.png", "report.manifest.json"):
        assert (out / name).stat().st_size > 0
    assert rows(out / "condition_table.csv")[0][:2] == ["level", "model"]


def test_sweep_cli(workdir):
    spec = {"encoder": {"dimension_bits": 16}, "long_window_days": 4, "short_window_days": 2}
    models = [{"name": k, "spec": {"kind": k, **spec}} for k in ("baseline", "mltstm")]
    (workdir / "sw.json").write_text(json.dumps({"models": models, "min_test_events_per_cell": 20}))
    rc = main(["sweep-alpha", "--log", str(workdir / "log.tsv"), "--config", str(workdir / "sw.json"),
               "--values", "0,0.5,1", "--out", str(workdir / "sa.csv"), "--plot-data", str(workdir / "sa_long.csv"),
               "--figure", str(workdir / "sa.png"), "--jobs", "1"])
    assert rc == 0
    r = rows(workdir / "sa.csv")
    assert r[0][:2] == ["alpha", "mean_uplift"] and len(r) == 4
    assert len(rows(workdir / "sa_long.csv")) == 1 + 3 * 5
    assert (workdir / "sa.png").stat().st_size > 0
    assert main(["sweep-alpha", "--log", str(workdir / "log.tsv"), "--values", "0,0.5",
                 "--out", str(workdir / "bad.csv")]) == 2


@pytest.mark.parametrize("argv,code", [
    ([], 1),
    (["frobnicate"], 1),
    (["backtest", "--log", "x.tsv"], 1),
    (["backtest", "--log", "/nonexistent.tsv", "--out", "r.csv"], 2),
    (["sweep-alpha", "--log", "x", "--out", "y", "--values", "a,b"], 1),
    (["--help"], 0),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code


def test_bad_config_is_data_error(workdir, tmp_path):
    (tmp_path / "bad.json").write_text('{"test_days": [30, 39], "baseline": "nope"}')
    assert main(["backtest", "--log", str(workdir / "log.tsv"), "--config", str(tmp_path / "bad.json"),
                 "--out", str(tmp_path / "r.csv")]) == 2
    assert not (tmp_path / "r.csv").exists()


def test_atomic_output_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "x.csv"
    with pytest.raises(RuntimeError):
        with atomic_output(target) as fh:
            fh.write("partial")
            raise RuntimeError
    assert list(tmp_path.iterdir()) == []
