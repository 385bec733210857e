"""Command-line entry point: simulate, backtest, sweeps, condition study, NVI export and reports."""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .backtest import (
    BacktestConfig,
    Scorer,
    condition_study,
    condition_table,
    extremeness_uplift_table,
    run_backtest,
    sweep_alpha,
    sweep_half_life,
    write_sweep_csv,
)
from .errors import CrShiftError, NumericError
from .events import EventLog, log_metadata, read_event_log, serialize_event_log, sidecar_path
from .models import PreparedLog, model_descriptor, save_model
from .synthgen import SimConfig, generate_log, shift_heavy_preset, table1_preset
from .variation import NviConfig, calibrate_boundaries, nvi_series, write_nvi_csv

logger = logging.getLogger("crshift")

PRESETS = {"table1": table1_preset, "shift-heavy": shift_heavy_preset}
DEFAULT_HALF_LIVES = (3.0, 5.0, 7.0, 10.0, 15.0, 30.0)
DEFAULT_ALPHAS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@contextlib.contextmanager
def atomic_output(path, mode: str = "w"):
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        kwargs = {"encoding": "utf-8", "newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_text(path, text: str) -> None:
    with atomic_output(path) as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def versions() -> dict:
    import matplotlib
    import numba
    import numpy
    import pandas
    import scipy

    return {
        "crshift": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
        "scipy": scipy.__version__, "pandas": pandas.__version__, "numba": numba.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_manifest(out, command: str, config: dict, seed, started: float, inputs=(), outputs=()) -> Path:
    """Sidecar ``<out>.manifest.json`` recording what produced ``out``."""
    out = Path(out)
    cfg_text = json.dumps(config, sort_keys=True)
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs] or [str(out)],
        "versions": versions(),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    path = out.with_name(out.name + ".manifest.json")
    write_text(path, _json(manifest))
    return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc


def _load_log(path) -> EventLog:
    if not Path(path).exists():
        raise ValueError(f"event log {path} does not exist")
    return read_event_log(path)


def load_backtest_config(path, log: EventLog, seed: int | None = None) -> BacktestConfig:
    """Backtest config from JSON; a missing ``test_days`` spans every day with enough history."""
    d = _read_json(path) if path else {}
    first, last = log.day_range
    if "test_days" not in d:
        probe = BacktestConfig.from_dict({**d, "test_days": [last, last]})
        d = {**d, "test_days": [first + probe.max_window, last]}
    cfg = BacktestConfig.from_dict(d)
    if seed is not None:
        specs = tuple((n, replace(s, optim=replace(s.optim, seed=seed))) for n, s in cfg.model_specs)
        cfg = replace(cfg, model_specs=specs)
    return cfg


def _report_csv(report, path) -> None:
    with atomic_output(path) as fh:
        report.write_csv(fh)


def _pivot_rows(report) -> list[list[str]]:
    table = condition_table(report)
    advs = sorted({a for lv in table.values() for m in lv.values() for a in m})
    rows = [["level", "model"] + advs]
    for level, models in table.items():
        for model, vals in models.items():
            rows.append([level, model] + ["" if vals.get(a) is None else f"{100 * vals[a]:.1f}" for a in advs])
    return rows


def _write_rows(path, rows) -> None:
    with atomic_output(path) as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _plot_data(report, path) -> None:
    models = list(dict.fromkeys(r.model for r in report.rows))
    rows = [["advertiser", "period_start", "extremeness", "model", "llhn_uplift"]]
    for e in extremeness_uplift_table(report):
        for m in models:
            if e.get(m) is not None:
                rows.append([e["advertiser"], e["period_start"], repr(e["extremeness"]), m, repr(e[m])])
    _write_rows(path, rows)


def cmd_simulate(args, started) -> list[Path]:
    if (args.config is None) == (args.preset is None):
        raise UsageError("simulate: give exactly one of --config or --preset")
    if args.config:
        cfg = SimConfig.from_dict(_read_json(args.config))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    else:
        kw = {} if args.seed is None else {"seed": args.seed}
        cfg = PRESETS[args.preset](**kw)
    log = generate_log(cfg)
    write_text(args.out, serialize_event_log(log))
    write_text(sidecar_path(args.out), _json(log_metadata(log)))
    write_manifest(args.out, "simulate", cfg.to_dict(), cfg.seed, started,
                   inputs=[args.config] if args.config else [])
    logger.info("wrote %d events to %s", len(log), args.out)
    return [Path(args.out)]


def _save_artifacts(scorer: Scorer, cfg: BacktestConfig, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    day = max(d for _, d in scorer.models)
    for name, spec in cfg.model_specs:
        model = scorer.models.get((spec.training_key, day))
        if model is None:
            continue
        model = replace(model, spec=spec)
        with tempfile.TemporaryDirectory(dir=directory) as tmp:
            bin_tmp, json_tmp = save_model(model, Path(tmp) / name)
            os.replace(bin_tmp, directory / f"{name}.bin")
            os.replace(json_tmp, directory / f"{name}.json")


def cmd_backtest(args, started) -> list[Path]:
    log = _load_log(args.log)
    cfg = load_backtest_config(args.config, log, args.seed)
    scorer = Scorer(PreparedLog(log), args.jobs, keep_models=bool(args.artifacts))
    report = run_backtest(log, cfg, scorer=scorer)
    _report_csv(report, args.out)
    outputs = [Path(args.out)]
    if args.artifacts:
        _save_artifacts(scorer, cfg, args.artifacts)
        outputs.append(Path(args.artifacts))
    if args.plot_data:
        _plot_data(report, args.plot_data)
        outputs.append(Path(args.plot_data))
    write_manifest(args.out, "backtest", cfg.to_dict(), args.seed, started, inputs=[args.log], outputs=outputs)
    return outputs


def _floats(text: str | None, default) -> tuple[float, ...]:
    if text is None:
        return default
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError as exc:
        raise UsageError(f"not a comma-separated list of numbers: {text!r}") from exc


def _sweep(args, started, which: str) -> list[Path]:
    from .plotting import plot_sweep

    values = _floats(args.values, DEFAULT_HALF_LIVES if which == "half_life" else DEFAULT_ALPHAS)
    log = _load_log(args.log)
    cfg = load_backtest_config(args.config, log, args.seed)
    scorer = Scorer(PreparedLog(log), args.jobs)
    sweep = sweep_half_life if which == "half_life" else sweep_alpha
    points = sweep(log, cfg, values, scorer=scorer)
    with atomic_output(args.out) as fh:
        write_sweep_csv(points, fh, which)
    outputs = [Path(args.out)]
    if args.plot_data:
        rows = [[which, "period", "llhn_uplift"]]
        rows += [[repr(p.param), i + 1, repr(u)] for p in points for i, u in enumerate(p.period_uplifts)]
        _write_rows(args.plot_data, rows)
        outputs.append(Path(args.plot_data))
    if args.figure:
        outputs.append(_atomic_figure(args.figure, lambda t: plot_sweep(points, t, which.replace("_", " "))))
    write_manifest(args.out, f"sweep-{which.replace('_', '-')}", {**cfg.to_dict(), "values": list(values)},
                   args.seed, started, inputs=[args.log], outputs=outputs)
    return outputs


def cmd_condition_study(args, started) -> list[Path]:
    log = _load_log(args.log)
    cfg = load_backtest_config(args.config, log, args.seed)
    report = condition_study(log, cfg, scorer=Scorer(PreparedLog(log), args.jobs))
    _report_csv(report, args.out)
    outputs = [Path(args.out)]
    if args.plot_data:
        _write_rows(args.plot_data, _pivot_rows(report))
        outputs.append(Path(args.plot_data))
    write_manifest(args.out, "condition-study", cfg.to_dict(), args.seed, started, inputs=[args.log], outputs=outputs)
    return outputs


def _nvi_config(path) -> NviConfig:
    return NviConfig.from_dict(_read_json(path)) if path else NviConfig()


def cmd_nvi(args, started) -> list[Path]:
    log = _load_log(args.log)
    prep = PreparedLog(log)
    cfg = _nvi_config(args.config)
    if args.calibrate:
        cfg = calibrate_boundaries(prep.stats, cfg)
    advertisers = [args.advertiser] if args.advertiser else list(prep.stats.advertisers)
    if args.advertiser and args.advertiser not in prep.stats.advertisers:
        raise ValueError(f"advertiser {args.advertiser!r} not in the log")
    points = [p for a in advertisers for p in nvi_series(prep.stats, a, cfg)]
    with atomic_output(args.out) as fh:
        write_nvi_csv(points, fh)
    write_manifest(args.out, "nvi", {**cfg.to_dict(), "advertiser": args.advertiser}, None, started,
                   inputs=[args.log])
    return [Path(args.out)]


def cmd_report(args, started) -> list[Path]:
    """Condition study, NVI series and (optionally) both sweeps, as CSVs plus PNG figures."""
    from .plotting import plot_condition_study, plot_nvi_series, plot_sweep, plot_uplift_vs_extremeness

    log = _load_log(args.log)
    cfg = load_backtest_config(args.config, log, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scorer = Scorer(PreparedLog(log), args.jobs)
    outputs = []

    report = condition_study(log, cfg, scorer=scorer)
    _report_csv(report, out / "condition_study.csv")
    _write_rows(out / "condition_table.csv", _pivot_rows(report))
    _plot_data(report, out / "uplift_vs_extremeness.csv")
    outputs += [out / "condition_study.csv", out / "condition_table.csv", out / "uplift_vs_extremeness.csv"]
    outputs.append(_atomic_figure(out / "condition_study.png", lambda t: plot_condition_study(report, t)))
    models = [n for n, _ in cfg.model_specs if n != cfg.baseline_name]
    table = extremeness_uplift_table(report)
    outputs.append(_atomic_figure(out / "uplift_vs_extremeness.png",
                                  lambda t: plot_uplift_vs_extremeness(table, models, t)))

    stats = scorer.prep.stats
    points = [p for a in stats.advertisers for p in nvi_series(stats, a, cfg.nvi)]
    with atomic_output(out / "nvi.csv") as fh:
        write_nvi_csv(points, fh)
    outputs.append(out / "nvi.csv")
    outputs.append(_atomic_figure(out / "nvi.png", lambda t: plot_nvi_series(points, t, cfg.nvi)))

    if args.sweeps:
        for which, fn, values in (("half_life", sweep_half_life, DEFAULT_HALF_LIVES),
                                  ("alpha", sweep_alpha, DEFAULT_ALPHAS)):
            pts = fn(log, cfg, values, scorer=scorer)
            with atomic_output(out / f"sweep_{which}.csv") as fh:
                write_sweep_csv(pts, fh, which)
            outputs.append(out / f"sweep_{which}.csv")
            label = which.replace("_", " ")
            outputs.append(_atomic_figure(out / f"sweep_{which}.png", lambda t: plot_sweep(pts, t, label)))
    write_manifest(out / "report", "report", cfg.to_dict(), args.seed, started, inputs=[args.log], outputs=outputs)
    return outputs


def _atomic_figure(path, render) -> Path:
    """``render(tmp_path)`` draws the figure; it is renamed into place afterwards."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.stem}.tmp{path.suffix}")
    render(tmp)
    os.replace(tmp, path)
    return path


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="override the seed in the config")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads for training")
    common.add_argument("--verbose", "-v", action="count", default=0)

    p = _Parser(prog="crshift", description=__doc__)
    p.add_argument("--version", action="version", version=f"crshift {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic event log")
    s.add_argument("--config", help="SimConfig JSON")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--out", required=True, help="output TSV")

    def log_cmd(name, help_text, out_help):
        c = sub.add_parser(name, parents=[common], help=help_text)
        c.add_argument("--log", required=True, help="event log TSV")
        c.add_argument("--config", help="JSON config")
        c.add_argument("--out", required=True, help=out_help)
        return c

    b = log_cmd("backtest", "longitudinal train-daily/score-daily evaluation", "report CSV")
    b.add_argument("--artifacts", help="directory for the final day's model artifacts")
    b.add_argument("--plot-data", help="long-format CSV of extremeness vs uplift")
    for name, what in (("sweep-half-life", "TDWM half-life"), ("sweep-alpha", "MLTSTM mixing weight")):
        c = log_cmd(name, f"mean uplift across a grid of {what} values", "sweep CSV")
        c.add_argument("--values", help="comma-separated grid")
        c.add_argument("--plot-data", help="long-format CSV of per-period uplifts")
        c.add_argument("--figure", help="PNG plot of the curve")
    c = log_cmd("condition-study", "uplift on extreme/average/moderate periods per advertiser", "report CSV")
    c.add_argument("--plot-data", help="level x model x advertiser pivot CSV")
    n = log_cmd("nvi", "export the NVI series", "NVI CSV")
    n.add_argument("--advertiser")
    n.add_argument("--calibrate", action="store_true", help="calibrate boundaries from the log first")
    r = log_cmd("report", "condition study, NVI series and figures", "output directory")
    r.add_argument("--sweeps", action="store_true", help="also run and plot both sweeps")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "backtest": cmd_backtest,
    "sweep-half-life": lambda a, t: _sweep(a, t, "half_life"),
    "sweep-alpha": lambda a, t: _sweep(a, t, "alpha"),
    "condition-study": cmd_condition_study,
    "nvi": cmd_nvi,
    "report": cmd_report,
}


def main(argv=None) -> int:
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.jobs < 1:
            raise UsageError("--jobs must be positive")
        COMMANDS[args.command](args, started)
        return 0
    except SystemExit as exc:  # --help and --version
        return exc.code if isinstance(exc.code, int) else 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (CrShiftError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
