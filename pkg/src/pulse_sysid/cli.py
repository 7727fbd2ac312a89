"""Command-line pipeline: synth, fit-ocv, fit-dmdc, sweep, modes, train-tst, rollout, eval, report.

Every option can also come from ``--config <json>``; explicit flags win.
Each run writes the resolved options to ``<out>/<command>_config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataio, dmdc, ecmsim, forecast, physics
from .tst import OptimConfig, TstConfig, TstModel, WindowSet, train

log = logging.getLogger("pulse_sysid")


class CliError(RuntimeError):
    pass


def _int_list(text: str) -> list:
    """``0,20,40`` or ``1..12`` (inclusive)."""
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",") if x.strip()]


# option name -> (type, default, help); grouped per command
_COMMON = {"seed": (int, 0, "random seed")}
_PROTOCOL = {f.name: (type(f.default), f.default, "protocol field") for f in fields(ecmsim.ProtocolSpec)}
_PARAMS = {f.name: (float, f.default, "cell parameter") for f in fields(ecmsim.EcmParams) if f.name != "ocv_coeffs"}
_DEGRADE = {f.name: (float, getattr(ecmsim.AGING_SCHEDULE, f.name), "degradation rate")
            for f in fields(ecmsim.DegradationSchedule)}
_TST = {f.name: (type(f.default), f.default, "transformer hyperparameter")
        for f in fields(TstConfig) if f.name != "in_channels"}
_OPT = {f.name: (type(f.default), f.default, "optimizer setting") for f in fields(OptimConfig) if f.name != "seed"}
_DMDC = {
    "m": (int, 64, "output embedding dimension"),
    "d_u": (int, 6, "input delay count"),
    "rank": (str, "relative:1e-10", "rank policy: relative:<tol>, fixed:<r> or energy:<frac>"),
}

COMMANDS = {
    "synth": ("write synthetic HPPC files", {
        **_COMMON, **_PROTOCOL, **_PARAMS, **_DEGRADE,
        "cycles": (_int_list, [0, 20, 40, 60, 80, 100, 120, 140, 160], "cycle indices"),
    }),
    "fit-ocv": ("partition files, fit the OCV table and normalization", {
        **_COMMON, "data": (str, None, "dataset directory"),
        "threshold": (int, 100, "cycles above this are test files"),
    }),
    "fit-dmdc": ("identify a DMDc model on one file", {
        **_DMDC, "data": (str, None, "dataset directory"),
        "file": (str, "", "file id to fit (default: lowest cycle)"),
        "train_fraction": (float, 1.0, "leading fraction of the file used for fitting"),
    }),
    "sweep": ("RSS versus d_u or m", {
        **_DMDC, "data": (str, None, "dataset directory"),
        "file": (str, "", "file id (default: lowest cycle)"),
        "param": (str, "d_u", "swept parameter: d_u or m"),
        "values": (_int_list, list(range(1, 13)), "values to sweep"),
        "horizon": (str, "rollout", "rollout or one_step"),
        "region": (str, "holdout", "holdout or full"),
        "train_fraction": (float, 0.6, "fit fraction"),
    }),
    "modes": ("modal magnitudes of per-cycle DMDc fits", {
        **_DMDC, "data": (str, None, "dataset directory"),
    }),
    "train-tst": ("train the transformer", {
        **_COMMON, **_TST, **_OPT, "data": (str, None, "dataset directory"),
        "split": (str, None, "directory written by fit-ocv"),
    }),
    "rollout": ("run a fitted model over files", {
        "data": (str, None, "dataset directory"),
        "model": (str, None, "dmdc or transformer checkpoint"),
        "files": (str, "test", "'test' (needs --split), 'all' or comma-separated ids"),
        "split": (str, "", "directory written by fit-ocv"),
        "context_fraction": (float, forecast.CONTEXT_FRACTION, "observed leading fraction"),
    }),
    "eval": ("score rollouts", {"rollouts": (str, None, "directory written by rollout")}),
    "report": ("comparison table across models", {
        "rollouts": (lambda s: s.split(","), None, "comma-separated rollout directories"),
    }),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pulse-sysid", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (helptext, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--out", required=True, help="output directory")
        for key, (typ, default, h) in opts.items():
            kw = {"type": typ if typ is not bool else _bool, "default": None, "help": f"{h} (default {default})"}
            p.add_argument("--" + key.replace("_", "-"), dest=key, **kw)
    return ap


def _bool(text: str) -> bool:
    return text.lower() in ("1", "true", "yes")


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config, then explicit flags."""
    opts = COMMANDS[args.command][1]
    cfg = {k: v[1] for k, v in opts.items()}
    if args.config:
        extra = json.loads(Path(args.config).read_text())
        unknown = set(extra) - set(opts)
        if unknown:
            raise CliError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        cfg.update(extra)
    for k in opts:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    missing = [k for k, v in cfg.items() if v is None]
    if missing:
        raise CliError(f"missing required options: {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def _subset(cfg: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(cfg) -> list:
    data = Path(cfg["data"])
    if not data.is_dir():
        raise CliError(f"dataset directory {data} not found")
    series = dataio.load_dir(data)
    if not series:
        raise CliError(f"no CSV files in {data}")
    return series


def _pick(series: list, file_id: str):
    if not file_id:
        return series[0]
    for s in series:
        if s.file_id == file_id:
            return s
    raise CliError(f"file {file_id!r} not in dataset")


# -- commands --------------------------------------------------------------------


def cmd_synth(cfg, out: Path) -> None:
    params = ecmsim.EcmParams(**_subset(cfg, ecmsim.EcmParams))
    proto = ecmsim.ProtocolSpec(**_subset(cfg, ecmsim.ProtocolSpec))
    sched = ecmsim.DegradationSchedule(**_subset(cfg, ecmsim.DegradationSchedule))
    for s in ecmsim.make_cycles(cfg["cycles"], params, sched, proto, cfg["seed"]):
        dataio.save_series(s, out / f"{s.file_id}.csv")
    (out / "ecm_config.json").write_text(ecmsim.config_to_json(params, proto, sched) + "\n")


def cmd_fit_ocv(cfg, out: Path) -> None:
    series = _load_data(cfg)
    split = dataio.partition(series, cfg["seed"], cfg["threshold"])
    by_id = {s.file_id: s for s in series}
    train_files = [by_id[f] for f in split.train_files]
    table = physics.fit_ocv_table(train_files)
    stats = dataio.fit_norm_stats(train_files, table)
    (out / "split.json").write_text(split.to_json() + "\n")
    table.save(out / "ocv_table.csv")
    _write_json(out / "norm_stats.json", stats.to_dict())


def cmd_fit_dmdc(cfg, out: Path) -> None:
    s = _pick(_load_data(cfg), cfg["file"])
    n = int(round(cfg["train_fraction"] * len(s)))
    model = dmdc.fit_series(s, cfg["m"], cfg["d_u"], dmdc.RankPolicy.parse(cfg["rank"]), n)
    dmdc.save_model(model, out / "dmdc.npz")
    _write_json(out / "dmdc_fit.json", {"file_id": s.file_id, "n_train": n, "rank_r": model.rank_r,
                                        "fit_residual_rss": model.fit_residual_rss})


def cmd_sweep(cfg, out: Path) -> None:
    s = _pick(_load_data(cfg), cfg["file"])
    pol = dmdc.RankPolicy.parse(cfg["rank"])
    common = dict(horizon=cfg["horizon"], region=cfg["region"], train_fraction=cfg["train_fraction"],
                  rank_policy=pol)
    if cfg["param"] == "d_u":
        res = dmdc.sweep_input_delay(s, cfg["m"], cfg["values"], **common)
    elif cfg["param"] == "m":
        res = dmdc.sweep_output_embedding(s, cfg["values"], cfg["d_u"], **common)
    else:
        raise CliError("--param must be d_u or m")
    (out / f"sweep_{cfg['param']}.csv").write_text(res.to_csv())
    print(f"best {cfg['param']} = {res.best}")


def cmd_modes(cfg, out: Path) -> None:
    pol = dmdc.RankPolicy.parse(cfg["rank"])
    lines = ["cycle_index,file_id,mode,real,imag,magnitude"]
    dom = ["cycle_index,file_id,dominant_subunit"]
    for s in _load_data(cfg):
        spec = dmdc.modes(dmdc.fit_series(s, cfg["m"], cfg["d_u"], pol))
        for k, lam in enumerate(spec.eigenvalues):
            lines.append(f"{s.cycle_index},{s.file_id},{k},{float(lam.real)!r},{float(lam.imag)!r},{float(abs(lam))!r}")
        try:
            dom.append(f"{s.cycle_index},{s.file_id},{spec.dominant_subunit()!r}")
        except dmdc.DmdcError:
            dom.append(f"{s.cycle_index},{s.file_id},nan")
    (out / "modes.csv").write_text("\n".join(lines) + "\n")
    (out / "modes_dominant.csv").write_text("\n".join(dom) + "\n")


def _load_split(split_dir: Path):
    try:
        split = dataio.SplitSpec.from_json((split_dir / "split.json").read_text())
        table = physics.OcvTable.load(split_dir / "ocv_table.csv")
        stats = dataio.NormStats(**json.loads((split_dir / "norm_stats.json").read_text()))
    except FileNotFoundError as exc:
        raise CliError(f"missing fit-ocv artifact: {exc.filename}") from exc
    return split, table, stats


def cmd_train_tst(cfg, out: Path) -> None:
    series = {s.file_id: s for s in _load_data(cfg)}
    split, table, stats = _load_split(Path(cfg["split"]))
    tcfg = TstConfig(**_subset(cfg, TstConfig))
    opt = OptimConfig(**{**_subset(cfg, OptimConfig), "seed": cfg["seed"]})

    def windows(ids):
        return WindowSet([(physics.dynamic_voltage(series[f], table), series[f].i) for f in ids], stats, tcfg)

    res = train(TstModel.init(tcfg, cfg["seed"]), windows(split.train_files), windows(split.val_files), opt)
    res.save_history(out / "history.csv")
    res.model.save(out / "tst.npz", {
        "norm_stats": stats.to_dict(),
        "ocv_table": {"grid": table.grid.tolist(), "ocv_v": table.ocv_v.tolist(),
                      "sample_count": table.sample_count.tolist()},
        "best_epoch": res.best_epoch, "stopped_reason": res.stopped_reason,
    })


def cmd_rollout(cfg, out: Path) -> None:
    from .checkpoint import load_arrays

    series = _load_data(cfg)
    if cfg["files"] == "all":
        chosen = series
    elif cfg["files"] == "test":
        if not cfg["split"]:
            raise CliError("--files test needs --split")
        split = dataio.SplitSpec.from_json((Path(cfg["split"]) / "split.json").read_text())
        chosen = [s for s in series if s.file_id in split.test_files]
    else:
        chosen = [_pick(series, f) for f in cfg["files"].split(",")]
    path = Path(cfg["model"])
    if not path.is_file():
        raise CliError(f"model checkpoint {path} not found")
    kind = load_arrays(path)[0].get("kind")
    results = []
    if kind == "dmdc":
        model = dmdc.load_model(path)
        results = [forecast.dmdc_rollout_eval(s, model) for s in chosen]
    elif kind == "tst":
        model, header = TstModel.load(path)
        stats = dataio.NormStats(**header["norm_stats"])
        t = header["ocv_table"]
        table = physics.OcvTable(np.array(t["grid"]), np.array(t["ocv_v"]), np.array(t["sample_count"]))
        results = [forecast.tst_rollout(s, table, model, stats, cfg["context_fraction"]) for s in chosen]
    else:
        raise CliError(f"unknown checkpoint kind {kind!r}")
    index = []
    for r in results:
        name = f"{r.file_id}.{r.model_tag}.csv"
        r.save(out / name)
        index.append({"file_id": r.file_id, "cycle_index": r.cycle_index, "model_tag": r.model_tag,
                      "eval_start_idx": r.eval_start_idx, "chunk_lengths": list(r.chunk_lengths), "csv": name})
    _write_json(out / "rollouts.json", index)


def load_rollouts(directory) -> list:
    directory = Path(directory)
    try:
        index = json.loads((directory / "rollouts.json").read_text())
    except FileNotFoundError as exc:
        raise CliError(f"{directory} has no rollouts.json") from exc
    out = []
    for e in index:
        r = forecast.RolloutResult.load(directory / e["csv"], e["model_tag"], e["eval_start_idx"],
                                        e["file_id"], e["cycle_index"])
        out.append(forecast.RolloutResult(r.file_id, r.cycle_index, r.time_s, r.measured_v, r.reconstructed_v,
                                          r.eval_start_idx, r.model_tag, tuple(e["chunk_lengths"]),
                                          r.v_ocv, r.v_dyn_pred))
    return out


def cmd_eval(cfg, out: Path) -> None:
    rep = forecast.evaluate(load_rollouts(cfg["rollouts"]))
    (out / f"eval_{rep.model_tag}.csv").write_text(rep.to_csv())
    print(forecast.format_table([rep]), end="")


def cmd_report(cfg, out: Path) -> None:
    groups = [load_rollouts(d) for d in cfg["rollouts"]]
    reports = [forecast.evaluate(g) for g in groups]
    if len(groups) == 2:
        reports += list(forecast.common_region_reports(groups[0], groups[1]))
    (out / "report.csv").write_text("".join(
        r.to_csv() if k == 0 else r.to_csv().split("\n", 1)[1] for k, r in enumerate(reports)))
    table = forecast.format_table(reports)
    (out / "report.txt").write_text(table)
    print(table, end="")


HANDLERS = {
    "synth": cmd_synth, "fit-ocv": cmd_fit_ocv, "fit-dmdc": cmd_fit_dmdc, "sweep": cmd_sweep,
    "modes": cmd_modes, "train-tst": cmd_train_tst, "rollout": cmd_rollout, "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"{args.command}_config.json", cfg)
        HANDLERS[args.command](cfg, out)
    except (CliError, dataio.DataError, dmdc.DmdcError, forecast.ForecastError, ValueError, OSError) as exc:
        print(f"pulse-sysid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
