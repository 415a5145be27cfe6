"""Command-line front end.

    fudos <simulate|segment|select|stability|model|predict|evaluate>
          --config CONFIG.json [--seed N] [--threads N] [--out DIR]

The config is one JSON document with a section per subcommand plus a
``data`` section naming input files. Flags override file values. Every run
writes ``manifest.json`` next to its artifacts; artifacts themselves embed
the config hash and seed but no timestamps, so reruns are byte-identical.

Exit codes: 0 success, 2 malformed config, 3 I/O failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .core import Dataset1D, Dataset3D, DegenerateDataError, ValidationError, abs_correlation, marginal_covariances
from .pipeline import (
    PI_LADDER,
    PredictiveModel,
    build_model,
    kfold_predict,
    point_coords,
    run_protocol,
)
from .segmentation import SegmentationResult, segment_1d, segment_3d
from .selection import SelectionConfig, select_subset
from .simulate import SimSpec, simulate
from .stability import StabilityConfig, default_pairs_1d, default_pairs_3d, run_stability

log = logging.getLogger("fudos")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("simulate", "segment", "select", "stability", "model", "predict", "evaluate")
# keys that never influence artifact contents
_UNHASHED = ("threads", "out")


class ConfigError(ValidationError):
    pass


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    return hashlib.sha256(fio.dumps(body).encode()).hexdigest()[:16]


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config field '{name}' must be an object")
    return sec


def _get(sec: dict, key: str, default, kind, where: str):
    v = sec.get(key, default)
    if v is None:
        return None
    try:
        return kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"config field '{where}.{key}' has invalid value {v!r}") from None


def _check_pi(pi, where):
    if pi is None or not 0 <= pi < 1:
        raise ConfigError(f"config field '{where}' must lie in [0, 1), got {pi}")
    return pi


def _path(cfg: dict, section: str, key: str, required=True):
    sec = _section(cfg, section)
    p = sec.get(key)
    if p is None:
        if required:
            raise ConfigError(f"config field '{section}.{key}' is required")
        return None
    path = Path(p)
    if not path.exists():
        raise fio.ArtifactIOError(f"config field '{section}.{key}': {path} does not exist")
    return path


def _load_data(cfg: dict, need_y=True):
    X = _path(cfg, "data", "X")
    Y = _path(cfg, "data", "Y", required=False)
    data = fio.read_dataset(X, Y)
    if need_y and data.Y is None:
        raise ConfigError("config field 'data.Y' is required (no response column found)")
    return data


def _stamp(obj: dict, ctx) -> dict:
    obj = dict(obj)
    obj["config_hash"] = ctx["hash"]
    obj["seed"] = ctx["seed"]
    return obj


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg, ctx):
    sec = dict(_section(cfg, "simulate"))
    known = {f.name for f in fields(SimSpec)}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"config field 'simulate.{sorted(unknown)[0]}' is not recognised")
    sec["seed"] = ctx["seed"]
    spec = SimSpec(**sec)
    sim = simulate(spec)
    out = ctx["out"]
    written = []
    for name, ds in (("train", sim.train), ("test", sim.test)):
        if ds is None:
            continue
        if spec.is_3d:
            written.append(fio.write_volumes(out / f"{name}_X", ds))
        else:
            fio.write_curves_csv(out / f"{name}_X.csv", ds)
            written.append(out / f"{name}_X.csv")
        fio.write_response_csv(out / f"{name}_Y.csv", ds.Y)
    truth = {"beta": sim.beta.tolist(), "support": sim.truth.tolist(), "spec": spec.to_dict()}
    if sim.test_signal is not None:
        truth["test_signal"] = sim.test_signal.tolist()
    fio.write_json(out / "truth.json", _stamp(truth, ctx))
    return {"artifacts": [str(p) for p in written] + [str(out / "truth.json")]}


def _segment_data(data, sec, where):
    if isinstance(data, Dataset3D):
        rho = sec.get("rho", 0.01)
        rho = tuple(float(r) for r in rho) if isinstance(rho, list) else float(rho)
        segs = segment_3d(
            marginal_covariances(data),
            rho,
            data.mask,
            data.dims,
            min_seg=sec.get("min_seg", 3),
            max_seg=sec.get("max_seg", 7),
        )
        return segs
    return segment_1d(
        abs_correlation(data),
        _get(sec, "rho", 0.02, float, where),
        min_seg=_get(sec, "min_seg", 5, int, where),
        max_seg=_get(sec, "max_seg", 20, int, where),
    )


def cmd_segment(cfg, ctx):
    data = _load_data(cfg, need_y=False)
    sec = _section(cfg, "segment")
    segs = _segment_data(data, sec, "segment")
    out = ctx["out"]
    d = segs.to_dict()
    if isinstance(segs, SegmentationResult):
        d["kind"] = "1d"
    else:
        d["kind"] = "3d"
        fio.write_labels(out / "segmentation.labels.bin", segs.labels)
        d["labels_path"] = "segmentation.labels.bin"
    fio.write_json(out / "segmentation.json", _stamp(d, ctx))
    return {"L": segs.L, "artifacts": [str(out / "segmentation.json")]}


def _load_labels(path: Path) -> np.ndarray:
    d = fio.read_json(path)
    if d.get("kind") == "3d":
        return fio.read_labels(path.parent / d["labels_path"])
    return SegmentationResult.from_dict(d).labels()


def cmd_select(cfg, ctx):
    data = _load_data(cfg)
    sec = _section(cfg, "select")
    seg_path = _path(cfg, "select", "segmentation")
    labels = _load_labels(seg_path)
    scfg = SelectionConfig(
        c=_get(sec, "c", 0.01, float, "select"),
        q=_get(sec, "q", None, float, "select"),
        folds=_get(sec, "folds", 5, int, "select"),
        fitter=sec.get("fitter", "pwc"),
        seed=ctx["seed"],
    )
    trace = select_subset(data, labels, scfg)
    fio.write_json(ctx["out"] / "selection.json", _stamp(trace.to_dict(), ctx))
    return {"selected": list(trace.selected), "artifacts": [str(ctx["out"] / "selection.json")]}


def _stability_config(cfg, ctx, is_3d) -> StabilityConfig:
    sec = _section(cfg, "stability")
    pairs = sec.get("pairs")
    if pairs is None:
        pairs = default_pairs_3d() if is_3d else default_pairs_1d(_get(sec, "case", 1, int, "stability"))
    return StabilityConfig(
        pairs=pairs,
        reps=_get(sec, "reps", 100, int, "stability"),
        master_seed=ctx["seed"],
        fitter=sec.get("fitter", "pwc"),
        folds=_get(sec, "folds", 5, int, "stability"),
        q=_get(sec, "q", None, float, "stability"),
        min_seg=_get(sec, "min_seg", None, int, "stability"),
        max_seg=_get(sec, "max_seg", None, int, "stability"),
        threads=ctx["threads"],
    )


def cmd_stability(cfg, ctx):
    data = _load_data(cfg)
    scfg = _stability_config(cfg, ctx, isinstance(data, Dataset3D))
    fmap = run_stability(data, scfg)
    side = fio.write_frequency_map(ctx["out"] / "frequency", fmap, {"config_hash": ctx["hash"], "seed": ctx["seed"]})
    return {"artifacts": [str(side)]}


def cmd_model(cfg, ctx):
    sec = _section(cfg, "model")
    pi = _check_pi(_get(sec, "pi", 0.5, float, "model"), "model.pi")
    data = _load_data(cfg)
    fmap = fio.read_frequency_map(_path(cfg, "model", "frequency_map"))
    model = build_model(
        data,
        fmap,
        pi,
        eps=_get(sec, "eps", None, float, "model"),
        min_pts=_get(sec, "min_pts", None, int, "model"),
        fitter=sec.get("fitter", "pwc"),
    )
    out = ctx["out"]
    d = model.to_dict()
    d["grid"] = data.grid.points.tolist() if isinstance(data, Dataset1D) else None
    fio.write_json(out / "model.json", _stamp(d, ctx))
    fio.write_clusters_csv(out / "clusters.csv", model.points, point_coords(data, model.points), model.clusters)
    return {"stable_points": int(model.points.size), "clusters": model.clusters.k, "artifacts": [str(out / "model.json")]}


def cmd_predict(cfg, ctx):
    data = _load_data(cfg, need_y=False)
    d = fio.read_json(_path(cfg, "predict", "model"))
    t = np.asarray(d["grid"]) if d.get("grid") else None
    model = PredictiveModel.from_dict(d, t)
    pred = model.predict(data.X)
    fio.write_predictions_csv(ctx["out"] / "predictions.csv", pred)
    return {"artifacts": [str(ctx["out"] / "predictions.csv")]}


def cmd_evaluate(cfg, ctx):
    sec = _section(cfg, "evaluate")
    pis = sec.get("pis", list(PI_LADDER))
    for k, pi in enumerate(pis):
        _check_pi(pi, f"evaluate.pis[{k}]")
    out = ctx["out"]
    mode = sec.get("mode", "simulation")
    if mode == "kfold":
        data = _load_data(cfg)
        scfg = _stability_config(cfg, ctx, isinstance(data, Dataset3D))
        rows = []
        for pi in pis:
            res = kfold_predict(
                data,
                folds=_get(sec, "folds", 10, int, "evaluate"),
                stability=scfg,
                pi=pi,
                fitter=sec.get("fitter", "pwc"),
                seed=ctx["seed"],
            )
            rows.append({"pi": pi, "R2": res.r2, "RMSE": res.rmse, "n_stable": res.n_stable})
        fio.write_json(out / "kfold.json", _stamp({"rows": rows}, ctx))
        lines = ["metric," + ",".join(f"pi={p:.2f}" for p in pis)]
        for m in ("R2", "RMSE"):
            lines.append(f"{m}," + ",".join(repr(float(r[m])) for r in rows))
        fio._write_text(out / "kfold.csv", "\n".join(lines) + "\n")
        return {"artifacts": [str(out / "kfold.json")]}
    if mode != "simulation":
        raise ConfigError(f"config field 'evaluate.mode' must be simulation or kfold, got {mode!r}")
    spec_d = dict(_section(cfg, "simulate"))
    spec_d["seed"] = ctx["seed"]
    spec = SimSpec(**spec_d)
    scfg = _stability_config(cfg, ctx, spec.is_3d)
    report = run_protocol(
        spec,
        scfg,
        replicates=_get(sec, "replicates", 20, int, "evaluate"),
        pis=pis,
        fitter=sec.get("fitter", "pwc"),
        eps=_get(sec, "eps", None, float, "evaluate"),
        min_pts=_get(sec, "min_pts", None, int, "evaluate"),
    )
    fio._write_text(out / "report.csv", report.to_csv())
    fio.write_json(out / "report.json", _stamp(report.to_dict(), ctx))
    return {"artifacts": [str(out / "report.csv"), str(out / "report.json")]}


HANDLERS = {
    "simulate": cmd_simulate,
    "segment": cmd_segment,
    "select": cmd_select,
    "stability": cmd_stability,
    "model": cmd_model,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fudos", description="Functional domain selection.")
    ap.add_argument("--version", action="version", version=f"fudos {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        sp.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
        sp.add_argument("--out", default=None, help="output directory (default: config 'out' or '.')")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "segment":
            sp.add_argument("--rho", type=float)
        if name == "select":
            sp.add_argument("--c", type=float)
            sp.add_argument("--q", type=float)
            sp.add_argument("--folds", type=int)
            sp.add_argument("--fitter", choices=("pwc", "pspline"))
        if name == "stability":
            sp.add_argument("--reps", type=int)
            sp.add_argument("--fitter", choices=("pwc", "pspline"))
        if name == "model":
            sp.add_argument("--pi", type=float)
            sp.add_argument("--eps", type=float)
            sp.add_argument("--min-pts", dest="min_pts", type=int)
            sp.add_argument("--fitter", choices=("pwc", "pspline"))
    return ap


_FLAG_SECTIONS = {
    "segment": ("rho",),
    "select": ("c", "q", "folds", "fitter"),
    "stability": ("reps", "fitter"),
    "model": ("pi", "eps", "min_pts", "fitter"),
}


def effective_config(args) -> dict:
    try:
        cfg = json.loads(Path(args.config).read_text())
    except OSError as e:
        raise fio.ArtifactIOError(f"cannot read config {args.config}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    # relative data paths are resolved against the config file
    base = Path(args.config).resolve().parent
    for sec in cfg.values():
        if isinstance(sec, dict):
            for k, v in sec.items():
                if isinstance(v, str) and k in ("X", "Y", "segmentation", "frequency_map", "model"):
                    sec[k] = str((base / v)) if not os.path.isabs(v) else v
    for key in _FLAG_SECTIONS.get(args.command, ()):
        v = getattr(args, key, None)
        if v is not None:
            cfg.setdefault(args.command, {})[key] = v
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"config field 'seed' must be a non-negative integer, got {cfg['seed']!r}")
    if args.threads is not None:
        cfg["threads"] = args.threads
    cfg.setdefault("threads", os.cpu_count() or 1)
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError(f"config field 'threads' must be a positive integer, got {cfg['threads']!r}")
    if args.out is not None:
        cfg["out"] = args.out
    cfg.setdefault("out", ".")
    return cfg


def _versions() -> dict:
    import scipy

    return {"fudos": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = effective_config(args)
        ctx = {"seed": cfg["seed"], "threads": cfg["threads"], "out": Path(cfg["out"]), "hash": config_hash(cfg)}
        ctx["out"].mkdir(parents=True, exist_ok=True)
        result = HANDLERS[args.command](cfg, ctx)
        manifest = {
            "command": args.command,
            "config": cfg,
            "config_hash": ctx["hash"],
            "seed": ctx["seed"],
            "threads": ctx["threads"],
            "versions": _versions(),
            "wall_time_s": round(time.perf_counter() - t0, 3),
            "result": result,
        }
        fio.write_json(ctx["out"] / "manifest.json", manifest)
    except ValidationError as e:
        print(f"fudos: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (fio.ArtifactIOError, OSError) as e:
        print(f"fudos: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DegenerateDataError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as e:
        print(f"fudos: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
