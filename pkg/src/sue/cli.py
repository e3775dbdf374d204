"""Command-line front end: synth | fit | eval | rwsim | sweep.

Configs are TOML with strict key checking (any unknown key is an error).
Every run writes a resolved-config snapshot beside its outputs, and every
report path emits a rendered PNG figure next to the delimited output.
The environment variable SUE_SEED overrides the configured seed.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import evaluation, plots, synth
from .align import AlignmentModel, SueConfig, fit_sue
from .errors import ConfigError, SueError
from .io import (
    EmbeddingSet,
    PairManifest,
    read_embeddings,
    read_pairs,
    write_embeddings,
    write_pairs,
)
from .nn import write_history_csv
from .spectral import SpectralModel

_SCHEMA = {
    "seed": int,
    "paths": {"x": str, "y": str, "pairs": str, "test_x": str, "test_y": str, "out": str},
    "graph": {"k_neighbors": int, "metric": str},
    "spectral": {"k": int, "path": str},
    "cca": {"r": int, "ridge": float, "pair_budget": int},
    "mmd": {
        "enabled": bool,
        "epochs": int,
        "batch_size": int,
        "learning_rate": float,
        "weight_decay": float,
        "optimizer": str,
        "patience": int,
        "hidden": list,
        "kernel_multipliers": list,
    },
    "eval": {"ks": list, "n_test": int},
    "rwsim": {"batch_size": int, "n_batches": int, "k_graph": int},
}


def _check_keys(data: dict, schema: dict, prefix: str = "") -> None:
    for key, value in data.items():
        if key not in schema:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{prefix}{key}' must be a table")
            _check_keys(value, expected, prefix=f"{prefix}{key}.")
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key '{prefix}{key}' must be a number")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"config key '{prefix}{key}' must be an integer")
        elif not isinstance(value, expected):
            raise ConfigError(f"config key '{prefix}{key}' must be {expected.__name__}")


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    _check_keys(data, _SCHEMA)
    if "SUE_SEED" in os.environ:
        data["seed"] = int(os.environ["SUE_SEED"])
    return data


def _sue_config(cfg: dict, args=None) -> SueConfig:
    graph = cfg.get("graph", {})
    spectral = cfg.get("spectral", {})
    cca = cfg.get("cca", {})
    mmd = cfg.get("mmd", {})
    config = SueConfig(
        k_neighbors=graph.get("k_neighbors", 100),
        metric=graph.get("metric", "cosine"),
        se_dim=spectral.get("k", 10),
        se_path=spectral.get("path", "numeric"),
        cca_dim=cca.get("r", 8),
        ridge=cca.get("ridge"),
        pair_budget=cca.get("pair_budget"),
        use_mmd=mmd.get("enabled", True),
        mmd_hidden=tuple(mmd.get("hidden", (128, 128, 128))),
        mmd_epochs=mmd.get("epochs", 100),
        mmd_batch_size=mmd.get("batch_size", 256),
        mmd_learning_rate=mmd.get("learning_rate", 1e-3),
        mmd_weight_decay=mmd.get("weight_decay", 1e-2),
        mmd_optimizer=mmd.get("optimizer", "adamw"),
        mmd_patience=mmd.get("patience", 20),
        kernel_multipliers=tuple(mmd.get("kernel_multipliers", (0.25, 0.5, 1.0, 2.0, 4.0))),
        seed=cfg.get("seed", 0),
    )
    if args is not None:
        if getattr(args, "no_mmd", False):
            config = replace(config, use_mmd=False)
        if getattr(args, "no_cca", False):
            config = replace(config, use_cca=False)
        if getattr(args, "raw_features", False):
            config = replace(config, use_spectral=False)
    return config


def _paths(cfg: dict, *required: str) -> dict:
    paths = cfg.get("paths", {})
    for key in required:
        if key not in paths:
            raise ConfigError(f"config is missing required path '{key}'")
        if key != "out" and not Path(paths[key]).exists():
            raise ConfigError(f"path '{key}' does not exist: {paths[key]}")
    return paths


def _format_of(path) -> str:
    return "csv" if str(path).endswith(".csv") else "binary"


def _load_set(path, name) -> EmbeddingSet:
    return read_embeddings(path, format=_format_of(path), name=name)


def _out_dir(paths: dict) -> Path:
    out = Path(paths.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, cfg: dict, extra: dict | None = None) -> None:
    resolved = dict(cfg)
    if extra:
        resolved = {**resolved, "resolved": extra}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _write_report(report, out: Path, stem: str) -> None:
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    (out / f"{stem}_metrics.csv").write_text(report.metrics_csv())
    if report.samples:
        (out / f"{stem}_samples.csv").write_text(report.samples_csv())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(os.environ.get("SUE_SEED", args.seed))
    if args.preset == "acceptance":
        scenario = synth.acceptance_scenario(seed=seed, n=args.n or 2000)
        m_pairs = args.pairs if args.pairs is not None else 50
        n_test = args.test if args.test is not None else 400
    else:
        scenario = synth.SyntheticScenario(
            latent_kind=args.latent_kind,
            latent_dim=args.latent_dim,
            n=args.n or 2000,
            n_components=args.components,
            component_spread=args.component_spread,
            d1=args.d1,
            d2=args.d2,
            noise=args.noise,
            private_dim=args.private_dim,
            private_scale=args.private_scale,
            radial_scale=args.radial_scale,
            seed=seed,
        )
        m_pairs = args.pairs if args.pairs is not None else 50
        n_test = args.test if args.test is not None else 400

    full = replace(scenario, n=scenario.n + n_test)
    x_all, y_all, labels = synth.generate(full)
    train_x = EmbeddingSet(x_all.data[: scenario.n], name="x", labels=labels[: scenario.n])
    train_y = EmbeddingSet(y_all.data[: scenario.n], name="y", labels=labels[: scenario.n])
    weak = synth.weaken(train_x, train_y, m=m_pairs, removal_frac=args.removal_frac, seed=seed)

    ext = ".csv" if args.format == "csv" else ".bin"
    write_embeddings(weak.x_set, out / f"x{ext}", format=args.format)
    write_embeddings(weak.y_set, out / f"y{ext}", format=args.format)
    write_pairs(weak.manifest, out / "pairs.tsv")
    test_x = EmbeddingSet(x_all.data[scenario.n :], name="test_x", labels=labels[scenario.n :])
    test_y = EmbeddingSet(y_all.data[scenario.n :], name="test_y", labels=labels[scenario.n :])
    write_embeddings(test_x, out / f"test_x{ext}", format=args.format)
    write_embeddings(test_y, out / f"test_y{ext}", format=args.format)
    from dataclasses import asdict

    scenario_dict = {
        k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(scenario).items()
    }
    manifest = {
        "scenario": scenario_dict,
        "m_pairs": m_pairs,
        "n_test": n_test,
        "removal_frac": args.removal_frac,
        "files": [f"x{ext}", f"y{ext}", "pairs.tsv", f"test_x{ext}", f"test_y{ext}"],
    }
    if args.emit_truth:
        np.savez(
            out / "ground_truth.npz",
            x_latent_ids=weak.x_latent_ids,
            y_latent_ids=weak.y_latent_ids,
        )
        manifest["files"].append("ground_truth.npz")
    (out / "synth_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {', '.join(manifest['files'])} to {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg, "x", "y", "pairs", "out")
    out = _out_dir(paths)
    config = _sue_config(cfg, args)
    x = _load_set(paths["x"], "x")
    y = _load_set(paths["y"], "y")
    pairs = read_pairs(paths["pairs"], x.n, y.n)

    prefit = None
    if args.reuse_spectral:
        sx = SpectralModel.load(Path(args.reuse_spectral) / "spectral_x.npz")
        sy = SpectralModel.load(Path(args.reuse_spectral) / "spectral_y.npz")
        prefit = (sx, sy)

    model = fit_sue(x, y, pairs, config, prefit_spectral=prefit)
    model.save(out / "model.npz")
    for side, spec in (("x", model.spectral_x), ("y", model.spectral_y)):
        if isinstance(spec, SpectralModel):
            spec.save(out / f"spectral_{side}.npz")
    if model.mmd_history:
        write_history_csv(model.mmd_history, out / "mmd_history.csv")
        plots.save_loss_curves(model.mmd_history, out / "mmd_history.png")
    _snapshot(out, cfg, extra=model.config)
    print(f"fit complete: model and stage checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    paths = _paths(cfg, "test_x", "test_y", "out")
    out = _out_dir(paths)
    model_path = Path(args.model) if args.model else out / "model.npz"
    if not model_path.exists():
        raise ConfigError(f"model checkpoint not found: {model_path}")
    model = AlignmentModel.load(model_path)
    test_x = _load_set(paths["test_x"], "test_x")
    test_y = _load_set(paths["test_y"], "test_y")
    ev = cfg.get("eval", {})
    ks = [int(k) for k in ev.get("ks", (1, 5, 10))]
    n_test = int(ev.get("n_test", min(test_x.n, 400)))
    seed = cfg.get("seed", 0)
    if n_test > test_x.n:
        raise ConfigError(f"eval.n_test={n_test} exceeds the {test_x.n} held-out pairs")
    tx, ty = test_x.data[:n_test], test_y.data[:n_test]

    fx = model.map_x(tx)
    fy = model.map_y(ty)
    x2y = evaluation.recall_at_k(fx, fy, ks)
    y2x = evaluation.recall_at_k(fy, fx, ks)
    metrics = {f"r_at_{k}_x2y": x2y[k] for k in ks}
    metrics.update({f"r_at_{k}_y2x": y2x[k] for k in ks})
    metrics.update({f"r_at_{k}": 0.5 * (x2y[k] + y2x[k]) for k in ks})
    metrics["modality_gap"] = evaluation.modality_gap(fx, fy)
    paired = evaluation.paired_distance_experiment(model, tx, ty, seed=seed)
    metrics.update({f"paired_distance_{k}": v for k, v in paired.metrics.items()})
    report = evaluation.EvalReport(
        task="retrieval",
        metrics=metrics,
        config={"ks": ks, "model": model.config},
        seed=seed,
        n_test=n_test,
        samples=paired.samples,
    )
    _write_report(report, out, "report")
    plots.save_histogram_pair(
        paired.samples["paired"],
        paired.samples["shuffled"],
        ("true pairs", "shuffled"),
        "cosine distance in the shared space",
        out / "paired_distance_hist.png",
    )
    _snapshot(out, cfg)
    for k in ks:
        print(f"R@{k}: x->y {x2y[k]:.2f}  y->x {y2x[k]:.2f}")
    return 0


def cmd_rwsim(args) -> int:
    cfg = load_config(args.config)
    paths = cfg.get("paths", {})
    out = _out_dir(paths)
    rw = cfg.get("rwsim", {})
    seed = cfg.get("seed", 0)
    if "test_x" in paths and "test_y" in paths:
        _paths(cfg, "test_x", "test_y")
        x = _load_set(paths["test_x"], "x")
        y = _load_set(paths["test_y"], "y")
        pairs = PairManifest(np.column_stack([np.arange(x.n), np.arange(x.n)]))
    else:
        _paths(cfg, "x", "y", "pairs")
        x = _load_set(paths["x"], "x")
        y = _load_set(paths["y"], "y")
        pairs = read_pairs(paths["pairs"], x.n, y.n)
    report = evaluation.rw_universality_experiment(
        x,
        y,
        pairs,
        batch_size=rw.get("batch_size", 9),
        n_batches=rw.get("n_batches", 1000),
        seed=seed,
        k_graph=rw.get("k_graph"),
        metric=cfg.get("graph", {}).get("metric", "cosine"),
    )
    _write_report(report, out, "rwsim")
    plots.save_histogram_pair(
        report.samples["paired"],
        report.samples["shuffled"],
        ("paired batches", "shuffled"),
        "random-walk distance across modalities",
        out / "rwsim_hist.png",
    )
    _snapshot(out, cfg)
    print(
        f"paired mean {report.metrics['rw_dist_paired_mean']:.4f} "
        f"vs shuffled {report.metrics['rw_dist_shuffled_mean']:.4f} "
        f"(p={report.metrics['p_value']:.2e})"
    )
    return 0


_GRID_SCHEMA = {
    "scenario": {
        "latent_kind": str,
        "latent_dim": int,
        "n": int,
        "n_components": int,
        "component_spread": float,
        "component_std": float,
        "d1": int,
        "d2": int,
        "noise": float,
        "private_dim": int,
        "private_scale": float,
        "radial_scale": float,
        "seed": int,
    },
    "n_test": int,
    "axes": dict,
    "points": list,
}


def _grid_points(grid: dict):
    points = [dict(p) for p in grid.get("points", [])]
    axes = grid.get("axes", {})
    if axes:
        unknown = set(axes) - evaluation.GRID_KEYS
        if unknown:
            raise ConfigError(f"unknown sweep axes: {sorted(unknown)}")
        keys = sorted(axes)
        for combo in itertools.product(*(axes[k] for k in keys)):
            points.append(dict(zip(keys, combo)))
    return points


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    paths = cfg.get("paths", {})
    out = _out_dir(paths)
    with open(args.grid, "rb") as fh:
        grid = tomllib.load(fh)
    _check_keys(grid, _GRID_SCHEMA)
    scenario = synth.SyntheticScenario(**grid.get("scenario", {}))
    base = _sue_config(cfg)
    points = _grid_points(grid)
    n_test = int(grid.get("n_test", 400))

    if args.jobs > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(
                pool.map(lambda p: evaluation.sweep([p], scenario, base, n_test=n_test)[0], points)
            )
    else:
        reports = evaluation.sweep(points, scenario, base, n_test=n_test)

    (out / "sweep_reports.json").write_text(
        "[\n" + ",\n".join(r.to_json() for r in reports) + "\n]\n"
    )
    rows = []
    for point, report in zip(points, reports):
        row = {k: point.get(k, "") for k in sorted(evaluation.GRID_KEYS)}
        row.update({k: report.metrics.get(k, "") for k in ("r_at_1", "r_at_5", "r_at_10")})
        row["task"] = report.task
        row["error"] = report.config.get("error", "")
        rows.append(row)
    header = list(rows[0]) if rows else []
    lines = [",".join(header)]
    lines += [",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in header) for r in rows]
    (out / "sweep_summary.csv").write_text("\n".join(lines) + "\n")
    curve = [
        {"n_unpaired": p["n_unpaired"], "r_at_10": r.metrics["r_at_10"]}
        for p, r in zip(points, reports)
        if "n_unpaired" in p and "r_at_10" in r.metrics
    ]
    if curve:
        plots.save_sweep_curve(
            curve, "n_unpaired", "r_at_10", out / "sweep_r10.png", title="recall@10 vs unpaired pool"
        )
    _snapshot(out, cfg, extra={"grid_points": points})
    failures = sum(1 for r in reports if r.task == "error")
    print(f"sweep finished: {len(reports)} points, {failures} failed; outputs in {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sue", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a weakly-paired synthetic scenario")
    p_synth.add_argument("--preset", choices=["acceptance", "custom"], default="custom")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--latent-kind", default="gaussian_mixture")
    p_synth.add_argument("--latent-dim", type=int, default=8)
    p_synth.add_argument("--n", type=int, default=None, help="training pool size per modality")
    p_synth.add_argument("--components", type=int, default=10)
    p_synth.add_argument("--component-spread", type=float, default=2.0)
    p_synth.add_argument("--d1", type=int, default=64)
    p_synth.add_argument("--d2", type=int, default=96)
    p_synth.add_argument("--noise", type=float, default=0.05)
    p_synth.add_argument("--private-dim", type=int, default=0)
    p_synth.add_argument("--private-scale", type=float, default=2.0)
    p_synth.add_argument("--radial-scale", type=float, default=0.0)
    p_synth.add_argument("--pairs", type=int, default=None, help="retained pair budget")
    p_synth.add_argument("--test", type=int, default=None, help="held-out paired test rows")
    p_synth.add_argument("--removal-frac", type=float, default=0.10)
    p_synth.add_argument("--format", choices=["binary", "csv"], default="binary")
    p_synth.add_argument("--emit-truth", action="store_true")
    p_synth.set_defaults(func=cmd_synth)

    p_fit = sub.add_parser("fit", help="run the pipeline and write checkpoints")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--no-mmd", action="store_true", help="skip the distribution aligner")
    p_fit.add_argument("--no-cca", action="store_true", help="skip the pairing stage")
    p_fit.add_argument("--raw-features", action="store_true", help="skip the spectral stage")
    p_fit.add_argument("--reuse-spectral", default=None, metavar="DIR",
                       help="load spectral checkpoints from a previous run")
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("eval", help="retrieval metrics on held-out pairs")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--model", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_rw = sub.add_parser("rwsim", help="random-walk similarity experiment")
    p_rw.add_argument("--config", required=True)
    p_rw.set_defaults(func=cmd_rwsim)

    p_sweep = sub.add_parser("sweep", help="grid of synthetic-scenario experiments")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid", required=True)
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
