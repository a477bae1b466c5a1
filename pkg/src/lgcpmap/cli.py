"""Command-line interface.

Subcommands: `simulate` (power-study datasets), `fit` (model fitting with a
JSON report, CSV grids and figures), `compare` (criteria table across fits
of the same dataset) and `riskmap` (per-disease risk surfaces from a fit).

Exit codes are a stable contract: 0 success, 1 numerical failure, 2 input
error, 3 consistency error. All outputs are deterministic given the same
config and seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import plotting
from .errors import (ConsistencyError, InputError, LgcpError, ModelError,
                     NumericalError)
from .geometry import PointPattern, Window, build_mesh
from .inference import FitOptions, exceedance, fit
from .lgcp import ModelSpec, assemble, augment, effect_difference
from .simulate import (DEFAULT_CASE_COUNTS, DEFAULT_PHIS, Scenario,
                       default_source, default_window, simulate_study,
                       write_datasets)
from .smoothing import GridField, GridSpec

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_INPUT = 2
EXIT_CONSISTENCY = 3


@dataclass
class RunConfig:
    """Everything a command run needs; round-trips losslessly through JSON."""

    command: str = "fit"
    window: Optional[str] = None
    pattern: Optional[str] = None
    out: str = "out"
    seed: int = 0
    model: int = 0
    exposure: Optional[str] = None
    sources: list = field(default_factory=list)
    confounders: list = field(default_factory=list)
    grid_res: int = 64
    mesh_max_edge: Optional[float] = None
    mesh_extension: Optional[float] = None
    exposure_knots: int = 20
    weight_scheme: str = "voronoi"
    exploration: str = "auto"
    bandwidth: float = 0.3
    n_controls: int = 3000
    case_counts: list = field(default_factory=lambda: list(DEFAULT_CASE_COUNTS))
    phis: list = field(default_factory=lambda: list(DEFAULT_PHIS))
    figures: bool = True
    verbose: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclass_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except FileNotFoundError as exc:
            raise InputError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config file is not valid JSON: {path}: {exc}") from exc

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)


def _require_file(path, what: str) -> Path:
    if path is None:
        raise InputError(f"no {what} file given")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if cfg.window is not None:
        window = Window.from_geojson(_require_file(cfg.window, "window"))
    else:
        window = default_window()
    source = np.asarray(cfg.sources[0], dtype=float) if cfg.sources else default_source()
    scenario = Scenario(window=window, source=source, n_controls=cfg.n_controls,
                        case_counts=tuple(cfg.case_counts), phis=tuple(cfg.phis),
                        seed=cfg.seed, bandwidth=cfg.bandwidth,
                        grid_resolution=cfg.grid_res)
    result = simulate_study(scenario)
    manifest = write_datasets(result, outdir)
    if cfg.figures:
        figdir = outdir / "figures"
        figdir.mkdir(exist_ok=True)
        fig = plotting.plot_field(result.baseline_estimate,
                                  "estimated control intensity", window)
        plotting.save_figure(fig, figdir / "baseline_intensity.png")
        first = result.datasets[0]
        fig = plotting.plot_points(first.pattern, window, [source],
                                   title=f"dataset {first.label}")
        plotting.save_figure(fig, figdir / "example_dataset.png")
    print(f"wrote {len(result.datasets)} datasets to {outdir} "
          f"(manifest: {manifest.name})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _model_spec_from_config(cfg: RunConfig) -> ModelSpec:
    return ModelSpec(
        model=cfg.model,
        exposure=cfg.exposure,
        sources=tuple(tuple(s) for s in cfg.sources),
        confounders=tuple(cfg.confounders),
        weight_scheme=cfg.weight_scheme,
        mesh_max_edge=cfg.mesh_max_edge,
        mesh_extension=cfg.mesh_extension,
        exposure_knots=cfg.exposure_knots,
    )


def run_fit(cfg: RunConfig):
    """Shared fit pipeline; returns (result, model, window, paths)."""
    window_path = _require_file(cfg.window, "window")
    pattern_path = _require_file(cfg.pattern, "pattern")
    window = Window.from_geojson(window_path)
    pattern = PointPattern.from_csv(pattern_path)
    pattern.validate_inside(window)
    spec = _model_spec_from_config(cfg)
    max_edge = spec.mesh_max_edge or window.diameter / 10.0
    mesh = build_mesh(window, max_edge, spec.mesh_extension)
    data = augment(pattern, window, scheme=spec.weight_scheme, mesh=mesh)
    model = assemble(spec, data, mesh=mesh)
    grid = GridSpec.from_window(window, cfg.grid_res)
    options = FitOptions(grid=grid, window=window, exploration=cfg.exploration)
    result = fit(model, options)
    return result, model, window, {"window": window_path, "pattern": pattern_path}


def _grid_spec_dict(grid: GridSpec) -> dict:
    return {"x0": grid.x0, "y0": grid.y0, "cell": grid.cell,
            "nx": grid.nx, "ny": grid.ny}


def _write_fixed_effects_csv(result, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "disease", "mean", "sd", "ci_low", "ci_high"])
        for row in result.fixed_effect_table():
            writer.writerow([row["name"], row["disease"], repr(row["mean"]),
                             repr(row["sd"]), repr(row["ci_low"]), repr(row["ci_high"])])


def _write_exposure_csv(summary: dict, path) -> None:
    knots = summary["knots"]
    if knots is None:
        knots = np.arange(summary["mean"].size, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["distance", "mean", "sd", "ci_low", "ci_high"])
        for k in range(len(knots)):
            writer.writerow([repr(float(knots[k])), repr(float(summary["mean"][k])),
                             repr(float(summary["sd"][k])),
                             repr(float(summary["ci_low"][k])),
                             repr(float(summary["ci_high"][k]))])


def cmd_fit(cfg: RunConfig) -> int:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    result, model, window, inputs = run_fit(cfg)

    report = result.to_report_dict()
    report["config"] = cfg.to_dict()
    report["grid"] = _grid_spec_dict(result.grid)
    report["inputs"] = {k: str(v) for k, v in inputs.items()}
    report["input_hashes"] = {k: _sha256(v) for k, v in inputs.items()}
    report["dataset_hash"] = report["input_hashes"]["pattern"]
    exposure_summaries = {}
    for name in result.exposure_curves:
        s = result.exposure_curve_summary(name)
        exposure_summaries[name] = {
            "kind": s["kind"], "disease": s["disease"],
            "knots": None if s["knots"] is None else s["knots"].tolist(),
            "mean": s["mean"].tolist(), "sd": s["sd"].tolist(),
            "ci_low": s["ci_low"].tolist(), "ci_high": s["ci_high"].tolist(),
        }
    report["exposure_effects"] = exposure_summaries
    _write_json(report, outdir / "report.json")
    _write_fixed_effects_csv(result, outdir / "fixed_effects.csv")

    figdir = outdir / "figures"
    if cfg.figures:
        figdir.mkdir(exist_ok=True)

    for name in result.fields:
        mean_f = result.field_grid(name, "mean")
        sd_f = result.field_grid(name, "sd")
        mean_f.to_xyz_csv(outdir / f"field_{name}_mean.csv")
        sd_f.to_xyz_csv(outdir / f"field_{name}_sd.csv")
        if cfg.figures:
            plotting.save_figure(
                plotting.plot_field(mean_f, f"{name} posterior mean", window,
                                    symmetric=True),
                figdir / f"field_{name}_mean.png")
            plotting.save_figure(
                plotting.plot_field(sd_f, f"{name} posterior sd", window),
                figdir / f"field_{name}_sd.png")

    if result.model_id in (1, 3):
        diseases = sorted(b.disease for b in result.blocks
                          if b.kind == "spatial2d" and b.disease is not None)
        for i in diseases:
            exc = exceedance(result, f"S{i}")
            exc.to_xyz_csv(outdir / f"exceedance_S{i}.csv")
            if cfg.figures:
                plotting.save_figure(
                    plotting.plot_field(exc, f"P(S{i} > 0 | data)", window,
                                        cmap="magma"),
                    figdir / f"exceedance_S{i}.png")
        for a in range(len(diseases)):
            for b in range(a + 1, len(diseases)):
                u, v = diseases[a], diseases[b]
                diff = effect_difference(result, u, v)
                diff.mean.to_xyz_csv(outdir / f"delta_S{u}_S{v}_mean.csv")
                diff.sd.to_xyz_csv(outdir / f"delta_S{u}_S{v}_sd.csv")
                if cfg.figures:
                    plotting.save_figure(
                        plotting.plot_field(diff.mean, f"S{u} - S{v} posterior mean",
                                            window, symmetric=True),
                        figdir / f"delta_S{u}_S{v}_mean.png")

    for name in result.exposure_curves:
        s = result.exposure_curve_summary(name)
        _write_exposure_csv(s, outdir / f"exposure_{name}.csv")
        if cfg.figures and s["knots"] is not None:
            plotting.save_figure(plotting.plot_exposure_curve(s),
                                 figdir / f"exposure_{name}.png")

    crit = result.criteria
    print(f"model {result.model_id}: DIC={crit.dic:.2f} WAIC={crit.waic:.2f} "
          f"logML={crit.log_marginal_likelihood:.2f} -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _load_report(fit_dir) -> dict:
    path = Path(fit_dir) / "report.json"
    if not path.exists():
        raise InputError(f"no report.json in fit directory {fit_dir}")
    with open(path) as fh:
        return json.load(fh)


def _fmt_criterion(value, unreliable: bool) -> str:
    if unreliable or value is None or not np.isfinite(value):
        return "-"
    return f"{value:.2f}"


def cmd_compare(fit_dirs: list, out: str, figures: bool = True) -> int:
    if len(fit_dirs) < 2:
        raise InputError("compare needs at least two fit directories")
    reports = [_load_report(d) for d in fit_dirs]
    hashes = [r.get("dataset_hash") for r in reports]
    if len(set(hashes)) != 1 or hashes[0] is None:
        raise ConsistencyError(
            "fit reports refer to different datasets (hash mismatch); "
            "refusing to compare")
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    base_dic = None
    for d, rep in zip(fit_dirs, reports):
        crit = rep.get("criteria") or {}
        dic = crit.get("dic")
        dic_bad = bool(crit.get("dic_unreliable", False))
        waic_bad = bool(crit.get("waic_unreliable", False))
        if base_dic is None and not dic_bad and dic is not None:
            base_dic = dic
        label = Path(d).name
        ddic = None
        if dic is not None and base_dic is not None and not dic_bad:
            ddic = dic - base_dic
        rows.append({
            "label": label,
            "model": rep.get("model"),
            "exposure": rep.get("exposure"),
            "dic": _fmt_criterion(dic, dic_bad),
            "waic": _fmt_criterion(crit.get("waic"), waic_bad),
            "log_ml": _fmt_criterion(crit.get("log_marginal_likelihood"), False),
            "delta_dic": "-" if ddic is None else f"{ddic:.2f}",
            "_ddic_value": ddic,
        })
    with open(outdir / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "model", "exposure", "dic", "waic",
                         "log_ml", "delta_dic"])
        for r in rows:
            writer.writerow([r["label"], r["model"], r["exposure"], r["dic"],
                             r["waic"], r["log_ml"], r["delta_dic"]])
    if figures:
        fig = plotting.plot_comparison([r["label"] for r in rows],
                                       [r["_ddic_value"] for r in rows])
        plotting.save_figure(fig, outdir / "comparison.png")
    print(f"compared {len(rows)} fits -> {outdir / 'comparison.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# riskmap
# ---------------------------------------------------------------------------

def cmd_riskmap(fit_dir, out: str, pairs: Optional[list] = None,
                figures: bool = True) -> int:
    rep = _load_report(fit_dir)
    if rep.get("model") not in (1, 3):
        raise ModelError("risk maps need a fit of model 1 or 3 "
                         f"(got model {rep.get('model')})")
    g = rep.get("grid")
    grid = GridSpec(x0=g["x0"], y0=g["y0"], cell=g["cell"], nx=g["nx"], ny=g["ny"])
    window = None
    win_path = rep.get("inputs", {}).get("window")
    if win_path and Path(win_path).exists():
        window = Window.from_geojson(win_path)
    fit_dir = Path(fit_dir)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    figdir = outdir / "figures"
    if figures:
        figdir.mkdir(exist_ok=True)

    diseases = sorted(int(p.stem.split("_S")[1])
                      for p in fit_dir.glob("exceedance_S*.csv"))
    if not diseases:
        raise InputError(f"fit directory {fit_dir} has no exceedance grids")

    summary = {"model": rep.get("model"), "diseases": diseases, "fields": {}}
    for i in diseases:
        entries = {}
        for stat in ("mean", "sd"):
            src = fit_dir / f"field_S{i}_{stat}.csv"
            if src.exists():
                f = GridField.from_xyz_csv(src, grid)
                f.to_xyz_csv(outdir / src.name)
                f.to_ascii_grid(outdir / f"field_S{i}_{stat}.asc")
                if figures:
                    plotting.save_figure(
                        plotting.plot_field(f, f"S{i} posterior {stat}", window,
                                            symmetric=(stat == "mean")),
                        figdir / f"field_S{i}_{stat}.png")
        exc_src = fit_dir / f"exceedance_S{i}.csv"
        exc = GridField.from_xyz_csv(exc_src, grid)
        exc.to_xyz_csv(outdir / exc_src.name)
        exc.to_ascii_grid(outdir / f"exceedance_S{i}.asc")
        vals = exc.values[exc.mask]
        vals = vals[np.isfinite(vals)]
        entries["share_above_0.95"] = float((vals > 0.95).mean()) if vals.size else None
        entries["share_below_0.05"] = float((vals < 0.05).mean()) if vals.size else None
        entries["max_exceedance"] = float(vals.max()) if vals.size else None
        summary["fields"][f"S{i}"] = entries
        if figures:
            plotting.save_figure(
                plotting.plot_field(exc, f"P(S{i} > 0 | data)", window, cmap="magma"),
                figdir / f"exceedance_S{i}.png")

    if pairs:
        for (u, v) in pairs:
            src = fit_dir / f"delta_S{u}_S{v}_mean.csv"
            if not src.exists():
                raise InputError(f"fit has no stored difference grid for pair ({u},{v})")
            for stat in ("mean", "sd"):
                f = GridField.from_xyz_csv(fit_dir / f"delta_S{u}_S{v}_{stat}.csv", grid)
                f.to_xyz_csv(outdir / f"delta_S{u}_S{v}_{stat}.csv")
                if figures and stat == "mean":
                    plotting.save_figure(
                        plotting.plot_field(f, f"S{u} - S{v} posterior mean", window,
                                            symmetric=True),
                        figdir / f"delta_S{u}_S{v}_mean.png")

    _write_json(summary, outdir / "riskmap_summary.json")
    print(f"risk maps for diseases {diseases} -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parse_sources(text: str) -> list:
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            x, y = part.split(",")
            out.append([float(x), float(y)])
        except ValueError as exc:
            raise InputError(f"bad source {part!r}; expected 'x,y[;x,y...]'") from exc
    if not out:
        raise InputError("no source coordinates given")
    return out


def _parse_pairs(text: str) -> list:
    out = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            u, v = part.split(",")
            out.append((int(u), int(v)))
        except ValueError as exc:
            raise InputError(f"bad pair {part!r}; expected 'u,v[;u,v...]'") from exc
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lgcpmap",
        description="Multivariate log-Gaussian Cox models for case-control "
                    "point patterns")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, help="JSON config file")
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering")

    p_sim = sub.add_parser("simulate", help="generate power-study datasets")
    common(p_sim)
    p_sim.add_argument("--window", type=str, help="GeoJSON window (default synthetic)")
    p_sim.add_argument("--n-cases", type=int, help="restrict to one case count")
    p_sim.add_argument("--phi", type=float, help="restrict to one decay scale")
    p_sim.add_argument("--n-controls", type=int)
    p_sim.add_argument("--bandwidth", type=float)
    p_sim.add_argument("--grid-res", type=int)

    p_fit = sub.add_parser("fit", help="fit a model to a pattern CSV")
    common(p_fit)
    p_fit.add_argument("--window", type=str, help="GeoJSON window file")
    p_fit.add_argument("--pattern", type=str, help="pattern CSV (x,y,mark[,cov...])")
    p_fit.add_argument("--model", type=int, choices=(0, 1, 2, 3))
    p_fit.add_argument("--exposure", type=str, choices=("fixed", "rw1", "spde1"))
    p_fit.add_argument("--sources", type=str, help="source coords 'x,y[;x,y...]'")
    p_fit.add_argument("--confounders", type=str, help="comma-separated column names")
    p_fit.add_argument("--grid-res", type=int)
    p_fit.add_argument("--mesh-max-edge", type=float)
    p_fit.add_argument("--exploration", type=str,
                       choices=("auto", "grid", "ccd", "eb"))

    p_cmp = sub.add_parser("compare", help="tabulate criteria across fits")
    p_cmp.add_argument("fits", nargs="+", help="fit output directories")
    p_cmp.add_argument("--out", type=str, default="comparison")
    p_cmp.add_argument("--no-figures", action="store_true")

    p_rm = sub.add_parser("riskmap", help="export risk surfaces from a fit")
    p_rm.add_argument("fit_dir", help="fit output directory")
    p_rm.add_argument("--out", type=str, default="riskmap")
    p_rm.add_argument("--pairs", type=str,
                      help="disease pairs for difference maps, 'u,v[;u,v...]'")
    p_rm.add_argument("--no-figures", action="store_true")

    return parser


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    cfg.command = args.command
    override_map = {
        "out": "out", "seed": "seed", "window": "window", "pattern": "pattern",
        "model": "model", "exposure": "exposure", "grid_res": "grid_res",
        "mesh_max_edge": "mesh_max_edge", "exploration": "exploration",
        "n_controls": "n_controls", "bandwidth": "bandwidth",
    }
    for arg_name, cfg_name in override_map.items():
        val = getattr(args, arg_name, None)
        if val is not None:
            setattr(cfg, cfg_name, val)
    if getattr(args, "sources", None):
        cfg.sources = _parse_sources(args.sources)
    if getattr(args, "confounders", None):
        cfg.confounders = [c.strip() for c in args.confounders.split(",") if c.strip()]
    if getattr(args, "no_figures", False):
        cfg.figures = False
    if getattr(args, "n_cases", None) is not None:
        cfg.case_counts = [args.n_cases]
    if getattr(args, "phi", None) is not None:
        cfg.phis = [args.phi]
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(_config_from_args(args))
        if args.command == "fit":
            return cmd_fit(_config_from_args(args))
        if args.command == "compare":
            return cmd_compare(args.fits, args.out, figures=not args.no_figures)
        if args.command == "riskmap":
            pairs = _parse_pairs(args.pairs) if args.pairs else None
            return cmd_riskmap(args.fit_dir, args.out, pairs=pairs,
                               figures=not args.no_figures)
        raise InputError(f"unknown command {args.command!r}")
    except ConsistencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except (InputError, ModelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, LgcpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
