"""Inhomogeneous Poisson simulation and the case-control power-study harness.

Points are generated by Lewis-Shedler thinning: homogeneous candidates at
a dominating rate are kept with probability lambda(x)/M. The study harness
draws a control set from a baseline intensity, re-estimates that baseline
by kernel smoothing of the simulated controls, and draws case sets whose
intensity is the re-estimated baseline damped by exp(-d/phi) in the
distance d to a putative pollution source. Every dataset gets its own
counter-based random stream derived from (seed, n_cases, phi), so
generation is reproducible and order-independent.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import InputError, NumericalError
from .geometry import PointPattern, Window, distance_to_source
from .smoothing import GridField, GridSpec, kernel_intensity

__all__ = [
    "Scenario", "SimulatedDataset", "StudyResult",
    "default_window", "default_source", "default_baseline",
    "thin_poisson", "simulate_study", "write_datasets",
]

DEFAULT_CASE_COUNTS = (50, 100, 300, 500, 1000, 2000)
DEFAULT_PHIS = (1.0, 3.0, 6.0)


def default_window() -> Window:
    """Synthetic study region, roughly 5 km across.

    Stands in for a real city boundary: distances from interior points to
    the default source span about 0.05 to 5.3 km.
    """
    ring = np.array([
        [0.0, 1.3], [2.0, 0.0], [4.0, 0.3], [5.3, 1.8], [5.1, 3.8],
        [3.5, 4.9], [1.5, 4.7], [0.3, 3.2],
    ])
    return Window(ring)


def default_source() -> np.ndarray:
    """Putative pollution source just outside the southern boundary,
    near the high-intensity part of the default baseline."""
    return np.array([2.6, -0.05])


def default_baseline(window: Window) -> Callable[[np.ndarray], np.ndarray]:
    """Smooth synthetic population intensity: a dense core near the source
    side of the window plus a broader secondary bump and a low floor."""

    def intensity(points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        core = 1.0 * np.exp(-(((p[:, 0] - 2.5) / 1.0) ** 2
                              + ((p[:, 1] - 1.4) / 0.9) ** 2))
        bump = 0.6 * np.exp(-(((p[:, 0] - 3.6) / 1.4) ** 2
                              + ((p[:, 1] - 3.2) / 1.2) ** 2))
        return 0.08 + core + bump

    return intensity


@dataclass(frozen=True)
class Scenario:
    """Configuration of the simulation study."""

    window: Window
    source: np.ndarray
    n_controls: int = 3000
    case_counts: tuple[int, ...] = DEFAULT_CASE_COUNTS
    phis: tuple[float, ...] = DEFAULT_PHIS
    seed: int = 0
    bandwidth: float = 0.3
    baseline: Optional[object] = None   # callable, GridField, or None (synthetic)
    grid_resolution: int = 128

    def __post_init__(self):
        object.__setattr__(self, "source", np.asarray(self.source, dtype=float).reshape(2))
        object.__setattr__(self, "case_counts", tuple(int(n) for n in self.case_counts))
        object.__setattr__(self, "phis", tuple(float(p) for p in self.phis))
        if any(n <= 0 for n in self.case_counts):
            raise InputError("case counts must be positive")
        if any(p <= 0 for p in self.phis):
            raise InputError("phi values must be positive")
        if self.n_controls <= 0:
            raise InputError("n_controls must be positive")

    @classmethod
    def default(cls, seed: int = 0, **kw) -> "Scenario":
        win = kw.pop("window", default_window())
        src = kw.pop("source", default_source())
        return cls(window=win, source=src, seed=seed, **kw)

    def to_dict(self) -> dict:
        return {
            "window": Window.to_geojson_dict(self.window),
            "source": self.source.tolist(),
            "n_controls": self.n_controls,
            "case_counts": list(self.case_counts),
            "phis": list(self.phis),
            "seed": self.seed,
            "bandwidth": self.bandwidth,
            "grid_resolution": self.grid_resolution,
        }


def _stream(seed: int, *tags: int) -> np.random.Generator:
    """Independent counter-based stream keyed by (seed, tags)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(t) for t in tags))
    return np.random.Generator(np.random.Philox(ss))


def _intensity_callable(intensity, window: Window):
    if isinstance(intensity, GridField):
        f = intensity

        def call(points):
            vals = f.value_at(points)
            return np.where(np.isfinite(vals), vals, 0.0)

        bound = f.masked_max()
        return call, bound
    if callable(intensity):
        return intensity, None
    raise InputError("intensity must be a GridField or a callable")


def _uniform_in_window(window: Window, n: int, rng: np.random.Generator,
                       max_tries: int = 1000) -> np.ndarray:
    x0, y0, x1, y1 = window.bounds
    out = np.empty((0, 2))
    for _ in range(max_tries):
        need = n - out.shape[0]
        if need <= 0:
            break
        cand = np.column_stack([rng.uniform(x0, x1, 2 * need + 16),
                                rng.uniform(y0, y1, 2 * need + 16)])
        cand = cand[window.contains(cand)]
        out = np.vstack([out, cand])
    if out.shape[0] < n:
        raise NumericalError("window rejection sampling failed; degenerate window?")
    return out[:n]


def thin_poisson(intensity, window: Window, seed_or_rng,
                 mode: str = "rate", n: Optional[int] = None,
                 bound: Optional[float] = None) -> PointPattern:
    """Simulate an inhomogeneous Poisson pattern by Lewis-Shedler thinning.

    `mode="rate"` draws a Poisson number of candidates at the dominating
    rate and thins them; `mode="fixed-n"` repeats acceptance sampling until
    exactly `n` points are kept, i.e. simulates conditionally on the count.
    The dominating bound is taken from the grid maximum for GridField
    intensities and must be supplied for callables.
    """
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else _stream(int(seed_or_rng))
    lam, auto_bound = _intensity_callable(intensity, window)
    M = bound if bound is not None else auto_bound
    if M is None:
        raise InputError("a dominating bound is required for callable intensities")
    if not np.isfinite(M) or M <= 0:
        raise NumericalError("dominating bound must be positive and finite")
    M = float(M) * (1.0 + 1e-12)

    if mode == "rate":
        n_cand = rng.poisson(M * window.area)
        cand = _uniform_in_window(window, n_cand, rng)
        vals = np.asarray(lam(cand), dtype=float)
        if (vals > M * (1.0 + 1e-9)).any():
            raise NumericalError("intensity exceeds its dominating bound")
        keep = rng.uniform(size=n_cand) * M < vals
        pts = cand[keep]
        return PointPattern(pts, np.zeros(pts.shape[0], dtype=int))

    if mode != "fixed-n":
        raise InputError(f"unknown simulation mode {mode!r}")
    if n is None or n <= 0:
        raise InputError("fixed-n mode needs a positive target count")
    got: list[np.ndarray] = []
    total = 0
    batch = max(256, 2 * n)
    for attempt in range(10000):
        cand = _uniform_in_window(window, batch, rng)
        vals = np.asarray(lam(cand), dtype=float)
        if (vals > M * (1.0 + 1e-9)).any():
            raise NumericalError("intensity exceeds its dominating bound")
        keep = rng.uniform(size=batch) * M < vals
        acc = cand[keep]
        got.append(acc)
        total += acc.shape[0]
        if total >= n:
            break
        if attempt == 20 and total == 0:
            raise NumericalError("thinning accepted no points; intensity may be zero")
    else:
        raise NumericalError("fixed-n thinning did not reach the target count")
    pts = np.vstack(got)[:n]
    return PointPattern(pts, np.zeros(n, dtype=int))


@dataclass(frozen=True)
class SimulatedDataset:
    """One (controls, cases) dataset of the study."""

    pattern: PointPattern     # marks: 0 controls, 1 cases
    n_cases: int
    phi: float
    seed: int

    @property
    def label(self) -> str:
        phi_txt = f"{self.phi:g}".replace(".", "p")
        return f"cases{self.n_cases}_phi{phi_txt}"


@dataclass(frozen=True)
class StudyResult:
    scenario: Scenario
    controls: PointPattern
    baseline_estimate: GridField
    datasets: tuple[SimulatedDataset, ...]


def simulate_study(scenario: Scenario) -> StudyResult:
    """Run the full power-study design.

    Controls are simulated once from the scenario baseline (conditionally
    on their count); the baseline is then re-estimated from the simulated
    controls by kernel smoothing, and each (n, phi) case set is thinned
    from that estimate damped by exp(-d/phi). The damping never exceeds
    one, so the baseline grid maximum dominates the case intensity.
    """
    window = scenario.window
    baseline = scenario.baseline
    if baseline is None:
        baseline = default_baseline(window)
    lam0, auto_bound = _intensity_callable(baseline, window)
    if auto_bound is None:
        probe = _uniform_in_window(window, 4096, _stream(scenario.seed, 9999))
        auto_bound = float(np.max(lam0(probe))) * 1.25

    controls = thin_poisson(baseline, window, _stream(scenario.seed, 0),
                            mode="fixed-n", n=scenario.n_controls, bound=auto_bound)
    grid = GridSpec.from_window(window, scenario.grid_resolution)
    lam_hat = kernel_intensity(controls, scenario.bandwidth, grid, window)
    peak = lam_hat.masked_max()

    source = scenario.source
    datasets = []
    for n in scenario.case_counts:
        for phi in scenario.phis:
            def case_intensity(points, phi=phi):
                vals = lam_hat.value_at(points)
                vals = np.where(np.isfinite(vals), vals, 0.0)
                d = distance_to_source(points, source)
                return vals * np.exp(-d / phi)

            rng = _stream(scenario.seed, n, int(round(phi * 1e6)))
            cases = thin_poisson(case_intensity, window, rng,
                                 mode="fixed-n", n=n, bound=peak)
            pattern = PointPattern(
                np.vstack([controls.points, cases.points]),
                np.concatenate([np.zeros(controls.n, dtype=int),
                                np.ones(cases.n, dtype=int)]))
            datasets.append(SimulatedDataset(pattern=pattern, n_cases=n,
                                             phi=phi, seed=scenario.seed))
    return StudyResult(scenario=scenario, controls=controls,
                       baseline_estimate=lam_hat, datasets=tuple(datasets))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_datasets(result: StudyResult, outdir) -> Path:
    """Write one pattern CSV per dataset plus a manifest with file hashes."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in result.datasets:
        name = f"dataset_{ds.label}.csv"
        path = outdir / name
        ds.pattern.to_csv(path)
        entries.append({
            "file": name, "n_cases": ds.n_cases, "phi": ds.phi,
            "n_controls": result.scenario.n_controls,
            "sha256": _sha256(path),
        })
    window_path = outdir / "window.geojson"
    with open(window_path, "w") as fh:
        json.dump(result.scenario.window.to_geojson_dict(), fh, sort_keys=True)
    manifest = {
        "scenario": result.scenario.to_dict(),
        "window_file": "window.geojson",
        "window_sha256": _sha256(window_path),
        "datasets": entries,
    }
    manifest_path = outdir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest_path
