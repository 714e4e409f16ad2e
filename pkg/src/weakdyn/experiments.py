"""Experiment drivers: estimator sweeps, strong-vs-weak training, metrics and CSV output."""
from __future__ import annotations

import csv
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy
import torch

from . import __version__
from .errors import DegenerateFit, ZeroReference
from .estimator1d import (ContinuousStrongError, Scenario1D, euler_truncation, find_crossing_dt,
                          monte_carlo, noise_stream, strong_limit)
from .genericnet import GenericModel, degeneracy_report, load_checkpoint, save_checkpoint
from .testfn import three_point_testfn
from .train import TrainConfig, train
from .trajectory import (TimeGrid, add_noise, damped_oscillator_benchmark, generate_dataset, integrate,
                         read_csv, sample_oscillator_states, write_csv)

__all__ = [
    "rel_l2_error",
    "calibrate_affine",
    "ExperimentSpec",
    "strong_sweep",
    "strong_error_path",
    "weak_sweep",
    "strong_vs_weak",
    "crossing_scan",
    "oscillator_data",
    "train_compare",
    "evaluate_model",
    "run",
    "write_rows",
    "thread_cap",
]


def thread_cap() -> int:
    """Parallelism limit from ``WEAKDYN_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("WEAKDYN_THREADS", "1")))
    except ValueError:
        return 1


def rel_l2_error(truth, pred) -> float:
    """Mean over trajectories and states of ``|x_j - x_hat_j|_2 / |x_j|_2`` along time.

    Arrays are ``(N, K+1, d)`` (a single ``(K+1, d)`` trajectory is accepted).
    """
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {pred.shape}")
    if truth.ndim == 2:
        truth, pred = truth[None], pred[None]
    ref = np.sum(truth * truth, axis=1)
    if np.any(ref == 0):
        raise ZeroReference("a reference state is identically zero")
    num = np.sum((truth - pred) ** 2, axis=1)
    return float(np.mean(np.sqrt(num / ref)))


def calibrate_affine(learned, truth, anchor: Optional[int] = None):
    """Least-squares ``a, b`` with ``a * learned + b ~ truth``.

    With ``anchor`` (an index), ``b`` is tied so that the anchored sample is
    matched exactly and ``a`` fits the remaining samples.  Returns
    ``(a, b, calibrated)``.
    """
    x = np.asarray(learned, dtype=float)
    y = np.asarray(truth, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two matching 1-D sample vectors with at least 2 entries")
    if np.ptp(x) == 0:
        raise DegenerateFit("learned samples are constant")
    if anchor is None:
        A = np.stack([x, np.ones_like(x)], axis=1)
        (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    else:
        dx, dy = x - x[anchor], y - y[anchor]
        a = float(np.dot(dx, dy) / np.dot(dx, dx))
        b = float(y[anchor] - a * x[anchor])
    cal = a * x + b
    if anchor is not None:
        cal[anchor] = y[anchor]
    return float(a), float(b), cal


# -- estimator sweeps --------------------------------------------------------

def strong_sweep(lam: float, sigmas: Sequence[float], dts: Sequence[float], runs: int, seed: int,
                 x0: float = 1.0, T: float = 1.0, workers: Optional[int] = None):
    """Rows ``(dt, sigma, run, rel_error)`` and per-cell summaries of the strong estimator."""
    cells = [Scenario1D(lam, x0, T, dt, s, seed) for s in sigmas for dt in dts]
    stats = monte_carlo(cells, runs, "strong", workers or thread_cap())
    rows, summary = [], []
    for st in stats:
        sc = st.scenario
        for r, e in enumerate(st.rel_errors):
            rows.append((sc.dt, sc.sigma, r, e))
        summary.append((sc.dt, sc.sigma, st.mean_rel_error, st.mean_dt_error, st.mean_abs_dt_error,
                        euler_truncation(lam, sc.dt) / lam, strong_limit(lam, sc.sigma, x0, T)))
    return rows, summary


def strong_error_path(lam: float, sigma: float, seed: int, run: int = 0, x0: float = 1.0, T: float = 1.0,
                      n_min: int = 10, n_max: int = 10000, n_points: int = 200):
    """Rows ``(dt, abs_error_times_dt, sign)`` along one nested noise stream."""
    Ns = np.unique(np.round(np.geomspace(n_min, n_max, n_points)).astype(int))
    err = ContinuousStrongError(lam, x0, sigma, noise_stream(seed, run, n_max + 1), T)
    rows = []
    for N in Ns[::-1]:
        e = err.at_steps(int(N))
        dt = T / N
        rows.append((dt, abs(e) * dt, int(np.sign(e))))
    return rows


def weak_sweep(lam: float, sigmas: Sequence[float], Ss: Sequence[float], runs: int, seed: int,
               x0: float = 1.0, workers: Optional[int] = None):
    """Rows ``(S, sigma, run, rel_error)`` and per-cell summaries of the weak estimator."""
    cells = [Scenario1D(lam, x0, 1.0, 1.0, s, seed, S) for s in sigmas for S in Ss]
    stats = monte_carlo(cells, runs, "weak", workers or thread_cap())
    rows, summary = [], []
    for st in stats:
        sc = st.scenario
        for r, e in enumerate(st.rel_errors):
            rows.append((sc.S, sc.sigma, r, e))
        summary.append((sc.S, sc.sigma, st.mean_rel_error, st.mean_abs_rel_error, st.fraction_rel_above(1.0)))
    return rows, summary


def strong_vs_weak(lam: float, sigmas: Sequence[float], runs: int, seed: int, dt: float = 0.01,
                   T: float = 1.0, S: float = 1.0, x0: float = 1.0):
    """Rows ``(sigma, form, run, rel_error)`` with both estimators on the same samples.

    The weak estimator uses the three samples at ``T/2 - S/2``, ``T/2`` and
    ``T/2 + S/2`` of each trajectory.
    """
    K = int(round(T / dt))
    step = int(round(0.5 * S / dt))
    centre = K // 2
    if not np.isclose(step * dt, 0.5 * S) or centre - step < 0 or centre + step > K:
        raise ValueError(f"support S={S} does not fit the grid dt={dt}, T={T}")
    tf = three_point_testfn(lam, S)
    idx = np.array([centre - step, centre, centre + step])
    x = x0 * np.exp(lam * dt * np.arange(K + 1))
    rows = []
    for s in sigmas:
        for r in range(runs):
            y = x + s * noise_stream(seed, r, K + 1)
            prev = y[:-1]
            theta_s = np.dot(prev, np.diff(y)) / (dt * np.dot(prev, prev))
            yw = y[idx]
            theta_w = -np.dot(yw, tf.dpsi) / np.dot(yw, tf.psi)
            rows.append((s, "strong", r, (theta_s - lam) / lam))
            rows.append((s, "weak", r, (theta_w - lam) / lam))
    return rows


def crossing_scan(lam: float, sigma: float, seed: int, streams: int, bracket=(1e-4, 1e-1),
                  x0: float = 1.0, T: float = 1.0):
    """Rows ``(run, found, dt_star, error)`` over ``streams`` noise streams."""
    sc = Scenario1D(lam, x0, T, bracket[1], sigma, seed)
    rows = []
    for r in range(streams):
        res = find_crossing_dt(sc, bracket, run=r)
        rows.append((r, 0, float("nan"), float("nan")) if res is None else (r, 1, res.dt, res.error))
    return rows


# -- learning experiments ----------------------------------------------------

@dataclass
class OscillatorData:
    grid: TimeGrid
    train_clean: object
    train_noisy: object
    test: object


def oscillator_data(seed: int, noise: float = 0.10, n_train: int = 20, n_test: int = 5,
                    K: int = 200, dt: float = 0.02, zeta: float = 0.5) -> OscillatorData:
    """Noisy training and clean test trajectories of the damped oscillator."""
    system = damped_oscillator_benchmark(zeta)
    rng = np.random.default_rng([seed, 0])
    grid = TimeGrid(0.0, dt, K)
    x_train = sample_oscillator_states(n_train, rng)
    x_test = sample_oscillator_states(n_test, rng)
    clean = generate_dataset(system, x_train, grid, rtol=1e-10, atol=1e-12)
    test = generate_dataset(system, x_test, grid, rtol=1e-10, atol=1e-12)
    return OscillatorData(grid, clean, add_noise(clean, noise, seed), test)


def rollout(model: GenericModel, x0s, grid: TimeGrid, rtol: float = 1e-7, atol: float = 1e-9) -> np.ndarray:
    return integrate(model.as_dynamics(), np.asarray(x0s, dtype=float), grid, "rk23", rtol=rtol, atol=atol)


def evaluate_model(model: GenericModel, truth, anchor_entropy: bool = False) -> dict:
    """Rollout error, structure residuals and calibrated potentials along the first test trajectory."""
    system = damped_oscillator_benchmark()
    traj = truth.trajectories
    pred = np.swapaxes(rollout(model, traj[:, 0, :], truth.grid), 0, 1)
    out = {"rel_l2_error": rel_l2_error(traj, pred)}
    out["degeneracy"] = degeneracy_report(model, traj.reshape(-1, traj.shape[-1]))
    x = traj[0]
    with torch.no_grad():
        xt = torch.as_tensor(x)
        E_nn = model.energy(xt).numpy()
        S_nn = model.entropy(xt).numpy()
    E_true = np.array([system.energy(xi) for xi in x])
    S_true = np.array([system.entropy(xi) for xi in x])
    calib = {}
    for name, learned, ref, anchor in (("E", E_nn, E_true, None), ("S", S_nn, S_true, 0 if anchor_entropy else None)):
        try:
            a, b, cal = calibrate_affine(learned, ref, anchor)
        except DegenerateFit:
            a, b, cal = float("nan"), float("nan"), np.full_like(ref, np.nan)
        calib[name] = dict(a=a, b=b, learned=learned, calibrated=cal, truth=ref)
    out["calibration"] = calib
    out["prediction"] = pred
    return out


def train_compare(seed: int, noise: float = 0.10, n_train: int = 20, n_test: int = 5, K: int = 200,
                  dt: float = 0.02, iters: int = 5000, config: Optional[dict] = None,
                  model_kw: Optional[dict] = None) -> dict:
    """Train one model per loss form on the same noisy data from the same initialization."""
    data = oscillator_data(seed, noise, n_train, n_test, K, dt)

    def fit(kind):
        cfg = TrainConfig.from_dict({**(config or {}), "loss": kind, "iters": iters, "seed": seed})
        model = GenericModel(3, seed=seed, **(model_kw or {}))
        t0 = time.perf_counter()
        model, hist = train(model, data.train_noisy, cfg)
        ev = evaluate_model(model, data.test)
        ev.update(model=model, history=hist, seconds=time.perf_counter() - t0, config=cfg)
        return ev

    kinds = ("strong", "weak")
    with ThreadPoolExecutor(max_workers=min(2, thread_cap())) as pool:
        results = dict(zip(kinds, pool.map(fit, kinds)))
    results["data"] = data
    return results


# -- run records -------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_rows(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


KINDS = ("gen-data", "estimate-strong", "estimate-weak", "crossing", "train-compare", "evaluate")

DEFAULTS = {
    "gen-data": dict(noise=0.10, n_traj=20, K=200, dt=0.02, zeta=0.5),
    "estimate-strong": dict(lam=-2.0, x0=1.0, T=1.0, sigmas=[1e-3, 1e-2, 1e-1],
                            dts=[1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1],
                            runs=1000, path_sigma=1e-2),
    "estimate-weak": dict(lam=-2.0, x0=1.0, sigmas=[1e-2], S=[0.05, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
                          runs=1000, compare_sigmas=[1e-3, 1e-2, 1e-1], compare_dt=0.01),
    "crossing": dict(lam=-2.0, x0=1.0, T=1.0, sigma=1e-2, streams=100, dt_min=1e-4, dt_max=1e-1),
    "train-compare": dict(noise=0.10, n_train=20, n_test=5, K=200, dt=0.02, iters=5000,
                          train={}, model={}, anchor_entropy=False),
    "evaluate": dict(model=None, data=None, anchor_entropy=False),
}


@dataclass
class ExperimentSpec:
    """Serializable description of one run: kind, parameters, output directory and seed."""

    kind: str
    params: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        self.params = {**DEFAULTS[self.kind], **self.params}

    def to_dict(self) -> dict:
        return asdict(self)


def _run_gen_data(p, seed, out: Path):
    system = damped_oscillator_benchmark(p["zeta"])
    rng = np.random.default_rng([seed, 0])
    grid = TimeGrid(0.0, p["dt"], int(p["K"]))
    clean = generate_dataset(system, sample_oscillator_states(int(p["n_traj"]), rng), grid, rtol=1e-10, atol=1e-12)
    noisy = add_noise(clean, p["noise"], seed)
    files = write_csv(clean, out / "clean") + write_csv(noisy, out / "noisy")
    return files, {"sigma_clean": clean.sigma.tolist(), "sigma_noisy": noisy.sigma.tolist()}


def _snap_steps(dts, T: float) -> list[float]:
    """Nearest step sizes of the form ``T / N``, deduplicated and sorted."""
    return sorted({T / max(1, round(T / dt)) for dt in dts})


def _run_estimate_strong(p, seed, out: Path):
    dts = _snap_steps(p["dts"], p["T"])
    rows, summary = strong_sweep(p["lam"], p["sigmas"], dts, int(p["runs"]), seed, p["x0"], p["T"])
    files = [
        write_rows(out / "strong_rel_error.csv", ["dt", "sigma", "run", "rel_error"], rows),
        write_rows(out / "strong_summary.csv", ["dt", "sigma", "mean_rel_error", "mean_dt_error",
                                                "mean_abs_dt_error", "truncation_rel", "limit_dt_error"], summary),
        write_rows(out / "strong_error_path.csv", ["dt", "abs_error_times_dt", "sign"],
                   strong_error_path(p["lam"], p["path_sigma"], seed, 0, p["x0"], p["T"])),
    ]
    return files, {"dts": dts}


def _run_estimate_weak(p, seed, out: Path):
    rows, summary = weak_sweep(p["lam"], p["sigmas"], p["S"], int(p["runs"]), seed, p["x0"])
    files = [
        write_rows(out / "weak_rel_error.csv", ["S", "sigma", "run", "rel_error"], rows),
        write_rows(out / "weak_summary.csv", ["S", "sigma", "mean_rel_error", "mean_abs_rel_error",
                                              "fraction_above_1"], summary),
        write_rows(out / "strong_vs_weak.csv", ["sigma", "form", "run", "rel_error"],
                   strong_vs_weak(p["lam"], p["compare_sigmas"], int(p["runs"]), seed, p["compare_dt"], x0=p["x0"])),
    ]
    return files, {}


def _run_crossing(p, seed, out: Path):
    rows = crossing_scan(p["lam"], p["sigma"], seed, int(p["streams"]), (p["dt_min"], p["dt_max"]), p["x0"], p["T"])
    found = sum(r[1] for r in rows)
    files = [write_rows(out / "crossing.csv", ["run", "found", "dt_star", "error"], rows)]
    return files, {"streams_with_crossing": int(found)}


def _eval_files(prefix: str, ev: dict, grid: TimeGrid, out: Path):
    t = grid.points()
    cal = ev["calibration"]
    rows = [(t[k], cal["E"]["truth"][k], cal["E"]["calibrated"][k], cal["S"]["truth"][k], cal["S"]["calibrated"][k])
            for k in range(t.size)]
    return write_rows(out / f"{prefix}_potentials.csv", ["t", "E_true", "E_cal", "S_true", "S_cal"], rows)


def _run_train_compare(p, seed, out: Path):
    res = train_compare(seed, p["noise"], int(p["n_train"]), int(p["n_test"]), int(p["K"]), p["dt"],
                        int(p["iters"]), p["train"], p["model"])
    files, summary = [], []
    for kind in ("strong", "weak"):
        ev = res[kind]
        files.append(ev["history"].write_csv(out / f"history_{kind}.csv"))
        files.append(save_checkpoint(ev["model"], out / f"model_{kind}.npz"))
        files.append(_eval_files(kind, ev, res["data"].grid, out))
        d = ev["degeneracy"]
        summary.append((kind, ev["rel_l2_error"], d["L_gradS"], d["M_gradE"], d["L_skew"], d["M_sym"], d["M_min_eig"],
                        ev["calibration"]["E"]["a"], ev["calibration"]["E"]["b"],
                        ev["calibration"]["S"]["a"], ev["calibration"]["S"]["b"]))
    files.append(write_rows(out / "train_compare.csv",
                            ["loss", "rel_l2_error", "L_gradS", "M_gradE", "L_skew", "M_sym", "M_min_eig",
                             "E_a", "E_b", "S_a", "S_b"], summary))
    files += write_csv(res["data"].test, out / "test_data")
    extra = {k: {"rel_l2_error": res[k]["rel_l2_error"], "train_seconds": res[k]["seconds"]} for k in ("strong", "weak")}
    return files, extra


def _run_evaluate(p, seed, out: Path):
    if not p["model"] or not p["data"]:
        raise ValueError("evaluate needs 'model' (checkpoint) and 'data' (trajectory CSV directory)")
    model = load_checkpoint(p["model"])
    truth = read_csv(p["data"])
    ev = evaluate_model(model, truth, p["anchor_entropy"])
    d = ev["degeneracy"]
    files = [
        write_rows(out / "evaluate.csv", ["rel_l2_error", "L_gradS", "M_gradE", "L_skew", "M_sym", "M_min_eig"],
                   [(ev["rel_l2_error"], d["L_gradS"], d["M_gradE"], d["L_skew"], d["M_sym"], d["M_min_eig"])]),
        _eval_files("evaluate", ev, truth.grid, out),
    ]
    return files, {"rel_l2_error": ev["rel_l2_error"]}


_RUNNERS = {
    "gen-data": _run_gen_data,
    "estimate-strong": _run_estimate_strong,
    "estimate-weak": _run_estimate_weak,
    "crossing": _run_crossing,
    "train-compare": _run_train_compare,
    "evaluate": _run_evaluate,
}


def run(spec: ExperimentSpec) -> dict:
    """Execute ``spec``, write its CSVs and ``manifest.json`` to ``spec.out``; returns the manifest."""
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(thread_cap())
    t0 = time.perf_counter()
    try:
        files, extra = _RUNNERS[spec.kind](spec.params, spec.seed, out)
    finally:
        torch.set_num_threads(prev_threads)
    manifest = {
        "spec": spec.to_dict(),
        "outputs": sorted(str(Path(f).relative_to(out)) for f in files),
        "results": extra,
        "seconds": time.perf_counter() - t0,
        "versions": {"weakdyn": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "torch": torch.__version__},
        "threads": thread_cap(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return manifest
