"""Violation statistics, warm-start statistics and ground-truth violation curves."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import problems
from .dataset import NormalizationStats, TrajectoryDataset
from .diffusion import NoiseSchedule
from .problems import Task
from .solver import SolveOptions, warm_start

FEASIBLE_EPS = 1e-6
TABLE1_COLUMNS = ("method", "mean", "std", "q25", "feasible_per_mille")
TABLE2_COLUMNS = (
    "method", "locally_optimal_ratio", "time_mean", "time_std", "time_q25", "time_median",
    "iter_mean", "iter_std", "iter_q25", "iter_median",
)
CURVE_COLUMNS = ("k", "mean", "ci_lo", "ci_hi")


@dataclass
class ViolationStats:
    mean: float
    std: float
    quantile_25: float
    feasible_per_mille: float
    n_samples: int


@dataclass
class WarmStartStats:
    locally_optimal_ratio: float
    time_mean: float
    time_std: float
    time_quantile_25: float
    time_median: float
    iter_mean: float
    iter_std: float
    iter_quantile_25: float
    iter_median: float
    n_attempts: int
    # same statistics restricted to attempts that ended locally optimal
    success_time_median: float = float("nan")
    success_iter_median: float = float("nan")


@dataclass
class ViolationCurve:
    k: np.ndarray
    mean: np.ndarray
    half_width: np.ndarray
    n_data: int
    n_samples_per_step: int

    def rows(self):
        for k, m, w in zip(self.k, self.mean, self.half_width):
            yield int(k), float(m), float(m - w), float(m + w)


def _std(v: np.ndarray) -> float:
    return float(np.std(v, ddof=1)) if v.size > 1 else 0.0


def _physical(samples, conditions, stats: NormalizationStats):
    x = stats.denormalize_x(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0))
    y = stats.denormalize_y(np.asarray(conditions, dtype=np.float64))
    return x, y


def violation_values(samples, conditions, task: Task, stats: NormalizationStats) -> np.ndarray:
    """Per-sample violation of normalized samples (clipped before denormalizing)."""
    x, y = _physical(samples, conditions, stats)
    return problems.violation_values(np.atleast_2d(x), np.atleast_2d(y), task)


def summarize_violations(values, feasible_eps: float = FEASIBLE_EPS) -> ViolationStats:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no samples to evaluate")
    return ViolationStats(
        mean=float(v.mean()),
        std=_std(v),
        quantile_25=float(np.quantile(v, 0.25, method="linear")),
        feasible_per_mille=1000.0 * float(np.mean(v <= feasible_eps)),
        n_samples=int(v.size),
    )


def violation_stats(samples, conditions, task: Task, stats: NormalizationStats,
                    feasible_eps: float = FEASIBLE_EPS) -> ViolationStats:
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    if len(samples) != len(conditions):
        raise ValueError("samples and conditions must be aligned")
    return summarize_violations(violation_values(samples, conditions, task, stats), feasible_eps)


def warm_start_results(samples, conditions, task: Task, stats: NormalizationStats,
                       opts: SolveOptions | None = None):
    x, y = _physical(samples, conditions, stats)
    return [warm_start(yi, task, xi, opts) for xi, yi in zip(np.atleast_2d(x), np.atleast_2d(y))]


def summarize_warm_starts(results) -> WarmStartStats:
    if not results:
        raise ValueError("no samples to evaluate")
    times = np.array([r.wall_time for r in results])
    iters = np.array([r.iterations for r in results], dtype=float)
    ok = np.array([r.locally_optimal for r in results])
    return WarmStartStats(
        locally_optimal_ratio=float(ok.mean()),
        time_mean=float(times.mean()),
        time_std=_std(times),
        time_quantile_25=float(np.quantile(times, 0.25)),
        time_median=float(np.median(times)),
        iter_mean=float(iters.mean()),
        iter_std=_std(iters),
        iter_quantile_25=float(np.quantile(iters, 0.25)),
        iter_median=float(np.median(iters)),
        n_attempts=len(results),
        success_time_median=float(np.median(times[ok])) if ok.any() else float("nan"),
        success_iter_median=float(np.median(iters[ok])) if ok.any() else float("nan"),
    )


def warm_start_stats(samples, conditions, task: Task, stats: NormalizationStats,
                     opts: SolveOptions | None = None) -> WarmStartStats:
    """Run the solver from every sample; time and ratio are over all attempts."""
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    return summarize_warm_starts(warm_start_results(samples, conditions, task, stats, opts))


def gt_violation_curve(dataset: TrajectoryDataset, sched: NoiseSchedule, n_data: int, n_samples: int,
                       task: Task | None = None, rng=None) -> ViolationCurve:
    """Mean violation of forward-process draws at every step k, with 95% normal CI.

    The CI uses the standard error over all ``n_data * n_samples`` draws at a step.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if n_data > len(dataset):
        raise ValueError("n_data exceeds dataset size")
    task = task or dataset.task
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    rows = rng.choice(len(dataset), size=n_data, replace=False)
    x0 = dataset.x[rows].astype(np.float64)
    y_phys = np.repeat(dataset.physical_y()[rows], n_samples, axis=0)
    means = np.empty(sched.K)
    half = np.empty(sched.K)
    for k in range(1, sched.K + 1):
        ab = sched.alpha_bar[k - 1]
        eps = rng.standard_normal((n_data, n_samples, x0.shape[1]))
        xk = np.sqrt(ab) * x0[:, None] + np.sqrt(1.0 - ab) * eps
        phys = dataset.stats.denormalize_x(np.clip(xk, -1.0, 1.0)).reshape(-1, x0.shape[1])
        v = problems.violation_values(phys, y_phys, task)
        means[k - 1] = v.mean()
        half[k - 1] = 1.96 * _std(v) / np.sqrt(v.size)
    return ViolationCurve(np.arange(1, sched.K + 1), means, half, n_data, n_samples)


def uniform_baseline(conditions, task: Task, stats: NormalizationStats, n_per_problem: int, rng=None):
    """Uniform initial guesses in normalized form, ``n_per_problem`` per condition row.

    Returns ``(samples, conditions, problem_index)``.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    conditions = np.atleast_2d(np.asarray(conditions))
    xs = [stats.normalize_x(problems.sample_initial_guess(task, rng))
          for _ in range(len(conditions)) for _ in range(n_per_problem)]
    index = np.repeat(np.arange(len(conditions)), n_per_problem)
    return np.asarray(xs), conditions[index], index


# ---------------------------------------------------------------------------
# reporting


def report(task: Task, violation: dict | None = None, warm: dict | None = None,
           curve: ViolationCurve | None = None, extra: dict | None = None) -> dict:
    """Assemble a JSON-ready report; tables follow the published column layout."""
    out = {"task": task.kind.value, "horizon": task.horizon}
    if violation:
        out["table1"] = [
            {"method": m, "mean": s.mean, "std": s.std, "q25": s.quantile_25,
             "feasible_per_mille": s.feasible_per_mille}
            for m, s in violation.items()
        ]
        out["violation_stats"] = {m: asdict(s) for m, s in violation.items()}
    if warm:
        out["table2"] = [
            {"method": m, "locally_optimal_ratio": s.locally_optimal_ratio, "time_mean": s.time_mean,
             "time_std": s.time_std, "time_q25": s.time_quantile_25, "time_median": s.time_median,
             "iter_mean": s.iter_mean, "iter_std": s.iter_std, "iter_q25": s.iter_quantile_25,
             "iter_median": s.iter_median}
            for m, s in warm.items()
        ]
        out["warm_start_stats"] = {m: asdict(s) for m, s in warm.items()}
    if curve is not None:
        out["curve"] = {"n_data": curve.n_data, "n_samples_per_step": curve.n_samples_per_step,
                        "K": int(curve.k.size)}
    if extra:
        out.update(extra)
    return out


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def write_report(rep: dict, out_dir, curve: ViolationCurve | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    if "table1" in rep:
        _write_csv(out_dir / "table1.csv", TABLE1_COLUMNS, [[r[c] for c in TABLE1_COLUMNS] for r in rep["table1"]])
    if "table2" in rep:
        _write_csv(out_dir / "table2.csv", TABLE2_COLUMNS, [[r[c] for c in TABLE2_COLUMNS] for r in rep["table2"]])
    if curve is not None:
        _write_csv(out_dir / "curve.csv", CURVE_COLUMNS, list(curve.rows()))
    return out_dir / "report.json"
