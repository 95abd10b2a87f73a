"""Training data: generation with the local solver, normalization and storage.

On disk a dataset is a directory holding ``meta.json`` and ``data.f32``
(little-endian float32, one row per pair laid out as ``[y | x]``, both
normalized to [-1, 1]).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from . import problems
from .exceptions import (
    EmptyDatasetError,
    MissingFileError,
    RowCountMismatchError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .problems import Task
from .solver import SolveOptions, solve

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    """Affine maps from the physical boxes onto [-1, 1]."""

    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray

    def __post_init__(self):
        for lo, hi in ((self.x_lo, self.x_hi), (self.y_lo, self.y_hi)):
            if lo.shape != hi.shape or not np.all(hi > lo):
                raise ValueError("normalization bounds need hi > lo elementwise")

    @classmethod
    def from_task(cls, task: Task) -> "NormalizationStats":
        x_lo, x_hi = task.x_bounds()
        y_lo, y_hi = task.y_bounds()
        return cls(np.array(x_lo, float), np.array(x_hi, float), np.array(y_lo, float), np.array(y_hi, float))

    def __eq__(self, other):
        if not isinstance(other, NormalizationStats):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in ("x_lo", "x_hi", "y_lo", "y_hi")
        )

    @staticmethod
    def _fwd(v, lo, hi):
        return 2.0 * (v - lo) / (hi - lo) - 1.0

    @staticmethod
    def _inv(v, lo, hi):
        return lo + (v + 1.0) * 0.5 * (hi - lo)

    def normalize_x(self, x):
        return self._fwd(np.asarray(x, float), self.x_lo, self.x_hi)

    def denormalize_x(self, x):
        return self._inv(np.asarray(x, float), self.x_lo, self.x_hi)

    def normalize_y(self, y):
        return self._fwd(np.asarray(y, float), self.y_lo, self.y_hi)

    def denormalize_y(self, y):
        return self._inv(np.asarray(y, float), self.y_lo, self.y_hi)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("x_lo", "x_hi", "y_lo", "y_hi")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(*(np.asarray(d[k], float) for k in ("x_lo", "x_hi", "y_lo", "y_hi")))


def normalize(x_physical, stats: NormalizationStats):
    return stats.normalize_x(x_physical)


def denormalize(x_normalized, stats: NormalizationStats):
    return stats.denormalize_x(x_normalized)


@dataclass(eq=False)
class TrajectoryDataset:
    """Normalized ``(x*, y)`` pairs. Arrays are stored as float32, as on disk."""

    task: Task
    x: np.ndarray
    y: np.ndarray
    stats: NormalizationStats
    provenance: dict = field(default_factory=dict)
    problem_index: np.ndarray | None = None
    kind: str = "trajectory_dataset"

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.ascontiguousarray(self.y, dtype=np.float32)
        if self.x.ndim != 2 or self.x.shape[1] != self.task.dim:
            raise ShapeMismatchError(f"x has shape {self.x.shape}, task expects width {self.task.dim}")
        if self.y.shape != (self.x.shape[0], self.task.param_dim):
            raise ShapeMismatchError(f"y has shape {self.y.shape}, expected ({len(self.x)}, {self.task.param_dim})")
        if self.problem_index is not None:
            self.problem_index = np.asarray(self.problem_index, dtype=np.int32)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        same_index = (self.problem_index is None and other.problem_index is None) or (
            self.problem_index is not None
            and other.problem_index is not None
            and np.array_equal(self.problem_index, other.problem_index)
        )
        return (
            self.task == other.task
            and self.kind == other.kind
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and self.stats == other.stats
            and self.provenance == other.provenance
            and same_index
        )

    def problem_ids(self) -> np.ndarray:
        """Integer id per row; rows sharing a condition ``y`` share an id (first-seen order)."""
        _, first, inverse = np.unique(self.y, axis=0, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first))
        return order[inverse.ravel()]

    def physical_x(self) -> np.ndarray:
        return self.stats.denormalize_x(self.x.astype(np.float64))

    def physical_y(self) -> np.ndarray:
        return self.stats.denormalize_y(self.y.astype(np.float64))

    def subset(self, rows) -> "TrajectoryDataset":
        rows = np.asarray(rows)
        return TrajectoryDataset(
            task=self.task,
            x=self.x[rows],
            y=self.y[rows],
            stats=self.stats,
            provenance=dict(self.provenance),
            problem_index=None if self.problem_index is None else self.problem_index[rows],
            kind=self.kind,
        )


# ---------------------------------------------------------------------------
# generation


def _solve_problem(task: Task, seed_seq: np.random.SeedSequence, n_guesses: int, opts: SolveOptions):
    rng = np.random.default_rng(seed_seq)
    y = problems.sample_problem(task, rng).to_array()
    out = []
    for _ in range(n_guesses):
        x0 = problems.sample_initial_guess(task, rng)
        res = solve(y, task, x0, opts)
        out.append((res.status.value, res.x_star if res.locally_optimal else None, res.iterations))
    return y, out


def options_digest(opts: SolveOptions) -> str:
    blob = json.dumps(opts.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def generate(
    task: Task,
    n_problems: int,
    n_guesses: int,
    seed: int = 0,
    opts: SolveOptions | None = None,
    n_jobs: int = 1,
) -> TrajectoryDataset:
    """Sample problems, solve each from uniform guesses and keep certified optima.

    A solution is kept only if its float32-rounded stored form still satisfies
    the feasibility tolerance, so every stored pair is feasible as loaded.
    """
    if n_problems < 1 or n_guesses < 1:
        raise ValueError("n_problems and n_guesses must be >= 1")
    opts = opts or SolveOptions()
    stats = NormalizationStats.from_task(task)
    children = np.random.SeedSequence(seed).spawn(n_problems)
    results = Parallel(n_jobs=n_jobs)(delayed(_solve_problem)(task, ss, n_guesses, opts) for ss in children)

    xs, ys = [], []
    counts = {"solves": 0, "locally_optimal": 0, "rounding_rejected": 0}
    status_counts: dict[str, int] = {}
    for y, runs in results:
        y_norm = stats.normalize_y(y).astype(np.float32)
        y_phys = stats.denormalize_y(y_norm.astype(np.float64))
        for status, x_star, _ in runs:
            counts["solves"] += 1
            status_counts[status] = status_counts.get(status, 0) + 1
            if x_star is None:
                continue
            counts["locally_optimal"] += 1
            x_norm = stats.normalize_x(x_star).astype(np.float32)
            stored = stats.denormalize_x(x_norm.astype(np.float64))
            if problems.violation_values(stored, y_phys, task) > opts.feas_tol:
                counts["rounding_rejected"] += 1
                continue
            xs.append(x_norm)
            ys.append(y_norm)
    if not xs:
        raise EmptyDatasetError("empty dataset")
    logger.info("generated %d pairs from %d solves", len(xs), counts["solves"])
    provenance = {
        "seed": seed,
        "n_problems": n_problems,
        "n_guesses": n_guesses,
        "solver_options_digest": options_digest(opts),
        "counts": counts,
        "status_counts": dict(sorted(status_counts.items())),
    }
    return TrajectoryDataset(task, np.stack(xs), np.stack(ys), stats, provenance)


def split(dataset: TrajectoryDataset, test_fraction: float = 0.1, seed: int = 0):
    """Problem-level split: every pair sharing a condition lands on one side."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    ids = dataset.problem_ids()
    n_prob = int(ids.max()) + 1
    if n_prob < 2:
        raise ValueError("need at least 2 distinct problems to split")
    n_test = min(max(int(round(test_fraction * n_prob)), 1), n_prob - 1)
    perm = np.random.default_rng(seed).permutation(n_prob)
    test_mask = np.isin(ids, perm[:n_test])
    return dataset.subset(np.flatnonzero(~test_mask)), dataset.subset(np.flatnonzero(test_mask))


# ---------------------------------------------------------------------------
# persistence


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save(dataset: TrajectoryDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rows = np.concatenate([dataset.y, dataset.x], axis=1).astype(_F32)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": dataset.kind,
        "task": dataset.task.to_dict(),
        "x_dim": dataset.task.dim,
        "y_dim": dataset.task.param_dim,
        "n_rows": len(dataset),
        "stats": dataset.stats.to_dict(),
        "provenance": dataset.provenance,
        "has_problem_index": dataset.problem_index is not None,
    }
    _atomic_write(path / "data.f32", rows.tobytes())
    if dataset.problem_index is not None:
        _atomic_write(path / "problem_index.i32", dataset.problem_index.astype("<i4").tobytes())
    _atomic_write(path / "meta.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return path


def load(path, expected_task: Task | None = None) -> TrajectoryDataset:
    path = Path(path)
    meta_path, data_path = path / "meta.json", path / "data.f32"
    for p in (meta_path, data_path):
        if not p.is_file():
            raise MissingFileError(f"missing file: {p}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"version mismatch: file has {meta.get('format_version')!r}, reader supports {FORMAT_VERSION}"
        )
    task = Task.from_dict(meta["task"])
    if meta["x_dim"] != task.dim or meta["y_dim"] != task.param_dim:
        raise ShapeMismatchError("dims in meta.json disagree with the task description")
    if expected_task is not None and (expected_task.dim, expected_task.param_dim) != (task.dim, task.param_dim):
        raise ShapeMismatchError(
            f"dataset dims ({task.dim}, {task.param_dim}) do not match expected "
            f"({expected_task.dim}, {expected_task.param_dim})"
        )
    width = task.dim + task.param_dim
    raw = np.frombuffer(data_path.read_bytes(), dtype=_F32)
    if raw.size != meta["n_rows"] * width:
        raise RowCountMismatchError(
            f"row-count mismatch: meta declares {meta['n_rows']} rows of width {width}, file holds {raw.size} values"
        )
    rows = raw.reshape(meta["n_rows"], width).astype(np.float32)
    index = None
    if meta.get("has_problem_index"):
        idx_path = path / "problem_index.i32"
        if not idx_path.is_file():
            raise MissingFileError(f"missing file: {idx_path}")
        index = np.frombuffer(idx_path.read_bytes(), dtype="<i4").astype(np.int32)
        if index.size != meta["n_rows"]:
            raise RowCountMismatchError("row-count mismatch in problem_index.i32")
    return TrajectoryDataset(
        task=task,
        x=rows[:, task.param_dim :],
        y=rows[:, : task.param_dim],
        stats=NormalizationStats.from_dict(meta["stats"]),
        provenance=meta["provenance"],
        problem_index=index,
        kind=meta.get("kind", "trajectory_dataset"),
    )
