"""scikit-learn style front end for the conditional trajectory diffusion model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import problems
from .dataset import NormalizationStats, TrajectoryDataset
from .denoiser import DenoiserConfig
from .diffusion import sample_many
from .problems import Task
from .training import TrainConfig, train


class TrajectoryDiffusion(BaseEstimator):
    """Conditional DDPM over decision vectors, optionally trained with the violation penalty.

    ``fit(X, y)`` takes problem conditions ``X`` (n_samples, param_dim) and
    locally optimal decision vectors ``y`` (n_samples, dim), both in physical
    units. ``sample`` and ``predict`` return physical decision vectors.

    Parameters
    ----------
    task : Task
        Task the data belongs to; fixes dimensions and normalization boxes.
    constraint_aware : bool
        Add the normalized violation penalty to the diffusion loss.
    violation_weight : float
        Weight of the penalty term.
    omega : float
        Guidance weight used by ``predict``/``sample`` unless overridden.
    """

    def __init__(
        self,
        task: Task | None = None,
        constraint_aware: bool = True,
        violation_weight: float = 0.01,
        p_uncond: float = 0.1,
        n_gt: int = 10,
        mu_floor: float = 1e-3,
        epochs: int = 30,
        batch_size: int = 128,
        learning_rate: float = 1e-4,
        n_steps: int = 64,
        hidden_widths=(64, 64, 128),
        cond_encoder_widths=(32, 64),
        time_embed_dim: int = 64,
        omega: float = 1.0,
        random_state: int = 0,
    ):
        self.task = task
        self.constraint_aware = constraint_aware
        self.violation_weight = violation_weight
        self.p_uncond = p_uncond
        self.n_gt = n_gt
        self.mu_floor = mu_floor
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.hidden_widths = hidden_widths
        self.cond_encoder_widths = cond_encoder_widths
        self.time_embed_dim = time_embed_dim
        self.omega = omega
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            p_uncond=self.p_uncond,
            violation_weight=self.violation_weight,
            n_gt=self.n_gt,
            mu_floor=self.mu_floor,
            constraint_aware=self.constraint_aware,
            seed=self.random_state,
            K=self.n_steps,
        )

    def _check_task(self) -> Task:
        if not isinstance(self.task, Task):
            raise ValueError("task must be a trajdiff.problems.Task")
        return self.task

    def fit(self, X, y):
        task = self._check_task()
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if X.shape[1] != task.param_dim or y.shape[1] != task.dim:
            raise ValueError(
                f"expected X with {task.param_dim} columns and y with {task.dim}; got {X.shape[1]} and {y.shape[1]}"
            )
        stats = NormalizationStats.from_task(task)
        ds = TrajectoryDataset(task, stats.normalize_x(y), stats.normalize_y(X), stats)
        return self.fit_dataset(ds)

    def fit_dataset(self, dataset: TrajectoryDataset):
        """Fit on an already normalized dataset (its task overrides ``self.task``)."""
        task = dataset.task
        dcfg = DenoiserConfig.for_task(
            task,
            hidden_widths=self.hidden_widths,
            cond_encoder_widths=self.cond_encoder_widths,
            time_embed_dim=self.time_embed_dim,
        )
        res = train(dataset, self._train_config(), dcfg)
        self.task_ = task
        self.stats_ = dataset.stats
        self.model_ = res.model
        self.schedule_ = res.schedule
        self.loss_log_ = res.log
        self.n_features_in_ = task.param_dim
        return self

    def sample(self, X, n_samples: int = 1, omega: float | None = None, random_state=None, normalized=False):
        """Draw ``n_samples`` decision vectors per condition row (rows contiguous)."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} condition columns, got {X.shape[1]}")
        cond = self.stats_.normalize_y(X)
        seed = self.random_state if random_state is None else random_state
        w = self.omega if omega is None else omega
        samples, _ = sample_many(self.model_, cond, n_samples, w, self.schedule_, seed=seed)
        return samples if normalized else self.stats_.denormalize_x(samples.astype(np.float64))

    def predict(self, X):
        return self.sample(X, 1)

    def score(self, X, y=None):
        """Negative mean constraint violation of one sample per condition."""
        x = self.predict(X)
        return -float(np.mean(problems.violation_values(x, check_array(X), self.task_)))
