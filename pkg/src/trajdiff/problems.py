"""Parameterized trajectory-optimization tasks.

Two tasks are provided: a planar single-integrator end effector moving from
the table center to a corner goal (``TABLETOP``) and two unicycle cars that
swap diagonal corners (``TWO_CAR``). Both share the decision layout
``x = (t, controls...)`` and minimize the duration ``t`` subject to obstacle,
inter-car and goal-reaching constraints.

All numerical routines accept a single vector or a batch (leading axis) and
operate in float64. Gradients are computed with a hand-written adjoint pass
through the forward-Euler rollout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NonFiniteError


class TaskKind(str, enum.Enum):
    TABLETOP = "tabletop"
    TWO_CAR = "two_car"


@dataclass(frozen=True)
class Task:
    """Geometry, bounds and discretization of one task family."""

    kind: TaskKind
    horizon: int
    t_min: float = 0.1
    t_max: float = 4.0
    r_lo: float = 0.05
    r_hi: float = 0.15
    r_safe: float = 0.0
    # two-car only
    d_min: float = 0.1
    v_max: float = 1.0
    a_max: float = 1.0
    omega_max: float = 2.0
    # tabletop only
    u_max: float = 1.0
    corner: float = 0.8
    corner_half_width: float = 0.1
    tabletop_start: tuple = (0.0, 0.0)
    car_starts: tuple = ((-0.8, -0.8, 0.0, np.pi / 4), (0.8, -0.8, 0.0, 3 * np.pi / 4))
    car_goals: tuple = ((0.8, 0.8), (-0.8, 0.8))
    workspace: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if not 0 < self.r_lo <= self.r_hi:
            raise ValueError("need 0 < r_lo <= r_hi")

    @property
    def controls_per_step(self) -> int:
        return 2 if self.kind is TaskKind.TABLETOP else 4

    @property
    def n_obstacles(self) -> int:
        return 4 if self.kind is TaskKind.TABLETOP else 2

    @property
    def n_points(self) -> int:
        """Number of moving points (end effector or cars)."""
        return 1 if self.kind is TaskKind.TABLETOP else 2

    @property
    def dim(self) -> int:
        return 1 + self.controls_per_step * self.horizon

    @property
    def param_dim(self) -> int:
        obs = 3 * self.n_obstacles
        return obs + 2 if self.kind is TaskKind.TABLETOP else obs

    @property
    def n_ineq(self) -> int:
        per_step = self.n_points * self.n_obstacles
        if self.kind is TaskKind.TWO_CAR:
            per_step += 1
        return self.horizon * per_step

    @property
    def n_eq(self) -> int:
        return 2 * self.n_points

    def x_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if "x_bounds" not in self._cache:
            if self.kind is TaskKind.TABLETOP:
                step = np.array([self.u_max, self.u_max])
            else:
                step = np.array([self.a_max, self.omega_max, self.a_max, self.omega_max])
            hi = np.concatenate([[self.t_max], np.tile(step, self.horizon)])
            lo = np.concatenate([[self.t_min], -np.tile(step, self.horizon)])
            lo.setflags(write=False)
            hi.setflags(write=False)
            self._cache["x_bounds"] = (lo, hi)
        return self._cache["x_bounds"]

    def y_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.workspace
        n_pos = 2 * self.n_obstacles + (2 if self.kind is TaskKind.TABLETOP else 0)
        lo = np.concatenate([np.full(n_pos, -w), np.full(self.n_obstacles, self.r_lo)])
        hi = np.concatenate([np.full(n_pos, w), np.full(self.n_obstacles, self.r_hi)])
        return lo, hi

    def start_states(self) -> np.ndarray:
        """Fixed start state, shape (P, 2) for tabletop or (P, 4) for cars."""
        if self.kind is TaskKind.TABLETOP:
            return np.array([self.tabletop_start], dtype=float)
        return np.array(self.car_starts, dtype=float)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "horizon": self.horizon,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "r_lo": self.r_lo,
            "r_hi": self.r_hi,
            "r_safe": self.r_safe,
            "d_min": self.d_min,
            "v_max": self.v_max,
            "a_max": self.a_max,
            "omega_max": self.omega_max,
            "u_max": self.u_max,
            "corner": self.corner,
            "corner_half_width": self.corner_half_width,
            "tabletop_start": list(self.tabletop_start),
            "car_starts": [list(s) for s in self.car_starts],
            "car_goals": [list(g) for g in self.car_goals],
            "workspace": self.workspace,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        d = dict(d)
        if "tabletop_start" in d:
            d["tabletop_start"] = tuple(d["tabletop_start"])
        if "car_starts" in d:
            d["car_starts"] = tuple(tuple(s) for s in d["car_starts"])
        if "car_goals" in d:
            d["car_goals"] = tuple(tuple(g) for g in d["car_goals"])
        return cls(**d)


def tabletop(horizon: int = 80, **overrides) -> Task:
    return Task(TaskKind.TABLETOP, horizon, **overrides)


def two_car(horizon: int = 40, **overrides) -> Task:
    return Task(TaskKind.TWO_CAR, horizon, **overrides)


def make_task(kind, horizon: int | None = None, **overrides) -> Task:
    kind = TaskKind(kind)
    if kind is TaskKind.TABLETOP:
        return tabletop(80 if horizon is None else horizon, **overrides)
    return two_car(40 if horizon is None else horizon, **overrides)


@dataclass
class ProblemParams:
    """Condition ``y`` of one problem instance.

    ``goal`` is ``None`` for the two-car task, whose goals are fixed.
    """

    centers: np.ndarray
    radii: np.ndarray
    goal: np.ndarray | None = None

    def to_array(self) -> np.ndarray:
        parts = [] if self.goal is None else [np.asarray(self.goal, float).ravel()]
        parts += [np.asarray(self.centers, float).ravel(), np.asarray(self.radii, float).ravel()]
        return np.concatenate(parts)

    @classmethod
    def from_array(cls, y, task: Task) -> "ProblemParams":
        y = np.asarray(y, dtype=float)
        if y.shape != (task.param_dim,):
            raise ValueError(f"expected params of length {task.param_dim}, got {y.shape}")
        o = task.n_obstacles
        goal = None
        if task.kind is TaskKind.TABLETOP:
            goal, y = y[:2].copy(), y[2:]
        return cls(centers=y[: 2 * o].reshape(o, 2).copy(), radii=y[2 * o :].copy(), goal=goal)


@dataclass
class ViolationReport:
    inequality_terms: np.ndarray
    equality_terms: np.ndarray
    total: float


# ---------------------------------------------------------------------------
# batched core


def _as_batch(a, width: int, what: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.ndim != 2 or a.shape[1] != width:
        raise ValueError(f"{what}: expected trailing dimension {width}, got shape {a.shape}")
    return a, single


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite input")


def _split_params(y: np.ndarray, task: Task):
    """Return goals (B, P, 2), centers (B, O, 2) and radii (B, O)."""
    b, o = y.shape[0], task.n_obstacles
    if task.kind is TaskKind.TABLETOP:
        goals = y[:, None, :2]
        y = y[:, 2:]
    else:
        goals = np.broadcast_to(np.asarray(task.car_goals, float), (b, 2, 2))
    return goals, y[:, : 2 * o].reshape(b, o, 2), y[:, 2 * o :]


def _rollout(x: np.ndarray, task: Task):
    """Forward Euler. Returns states (B, T+1, P, S) and the unclipped-velocity mask."""
    b, T = x.shape[0], task.horizon
    dt = x[:, 0] / T
    start = task.start_states()
    if task.kind is TaskKind.TABLETOP:
        u = x[:, 1:].reshape(b, T, 2)
        steps = np.cumsum(u * dt[:, None, None], axis=1)
        states = np.empty((b, T + 1, 1, 2))
        states[:, 0, 0] = start[0]
        states[:, 1:, 0] = start[0] + steps
        return states, None
    ctrl = x[:, 1:].reshape(b, T, 2, 2)  # (step, car, [a, omega])
    acc = ctrl[..., 0] * dt[:, None, None]
    turn = ctrl[..., 1] * dt[:, None, None]
    px, py, v, th = (np.empty((b, T + 1, 2)) for _ in range(4))
    px[:, 0], py[:, 0], v[:, 0], th[:, 0] = start.T
    th[:, 1:] = th[:, :1] + np.cumsum(turn, axis=1)
    pre = np.empty((b, T, 2))
    vmax = task.v_max
    for i in range(T):
        pre[:, i] = v[:, i] + acc[:, i]
        v[:, i + 1] = np.clip(pre[:, i], 0.0, vmax)
    step = v[:, :-1] * dt[:, None, None]
    px[:, 1:] = px[:, :1] + np.cumsum(step * np.cos(th[:, :-1]), axis=1)
    py[:, 1:] = py[:, :1] + np.cumsum(step * np.sin(th[:, :-1]), axis=1)
    mask = (pre >= 0.0) & (pre <= vmax)
    states = np.stack([px, py, v, th], axis=-1)
    return states, mask


def _rollout_vjp(x, states, mask, pbar, task: Task) -> np.ndarray:
    """Pull back position cotangents ``pbar`` (B, T, P, 2) for steps 1..T onto x."""
    b, T = x.shape[0], task.horizon
    dt = x[:, 0] / T
    xbar = np.zeros_like(x)
    if task.kind is TaskKind.TABLETOP:
        u = x[:, 1:].reshape(b, T, 2)
        # p_i = start + dt * sum_{j<i} u_j  ->  dp_i/du_j = dt for j < i
        tail = np.cumsum(pbar[:, ::-1, 0], axis=1)[:, ::-1]  # tail[j] = sum_{i>=j} pbar[i]
        xbar[:, 1:] = (tail * dt[:, None, None]).reshape(b, -1)
        xbar[:, 0] = np.einsum("btk,btk->b", tail, u) / T
        if not np.all(np.isfinite(xbar)):
            raise NonFiniteError(f"non-finite gradient at timestep {_first_bad_step(tail)}")
        return xbar

    ctrl = x[:, 1:].reshape(b, T, 2, 2)
    v, th = states[:, :-1, :, 2], states[:, :-1, :, 3]  # values entering step i
    # position cotangents are carried unchanged backwards: tail sums
    tail = np.cumsum(pbar[:, ::-1], axis=1)[:, ::-1]  # (B, T, P, 2)
    if not np.all(np.isfinite(tail)):
        raise NonFiniteError(f"non-finite gradient at timestep {_first_bad_step(tail)}")
    c, s = np.cos(th), np.sin(th)
    along = c * tail[..., 0] + s * tail[..., 1]
    perp = -s * tail[..., 0] + c * tail[..., 1]
    d = dt[:, None, None]
    # theta_{i+1} cotangent = sum_{m > i} dt * v_m * perp_m
    th_src = d * v * perp
    th_next = np.cumsum(th_src[:, ::-1], axis=1)[:, ::-1] - th_src
    # v_{i+1} cotangent follows the masked recurrence vb_i = dt*along_i + mask_i*vb_{i+1}
    v_next = np.empty((b, T, 2))
    vb = np.zeros((b, 2))
    for i in range(T - 1, -1, -1):
        v_next[:, i] = vb
        vb = d[:, 0] * along[:, i] + np.where(mask[:, i], vb, 0.0)
    v_in = np.where(mask, v_next, 0.0)
    cbar = np.stack([d * v_in, d * th_next], axis=-1)
    dtbar = np.sum(v * along + ctrl[..., 0] * v_in + ctrl[..., 1] * th_next, axis=(1, 2))
    xbar[:, 0] = dtbar / T
    xbar[:, 1:] = cbar.reshape(b, -1)
    return xbar


def _first_bad_step(a: np.ndarray) -> int:
    bad = ~np.isfinite(a.reshape(a.shape[0], a.shape[1], -1)).all(axis=(0, 2))
    return int(np.argmax(bad)) + 1


def _constraints(x, y, task: Task):
    states, mask = _rollout(x, task)
    if not np.all(np.isfinite(states)):
        step = int(np.argmax(~np.isfinite(states.reshape(states.shape[0], states.shape[1], -1)).all(axis=(0, 2))))
        raise NonFiniteError(f"non-finite state at timestep {step}")
    goals, centers, radii = _split_params(y, task)
    pos = states[:, 1:, :, :2]  # (B, T, P, 2)
    diff = pos[:, :, :, None, :] - centers[:, None, None, :, :]  # (B, T, P, O, 2)
    reach = (radii + task.r_safe) ** 2
    g_obs = reach[:, None, None, :] - np.sum(diff**2, axis=-1)  # (B, T, P, O)
    b, T = x.shape[0], task.horizon
    if task.kind is TaskKind.TABLETOP:
        g = g_obs.reshape(b, -1)
        sep = None
    else:
        sep = pos[:, :, 0] - pos[:, :, 1]  # (B, T, 2)
        g_car = task.d_min**2 - np.sum(sep**2, axis=-1)
        g = np.concatenate([g_obs.reshape(b, T, -1), g_car[:, :, None]], axis=2).reshape(b, -1)
    h = (pos[:, -1] - goals).reshape(b, -1)
    return g, h, (states, mask, diff, sep)


def _constraints_vjp(x, cache, gbar, hbar, task: Task) -> np.ndarray:
    states, mask, diff, sep = cache
    b, T, P, O = x.shape[0], task.horizon, task.n_points, task.n_obstacles
    if task.kind is TaskKind.TABLETOP:
        gb_obs = gbar.reshape(b, T, P, O)
    else:
        gb = gbar.reshape(b, T, P * O + 1)
        gb_obs = gb[:, :, : P * O].reshape(b, T, P, O)
    pbar = -2.0 * np.einsum("btpo,btpoc->btpc", gb_obs, diff)
    if task.kind is TaskKind.TWO_CAR:
        w = -2.0 * gb[:, :, -1:] * sep  # d g_car / d p1
        pbar[:, :, 0] += w
        pbar[:, :, 1] -= w
    pbar[:, -1] += hbar.reshape(b, P, 2)
    return _rollout_vjp(x, states, mask, pbar, task)


# ---------------------------------------------------------------------------
# public operations


def rollout(x, task: Task) -> np.ndarray:
    """State trajectory for decision vector(s) ``x``.

    Tabletop states are ``(p_x, p_y)``; two-car states are ``(p_x, p_y, v, theta)``
    per car. Output shape is ``(T+1, P, S)`` (with a leading batch axis if ``x``
    is 2-D).
    """
    xb, single = _as_batch(x, task.dim, "x")
    _check_finite(xb)
    states, _ = _rollout(xb, task)
    return states[0] if single else states


def objective(x, y=None) -> float | np.ndarray:
    """Duration ``t``; the cost is the same for both tasks."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    return x[..., 0] if x.ndim > 1 else float(x[0])


def objective_gradient(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    grad[..., 0] = 1.0
    return grad


def constraints(x, y, task: Task) -> tuple[np.ndarray, np.ndarray]:
    """Inequality values ``g`` (<= 0 feasible) and equality residuals ``h``."""
    xb, single = _as_batch(x, task.dim, "x")
    yb, _ = _as_batch(y, task.param_dim, "y")
    _check_finite(xb)
    yb = np.broadcast_to(yb, (xb.shape[0], yb.shape[1]))
    g, h, _ = _constraints(xb, yb, task)
    return (g[0], h[0]) if single else (g, h)


def constraints_vjp(x, y, task: Task, g_weights, h_weights) -> np.ndarray:
    """Gradient of ``g_weights . g + h_weights . h`` with respect to x."""
    xb, single = _as_batch(x, task.dim, "x")
    yb, _ = _as_batch(y, task.param_dim, "y")
    _check_finite(xb)
    yb = np.broadcast_to(yb, (xb.shape[0], yb.shape[1]))
    _, _, cache = _constraints(xb, yb, task)
    gw = np.broadcast_to(np.asarray(g_weights, float), (xb.shape[0], task.n_ineq))
    hw = np.broadcast_to(np.asarray(h_weights, float), (xb.shape[0], task.n_eq))
    grad = _constraints_vjp(xb, cache, gw, hw, task)
    return grad[0] if single else grad


def constraint_jacobians(x, y, task: Task) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Values and full Jacobians ``(g, h, dg/dx, dh/dx)`` at a single point."""
    x = np.asarray(x, dtype=float)
    m = task.n_ineq + task.n_eq
    xs = np.broadcast_to(x, (m, x.size))
    ys = np.broadcast_to(np.asarray(y, float), (m, task.param_dim))
    g, h, cache = _constraints(np.ascontiguousarray(xs), ys, task)
    eye = np.eye(m)
    jac = _constraints_vjp(xs, cache, eye[:, : task.n_ineq], eye[:, task.n_ineq :], task)
    return g[0], h[0], jac[: task.n_ineq], jac[task.n_ineq :]


def violation_values(x, y, task: Task, with_grad: bool = False):
    """Batched total violation ``V`` (and optionally its gradient).

    Unlike :func:`violation` this skips building a report and is the routine
    used inside training loops.
    """
    xb, single = _as_batch(x, task.dim, "x")
    yb, _ = _as_batch(y, task.param_dim, "y")
    _check_finite(xb)
    yb = np.broadcast_to(yb, (xb.shape[0], yb.shape[1]))
    g, h, cache = _constraints(xb, yb, task)
    total = np.maximum(g, 0.0).sum(axis=1) + np.abs(h).sum(axis=1)
    if not with_grad:
        return total[0] if single else total
    grad = _constraints_vjp(xb, cache, (g > 0).astype(float), np.sign(h), task)
    return (total[0], grad[0]) if single else (total, grad)


def violation(x, y, task: Task) -> ViolationReport:
    g, h = constraints(x, y, task)
    if g.ndim != 1:
        raise ValueError("violation() takes a single decision vector; use violation_values for batches")
    ineq = np.maximum(g, 0.0)
    eq = np.abs(h)
    return ViolationReport(ineq, eq, float(ineq.sum() + eq.sum()))


def violation_gradient(x, y, task: Task) -> np.ndarray:
    """Exact gradient of ``V`` with respect to x; 0 is used at max/abs kinks."""
    return violation_values(x, y, task, with_grad=True)[1]


# ---------------------------------------------------------------------------
# sampling


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_problem(task: Task, rng=None) -> ProblemParams:
    """Draw a random problem instance with obstacles between start and goal."""
    rng = _as_rng(rng)
    if task.kind is TaskKind.TABLETOP:
        signs = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
        corner = signs[rng.integers(4)] * task.corner
        goal = corner + rng.uniform(-task.corner_half_width, task.corner_half_width, 2)
        anchors = np.array([task.tabletop_start, goal])
    else:
        goal = None
        anchors = np.concatenate([np.asarray(task.car_starts)[:, :2], np.asarray(task.car_goals)])
    lo, hi = anchors.min(axis=0), anchors.max(axis=0)

    centers = np.empty((task.n_obstacles, 2))
    radii = np.empty(task.n_obstacles)
    for j in range(task.n_obstacles):
        for _ in range(1000):
            r = rng.uniform(task.r_lo, task.r_hi)
            c = rng.uniform(lo, hi)
            if np.all(np.linalg.norm(anchors - c, axis=1) > r + task.r_safe):
                centers[j], radii[j] = c, r
                break
        else:
            raise RuntimeError("cannot place obstacles")
    return ProblemParams(centers=centers, radii=radii, goal=goal)


def sample_initial_guess(task: Task, rng=None) -> np.ndarray:
    rng = _as_rng(rng)
    lo, hi = task.x_bounds()
    return rng.uniform(lo, hi)
