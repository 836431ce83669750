"""System models, margin functions, and benchmark instances shared by all filters.

Models are discrete-time with bounded control and disturbance boxes:
``x' = step(x, u, d)``. Every built-in model also carries a conservative
interval step that maps a state box (and optionally a control box) to a box
guaranteed to contain every reachable successor.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Callable, Optional

import numpy as np

from .intervals import Box, as_box, cos_interval, linear_image, sin_interval


class InputDomainError(ValueError):
    """A control or disturbance lies outside its admissible box."""


@dataclass(frozen=True)
class SystemModel:
    """Discrete-time uncertain system with box-bounded inputs.

    ``step`` must be deterministic and broadcast over leading state axes
    (states of shape (..., state_dim)); the built-in models do. ``interval_step``
    takes (state Box, control point or Box, disturbance Box) and must return a
    superset of the true one-step image. ``continuous_affine`` is an optional
    (drift, input-matrix) pair f(x), g(x) for control-affine models; when
    present, ``step`` is the forward-Euler discretization of f(x) + g(x) u with
    the disturbance entering additively on the highest-order derivative.
    """

    state_dim: int
    control_dim: int
    disturbance_dim: int
    dt: float
    step: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    control_set: Box
    disturbance_set: Box
    interval_step: Callable[[Box, object, Box], Box]
    continuous_affine: Optional[tuple[Callable, Callable]] = None
    name: str = ""

    def zero_disturbance(self) -> np.ndarray:
        return np.zeros(self.disturbance_dim)


def step(model: SystemModel, x, u, d) -> np.ndarray:
    """Validated single step: rejects controls/disturbances outside their boxes."""
    x = np.asarray(x, dtype=np.float64)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    d = np.atleast_1d(np.asarray(d, dtype=np.float64))
    if not model.control_set.contains(u):
        raise InputDomainError(f"control {u} outside admissible set")
    if not model.disturbance_set.contains(d):
        raise InputDomainError(f"disturbance {d} outside admissible set")
    return model.step(x, u, d)


def _input_channel(u, D: Box) -> tuple[float, float]:
    """Interval of (u + d) on the shared scalar input channel."""
    ub = as_box(u)
    lo, hi = float(ub.lower[0]), float(ub.upper[0])
    if D.dim:
        lo += float(D.lower[0])
        hi += float(D.upper[0])
    return lo, hi


def _scalar_inputs(u: np.ndarray, d: np.ndarray, has_d: bool):
    uu = u[..., 0]
    dd = d[..., 0] if has_d else 0.0
    return uu, dd


def make_double_integrator(u_max: float, d_max: float, dt: float) -> SystemModel:
    """1-d position/velocity benchmark: p' = p + v dt, v' = v + (u + d) dt."""
    if u_max <= 0:
        raise ValueError("u_max must be positive")
    if d_max < 0:
        raise ValueError("d_max must be nonnegative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    has_d = d_max > 0
    n_d = 1 if has_d else 0

    def step_fn(x, u, d):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        uu, dd = _scalar_inputs(u, d, has_d)
        p, v = x[..., 0], x[..., 1]
        return np.stack([p + v * dt, v + (uu + dd) * dt], axis=-1)

    def interval_fn(X: Box, u, D: Box) -> Box:
        wlo, whi = _input_channel(u, D)
        plo = X.lower[0] + X.lower[1] * dt
        phi = X.upper[0] + X.upper[1] * dt
        vlo = X.lower[1] + wlo * dt
        vhi = X.upper[1] + whi * dt
        return Box([plo, vlo], [phi, vhi])

    def drift(x):
        x = np.asarray(x, dtype=np.float64)
        return np.stack([x[..., 1], np.zeros_like(x[..., 1])], axis=-1)

    def input_map(x):
        return np.array([[0.0], [1.0]])

    return SystemModel(
        state_dim=2,
        control_dim=1,
        disturbance_dim=n_d,
        dt=dt,
        step=step_fn,
        control_set=Box([-u_max], [u_max]),
        disturbance_set=Box([-d_max], [d_max]) if has_d else Box([], []),
        interval_step=interval_fn,
        continuous_affine=(drift, input_map),
        name="double_integrator",
    )


def make_dubins_car(speed: float, omega_max: float, d_max: float, dt: float) -> SystemModel:
    """Planar unicycle at fixed speed; turn rate is the control, disturbance on heading rate."""
    if speed <= 0:
        raise ValueError("speed must be positive")
    if omega_max <= 0:
        raise ValueError("omega_max must be positive")
    if d_max < 0:
        raise ValueError("d_max must be nonnegative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    has_d = d_max > 0
    n_d = 1 if has_d else 0

    def step_fn(x, u, d):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        uu, dd = _scalar_inputs(u, d, has_d)
        px, py, th = x[..., 0], x[..., 1], x[..., 2]
        return np.stack(
            [
                px + speed * np.cos(th) * dt,
                py + speed * np.sin(th) * dt,
                th + (uu + dd) * dt,
            ],
            axis=-1,
        )

    def interval_fn(X: Box, u, D: Box) -> Box:
        wlo, whi = _input_channel(u, D)
        tlo, thi = float(X.lower[2]), float(X.upper[2])
        cl, cu = cos_interval(tlo, thi)
        sl, su = sin_interval(tlo, thi)
        return Box(
            [
                X.lower[0] + speed * cl * dt,
                X.lower[1] + speed * sl * dt,
                tlo + wlo * dt,
            ],
            [
                X.upper[0] + speed * cu * dt,
                X.upper[1] + speed * su * dt,
                thi + whi * dt,
            ],
        )

    def drift(x):
        x = np.asarray(x, dtype=np.float64)
        th = x[..., 2]
        return np.stack(
            [speed * np.cos(th), speed * np.sin(th), np.zeros_like(th)], axis=-1
        )

    def input_map(x):
        return np.array([[0.0], [0.0], [1.0]])

    return SystemModel(
        state_dim=3,
        control_dim=1,
        disturbance_dim=n_d,
        dt=dt,
        step=step_fn,
        control_set=Box([-omega_max], [omega_max]),
        disturbance_set=Box([-d_max], [d_max]) if has_d else Box([], []),
        interval_step=interval_fn,
        continuous_affine=(drift, input_map),
        name="dubins_car",
    )


def make_inverted_pendulum(torque_max: float, d_max: float, dt: float) -> SystemModel:
    """Normalized pendulum: th'' = sin(th) + u + d (unit mass/length/gravity)."""
    if torque_max <= 0:
        raise ValueError("torque_max must be positive")
    if d_max < 0:
        raise ValueError("d_max must be nonnegative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    has_d = d_max > 0
    n_d = 1 if has_d else 0

    def step_fn(x, u, d):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        uu, dd = _scalar_inputs(u, d, has_d)
        th, om = x[..., 0], x[..., 1]
        return np.stack(
            [th + om * dt, om + (np.sin(th) + uu + dd) * dt], axis=-1
        )

    def interval_fn(X: Box, u, D: Box) -> Box:
        wlo, whi = _input_channel(u, D)
        tlo, thi = float(X.lower[0]), float(X.upper[0])
        sl, su = sin_interval(tlo, thi)
        return Box(
            [
                tlo + X.lower[1] * dt,
                X.lower[1] + (sl + wlo) * dt,
            ],
            [
                thi + X.upper[1] * dt,
                X.upper[1] + (su + whi) * dt,
            ],
        )

    def drift(x):
        x = np.asarray(x, dtype=np.float64)
        return np.stack([x[..., 1], np.sin(x[..., 0])], axis=-1)

    def input_map(x):
        return np.array([[0.0], [1.0]])

    return SystemModel(
        state_dim=2,
        control_dim=1,
        disturbance_dim=n_d,
        dt=dt,
        step=step_fn,
        control_set=Box([-torque_max], [torque_max]),
        disturbance_set=Box([-d_max], [d_max]) if has_d else Box([], []),
        interval_step=interval_fn,
        continuous_affine=(drift, input_map),
        name="inverted_pendulum",
    )


def make_linear_model(
    A: np.ndarray,
    B: np.ndarray,
    control_set: Box,
    dist_box: Box,
    dt: float = 1.0,
    name: str = "linear",
) -> SystemModel:
    """Discrete linear system x' = A x + B u + d with d in a full-state box."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n, m = B.shape
    if A.shape != (n, n):
        raise ValueError("A and B have inconsistent shapes")
    if control_set.dim != m:
        raise ValueError("control set dimension does not match B")
    if dist_box.dim not in (0, n):
        raise ValueError("disturbance box must be 0-d or state-dimensional")

    def step_fn(x, u, d):
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        out = x @ A.T + u @ B.T
        if dist_box.dim:
            out = out + d
        return out

    def interval_fn(X: Box, u, D: Box) -> Box:
        ub = as_box(u)
        out = linear_image(A, X).add(linear_image(B, ub))
        if D.dim:
            out = out.add(D)
        return out

    return SystemModel(
        state_dim=n,
        control_dim=m,
        disturbance_dim=dist_box.dim,
        dt=dt,
        step=step_fn,
        control_set=control_set,
        disturbance_set=dist_box,
        interval_step=interval_fn,
        continuous_affine=None,
        name=name,
    )


class MarginFunction:
    """Real-valued state function g; the failure set is {x : g(x) < 0}.

    ``box_lower`` (when available) returns a sound lower bound of g over a box,
    used by the rollout filters for conservative tube checks.
    """

    def __init__(self, fn, gradient=None, box_lower=None, name: str = ""):
        self._fn = fn
        self._gradient = gradient
        self._box_lower = box_lower
        self.name = name

    def __call__(self, x):
        return self._fn(np.asarray(x, dtype=np.float64))

    @property
    def has_gradient(self) -> bool:
        return self._gradient is not None

    def gradient(self, x) -> np.ndarray:
        if self._gradient is None:
            raise ValueError(f"margin {self.name!r} has no gradient")
        return np.asarray(self._gradient(np.asarray(x, dtype=np.float64)), dtype=np.float64)

    @property
    def has_box_lower(self) -> bool:
        return self._box_lower is not None

    def box_lower(self, box: Box) -> float:
        if self._box_lower is None:
            raise ValueError(f"margin {self.name!r} has no box lower bound")
        return float(self._box_lower(box))


def margin_halfspace(normal, offset: float) -> MarginFunction:
    """g(x) = normal . x - offset; failure is the halfspace normal . x < offset."""
    n = np.asarray(normal, dtype=np.float64)
    if not np.any(n != 0):
        raise ValueError("halfspace normal must be nonzero")
    offset = float(offset)

    def fn(x):
        return x @ n - offset

    def grad(x):
        return np.broadcast_to(n, x.shape).copy() if x.ndim > 1 else n.copy()

    def box_lower(box: Box) -> float:
        return -box.support(-n) - offset

    return MarginFunction(fn, grad, box_lower, name="halfspace")


def margin_keepout_ball(center, radius: float) -> MarginFunction:
    """Signed distance to a keep-out ball: g(x) = ||x - c|| - r."""
    c = np.asarray(center, dtype=np.float64)
    if radius <= 0:
        raise ValueError("radius must be positive")

    def fn(x):
        return np.linalg.norm(x - c, axis=-1) - radius

    def grad(x):
        diff = x - c
        nrm = np.linalg.norm(diff)
        if nrm == 0.0:  # subgradient at the center
            return np.zeros_like(diff)
        return diff / nrm

    def box_lower(box: Box) -> float:
        nearest = np.clip(c, box.lower, box.upper)
        return float(np.linalg.norm(nearest - c)) - radius

    return MarginFunction(fn, grad, box_lower, name="keepout_ball")


def margin_min(margins: list[MarginFunction]) -> MarginFunction:
    """Pointwise minimum; encodes the union of the children's failure sets."""
    if not margins:
        raise ValueError("margin_min needs at least one margin")

    def fn(x):
        vals = [m(x) for m in margins]
        out = vals[0]
        for v in vals[1:]:
            out = np.minimum(out, v)
        return out

    grad = None
    if all(m.has_gradient for m in margins):

        def grad(x):  # noqa: F811 - gradient of the first active margin
            vals = [float(m(x)) for m in margins]
            return margins[int(np.argmin(vals))].gradient(x)

    box_lower = None
    if all(m.has_box_lower for m in margins):

        def box_lower(box):  # noqa: F811
            return min(m.box_lower(box) for m in margins)

    return MarginFunction(fn, grad, box_lower, name="min")


def discretize_box(box: Box, counts) -> list[np.ndarray]:
    """Regular lattice over a box, corners included; a count of 1 gives the center.

    Points are returned in row-major order (first dimension slowest).
    """
    counts = [int(c) for c in np.atleast_1d(counts)]
    if len(counts) != box.dim:
        raise ValueError("counts length must match box dimension")
    if any(c < 1 for c in counts):
        raise ValueError("counts must be at least 1 per dimension")
    if box.dim == 0:
        return [np.zeros(0)]
    axes = []
    for lo, hi, c in zip(box.lower, box.upper, counts):
        if c == 1:
            axes.append(np.array([0.5 * (lo + hi)]))
        else:
            axes.append(np.linspace(lo, hi, c))
    return [np.array(pt) for pt in product(*axes)]
