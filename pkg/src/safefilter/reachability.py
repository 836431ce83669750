"""Grid dynamic-programming solver for the discrete min-max safety recursion.

The solver iterates, at every grid node x,

    V_new(x) = min( g(x), max_u min_d V(f(x, u, d)) )

from V = g until the sup-norm change drops below tolerance. The converged
value function encodes the maximal safe set as its nonnegative region and an
optimal safety policy as the argmax over control candidates.

Queries outside the grid domain return a -inf sentinel: leaving the computed
domain forfeits the certificate, so it is treated as unsafe.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import cached_property
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .dynamics import MarginFunction, SystemModel, discretize_box
from .intervals import Box

_EXACT_BOX_MIN_CAP = 65536  # above this many corner evaluations, use the node bound


@dataclass(frozen=True)
class ValueGrid:
    """Rectilinear grid of safety values with multilinear interpolation.

    ``values`` is flat in row-major node order (first dimension slowest).
    """

    domain: Box
    shape: tuple[int, ...]
    values: np.ndarray
    out_of_domain_value: float = float("-inf")

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if any(s < 2 for s in shape):
            raise ValueError("grid needs at least 2 nodes per dimension")
        if len(shape) != self.domain.dim:
            raise ValueError("grid shape and domain dimension differ")
        vals = np.asarray(self.values, dtype=np.float64).ravel().copy()
        if vals.size != int(np.prod(shape)):
            raise ValueError("values length does not match grid shape")
        vals.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", vals)

    @cached_property
    def axes(self) -> list[np.ndarray]:
        return [
            np.linspace(self.domain.lower[j], self.domain.upper[j], n)
            for j, n in enumerate(self.shape)
        ]

    @cached_property
    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (num_nodes, dim), row-major."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def values_at(self, pts: np.ndarray) -> np.ndarray:
        """Multilinear interpolation at points of shape (N, dim)."""
        ci, w, oob = _interp_weights(self.axes, self.shape, pts)
        return _apply_interp(self.values, ci, w, oob, self.out_of_domain_value)

    def with_values(self, values: np.ndarray) -> "ValueGrid":
        return ValueGrid(self.domain, self.shape, values, self.out_of_domain_value)


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool
    wall_time: float


def _interp_weights(axes, shape, pts):
    """Corner indices, weights, and out-of-domain mask for multilinear interpolation.

    Uses searchsorted so that queries at node coordinates produce exact 0/1
    weights (node values are reproduced bit-for-bit).
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != len(shape):
        raise ValueError("query points must have shape (N, dim)")
    n_pts, k = pts.shape
    idx = np.empty((n_pts, k), dtype=np.int64)
    frac = np.empty((n_pts, k), dtype=np.float64)
    oob = np.zeros(n_pts, dtype=bool)
    for j, c in enumerate(axes):
        q = pts[:, j]
        with np.errstate(invalid="ignore"):
            oob |= ~((q >= c[0]) & (q <= c[-1]))
        i = np.clip(np.searchsorted(c, q, side="right") - 1, 0, len(c) - 2)
        idx[:, j] = i
        with np.errstate(invalid="ignore"):
            frac[:, j] = (q - c[i]) / (c[i + 1] - c[i])
    frac[oob] = 0.0
    strides = np.ones(k, dtype=np.int64)
    for j in range(k - 2, -1, -1):
        strides[j] = strides[j + 1] * shape[j + 1]
    base = idx @ strides
    corner_idx = np.empty((n_pts, 1 << k), dtype=np.int64)
    weights = np.empty((n_pts, 1 << k), dtype=np.float64)
    for m, bits in enumerate(product((0, 1), repeat=k)):
        offset = int(sum(b * s for b, s in zip(bits, strides)))
        w = np.ones(n_pts)
        for j, b in enumerate(bits):
            w = w * (frac[:, j] if b else 1.0 - frac[:, j])
        corner_idx[:, m] = base + offset
        weights[:, m] = w
    return corner_idx, weights, oob


def _apply_interp(values, corner_idx, weights, oob, oodv):
    # zero-weight corners are masked so a -inf sentinel next to a cell cannot
    # poison finite interpolation through 0 * inf = nan
    with np.errstate(invalid="ignore"):
        terms = np.where(weights > 0.0, weights * values[corner_idx], 0.0)
    out = terms.sum(axis=1)
    if oob.any():
        out = np.where(oob, oodv, out)
    return out


def value_at(grid: ValueGrid, x) -> float:
    """Interpolated value at a single state (sentinel outside the domain)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(grid.values_at(x)[0])


def safe_membership(grid: ValueGrid, x) -> bool:
    """Membership in the encoded safe set: interpolated value >= 0."""
    return value_at(grid, x) >= 0.0


def _eval_on_nodes(fn: Callable, nodes: np.ndarray) -> np.ndarray:
    """Evaluate a state function on all nodes, batched when supported."""
    try:
        out = np.asarray(fn(nodes), dtype=np.float64)
        if out.shape == (nodes.shape[0],):
            return out
    except Exception:
        pass
    return np.array([float(fn(x)) for x in nodes], dtype=np.float64)


def _batch_next_states(model: SystemModel, nodes: np.ndarray, u, d) -> np.ndarray:
    """f(x, u, d) for every node, batched when the model's step supports it."""
    u = np.asarray(u, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    try:
        out = np.asarray(model.step(nodes, u, d), dtype=np.float64)
        if out.shape == nodes.shape:
            return out
    except Exception:
        pass
    return np.stack([np.asarray(model.step(x, u, d), dtype=np.float64) for x in nodes])


def _candidate_plans(model, grid, u_candidates, d_candidates):
    """Precomputed interpolation stencils at f(node, u, d) for every candidate pair."""
    plans = []
    for u in u_candidates:
        per_u = []
        for d in d_candidates:
            pts = _batch_next_states(model, grid.nodes, u, d)
            per_u.append(_interp_weights(grid.axes, grid.shape, pts))
        plans.append(per_u)
    return plans


def _backward_kernel(values, g_values, plans, oodv):
    best = None
    for per_u in plans:
        worst = None
        for ci, w, oob in per_u:
            vals = _apply_interp(values, ci, w, oob, oodv)
            worst = vals if worst is None else np.minimum(worst, vals)
        best = worst if best is None else np.maximum(best, worst)
    return np.minimum(g_values, best)


def _sup_change(old, new):
    with np.errstate(invalid="ignore"):
        diff = np.where(new == old, 0.0, np.abs(new - old))
    return float(diff.max()) if diff.size else 0.0


def backward_step(
    model: SystemModel,
    g: MarginFunction,
    v_next: ValueGrid,
    u_candidates: Sequence[np.ndarray],
    d_candidates: Sequence[np.ndarray],
) -> ValueGrid:
    """One exact backup of the min-max recursion; the input grid is not modified."""
    if not len(u_candidates) or not len(d_candidates):
        raise ValueError("candidate lists must be nonempty")
    if v_next.domain.dim != model.state_dim:
        raise ValueError("grid dimension does not match model state dimension")
    g_values = _eval_on_nodes(g, v_next.nodes)
    plans = _candidate_plans(model, v_next, u_candidates, d_candidates)
    new_values = _backward_kernel(v_next.values, g_values, plans, v_next.out_of_domain_value)
    return v_next.with_values(new_values)


def _auto_padding(model, domain, shape, u_candidates, d_candidates, clamp_band):
    """Cells of slack to grid beyond each domain face.

    Covers one backup step of flow per dimension (so queries from requested
    nodes land on stored values, not the sentinel) plus room for the clamp
    band to decay at unit margin slope. Capped at 4x the requested size.
    """
    spacing = (domain.upper - domain.lower) / (np.asarray(shape) - 1)
    probe = ValueGrid(domain, tuple(shape), np.zeros(int(np.prod(shape))))
    flow = np.zeros(domain.dim)
    for u in u_candidates:
        for d in d_candidates:
            nxt = _batch_next_states(model, probe.nodes, u, d)
            with np.errstate(invalid="ignore"):
                flow = np.maximum(flow, np.nanmax(np.abs(nxt - probe.nodes), axis=0))
    flow = np.where(np.isfinite(flow), flow, 0.0)
    cells = np.ceil(flow / spacing) + np.ceil(clamp_band / spacing) + 1
    return np.minimum(cells, 4 * np.asarray(shape)).astype(int)


def solve(
    model: SystemModel,
    g: MarginFunction,
    grid_spec: tuple[Box, Sequence[int]],
    u_counts,
    d_counts,
    tolerance: float = 1e-6,
    max_iters: int = 1000,
    clamp_band: float | None = None,
    padding: int | Sequence[int] | str = "auto",
) -> tuple[ValueGrid, SolveReport]:
    """Iterate backups from V = g until the sup-norm residual meets tolerance.

    Node values are non-increasing across iterations; on non-convergence the
    last iterate is still returned with ``report.converged = False``.

    Boundary policy (grid boundary semantics are a solver decision): leaving
    the requested domain forfeits the certificate, so the margin is composed
    with the domain box's own signed face margin - states beyond a face count
    as failing, continuously in the distance past the face. The working grid
    is padded beyond the requested domain so that backups near the frontier
    read those continuous negative values instead of a sentinel cliff, and
    all values are clamped from below to -clamp_band with the sentinel set to
    the same level. A raw -inf sentinel next to the frontier would otherwise
    drag the blended values of whole neighboring cells down and push the
    computed frontier outward by several cells per backup. The clamp floor is
    strictly negative, so the encoded safe set - the sign of the values - is
    conservative and unaffected by the clamp; returned values never exceed
    the composed margin, hence V <= g everywhere. Pass ``padding=0`` and a
    large ``clamp_band`` to reproduce the literal single-backup semantics of
    ``backward_step``. Defaults: clamp_band = 8 * max node spacing.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    domain, shape = grid_spec
    shape = tuple(int(s) for s in shape)
    if model.disturbance_dim == 0:
        d_counts = []
    u_candidates = discretize_box(model.control_set, u_counts)
    d_candidates = discretize_box(model.disturbance_set, d_counts)

    start = time.perf_counter()
    spacing = (domain.upper - domain.lower) / (np.asarray(shape) - 1)
    if clamp_band is None:
        clamp_band = 8.0 * float(spacing.max())
    if clamp_band <= 0:
        raise ValueError("clamp_band must be positive")
    if isinstance(padding, str):
        if padding != "auto":
            raise ValueError("padding must be 'auto', an int, or a sequence")
        pad = _auto_padding(model, domain, shape, u_candidates, d_candidates, clamp_band)
    else:
        pad = np.broadcast_to(np.asarray(padding, dtype=int), (domain.dim,)).copy()
        if np.any(pad < 0):
            raise ValueError("padding must be nonnegative")

    work_domain = Box(domain.lower - pad * spacing, domain.upper + pad * spacing)
    work_shape = tuple(int(n + 2 * p) for n, p in zip(shape, pad))
    floor = -float(clamp_band)
    work = ValueGrid(work_domain, work_shape, np.zeros(int(np.prod(work_shape))),
                     out_of_domain_value=floor)
    g_values = _eval_on_nodes(g, work.nodes)
    # leaving the requested domain counts as failure, continuously past faces
    face_margin = np.minimum(
        (work.nodes - domain.lower).min(axis=1),
        (domain.upper - work.nodes).min(axis=1),
    )
    g_values = np.minimum(g_values, face_margin)
    values = np.maximum(g_values, floor)
    work = ValueGrid(work_domain, work_shape, values, out_of_domain_value=floor)
    plans = _candidate_plans(model, work, u_candidates, d_candidates)

    residual = math.inf
    iterations = 0
    for iterations in range(1, max_iters + 1):
        new_values = np.maximum(
            _backward_kernel(values, g_values, plans, floor), floor
        )
        residual = _sup_change(values, new_values)
        values = new_values
        if residual <= tolerance:
            break
    wall = time.perf_counter() - start

    block = values.reshape(work_shape)[
        tuple(slice(p, p + n) for p, n in zip(pad, shape))
    ].ravel()
    # cap by the margin evaluated at the returned grid's own node coordinates
    # (the padded grid's interior nodes can differ from them by rounding), so
    # V <= g holds exactly at every returned node
    out = ValueGrid(domain, shape, block, out_of_domain_value=floor)
    g_ret = _eval_on_nodes(g, out.nodes)
    face_ret = np.minimum(
        (out.nodes - domain.lower).min(axis=1),
        (domain.upper - out.nodes).min(axis=1),
    )
    final = np.minimum(block, np.minimum(g_ret, face_ret))
    return (
        ValueGrid(domain, shape, final, out_of_domain_value=floor),
        SolveReport(
            iterations=iterations,
            final_residual=residual,
            converged=residual <= tolerance,
            wall_time=wall,
        ),
    )


def worst_case_next_value(
    model: SystemModel,
    grid: ValueGrid,
    x,
    u,
    d_candidates: Sequence[np.ndarray],
) -> float:
    """min over disturbance candidates of the interpolated value at f(x, u, d)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if len(d_candidates) > 1:
        try:
            ds = np.stack([np.atleast_1d(d) for d in d_candidates])
            xs = np.broadcast_to(x, (len(d_candidates), x.size))
            nxt = np.asarray(model.step(xs, u, ds), dtype=np.float64)
            if nxt.shape == xs.shape:
                return float(grid.values_at(nxt).min())
        except Exception:
            pass
    return min(value_at(grid, model.step(x, u, d)) for d in d_candidates)


def optimal_safety_policy(
    model: SystemModel,
    grid: ValueGrid,
    u_candidates: Sequence[np.ndarray],
    d_candidates: Sequence[np.ndarray],
) -> Callable[[np.ndarray], np.ndarray]:
    """argmax over control candidates of the worst-case next value.

    Ties break to the lowest candidate index, so the policy is deterministic.
    """
    if not len(u_candidates) or not len(d_candidates):
        raise ValueError("candidate lists must be nonempty")
    u_candidates = [np.atleast_1d(np.asarray(u, dtype=np.float64)) for u in u_candidates]
    d_candidates = [np.atleast_1d(np.asarray(d, dtype=np.float64)) for d in d_candidates]

    def policy(x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        best_u = u_candidates[0]
        best_val = -math.inf
        for u in u_candidates:
            worst = worst_case_next_value(model, grid, x, u, d_candidates)
            if worst > best_val:
                best_val = worst
                best_u = u
        return best_u.copy()

    return policy


def grid_box_min(grid: ValueGrid, box: Box) -> float:
    """Sound lower bound (exact when small) of the interpolant over a box.

    Within each grid cell the interpolant attains its extremes at corner
    points, so evaluating the cartesian product of {box faces, interior node
    planes} per dimension gives the exact minimum. Very large boxes fall back
    to the minimum node value over all covering cells, which is a sound lower
    bound. Boxes not fully inside the domain return the out-of-domain sentinel.
    """
    if box.empty:
        return math.inf
    if box.dim != grid.domain.dim:
        raise ValueError("box dimension does not match grid")
    if not grid.domain.contains_box(box):
        return grid.out_of_domain_value

    coords = []
    total = 1
    for j, c in enumerate(grid.axes):
        lo, hi = float(box.lower[j]), float(box.upper[j])
        if hi > lo:
            inner = c[(c > lo) & (c < hi)]
            pts = np.concatenate(([lo], inner, [hi]))
        else:
            pts = np.array([lo])
        coords.append(pts)
        total *= pts.size

    if total <= _EXACT_BOX_MIN_CAP:
        mesh = np.meshgrid(*coords, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        return float(grid.values_at(pts).min())

    # node bound over covering cells
    block = grid.values.reshape(grid.shape)
    slices = []
    for j, c in enumerate(grid.axes):
        i_lo = int(np.clip(np.searchsorted(c, box.lower[j], side="right") - 1, 0, len(c) - 2))
        i_hi = int(np.clip(np.searchsorted(c, box.upper[j], side="left"), 1, len(c) - 1))
        slices.append(slice(i_lo, i_hi + 1))
    return float(block[tuple(slices)].min())


# --- value grid file format ------------------------------------------------
#
# A grid file is a single ASCII header line followed by raw node values:
#
#   SAFEFILTER-VALUEGRID 1 <dim> <shape...> <lower...> <upper...> <oodv>\n
#
# with floats rendered by repr (shortest round-trip form), then
# prod(shape) IEEE-754 binary64 values, little-endian, in row-major node
# order. Writes are deterministic: identical grids give identical bytes.

_MAGIC = "SAFEFILTER-VALUEGRID"
_FORMAT_VERSION = 1


def save_value_grid(grid: ValueGrid, path) -> None:
    fields = [_MAGIC, str(_FORMAT_VERSION), str(len(grid.shape))]
    fields += [str(n) for n in grid.shape]
    fields += [repr(float(v)) for v in grid.domain.lower]
    fields += [repr(float(v)) for v in grid.domain.upper]
    fields.append(repr(float(grid.out_of_domain_value)))
    header = " ".join(fields) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def load_value_grid(path) -> ValueGrid:
    with open(path, "rb") as f:
        header = bytearray()
        while True:
            b = f.read(1)
            if not b:
                raise ValueError("truncated grid file: missing header newline")
            if b == b"\n":
                break
            header += b
        fields = header.decode("ascii").split(" ")
        if fields[0] != _MAGIC:
            raise ValueError(f"not a value grid file (magic {fields[0]!r})")
        if int(fields[1]) != _FORMAT_VERSION:
            raise ValueError(f"unsupported grid file version {fields[1]}")
        dim = int(fields[2])
        pos = 3
        shape = tuple(int(v) for v in fields[pos : pos + dim])
        pos += dim
        lower = [float(v) for v in fields[pos : pos + dim]]
        pos += dim
        upper = [float(v) for v in fields[pos : pos + dim]]
        pos += dim
        oodv = float(fields[pos])
        count = int(np.prod(shape))
        raw = f.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError("truncated grid file: missing node values")
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ValueGrid(Box(lower, upper), shape, values, oodv)
