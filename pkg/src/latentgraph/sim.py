"""Deterministic 2D position-based-dynamics simulator for ropes and cloth.

Particles live in the unit workspace (x, y in [0, 1]) with a height z >= 0.
An action grasps the particle nearest the pick point, carries it to the place
point along a lifted arc, releases it and lets the object settle.  The object
is observed through a top-down orthographic depth camera.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np
import shapely

TASK_IDS = ("rope-0", "rope-45", "rope-90", "rope-135", "cloth-flatten", "cloth-fold")

# 5th percentile of reward over 200 scripted near-goal states per task
# (trainer.calibrate_threshold on near_goal_states(task, 200, seed=0)).
DEFAULT_THRESHOLDS = {
    "rope-0": -0.02731,
    "rope-45": -0.02801,
    "rope-90": -0.02501,
    "rope-135": -0.0243,
    "cloth-flatten": 0.91736,
    "cloth-fold": -0.01277,
}


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 60.0
    k_iter: int = 30
    damping: float = 0.98
    gravity: float = 9.8
    pick_radius: float = 0.05
    particle_radius_px: float = 1.5  # at 64x64, scaled with image width
    n_carry: int = 20
    n_settle: int = 40
    lift_height: float = 0.05
    ground_friction: float = 1.0  # fraction of planar velocity removed per substep on contact
    constraint_tol: float = 1e-3
    image_size: int = 64
    depth_base: float = 0.05  # depth value of a particle resting on the table
    rope_particles: int = 40
    rope_segment: float = 0.015
    cloth_rows: int = 12
    cloth_cols: int = 12
    cloth_spacing: float = 0.03

    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


WORKSPACE_LO, WORKSPACE_HI, Z_MAX = -0.1, 1.1, 0.5


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    success_threshold: float
    max_steps: int = 20

    def __post_init__(self):
        if self.task_id not in TASK_IDS:
            raise ValueError(f"unknown task {self.task_id!r}; expected one of {TASK_IDS}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def kind(self) -> str:
        return "rope" if self.task_id.startswith("rope") else "cloth"

    @property
    def rope_angle(self) -> float:
        return math.radians(float(self.task_id.split("-")[1]))


def make_task(task_id: str, success_threshold: float | None = None, max_steps: int = 20) -> TaskSpec:
    if success_threshold is None:
        if task_id not in DEFAULT_THRESHOLDS:
            raise ValueError(f"unknown task {task_id!r}; expected one of {TASK_IDS}")
        success_threshold = DEFAULT_THRESHOLDS[task_id]
    return TaskSpec(task_id, float(success_threshold), max_steps)


@dataclass(frozen=True)
class Action:
    xs: float
    ys: float
    xg: float
    yg: float

    def __post_init__(self):
        for name in ("xs", "ys", "xg", "yg"):
            val = getattr(self, name)
            if not (0.0 <= val <= 1.0) or math.isnan(val):
                raise ValueError(f"action component {name}={val} outside [0, 1]")

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.clip(np.asarray(a, dtype=np.float64).reshape(4), 0.0, 1.0)
        return cls(*(float(v) for v in a))

    def to_array(self) -> np.ndarray:
        return np.array([self.xs, self.ys, self.xg, self.yg])


@dataclass(frozen=True, eq=False)
class ParticleState:
    """Immutable particle configuration.  Arrays are copied and locked on creation."""

    positions: np.ndarray          # (N, 3)
    velocities: np.ndarray         # (N, 3)
    constraints: np.ndarray        # (M, 2) int particle indices
    rest_lengths: np.ndarray       # (M,)
    kind: str                      # "rope" | "cloth"
    grid: tuple[int, int] | None = None
    reference: np.ndarray | None = field(default=None)  # flat pose the cloth-fold goal is defined on

    def __post_init__(self):
        for name in ("positions", "velocities", "constraints", "rest_lengths", "reference"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.array(arr, dtype=np.int64 if name == "constraints" else np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def replace(self, **changes) -> "ParticleState":
        return dataclasses.replace(self, **changes)

    def max_violation(self) -> float:
        if len(self.constraints) == 0:
            return 0.0
        d = self.positions[self.constraints[:, 1]] - self.positions[self.constraints[:, 0]]
        return float(np.max(np.abs(np.linalg.norm(d, axis=1) - self.rest_lengths)))

    def equals(self, other: "ParticleState") -> bool:
        return (self.kind == other.kind and self.grid == other.grid
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.velocities, other.velocities)
                and np.array_equal(self.constraints, other.constraints))


# -- topology ----------------------------------------------------------------

def rope_topology(n: int, segment: float) -> tuple[np.ndarray, np.ndarray]:
    cons = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    return cons, np.full(n - 1, segment)


def cloth_topology(rows: int, cols: int, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(rows * cols).reshape(rows, cols)
    pairs, rest = [], []
    diag = spacing * math.sqrt(2.0)
    for a, b, length in (
        (idx[:, :-1], idx[:, 1:], spacing),       # horizontal
        (idx[:-1, :], idx[1:, :], spacing),       # vertical
    ):
        pairs.append(np.stack([a.ravel(), b.ravel()], axis=1))
        rest.append(np.full(a.size, length))
    # one shear diagonal per cell, alternating like a union-jack triangulation,
    # so the sheet can still bend along diagonals
    shear = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            if (r + c) % 2 == 0:
                shear.append((idx[r, c], idx[r + 1, c + 1]))
            else:
                shear.append((idx[r, c + 1], idx[r + 1, c]))
    pairs.append(np.array(shear, dtype=np.int64))
    rest.append(np.full(len(shear), diag))
    return np.concatenate(pairs), np.concatenate(rest)


# -- solver kernels ------------------------------------------------------------

@numba.njit(cache=True)
def _project(p, w, cons, rest, reverse=False):
    m = cons.shape[0]
    for k in range(m):
        c = m - 1 - k if reverse else k
        i = cons[c, 0]
        j = cons[c, 1]
        wsum = w[i] + w[j]
        if wsum == 0.0:
            continue
        dx = p[j, 0] - p[i, 0]
        dy = p[j, 1] - p[i, 1]
        dz = p[j, 2] - p[i, 2]
        length = math.sqrt(dx * dx + dy * dy + dz * dz)
        if length < 1e-12:
            continue
        s = (length - rest[c]) / (length * wsum)
        p[i, 0] += w[i] * s * dx
        p[i, 1] += w[i] * s * dy
        p[i, 2] += w[i] * s * dz
        p[j, 0] -= w[j] * s * dx
        p[j, 1] -= w[j] * s * dy
        p[j, 2] -= w[j] * s * dz


@numba.njit(cache=True)
def _clamp(p, lo, hi, zmax):
    for i in range(p.shape[0]):
        p[i, 0] = min(max(p[i, 0], lo), hi)
        p[i, 1] = min(max(p[i, 1], lo), hi)
        p[i, 2] = min(max(p[i, 2], 0.0), zmax)


@numba.njit(cache=True)
def _violation(p, cons, rest):
    worst = 0.0
    for c in range(cons.shape[0]):
        i = cons[c, 0]
        j = cons[c, 1]
        dx = p[j, 0] - p[i, 0]
        dy = p[j, 1] - p[i, 1]
        dz = p[j, 2] - p[i, 2]
        err = abs(math.sqrt(dx * dx + dy * dy + dz * dz) - rest[c])
        if err > worst:
            worst = err
    return worst


@numba.njit(cache=True)
def _tighten(x, w, cons, rest, lo, hi, zmax, tol, max_fix):
    for it in range(max_fix):
        if _violation(x, cons, rest) <= tol:
            return it
        _project(x, w, cons, rest, False)
        _project(x, w, cons, rest, True)
        _clamp(x, lo, hi, zmax)
    return max_fix


@numba.njit(cache=True)
def _substeps(x, v, w, cons, rest, pin, targets, count, dt, k_iter, damping, gravity, friction, lo, hi, zmax):
    n = x.shape[0]
    p = x.copy()
    for s in range(count):
        for i in range(n):
            v[i, 2] -= gravity * dt
            for k in range(3):
                v[i, k] *= damping
                p[i, k] = x[i, k] + v[i, k] * dt
        if pin >= 0:
            for k in range(3):
                p[pin, k] = targets[s, k]
        for it in range(k_iter):
            # symmetric Gauss-Seidel: alternate sweep direction
            _project(p, w, cons, rest, it % 2 == 1)
            _clamp(p, lo, hi, zmax)
        for i in range(n):
            for k in range(3):
                v[i, k] = (p[i, k] - x[i, k]) / dt
                x[i, k] = p[i, k]
            if x[i, 2] <= 1e-6:
                v[i, 0] *= 1.0 - friction
                v[i, 1] *= 1.0 - friction


@numba.njit(cache=True)
def _run(x, v, cons, rest, pin, targets, n_free, dt, k_iter, damping, gravity, friction, lo, hi, zmax, tol, max_fix):
    """Carry ``pin`` through ``targets`` (one row per substep), then ``n_free`` free substeps.

    The carried particle is held at its final target while the object is
    tightened to tolerance; only then is it released.
    """
    w = np.ones(x.shape[0])
    if pin >= 0:
        w[pin] = 0.0
        _substeps(x, v, w, cons, rest, pin, targets, targets.shape[0], dt, k_iter, damping, gravity,
                  friction, lo, hi, zmax)
        _tighten(x, w, cons, rest, lo, hi, zmax, 0.9 * tol, max_fix)
        w[pin] = 1.0
        v[pin, :] = 0.0
    _substeps(x, v, w, cons, rest, -1, targets, n_free, dt, k_iter, damping, gravity, friction, lo, hi, zmax)
    _tighten(x, w, cons, rest, lo, hi, zmax, 0.9 * tol, max_fix)


def _simulate(state: ParticleState, cfg: SimConfig, pin: int = -1,
              targets: np.ndarray | None = None, n_free: int | None = None) -> ParticleState:
    x = np.array(state.positions, dtype=np.float64)
    v = np.array(state.velocities, dtype=np.float64)
    if targets is None:
        targets = np.zeros((0, 3))
    _run(x, v, np.ascontiguousarray(state.constraints), np.ascontiguousarray(state.rest_lengths),
         int(pin), np.ascontiguousarray(targets, dtype=np.float64),
         cfg.n_settle if n_free is None else n_free, cfg.dt, cfg.k_iter, cfg.damping, cfg.gravity, cfg.ground_friction,
         WORKSPACE_LO, WORKSPACE_HI, Z_MAX, cfg.constraint_tol, 20000)
    # objects come to rest between actions
    return state.replace(positions=x, velocities=np.zeros_like(v))


# -- reset -----------------------------------------------------------------------

def _rope_curve(rng: np.random.Generator, cfg: SimConfig) -> np.ndarray:
    n, seg = cfg.rope_particles, cfg.rope_segment
    while True:
        heading = rng.uniform(0.0, 2.0 * math.pi) + np.concatenate(
            [[0.0], np.cumsum(rng.normal(0.0, 0.35, n - 2))])
        steps = seg * np.stack([np.cos(heading), np.sin(heading)], axis=1)
        pts = np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
        pts += rng.uniform(0.3, 0.7, 2) - pts.mean(axis=0)
        if pts.min() >= 0.05 and pts.max() <= 0.95:
            return np.concatenate([pts, np.zeros((n, 1))], axis=1)


def flat_cloth(cfg: SimConfig, center=(0.5, 0.5), angle: float = 0.0) -> np.ndarray:
    rows, cols, s = cfg.cloth_rows, cfg.cloth_cols, cfg.cloth_spacing
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    local = np.stack([(c - (cols - 1) / 2) * s, (r - (rows - 1) / 2) * s], axis=-1).reshape(-1, 2)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    xy = local @ rot.T + np.asarray(center)
    return np.concatenate([xy, np.zeros((rows * cols, 1))], axis=1)


def rope_state(positions: np.ndarray, cfg: SimConfig = SimConfig()) -> ParticleState:
    cons, rest = rope_topology(cfg.rope_particles, cfg.rope_segment)
    return ParticleState(positions, np.zeros_like(positions), cons, rest, "rope")


def cloth_state(positions: np.ndarray, cfg: SimConfig = SimConfig(), reference: np.ndarray | None = None) -> ParticleState:
    cons, rest = cloth_topology(cfg.cloth_rows, cfg.cloth_cols, cfg.cloth_spacing)
    return ParticleState(positions, np.zeros_like(positions), cons, rest, "cloth",
                         grid=(cfg.cloth_rows, cfg.cloth_cols),
                         reference=positions.copy() if reference is None else reference)


def reset(task: TaskSpec, seed: int, cfg: SimConfig = SimConfig()) -> ParticleState:
    """Random initial configuration for ``task``, deterministic in ``seed``."""
    rng = np.random.default_rng([seed, TASK_IDS.index(task.task_id)])
    if task.kind == "rope":
        return rope_state(_rope_curve(rng, cfg), cfg)
    center = rng.uniform(0.4, 0.6, 2)
    angle = rng.uniform(-math.pi / 6, math.pi / 6)
    flat = cloth_state(flat_cloth(cfg, center, angle), cfg)
    if task.task_id == "cloth-fold":
        return flat
    while True:
        state = _crumple(flat, rng, cfg)
        if state is not None:
            return state


def _crumple(state: ParticleState, rng: np.random.Generator, cfg: SimConfig,
             rounds: int = 8, rest_tol: float = 2e-4) -> ParticleState | None:
    """Drag random boundary particles across the cloth until well covered.

    Returns None when the result does not come to rest within ``rounds``
    settles; some buckled crumples keep creeping indefinitely.
    """
    rows, cols = cfg.cloth_rows, cfg.cloth_cols
    boundary = [r * cols + c for r in range(rows) for c in range(cols)
                if r in (0, rows - 1) or c in (0, cols - 1)]
    flat_area = (rows - 1) * (cols - 1) * cfg.cloth_spacing ** 2
    for k in range(8):
        if k >= 2 and covered_area(state.positions, state.grid) < 0.8 * flat_area:
            break
        pos = state.positions
        centroid = pos[:, :2].mean(axis=0)
        i = int(rng.choice(boundary))
        pick = pos[i, :2]
        place = pick + (centroid - pick) * rng.uniform(1.0, 1.6) + rng.normal(0.0, 0.03, 2)
        state = _drag(state, i, np.clip(place, 0.02, 0.98), cfg)
    for _ in range(rounds):
        settled = _simulate(state, cfg)
        moved = np.abs(settled.positions - state.positions).max()
        state = settled
        if moved < rest_tol:
            return state
    return None


# -- step ------------------------------------------------------------------------

def nearest_particle(state: ParticleState, x: float, y: float, radius: float) -> int:
    """Index of the particle nearest (x, y) in the plane within ``radius``, else -1."""
    d = np.hypot(state.positions[:, 0] - x, state.positions[:, 1] - y)
    i = int(np.argmin(d))
    return i if d[i] <= radius else -1


def _drag(state: ParticleState, i: int, goal_xy: np.ndarray, cfg: SimConfig) -> ParticleState:
    start = state.positions[i].copy()
    t = np.arange(1, cfg.n_carry + 1) / cfg.n_carry
    s = t * t * (3.0 - 2.0 * t)  # smoothstep: zero speed at both ends
    targets = np.empty((cfg.n_carry, 3))
    targets[:, 0] = start[0] + s * (goal_xy[0] - start[0])
    targets[:, 1] = start[1] + s * (goal_xy[1] - start[1])
    # lower back onto the table before the end of the carry
    targets[:, 2] = start[2] * (1.0 - s) + cfg.lift_height * np.sin(math.pi * np.minimum(1.0, t / 0.75))
    return _simulate(state, cfg, pin=i, targets=targets)


def step(state: ParticleState, action: Action, cfg: SimConfig = SimConfig()) -> ParticleState:
    """Execute one pick-and-place.  Off-object picks only let the object settle."""
    i = nearest_particle(state, action.xs, action.ys, cfg.pick_radius)
    if i < 0:
        return _simulate(state, cfg)
    return _drag(state, i, np.array([action.xg, action.yg]), cfg)


def settle(state: ParticleState, cfg: SimConfig = SimConfig()) -> ParticleState:
    return _simulate(state, cfg)


# -- rendering ---------------------------------------------------------------------

def render_depth(state: ParticleState | None, width: int = 64, height: int = 64,
                 cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Top-down orthographic depth image, float32 (height, width).

    Each particle is a disc; a pixel takes the largest value among the discs
    covering its centre.  Values are ``depth_base + z`` so nearer surfaces are
    brighter; uncovered pixels are exactly 0.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image dims must be positive")
    img = np.zeros((height, width), dtype=np.float32)
    if state is None or state.n == 0:
        return img
    r = cfg.particle_radius_px * width / 64.0
    pos = state.positions
    px = pos[:, 0] * width
    py = pos[:, 1] * height
    reach = int(math.ceil(r)) + 1
    off = np.arange(-reach, reach + 1)
    cols = np.floor(px)[:, None, None].astype(np.int64) + off[None, None, :]
    rows = np.floor(py)[:, None, None].astype(np.int64) + off[None, :, None]
    cols, rows = np.broadcast_arrays(cols, rows)
    inside = ((cols + 0.5 - px[:, None, None]) ** 2 + (rows + 0.5 - py[:, None, None]) ** 2 <= r * r)
    inside &= (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    vals = np.broadcast_to((cfg.depth_base + pos[:, 2])[:, None, None], cols.shape)
    np.maximum.at(img, (rows[inside], cols[inside]), vals[inside].astype(np.float32))
    return img


# -- rewards -------------------------------------------------------------------------

def rope_goal(task: TaskSpec, cfg: SimConfig = SimConfig()) -> np.ndarray:
    n, seg = cfg.rope_particles, cfg.rope_segment
    th = task.rope_angle
    k = (np.arange(n) - (n - 1) / 2.0) * seg
    xy = 0.5 + k[:, None] * np.array([math.cos(th), math.sin(th)])
    return np.concatenate([xy, np.zeros((n, 1))], axis=1)


def covered_area(positions: np.ndarray, grid: tuple[int, int]) -> float:
    """Area of the union of the cloth's grid cells projected onto the table."""
    rows, cols = grid
    xy = positions[:, :2].reshape(rows, cols, 2)
    quads = np.stack([xy[:-1, :-1], xy[:-1, 1:], xy[1:, 1:], xy[1:, :-1]], axis=2).reshape(-1, 4, 2)
    polys = shapely.polygons(quads)
    polys = shapely.make_valid(polys)
    return float(shapely.union_all(polys).area)


def fold_targets(reference: np.ndarray, grid: tuple[int, int]) -> list[np.ndarray]:
    """Planar targets of the four half-folds of a flat reference pose."""
    return [folded_cloth(reference, grid, 0.0, which) for which in range(4)]


def reward(state: ParticleState, task: TaskSpec, cfg: SimConfig = SimConfig()) -> float:
    """Ground-truth task reward from particle positions."""
    if state.kind != task.kind:
        raise ValueError(f"task {task.task_id} does not apply to a {state.kind} state")
    pos = state.positions
    if task.kind == "rope":
        goal = rope_goal(task, cfg)[:, :2]
        if goal.shape[0] != pos.shape[0]:
            raise ValueError("rope particle count does not match the sim config")
        fwd = np.linalg.norm(pos[:, :2] - goal, axis=1).mean()
        rev = np.linalg.norm(pos[::-1, :2] - goal, axis=1).mean()
        return -float(min(fwd, rev))
    if task.task_id == "cloth-flatten":
        rows, cols = state.grid
        flat = (rows - 1) * (cols - 1) * cfg.cloth_spacing ** 2
        frac = min(1.0, covered_area(pos, state.grid) / flat)
        return float(np.clip(frac - pos[:, 2].mean(), 0.0, 1.0))
    ref = state.reference if state.reference is not None else pos
    return -float(min(np.linalg.norm(pos[:, :2] - t[:, :2], axis=1).mean()
                      for t in fold_targets(ref, state.grid)))


def is_success(state: ParticleState, task: TaskSpec, cfg: SimConfig = SimConfig()) -> bool:
    return reward(state, task, cfg) >= task.success_threshold


def folded_cloth(reference: np.ndarray, grid: tuple[int, int], spacing: float, which: int = 0) -> np.ndarray:
    """Isometric half-fold of a flat pose.

    The moving half is turned over about the fold line and rests one spacing
    above the fixed half, so every distance constraint stays satisfied.
    ``which`` picks one of the four folds (column/row axis, high/low half).
    """
    rows, cols = grid
    ref = reference.reshape(rows, cols, 3).copy()
    axis = 1 if which < 2 else 0
    n = cols if axis == 1 else rows
    idx = np.arange(n)
    moving = (idx >= n / 2) if which % 2 == 0 else (idx < n / 2)
    mirror = n - 1 - idx
    out = ref.copy()
    sel = (slice(None), moving) if axis == 1 else (moving, slice(None))
    src = (slice(None), mirror[moving]) if axis == 1 else (mirror[moving], slice(None))
    out[sel] = ref[src]
    # a rotation by pi about an axis at height spacing/2 (even n) keeps the seam edges at rest length
    out[sel + (2,)] = ref[sel + (2,)] + (spacing if n % 2 == 0 else 0.0)
    return out.reshape(-1, 3)


def goal_state(task: TaskSpec, cfg: SimConfig = SimConfig(), reference: np.ndarray | None = None) -> ParticleState:
    """An exact goal configuration (used by tests and calibration)."""
    if task.kind == "rope":
        return rope_state(rope_goal(task, cfg), cfg)
    flat = flat_cloth(cfg) if reference is None else reference
    if task.task_id == "cloth-flatten":
        return cloth_state(flat, cfg)
    grid = (cfg.cloth_rows, cfg.cloth_cols)
    return cloth_state(folded_cloth(flat, grid, cfg.cloth_spacing), cfg, reference=flat)


def near_goal_states(task: TaskSpec, n: int, seed: int, cfg: SimConfig = SimConfig()) -> list[ParticleState]:
    """Scripted solutions: goal poses with small perturbations.

    Rope: rigid jitter plus a small bend, settled.  Cloth-flatten: a flat
    cloth with one short corner tug.  Cloth-fold: the isometric fold with the
    moving half slightly shifted (no settling; the fold relies on stacking that
    the simulator does not model).
    """
    rng = np.random.default_rng([seed, 7, TASK_IDS.index(task.task_id)])
    grid = (cfg.cloth_rows, cfg.cloth_cols)
    out = []
    for _ in range(n):
        if task.kind == "rope":
            goal = rope_goal(task, cfg)
            ang = rng.normal(0.0, math.radians(2.0))
            rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
            xy = (goal[:, :2] - 0.5) @ rot.T + 0.5 + rng.normal(0.0, 0.01, 2)
            t = np.linspace(0.0, 1.0, len(xy))
            normal = np.array([-math.sin(task.rope_angle), math.cos(task.rope_angle)])
            xy = xy + np.outer(rng.normal(0.0, 0.01) * np.sin(math.pi * t * rng.integers(1, 3)), normal)
            out.append(settle(rope_state(np.concatenate([xy, np.zeros((len(xy), 1))], axis=1), cfg), cfg))
            continue
        center = 0.5 + rng.normal(0.0, 0.02, 2)
        flat = flat_cloth(cfg, center, rng.normal(0.0, 0.05))
        if task.task_id == "cloth-flatten":
            state = cloth_state(flat, cfg)
            corner = int(rng.choice([0, grid[1] - 1, grid[0] * grid[1] - grid[1], grid[0] * grid[1] - 1]))
            tug = (center - flat[corner, :2]) * rng.uniform(0.2, 0.8)
            out.append(_drag(state, corner, np.clip(flat[corner, :2] + tug, 0.0, 1.0), cfg))
        else:
            which = int(rng.integers(4))
            folded = folded_cloth(flat, grid, cfg.cloth_spacing, which)
            ref = folded.reshape(grid[0], grid[1], 3)
            top = ref[..., 2] > 0
            ref[top, :2] += rng.normal(0.0, 0.01, 2)
            out.append(cloth_state(ref.reshape(-1, 3), cfg, reference=flat))
    return out
