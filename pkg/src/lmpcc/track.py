"""Reference path, road corridor, obstacles and the double-lane-change scenarios."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import tomli
import tomli_w
from scipy.interpolate import CubicSpline

# 5-point Gauss-Legendre rule on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


class PathPoint(NamedTuple):
    x: float
    y: float
    heading: float
    curvature: float
    clamped: bool


@dataclass(frozen=True, eq=False)
class PathSpline:
    """Cubic spline parameterised by arc length.

    ``coef_x``/``coef_y`` hold ``(4, n_seg)`` polynomial coefficients in
    scipy's ``PPoly`` order (highest power first) over the knots ``s``.
    """

    waypoints: np.ndarray
    s: np.ndarray
    coef_x: np.ndarray
    coef_y: np.ndarray

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def _segment(self, s_real):
        i = np.searchsorted(self.s, s_real, side="right") - 1
        return np.clip(i, 0, len(self.s) - 2)

    def _poly(self, s, deriv=0):
        """Evaluate X, Y (or derivatives) on [0, L]; complex-step safe."""
        i = self._segment(np.real(s))
        h = s - self.s[i]
        cx, cy = self.coef_x[:, i], self.coef_y[:, i]
        if deriv == 0:
            fx = ((cx[0] * h + cx[1]) * h + cx[2]) * h + cx[3]
            fy = ((cy[0] * h + cy[1]) * h + cy[2]) * h + cy[3]
        elif deriv == 1:
            fx = (3 * cx[0] * h + 2 * cx[1]) * h + cx[2]
            fy = (3 * cy[0] * h + 2 * cy[1]) * h + cy[2]
        else:
            fx = 6 * cx[0] * h + 2 * cx[1]
            fy = 6 * cy[0] * h + 2 * cy[1]
        return fx, fy

    def frame(self, s):
        """Position and unit tangent at (possibly complex) ``s``.

        Outside ``[0, L]`` the path continues along the end tangent, so the
        controller's progress variable may run past the finish line.
        """
        s = np.asarray(s)
        L = self.length
        sc = np.where(np.real(s) > L, L, np.where(np.real(s) < 0, 0.0, s))
        px, py = self._poly(sc)
        dx, dy = self._poly(sc, 1)
        nrm = np.sqrt(dx * dx + dy * dy)
        tx, ty = dx / nrm, dy / nrm
        extra = s - sc
        return px + extra * tx, py + extra * ty, tx, ty


def _arc_length(cs: CubicSpline, t0, t1):
    """Gauss-Legendre arc length of the parametric spline over [t0, t1]."""
    t0, t1 = np.asarray(t0, dtype=float), np.asarray(t1, dtype=float)
    h = t1 - t0
    nodes = t0[..., None] + h[..., None] * _GL_X
    d = cs(nodes, 1)
    speed = np.hypot(d[..., 0], d[..., 1])
    return h * (speed @ _GL_W)


def build_spline(waypoints, samples_per_segment: int = 8) -> PathSpline:
    """Natural cubic spline through ``waypoints``, reparameterised by arc length.

    The chord-length spline is first refitted with knots at its own
    quadrature arc lengths, then resampled at equal arc-length steps and
    refitted once more so the parameter speed stays within 1e-3 of unity.
    """
    wp = np.asarray(waypoints, dtype=float)
    if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 4:
        raise ValueError("need at least 4 waypoints of shape (n, 2)")
    chord = np.hypot(*np.diff(wp, axis=0).T)
    if np.any(chord <= 1e-9):
        raise ValueError("duplicate consecutive waypoints")
    t = np.concatenate([[0.0], np.cumsum(chord)])
    for _ in range(3):
        cs = CubicSpline(t, wp, bc_type="natural")
        seg = _arc_length(cs, t[:-1], t[1:])
        t = np.concatenate([[0.0], np.cumsum(seg)])
    cs = CubicSpline(t, wp, bc_type="natural")
    seg = _arc_length(cs, t[:-1], t[1:])
    s_knot = np.concatenate([[0.0], np.cumsum(seg)])

    # invert s(t) on a fine grid with Newton iterations
    frac = np.arange(samples_per_segment) / samples_per_segment
    s_target = (s_knot[:-1, None] + seg[:, None] * frac).ravel()
    seg_idx = np.repeat(np.arange(len(seg)), samples_per_segment)
    tt = t[seg_idx] + (t[seg_idx + 1] - t[seg_idx]) * np.tile(frac, len(seg))
    for _ in range(20):
        err = s_knot[seg_idx] + _arc_length(cs, t[seg_idx], tt) - s_target
        speed = np.hypot(*cs(tt, 1).T)
        tt = tt - err / speed
        if np.max(np.abs(err)) < 1e-12:
            break
    s_all = np.concatenate([s_target, [s_knot[-1]]])
    pts = np.vstack([cs(tt), wp[-1:]])
    fine = CubicSpline(s_all, pts, bc_type="natural")
    return PathSpline(waypoints=wp, s=s_all, coef_x=fine.c[:, :, 0].copy(), coef_y=fine.c[:, :, 1].copy())


def evaluate(spline: PathSpline, s: float) -> PathPoint:
    """Point, heading and signed curvature at arc length ``s`` (clamped to [0, L])."""
    clamped = s < 0 or s > spline.length
    s = min(max(float(s), 0.0), spline.length)
    px, py = spline._poly(np.asarray(s))
    dx, dy = spline._poly(np.asarray(s), 1)
    ddx, ddy = spline._poly(np.asarray(s), 2)
    sp = np.hypot(dx, dy)
    kappa = (dx * ddy - dy * ddx) / sp**3
    return PathPoint(float(px), float(py), float(np.arctan2(dy, dx)), float(kappa), clamped)


def project(spline: PathSpline, x: float, y: float, s_guess: float | None = None, window: float = 20.0) -> float:
    """Arc length of the closest path point (used for logging, not control)."""
    if s_guess is None:
        grid = np.linspace(0.0, spline.length, int(spline.length) * 2 + 1)
    else:
        grid = np.clip(np.linspace(s_guess - window, s_guess + window, 161), 0.0, spline.length)
    px, py, _, _ = spline.frame(grid)
    s = float(grid[np.argmin((px - x) ** 2 + (py - y) ** 2)])
    for _ in range(5):
        px, py, tx, ty = spline.frame(s)
        step = float(tx * (x - px) + ty * (y - py))
        s = min(max(s + step, 0.0), spline.length)
        if abs(step) < 1e-10:
            break
    return s


def _contouring_lag(x, y, px, py, tx, ty):
    dx, dy = x - px, y - py
    return -ty * dx + tx * dy, tx * dx + ty * dy


def contouring_lag_errors(position, s: float, spline: PathSpline) -> tuple[float, float]:
    """Lateral (contouring, positive = left) and tangential (lag) errors."""
    px, py, tx, ty = spline.frame(np.asarray(float(s)))
    e_con, e_lag = _contouring_lag(position[0], position[1], px, py, tx, ty)
    return float(e_con), float(e_lag)


@dataclass(frozen=True)
class Obstacle:
    x: float
    y: float
    a: float
    b: float
    heading: float = 0.0
    margin: float = 0.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("obstacle semi-axes must be positive")


def _ellipse_distance(px, py, ob: Obstacle, margin: float):
    c, s = np.cos(ob.heading), np.sin(ob.heading)
    dx, dy = px - ob.x, py - ob.y
    u = (c * dx + s * dy) / (ob.a + margin)
    v = (-s * dx + c * dy) / (ob.b + margin)
    return np.sqrt(u * u + v * v)


def obstacle_error(position, obstacle: Obstacle, margin: float | None = None) -> float:
    """Hinge ``max(0, 1 - d)`` on the normalised distance to the inflated ellipse."""
    m = obstacle.margin if margin is None else margin
    d = _ellipse_distance(position[0], position[1], obstacle, m)
    return float(max(0.0, 1.0 - d))


def obstacle_clearance(px, py, obstacle: Obstacle):
    """Approximate metric distance to the inflated ellipse boundary (negative inside)."""
    d = _ellipse_distance(px, py, obstacle, obstacle.margin)
    return (d - 1.0) * (min(obstacle.a, obstacle.b) + obstacle.margin)


@dataclass(frozen=True, eq=False)
class RoadEdges:
    """Piecewise-constant lateral corridor bounds relative to the centreline.

    ``left[i]``/``right[i]`` apply on ``[breaks[i], breaks[i+1])``; the last
    piece extends to infinity.
    """

    breaks: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        if not (len(self.breaks) == len(self.left) == len(self.right)):
            raise ValueError("breaks, left and right must have equal length")
        if np.any(np.asarray(self.left) <= np.asarray(self.right)):
            raise ValueError("left offset must exceed right offset everywhere")

    def lookup(self, s):
        i = np.clip(np.searchsorted(self.breaks, np.real(s), side="right") - 1, 0, len(self.breaks) - 1)
        return self.left[i], self.right[i]


def edge_error(position, s: float, edges: RoadEdges, spline: PathSpline, width: float = 0.0) -> float:
    """Corridor violation beyond the edges shrunk by half the vehicle width."""
    e_con, _ = contouring_lag_errors(position, s, spline)
    left, right = edges.lookup(s)
    return float(max(0.0, e_con - (left - width / 2)) + max(0.0, (right + width / 2) - e_con))


@dataclass(frozen=True)
class DLCGeometry:
    """Double-lane-change layout; repo defaults, not published values."""

    lane_width: float = 3.5
    lateral_offset: float = 3.5
    swerve_out: tuple[float, float] = (60.0, 75.0)
    swerve_back: tuple[float, float] = (105.0, 125.0)
    length: float = 200.0
    waypoint_spacing: float = 2.5
    obstacle_semi_axes: tuple[float, float] = (6.0, 1.0)
    obstacle_margin: float = 1.1
    obstacle_1_x: float = 90.0
    obstacle_1_y: float = -0.2
    obstacle_2_x: float = 135.0
    priority_obstacle_2_x: float = 115.0
    priority_obstacle_2_y: float = 3.2
    edge_piece: float = 1.0

    @property
    def road_left(self) -> float:
        return self.lateral_offset + self.lane_width / 2

    @property
    def road_right(self) -> float:
        return -self.lane_width / 2

    def dlc_centerline(self, x):
        """Lateral offset of the lane-change reference at longitudinal position ``x``."""
        x = np.asarray(x, dtype=float)
        y = np.zeros_like(x)
        a0, a1 = self.swerve_out
        b0, b1 = self.swerve_back
        up = (x >= a0) & (x < a1)
        y[up] = 0.5 * (1 - np.cos(np.pi * (x[up] - a0) / (a1 - a0)))
        y[(x >= a1) & (x < b0)] = 1.0
        dn = (x >= b0) & (x < b1)
        y[dn] = 0.5 * (1 + np.cos(np.pi * (x[dn] - b0) / (b1 - b0)))
        return self.lateral_offset * y


@dataclass(frozen=True, eq=False)
class Scenario:
    spline: PathSpline
    edges: RoadEdges
    obstacles: tuple[Obstacle, ...]
    v_ref: float
    priority: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.v_ref <= 0:
            raise ValueError("v_ref must be positive")


def corridor_edges(spline: PathSpline, road_left: float, road_right: float, piece: float = 1.0) -> RoadEdges:
    """Piecewise-constant offsets of a straight road ``road_right < Y < road_left``.

    Each piece keeps the most restrictive offset seen on it, measured along
    the path normal.
    """
    n_piece = int(np.ceil(spline.length / piece))
    breaks = np.arange(n_piece) * piece
    left = np.empty(n_piece)
    right = np.empty(n_piece)
    for i, b in enumerate(breaks):
        ss = np.linspace(b, min(b + piece, spline.length), 6)
        _, py, tx, _ = spline.frame(ss)
        left[i] = np.min((road_left - py) / tx)
        right[i] = np.max((road_right - py) / tx)
    return RoadEdges(breaks, left, right)


def dlc_scenario(entry_speed_kmh: float, collision_prioritization: bool = False,
                 geometry: DLCGeometry | None = None) -> Scenario:
    """Double lane change on a straight two-lane road.

    Without prioritisation the reference follows the lane-change centreline
    around both obstacles. With prioritisation the reference stays in the
    original lane and the controller has to leave it to clear obstacle 1.
    """
    if not 30.0 <= entry_speed_kmh <= 120.0:
        raise ValueError("entry speed must lie in [30, 120] km/h")
    g = geometry or DLCGeometry()
    xs = np.arange(0.0, g.length + 1e-9, g.waypoint_spacing)
    if collision_prioritization:
        ys = np.zeros_like(xs)
    else:
        ys = g.dlc_centerline(xs)
    spline = build_spline(np.column_stack([xs, ys]))
    edges = corridor_edges(spline, g.road_left, g.road_right, g.edge_piece)
    a, b = g.obstacle_semi_axes
    if collision_prioritization:
        # the second obstacle forces an early return to the original lane
        x2, y2 = g.priority_obstacle_2_x, g.priority_obstacle_2_y
    else:
        x2, y2 = g.obstacle_2_x, g.lateral_offset
    obstacles = (
        Obstacle(g.obstacle_1_x, g.obstacle_1_y, a, b, 0.0, g.obstacle_margin),
        Obstacle(x2, y2, a, b, 0.0, g.obstacle_margin),
    )
    tag = "dlc-priority" if collision_prioritization else "dlc"
    return Scenario(spline, edges, obstacles, entry_speed_kmh / 3.6, collision_prioritization,
                    f"{tag}-{entry_speed_kmh:g}")


def straight_scenario(speed_kmh: float, length: float = 200.0, half_width: float = 3.5) -> Scenario:
    xs = np.linspace(0.0, length, 21)
    spline = build_spline(np.column_stack([xs, np.zeros_like(xs)]))
    edges = RoadEdges(np.array([0.0]), np.array([half_width]), np.array([-half_width]))
    return Scenario(spline, edges, (), speed_kmh / 3.6, False, f"straight-{speed_kmh:g}")


def obstacles_inside_corridor(sc: Scenario) -> bool:
    """Every obstacle's extreme lateral points lie strictly between the edges."""
    for ob in sc.obstacles:
        for sgn in (-1.0, 1.0):
            for dx in np.linspace(-ob.a, ob.a, 9):
                dy = sgn * ob.b * np.sqrt(max(0.0, 1 - (dx / ob.a) ** 2))
                px = ob.x + dx * np.cos(ob.heading) - dy * np.sin(ob.heading)
                py = ob.y + dx * np.sin(ob.heading) + dy * np.cos(ob.heading)
                s = project(sc.spline, px, py)
                e_con, _ = contouring_lag_errors((px, py), s, sc.spline)
                left, right = sc.edges.lookup(s)
                if not right < e_con < left:
                    return False
    return True


# ---------------------------------------------------------------------------
# file formats


SCENARIO_VERSION = 1


def save_scenario(sc: Scenario, path) -> None:
    """Write a scenario as TOML with [path], [edges], [obstacle.i], [reference]."""
    doc = {
        "version": SCENARIO_VERSION,
        "path": {"waypoints": sc.spline.waypoints.tolist()},
        "edges": {"breaks": list(map(float, sc.edges.breaks)), "left": list(map(float, sc.edges.left)),
                  "right": list(map(float, sc.edges.right))},
        "obstacle": {str(i): {"x": o.x, "y": o.y, "a": o.a, "b": o.b, "heading": o.heading, "margin": o.margin}
                     for i, o in enumerate(sc.obstacles)},
        "reference": {"v_ref": sc.v_ref, "priority": sc.priority, "name": sc.name},
    }
    Path(path).write_text(tomli_w.dumps(doc))


def load_scenario(path) -> Scenario:
    doc = tomli.loads(Path(path).read_text())
    if doc.get("version") != SCENARIO_VERSION:
        raise ValueError(f"unsupported scenario version {doc.get('version')!r}")
    spline = build_spline(doc["path"]["waypoints"])
    e = doc["edges"]
    edges = RoadEdges(np.asarray(e["breaks"], float), np.asarray(e["left"], float), np.asarray(e["right"], float))
    obs = tuple(Obstacle(**doc["obstacle"][k]) for k in sorted(doc.get("obstacle", {}), key=int))
    ref = doc["reference"]
    return Scenario(spline, edges, obs, float(ref["v_ref"]), bool(ref.get("priority", False)), ref.get("name", "custom"))


def export_centerline_csv(sc: Scenario, path, step: float = 0.5) -> None:
    """Sampled centreline and edge lines for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "X", "Y", "heading", "curvature", "left_X", "left_Y", "right_X", "right_Y"])
        for s in np.arange(0.0, sc.spline.length + 1e-9, step):
            p = evaluate(sc.spline, s)
            left, right = sc.edges.lookup(s)
            nx, ny = -np.sin(p.heading), np.cos(p.heading)
            w.writerow([f"{s:.6g}", f"{p.x:.6f}", f"{p.y:.6f}", f"{p.heading:.6f}", f"{p.curvature:.6g}",
                        f"{p.x + left * nx:.6f}", f"{p.y + left * ny:.6f}",
                        f"{p.x + right * nx:.6f}", f"{p.y + right * ny:.6f}"])
