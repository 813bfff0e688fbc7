"""Closed-loop simulation, logging, metrics and the experiment drivers."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .mpcc import Controller, ControllerVariant, TERMS
from .stp import CHANNELS
from .track import Scenario, edge_error, obstacle_error, obstacle_clearance, project
from .vehicle import (ControlInput, Measurement, SingularityError, VehicleState, _derivatives, _rk4,
                      nominal_axle_forces, plant_initial_state, plant_step)

logger = logging.getLogger(__name__)

LOG_SCHEMA_VERSION = 1
SIGMA_STAGES = (0, 5, 10, 15, 19)
OUTCOMES = ("success", "collision", "off-road", "divergence", "timeout")
COLUMNS = (
    ["t", "X", "Y", "psi", "v_x", "v_y", "r", "s", "delta", "F_x",
     "meas_fyf", "meas_fyr", "meas_r", "nom_fyf", "nom_fyr", "nom_r",
     "corr_fyf", "corr_fyr", "corr_r", "pred_fyf", "pred_fyr", "pred_r",
     "feat_delta", "feat_fx"]
    + [f"sig_vy_{k}" for k in SIGMA_STAGES] + [f"sig_r_{k}" for k in SIGMA_STAGES]
    + [f"cost_{t}" for t in TERMS]
    + ["objective", "status", "iterations", "priority", "q_eObs", "sigma_ceiling", "obstacle_ceiling", "clearance"]
)
_STR_COLUMNS = {"status"}


@dataclass
class RunLog:
    """Per-tick trace of one run.

    Row ``k`` holds the plant state and measurement at ``t_k``, the nominal
    and corrected model predictions of the measured channels, and the input
    applied over ``[t_k, t_k + dt)``. ``feat_*`` are the inputs active while
    the measurement was produced (the previous applied input).
    """

    columns: dict
    name: str = ""
    variant: str = ""
    scenario: str = ""
    seed: int = 0
    outcome: str = "timeout"
    reason: str = ""
    dt: float = 0.05

    def __len__(self):
        return len(self.columns["t"])

    def __getitem__(self, key):
        return self.columns[key]

    def mismatch_rows(self):
        """Training rows ``(Z, targets)`` for the process regression.

        Targets are raw mismatches (measured minus nominal); the first row
        has no previous tick and is skipped.
        """
        c = self.columns
        Z = np.column_stack([c["v_x"], c["feat_delta"], c["feat_fx"], c["meas_r"], c["meas_fyf"], c["meas_fyr"]])[1:]
        targets = {
            "dfyf": (c["meas_fyf"] - c["nom_fyf"])[1:],
            "dfyr": (c["meas_fyr"] - c["nom_fyr"])[1:],
            "dr": (c["meas_r"] - c["nom_r"])[1:],
        }
        return Z, targets

    def residual_mismatch(self) -> np.ndarray:
        """Measured minus corrected prediction ``(n-1, 3)``; equals raw mismatch without learning."""
        c = self.columns
        return np.column_stack([c["meas_fyf"] - c["pred_fyf"], c["meas_fyr"] - c["pred_fyr"],
                                c["meas_r"] - c["pred_r"]])[1:]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# schema={LOG_SCHEMA_VERSION} name={self.name} variant={self.variant} scenario={self.scenario} "
                  f"seed={self.seed} outcome={self.outcome} dt={self.dt!r} reason={self.reason.replace(' ', '_')}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(self)):
            w.writerow([self.columns[k][i] if k in _STR_COLUMNS else repr(float(self.columns[k][i]))
                        for k in COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        lines = Path(path).read_text().splitlines()
        meta = dict(kv.split("=", 1) for kv in lines[0][2:].split())
        if int(meta["schema"]) != LOG_SCHEMA_VERSION:
            raise ValueError(f"unsupported log schema {meta['schema']}")
        rows = list(csv.reader(lines[1:]))
        header = rows[0]
        if tuple(header) != tuple(COLUMNS):
            raise ValueError("log columns do not match the schema")
        data = list(zip(*rows[1:])) if len(rows) > 1 else [[] for _ in header]
        cols = {h: (list(v) if h in _STR_COLUMNS else np.array(v, dtype=float)) for h, v in zip(header, data)}
        return cls(cols, meta["name"], meta["variant"], meta["scenario"], int(meta["seed"]), meta["outcome"],
                   meta["reason"].replace("_", " "), float(meta["dt"]))


@dataclass
class Metrics:
    success: bool
    outcome: str
    peak_sideslip: float
    peak_vy: float
    rms_fyf: float
    rms_fyr: float
    rms_r: float
    min_clearance: float
    mean_vx: float
    raw_rms: tuple = (0.0, 0.0, 0.0)

    @property
    def rms(self) -> tuple[float, float, float]:
        return self.rms_fyf, self.rms_fyr, self.rms_r


def _initial_fx(vp, v):
    return vp.drag_coeff * v * v


def check_outcome(state: VehicleState, scenario: Scenario, s: float, vp) -> str | None:
    """Failure/termination reason for the current plant state, or ``None``."""
    x = state.as_array()
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e6:
        return "divergence"
    pos = (state.X, state.Y)
    for ob in scenario.obstacles:
        if obstacle_error(pos, ob, margin=0.5 * vp.width) > 0:
            return "collision"
    if edge_error(pos, s, scenario.edges, scenario.spline, 0.0) > 0:
        return "off-road"
    if s >= scenario.spline.length - 0.5:
        return "success"
    return None


def run_closed_loop(cfg: RunConfig, models: dict | None = None, name: str = "") -> RunLog:
    """Simulate ``cfg`` until the path end, a failure, or the timeout."""
    vp = cfg.vehicle
    fp = cfg.tyre.build(vp)
    pp = cfg.plant.build(vp, fp)
    sc = cfg.scenario.build()
    ocp = cfg.controller
    dt = ocp.dt
    ctl = Controller(sc, ocp, cfg.variant, vp, fp, models if cfg.variant.learning else None)
    v0 = sc.v_ref
    fx0 = _initial_fx(vp, v0)
    ctl.reset(0.0, fx0)
    rng = np.random.default_rng(cfg.seed)
    state0 = VehicleState(0.0, 0.0, 0.0, v0, 0.0, 0.0)
    ps = plant_initial_state(state0, 0.0, fx0, vp, pp)
    meas = Measurement(ps.fy_f, ps.fy_r, state0.r)
    cols = {k: [] for k in COLUMNS}
    prev_state, prev_in, prev_corr = None, np.array([0.0, fx0]), np.zeros(3)
    outcome, reason = "timeout", f"no finish within {cfg.timeout:g} s"
    n_steps = int(round(cfg.timeout / dt))
    s = 0.0
    for k in range(n_steps + 1):
        st = ps.vehicle
        s = project(sc.spline, st.X, st.Y, s)
        res = check_outcome(st, sc, s, vp)
        if res is not None:
            outcome = res
            reason = {"success": "reached path end", "collision": f"obstacle hit at X={st.X:.1f}",
                      "off-road": f"left the road at X={st.X:.1f}", "divergence": "state diverged"}[res]
            break
        if k == n_steps:
            break
        # nominal and corrected predictions of what was just measured
        x = st.as_array()
        fyf, fyr = nominal_axle_forces(x, np.array([prev_in[0], 0.0]), vp, fp)
        if prev_state is None:
            nom_r = pred_r = st.r
        else:
            u = prev_in
            nom_r = float(_rk4(lambda z: _derivatives(z, u, np.zeros(3), vp, fp), prev_state.as_array(), dt)[5])
            pred_r = float(_rk4(lambda z: _derivatives(z, u, prev_corr, vp, fp), prev_state.as_array(), dt)[5])
        try:
            delta, fx, sol, diag = ctl.step(st, meas)
        except (SingularityError, np.linalg.LinAlgError, FloatingPointError) as exc:
            outcome, reason = "divergence", f"controller error: {exc}"
            break
        corr = diag["corr"]
        row = {
            "t": k * dt, "X": st.X, "Y": st.Y, "psi": st.psi, "v_x": st.v_x, "v_y": st.v_y, "r": st.r, "s": s,
            "delta": delta, "F_x": fx, "meas_fyf": meas.fy_f, "meas_fyr": meas.fy_r, "meas_r": meas.r,
            "nom_fyf": float(fyf), "nom_fyr": float(fyr), "nom_r": nom_r,
            "corr_fyf": corr[0, 0], "corr_fyr": corr[0, 1], "corr_r": corr[0, 2],
            # one-step-ahead: the correction planned for the last interval, not one fitted to this measurement
            "pred_fyf": float(fyf) + prev_corr[0], "pred_fyr": float(fyr) + prev_corr[1], "pred_r": pred_r,
            "feat_delta": prev_in[0], "feat_fx": prev_in[1],
            "objective": diag["objective"], "status": diag["status"], "iterations": diag["iterations"],
            "priority": float(diag["priority"]), "q_eObs": diag["q_eObs"], "sigma_ceiling": diag["sigma_ceiling"],
            "obstacle_ceiling": diag["obstacle_ceiling"],
            "clearance": min((float(obstacle_clearance(st.X, st.Y, ob)) for ob in sc.obstacles), default=np.inf),
        }
        for j in SIGMA_STAGES:
            row[f"sig_vy_{j}"] = diag["sig_vy"][j] if j < len(diag["sig_vy"]) else 0.0
            row[f"sig_r_{j}"] = diag["sig_r"][j] if j < len(diag["sig_r"]) else 0.0
        for t in TERMS:
            row[f"cost_{t}"] = diag["costs"].get(t, 0.0)
        for kk in COLUMNS:
            cols[kk].append(row[kk])
        prev_state, prev_in, prev_corr = st, np.array([delta, fx]), corr[0].copy()
        try:
            ps, meas = plant_step(ps, ControlInput(delta, fx), dt, vp, pp, rng if cfg.plant.noise else None)
        except SingularityError as exc:
            outcome, reason = "divergence", str(exc)
            break
    columns = {k: (v if k in _STR_COLUMNS else np.array(v, dtype=float)) for k, v in cols.items()}
    log = RunLog(columns, name or f"{sc.name}-{cfg.variant.value}", cfg.variant.value, sc.name, cfg.seed,
                 outcome, reason, dt)
    logger.info("run %s: %s (%s)", log.name, outcome, reason)
    return log


def _rms(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.mean(a * a))) if a.size else 0.0


def compute_metrics(log: RunLog, scenario: Scenario | None = None) -> Metrics:
    """Summary metrics of one run; sideslip from the plant state.

    Mismatch RMS compares the measurements with the model the controller
    actually used (nominal plus applied correction); ``raw_rms`` uses the
    nominal model alone.
    """
    if len(log) == 0:
        raise ValueError("empty run log")
    c = log.columns
    beta = np.arctan2(c["v_y"], c["v_x"])
    res = log.residual_mismatch()
    _, raw = log.mismatch_rows()
    if scenario is not None and scenario.obstacles:
        clear = min(float(np.min(obstacle_clearance(c["X"], c["Y"], ob))) for ob in scenario.obstacles)
    else:
        clear = float(np.min(c["clearance"]))
    if not np.isfinite(clear):
        clear = 1e9
    return Metrics(
        success=log.outcome == "success",
        outcome=log.outcome,
        peak_sideslip=float(np.max(np.abs(beta))),
        peak_vy=float(np.max(np.abs(c["v_y"]))),
        rms_fyf=_rms(res[:, 0]),
        rms_fyr=_rms(res[:, 1]),
        rms_r=_rms(res[:, 2]),
        min_clearance=clear,
        mean_vx=float(np.mean(c["v_x"])),
        raw_rms=tuple(_rms(raw[ch]) for ch in CHANNELS),
    )


@dataclass
class SweepResult:
    variant: str
    speeds: list
    outcomes: list
    reasons: list
    metrics: list = field(default_factory=list)

    @property
    def max_speed(self) -> float | None:
        ok = [v for v, o in zip(self.speeds, self.outcomes) if o == "success"]
        return max(ok) if ok else None


def speed_sweep(cfg: RunConfig, variant, speeds, models: dict | None = None, logs: list | None = None) -> SweepResult:
    """Run every speed (ascending) and report the highest successful one."""
    speeds = [float(v) for v in speeds]
    if any(b <= a for a, b in zip(speeds, speeds[1:])):
        raise ValueError("speeds must be strictly ascending")
    variant = ControllerVariant(variant)
    out = SweepResult(variant.value, speeds, [], [])
    for v in speeds:
        log = run_closed_loop(cfg.with_speed(v).with_variant(variant), models)
        out.outcomes.append(log.outcome)
        out.reasons.append(log.reason)
        out.metrics.append(compute_metrics(log))
        if logs is not None:
            logs.append(log)
    return out


def sweep_table(results: list[SweepResult]) -> str:
    """Markdown table of per-speed outcomes with the max-speed summary."""
    speeds = results[0].speeds
    lines = ["| speed [km/h] | " + " | ".join(r.variant for r in results) + " |",
             "|---|" + "---|" * len(results)]
    for i, v in enumerate(speeds):
        lines.append(f"| {v:g} | " + " | ".join(r.outcomes[i] for r in results) + " |")
    lines.append("| max | " + " | ".join("none" if r.max_speed is None else f"{r.max_speed:g}" for r in results) + " |")
    base = results[0].max_speed
    for r in results[1:]:
        if base and r.max_speed:
            lines.append(f"\nmax-speed ratio {r.variant}/{results[0].variant}: {r.max_speed / base:.4f}")
    return "\n".join(lines)


TRAINING_RUNS = (("dlc", 55.0), ("dlc", 80.0), ("dlc-priority", 55.0))
TEST_RUNS = (("dlc", 60.0), ("dlc-priority", 60.0))


def generate_training_runs(cfg: RunConfig, out_dir, seed: int | None = None):
    """Run the baseline on the training and test manoeuvres and write the logs.

    Returns ``(train_logs, test_logs)``; files go to ``out_dir/train`` and
    ``out_dir/test``. A diverging training run aborts generation.
    """
    out_dir = Path(out_dir)
    base = cfg.with_variant(ControllerVariant.MPCC)
    if seed is not None:
        base = RunConfig(**{**base.__dict__, "seed": seed})
    result = []
    for sub, runs in (("train", TRAINING_RUNS), ("test", TEST_RUNS)):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
        logs = []
        for i, (kind, kmh) in enumerate(runs):
            c = base.with_scenario(kind, kmh)
            c = RunConfig(**{**c.__dict__, "seed": base.seed + i})
            log = run_closed_loop(c, name=f"{sub}-{kind}-{kmh:g}")
            if log.outcome == "divergence" and sub == "train":
                raise RuntimeError(f"training run {log.name} diverged: {log.reason}")
            log.to_csv(out_dir / sub / f"{log.name}.csv")
            logs.append(log)
        result.append(logs)
    return result[0], result[1]


def load_logs(directory) -> list[RunLog]:
    return [RunLog.from_csv(p) for p in sorted(Path(directory).glob("*.csv"))]


def _pct(new, ref):
    if ref == 0:
        return 0.0 if new == 0 else math.inf
    return 100.0 * (ref - new) / ref


def compare_report(logs: dict, path=None, max_speeds: dict | None = None) -> str:
    """Markdown table of metrics per variant with reductions vs the first variant.

    ``logs`` maps variant name to a run log or a list of logs; lists are
    pooled (RMS over all ticks, peaks over all runs). Every variant must
    cover the same scenarios.
    """
    names = list(logs)
    if len(names) < 2:
        raise ValueError("need at least two variants to compare")
    groups = {k: (v if isinstance(v, (list, tuple)) else [v]) for k, v in logs.items()}
    ref_sc = sorted(lg.scenario for lg in groups[names[0]])
    for k in names[1:]:
        if sorted(lg.scenario for lg in groups[k]) != ref_sc:
            raise ValueError(f"variant {k} was run on different scenarios")
    pooled = {k: pooled_metrics(g) for k, g in groups.items()}
    ref = names[0]
    rows = ["| metric | " + " | ".join(names) + " |", "|---|" + "---|" * len(names)]
    fields = [("RMS dFyF [N]", "rms_fyf"), ("RMS dFyR [N]", "rms_fyr"), ("RMS dr [rad/s]", "rms_r"),
              ("peak |beta| [rad]", "peak_sideslip"), ("peak |v_y| [m/s]", "peak_vy"),
              ("min clearance [m]", "min_clearance"), ("mean v_x [m/s]", "mean_vx")]
    for label, f in fields:
        rows.append(f"| {label} | " + " | ".join(f"{pooled[k][f]:.6g}" for k in names) + " |")
    rows.append("| success | " + " | ".join(str(pooled[k]["success"]) for k in names) + " |")
    rows.append("")
    rows.append("| reduction vs " + ref + " [%] | " + " | ".join(names[1:]) + " |")
    rows.append("|---|" + "---|" * (len(names) - 1))
    for label, f in fields[:5]:
        rows.append(f"| {label} | " + " | ".join(f"{_pct(pooled[k][f], pooled[ref][f]):.2f}" for k in names[1:]) + " |")
    if max_speeds:
        rows.append("| max-speed gain | " + " | ".join(
            "n/a" if not (max_speeds.get(k) and max_speeds.get(ref))
            else f"{100.0 * (max_speeds[k] / max_speeds[ref] - 1.0):.2f}" for k in names[1:]) + " |")
    text = "\n".join(rows) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def pooled_metrics(logs) -> dict:
    """Metrics pooled over several runs (RMS over all ticks, peaks over all runs)."""
    res = np.vstack([lg.residual_mismatch() for lg in logs])
    ms = [compute_metrics(lg) for lg in logs]
    return {
        "rms_fyf": _rms(res[:, 0]), "rms_fyr": _rms(res[:, 1]), "rms_r": _rms(res[:, 2]),
        "peak_sideslip": max(m.peak_sideslip for m in ms), "peak_vy": max(m.peak_vy for m in ms),
        "min_clearance": min(m.min_clearance for m in ms), "mean_vx": float(np.mean([m.mean_vx for m in ms])),
        "success": all(m.success for m in ms),
    }
