"""Closed-loop two-gripper grasp environment and the controllers under test.

The world is deliberately simple: each gripper is the double integrator the
controller assumes, contact depth follows from openings and object widths
(with a cross-site coupling term: squeezing one side bulges the other), and
slip is a hard opening threshold.  Tangential load in the tactile signal
ramps up as an opening approaches the measured slip onset, which sits a
grip-reserve below the threshold where the object is actually dropped.

Success means holding the object for the whole episode without crossing the
slip threshold on either site and without crushing it below the damage
margin, while scheduled velocity impulses (transport bumps) disturb the
grippers.  Controllers observe embeddings, openings and velocities only;
object parameters are never exposed to them.
"""

import csv
import enum
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MpcConfig, MpcParams
from .errors import ConfigError, EpisodeOver, NeverSettled, SolverFailed
from .lifting import GripperState
from .mpc import MpcEngine, SingleAgentEngine, decoupled_weight_blocks
from .qp import SolverSettings
from .tactile import (DEFAULT_SENSOR_SEED, MaterialScene, encode,
                      make_encoders, resolve_contact)


class GraspStatus(enum.Enum):
    Holding = "holding"
    Slipped = "slipped"
    Damaged = "damaged"


@dataclass
class ObjectModel:
    """Per-site geometry and failure thresholds of one grasped object."""
    name: str
    width: tuple            # (w1, w2) undeformed width at each site, mm
    stiffness: float        # kappa, N/mm
    slip_margin: tuple      # opening above which the object is dropped
    damage_margin: tuple    # opening below which the object is damaged
    mass: float = 1.0       # scales how hard transport bumps shake the grasp
    coupling: float = 0.0
    grip_reserve: float = 0.8   # slip onset sits this far below slip_margin
    init_backoff: float = 2.0   # episode starts this far below the onset
    drift_amp: float = 0.0      # slow anti-phase width drift (content shift)
    drift_period: float = 6.0

    def __post_init__(self):
        for i in (0, 1):
            if not (self.damage_margin[i] < self.slip_margin[i]
                    <= self.width[i]):
                raise ConfigError(
                    f"{self.name}: need damage < slip <= width at site {i + 1}")

    def slip_onset(self):
        return (self.slip_margin[0] - self.grip_reserve,
                self.slip_margin[1] - self.grip_reserve)

    def scene(self, t: float) -> MaterialScene:
        w1, w2 = self.width
        if self.drift_amp > 0:
            w = 2.0 * np.pi * t / self.drift_period
            w1 = w1 + self.drift_amp * np.sin(w)
            w2 = w2 - self.drift_amp * np.sin(w)
        o1, o2 = self.slip_onset()
        return MaterialScene(
            width1=w1, width2=w2, kappa=self.stiffness,
            coupling=self.coupling,
            slip_onset1=o1, slip_onset2=o2,
            slip_margin1=self.slip_margin[0], slip_margin2=self.slip_margin[1])


def _obj(name, width, onset_depth, stiffness, coupling, crush_depth,
         mass=1.0, grip_reserve=0.8, init_backoff=2.0, drift_amp=0.0):
    """Menu helper: onset at width - 2*onset_depth, drop a grip-reserve above,
    damage at width - 2*crush_depth."""
    w = np.asarray(width, dtype=float)
    onset = w - 2.0 * onset_depth
    return ObjectModel(
        name=name, width=tuple(w),
        stiffness=stiffness,
        slip_margin=tuple(onset + grip_reserve),
        damage_margin=tuple(w - 2.0 * crush_depth),
        mass=mass, coupling=coupling, grip_reserve=grip_reserve,
        init_backoff=init_backoff, drift_amp=drift_amp)


def object_menu() -> dict:
    """Five synthetic objects spanning stiffness, coupling and fragility."""
    return {
        "rigid_tube": _obj("rigid_tube", (44.0, 44.0), onset_depth=1.0,
                           stiffness=4.0, coupling=0.10, crush_depth=4.0),
        "compliant_cylinder": _obj("compliant_cylinder", (42.0, 39.0),
                                   onset_depth=1.0, stiffness=0.5,
                                   coupling=0.35, crush_depth=4.0),
        "crushable_can": _obj("crushable_can", (46.0, 46.0), onset_depth=1.0,
                              stiffness=2.0, coupling=0.10, crush_depth=1.8,
                              init_backoff=1.0),
        "stiff_pipe": _obj("stiff_pipe", (45.0, 45.0), onset_depth=1.0,
                           stiffness=5.0, coupling=0.05, crush_depth=4.0,
                           mass=1.2),
        "granular_bag": _obj("granular_bag", (40.0, 40.0), onset_depth=1.0,
                             stiffness=0.25, coupling=0.45, crush_depth=5.0,
                             mass=1.3, drift_amp=0.6),
    }

COMPLIANT_OBJECTS = ("compliant_cylinder", "granular_bag")


@dataclass
class Disturbance:
    tick: int
    agent: int      # 0 or 1
    dv: float       # mm/s impulse


@dataclass
class GraspWorld:
    obj: ObjectModel
    grippers: list
    dt: float
    t: float = 0.0
    tick: int = 0
    status: GraspStatus = GraspStatus.Holding
    disturbances: list = field(default_factory=list)

    def contact(self):
        scene = self.obj.scene(self.t)
        return resolve_contact(scene, self.grippers[0].p, self.grippers[1].p)


def world_step(world: GraspWorld, actions, dt=None) -> GraspWorld:
    """Advance one tick: apply scheduled impulses, integrate both grippers,
    then re-evaluate slip/damage.  Absorbing on failure."""
    if world.status is not GraspStatus.Holding:
        raise EpisodeOver(f"episode already ended: {world.status.value}")
    dt = world.dt if dt is None else dt
    a = np.asarray(actions, dtype=float)
    for d in world.disturbances:
        if d.tick == world.tick:
            g = world.grippers[d.agent]
            world.grippers[d.agent] = GripperState(g.p, g.v + d.dv)
    for i in (0, 1):
        g = world.grippers[i]
        world.grippers[i] = GripperState(
            p=g.p + dt * g.v + 0.5 * dt * dt * a[i],
            v=g.v + dt * a[i])
    world.t += dt
    world.tick += 1
    for i in (0, 1):
        if world.grippers[i].p < world.obj.damage_margin[i]:
            world.status = GraspStatus.Damaged
            return world
    for i in (0, 1):
        if world.grippers[i].p > world.obj.slip_margin[i]:
            world.status = GraspStatus.Slipped
            return world
    return world


# -- controllers ------------------------------------------------------------------

@dataclass
class Observation:
    """Everything a controller is allowed to see."""
    t: float
    f1: np.ndarray
    f2: np.ndarray
    s1: GripperState
    s2: GripperState


class PdController:
    """Per-agent PD on the embedding norm, a = Kp (target - |f|) - Kd v,
    calibrated to whatever signature it saw first.  Near the slip onset the
    tangential-load channel makes |f| grow with opening, so this sign is
    restoring there; deep in the squeeze the depth channel dominates with the
    opposite slope, which is exactly where this baseline gets into trouble."""

    name = "pd"

    def __init__(self, kp: float = 400.0, kd: float = 40.0):
        self.kp = kp
        self.kd = kd
        self.targets = None

    def act(self, obs: Observation):
        norms = (float(np.linalg.norm(obs.f1)), float(np.linalg.norm(obs.f2)))
        if self.targets is None:
            self.targets = norms
        a = [self.kp * (self.targets[i] - norms[i])
             - self.kd * (obs.s1.v if i == 0 else obs.s2.v)
             for i in (0, 1)]
        return float(a[0]), float(a[1])


class MultiMpcController:
    """Coupled two-agent layer, warm-started across ticks."""

    name = "multi"

    def __init__(self, params: MpcParams, cfg: MpcConfig,
                 settings: SolverSettings | None = None):
        self.engine = MpcEngine(params, cfg, settings)
        self.warm = None
        self.failures = 0

    def act(self, obs: Observation):
        try:
            out = self.engine.forward(obs.s1, obs.s2, obs.f1, obs.f2,
                                      warm=self.warm)
        except SolverFailed:
            self.failures += 1
            self.warm = None
            return 0.0, 0.0
        self.warm = out.qp
        return float(out.a_star[0]), float(out.a_star[1])


class SingleMpcController:
    """Two independent single-agent layers sharing the same learned
    parameters with the coupling zeroed: the decoupled baseline."""

    name = "single"

    def __init__(self, params: MpcParams, cfg: MpcConfig,
                 settings: SolverSettings | None = None):
        W1, W2 = decoupled_weight_blocks(params, cfg)
        self.engines = (SingleAgentEngine(W1, params.A_f, cfg, settings),
                        SingleAgentEngine(W2, params.A_f, cfg, settings))
        self.warm = [None, None]
        self.failures = 0

    def act(self, obs: Observation):
        out = []
        for i, (s, f) in enumerate(((obs.s1, obs.f1), (obs.s2, obs.f2))):
            try:
                a0, _, sol = self.engines[i].forward(s, f, warm=self.warm[i])
                self.warm[i] = sol
                out.append(a0)
            except SolverFailed:
                self.failures += 1
                self.warm[i] = None
                out.append(0.0)
        return float(out[0]), float(out[1])


# -- episodes --------------------------------------------------------------------

@dataclass
class EpisodeConfig:
    obj: ObjectModel
    duration: float = 15.0
    impulse: float = 20.0          # mm/s base magnitude of transport bumps
    impulse_times: tuple = (4.0, 9.0)
    noise_sigma: float = 0.01
    sensor_seed: int = DEFAULT_SENSOR_SEED
    init_openings: tuple | None = None   # override the default firm grasp


@dataclass
class EpisodeResult:
    success: bool
    hold_duration: float
    status: GraspStatus
    times: np.ndarray
    opening_traces: np.ndarray     # (2, T)
    velocity_traces: np.ndarray
    action_traces: np.ndarray
    status_trace: list
    controller_runtime_stats: dict
    controller: str
    object_name: str
    seed: int


def make_controller(kind: str, params: MpcParams | None, cfg: MpcConfig,
                    settings: SolverSettings | None = None):
    if kind == "multi":
        if params is None:
            raise ConfigError("multi controller needs parameters")
        return MultiMpcController(params, cfg, settings)
    if kind == "single":
        if params is None:
            raise ConfigError("single controller needs parameters")
        return SingleMpcController(params, cfg, settings)
    if kind == "pd":
        return PdController()
    raise ConfigError(f"unknown controller {kind!r}")


def run_episode(controller, ep: EpisodeConfig, cfg: MpcConfig,
                seed: int) -> EpisodeResult:
    """Tick the world at 1/dt Hz under one controller.

    ``controller`` is a controller object or one of "multi"/"single"/"pd"
    resolved against trained parameters via make_controller beforehand.
    Identical (controller, config, seed) reproduce identical traces.
    """
    if isinstance(controller, str):
        raise ConfigError("pass a controller instance (see make_controller)")
    obj = ep.obj
    dt = cfg.dt
    n_ticks = int(round(ep.duration / dt))
    rng = np.random.default_rng(seed)
    onset = obj.slip_onset()
    if ep.init_openings is not None:
        grippers = [GripperState(ep.init_openings[0], 0.0),
                    GripperState(ep.init_openings[1], 0.0)]
    else:
        grippers = [GripperState(onset[0] - obj.init_backoff, 0.0),
                    GripperState(onset[1] - obj.init_backoff, 0.0)]
    first = int(rng.integers(0, 2))
    disturbances = [
        Disturbance(tick=int(round(tt / dt)),
                    agent=(first + j) % 2,
                    dv=float(rng.choice([-1.0, 1.0]) * ep.impulse * obj.mass))
        for j, tt in enumerate(ep.impulse_times)]
    world = GraspWorld(obj=obj, grippers=grippers, dt=dt,
                       disturbances=disturbances)
    enc1, enc2 = make_encoders(cfg.M, ep.sensor_seed, ep.noise_sigma)

    times = np.zeros(n_ticks)
    popen = np.zeros((2, n_ticks))
    pvel = np.zeros((2, n_ticks))
    pact = np.zeros((2, n_ticks))
    status_trace = []
    solve_times = []
    hold_duration = ep.duration
    for i in range(n_ticks):
        c1, c2 = world.contact()
        obs = Observation(t=world.t,
                          f1=encode(enc1, c1), f2=encode(enc2, c2),
                          s1=world.grippers[0], s2=world.grippers[1])
        t0 = time.perf_counter()
        a1, a2 = controller.act(obs)
        solve_times.append(time.perf_counter() - t0)
        a1 = float(np.clip(a1, cfg.a_min, cfg.a_max))
        a2 = float(np.clip(a2, cfg.a_min, cfg.a_max))
        times[i] = world.t
        popen[:, i] = [world.grippers[0].p, world.grippers[1].p]
        pvel[:, i] = [world.grippers[0].v, world.grippers[1].v]
        pact[:, i] = [a1, a2]
        world_step(world, (a1, a2))
        status_trace.append(world.status.value)
        if world.status is not GraspStatus.Holding:
            hold_duration = world.t
            times = times[:i + 1]
            popen = popen[:, :i + 1]
            pvel = pvel[:, :i + 1]
            pact = pact[:, :i + 1]
            break
    st = np.array(solve_times)
    runtime_stats = {
        "ticks": int(st.size),
        "median_s": float(np.median(st)),
        "p90_s": float(np.percentile(st, 90)),
        "max_s": float(np.max(st)),
    }
    success = (world.status is GraspStatus.Holding
               and ep.duration >= 15.0 and hold_duration >= 15.0)
    return EpisodeResult(
        success=success, hold_duration=hold_duration, status=world.status,
        times=times, opening_traces=popen, velocity_traces=pvel,
        action_traces=pact, status_trace=status_trace,
        controller_runtime_stats=runtime_stats,
        controller=getattr(controller, "name", type(controller).__name__),
        object_name=obj.name, seed=seed)


def stability_metrics(result: EpisodeResult, settle_tol: float = 0.5,
                      min_window: float = 2.0) -> dict:
    """Post-settle behaviour: mean |opening gap|, settle time, and the
    variance of the gap after settling.  Raises NeverSettled when less than
    ``min_window`` seconds of settled trace remain."""
    p = result.opening_traces
    if p.size == 0:
        raise NeverSettled("empty traces")
    T = p.shape[1]
    settle_idx = 0
    for i in (0, 1):
        dev = np.abs(p[i] - p[i, -1]) > settle_tol
        last_bad = int(np.max(np.where(dev)[0])) if np.any(dev) else -1
        settle_idx = max(settle_idx, last_bad + 1)
    dt = float(result.times[1] - result.times[0]) if T > 1 else 0.0
    if (T - settle_idx) * dt < min_window:
        raise NeverSettled(
            f"only {(T - settle_idx) * dt:.2f}s of settled trace")
    gap = p[0, settle_idx:] - p[1, settle_idx:]
    return {
        "inter_agent_gap": float(np.mean(np.abs(gap))),
        "settle_time": float(settle_idx * dt),
        "post_settle_variance": float(np.var(gap)),
    }


def export_trace_csv(result: EpisodeResult, path):
    """Plot-ready per-tick trace: t, p1, v1, a1, p2, v2, a2, status."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "p1", "v1", "a1", "p2", "v2", "a2", "status"])
        for i in range(result.times.size):
            w.writerow([f"{result.times[i]:.4f}",
                        f"{result.opening_traces[0, i]:.6f}",
                        f"{result.velocity_traces[0, i]:.6f}",
                        f"{result.action_traces[0, i]:.6f}",
                        f"{result.opening_traces[1, i]:.6f}",
                        f"{result.velocity_traces[1, i]:.6f}",
                        f"{result.action_traces[1, i]:.6f}",
                        result.status_trace[i]])


# -- study ------------------------------------------------------------------------

def run_suite(params: MpcParams, cfg: MpcConfig, episodes: int = 10,
              seed: int = 0, objects=None, controllers=("multi", "single", "pd"),
              duration: float = 15.0, settings: SolverSettings | None = None):
    """The grasp study: episodes x objects x controllers, per-episode seeds
    shared across controllers so everyone faces the same disturbances."""
    menu = object_menu()
    names = list(objects) if objects else list(menu)
    results = {}
    for obj_name in names:
        obj = menu[obj_name]
        for ctrl_name in controllers:
            cell = []
            for e in range(episodes):
                ctrl = make_controller(ctrl_name, params, cfg, settings)
                ep = EpisodeConfig(obj=obj, duration=duration)
                cell.append(run_episode(ctrl, ep, cfg, seed=seed * 1000 + e))
            results[(obj_name, ctrl_name)] = cell
    return results


def suite_summary(results) -> list:
    """Rows of (object, controller, successes, episodes, success_rate,
    mean_gap, mean_post_settle_variance)."""
    rows = []
    for (obj_name, ctrl_name), cell in sorted(results.items()):
        succ = sum(1 for r in cell if r.success)
        gaps, variances = [], []
        for r in cell:
            try:
                m = stability_metrics(r)
            except NeverSettled:
                continue
            gaps.append(m["inter_agent_gap"])
            variances.append(m["post_settle_variance"])
        rows.append({
            "object": obj_name,
            "controller": ctrl_name,
            "successes": succ,
            "episodes": len(cell),
            "success_rate": succ / len(cell),
            "mean_gap": float(np.mean(gaps)) if gaps else float("nan"),
            "mean_post_settle_variance":
                float(np.mean(variances)) if variances else float("nan"),
        })
    return rows


def export_suite_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
