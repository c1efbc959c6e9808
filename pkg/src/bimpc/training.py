"""End-to-end training of the MPC layer on collected trials.

Each training sample is one saved frame: both embeddings plus both gripper
states.  The ground-truth trajectory for an agent is its measured slippage
opening expanded across all prediction steps (the only label the collection
protocol produces), with the final step additionally scaled by S inside the
MSE, so the terminal carries weight S^2 relative to the rest.  All MSEs
average over their elements.

Parameters stay valid by construction: the per-agent penalty blocks are
updated through their Cholesky factors, and the assembled weight is floored
at every step, so no projection is ever needed.  The optimizer is RMSprop
(adaptive, momentum-free) with standard defaults.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MpcConfig, MpcParams
from .errors import DegenerateActiveSet, DimensionMismatch, SolverFailed
from .lifting import GripperState
from .mpc import GradOut, MpcEngine, forward, save_checkpoint
from .qp import SolverSettings
from .tactile import load_manifest, read_trial

_PARAM_FIELDS = ("A_f", "C_f", "Q1", "Q2", "Qc", "alpha")


@dataclass
class TrainConfig:
    S: float = 3.0                 # terminal scaling inside the MSE
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    rms_decay: float = 0.99        # RMSprop defaults
    rms_eps: float = 1e-8
    frames_per_subtrial: int = 3   # evenly spaced frames used per sub-trial
    val_fraction: float = 0.2      # held-out fraction of trials
    fail_budget: float = 0.10      # abort when a batch fails beyond this

    def __post_init__(self):
        if self.S <= 0:
            raise ValueError("S must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class Batch:
    """Inputs and targets for a set of samples."""
    F1: np.ndarray         # (B, M) embeddings
    F2: np.ndarray
    states1: np.ndarray    # (B, 2) as (p, v)
    states2: np.ndarray
    y1: np.ndarray         # (B,) slippage-opening labels per agent
    y2: np.ndarray

    @property
    def size(self) -> int:
        return self.F1.shape[0]

    def targets(self, N: int):
        """Expanded trajectories (B, N) per agent."""
        return (np.repeat(self.y1[:, None], N, axis=1),
                np.repeat(self.y2[:, None], N, axis=1))


def loss(pred1, pred2, batch: Batch, S: float) -> float:
    """MSE over both expanded trajectories plus S-scaled terminal MSEs."""
    pred1 = np.atleast_2d(np.asarray(pred1, dtype=float))
    pred2 = np.atleast_2d(np.asarray(pred2, dtype=float))
    N = pred1.shape[1]
    if pred2.shape != pred1.shape or pred1.shape[0] != batch.size:
        raise DimensionMismatch("prediction shapes do not match the batch")
    Y1, Y2 = batch.targets(N)
    total = float(np.mean((pred1 - Y1) ** 2) + np.mean((pred2 - Y2) ** 2))
    total += float(np.mean((S * pred1[:, -1] - S * batch.y1) ** 2))
    total += float(np.mean((S * pred2[:, -1] - S * batch.y2) ** 2))
    return total


def loss_gradients(pred1, pred2, batch: Batch, S: float):
    """d loss / d predictions, shapes (B, N) each."""
    pred1 = np.atleast_2d(np.asarray(pred1, dtype=float))
    pred2 = np.atleast_2d(np.asarray(pred2, dtype=float))
    B, N = pred1.shape
    Y1, Y2 = batch.targets(N)
    g1 = 2.0 * (pred1 - Y1) / (B * N)
    g2 = 2.0 * (pred2 - Y2) / (B * N)
    g1[:, -1] += 2.0 * S * S * (pred1[:, -1] - batch.y1) / B
    g2[:, -1] += 2.0 * S * S * (pred2[:, -1] - batch.y2) / B
    return g1, g2


# -- dataset loading -------------------------------------------------------------

@dataclass
class TrainingData:
    train: Batch
    val: Batch
    M: int


def _frame_indices(n_frames: int, k: int):
    return np.unique(np.linspace(0, n_frames - 1, k).round().astype(int))


def load_training_data(dataset_dir, mpc_cfg: MpcConfig,
                       cfg: TrainConfig) -> TrainingData:
    """Build train/val sample batches from a generated dataset directory.

    The split holds out whole trials.  Per sub-trial, ``frames_per_subtrial``
    evenly spaced frames become samples; the active agent moves at the
    protocol's opening rate, the holder is at rest.  Each agent's label is
    the slippage opening measured in its own sweep of the same trial.
    """
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    open_rate = manifest["protocol"]["open_rate"]
    n_trials = manifest["n_trials"]
    n_val = max(1, int(round(cfg.val_fraction * n_trials))) \
        if cfg.val_fraction > 0 else 0
    val_ids = set(range(n_trials - n_val, n_trials))

    buckets = {False: [], True: []}
    for trial in manifest["trials"]:
        slips_by_agent = {}
        for st in trial["subtrials"]:
            slips_by_agent.setdefault(st["active_agent"],
                                      st["slippage_opening"])
        for st in trial["subtrials"]:
            rec = read_trial(dataset_dir / st["dir"])
            active = rec.active_agent
            y = {active: rec.slippage_opening,
                 3 - active: slips_by_agent[3 - active]}
            for j in _frame_indices(len(rec.frames), cfg.frames_per_subtrial):
                fr = rec.frames[j]
                v1 = open_rate if active == 1 else 0.0
                v2 = open_rate if active == 2 else 0.0
                buckets[trial["trial_id"] in val_ids].append((
                    fr.f1.astype(float), fr.f2.astype(float),
                    (fr.opening1, v1), (fr.opening2, v2), y[1], y[2]))

    def _batch(rows):
        if not rows:
            return Batch(F1=np.zeros((0, manifest["encoder"]["M"])),
                         F2=np.zeros((0, manifest["encoder"]["M"])),
                         states1=np.zeros((0, 2)), states2=np.zeros((0, 2)),
                         y1=np.zeros(0), y2=np.zeros(0))
        f1, f2, s1, s2, y1, y2 = zip(*rows)
        return Batch(F1=np.array(f1), F2=np.array(f2),
                     states1=np.array(s1), states2=np.array(s2),
                     y1=np.array(y1), y2=np.array(y2))

    data = TrainingData(train=_batch(buckets[False]),
                        val=_batch(buckets[True]),
                        M=manifest["encoder"]["M"])
    if data.M != mpc_cfg.M:
        raise DimensionMismatch(
            f"dataset embeddings have M={data.M}, config expects {mpc_cfg.M}")
    return data


def _subset(batch: Batch, idx) -> Batch:
    return Batch(F1=batch.F1[idx], F2=batch.F2[idx],
                 states1=batch.states1[idx], states2=batch.states2[idx],
                 y1=batch.y1[idx], y2=batch.y2[idx])


# -- forward/backward over a batch ------------------------------------------------

def _predict(engine: MpcEngine, batch: Batch):
    outs, failures = engine.forward_batch(batch.states1, batch.states2,
                                          batch.F1, batch.F2)
    ok = [i for i, o in enumerate(outs) if o is not None]
    pred1 = np.array([outs[i].predicted_openings[0] for i in ok])
    pred2 = np.array([outs[i].predicted_openings[1] for i in ok])
    return outs, ok, pred1, pred2, failures


def evaluate(params: MpcParams, mpc_cfg: MpcConfig, batch: Batch,
             S: float, settings: SolverSettings | None = None):
    """Loss and median absolute terminal-opening error on a batch."""
    engine = MpcEngine(params, mpc_cfg, settings)
    outs, ok, pred1, pred2, failures = _predict(engine, batch)
    sub = _subset(batch, ok)
    l = loss(pred1, pred2, sub, S)
    term_err = np.concatenate([np.abs(pred1[:, -1] - sub.y1),
                               np.abs(pred2[:, -1] - sub.y2)])
    return l, float(np.median(term_err)), failures


def train(dataset_dir, cfg: TrainConfig, init: MpcParams,
          mpc_cfg: MpcConfig | None = None, out_dir=None,
          settings: SolverSettings | None = None):
    """RMSprop training loop; returns (trained params, history).

    History rows carry (epoch, train_loss, val_loss).  QP failures within a
    batch are skipped and counted; a batch with more than ``fail_budget`` of
    its samples failing aborts the run.  If ``out_dir`` is given, a
    checkpoint is written per epoch plus a loss-history CSV.
    """
    mpc_cfg = mpc_cfg or MpcConfig()
    data = load_training_data(dataset_dir, mpc_cfg, cfg)
    if data.train.size == 0:
        raise SolverFailed("dataset produced no training samples")
    params = init.copy()
    rng = np.random.default_rng(cfg.seed)
    sq = {f: np.zeros_like(getattr(params, f)) if f != "alpha" else 0.0
          for f in _PARAM_FIELDS}
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    n = data.train.size
    lr = cfg.learning_rate
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = _subset(data.train, idx)
            engine = MpcEngine(params, mpc_cfg, settings)
            outs, ok, pred1, pred2, failures = _predict(engine, batch)
            if failures > cfg.fail_budget * batch.size:
                raise SolverFailed(
                    f"{failures}/{batch.size} QP failures in one batch")
            sub = _subset(batch, ok)
            batch_loss = loss(pred1, pred2, sub, cfg.S)
            g1, g2 = loss_gradients(pred1, pred2, sub, cfg.S)
            acc = {f: np.zeros_like(getattr(params, f)) if f != "alpha" else 0.0
                   for f in _PARAM_FIELDS}
            skipped = 0
            for row, i in enumerate(ok):
                s1 = GripperState(*batch.states1[i])
                s2 = GripperState(*batch.states2[i])
                grads = engine.backward(
                    s1, s2, batch.F1[i], batch.F2[i], outs[i],
                    GradOut(d_openings=np.vstack([g1[row], g2[row]])))
                if grads.degenerate:
                    skipped += 1
                    continue
                for f in _PARAM_FIELDS:
                    acc[f] = acc[f] + getattr(grads, f)
            used = len(ok) - skipped
            if used == 0:
                continue
            for f in _PARAM_FIELDS:
                g = acc[f]
                sq[f] = cfg.rms_decay * sq[f] + (1 - cfg.rms_decay) * np.square(g)
                step = lr * g / (np.sqrt(sq[f]) + cfg.rms_eps)
                if f == "alpha":
                    params.alpha = float(params.alpha - step)
                else:
                    new = getattr(params, f) - step
                    if f in ("Q1", "Q2"):
                        new = np.tril(new)
                    setattr(params, f, new)
            epoch_loss += batch_loss * len(ok)
            seen += len(ok)
        train_loss = epoch_loss / max(seen, 1)
        if data.val.size:
            val_loss, _, _ = evaluate(params, mpc_cfg, data.val, cfg.S,
                                      settings)
        else:
            val_loss = float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss})
        if out_dir is not None:
            save_checkpoint(out_dir / f"ckpt_epoch_{epoch:04d}.json",
                            params, mpc_cfg)
    if out_dir is not None:
        save_checkpoint(out_dir / "params_final.json", params, mpc_cfg)
        write_history_csv(history, out_dir / "loss_history.csv")
    return params, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss"])
        w.writeheader()
        w.writerows(history)


def smoothed(values, window: int = 5):
    """Trailing-window mean used by the convergence checks."""
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    for i in range(values.size):
        out[i] = values[max(0, i - window + 1):i + 1].mean()
    return out


# -- gradient-check harness --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict
    coords_checked: int
    degenerate: bool

    @property
    def passed(self) -> bool:
        return (not self.degenerate) and self.max_rel_error <= 1e-4


def grad_check(mpc_cfg: MpcConfig, params: MpcParams, sample,
               step: float = 1e-5, rng=None, n_mat: int = 12,
               settings: SolverSettings | None = None) -> GradCheckReport:
    """Compare the layer's analytic gradients against central differences.

    ``sample`` is (s1, s2, f1, f2).  A random linear functional of the
    outputs (centered at the base solution to keep FD cancellation noise
    down) is probed over all of A_f, C_f, alpha and both input embeddings
    plus seeded subsets of the matrix parameters.  Relative errors use a
    floor of max(1e-3 * gradient scale, 1e-5): below that, a step of 1e-5
    cannot resolve the derivative at all.  Samples with a weakly active
    constraint are rejected as degenerate rather than reported wrong.
    """
    rng = rng or np.random.default_rng(0)
    s1, s2, f1, f2 = sample
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    c_open = rng.standard_normal((2, mpc_cfg.N))
    c_a = rng.standard_normal(2)

    base_out = forward(params, mpc_cfg, s1, s2, f1, f2, settings=settings)
    ref_open = base_out.predicted_openings.copy()
    ref_a = base_out.a_star.copy()

    from .mpc import backward as _backward
    grads = _backward(params, mpc_cfg, s1, s2, f1, f2, base_out,
                      GradOut(d_openings=c_open, d_a_star=c_a),
                      settings=settings)
    if grads.degenerate:
        raise DegenerateActiveSet(
            f"sample margin {grads.margin:.2e} too small for a reliable check")

    def loss_at(p_, f1_, f2_):
        out = forward(p_, mpc_cfg, s1, s2, f1_, f2_, warm=base_out.qp,
                      settings=settings)
        return (float(np.sum(c_open * (out.predicted_openings - ref_open)))
                + float(c_a @ (out.a_star - ref_a)))

    p_work = params.copy()
    f1_work = f1.copy()
    f2_work = f2.copy()

    per_group: dict = {}
    analytic_all, numeric_all, groups = [], [], []

    def probe(group, get, set_, g_val):
        v0 = get()
        set_(v0 + step)
        lp = loss_at(p_work, f1_work, f2_work)
        set_(v0 - step)
        lm = loss_at(p_work, f1_work, f2_work)
        set_(v0)
        analytic_all.append(g_val)
        numeric_all.append((lp - lm) / (2 * step))
        groups.append(group)

    M = mpc_cfg.M
    for i in range(M):
        probe("A_f", lambda i=i: p_work.A_f[i],
              lambda v, i=i: p_work.A_f.__setitem__(i, v), grads.A_f[i])
        probe("C_f", lambda i=i: p_work.C_f[i],
              lambda v, i=i: p_work.C_f.__setitem__(i, v), grads.C_f[i])
        probe("f1", lambda i=i: f1_work[i],
              lambda v, i=i: f1_work.__setitem__(i, v), grads.f1[i])
        probe("f2", lambda i=i: f2_work[i],
              lambda v, i=i: f2_work.__setitem__(i, v), grads.f2[i])
    probe("alpha", lambda: p_work.alpha,
          lambda v: setattr(p_work, "alpha", float(v)), grads.alpha)
    tril_idx = [(i, j) for i in range(M) for j in range(i + 1)]
    for name in ("Q1", "Q2"):
        arr = getattr(p_work, name)
        g_arr = getattr(grads, name)
        for t in rng.choice(len(tril_idx), size=min(n_mat, len(tril_idx)),
                            replace=False):
            ij = tril_idx[t]
            probe(name, lambda a=arr, ij=ij: a[ij],
                  lambda v, a=arr, ij=ij: a.__setitem__(ij, v), g_arr[ij])
    all_idx = [(i, j) for i in range(M) for j in range(M)]
    for t in rng.choice(len(all_idx), size=min(n_mat, len(all_idx)),
                        replace=False):
        ij = all_idx[t]
        probe("Qc", lambda ij=ij: p_work.Qc[ij],
              lambda v, ij=ij: p_work.Qc.__setitem__(ij, v), grads.Qc[ij])

    analytic = np.array(analytic_all)
    numeric = np.array(numeric_all)
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                       max(1e-3 * scale, 1e-5))
    rel = np.abs(analytic - numeric) / denom
    for g in set(groups):
        mask = np.array([x == g for x in groups])
        per_group[g] = float(np.max(rel[mask]))
    return GradCheckReport(max_rel_error=float(np.max(rel)),
                           per_group=per_group,
                           coords_checked=int(rel.size),
                           degenerate=False)
