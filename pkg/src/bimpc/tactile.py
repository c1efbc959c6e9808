"""Synthetic tactile sensing and the data-collection trial protocol.

The encoder stands in for a frozen vision backbone: it maps a contact state
(gel indentation, tangential load, stiffness) to a fixed-dimensional
embedding deterministically, with optional reproducible noise keyed by the
quantized inputs.  Soft materials saturate through tanh(kappa * depth), so
very soft contacts produce near-zero signal, which is the failure mode the
simulator exercises.

Trials follow the two-gripper collection protocol: four sub-trials per
trial, the active gripper opening in uniform increments from a jittered
initial opening to a jittered slippage opening while the other holds, roles
alternating within and across trials, 25 embedding pairs saved per
sub-trial.  Directory and file names carry the metadata; parsing them back
is part of the contract.
"""

import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagic, InvalidProtocol, MalformedName, NonFinite,
                     ShapeMismatch)

FRAMES_PER_SUBTRIAL = 25
SUBTRIALS_PER_TRIAL = 4

EMB_MAGIC = b"TEMB"
EMB_VERSION = 1

_DIR_RE = re.compile(r"^trial(\d+)_sub(\d+)_slip(\d+\.\d{3})$")
_FRAME_RE = re.compile(r"^([12])_(\d+\.\d{3})_(\d{2})\.emb$")


def quantize_mm(x: float) -> float:
    """Openings are carried in filenames with three decimals; everything that
    flows into names is quantized up front so round-trips are exact."""
    return round(float(x), 3)


# -- contact geometry ----------------------------------------------------------

@dataclass
class ContactState:
    """Ground truth the sensor observes at one gripper site."""
    depth: float                 # gel indentation, mm, >= 0
    shear: float                 # tangential load proxy, mm, signed
    material_stiffness: float    # kappa, N/mm, > 0
    slipping: bool

    def __post_init__(self):
        if self.depth < 0:
            raise NonFinite("contact depth must be >= 0")
        if self.material_stiffness <= 0:
            raise NonFinite("material stiffness must be positive")


@dataclass
class MaterialScene:
    """Contact geometry of a grasped object at both gripper sites.

    ``slip_onset`` is where tangential load peaks (the measured slippage
    opening of the protocol); ``slip_margin`` is the larger opening at which
    the grasp actually lets go.  ``coupling`` feeds squeeze at one site into
    effective width at the other (material displaced sideways).
    """
    width1: float
    width2: float
    kappa: float
    coupling: float = 0.0
    slip_onset1: float = 0.0
    slip_onset2: float = 0.0
    slip_margin1: float = np.inf
    slip_margin2: float = np.inf
    shear_band: float = 6.0      # mm over which tangential load ramps up
    shear_load: float = 1.0      # peak tangential load at the onset
    shear_cap: float = 1.6       # load keeps growing past onset up to this

    def __post_init__(self):
        if not 0.0 <= self.coupling < 1.0:
            raise NonFinite("coupling must be in [0, 1)")
        if self.kappa <= 0:
            raise NonFinite("kappa must be positive")


def _squeezes(scene: MaterialScene, p1: float, p2: float):
    """Exact complementarity solve of s_i = max(0, w_i + g*s_j - p_i)."""
    g = scene.coupling
    d1 = scene.width1 - p1
    d2 = scene.width2 - p2
    s1 = (d1 + g * d2) / (1.0 - g * g)
    s2 = (d2 + g * d1) / (1.0 - g * g)
    if s1 > 0 and s2 > 0:
        return s1, s2
    if d1 + g * max(d2, 0.0) <= 0:
        s2 = max(d2, 0.0)
        if d1 + g * s2 <= 0:
            return 0.0, s2
    if d2 + g * max(d1, 0.0) <= 0:
        s1 = max(d1, 0.0)
        if d2 + g * s1 <= 0:
            return s1, 0.0
    return max(d1, 0.0), max(d2, 0.0)


def resolve_contact(scene: MaterialScene, p1: float, p2: float):
    """ContactState pair at openings (p1, p2)."""
    s1, s2 = _squeezes(scene, p1, p2)
    states = []
    for p, s, onset, margin in ((p1, s1, scene.slip_onset1, scene.slip_margin1),
                                (p2, s2, scene.slip_onset2, scene.slip_margin2)):
        depth = 0.5 * s
        if depth > 0:
            ramp = 1.0 - (onset - p) / scene.shear_band
            shear = scene.shear_load * float(np.clip(ramp, 0.0, scene.shear_cap))
        else:
            shear = 0.0
        states.append(ContactState(depth=depth, shear=shear,
                                   material_stiffness=scene.kappa,
                                   slipping=p > margin))
    return states[0], states[1]


# -- synthetic encoder ---------------------------------------------------------

@dataclass
class SyntheticEncoder:
    """Frozen contact-to-embedding map: two fixed seeded directions mix the
    saturated depth response and the tangential load, plus reproducible
    per-input noise."""
    W_depth: np.ndarray
    W_shear: np.ndarray
    noise_sigma: float
    seed: int

    @classmethod
    def create(cls, M: int, seed: int, noise_sigma: float = 0.0):
        rng = np.random.default_rng(seed)
        wd = rng.standard_normal(M)
        ws = rng.standard_normal(M)
        wd /= np.linalg.norm(wd)
        ws -= (ws @ wd) * wd          # orthogonal channels
        ws /= np.linalg.norm(ws)
        return cls(W_depth=wd, W_shear=ws, noise_sigma=float(noise_sigma),
                   seed=int(seed))

    @property
    def M(self) -> int:
        return self.W_depth.shape[0]


def _noise_key(value: float) -> int:
    return int(round(value * 1000.0)) % (2 ** 62)


def encode(enc: SyntheticEncoder, c: ContactState) -> np.ndarray:
    """f = tanh(kappa * depth) * W_depth + shear * W_shear + noise.

    Noise is a pure function of (seed, inputs quantized to 1e-3): repeated
    calls with an identical contact state return bit-identical embeddings.
    No contact, no shear, no noise gives exactly the zero embedding.
    """
    f = (math.tanh(c.material_stiffness * c.depth) * enc.W_depth
         + c.shear * enc.W_shear)
    if enc.noise_sigma > 0:
        ss = np.random.SeedSequence([enc.seed % (2 ** 62),
                                     _noise_key(c.depth),
                                     _noise_key(c.shear),
                                     _noise_key(c.material_stiffness),
                                     int(c.slipping)])
        f = f + enc.noise_sigma * np.random.default_rng(ss).standard_normal(enc.M)
    return f


# -- trial records and the collection protocol ----------------------------------

@dataclass
class FramePair:
    """One saved instant: both agents' embeddings and openings."""
    f1: np.ndarray          # float32 (M,)
    f2: np.ndarray
    opening1: float
    opening2: float
    index: int


@dataclass
class TrialRecord:
    trial_id: int
    subtrial_index: int
    slippage_opening: float
    active_agent: int       # 1 or 2
    frames: list

    def __post_init__(self):
        if self.active_agent not in (1, 2):
            raise InvalidProtocol("active agent must be 1 or 2")
        if len(self.frames) != FRAMES_PER_SUBTRIAL:
            raise ShapeMismatch(
                f"expected {FRAMES_PER_SUBTRIAL} frames, got {len(self.frames)}")
        opens = [fr.opening1 if self.active_agent == 1 else fr.opening2
                 for fr in self.frames]
        if any(b < a - 1e-9 for a, b in zip(opens, opens[1:])):
            raise InvalidProtocol("active-agent openings must be non-decreasing")


@dataclass
class ProtocolConfig:
    """Collection sweep parameters (all mm / mm/s)."""
    init_opening: float = 38.0
    slip_opening: float = 42.0     # measured slippage opening (base)
    init_jitter: float = 0.7
    slip_jitter: float = 0.35
    open_rate: float = 4.0         # active gripper opening speed
    stationary_step: float = 0.15  # holder backs off after each own sweep


@dataclass
class TrialWorld:
    """Contact scene plus the two (sensor-specific) encoders."""
    scene: MaterialScene
    encoder1: SyntheticEncoder
    encoder2: SyntheticEncoder


def active_agent_for(trial_id: int, subtrial_index: int) -> int:
    """Fixed role schedule: roles alternate within a trial and the starting
    role alternates across trials, so any even batch of trials is balanced."""
    return ((trial_id + subtrial_index) % 2) + 1


def generate_trial(world_cfg: TrialWorld, protocol_cfg: ProtocolConfig,
                   rng_seed: int, trial_id: int = 0):
    """One collection trial: a list of 4 TrialRecord sub-trials."""
    pc = protocol_cfg
    rng = np.random.default_rng(rng_seed)
    records = []
    hold = {1: None, 2: None}
    backoff = {1: 0, 2: 0}
    for k in range(1, SUBTRIALS_PER_TRIAL + 1):
        active = active_agent_for(trial_id, k)
        other = 3 - active
        init = quantize_mm(pc.init_opening + rng.uniform(-pc.init_jitter,
                                                         pc.init_jitter))
        slip = quantize_mm(pc.slip_opening + rng.uniform(-pc.slip_jitter,
                                                         pc.slip_jitter))
        if slip <= init:
            raise InvalidProtocol(
                f"slippage opening {slip} must exceed initial opening {init}")
        if hold[other] is None:
            hold[other] = quantize_mm(
                pc.init_opening + rng.uniform(-pc.init_jitter, pc.init_jitter))
        p_hold = quantize_mm(hold[other] + backoff[other] * pc.stationary_step)
        sweep = np.linspace(init, slip, FRAMES_PER_SUBTRIAL)
        frames = []
        for j, p_act in enumerate(sweep):
            p_act = quantize_mm(p_act)
            p1, p2 = (p_act, p_hold) if active == 1 else (p_hold, p_act)
            c1, c2 = resolve_contact(world_cfg.scene, p1, p2)
            f1 = encode(world_cfg.encoder1, c1).astype(np.float32)
            f2 = encode(world_cfg.encoder2, c2).astype(np.float32)
            frames.append(FramePair(f1=f1, f2=f2, opening1=p1, opening2=p2,
                                    index=j))
        records.append(TrialRecord(trial_id=trial_id, subtrial_index=k,
                                   slippage_opening=slip, active_agent=active,
                                   frames=frames))
        hold[active] = init
        backoff[active] += 1
    return records


# -- .emb files and the trial directory layout -----------------------------------

def write_embedding(path, vec: np.ndarray):
    vec = np.asarray(vec, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<HH", EMB_VERSION, vec.shape[0]))
        fh.write(vec.astype("<f4").tobytes())


def read_embedding(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8 or header[:4] != EMB_MAGIC:
            raise BadMagic(f"{path}: missing embedding magic")
        version, count = struct.unpack("<HH", header[4:])
        if version != EMB_VERSION:
            raise BadMagic(f"{path}: unsupported version {version}")
        payload = fh.read()
    if len(payload) != 4 * count:
        raise ShapeMismatch(f"{path}: expected {count} floats")
    return np.frombuffer(payload, dtype="<f4").copy()


def trial_dirname(record: TrialRecord) -> str:
    return (f"trial{record.trial_id:04d}_sub{record.subtrial_index}"
            f"_slip{record.slippage_opening:.3f}")


def frame_filename(agent: int, opening: float, index: int) -> str:
    return f"{agent}_{opening:.3f}_{index:02d}.emb"


def parse_trial_dirname(name: str):
    m = _DIR_RE.match(name)
    if not m:
        raise MalformedName(f"bad trial directory name: {name!r}")
    return int(m.group(1)), int(m.group(2)), float(m.group(3))


def parse_frame_filename(name: str):
    m = _FRAME_RE.match(name)
    if not m:
        raise MalformedName(f"bad frame filename: {name!r}")
    return int(m.group(1)), float(m.group(2)), int(m.group(3))


def write_trial(record: TrialRecord, root) -> Path:
    """Lay one sub-trial down as a directory of per-frame embedding files."""
    root = Path(root)
    d = root / trial_dirname(record)
    d.mkdir(parents=True, exist_ok=True)
    for fr in record.frames:
        write_embedding(d / frame_filename(1, fr.opening1, fr.index), fr.f1)
        write_embedding(d / frame_filename(2, fr.opening2, fr.index), fr.f2)
    return d


def read_trial(path) -> TrialRecord:
    """Inverse of write_trial; validates the naming grammar, the frame count,
    pairing of both agents, and the active-agent monotonicity invariant."""
    path = Path(path)
    trial_id, sub_idx, slip = parse_trial_dirname(path.name)
    per_frame: dict = {}
    for f in sorted(path.iterdir()):
        agent, opening, idx = parse_frame_filename(f.name)
        slot = per_frame.setdefault(idx, {})
        if agent in slot:
            raise MalformedName(f"duplicate agent {agent} in frame {idx}")
        slot[agent] = (opening, read_embedding(f))
    if len(per_frame) != FRAMES_PER_SUBTRIAL:
        raise ShapeMismatch(
            f"{path.name}: expected {FRAMES_PER_SUBTRIAL} frames, "
            f"got {len(per_frame)}")
    frames = []
    for idx in range(FRAMES_PER_SUBTRIAL):
        if idx not in per_frame or set(per_frame[idx]) != {1, 2}:
            raise ShapeMismatch(f"{path.name}: frame {idx} incomplete")
        (o1, f1), (o2, f2) = per_frame[idx][1], per_frame[idx][2]
        if f1.shape != f2.shape:
            raise ShapeMismatch(f"{path.name}: embedding lengths differ")
        frames.append(FramePair(f1=f1, f2=f2, opening1=o1, opening2=o2,
                                index=idx))
    r1 = max(fr.opening1 for fr in frames) - min(fr.opening1 for fr in frames)
    r2 = max(fr.opening2 for fr in frames) - min(fr.opening2 for fr in frames)
    if r1 == r2:
        raise InvalidProtocol(f"{path.name}: cannot identify the active agent")
    return TrialRecord(trial_id=trial_id, subtrial_index=sub_idx,
                       slippage_opening=slip, active_agent=1 if r1 > r2 else 2,
                       frames=frames)


# -- dataset generation and manifest ---------------------------------------------

DATASET_FORMAT = "bimpc-dataset"
DATASET_VERSION = 1


@dataclass
class MaterialBlock:
    """One standardized calibration block used during collection."""
    name: str
    width: float
    kappa: float
    coupling: float

    def scene(self, protocol: ProtocolConfig) -> MaterialScene:
        onset = protocol.slip_opening
        return MaterialScene(
            width1=self.width, width2=self.width, kappa=self.kappa,
            coupling=self.coupling,
            slip_onset1=onset, slip_onset2=onset,
            slip_margin1=onset + 0.8, slip_margin2=onset + 0.8,
        )


DEFAULT_BLOCKS = (
    MaterialBlock("hard_block", width=44.0, kappa=4.0, coupling=0.10),
    MaterialBlock("rubber_block", width=44.0, kappa=1.5, coupling=0.20),
    MaterialBlock("gel_block", width=44.0, kappa=0.5, coupling=0.35),
    MaterialBlock("foam_block", width=44.0, kappa=0.25, coupling=0.45),
)

DEFAULT_SENSOR_SEED = 90210


def make_encoders(M: int, sensor_seed: int = DEFAULT_SENSOR_SEED,
                  noise_sigma: float = 0.01):
    """Two slightly different sensors, as physical gel pads would be."""
    return (SyntheticEncoder.create(M, sensor_seed + 1, noise_sigma),
            SyntheticEncoder.create(M, sensor_seed + 2, noise_sigma))


def generate_dataset(out_dir, n_trials: int, seed: int, M: int = 20,
                     protocol: ProtocolConfig | None = None,
                     blocks=DEFAULT_BLOCKS, noise_sigma: float = 0.01,
                     sensor_seed: int = DEFAULT_SENSOR_SEED) -> dict:
    """Write ``n_trials`` trials (cycling through the material blocks) plus a
    dataset.json manifest; returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    protocol = protocol or ProtocolConfig()
    enc1, enc2 = make_encoders(M, sensor_seed, noise_sigma)
    root_ss = np.random.SeedSequence(seed)
    trial_seeds = root_ss.spawn(n_trials)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": int(seed),
        "n_trials": int(n_trials),
        "encoder": {"M": int(M), "sensor_seed": int(sensor_seed),
                    "noise_sigma": float(noise_sigma)},
        "protocol": {
            "init_opening": protocol.init_opening,
            "slip_opening": protocol.slip_opening,
            "init_jitter": protocol.init_jitter,
            "slip_jitter": protocol.slip_jitter,
            "open_rate": protocol.open_rate,
            "frames": FRAMES_PER_SUBTRIAL,
        },
        "blocks": [{"name": b.name, "width": b.width, "kappa": b.kappa,
                    "coupling": b.coupling} for b in blocks],
        "trials": [],
    }
    for t in range(n_trials):
        block = blocks[t % len(blocks)]
        world = TrialWorld(scene=block.scene(protocol), encoder1=enc1,
                           encoder2=enc2)
        child_seed = int(trial_seeds[t].generate_state(1)[0])
        records = generate_trial(world, protocol, child_seed, trial_id=t)
        entry = {"trial_id": t, "block": block.name, "subtrials": []}
        for rec in records:
            d = write_trial(rec, out_dir)
            fr0 = rec.frames[0]
            active_open = fr0.opening1 if rec.active_agent == 1 else fr0.opening2
            hold_open = fr0.opening2 if rec.active_agent == 1 else fr0.opening1
            entry["subtrials"].append({
                "dir": d.name,
                "subtrial_index": rec.subtrial_index,
                "active_agent": rec.active_agent,
                "slippage_opening": rec.slippage_opening,
                "init_opening": active_open,
                "stationary_opening": hold_open,
            })
        manifest["trials"].append(entry)
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != DATASET_FORMAT:
        raise MalformedName(f"{path} is not a dataset manifest")
    if doc.get("version") != DATASET_VERSION:
        raise MalformedName(f"unsupported dataset version {doc.get('version')}")
    return doc
