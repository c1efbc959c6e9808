"""Controller configuration and learnable parameter containers.

Both grippers share a single ``MpcParams`` instance; the controller is
permutation-equivariant by construction, so there is never a per-agent copy.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatch, NonFinite


@dataclass(frozen=True)
class MpcConfig:
    """Fixed (non-learned) constants of the MPC layer.

    Units are mm, mm/s, mm/s2 and seconds.  ``eps`` is the floor enforced on
    the smallest eigenvalue of the assembled tactile weight matrix; the three
    cost scalars must stay strictly positive or the QP loses solvability.
    """

    N: int = 15            # prediction horizon (steps)
    M: int = 20            # tactile embedding dimension
    dt: float = 0.01       # control interval (s)
    Q_v: float = 200.0     # per-step velocity penalty
    Q_a: float = 1.0       # per-step acceleration penalty
    P_q: float = 5.0       # terminal cost amplifier
    eps: float = 1e-4      # eigenvalue floor for the tactile weight
    p_min: float = 0.0     # gripper opening span (Robotiq 2F-85)
    p_max: float = 85.0
    v_min: float = -150.0
    v_max: float = 150.0
    a_min: float = -5000.0
    a_max: float = 5000.0

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError(f"horizon N must be >= 1, got {self.N}")
        if self.M < 1:
            raise ConfigError(f"embedding dim M must be >= 1, got {self.M}")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        for name in ("Q_v", "Q_a", "P_q", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        for lo, hi in (("p_min", "p_max"), ("v_min", "v_max"), ("a_min", "a_max")):
            if getattr(self, lo) >= getattr(self, hi):
                raise ConfigError(f"{lo} must be < {hi}")


@dataclass
class MpcParams:
    """Learnable quantities, shared by both agents.

    A_f, C_f : (M,) own- and cross-velocity sensitivities of the embedding
        transition f' = f + A_f*v_own + C_f*v_other.
    Q1, Q2   : (M, M) lower-triangular Cholesky factors of the per-agent
        tactile penalty blocks (kept triangular; the blocks Qi @ Qi.T are
        PSD for any factor values, so gradient steps cannot break them).
    Qc       : (M, M) unconstrained cross-agent penalty block.
    alpha    : scalar scale on the coupling blocks.
    """

    A_f: np.ndarray
    C_f: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    Qc: np.ndarray
    alpha: float

    def __post_init__(self):
        self.A_f = np.asarray(self.A_f, dtype=float)
        self.C_f = np.asarray(self.C_f, dtype=float)
        self.Q1 = np.tril(np.asarray(self.Q1, dtype=float))
        self.Q2 = np.tril(np.asarray(self.Q2, dtype=float))
        self.Qc = np.asarray(self.Qc, dtype=float)
        self.alpha = float(self.alpha)
        M = self.A_f.shape[0]
        if self.A_f.shape != (M,) or self.C_f.shape != (M,):
            raise DimensionMismatch("A_f and C_f must be vectors of equal length")
        for name in ("Q1", "Q2", "Qc"):
            if getattr(self, name).shape != (M, M):
                raise DimensionMismatch(f"{name} must be ({M}, {M})")
        for name in ("A_f", "C_f", "Q1", "Q2", "Qc"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFinite(f"{name} contains non-finite entries")
        if not np.isfinite(self.alpha):
            raise NonFinite("alpha is not finite")

    @property
    def M(self) -> int:
        return self.A_f.shape[0]

    def copy(self) -> "MpcParams":
        return MpcParams(
            A_f=self.A_f.copy(), C_f=self.C_f.copy(),
            Q1=self.Q1.copy(), Q2=self.Q2.copy(), Qc=self.Qc.copy(),
            alpha=self.alpha,
        )


def init_params(cfg: MpcConfig, seed: int = 0) -> MpcParams:
    """Default training initialization: identity penalty blocks, small random
    velocity sensitivities, weak coupling."""
    rng = np.random.default_rng(seed)
    M = cfg.M
    return MpcParams(
        A_f=0.02 * rng.standard_normal(M),
        C_f=0.02 * rng.standard_normal(M),
        Q1=np.eye(M),
        Q2=np.eye(M),
        Qc=0.05 * rng.standard_normal((M, M)),
        alpha=0.5,
    )
