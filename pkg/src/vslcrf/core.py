"""Domain types, parameter packing and threshold derivation.

All parameter containers are frozen dataclasses holding float64 arrays.  They
are treated as immutable values: "updating" a model means building a new one,
usually through :func:`unpack_params`.

Flat parameter layout, used by the optimizer and the model file::

    for k in 1..K:
        nominal block:  beta (C x (D+1), row-major), u (C x C, row-major)
        ordinal block:  a (D), b1, gamma (C-2), sigma0, u (C x C, row-major)

Blocks of branches a mode does not use are left out of the vector.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence as SeqType

import numpy as np

SIGMA_FLOOR = 1e-4


class VslCrfError(Exception):
    """Base class for toolkit errors."""


class InvalidInputError(VslCrfError, ValueError):
    pass


class UnsupportedModeError(VslCrfError):
    pass


class DivergedError(VslCrfError):
    """Raised when training produces a non-finite objective.

    ``last_state`` carries whatever finite state the caller had reached.
    """

    def __init__(self, message: str, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class Mode(str, enum.Enum):
    HCRF = "hcrf"
    HCORF = "hcorf"
    VSLM = "vslm"
    VSLD = "vsld"
    VSLEM = "vslem"

    @property
    def is_vsl(self) -> bool:
        return self in (Mode.VSLM, Mode.VSLD, Mode.VSLEM)


class Branch(enum.IntEnum):
    NOMINAL = 0
    ORDINAL = 1


BOTH_BRANCHES = (Branch.NOMINAL, Branch.ORDINAL)


class EdgeFeature(str, enum.Enum):
    CONSTANT_ONE = "constant_one"
    L1_DISTANCE = "l1_distance"


def active_branches(mode: Mode) -> tuple[Branch, ...]:
    if mode == Mode.HCRF:
        return (Branch.NOMINAL,)
    if mode == Mode.HCORF:
        return (Branch.ORDINAL,)
    return BOTH_BRANCHES


@dataclass(frozen=True)
class ModelConfig:
    K: int
    C: int
    D: int
    edge_feature_mode: EdgeFeature = EdgeFeature.L1_DISTANCE
    mode: Mode = Mode.VSLEM

    def __post_init__(self):
        if self.K < 1 or self.C < 2 or self.D < 1:
            raise InvalidInputError(
                f"need K>=1, C>=2, D>=1; got K={self.K}, C={self.C}, D={self.D}")
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "edge_feature_mode", EdgeFeature(self.edge_feature_mode))


@dataclass(frozen=True, eq=False)
class Sequence:
    """One observation chain with its class label (1-based)."""

    id: str
    frames: np.ndarray
    label: int
    subject_id: Optional[str] = None
    frame_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.frames, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise InvalidInputError(f"sequence {self.id!r}: frames must be a non-empty T x D matrix")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError(f"sequence {self.id!r}: non-finite feature values")
        object.__setattr__(self, "frames", x)
        if int(self.label) < 1:
            raise InvalidInputError(f"sequence {self.id!r}: label must be >= 1")
        object.__setattr__(self, "label", int(self.label))
        if self.frame_labels is not None:
            fl = np.asarray(self.frame_labels, dtype=int)
            if fl.shape != (x.shape[0],):
                raise InvalidInputError(f"sequence {self.id!r}: frame_labels must have length T")
            object.__setattr__(self, "frame_labels", fl)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True, eq=False)
class NominalParams:
    beta: np.ndarray  # C x (D+1); column 0 is the bias


@dataclass(frozen=True, eq=False)
class OrdinalParams:
    a: np.ndarray
    b1: float
    gamma: np.ndarray
    sigma0: float

    def sigma(self, floor: float = SIGMA_FLOOR) -> float:
        return self.sigma0 ** 2 + floor


@dataclass(frozen=True, eq=False)
class EdgeParams:
    u: np.ndarray  # C x C


@dataclass(frozen=True, eq=False)
class ClassParams:
    nominal: NominalParams
    nominal_edge: EdgeParams
    ordinal: OrdinalParams
    ordinal_edge: EdgeParams

    def edge(self, branch: Branch) -> EdgeParams:
        return self.nominal_edge if branch == Branch.NOMINAL else self.ordinal_edge


@dataclass(frozen=True)
class Hyperparams:
    lambda_n: float = 1e-2
    lambda_o: float = 1e-2
    lambda_p: float = 1e-1
    max_iters: int = 200
    grad_tol: float = 1e-5
    em_max_rounds: int = 20
    em_obj_tol: float = 1e-6
    seed: int = 0
    sigma_floor: float = SIGMA_FLOOR
    subgradient_step: float = 0.1

    def __post_init__(self):
        if min(self.lambda_n, self.lambda_o, self.lambda_p) < 0:
            raise InvalidInputError("regularization weights must be non-negative")
        if self.grad_tol <= 0 or self.em_obj_tol <= 0 or self.sigma_floor <= 0:
            raise InvalidInputError("tolerances must be positive")


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    classes: tuple[ClassParams, ...]
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) != self.config.K:
            raise InvalidInputError(
                f"model has {len(self.classes)} class blocks, config says K={self.config.K}")

    @property
    def mode(self) -> Mode:
        return self.config.mode

    def with_mode(self, mode: Mode) -> "Model":
        return replace(self, config=replace(self.config, mode=Mode(mode)))


def derive_thresholds(p: OrdinalParams, C: int) -> np.ndarray:
    """Return ``(b_0=-inf, b_1, ..., b_{C-1}, b_C=+inf)``.

    ``b_j = b_1 + sum_{k<j} gamma_k**2``, so the cut points are ordered for any
    real-valued displacements.
    """
    gamma = np.asarray(p.gamma, dtype=float)
    if gamma.shape != (C - 2,):
        raise InvalidInputError(f"gamma must have length C-2={C - 2}, got {gamma.shape}")
    b = np.empty(C + 1)
    b[0] = -np.inf
    b[C] = np.inf
    b[1:C] = p.b1 + np.concatenate(([0.0], np.cumsum(gamma ** 2)))
    return b


# --------------------------------------------------------------------------
# packing

def branch_size(config: ModelConfig, branch: Branch) -> int:
    C, D = config.C, config.D
    if branch == Branch.NOMINAL:
        return C * (D + 1) + C * C
    return D + 1 + (C - 2) + 1 + C * C


def block_offsets(config: ModelConfig,
                  branches: Optional[Iterable[Branch]] = None) -> dict[tuple[int, Branch], int]:
    """Start offset of each (class index, branch) block in the flat vector."""
    branches = tuple(active_branches(config.mode) if branches is None else branches)
    offsets = {}
    pos = 0
    for k in range(config.K):
        for br in BOTH_BRANCHES:
            if br in branches:
                offsets[(k, br)] = pos
                pos += branch_size(config, br)
    return offsets


def n_params(config: ModelConfig, branches: Optional[Iterable[Branch]] = None) -> int:
    branches = tuple(active_branches(config.mode) if branches is None else branches)
    return config.K * sum(branch_size(config, br) for br in branches)


def _pack_branch(cp: ClassParams, branch: Branch) -> list[np.ndarray]:
    if branch == Branch.NOMINAL:
        return [np.ravel(cp.nominal.beta), np.ravel(cp.nominal_edge.u)]
    o = cp.ordinal
    return [np.ravel(o.a), [o.b1], np.ravel(o.gamma), [o.sigma0], np.ravel(cp.ordinal_edge.u)]


def pack_params(model: Model, branches: Optional[Iterable[Branch]] = None) -> np.ndarray:
    """Flatten the parameters of ``branches`` (default: the mode's active ones)."""
    branches = tuple(active_branches(model.mode) if branches is None else branches)
    parts = []
    for cp in model.classes:
        for br in BOTH_BRANCHES:
            if br in branches:
                parts.extend(_pack_branch(cp, br))
    if not parts:
        return np.zeros(0)
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def unpack_params(vec: np.ndarray, model: Model,
                  branches: Optional[Iterable[Branch]] = None) -> Model:
    """Inverse of :func:`pack_params`; blocks not in ``branches`` come from ``model``."""
    cfg = model.config
    C, D = cfg.C, cfg.D
    branches = tuple(active_branches(cfg.mode) if branches is None else branches)
    vec = np.asarray(vec, dtype=float)
    expected = n_params(cfg, branches)
    if vec.shape != (expected,):
        raise InvalidInputError(f"parameter vector has shape {vec.shape}, expected ({expected},)")
    pos = 0

    def take(n):
        nonlocal pos
        out = vec[pos:pos + n].copy()
        pos += n
        return out

    classes = []
    for cp in model.classes:
        nominal, nominal_edge = cp.nominal, cp.nominal_edge
        ordinal, ordinal_edge = cp.ordinal, cp.ordinal_edge
        if Branch.NOMINAL in branches:
            nominal = NominalParams(take(C * (D + 1)).reshape(C, D + 1))
            nominal_edge = EdgeParams(take(C * C).reshape(C, C))
        if Branch.ORDINAL in branches:
            a = take(D)
            b1 = float(take(1)[0])
            gamma = take(C - 2)
            sigma0 = float(take(1)[0])
            ordinal = OrdinalParams(a, b1, gamma, sigma0)
            ordinal_edge = EdgeParams(take(C * C).reshape(C, C))
        classes.append(ClassParams(nominal, nominal_edge, ordinal, ordinal_edge))
    return Model(cfg, tuple(classes), model.hyper)


def zero_model(config: ModelConfig, hyper: Optional[Hyperparams] = None) -> Model:
    """Model with every parameter zero except ``sigma0=1``."""
    C, D = config.C, config.D
    classes = []
    for _ in range(config.K):
        classes.append(ClassParams(
            NominalParams(np.zeros((C, D + 1))),
            EdgeParams(np.zeros((C, C))),
            OrdinalParams(np.zeros(D), 0.0, np.zeros(C - 2), 1.0),
            EdgeParams(np.zeros((C, C))),
        ))
    return Model(config, tuple(classes), hyper or Hyperparams())


def validate_data(data: SeqType[Sequence], config: ModelConfig) -> None:
    if len(data) == 0:
        raise InvalidInputError("no training sequences")
    for s in data:
        if s.D != config.D:
            raise InvalidInputError(f"sequence {s.id!r} has D={s.D}, model expects D={config.D}")
        if not 1 <= s.label <= config.K:
            raise InvalidInputError(f"sequence {s.id!r} has label {s.label} outside 1..{config.K}")
