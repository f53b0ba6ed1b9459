"""Forward-backward inference over the latent chain.

Everything runs in the log domain.  Sequences of equal length are stacked and
processed together; :class:`Inference` holds, for a whole dataset, the branch
log-partitions ``log_z[i, k, branch]`` and (optionally) the chain marginals
needed for gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence as SeqType

import numpy as np

from .core import (
    BOTH_BRANCHES,
    Branch,
    ClassParams,
    InvalidInputError,
    Mode,
    Model,
    Sequence,
    UnsupportedModeError,
    active_branches,
)
from .potentials import node_logprob, sequence_edge_features


@dataclass(frozen=True, eq=False)
class ChainPosteriors:
    log_z: float
    node_marginals: np.ndarray  # T x C
    edge_marginals: np.ndarray  # (T-1) x C x C


@dataclass(frozen=True)
class NuPosterior:
    p_nominal: float
    p_ordinal: float

    def __getitem__(self, branch: Branch) -> float:
        return self.p_nominal if Branch(branch) == Branch.NOMINAL else self.p_ordinal


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(a - m).sum(axis=axis))


def forward_backward(node: np.ndarray, edge: np.ndarray, marginals: bool = True):
    """Batched chain inference.

    ``node`` is (n, T, C) and ``edge`` is (n, T-1, C, C) with ``edge[:, t, c, l]``
    scoring the transition ``h_t=c -> h_{t+1}=l``.  Returns ``log_z`` (n,) and,
    when requested, node (n, T, C) and edge (n, T-1, C, C) marginals.
    """
    n, T, C = node.shape
    alpha = np.empty_like(node)
    alpha[:, 0] = node[:, 0]
    for t in range(1, T):
        alpha[:, t] = node[:, t] + _lse(alpha[:, t - 1, :, None] + edge[:, t - 1], axis=1)
    log_z = _lse(alpha[:, -1], axis=1)
    if not marginals:
        return log_z, None, None
    beta = np.zeros_like(node)
    for t in range(T - 2, -1, -1):
        beta[:, t] = _lse(edge[:, t] + (node[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
    lz = log_z[:, None, None]
    mu = np.exp(alpha + beta - lz)
    if T > 1:
        xi = np.exp(alpha[:, :-1, :, None] + edge
                    + (node[:, 1:] + beta[:, 1:])[:, :, None, :] - lz[..., None])
    else:
        xi = np.zeros((n, 0, C, C))
    return log_z, mu, xi


def branch_partition(seq: Sequence, cp: ClassParams, nu: Branch, model: Model) -> ChainPosteriors:
    cfg = model.config
    node = node_logprob(seq.frames, cp, nu, cfg.C, model.hyper.sigma_floor)
    g = sequence_edge_features(seq.frames, cfg.edge_feature_mode)
    edge = np.asarray(cp.edge(nu).u)[None] * g[:, None, None]
    log_z, mu, xi = forward_backward(node[None], edge[None])
    return ChainPosteriors(float(log_z[0]), mu[0], xi[0])


# --------------------------------------------------------------------------
# dataset-level inference

@dataclass(eq=False)
class LengthGroup:
    index: np.ndarray  # positions in the original data list
    X: np.ndarray  # (n, T, D)
    G: np.ndarray  # (n, T-1) edge features


def group_by_length(data: SeqType[Sequence], edge_mode) -> list[LengthGroup]:
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(data):
        by_len.setdefault(s.T, []).append(i)
    groups = []
    for T in sorted(by_len):
        idx = np.array(by_len[T])
        X = np.stack([data[i].frames for i in idx])
        groups.append(LengthGroup(idx, X, sequence_edge_features(X, edge_mode)))
    return groups


@dataclass(eq=False)
class Inference:
    """Branch log-partitions for every (sequence, class, branch).

    Inactive branches hold ``-inf``.  ``marginals[g][(k, branch)]`` is the
    ``(mu, xi)`` pair for length group ``g`` when marginals were requested.
    """

    log_z: np.ndarray  # (N, K, 2)
    groups: list[LengthGroup]
    branches: tuple[Branch, ...]
    marginals: Optional[list[dict]] = field(default=None)


def infer(data: SeqType[Sequence], model: Model, branches=None, marginals: bool = False,
          groups: Optional[list[LengthGroup]] = None) -> Inference:
    cfg = model.config
    branches = tuple(active_branches(cfg.mode) if branches is None else branches)
    if groups is None:
        groups = group_by_length(data, cfg.edge_feature_mode)
    N = sum(len(g.index) for g in groups)
    log_z = np.full((N, cfg.K, 2), -np.inf)
    all_marg = [] if marginals else None
    for grp in groups:
        gm = {}
        for k, cp in enumerate(model.classes):
            for br in branches:
                node = node_logprob(grp.X, cp, br, cfg.C, model.hyper.sigma_floor)
                edge = np.asarray(cp.edge(br).u)[None, None] * grp.G[..., None, None]
                lz, mu, xi = forward_backward(node, edge, marginals)
                log_z[grp.index, k, int(br)] = lz
                if marginals:
                    gm[(k, br)] = (mu, xi)
        if marginals:
            all_marg.append(gm)
    return Inference(log_z, groups, branches, all_marg)


def class_log_scores(log_z: np.ndarray, mode: Mode) -> np.ndarray:
    """Unnormalized log class scores (N, K) from branch log-partitions (N, K, 2)."""
    mode = Mode(mode)
    if mode == Mode.HCRF:
        return log_z[..., Branch.NOMINAL]
    if mode == Mode.HCORF:
        return log_z[..., Branch.ORDINAL]
    if mode == Mode.VSLM:
        return log_z.max(axis=-1)
    return np.logaddexp(log_z[..., 0], log_z[..., 1])


def log_class_conditional(log_z: np.ndarray, mode: Mode) -> np.ndarray:
    s = class_log_scores(log_z, mode)
    return s - _lse(s, axis=-1)[..., None]


def class_conditional(seq: Sequence, model: Model) -> np.ndarray:
    """P(y | x) for every class, shape (K,)."""
    _check_shape(seq, model)
    inf = infer([seq], model)
    return np.exp(log_class_conditional(inf.log_z, model.mode)[0])


def nu_posterior_from_log_z(log_z_y: np.ndarray) -> np.ndarray:
    """Branch posterior from the two branch log-partitions of the true class; (..., 2)."""
    m = log_z_y.max(axis=-1, keepdims=True)
    e = np.exp(log_z_y - m)
    return e / e.sum(axis=-1, keepdims=True)


def nu_posterior(seq: Sequence, y: int, model: Model) -> NuPosterior:
    if not model.mode.is_vsl:
        raise UnsupportedModeError(f"branch posterior is undefined in {model.mode.value} mode")
    _check_shape(seq, model)
    if not 1 <= y <= model.config.K:
        raise InvalidInputError(f"label {y} outside 1..{model.config.K}")
    inf = infer([seq], model)
    p = nu_posterior_from_log_z(inf.log_z[0, y - 1])
    return NuPosterior(float(p[0]), float(p[1]))


def _check_shape(seq: Sequence, model: Model) -> None:
    if seq.D != model.config.D:
        raise InvalidInputError(f"sequence {seq.id!r} has D={seq.D}, model expects D={model.config.D}")


def predict_proba(data: SeqType[Sequence], model: Model) -> np.ndarray:
    for s in data:
        _check_shape(s, model)
    inf = infer(data, model)
    return np.exp(log_class_conditional(inf.log_z, model.mode))


def predict_sequence(seq: Sequence, model: Model) -> int:
    # np.argmax returns the first maximum: ties go to the lowest label
    return int(np.argmax(class_conditional(seq, model))) + 1


def predict_labels(data: SeqType[Sequence], model: Model) -> np.ndarray:
    return np.argmax(predict_proba(data, model), axis=1) + 1


def window_bounds(T: int, t: int, window: int) -> tuple[int, int]:
    """Half-open frame range of the window centred on ``t``, shrunk at the edges."""
    if window >= T:
        return 0, T
    left = (window - 1) // 2
    right = window - 1 - left
    return max(0, t - left), min(T, t + right + 1)


def predict_frames(seq: Sequence, model: Model, window: int) -> np.ndarray:
    """Label every frame by classifying the window centred on it."""
    if window < 1:
        raise InvalidInputError("window must be >= 1")
    _check_shape(seq, model)
    T = seq.T
    if window >= T:
        return np.full(T, predict_sequence(seq, model), dtype=int)
    subs = []
    for t in range(T):
        lo, hi = window_bounds(T, t, window)
        subs.append(Sequence(f"{seq.id}@{t}", seq.frames[lo:hi], 1))
    return predict_labels(subs, model)
