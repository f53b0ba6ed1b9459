"""Node and edge log-potentials for the nominal and ordinal branches.

Node potentials are log-probabilities of a static per-frame model: a
multinomial logit for nominal states and a cumulative-probit threshold model
for ordinal states.  Every function here accepts a single frame ``(D,)`` or any
stack of frames ``(..., D)`` and broadcasts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .core import (
    SIGMA_FLOOR,
    Branch,
    ClassParams,
    EdgeFeature,
    EdgeParams,
    InvalidInputError,
    NominalParams,
    OrdinalParams,
    Sequence,
    derive_thresholds,
)

PROB_FLOOR = 1e-300
_LOG_PROB_FLOOR = np.log(PROB_FLOOR)
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class NodeLogTable:
    values: np.ndarray  # T x C
    branch: Branch


@dataclass(frozen=True, eq=False)
class EdgeLogTable:
    values: np.ndarray  # (T-1) x C x C


def norm_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=float) / _SQRT2)


def norm_pdf(z):
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _check_dim(x: np.ndarray, D: int) -> None:
    if x.shape[-1] != D:
        raise InvalidInputError(f"feature dimension {x.shape[-1]} does not match parameters (D={D})")


def nominal_scores(x, p: NominalParams) -> np.ndarray:
    """Linear scores ``beta_c . [1, x]`` for every state."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(p.beta, dtype=float)
    _check_dim(x, beta.shape[1] - 1)
    return beta[:, 0] + x @ beta[:, 1:].T


def nominal_node_logprob(x, p: NominalParams) -> np.ndarray:
    f = nominal_scores(x, p)
    m = f.max(axis=-1, keepdims=True)
    return f - (m + np.log(np.exp(f - m).sum(axis=-1, keepdims=True)))


def _ordinal_parts(x, p: OrdinalParams, C: int, sigma_floor: float):
    """Standardized cut points ``z`` (..., C+1) and clamped bin probabilities (..., C)."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(p.a, dtype=float)
    _check_dim(x, a.shape[0])
    sigma = p.sigma0 ** 2 + sigma_floor
    b = derive_thresholds(p, C)
    proj = x @ a
    z = (b - proj[..., None]) / sigma
    hi, lo = z[..., 1:], z[..., :-1]
    # difference the lower tails when both cut points sit below the mean and
    # the upper tails otherwise, so neither side cancels catastrophically
    upper = lo > 0
    prob = np.where(upper, norm_cdf(-lo) - norm_cdf(-hi), norm_cdf(hi) - norm_cdf(lo))
    clamped = prob < PROB_FLOOR
    prob = np.where(clamped, PROB_FLOOR, prob)
    return z, prob, clamped, sigma


def ordinal_node_logprob(x, p: OrdinalParams, C: int, sigma_floor: float = SIGMA_FLOOR) -> np.ndarray:
    _, prob, _, _ = _ordinal_parts(x, p, C, sigma_floor)
    return np.log(prob)


def edge_feature(x_r, x_s, mode: EdgeFeature = EdgeFeature.L1_DISTANCE):
    """Scalar feature multiplying the edge parameters; broadcasts over frame pairs."""
    x_r = np.asarray(x_r, dtype=float)
    x_s = np.asarray(x_s, dtype=float)
    if x_r.shape != x_s.shape:
        raise InvalidInputError("edge endpoints have different shapes")
    if EdgeFeature(mode) == EdgeFeature.CONSTANT_ONE:
        return np.ones(x_r.shape[:-1])
    return np.abs(x_r - x_s).sum(axis=-1)


def edge_logpotential(x_r, x_s, e: EdgeParams, mode: EdgeFeature = EdgeFeature.L1_DISTANCE) -> np.ndarray:
    g = edge_feature(x_r, x_s, mode)
    return np.asarray(e.u, dtype=float) * np.asarray(g)[..., None, None]


def sequence_edge_features(frames: np.ndarray, mode: EdgeFeature) -> np.ndarray:
    """Edge features of consecutive frames, shape (..., T-1)."""
    return edge_feature(frames[..., :-1, :], frames[..., 1:, :], mode)


def node_logprob(x, cp: ClassParams, branch: Branch, C: int,
                 sigma_floor: float = SIGMA_FLOOR) -> np.ndarray:
    if branch == Branch.NOMINAL:
        return nominal_node_logprob(x, cp.nominal)
    return ordinal_node_logprob(x, cp.ordinal, C, sigma_floor)


def node_table(seq: Sequence, cp: ClassParams, branch: Branch, C: int,
               sigma_floor: float = SIGMA_FLOOR) -> NodeLogTable:
    return NodeLogTable(node_logprob(seq.frames, cp, branch, C, sigma_floor), Branch(branch))


def edge_table(seq: Sequence, cp: ClassParams, branch: Branch,
               mode: EdgeFeature = EdgeFeature.L1_DISTANCE) -> EdgeLogTable:
    x = seq.frames
    return EdgeLogTable(edge_logpotential(x[:-1], x[1:], cp.edge(branch), mode))


def sequence_score(seq: Sequence, cp: ClassParams, branch: Branch, path, C: int,
                   mode: EdgeFeature = EdgeFeature.L1_DISTANCE,
                   sigma_floor: float = SIGMA_FLOOR) -> float:
    """Score of one latent path (states numbered 1..C)."""
    h = np.asarray(path, dtype=int)
    if h.shape != (seq.T,):
        raise InvalidInputError(f"path length {h.shape} does not match T={seq.T}")
    if np.any(h < 1) or np.any(h > C):
        raise InvalidInputError(f"path entries must lie in 1..{C}")
    h0 = h - 1
    nodes = node_table(seq, cp, branch, C, sigma_floor).values
    score = nodes[np.arange(seq.T), h0].sum()
    if seq.T > 1:
        edges = edge_table(seq, cp, branch, mode).values
        score += edges[np.arange(seq.T - 1), h0[:-1], h0[1:]].sum()
    return float(score)


# --------------------------------------------------------------------------
# gradients of sum_t sum_c w[t, c] * log P(h_t = c | x_t)

def nominal_node_grad(x: np.ndarray, w: np.ndarray, p: NominalParams) -> np.ndarray:
    """Gradient wrt ``beta`` (C x (D+1)); ``x`` is (..., D), ``w`` is (..., C)."""
    logp = nominal_node_logprob(x, p)
    resid = w - w.sum(axis=-1, keepdims=True) * np.exp(logp)
    resid = resid.reshape(-1, resid.shape[-1])
    xf = x.reshape(-1, x.shape[-1])
    grad = np.empty_like(np.asarray(p.beta, dtype=float))
    grad[:, 0] = resid.sum(axis=0)
    grad[:, 1:] = resid.T @ xf
    return grad


def ordinal_node_grad(x: np.ndarray, w: np.ndarray, p: OrdinalParams, C: int,
                      sigma_floor: float = SIGMA_FLOOR):
    """Gradients wrt ``(a, b1, gamma, sigma0)``.

    Bins whose probability was clamped contribute nothing.
    """
    z, prob, clamped, sigma = _ordinal_parts(x, p, C, sigma_floor)
    r = np.where(clamped, 0.0, w / prob)
    zin = z[..., 1:C]  # finite interior cut points
    phi = norm_pdf(zin)
    # d/d b_j for interior j = 1..C-1
    gb = phi / sigma * (r[..., :-1] - r[..., 1:])
    gb = gb.reshape(-1, C - 1)
    zin = zin.reshape(-1, C - 1)
    xf = x.reshape(-1, x.shape[-1])
    g_proj = -gb.sum(axis=1)
    grad_a = g_proj @ xf
    gb_tot = gb.sum(axis=0)
    grad_b1 = gb_tot.sum()
    # b_j depends on gamma_k (k < j) through gamma_k**2
    tail = np.cumsum(gb_tot[::-1])[::-1]  # tail[j-1] = sum_{i >= j} gb_i
    gamma = np.asarray(p.gamma, dtype=float)
    grad_gamma = 2.0 * gamma * tail[1:]
    g_sigma = -(gb * zin).sum()
    grad_sigma0 = g_sigma * 2.0 * p.sigma0
    return grad_a, float(grad_b1), grad_gamma, float(grad_sigma0)
