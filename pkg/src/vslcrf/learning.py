"""Training objectives, gradients and the fitting drivers for all five modes.

Every data term depends on the parameters only through the branch
log-partitions ``log_z[i, k, branch]``.  Each objective is therefore
computed in two steps: the weights ``W = d objective / d log_z`` come from a
closed form for that mode, and those weights are then contracted with the
chain marginals (``d log_z / d theta`` is a posterior feature expectation).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence as SeqType

import numpy as np

from .chain import (
    Inference,
    NuPosterior,
    _lse,
    class_log_scores,
    group_by_length,
    infer,
    nu_posterior_from_log_z,
)
from .core import (
    BOTH_BRANCHES,
    Branch,
    DivergedError,
    Hyperparams,
    InvalidInputError,
    Mode,
    Model,
    ModelConfig,
    Sequence,
    active_branches,
    block_offsets,
    branch_size,
    n_params,
    pack_params,
    unpack_params,
    validate_data,
    zero_model,
)
from .laplacian import build_laplacian, posterior_reg, posterior_reg_gradient
from .optim import LbfgsConfig, minimize
from .potentials import nominal_node_grad, ordinal_node_grad

log = logging.getLogger(__name__)


@dataclass
class TrainState:
    model: Model
    objective_trace: list = field(default_factory=list)
    nu_trace: list = field(default_factory=list)  # per EM round: list of NuPosterior
    converged: bool = False
    n_iter: int = 0


def init_params(config: ModelConfig, hyper: Hyperparams,
                data: Optional[SeqType[Sequence]] = None) -> Model:
    """Seeded start point: small uniform ``beta`` and ``a``, spread thresholds, no edges."""
    rng = np.random.default_rng(hyper.seed)
    base = zero_model(config, hyper)
    C, D = config.C, config.D
    vec_blocks = []
    for _ in range(config.K):
        beta = rng.uniform(-0.1, 0.1, size=(C, D + 1))
        a = rng.uniform(-0.1, 0.1, size=D)
        vec_blocks += [beta.ravel(), np.zeros(C * C),
                       a, [0.0], np.full(C - 2, 1.0 / np.sqrt(C)), [1.0], np.zeros(C * C)]
    return unpack_params(np.concatenate(vec_blocks), base, BOTH_BRANCHES)


class Objective:
    """Regularized negative log-likelihood for one mode over a fixed dataset.

    ``q`` (N x 2) switches the data term to the EM bound
    ``-sum_i sum_nu q_i(nu) log P(y_i, nu | x_i)``; ``include_entropy`` adds
    ``sum q log q`` so that at ``q = P(nu | x, y)`` the bound equals the
    marginal objective.
    """

    def __init__(self, data: SeqType[Sequence], template: Model,
                 q: Optional[np.ndarray] = None, include_entropy: bool = False):
        cfg = template.config
        validate_data(data, cfg)
        self.data = list(data)
        self.template = template
        self.mode = cfg.mode
        self.hyper = template.hyper
        self.branches = active_branches(cfg.mode)
        self.labels = np.array([s.label for s in self.data]) - 1
        self.groups = group_by_length(self.data, cfg.edge_feature_mode)
        self.q = None if q is None else np.asarray(q, dtype=float)
        if self.q is not None and self.q.shape != (len(self.data), 2):
            raise InvalidInputError("q must have shape (N, 2)")
        self.include_entropy = include_entropy
        self.use_posterior_reg = cfg.mode in (Mode.VSLD, Mode.VSLEM) and self.hyper.lambda_p > 0
        self.graph = build_laplacian(self.labels) if self.use_posterior_reg else None
        self.lam = self._lambda_vector(cfg)
        self._cache_key = None
        self._cache = None

    def _lambda_vector(self, cfg: ModelConfig) -> np.ndarray:
        lam = np.empty(n_params(cfg, self.branches))
        for (k, br), off in block_offsets(cfg, self.branches).items():
            val = self.hyper.lambda_n if br == Branch.NOMINAL else self.hyper.lambda_o
            lam[off:off + branch_size(cfg, br)] = val
        return lam

    # -- evaluation -----------------------------------------------------
    def unpack(self, vec) -> Model:
        return unpack_params(vec, self.template, self.branches)

    def __call__(self, vec) -> float:
        return self.value_and_grad(vec)[0]

    def gradient(self, vec) -> np.ndarray:
        return self.value_and_grad(vec)[1].copy()

    def value_and_grad(self, vec):
        vec = np.asarray(vec, dtype=float)
        key = vec.tobytes()
        if key != self._cache_key:
            self._cache = self._compute(vec)
            self._cache_key = key
        return self._cache

    def data_weights(self, log_z: np.ndarray):
        """Data-term value and its derivative wrt ``log_z`` for this mode."""
        N = log_z.shape[0]
        rows = np.arange(N)
        y = self.labels
        W = np.zeros_like(log_z)
        if self.mode in (Mode.HCRF, Mode.HCORF):
            br = int(self.branches[0])
            s = log_z[..., br]
            lse = _lse(s, axis=1)
            W[..., br] = np.exp(s - lse[:, None])
            W[rows, y, br] -= 1.0
            return float(np.sum(lse - s[rows, y])), W
        if self.mode == Mode.VSLM:
            # ties go to the nominal branch (argmax takes the first maximum)
            win = np.argmax(log_z, axis=2)
            s = np.take_along_axis(log_z, win[..., None], axis=2)[..., 0]
            lse = _lse(s, axis=1)
            p = np.exp(s - lse[:, None])
            p[rows, y] -= 1.0
            np.put_along_axis(W, win[..., None], p[..., None], axis=2)
            return float(np.sum(lse - s[rows, y])), W
        # integrated over both branches
        flat = log_z.reshape(N, -1)
        lse = _lse(flat, axis=1)
        W[:] = np.exp(log_z - lse[:, None, None])
        lz_y = log_z[rows, y]
        if self.q is None:
            q = nu_posterior_from_log_z(lz_y)
            value = np.sum(lse - np.logaddexp(lz_y[:, 0], lz_y[:, 1]))
        else:
            q = self.q
            value = np.sum(lse) - np.sum(q * lz_y)
            if self.include_entropy:
                value += np.sum(q[q > 0] * np.log(q[q > 0]))
        W[rows, y] -= q
        return float(value), W

    def posterior_terms(self, log_z: np.ndarray):
        """Laplacian penalty on P(nu | x, y) and its derivative wrt ``log_z``."""
        rows = np.arange(log_z.shape[0])
        f = nu_posterior_from_log_z(log_z[rows, self.labels])
        fn, fo = f[:, 0], f[:, 1]
        R = posterior_reg(fn, self.graph) + posterior_reg(fo, self.graph)
        # f_o = 1 - f_n, so both penalties move with f_n
        dR_dfn = posterior_reg_gradient(fn, self.graph) - posterior_reg_gradient(fo, self.graph)
        dfn = fn * fo
        W = np.zeros_like(log_z)
        W[rows, self.labels, 0] = dR_dfn * dfn
        W[rows, self.labels, 1] = -dR_dfn * dfn
        return self.hyper.lambda_p * R, self.hyper.lambda_p * W

    def _compute(self, vec):
        model = self.unpack(vec)
        inf = infer(self.data, model, self.branches, marginals=True, groups=self.groups)
        value, W = self.data_weights(inf.log_z)
        if self.use_posterior_reg:
            r, Wr = self.posterior_terms(inf.log_z)
            value += r
            W = W + Wr
        value += float(np.sum(self.lam * vec * vec))
        grad = contract_weights(inf, W, model) + 2.0 * self.lam * vec
        return value, grad


def contract_weights(inf: Inference, W: np.ndarray, model: Model) -> np.ndarray:
    """``sum_{i,k,branch} W[i,k,branch] * d log_z[i,k,branch] / d theta`` in packed layout."""
    cfg = model.config
    C, D = cfg.C, cfg.D
    sf = model.hyper.sigma_floor
    offsets = block_offsets(cfg, inf.branches)
    grad = np.zeros(n_params(cfg, inf.branches))
    for grp, marg in zip(inf.groups, inf.marginals):
        for (k, br), (mu, xi) in marg.items():
            w = W[grp.index, k, int(br)]
            if not np.any(w):
                continue
            cp = model.classes[k]
            off = offsets[(k, br)]
            wmu = w[:, None, None] * mu
            g_edge = np.einsum("i,itcl,it->cl", w, xi, grp.G)
            if br == Branch.NOMINAL:
                g_beta = nominal_node_grad(grp.X, wmu, cp.nominal)
                n_beta = C * (D + 1)
                grad[off:off + n_beta] += g_beta.ravel()
                grad[off + n_beta:off + n_beta + C * C] += g_edge.ravel()
            else:
                ga, gb1, ggam, gs0 = ordinal_node_grad(grp.X, wmu, cp.ordinal, C, sf)
                pos = off
                grad[pos:pos + D] += ga
                pos += D
                grad[pos] += gb1
                pos += 1
                grad[pos:pos + C - 2] += ggam
                pos += C - 2
                grad[pos] += gs0
                pos += 1
                grad[pos:pos + C * C] += g_edge.ravel()
    return grad


# --------------------------------------------------------------------------
# public objective / gradient entry points

def nll_objective(data: SeqType[Sequence], model: Model) -> float:
    return Objective(data, model)(pack_params(model))


def nll_gradient(data: SeqType[Sequence], model: Model, q: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient in :func:`pack_params` layout.

    In VSLem mode ``q`` weights each sequence's branch terms; without it the
    current branch posteriors are used, which gives the gradient of the
    marginal objective.
    """
    if q is not None and model.mode != Mode.VSLEM:
        raise InvalidInputError("q-weights only apply to VSLem")
    return Objective(data, model, q=q).gradient(pack_params(model))


def vslm_subgradient(data: SeqType[Sequence], model: Model) -> np.ndarray:
    if model.mode != Mode.VSLM:
        raise InvalidInputError("vslm_subgradient needs a VSLm model")
    return Objective(data, model).gradient(pack_params(model))


def branch_winners(data: SeqType[Sequence], model: Model) -> np.ndarray:
    """Per (sequence, class) branch picked by max-pooling; ties go nominal."""
    lz = infer(data, model, BOTH_BRANCHES).log_z
    return np.argmax(lz, axis=2)


def nu_posteriors(data: SeqType[Sequence], model: Model) -> np.ndarray:
    """P(nu | x_i, y_i) for every sequence, shape (N, 2)."""
    lz = infer(data, model, BOTH_BRANCHES).log_z
    y = np.array([s.label for s in data]) - 1
    return nu_posterior_from_log_z(lz[np.arange(len(data)), y])


# --------------------------------------------------------------------------
# drivers

def _lbfgs_cfg(hyper: Hyperparams, max_iters: int) -> LbfgsConfig:
    return LbfgsConfig(max_iters=max_iters, grad_tol=hyper.grad_tol, ftol=1e-10)


def _check_finite(value, model, trace):
    if not np.isfinite(value):
        raise DivergedError("objective became non-finite", TrainState(model, trace))


def _fit_lbfgs(obj: Objective, x0: np.ndarray, hyper: Hyperparams, max_iters: int):
    try:
        return minimize(obj, obj.gradient, x0, _lbfgs_cfg(hyper, max_iters))
    except DivergedError as exc:
        raise DivergedError(str(exc), TrainState(obj.unpack(x0))) from exc


def _fit_subgradient(obj: Objective, x0: np.ndarray, hyper: Hyperparams):
    """Diminishing-step subgradient descent; returns the best iterate seen."""
    x = x0.copy()
    f, g = obj.value_and_grad(x)
    _check_finite(f, obj.unpack(x), [])
    best_x, best_f = x.copy(), f
    trace = [f]
    for t in range(1, hyper.max_iters + 1):
        gnorm = np.linalg.norm(g)
        if gnorm < hyper.grad_tol:
            break
        x = x - hyper.subgradient_step / np.sqrt(t) * g / max(1.0, gnorm)
        f, g = obj.value_and_grad(x)
        _check_finite(f, obj.unpack(best_x), trace)
        if f < best_f:
            best_x, best_f = x.copy(), f
        trace.append(best_f)
    return best_x, trace


def fit(data: SeqType[Sequence], config: ModelConfig, hyper: Hyperparams,
        init: Optional[Model] = None) -> TrainState:
    """Train a model in ``config.mode``."""
    if len(data) == 0:
        raise InvalidInputError("no training sequences")
    validate_data(data, config)
    model0 = init if init is not None else init_params(config, hyper, data)
    mode = config.mode
    if mode == Mode.VSLEM:
        return _fit_em(data, model0, hyper)
    obj = Objective(data, model0)
    x0 = pack_params(model0)
    if mode == Mode.VSLM:
        x, trace = _fit_subgradient(obj, x0, hyper)
        return TrainState(obj.unpack(x), trace, converged=False, n_iter=len(trace) - 1)
    res = _fit_lbfgs(obj, x0, hyper, hyper.max_iters)
    log.info("%s: %s after %d iterations, objective %.6g", mode.value, res.message, res.n_iter, res.fun)
    return TrainState(obj.unpack(res.x), res.trace, converged=res.converged, n_iter=res.n_iter)


def _fit_em(data: SeqType[Sequence], model: Model, hyper: Hyperparams) -> TrainState:
    """Alternate branch posteriors (E) with warm-started L-BFGS on the bound (M).

    The trace records the bound at the start of each round's M-step, which
    after the first round equals the marginal objective.
    """
    N = len(data)
    q = np.full((N, 2), 0.5)
    m_iters = max(1, hyper.max_iters // max(1, hyper.em_max_rounds))
    x = pack_params(model)
    trace = [Objective(data, model, q=q, include_entropy=True)(x)]
    nu_trace = []
    converged = False
    n_iter = 0
    for _ in range(hyper.em_max_rounds):
        obj = Objective(data, model, q=q, include_entropy=True)
        res = _fit_lbfgs(obj, x, hyper, m_iters)
        n_iter += res.n_iter
        x = res.x
        model = obj.unpack(x)
        q = nu_posteriors(data, model)
        nu_trace.append([NuPosterior(float(a), float(b)) for a, b in q])
        value = Objective(data, model, q=q, include_entropy=True)(x)
        _check_finite(value, model, trace)
        trace.append(value)
        log.debug("EM round %d: objective %.10g", len(nu_trace), value)
        if abs(trace[-2] - trace[-1]) < hyper.em_obj_tol:
            converged = True
            break
    return TrainState(model, trace, nu_trace, converged, n_iter)
