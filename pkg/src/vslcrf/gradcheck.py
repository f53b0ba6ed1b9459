"""Finite-difference checks of every training objective on small random problems."""

from __future__ import annotations

import numpy as np

from .core import BOTH_BRANCHES, Branch, EdgeFeature, block_offsets, Hyperparams, Mode, ModelConfig, Sequence, n_params, pack_params, unpack_params, zero_model
from .chain import infer
from .learning import Objective
from .optim import GradCheckResult, grad_check_report

# VSLm is only differentiable away from branch ties
MIN_BRANCH_GAP = 1e-2


def random_model(rng, config: ModelConfig, hyper: Hyperparams, scale: float = 1.0,
                 sigma_range=None):
    """Gaussian parameters; ``sigma_range`` redraws each ``|sigma0|`` uniformly from it.

    Probit scales near the floor make the objective so curved that central
    differences at 1e-5 lose their accuracy, so the gradient checks keep
    ``sigma0`` away from zero.
    """
    vec = scale * rng.standard_normal(n_params(config, BOTH_BRANCHES))
    model = unpack_params(vec, zero_model(config, hyper), BOTH_BRANCHES)
    if sigma_range is None:
        return model
    offsets = block_offsets(config, BOTH_BRANCHES)
    for k in range(config.K):
        pos = offsets[(k, Branch.ORDINAL)] + config.D + 1 + config.C - 2
        vec[pos] = rng.choice([-1.0, 1.0]) * rng.uniform(*sigma_range)
    return unpack_params(vec, zero_model(config, hyper), BOTH_BRANCHES)


def random_problem(rng, mode: Mode, n_seq: int = 4, max_T: int = 5):
    K = int(rng.integers(1, 4))
    C = int(rng.integers(2, 4))
    D = int(rng.integers(1, 4))
    edge = EdgeFeature.CONSTANT_ONE if rng.random() < 0.5 else EdgeFeature.L1_DISTANCE
    cfg = ModelConfig(K, C, D, edge, mode)
    hyper = Hyperparams(lambda_n=float(rng.uniform(0.01, 0.5)), lambda_o=float(rng.uniform(0.01, 0.5)),
                        lambda_p=float(rng.uniform(0.1, 2.0)) if mode in (Mode.VSLD, Mode.VSLEM) else 0.0)
    data = [Sequence(f"r{i}", rng.standard_normal((int(rng.integers(1, max_T + 1)), D)),
                     int(rng.integers(1, K + 1))) for i in range(n_seq)]
    return random_model(rng, cfg, hyper, sigma_range=(0.5, 1.5)), data


def strict_winners(model, data) -> bool:
    lz = infer(data, model, BOTH_BRANCHES).log_z
    return bool(np.all(np.abs(lz[..., 0] - lz[..., 1]) > MIN_BRANCH_GAP))


def check_once(rng, mode: Mode, step: float = 1e-5) -> GradCheckResult:
    while True:
        model, data = random_problem(rng, mode)
        if mode != Mode.VSLM or strict_winners(model, data):
            break
    q = None
    if mode == Mode.VSLEM and rng.random() < 0.5:
        q = rng.dirichlet([1.0, 1.0], size=len(data))
    obj = Objective(data, model, q=q, include_entropy=q is not None)
    return grad_check_report(obj, obj.gradient, pack_params(model), step)


def run_gradcheck(modes, draws: int = 5, seed: int = 0, step: float = 1e-5) -> dict:
    """Worst :class:`GradCheckResult` per mode over ``draws`` random problems."""
    rng = np.random.default_rng(seed)
    out = {}
    for mode in modes:
        worst = None
        for _ in range(draws):
            res = check_once(rng, Mode(mode), step)
            if worst is None or res.max_rel_error > worst.max_rel_error:
                worst = res
        out[Mode(mode)] = worst
    return out
