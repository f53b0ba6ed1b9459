"""Variable-state latent CRFs for sequence classification."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    Branch,
    EdgeFeature,
    Hyperparams,
    Mode,
    Model,
    ModelConfig,
    Sequence,
    derive_thresholds,
    pack_params,
    unpack_params,
)
from .chain import class_conditional, nu_posterior, predict_frames, predict_sequence  # noqa: F401
from .learning import fit, init_params, nll_gradient, nll_objective  # noqa: F401
