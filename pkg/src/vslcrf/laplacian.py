"""Graph-Laplacian smoothing of per-sequence branch posteriors.

Training sequences are nodes of a graph joining every pair with the same
class label.  For a vector ``f`` of branch posteriors the penalty
``f^T L f = 1/2 sum_ij S_ij (f_i - f_j)^2`` is small when same-class sequences
agree on their latent-state type.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class LaplacianGraph:
    similarity: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray

    @property
    def N(self) -> int:
        return self.similarity.shape[0]


def build_laplacian(labels) -> LaplacianGraph:
    y = np.asarray(labels)
    if y.ndim != 1 or y.size < 1:
        raise ValueError("labels must be a non-empty vector")
    S = (y[:, None] == y[None, :]).astype(float)
    np.fill_diagonal(S, 0.0)
    Dg = np.diag(S.sum(axis=1))
    return LaplacianGraph(S, Dg, Dg - S)


def posterior_reg(f, g: LaplacianGraph) -> float:
    """``f^T L f``, summed over edges so it is exactly 0 for constant ``f``."""
    f = np.asarray(f, dtype=float)
    diff = f[:, None] - f[None, :]
    return float(np.sum(np.triu(g.similarity, 1) * diff * diff))


def posterior_reg_gradient(f, g: LaplacianGraph) -> np.ndarray:
    """``2 L f``, formed from differences so constant ``f`` gives exact zeros."""
    f = np.asarray(f, dtype=float)
    return 2.0 * np.sum(g.similarity * (f[:, None] - f[None, :]), axis=1)
