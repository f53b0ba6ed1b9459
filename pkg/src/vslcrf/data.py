"""Dataset I/O, PCA, active/inactive segmentation, balancing and synthetic data.

Sequence file format (UTF-8 text)::

    #meta K=<K> D=<D>                         (optional, first line)
    #seq <id> <subject_id|-> <label> <T> <D>
    <D floats>[ | <frame_label>]               (T lines)
    <blank line>

Floats are written with 17 significant digits so a save/load round trip is
exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import InvalidInputError, Sequence, VslCrfError

ACTIVE = 1
OTHER = 2
DEFAULT_MIN_SEGMENT = 6
DEFAULT_PCA_ENERGY = 0.97


class ParseError(VslCrfError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(eq=False)
class Dataset:
    sequences: list
    K: int
    feature_dim: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.sequences:
            if s.D != self.feature_dim:
                raise InvalidInputError(f"sequence {s.id!r} has D={s.D}, dataset has D={self.feature_dim}")
            if not 1 <= s.label <= self.K:
                raise InvalidInputError(f"sequence {s.id!r} label {s.label} outside 1..{self.K}")

    def __len__(self):
        return len(self.sequences)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=int)

    def subset(self, index) -> "Dataset":
        return Dataset([self.sequences[i] for i in index], self.K, self.feature_dim, dict(self.provenance))


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(ds: Dataset, path) -> None:
    lines = [f"#meta K={ds.K} D={ds.feature_dim}"]
    for s in ds.sequences:
        if any(ch.isspace() for ch in s.id) or (s.subject_id and any(ch.isspace() for ch in s.subject_id)):
            raise InvalidInputError(f"ids may not contain whitespace: {s.id!r}")
        lines.append(f"#seq {s.id} {s.subject_id or '-'} {s.label} {s.T} {s.D}")
        for t in range(s.T):
            row = " ".join(_fmt(v) for v in s.frames[t])
            if s.frame_labels is not None:
                row += f" | {int(s.frame_labels[t])}"
            lines.append(row)
        lines.append("")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    K_meta = D_meta = None
    seqs = []
    i = 0
    n = len(lines)
    while i < n:
        line = lines[i].strip()
        lineno = i + 1
        i += 1
        if not line:
            continue
        if line.startswith("#meta"):
            try:
                kv = dict(tok.split("=", 1) for tok in line.split()[1:])
                K_meta, D_meta = int(kv["K"]), int(kv["D"])
            except (KeyError, ValueError):
                raise ParseError(path, lineno, "malformed #meta line") from None
            continue
        if not line.startswith("#seq"):
            raise ParseError(path, lineno, "expected a '#seq' header")
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(path, lineno, "header must be '#seq <id> <subject> <label> <T> <D>'")
        _, sid, subj, label, T, D = parts
        try:
            label, T, D = int(label), int(T), int(D)
        except ValueError:
            raise ParseError(path, lineno, "label, T and D must be integers") from None
        if T < 1:
            raise ParseError(path, lineno, f"sequence {sid!r} has no frames (T must be >= 1)")
        if D_meta is not None and D != D_meta:
            raise ParseError(path, lineno, f"sequence {sid!r} declares D={D}, dataset has D={D_meta}")
        if seqs and D != seqs[0].D:
            raise ParseError(path, lineno, f"sequence {sid!r} declares D={D}, earlier sequences have D={seqs[0].D}")
        if label < 1 or (K_meta is not None and label > K_meta):
            raise ParseError(path, lineno, f"label {label} out of range")
        frames = np.empty((T, D))
        flabels = []
        for t in range(T):
            if i >= n or not lines[i].strip() or lines[i].startswith("#"):
                raise ParseError(path, i + 1, f"sequence {sid!r} has fewer than T={T} frame rows")
            row = lines[i]
            rowno = i + 1
            i += 1
            if "|" in row:
                vals, fl = row.split("|", 1)
                try:
                    flabels.append(int(fl.strip()))
                except ValueError:
                    raise ParseError(path, rowno, "frame label must be an integer") from None
            else:
                vals = row
            toks = vals.split()
            if len(toks) != D:
                raise ParseError(path, rowno, f"row has {len(toks)} values, expected D={D}")
            try:
                frames[t] = [float(v) for v in toks]
            except ValueError:
                raise ParseError(path, rowno, "non-numeric feature value") from None
            if not np.all(np.isfinite(frames[t])):
                raise ParseError(path, rowno, "non-finite feature value")
        if flabels and len(flabels) != T:
            raise ParseError(path, lineno, "frame labels must be given for all frames or none")
        seqs.append(Sequence(sid, frames, label, None if subj == "-" else subj,
                             np.array(flabels) if flabels else None))
    if not seqs:
        raise ParseError(path, 1, "no sequences")
    K = K_meta if K_meta is not None else max(s.label for s in seqs)
    return Dataset(seqs, K, seqs[0].D, {"source": str(path)})


# --------------------------------------------------------------------------
# PCA

@dataclass(frozen=True, eq=False)
class PcaTransform:
    mean: np.ndarray
    basis: np.ndarray  # D0 x D
    retained_energy: float

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) @ self.basis

    def apply(self, ds: Dataset) -> Dataset:
        seqs = [replace(s, frames=self.transform(s.frames)) for s in ds.sequences]
        prov = dict(ds.provenance, pca_dim=self.basis.shape[1], pca_energy=self.retained_energy)
        return Dataset(seqs, ds.K, self.basis.shape[1], prov)


def fit_pca(data: Dataset, energy: float = DEFAULT_PCA_ENERGY) -> PcaTransform:
    """Smallest projection keeping at least ``energy`` of the frame variance."""
    if not 0 < energy <= 1:
        raise InvalidInputError("energy must lie in (0, 1]")
    X = np.concatenate([s.frames for s in data.sequences])
    if X.shape[0] < 2:
        raise InvalidInputError("PCA needs at least two frames")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    eig = sv ** 2
    tol = eig.max(initial=0.0) * max(Xc.shape) * np.finfo(float).eps
    eig = np.where(eig > tol, eig, 0.0)
    total = eig.sum()
    if total <= 0:
        raise InvalidInputError("data have zero variance; PCA is undefined")
    cum = np.cumsum(eig) / total
    dim = int(np.searchsorted(cum, energy - 1e-12) + 1)
    dim = min(dim, int(np.count_nonzero(eig)))
    basis = Vt[:dim].T.copy()
    for j in range(dim):
        if basis[np.argmax(np.abs(basis[:, j])), j] < 0:
            basis[:, j] *= -1
    return PcaTransform(mean, basis, float(cum[dim - 1]))


# --------------------------------------------------------------------------
# segmentation / balancing

def segment_sequences(frames, frame_labels, min_len: int = DEFAULT_MIN_SEGMENT,
                      id_prefix: str = "seg", subject_id: Optional[str] = None):
    """Cut a binary-labelled recording into constant runs of at least ``min_len`` frames.

    Runs of 1s become ``ACTIVE`` sequences, runs of 0s ``OTHER`` ones.
    Returns a list of ``(Sequence, label)`` pairs in time order.
    """
    X = np.asarray(frames, dtype=float)
    lab = np.asarray(frame_labels).astype(int)
    if lab.shape != (X.shape[0],):
        raise InvalidInputError("need one frame label per frame")
    if not np.all(np.isin(lab, (0, 1))):
        raise InvalidInputError("frame labels must be binary")
    out = []
    if lab.size == 0:
        return out
    change = np.flatnonzero(np.diff(lab)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [lab.size]))
    for a, b in zip(starts, ends):
        if b - a < min_len:
            continue
        label = ACTIVE if lab[a] == 1 else OTHER
        seq = Sequence(f"{id_prefix}_{a}_{b}", X[a:b], label, subject_id, np.full(b - a, label))
        out.append((seq, label))
    return out


def balance(data: Dataset, seed: int = 0) -> Dataset:
    """Drop randomly chosen ``OTHER`` sequences until both classes are equally large."""
    lab = data.labels
    pos = np.flatnonzero(lab == ACTIVE)
    neg = np.flatnonzero(lab != ACTIVE)
    if len(neg) <= len(pos):
        return data
    rng = np.random.default_rng(seed)
    keep_neg = rng.choice(neg, size=len(pos), replace=False)
    keep = np.sort(np.concatenate((pos, keep_neg)))
    out = data.subset(keep)
    out.provenance["balanced_seed"] = seed
    return out


# --------------------------------------------------------------------------
# synthetic data

REGIMES = ("ordinal_ramp", "nominal_clusters", "mixed")
RAMP_AMPLITUDE = 3.0
CLUSTER_STAY = 0.8


def ramp_intensity(T: int, onset: int, apex: int, offset: int) -> np.ndarray:
    """Piecewise-linear 0 -> 1 -> 0 intensity per frame.

    ``onset``, ``apex`` and ``offset`` are the lengths (in frames) of the rise,
    plateau and fall; any remaining frames are neutral (intensity 0) at the end.
    """
    s = np.zeros(T)
    t = np.arange(T)
    rise_end = onset
    plateau_end = onset + apex
    fall_end = min(T, plateau_end + offset)
    if onset > 0:
        s[:rise_end] = (t[:rise_end] + 1) / onset
    s[rise_end:plateau_end] = 1.0
    if offset > 0:
        s[plateau_end:fall_end] = 1.0 - (t[plateau_end:fall_end] - plateau_end + 1) / offset
    return np.clip(s, 0.0, 1.0)


def _ramp_sequence(rng, T, direction, noise_sd):
    # random phase lengths summing to at most T
    cuts = np.sort(rng.choice(np.arange(1, T), size=2, replace=False)) if T > 2 else np.array([1, 1])
    onset, apex = int(cuts[0]), int(cuts[1] - cuts[0])
    offset = T - onset - apex
    s = ramp_intensity(T, onset, apex, offset)
    mean = s[:, None] * (RAMP_AMPLITUDE * direction)[None, :]
    # phases: 1 neutral/low, 2 rising or falling, 3 apex
    phase = np.where(s >= 1.0 - 1e-12, 3, np.where(s > 1.0 / 3.0, 2, 1))
    return mean + noise_sd * rng.standard_normal(mean.shape), phase


def _cluster_sequence(rng, T, means, noise_sd):
    C = means.shape[0]
    state = np.empty(T, dtype=int)
    state[0] = rng.integers(C)
    for t in range(1, T):
        if rng.random() < CLUSTER_STAY:
            state[t] = state[t - 1]
        else:
            state[t] = (state[t - 1] + 1 + rng.integers(C - 1)) % C
    mean = means[state]
    return mean + noise_sd * rng.standard_normal(mean.shape), state + 1


def _triangle_means(rng, direction):
    """Three cluster means on an equilateral triangle around the ramp midpoint.

    The triangle lies in the plane of the ramp direction and a random
    orthogonal direction, so frame positions overlap the ramp but the clusters
    have no natural order.
    """
    D = direction.shape[0]
    centre = 0.5 * RAMP_AMPLITUDE * direction
    if D == 1:
        return centre + 0.5 * RAMP_AMPLITUDE * np.array([[-1.0], [0.0], [1.0]]) * direction
    w = rng.standard_normal(D)
    w -= (w @ direction) * direction
    w /= np.linalg.norm(w)
    angles = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(3) / 3
    r = 0.5 * RAMP_AMPLITUDE
    return centre + r * (np.cos(angles)[:, None] * direction + np.sin(angles)[:, None] * w)


def gen_synthetic(regime: str, n_seq: int, T: int, D: int, noise_sd: float, seed: int) -> Dataset:
    """Synthetic sequences with known latent structure.

    ``ordinal_ramp`` walks a fixed direction with intensity 0 -> 1 -> 0;
    ``nominal_clusters`` jumps between three unordered cluster means along a
    sticky chain; ``mixed`` labels ramps 1 and cluster sequences 2 (alternating).
    Ground-truth latent phases are stored as frame labels.
    """
    if regime not in REGIMES:
        raise InvalidInputError(f"unknown regime {regime!r}; choose from {REGIMES}")
    if n_seq < 1 or T < 1 or D < 1 or noise_sd < 0:
        raise InvalidInputError("sizes must be positive and noise_sd non-negative")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(D)
    direction /= np.linalg.norm(direction)
    means = _triangle_means(rng, direction)
    seqs = []
    for i in range(n_seq):
        if regime == "ordinal_ramp" or (regime == "mixed" and i % 2 == 0):
            x, phase = _ramp_sequence(rng, T, direction, noise_sd)
            label = 1
        else:
            x, phase = _cluster_sequence(rng, T, means, noise_sd)
            label = 2 if regime == "mixed" else 1
        seqs.append(Sequence(f"s{i:04d}", x, label, f"subj{i % max(1, min(n_seq, 10)):02d}", phase))
    K = 2 if regime == "mixed" else 1
    prov = {"source": "synthetic", "regime": regime, "n_seq": n_seq, "T": T, "D": D,
            "noise_sd": noise_sd, "seed": seed}
    return Dataset(seqs, K, D, prov)
