"""Versioned text model files.

Layout::

    vslcrf-model 1
    mode <mode>
    K <K>
    C <C>
    D <D>
    edge_feature <name>
    hyper <name>=<value> ...
    pca <D0> <D>            (optional; followed by D0 mean values, then D0 basis rows)
    params <n>
    <one value per line, both branches, core packing order>
"""

from __future__ import annotations

import os
from dataclasses import asdict, fields
from typing import Optional

import numpy as np

from .core import BOTH_BRANCHES, Hyperparams, ModelConfig, Model, VslCrfError, n_params, pack_params, unpack_params, zero_model
from .data import PcaTransform

FORMAT_VERSION = 1
MAGIC = "vslcrf-model"


class ModelFileError(VslCrfError):
    pass


def _fmt(v) -> str:
    return format(float(v), ".17g")


def model_to_text(model: Model, pca: Optional[PcaTransform] = None) -> str:
    cfg = model.config
    hyper = " ".join(f"{k}={_fmt(v) if isinstance(v, float) else v}" for k, v in asdict(model.hyper).items())
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"mode {cfg.mode.value}", f"K {cfg.K}", f"C {cfg.C}",
             f"D {cfg.D}", f"edge_feature {cfg.edge_feature_mode.value}", f"hyper {hyper}"]
    if pca is not None:
        D0, D = pca.basis.shape
        lines.append(f"pca {D0} {D} {_fmt(pca.retained_energy)}")
        lines.append(" ".join(_fmt(v) for v in pca.mean))
        lines.extend(" ".join(_fmt(v) for v in row) for row in pca.basis)
    vec = pack_params(model, BOTH_BRANCHES)
    lines.append(f"params {vec.size}")
    lines.extend(_fmt(v) for v in vec)
    return "\n".join(lines) + "\n"


def save_model(path, model: Model, pca: Optional[PcaTransform] = None) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(model_to_text(model, pca))
    os.replace(tmp, path)


def load_model(path):
    """Return ``(model, pca_or_None)``."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    it = iter(enumerate(lines, 1))

    def nxt():
        try:
            return next(it)
        except StopIteration:
            raise ModelFileError(f"{path}: unexpected end of file") from None

    _, head = nxt()
    parts = head.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    if int(parts[1]) != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format version {parts[1]}")
    meta = {}
    pca = None
    while True:
        no, line = nxt()
        key, _, rest = line.partition(" ")
        if key == "params":
            count = int(rest)
            break
        if key == "pca":
            D0, D, energy = rest.split()
            D0, D = int(D0), int(D)
            mean = np.array([float(v) for v in nxt()[1].split()])
            basis = np.array([[float(v) for v in nxt()[1].split()] for _ in range(D0)])
            if mean.shape != (D0,) or basis.shape != (D0, D):
                raise ModelFileError(f"{path}:{no}: malformed PCA block")
            pca = PcaTransform(mean, basis, float(energy))
            continue
        meta[key] = rest
    try:
        cfg = ModelConfig(int(meta["K"]), int(meta["C"]), int(meta["D"]),
                          meta["edge_feature"], meta["mode"])
    except KeyError as exc:
        raise ModelFileError(f"{path}: missing header field {exc}") from None
    types = {f.name: f.type for f in fields(Hyperparams)}
    hp = {}
    for tok in meta.get("hyper", "").split():
        k, v = tok.split("=", 1)
        if k in types:
            hp[k] = int(v) if types[k] in ("int", int) else float(v)
    vec = np.array([float(nxt()[1]) for _ in range(count)])
    if count != n_params(cfg, BOTH_BRANCHES):
        raise ModelFileError(f"{path}: expected {n_params(cfg, BOTH_BRANCHES)} parameters, found {count}")
    model = unpack_params(vec, zero_model(cfg, Hyperparams(**hp)), BOTH_BRANCHES)
    return model, pca
