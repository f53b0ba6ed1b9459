"""Command-line entry point: ``vslcrf {synth,segment,train,predict,eval,cv,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .chain import nu_posterior_from_log_z, infer, log_class_conditional, predict_frames
from .core import BOTH_BRANCHES, EdgeFeature, Hyperparams, Mode, ModelConfig, Sequence, VslCrfError
from .data import (
    DEFAULT_MIN_SEGMENT,
    DEFAULT_PCA_ENERGY,
    REGIMES,
    Dataset,
    balance,
    fit_pca,
    gen_synthetic,
    load_dataset,
    save_dataset,
    segment_sequences,
)
from .learning import fit
from .metrics import classification_rate, dataset_groups, f1_frame, f1_sequence_weighted, group_kfold, subset_average
from .modelio import load_model, save_model

log = logging.getLogger("vslcrf")

DEFAULT_STATES = 3
DEFAULT_GRID = (0.0, 1e-3, 1e-2, 1e-1, 1.0)
DEFAULT_WINDOWS = (4, 6, 8, 10, 12)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers

def _write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out_path, args, extra=None, started=None) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "inputs": [p for p in (getattr(args, "data", None),
                               args.model if args.command in ("predict", "eval") else None) if p],
        "outputs": [str(out_path)],
        "version": __version__,
        "wall_clock_s": None if started is None else round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    _write_text(f"{out_path}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _load(path) -> Dataset:
    if not os.path.exists(path):
        raise UsageError(f"--data: no such file: {path}")
    return load_dataset(path)


def _load_model(path):
    if not os.path.exists(path):
        raise UsageError(f"--model: no such file: {path}")
    return load_model(path)


def _float_list(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def parse_grid(text: str):
    """``"default"`` or three ``;``-separated comma lists (lambda_n; lambda_o; lambda_p)."""
    if text == "default":
        return DEFAULT_GRID, DEFAULT_GRID, DEFAULT_GRID
    parts = text.split(";")
    if len(parts) != 3:
        raise UsageError("--grid needs three ';'-separated lists: lambda_n;lambda_o;lambda_p")
    try:
        lists = tuple(_float_list(p) for p in parts)
    except ValueError:
        raise UsageError("--grid values must be numbers") from None
    if any(not lst for lst in lists):
        raise UsageError("--grid lists must be non-empty")
    return lists


def _hyper(args) -> Hyperparams:
    return Hyperparams(lambda_n=args.lambda_n, lambda_o=args.lambda_o, lambda_p=args.lambda_p,
                       max_iters=args.max_iters, em_max_rounds=args.em_rounds, seed=args.seed)


def _config(args, ds: Dataset, D: int) -> ModelConfig:
    return ModelConfig(ds.K, args.states, D, EdgeFeature(args.edge_feature), Mode(args.mode))


def _prepare(ds: Dataset, args):
    if getattr(args, "balance", False):
        ds = balance(ds, args.seed)
    pca = None
    if args.pca_energy is not None:
        pca = fit_pca(ds, args.pca_energy)
        ds = pca.apply(ds)
    return ds, pca


def grouped_holdout(ds: Dataset, frac: float, seed: int):
    """Split off roughly ``frac`` of the sequences, whole subjects at a time."""
    groups = dataset_groups(ds)
    uniq = sorted(set(groups))
    rng = np.random.default_rng(seed)
    order = [uniq[i] for i in rng.permutation(len(uniq))]
    target = max(1, int(round(frac * len(ds))))
    val_groups = set()
    count = 0
    for g in order:
        if count >= target or len(val_groups) == len(uniq) - 1:
            break
        val_groups.add(g)
        count += groups.count(g)
    val = [i for i, g in enumerate(groups) if g in val_groups]
    train = [i for i, g in enumerate(groups) if g not in val_groups]
    return train, val


def _macro_f1(model, data: Dataset) -> float:
    preds = _predict(model, data.sequences)[0]
    return f1_sequence_weighted(preds, data.labels, [s.T for s in data.sequences], data.K).macro_f1


def _train(ds: Dataset, args):
    """Fit one model, optionally choosing the lambdas on a grouped validation split."""
    cfg = _config(args, ds, ds.feature_dim)
    hyper = _hyper(args)
    grid_log = []
    if args.grid:
        ln_list, lo_list, lp_list = parse_grid(args.grid)
        tr_idx, va_idx = grouped_holdout(ds, args.val_frac, args.seed)
        if not va_idx or not tr_idx:
            raise UsageError("--val-frac leaves an empty train or validation split")
        tr, va = ds.subset(tr_idx), ds.subset(va_idx)
        best = None
        if not cfg.mode.is_vsl or cfg.mode == Mode.VSLM:
            lp_list = [hyper.lambda_p]
        for ln, lo, lp in itertools.product(ln_list, lo_list, lp_list):
            h = replace(hyper, lambda_n=ln, lambda_o=lo, lambda_p=lp)
            score = _macro_f1(fit(tr.sequences, cfg, h).model, va)
            grid_log.append({"lambda_n": ln, "lambda_o": lo, "lambda_p": lp, "val_macro_f1": score})
            if best is None or score > best[0]:
                best = (score, h)
        hyper = best[1]
    state = fit(ds.sequences, cfg, hyper)
    return state, grid_log


def _predict(model, seqs):
    """MAP labels, class posteriors and (VSL modes) branch posteriors at the MAP label."""
    inf = infer(seqs, model)
    logp = log_class_conditional(inf.log_z, model.mode)
    probs = np.exp(logp)
    labels = np.argmax(probs, axis=1) + 1
    nu = None
    if model.mode.is_vsl:
        lz = infer(seqs, model, BOTH_BRANCHES).log_z
        nu = nu_posterior_from_log_z(lz[np.arange(len(seqs)), labels - 1])
    return labels, probs, nu


def _check_compat(model, ds: Dataset, pca) -> Dataset:
    if pca is not None:
        if ds.feature_dim != pca.basis.shape[0]:
            raise VslCrfError(f"dimension mismatch: data D={ds.feature_dim}, model PCA expects D={pca.basis.shape[0]}")
        ds = pca.apply(ds)
    if ds.feature_dim != model.config.D:
        raise VslCrfError(f"dimension mismatch: data D={ds.feature_dim}, model D={model.config.D}")
    if ds.K > model.config.K:
        raise VslCrfError(f"class count mismatch: data K={ds.K}, model K={model.config.K}")
    return ds


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    ds = gen_synthetic(args.regime, args.nseq, args.T, args.D, args.noise, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} sequences to {args.out}")
    return 0


def cmd_segment(args) -> int:
    ds = _load(args.data)
    out = []
    for s in ds.sequences:
        if s.frame_labels is None:
            raise VslCrfError(f"sequence {s.id!r} has no frame labels to segment on")
        for seg, _ in segment_sequences(s.frames, s.frame_labels, args.min_seg_len, s.id, s.subject_id):
            out.append(seg)
    if not out:
        raise VslCrfError(f"no segments of at least {args.min_seg_len} frames")
    res = Dataset(out, 2, ds.feature_dim, {"source": args.data, "min_seg_len": args.min_seg_len})
    if args.balance:
        res = balance(res, args.seed)
    save_dataset(res, args.out)
    print(f"wrote {len(res)} segments to {args.out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    ds, pca = _prepare(_load(args.data), args)
    state, grid_log = _train(ds, args)
    save_model(args.model, state.model, pca)
    h = state.model.hyper
    extra = {
        "objective_trace": [float(v) for v in state.objective_trace],
        "converged": state.converged,
        "selected_lambdas": {"lambda_n": h.lambda_n, "lambda_o": h.lambda_o, "lambda_p": h.lambda_p},
        "grid": grid_log,
    }
    _write_manifest(args.model, args, extra, started)
    print(f"trained {args.mode} model on {len(ds)} sequences; final objective {state.objective_trace[-1]:.6g}")
    return 0


def cmd_predict(args) -> int:
    model, pca = _load_model(args.model)
    ds = _check_compat(model, _load(args.data), pca)
    lines = []
    if args.frame:
        for s in ds.sequences:
            labels = predict_frames(s, model, args.window)
            lines.append(f"{s.id} " + " ".join(str(int(v)) for v in labels))
    else:
        labels, probs, nu = _predict(model, ds.sequences)
        K = model.config.K
        head = "id label " + " ".join(f"p{k}" for k in range(1, K + 1))
        if nu is not None:
            head += " nu_nominal nu_ordinal"
        lines.append("# " + head)
        for i, s in enumerate(ds.sequences):
            row = f"{s.id} {labels[i]} " + " ".join(format(p, ".10g") for p in probs[i])
            if nu is not None:
                row += " " + " ".join(format(p, ".10g") for p in nu[i])
            lines.append(row)
    _write_text(args.out, "\n".join(lines) + "\n")
    _write_manifest(args.out, args)
    return 0


def _subset_lines(rep, subset, prefix: str) -> list:
    if not subset:
        return []
    f1_sub, f1_comb = subset_average(rep.per_class_f1, subset)
    rate_sub, rate_comb = subset_average(rep.per_class_recall, subset)
    return [f"{prefix}subset_macro_f1={f1_sub:.6f}", f"{prefix}subset_combined_macro_f1={f1_comb:.6f}",
            f"{prefix}subset_rate={rate_sub:.6f}", f"{prefix}subset_combined_rate={rate_comb:.6f}"]


def _parse_subset(text):
    if not text:
        return None
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--avg-subset expects a comma list of labels, got {text!r}") from None


def _frame_truth(seqs, K: int) -> np.ndarray:
    truth = np.concatenate([s.frame_labels for s in seqs])
    if truth.min() < 1 or truth.max() > K:
        raise VslCrfError(f"frame labels must be class labels in 1..{K} for frame-based evaluation")
    return truth


def _evaluate(model, ds: Dataset, windows, frame: bool, subset=None):
    blocks = []
    labels, _, _ = _predict(model, ds.sequences)
    lengths = [s.T for s in ds.sequences]
    seq_rep = f1_sequence_weighted(labels, ds.labels, lengths, model.config.K)
    blocks.append(seq_rep.to_text("sequence."))
    blocks.append(f"sequence.unweighted_rate={classification_rate(labels, ds.labels):.6f}")
    blocks.extend(_subset_lines(seq_rep, subset, "sequence."))
    if frame:
        if any(s.frame_labels is None for s in ds.sequences):
            raise VslCrfError("frame-based evaluation needs frame labels on every sequence")
        for w in windows:
            pred = np.concatenate([predict_frames(s, model, w) for s in ds.sequences])
            truth = _frame_truth(ds.sequences, model.config.K)
            rep = f1_frame(pred, truth, model.config.K)
            blocks.append(rep.to_text(f"frame.w{w}."))
    return blocks, labels


def _windows(args):
    if args.windows:
        return [int(v) for v in args.windows.split(",")]
    return [args.window]


def cmd_eval(args) -> int:
    model, pca = _load_model(args.model)
    ds = _check_compat(model, _load(args.data), pca)
    blocks, _ = _evaluate(model, ds, _windows(args), args.frame, _parse_subset(args.avg_subset))
    text = "\n".join(blocks) + "\n"
    if args.out:
        _write_text(args.out, text)
        _write_manifest(args.out, args)
    sys.stdout.write(text)
    return 0


def cmd_cv(args) -> int:
    started = time.time()
    subset = _parse_subset(args.avg_subset)
    ds = _load(args.data)
    groups = [s.id for s in ds.sequences] if args.group_by_sequence else dataset_groups(ds)
    splits = group_kfold(groups, args.folds, args.seed)
    blocks = []
    all_pred, all_truth, all_len = [], [], []
    frame_pred, frame_truth = [], []
    has_frames = all(s.frame_labels is not None for s in ds.sequences)
    for f, (tr, te) in enumerate(splits, 1):
        overlap = len({groups[i] for i in tr} & {groups[i] for i in te})
        if overlap:
            raise VslCrfError(f"fold {f} shares {overlap} subjects between train and test")
        train, pca = _prepare(ds.subset(tr), args)
        test = ds.subset(te)
        if pca is not None:
            test = pca.apply(test)
        state, _ = _train(train, args)
        model = state.model
        labels, _, _ = _predict(model, test.sequences)
        lengths = [s.T for s in test.sequences]
        rep = f1_sequence_weighted(labels, test.labels, lengths, ds.K)
        blocks.append(f"fold.{f}.n_train={len(tr)}")
        blocks.append(f"fold.{f}.n_test={len(te)}")
        blocks.append(f"fold.{f}.subject_overlap={overlap}")
        blocks.append(rep.to_text(f"fold.{f}.sequence."))
        all_pred.append(labels)
        all_truth.append(test.labels)
        all_len.append(lengths)
        if has_frames and args.frame:
            for s in test.sequences:
                frame_pred.append(predict_frames(s, model, args.window))
                frame_truth.append(_frame_truth([s], ds.K))
    pred = np.concatenate(all_pred)
    truth = np.concatenate(all_truth)
    pooled = f1_sequence_weighted(pred, truth, np.concatenate(all_len), ds.K)
    blocks.append(pooled.to_text("pooled.sequence."))
    blocks.append(f"pooled.sequence.unweighted_rate={classification_rate(pred, truth):.6f}")
    blocks.extend(_subset_lines(pooled, subset, "pooled.sequence."))
    if frame_pred:
        blocks.append(f1_frame(np.concatenate(frame_pred), np.concatenate(frame_truth), ds.K)
                      .to_text("pooled.frame."))
    text = "\n".join(blocks) + "\n"
    if args.out:
        _write_text(args.out, text)
        _write_manifest(args.out, args, started=started)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    modes = [Mode(m) for m in args.modes.split(",")] if args.modes else list(Mode)
    results = run_gradcheck(modes, draws=args.draws, seed=args.seed, step=args.step)
    ok = True
    lines = []
    for mode, res in results.items():
        passed = res.max_rel_error < args.tol
        ok &= passed
        lines.append(f"mode={mode.value} max_rel_error={res.max_rel_error:.3e} worst_index={res.worst_index} "
                     f"analytic={res.analytic:.10g} numeric={res.numeric:.10g} "
                     f"status={'PASS' if passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0 if ok else 1


# --------------------------------------------------------------------------
# parser

def _add_train_flags(p):
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.VSLEM.value)
    p.add_argument("--states", type=int, default=DEFAULT_STATES, help="latent states per branch (C)")
    p.add_argument("--edge-feature", choices=[e.value for e in EdgeFeature], default=EdgeFeature.L1_DISTANCE.value)
    p.add_argument("--lambda-n", type=float, default=Hyperparams.lambda_n)
    p.add_argument("--lambda-o", type=float, default=Hyperparams.lambda_o)
    p.add_argument("--lambda-p", type=float, default=Hyperparams.lambda_p)
    p.add_argument("--max-iters", type=int, default=Hyperparams.max_iters)
    p.add_argument("--em-rounds", type=int, default=Hyperparams.em_max_rounds)
    p.add_argument("--grid", default=None,
                   help="'default' or 'ln1,ln2;lo1,lo2;lp1,lp2' lambda lists searched on a validation split")
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--pca-energy", type=float, nargs="?", const=DEFAULT_PCA_ENERGY, default=None,
                   help=f"fit PCA on the training data keeping this energy fraction ({DEFAULT_PCA_ENERGY} when "
                        "given without a value)")
    p.add_argument("--balance", action="store_true", help="subsample 'other' sequences to the active count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vslcrf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--regime", choices=REGIMES, default="mixed")
    p.add_argument("--nseq", type=int, default=100)
    p.add_argument("--T", type=int, default=30)
    p.add_argument("--D", type=int, default=4)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="cut binary-labelled recordings into active/other sequences")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-seg-len", type=int, default=DEFAULT_MIN_SEGMENT)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label sequences or frames")
    p.add_argument("--model", dest="model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frame", action="store_true", help="sliding-window frame labels")
    p.add_argument("--window", type=int, default=6)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a model on a labelled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--frame", action="store_true")
    p.add_argument("--window", type=int, default=6)
    p.add_argument("--windows", default=None,
                   help="comma list of window sizes to sweep, e.g. " + ",".join(map(str, DEFAULT_WINDOWS)))
    p.add_argument("--avg-subset", default=None,
                   help="comma list of labels averaged as one group in extra report lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="subject-independent cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--group-by-sequence", action="store_true")
    p.add_argument("--frame", action="store_true")
    p.add_argument("--window", type=int, default=6)
    p.add_argument("--avg-subset", default=None,
                   help="comma list of labels averaged as one group in extra report lines")
    _add_train_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--modes", default=None, help="comma list; default all")
    p.add_argument("--draws", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (VslCrfError, OSError, ValueError) as exc:
        print(f"vslcrf: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
