"""Command-line interface.

Every verb prints a JSON report on stdout (human-readable tables go to
stderr). Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, RnnFvError
from .evaluation import (RetrievalMetrics, classify_accuracy, format_metrics_table, similarity_fuse,
                         svm_train)
from .fv import (fim_estimate, fim_normalize, gmm_fit, gmm_fv, l2_normalize, mean_pool, power_normalize,
                 rnn_fv_dim, rnn_fv_matrix, subsample_indices)
from .io import (atomic_write, bind_tokens, convert_dataset, export_model, import_model, load_dataset, load_embeddings,
                 save_dataset, vector_set, write_loss_curve)
from .numeric import cca_fit, cca_transform, cosine_similarity_matrix, pca_fit, pca_transform
from .pipeline import RunConfig, run, similarity_report
from .rnn import FeatureSequence, RnnArchitecture, TrainConfig, rnn_init, rnn_train
from .synthetic import generate_order_task, generate_retrieval_task

log = logging.getLogger("rnnfv")


def _dump(report) -> str:
    return json.dumps(report, sort_keys=True, indent=2)


def _matrix(ds):
    """One vector per record -> (n, D) matrix."""
    for r in ds.records:
        if len(r) != 1:
            raise DataError(f"record {r.id!r}: expected a single vector, found {len(r)}")
    return np.vstack([r.vectors for r in ds.records]) if len(ds) else np.zeros((0, ds.dim))


def _fused_matrix(paths):
    """Load vector sets, check ids line up, and concatenate them (early fusion)."""
    sets = [load_dataset(p) for p in paths]
    ids = [r.id for r in sets[0].records]
    for p, s in zip(paths[1:], sets[1:]):
        if [r.id for r in s.records] != ids:
            raise DataError(f"{p}: record ids do not line up with {paths[0]}")
    return sets[0], np.hstack([_matrix(s) for s in sets])


def _finish_vectors(X, args):
    if getattr(args, "normalize", False):
        X = l2_normalize(power_normalize(X, args.power_alpha))
    return X


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_order_task(args):
    train, test = generate_order_task(args.n_train, args.n_test, args.dim, args.length, args.seed)
    out = Path(args.out_dir)
    save_dataset(train, out / "train.jsonl")
    save_dataset(test, out / "test.jsonl")
    return {"verb": "gen-order-task", "seed": args.seed, "n_train": len(train), "n_test": len(test),
            "dim": args.dim, "length": args.length, "files": ["train.jsonl", "test.jsonl"]}


def cmd_gen_retrieval_task(args):
    splits = generate_retrieval_task(args.n_train, args.n_valid, args.n_test, args.seed, dx=args.dx, dy=args.dy,
                                     latent_dim=args.latent_dim, per_image=args.per_image, length=args.length,
                                     noise=args.noise)
    out = Path(args.out_dir)
    files = []
    for name, (xs, ys) in splits.items():
        save_dataset(xs, out / f"{name}_x.jsonl")
        save_dataset(ys, out / f"{name}_y.jsonl")
        files += [f"{name}_x.jsonl", f"{name}_y.jsonl"]
    return {"verb": "gen-retrieval-task", "seed": args.seed, "files": files}


def cmd_pca(args):
    ds = load_dataset(args.input)
    elements = np.vstack([r.vectors for r in ds.records])
    model = pca_fit(elements, args.dim)
    export_model(model, args.out)
    if args.transform_out:
        records = [FeatureSequence(pca_transform(model, r.vectors), r.label, r.id, r.group) for r in ds.records]
        save_dataset(type(ds)(records, model.output_dim, labels=ds.labels, meta=ds.meta), args.transform_out)
    return {"verb": "pca", "input_dim": model.input_dim, "output_dim": model.output_dim,
            "explained_variance": model.explained_variance.tolist()}


def _embedding_table(args):
    return load_embeddings(args.embeddings) if getattr(args, "embeddings", None) else None


def _sequences(path, table, mode):
    ds = load_dataset(path)
    if ds.kind == "tokens":
        if table is None:
            raise ConfigError(f"{path} holds token sequences: pass --embeddings")
        return bind_tokens(ds, table, mode)
    return list(ds.records)


def cmd_train_rnn(args):
    table = _embedding_table(args)
    train = _sequences(args.train, table, args.mode)
    valid = _sequences(args.valid, table, args.mode) if args.valid else None
    if not train:
        raise DataError("empty training set")
    out_dim = table.size if args.mode == "classification" else train[0].dim
    try:
        arch = RnnArchitecture(train[0].dim, args.lstm_units, out_dim, fc1_units=args.fc1_units or None,
                               leaky_relu_slope=args.leaky_relu_slope, mode=args.mode,
                               dropout_rate=args.dropout_rate)
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
                          weight_decay=args.weight_decay, gradient_clip_norm=args.gradient_clip_norm, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out_dir)

    def sink(ck):
        export_model(ck.model, out / f"rnn_epoch{ck.epoch:04d}.npz",
                     extra={"epoch": ck.epoch, "train_nll": ck.train_nll, "valid_nll": ck.valid_nll})

    result = rnn_train(rnn_init(arch, args.seed), train, valid, cfg, checkpoint_sink=sink)
    export_model(result.model, out / "rnn_final.npz", extra={"epoch": cfg.epochs})
    write_loss_curve(result.loss_curve, out / "loss_curve.csv")
    return {"verb": "train-rnn", "seed": args.seed, "num_params": result.model.num_params,
            "initial_train_nll": result.initial_train_nll,
            "loss_curve": [{"epoch": e, "train_nll": t, "valid_nll": v} for e, t, v in result.loss_curve]}


def cmd_extract_fv(args):
    model = import_model(args.model, "rnn")
    table = _embedding_table(args)
    ds = load_dataset(args.input)
    if ds.kind == "tokens" and table is None:
        raise ConfigError("token input needs --embeddings")
    seqs = bind_tokens(ds, table, model.architecture.mode) if ds.kind == "tokens" else list(ds.records)
    X = rnn_fv_matrix(model, seqs, args.aggregation, args.scope)
    meta = {"source": "rnn-fv", "aggregation": args.aggregation, "scope": args.scope, "normalizations": []}
    if args.subsample:
        if args.seed is None:
            raise ConfigError("--subsample needs --seed")
        idx = subsample_indices(X.shape[1], args.subsample, args.seed)
        X = X[:, idx]
        meta.update(subsample_seed=args.seed, subsample_count=args.subsample)
    if args.fim_out:
        export_model(fim_estimate(X), args.fim_out)
    if args.fim:
        X = fim_normalize(X, import_model(args.fim, "fim"))
        meta["normalizations"].append("fim")
    if args.normalize:
        meta["normalizations"] += [f"power({args.power_alpha:g})", "l2"]
    X = _finish_vectors(X, args)
    labels = [r.label for r in seqs]
    save_dataset(vector_set(X, [r.id for r in seqs], None if None in labels else labels,
                            [r.group for r in seqs], meta, ds.labels), args.out)
    return {"verb": "extract-fv", "count": X.shape[0], "dim": int(X.shape[1]),
            "raw_dim": rnn_fv_dim(model, args.scope), "meta": meta,
            "degenerate": int(np.sum(~X.any(axis=1)))}


def cmd_fit_gmm(args):
    ds = load_dataset(args.input)
    model = gmm_fit(np.vstack([r.vectors for r in ds.records]), args.k, args.seed)
    export_model(model, args.out)
    return {"verb": "fit-gmm", "seed": args.seed, "k": model.k, "iterations": len(model.log_likelihood_history),
            "log_likelihood": model.log_likelihood_history[-1] if model.log_likelihood_history else None}


def cmd_pool(args):
    ds = load_dataset(args.input)
    if args.method == "mean":
        X = np.array([mean_pool(r) for r in ds.records])
    else:
        if not args.gmm:
            raise ConfigError("gmm-fv pooling needs --gmm")
        gmm = import_model(args.gmm, "gmm")
        X = np.array([gmm_fv(gmm, r).values for r in ds.records])
    X = _finish_vectors(X, args)
    meta = {"source": args.method,
            "normalizations": [f"power({args.power_alpha:g})", "l2"] if args.normalize else []}
    labels = [r.label for r in ds.records]
    save_dataset(vector_set(X, [r.id for r in ds.records], None if None in labels else labels,
                            [r.group for r in ds.records], meta, ds.labels), args.out)
    return {"verb": "pool", "method": args.method, "count": X.shape[0], "dim": int(X.shape[1])}


def cmd_train_svm(args):
    ds, X = _fused_matrix(args.train)
    y = ds.label_array
    model = svm_train(X, y, args.C, args.seed, args.epochs)
    export_model(model, args.out)
    return {"verb": "train-svm", "seed": args.seed, "C": args.C, "classes": list(model.classes),
            "train_accuracy": classify_accuracy(model, X, y)}


def cmd_classify(args):
    model = import_model(args.model, "svm")
    ds, X = _fused_matrix(args.input)
    return {"verb": "classify", "count": X.shape[0], "accuracy": classify_accuracy(model, X, ds.label_array)}


def _pairing(xs, ys):
    lookup = {r.id: i for i, r in enumerate(xs.records)}
    if all(r.group in lookup for r in ys.records):
        return np.array([lookup[r.group] for r in ys.records])
    if len(xs) == len(ys):
        return np.arange(len(ys))
    raise DataError("cannot pair records: y-side groups do not name x-side ids")


def cmd_fit_cca(args):
    xs, ys = load_dataset(args.x), load_dataset(args.y)
    pair = _pairing(xs, ys)
    model = cca_fit(_matrix(xs)[pair], _matrix(ys), args.dim, args.lam)
    export_model(model, args.out)
    return {"verb": "fit-cca", "dim": model.dim, "lambda": args.lam, "correlations": model.correlations.tolist()}


def cmd_retrieve(args):
    if not (len(args.cca) == len(args.x) == len(args.y)):
        raise ConfigError("--cca, --x and --y must be given the same number of times")
    sims, sims_yy, pair = [], [], None
    for cpath, xpath, ypath in zip(args.cca, args.x, args.y):
        model = import_model(cpath, "cca")
        xs, ys = load_dataset(xpath), load_dataset(ypath)
        p = _pairing(xs, ys)
        if pair is not None and not np.array_equal(p, pair):
            raise DataError(f"{ypath}: pairing differs from the first model's")
        pair = p
        xp, yp = cca_transform(model, _matrix(xs), "x"), cca_transform(model, _matrix(ys), "y")
        sims.append(cosine_similarity_matrix(xp, yp))
        sims_yy.append(cosine_similarity_matrix(yp, yp))
    report = similarity_report(similarity_fuse(sims), similarity_fuse(sims_yy), pair, tuple(args.ks))
    rows = {name: RetrievalMetrics({int(k): v for k, v in report[name]["recall"].items()},
                                   report[name]["median_rank"], report[name]["mean_rank"])
            for name in ("annotation", "search")}
    print(format_metrics_table(rows, tuple(args.ks)), file=sys.stderr)
    report["verb"] = "retrieve"
    report["fused_models"] = len(sims)
    return report


def cmd_run(args):
    cfg_path = Path(args.config)
    cfg = RunConfig.load(cfg_path)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.pooling is not None:
        overrides["pooling"] = args.pooling
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if overrides:
        raw = cfg.to_dict()
        raw.update(overrides)
        cfg = RunConfig.from_dict(raw)
    report = run(cfg, base_dir=cfg_path.parent)
    print(report.table(), file=sys.stderr)
    if cfg.output_dir:
        out = Path(cfg.output_dir) / "report.json"
        with atomic_write(out) as fh:
            fh.write(report.to_json() + "\n")
    return report.to_dict()


def cmd_convert(args):
    convert_dataset(args.input, args.output)
    return {"verb": "convert", "input": str(args.input), "output": str(args.output)}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rnnfv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        return sp

    def norm_flags(sp):
        sp.add_argument("--normalize", action="store_true", help="apply power then L2 normalization")
        sp.add_argument("--power-alpha", type=float, default=0.5)

    sp = verb("gen-order-task", cmd_gen_order_task, "write the synthetic order-discrimination task")
    sp.add_argument("--n-train", type=int, default=1000)
    sp.add_argument("--n-test", type=int, default=200)
    sp.add_argument("--dim", type=int, default=10)
    sp.add_argument("--length", type=int, default=8)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out-dir", required=True)

    sp = verb("gen-retrieval-task", cmd_gen_retrieval_task, "write a planted-latent paired retrieval task")
    sp.add_argument("--n-train", type=int, default=400)
    sp.add_argument("--n-valid", type=int, default=100)
    sp.add_argument("--n-test", type=int, default=100)
    sp.add_argument("--dx", type=int, default=20)
    sp.add_argument("--dy", type=int, default=20)
    sp.add_argument("--latent-dim", type=int, default=8)
    sp.add_argument("--per-image", type=int, default=5)
    sp.add_argument("--length", type=int, default=6)
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out-dir", required=True)

    sp = verb("pca", cmd_pca, "fit PCA on all sequence elements")
    sp.add_argument("--input", required=True)
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--transform-out")

    sp = verb("train-rnn", cmd_train_rnn, "train the sequence model, one checkpoint per epoch")
    sp.add_argument("--train", required=True)
    sp.add_argument("--valid")
    sp.add_argument("--embeddings")
    sp.add_argument("--mode", choices=["regression", "classification"], default="regression")
    sp.add_argument("--fc1-units", type=int, default=32, help="0 disables the input FC layer")
    sp.add_argument("--lstm-units", type=int, default=32)
    sp.add_argument("--leaky-relu-slope", type=float, default=0.1)
    sp.add_argument("--dropout-rate", type=float, default=0.0)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--learning-rate", type=float, default=1e-3)
    sp.add_argument("--weight-decay", type=float, default=0.0)
    sp.add_argument("--gradient-clip-norm", type=float, default=5.0)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out-dir", required=True)

    sp = verb("extract-fv", cmd_extract_fv, "RNN Fisher vectors of a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--embeddings")
    sp.add_argument("--aggregation", choices=["mean", "sum"], default="mean")
    sp.add_argument("--scope", choices=["output-layer", "all-weights"], default="output-layer")
    sp.add_argument("--subsample", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--fim", help="apply a stored FIM diagonal")
    sp.add_argument("--fim-out", help="estimate the FIM diagonal from this input and store it")
    norm_flags(sp)

    sp = verb("fit-gmm", cmd_fit_gmm, "fit a diagonal GMM on all sequence elements")
    sp.add_argument("--input", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = verb("pool", cmd_pool, "mean or GMM Fisher vector pooling")
    sp.add_argument("--input", required=True)
    sp.add_argument("--method", choices=["mean", "gmm-fv"], required=True)
    sp.add_argument("--gmm")
    sp.add_argument("--out", required=True)
    norm_flags(sp)

    sp = verb("train-svm", cmd_train_svm, "one-vs-all linear SVM on vector sets (repeat --train to fuse)")
    sp.add_argument("--train", action="append", required=True)
    sp.add_argument("--C", type=float, default=1.0)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = verb("classify", cmd_classify, "accuracy of a trained SVM (repeat --input to fuse)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", action="append", required=True)

    sp = verb("fit-cca", cmd_fit_cca, "regularized CCA between paired vector sets")
    sp.add_argument("--x", required=True)
    sp.add_argument("--y", required=True)
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--lambda", dest="lam", type=float, default=0.0)
    sp.add_argument("--out", required=True)

    sp = verb("retrieve", cmd_retrieve, "bidirectional retrieval; repeat the triplet to fuse similarities")
    sp.add_argument("--cca", action="append", required=True)
    sp.add_argument("--x", action="append", required=True)
    sp.add_argument("--y", action="append", required=True)
    sp.add_argument("--ks", type=int, nargs="+", default=[1, 5, 10])

    sp = verb("run", cmd_run, "full recipe from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--pooling", choices=["mean", "gmm-fv", "rnn-fv"])
    sp.add_argument("--output-dir")

    sp = verb("convert", cmd_convert, "convert datasets between JSON lines and SQFV1 binary (.sqfv)")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        report = args.func(args)
    except RnnFvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    sys.stdout.write(_dump(report) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
