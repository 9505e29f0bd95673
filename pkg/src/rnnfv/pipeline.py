"""End-to-end recipes.

``run_classify``: preprocess -> train RNN (per-epoch checkpoints) -> per epoch
extract Fisher vectors, train an SVM on the training split and score the
validation split -> keep the best epoch -> retrain the SVM on train+valid ->
report test accuracy.

``run_retrieve``: encode the sequence side, fit CCA on training pairs,
rank both directions on the test split. RNN epoch and CCA regularization are
chosen on the validation split.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, RnnFvError
from .evaluation import (RetrievalMetrics, classify_accuracy, format_metrics_table, rank_similarity,
                         retrieval_metrics, svm_train)
from .fv import (FimDiagonal, fim_estimate, fim_normalize, gmm_fit, gmm_fv, l2_normalize, mean_pool,
                 power_normalize, rnn_fv_matrix, subsample_indices)
from .io import SequenceDataset, bind_tokens, export_model, load_dataset, load_embeddings, write_loss_curve
from .numeric import cca_fit, cca_transform, cosine_similarity_matrix, pca_fit, pca_transform
from .rnn import FeatureSequence, RnnArchitecture, TrainConfig, rnn_init, rnn_train

log = logging.getLogger(__name__)

POOLINGS = ("mean", "gmm-fv", "rnn-fv")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PreprocessConfig:
    pca_dim: Optional[int] = None
    l2: bool = False
    pca_samples: Optional[int] = None


@dataclass
class RnnConfig:
    fc1_units: Optional[int] = 32
    lstm_units: int = 32
    leaky_relu_slope: float = 0.1
    dropout_rate: float = 0.0
    mode: str = "regression"


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    gradient_clip_norm: float = 5.0


@dataclass
class FvConfig:
    scope: str = "output-layer"
    aggregation: str = "mean"
    pca_dim: Optional[int] = None
    power_alpha: float = 0.5
    l2: bool = True
    fim: bool = False
    subsample: Optional[int] = None
    pca_samples: Optional[int] = None


@dataclass
class GmmConfig:
    k: Union[int, list] = 4


@dataclass
class SvmConfig:
    C: float = 1.0
    epochs: int = 100


@dataclass
class CcaConfig:
    dim: int = 10
    lambdas: list = field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1, 1.0])
    ks: list = field(default_factory=lambda: [1, 5, 10])


@dataclass
class DataConfig:
    train: Union[str, dict, None] = None
    valid: Union[str, dict, None] = None
    test: Union[str, dict, None] = None
    embeddings: Optional[str] = None
    validation_fraction: float = 0.2


@dataclass
class RunConfig:
    seed: int
    task: str = "classify"
    pooling: str = "rnn-fv"
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    rnn: RnnConfig = field(default_factory=RnnConfig)
    train: TrainSection = field(default_factory=TrainSection)
    fv: FvConfig = field(default_factory=FvConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    cca: CcaConfig = field(default_factory=CcaConfig)
    output_dir: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an explicit integer")
        if self.task not in ("classify", "retrieve"):
            raise ConfigError(f"task must be 'classify' or 'retrieve', got {self.task!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if not 0.0 <= self.data.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")

    _SECTIONS = {"data": DataConfig, "preprocess": PreprocessConfig, "rnn": RnnConfig, "train": TrainSection,
                 "fv": FvConfig, "gmm": GmmConfig, "svm": SvmConfig, "cca": CcaConfig}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in raw:
            raise ConfigError("config needs an explicit 'seed'")
        kwargs = {}
        for key, value in raw.items():
            section = cls._SECTIONS.get(key)
            if section is None:
                kwargs[key] = value
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(section)}
            bad = set(value) - allowed
            if bad:
                raise ConfigError(f"unknown keys in section {key!r}: {sorted(bad)}")
            kwargs[key] = section(**value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class RunReport:
    task: str
    pooling: str
    results: dict
    epochs: list = field(default_factory=list)
    chosen_epoch: Optional[int] = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task": self.task, "pooling": self.pooling, "epochs": self.epochs,
                "chosen_epoch": self.chosen_epoch, "results": self.results, "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def table(self) -> str:
        if self.task == "classify":
            lines = [f"pooling: {self.pooling}"]
            for row in self.epochs:
                lines.append(f"epoch {row['epoch']:>4}  valid acc {100 * row['valid_accuracy']:6.2f}")
            lines.append(f"chosen epoch: {self.chosen_epoch}")
            lines.append(f"test accuracy: {100 * self.results['test_accuracy']:.2f}")
            return "\n".join(lines)
        test = self.results["test"]
        rows = {}
        for name in ("annotation", "search"):
            m = test[name]
            rows[f"{self.pooling} {name}"] = RetrievalMetrics(
                {int(k): v for k, v in m["recall"].items()}, m["median_rank"], m["mean_rank"])
        text = format_metrics_table(rows, ks=sorted(int(k) for k in test["annotation"]["recall"]))
        if "sentence_similarity" in test:
            text += f"\nsentence similarity mean rank: {test['sentence_similarity']['mean_rank']:.1f}"
        return text


def select_epoch(scores) -> int:
    """Index of the best score; ties go to the earliest."""
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside a pipeline stage with the stage name."""
    try:
        yield
    except RnnFvError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc
    except ValueError as exc:
        raise DataError(f"[{name}] {exc}") from exc


def _provenance(cfg: RunConfig, **extra) -> dict:
    out = {"config_sha256": cfg.digest(), "seed": cfg.seed, "package_version": __version__,
           "numpy_version": np.__version__}
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# shared stages


def split_validation(ds: SequenceDataset, fraction: float, seed: int):
    """Split off a validation set by group id (record id when ungrouped)."""
    keys = [r.group if r.group is not None else r.id for r in ds.records]
    groups = sorted(set(keys))
    n_valid = int(round(fraction * len(groups)))
    if n_valid < 1 or n_valid >= len(groups):
        raise ConfigError(f"validation_fraction={fraction} leaves an empty split ({len(groups)} groups)")
    rng = np.random.default_rng(seed)
    chosen = set(np.asarray(groups, dtype=object)[rng.permutation(len(groups))[:n_valid]])
    train_idx = [i for i, k in enumerate(keys) if k not in chosen]
    valid_idx = [i for i, k in enumerate(keys) if k in chosen]
    return ds.subset(train_idx), ds.subset(valid_idx)


def _pca_rows(X, limit: Optional[int], seed: int):
    """At most ``limit`` rows of ``X`` (seeded, order kept) for fitting PCA."""
    if limit is None or X.shape[0] <= limit:
        return X
    if limit < 2:
        raise ConfigError("pca_samples must be >= 2")
    return X[np.sort(np.random.default_rng(seed).choice(X.shape[0], size=limit, replace=False))]


def _preprocess(cfg: PreprocessConfig, train, others, seed: int = 0):
    """Optional PCA (fit on training elements) and per-element L2."""
    if cfg.pca_dim is None and not cfg.l2:
        return train, others
    if not all(isinstance(s, FeatureSequence) for s in train):
        raise ConfigError("element preprocessing needs vector sequences")
    pca = pca_fit(_pca_rows(np.vstack([s.vectors for s in train]), cfg.pca_samples, seed), cfg.pca_dim) \
        if cfg.pca_dim else None

    def apply(seqs):
        out = []
        for s in seqs:
            v = pca_transform(pca, s.vectors) if pca is not None else s.vectors
            if cfg.l2:
                v = l2_normalize(v)
            out.append(FeatureSequence(v, s.label, s.id, s.group))
        return out

    return apply(train), [apply(o) for o in others]


class FeatureChain:
    """Post-pooling chain fitted on training vectors: subsample -> fim -> pca -> power -> l2."""

    def __init__(self, cfg: FvConfig, seed: int, use_fim: bool):
        self.cfg = cfg
        self.seed = seed
        self.use_fim = use_fim
        self.indices = None
        self.fim: Optional[FimDiagonal] = None
        self.pca = None

    def fit(self, raw):
        if self.cfg.subsample is not None:
            self.indices = subsample_indices(raw.shape[1], self.cfg.subsample, self.seed)
            raw = raw[:, self.indices]
        if self.use_fim:
            self.fim = fim_estimate(raw)
            raw = fim_normalize(raw, self.fim)
        if self.cfg.pca_dim is not None:
            self.pca = pca_fit(_pca_rows(raw, self.cfg.pca_samples, self.seed), self.cfg.pca_dim)
        return self

    def transform(self, raw):
        if self.indices is not None:
            raw = raw[:, self.indices]
        if self.fim is not None:
            raw = fim_normalize(raw, self.fim)
        if self.pca is not None:
            raw = pca_transform(self.pca, raw)
        out = power_normalize(raw, self.cfg.power_alpha)
        return l2_normalize(out) if self.cfg.l2 else out

    def steps(self) -> list:
        steps = []
        if self.indices is not None:
            steps.append(f"subsample({len(self.indices)},seed={self.seed})")
        if self.fim is not None:
            steps.append("fim")
        if self.pca is not None:
            steps.append(f"pca({self.pca.output_dim})")
        steps.append(f"power({self.cfg.power_alpha:g})")
        if self.cfg.l2:
            steps.append("l2")
        return steps


def _resolve(path_or_ds, base: Optional[Path] = None):
    if path_or_ds is None or isinstance(path_or_ds, SequenceDataset):
        return path_or_ds
    p = Path(path_or_ds)
    if base is not None and not p.is_absolute():
        p = base / p
    return load_dataset(p)


def _bind(ds: SequenceDataset, cfg: RunConfig, table):
    if ds.kind == "tokens":
        if table is None:
            raise ConfigError("token datasets need data.embeddings")
        return bind_tokens(ds, table, cfg.rnn.mode)
    if cfg.rnn.mode == "classification" and cfg.pooling == "rnn-fv":
        raise ConfigError("classification-mode RNN needs token datasets and an embedding table")
    return list(ds.records)


def _make_arch(cfg: RunConfig, train) -> RnnArchitecture:
    first = train[0]
    out_dim = first.embeddings.size if cfg.rnn.mode == "classification" else first.dim
    try:
        return RnnArchitecture(input_dim=first.dim, lstm_units=cfg.rnn.lstm_units, output_dim=out_dim,
                               fc1_units=cfg.rnn.fc1_units, leaky_relu_slope=cfg.rnn.leaky_relu_slope,
                               mode=cfg.rnn.mode, dropout_rate=cfg.rnn.dropout_rate)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _train_config(cfg: RunConfig) -> TrainConfig:
    try:
        return TrainConfig(seed=cfg.seed, **dataclasses.asdict(cfg.train))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _train_rnn(cfg: RunConfig, train, valid):
    with stage("train-rnn"):
        model = rnn_init(_make_arch(cfg, train), cfg.seed)
        result = rnn_train(model, train, valid, _train_config(cfg))
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        write_loss_curve(result.loss_curve, out / "loss_curve.csv")
        for ck in result.checkpoints:
            export_model(ck.model, out / f"rnn_epoch{ck.epoch:04d}.npz",
                         extra={"epoch": ck.epoch, "train_nll": ck.train_nll, "valid_nll": ck.valid_nll})
    return result


def _pool_static(cfg: RunConfig, pooling: str, train, others, k=None):
    """Raw pooled matrices for mean / gmm-fv pooling."""
    if pooling == "mean":
        return [np.array([mean_pool(s) for s in seqs]) for seqs in [train] + others]
    gmm = gmm_fit(np.vstack([s.vectors for s in train]), k, cfg.seed)
    return [np.array([gmm_fv(gmm, s).values for s in seqs]) for seqs in [train] + others]


def _rnn_pool(cfg: RunConfig, model, seq_sets):
    return [rnn_fv_matrix(model, seqs, cfg.fv.aggregation, cfg.fv.scope) for seqs in seq_sets]


# ---------------------------------------------------------------------------
# classification recipe


def _labels(seqs):
    if any(s.label is None for s in seqs):
        raise DataError("classification needs labels on every record")
    return np.array([s.label for s in seqs], dtype=np.int64)


def _svm_score(cfg, Ftr, ytr, Fev, yev):
    svm = svm_train(Ftr, ytr, cfg.svm.C, cfg.seed, cfg.svm.epochs)
    return svm, classify_accuracy(svm, Fev, yev)


def run_classify(cfg: RunConfig, train=None, valid=None, test=None, base_dir=None) -> RunReport:
    with stage("load"):
        base = Path(base_dir) if base_dir else None
        train_ds = _resolve(train if train is not None else cfg.data.train, base)
        valid_ds = _resolve(valid if valid is not None else cfg.data.valid, base)
        test_ds = _resolve(test if test is not None else cfg.data.test, base)
        if train_ds is None or test_ds is None:
            raise ConfigError("classification needs train and test datasets")
        if valid_ds is None:
            train_ds, valid_ds = split_validation(train_ds, cfg.data.validation_fraction, cfg.seed)
        table = load_embeddings(cfg.data.embeddings) if cfg.data.embeddings else None
        tr, va, te = (_bind(d, cfg, table) for d in (train_ds, valid_ds, test_ds))
    with stage("preprocess"):
        tr, (va, te) = _preprocess(cfg.preprocess, tr, [va, te], cfg.seed)
    ytr, yva, yte = _labels(tr), _labels(va), _labels(te)
    use_fim = cfg.fv.fim and cfg.pooling != "mean"
    epochs_report = []
    extra = {}

    if cfg.pooling == "rnn-fv":
        result = _train_rnn(cfg, tr, va)
        scores = []
        with stage("early-stopping"):
            for ck in result.checkpoints:
                Rtr, Rva = _rnn_pool(cfg, ck.model, [tr, va])
                chain = FeatureChain(cfg.fv, cfg.seed, use_fim).fit(Rtr)
                _, acc = _svm_score(cfg, chain.transform(Rtr), ytr, chain.transform(Rva), yva)
                scores.append(acc)
                epochs_report.append({"epoch": ck.epoch, "train_nll": ck.train_nll, "valid_nll": ck.valid_nll,
                                      "valid_accuracy": acc})
        best = select_epoch(scores)
        chosen = result.checkpoints[best]
        with stage("final"):
            Rtr, Rva, Rte = _rnn_pool(cfg, chosen.model, [tr, va, te])
        valid_acc = scores[best]
        chosen_epoch = chosen.epoch
        if cfg.output_dir:
            export_model(chosen.model, Path(cfg.output_dir) / "rnn_chosen.npz", extra={"epoch": chosen_epoch})
    else:
        ks = cfg.gmm.k if isinstance(cfg.gmm.k, list) else [cfg.gmm.k]
        if cfg.pooling == "mean":
            ks = [None]
        scores, pooled = [], []
        with stage("pool"):
            for k in ks:
                Rtr, Rva, Rte = _pool_static(cfg, cfg.pooling, tr, [va, te], k)
                chain = FeatureChain(cfg.fv, cfg.seed, use_fim).fit(Rtr)
                _, acc = _svm_score(cfg, chain.transform(Rtr), ytr, chain.transform(Rva), yva)
                scores.append(acc)
                pooled.append((Rtr, Rva, Rte))
        best = select_epoch(scores)
        Rtr, Rva, Rte = pooled[best]
        valid_acc = scores[best]
        chosen_epoch = None
        if cfg.pooling == "gmm-fv":
            extra["gmm_k"] = ks[best]
            extra["gmm_validation"] = {str(k): s for k, s in zip(ks, scores)}

    with stage("final"):
        Rall = np.vstack([Rtr, Rva])
        chain = FeatureChain(cfg.fv, cfg.seed, use_fim).fit(Rall)
        Fall, Fte = chain.transform(Rall), chain.transform(Rte)
        svm, test_acc = _svm_score(cfg, Fall, np.concatenate([ytr, yva]), Fte, yte)
        if cfg.output_dir:
            export_model(svm, Path(cfg.output_dir) / "svm.npz")
    results = {"valid_accuracy": valid_acc, "test_accuracy": test_acc, "feature_dim": int(Fte.shape[1]),
               "n_train": len(tr), "n_valid": len(va), "n_test": len(te), "feature_chain": chain.steps()}
    results.update(extra)
    return RunReport("classify", cfg.pooling, results, epochs_report, chosen_epoch, _provenance(cfg))


# ---------------------------------------------------------------------------
# retrieval recipe


def _pair_index(xs: SequenceDataset, ys) -> np.ndarray:
    """Row of the x-side record that each y record describes (via its group id)."""
    for r in xs.records:
        if len(r) != 1:
            raise DataError(f"x-side record {r.id!r} must hold exactly one vector, found {len(r)}")
    lookup = {r.id: i for i, r in enumerate(xs.records)}
    idx = []
    for s in ys:
        if s.group not in lookup:
            raise DataError(f"unpaired record {s.id!r}: group {s.group!r} names no x-side record")
        idx.append(lookup[s.group])
    return np.array(idx, dtype=np.int64)


def retrieval_report(x_proj, y_proj, pair, ks=(1, 5, 10)) -> dict:
    """Both retrieval directions plus sentence-to-sentence mean rank.

    ``pair[j]`` is the x row matched with y row ``j``.
    """
    return similarity_report(cosine_similarity_matrix(x_proj, y_proj), cosine_similarity_matrix(y_proj, y_proj),
                             pair, ks)


def similarity_report(sim, sim_yy, pair, ks=(1, 5, 10)) -> dict:
    """Same as :func:`retrieval_report` but from (possibly fused) similarity matrices."""
    sim = np.asarray(sim, dtype=np.float64)
    pair = np.asarray(pair)
    n_x = sim.shape[0]
    owners = [np.flatnonzero(pair == i) for i in range(n_x)]
    queried = [i for i in range(n_x) if owners[i].size]
    annotation = retrieval_metrics(rank_similarity(sim[queried]), [owners[i] for i in queried], ks)
    search = retrieval_metrics(rank_similarity(sim.T), [np.array([p]) for p in pair], ks)
    out = {"annotation": annotation.to_dict(), "search": search.to_dict()}
    siblings = [owners[p][owners[p] != j] for j, p in enumerate(pair)]
    has = [j for j, s in enumerate(siblings) if s.size]
    if has and sim_yy is not None:
        ss = np.array(sim_yy, dtype=np.float64)
        np.fill_diagonal(ss, -np.inf)
        metric = retrieval_metrics(rank_similarity(ss[has]), [siblings[j] for j in has], ks)
        out["sentence_similarity"] = {"mean_rank": metric.mean_rank}
    return out


def _retrieval_score(report: dict) -> float:
    vals = [v for side in ("annotation", "search") for v in report[side]["recall"].values()]
    return float(np.mean(vals))


def run_retrieve(cfg: RunConfig, data: Optional[dict] = None, base_dir=None) -> RunReport:
    """``data`` maps split name -> (x dataset, y dataset); otherwise paths come from ``cfg.data``."""
    with stage("load"):
        base = Path(base_dir) if base_dir else None
        splits = {}
        for name in ("train", "valid", "test"):
            if data is not None and name in data:
                xs, ys = data[name]
            else:
                entry = getattr(cfg.data, name)
                if entry is None:
                    raise ConfigError(f"retrieval needs a {name} split with x and y datasets")
                if not isinstance(entry, dict) or set(entry) != {"x", "y"}:
                    raise ConfigError(f"data.{name} must be an object with 'x' and 'y' paths")
                xs, ys = _resolve(entry["x"], base), _resolve(entry["y"], base)
            splits[name] = (xs, ys)
        table = load_embeddings(cfg.data.embeddings) if cfg.data.embeddings else None
        seqs = {n: _bind(ys, cfg, table) for n, (_, ys) in splits.items()}
        X = {n: np.vstack([r.vectors for r in xs.records]) for n, (xs, _) in splits.items()}
        pairs = {n: _pair_index(splits[n][0], seqs[n]) for n in splits}
    with stage("preprocess"):
        seqs["train"], (seqs["valid"], seqs["test"]) = _preprocess(cfg.preprocess, seqs["train"],
                                                                   [seqs["valid"], seqs["test"]], cfg.seed)
    ks = tuple(int(k) for k in cfg.cca.ks)
    use_fim = cfg.fv.fim and cfg.pooling != "mean"

    def evaluate(raw_tr, raw_ev, split):
        chain = FeatureChain(cfg.fv, cfg.seed, use_fim).fit(raw_tr)
        Ftr, Fev = chain.transform(raw_tr), chain.transform(raw_ev)
        best = None
        for lam in cfg.cca.lambdas:
            cca = cca_fit(X["train"][pairs["train"]], Ftr, cfg.cca.dim, lam)
            rep = retrieval_report(cca_transform(cca, X[split], "x"), cca_transform(cca, Fev, "y"), pairs[split], ks)
            score = _retrieval_score(rep)
            if best is None or score > best[0]:
                best = (score, lam, rep, chain)
        return best

    epochs_report = []
    candidates = []
    with stage("model-selection"):
        if cfg.pooling == "rnn-fv":
            result = _train_rnn(cfg, seqs["train"], seqs["valid"])
            for ck in result.checkpoints:
                Rtr, Rva = _rnn_pool(cfg, ck.model, [seqs["train"], seqs["valid"]])
                score, lam, _, _ = evaluate(Rtr, Rva, "valid")
                epochs_report.append({"epoch": ck.epoch, "train_nll": ck.train_nll, "valid_nll": ck.valid_nll,
                                      "valid_score": score, "lambda": lam})
                candidates.append((score, ck))
        else:
            gk = cfg.gmm.k if isinstance(cfg.gmm.k, list) else [cfg.gmm.k]
            for k in ([None] if cfg.pooling == "mean" else gk):
                Rtr, Rva = _pool_static(cfg, cfg.pooling, seqs["train"], [seqs["valid"]], k)
                score, lam, _, _ = evaluate(Rtr, Rva, "valid")
                candidates.append((score, k))
    best = select_epoch([c[0] for c in candidates])
    chosen = candidates[best][1]
    with stage("test"):
        if cfg.pooling == "rnn-fv":
            Rtr, Rva, Rte = _rnn_pool(cfg, chosen.model, [seqs["train"], seqs["valid"], seqs["test"]])
            chosen_epoch = chosen.epoch
        else:
            Rtr, Rva, Rte = _pool_static(cfg, cfg.pooling, seqs["train"], [seqs["valid"], seqs["test"]], chosen)
            chosen_epoch = None
        valid_score, lam, _, _ = evaluate(Rtr, Rva, "valid")
        chain = FeatureChain(cfg.fv, cfg.seed, use_fim).fit(Rtr)
        Ftr, Fte = chain.transform(Rtr), chain.transform(Rte)
        cca = cca_fit(X["train"][pairs["train"]], Ftr, cfg.cca.dim, lam)
        test_rep = retrieval_report(cca_transform(cca, X["test"], "x"), cca_transform(cca, Fte, "y"),
                                    pairs["test"], ks)
        if cfg.output_dir:
            export_model(cca, Path(cfg.output_dir) / "cca.npz")
    results = {"valid_score": valid_score, "lambda": lam, "test": test_rep, "cca_dim": cca.dim,
               "feature_chain": chain.steps(), "gallery": {"images": int(X["test"].shape[0]),
                                                          "sentences": len(seqs["test"])}}
    if cfg.pooling == "gmm-fv":
        results["gmm_k"] = chosen
    return RunReport("retrieve", cfg.pooling, results, epochs_report, chosen_epoch, _provenance(cfg))


def run(cfg: RunConfig, base_dir=None) -> RunReport:
    if cfg.task == "classify":
        return run_classify(cfg, base_dir=base_dir)
    return run_retrieve(cfg, base_dir=base_dir)
